#pragma once

// Executable PT_LOAD segments of an ELF64 little-endian file. Section
// headers are ignored.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "pkusim/machine.hpp"

namespace pkusim {

struct ElfExecSegment {
    Addr vaddr = 0;
    Bytes bytes;
    std::uint32_t flags = 0;  // PF_X | PF_W | PF_R
};

class ElfError : public std::runtime_error {
public:
    enum class Kind { NotElf, Malformed };
    ElfError(Kind k, const std::string& what) : std::runtime_error(what), kind(k) {}
    Kind kind;
};

/// Throws ElfError::NotElf on bad magic or a non-64-bit/non-LE class and
/// ElfError::Malformed when a header or segment lies outside the file.
std::vector<ElfExecSegment> elf_exec_segments(std::span<const std::uint8_t> file);

}  // namespace pkusim
