#include "pkusim/elf.hpp"

#include <cstring>

namespace pkusim {

namespace {

constexpr std::uint32_t kPtLoad = 1;
constexpr std::uint32_t kPfX = 1;

template <class T>
T read_le(std::span<const std::uint8_t> f, std::uint64_t off) {
    if (off > f.size() || f.size() - off < sizeof(T))
        throw ElfError(ElfError::Kind::Malformed, "read past end of file at offset " + std::to_string(off));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
        v |= static_cast<T>(static_cast<T>(f[off + i]) << (8 * i));
    return v;
}

}  // namespace

std::vector<ElfExecSegment> elf_exec_segments(std::span<const std::uint8_t> f) {
    if (f.size() < 4 || std::memcmp(f.data(), "\x7f" "ELF", 4) != 0)
        throw ElfError(ElfError::Kind::NotElf, "bad ELF magic");
    if (f.size() < 6 || f[4] != 2 || f[5] != 1)
        throw ElfError(ElfError::Kind::NotElf, "not a 64-bit little-endian ELF");

    auto phoff = read_le<std::uint64_t>(f, 0x20);
    auto phentsize = read_le<std::uint16_t>(f, 0x36);
    auto phnum = read_le<std::uint16_t>(f, 0x38);
    if (phnum && phentsize < 56)
        throw ElfError(ElfError::Kind::Malformed, "program header entry too small");

    std::vector<ElfExecSegment> out;
    for (std::uint16_t i = 0; i < phnum; ++i) {
        std::uint64_t ph = phoff + static_cast<std::uint64_t>(i) * phentsize;
        if (ph < phoff || ph > f.size() || f.size() - ph < 56)
            throw ElfError(ElfError::Kind::Malformed, "program header " + std::to_string(i) + " outside file");
        auto type = read_le<std::uint32_t>(f, ph);
        auto flags = read_le<std::uint32_t>(f, ph + 4);
        if (type != kPtLoad || !(flags & kPfX))
            continue;
        auto offset = read_le<std::uint64_t>(f, ph + 8);
        auto vaddr = read_le<std::uint64_t>(f, ph + 16);
        auto filesz = read_le<std::uint64_t>(f, ph + 32);
        if (offset > f.size() || f.size() - offset < filesz)
            throw ElfError(ElfError::Kind::Malformed, "segment " + std::to_string(i) + " outside file");
        ElfExecSegment seg;
        seg.vaddr = vaddr;
        seg.flags = flags;
        seg.bytes.assign(f.begin() + static_cast<std::ptrdiff_t>(offset),
                         f.begin() + static_cast<std::ptrdiff_t>(offset + filesz));
        out.push_back(std::move(seg));
    }
    return out;
}

}  // namespace pkusim
