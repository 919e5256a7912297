#pragma once

// Byte-level search for PKRU-modifying instructions (wrpkru, xrstor) at
// every offset, with safe/unsafe classification by the bytes that follow.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pkusim/machine.hpp"

namespace pkusim {

enum class UnsafeKind { Wrpkru, Xrstor };

std::string_view to_string(UnsafeKind k);

struct UnsafeOccurrence {
    Addr addr = 0;
    UnsafeKind kind = UnsafeKind::Wrpkru;
    bool safe = false;
    bool spanning = false;
    std::uint8_t length = 0;

    friend bool operator==(const UnsafeOccurrence&, const UnsafeOccurrence&) = default;
};

/// Suffix that must follow an occurrence for it to count as safe.
/// nullopt entries are wildcards.
struct SafePattern {
    std::string name;
    std::vector<std::optional<std::uint8_t>> suffix;
    UnsafeKind applies_to = UnsafeKind::Wrpkru;

    /// "3d 0c 00 00 00 74 ?? cc"; throws std::invalid_argument on bad input
    /// or an all-wildcard template.
    static SafePattern parse(std::string name, UnsafeKind kind, std::string_view tmpl);
    bool matches(std::span<const std::uint8_t> after) const;
};

/// Longest xrstor form: 0F AE modrm sib disp32.
inline constexpr std::size_t kMaxOccurrenceLength = 8;
/// Bytes taken from each side of a seam by scan_boundary.
inline constexpr std::size_t kBoundaryWindow = 8;
static_assert(kBoundaryWindow >= kMaxOccurrenceLength);

/// `cmp eax, <locked>; je +1; int3` after wrpkru: execution only continues
/// when the value just written is the locked one.
SafePattern lock_check_pattern(PkruValue locked);
/// `test eax, 0x200; jz +1; int3` after xrstor.
SafePattern xrstor_check_pattern();
std::vector<SafePattern> default_patterns(PkruValue locked);

/// Kind and full encoded length of an occurrence starting at bytes[0], if
/// one starts there and fits entirely.
std::optional<std::pair<UnsafeKind, std::size_t>> occurrence_at(std::span<const std::uint8_t> bytes);

std::vector<UnsafeOccurrence> scan_bytes(std::span<const std::uint8_t> bytes, Addr base,
                                         const std::vector<SafePattern>& patterns);

struct CodeView {
    Addr start = 0;
    std::span<const std::uint8_t> bytes;

    Addr end() const { return start + bytes.size(); }
};

/// Occurrences whose encoding crosses from `left` into `right`. Empty when
/// the two are not adjacent.
std::vector<UnsafeOccurrence> scan_boundary(const CodeView& left, const CodeView& right,
                                            const std::vector<SafePattern>& patterns);

/// `<hex addr> <wrpkru|xrstor> <safe|unsafe> <spanning|contig> len=<n>`
std::string format_occurrence(const UnsafeOccurrence& occ);
/// Inverse of format_occurrence.
std::optional<UnsafeOccurrence> parse_occurrence(std::string_view line);

}  // namespace pkusim
