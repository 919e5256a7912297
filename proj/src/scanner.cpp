#include "pkusim/scanner.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "pkusim/x86.hpp"

namespace pkusim {

std::string_view to_string(UnsafeKind k) {
    return k == UnsafeKind::Wrpkru ? "wrpkru" : "xrstor";
}

SafePattern SafePattern::parse(std::string name, UnsafeKind kind, std::string_view tmpl) {
    SafePattern p;
    p.name = std::move(name);
    p.applies_to = kind;
    std::istringstream in{std::string(tmpl)};
    std::string tok;
    while (in >> tok) {
        if (tok == "??") {
            p.suffix.emplace_back();
            continue;
        }
        unsigned v = 0;
        auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v, 16);
        if (ec != std::errc() || ptr != tok.data() + tok.size() || tok.size() > 2)
            throw std::invalid_argument("bad pattern byte: " + tok);
        p.suffix.emplace_back(static_cast<std::uint8_t>(v));
    }
    if (p.suffix.empty() || std::none_of(p.suffix.begin(), p.suffix.end(), [](auto b) { return b.has_value(); }))
        throw std::invalid_argument("pattern needs at least one fixed byte");
    return p;
}

bool SafePattern::matches(std::span<const std::uint8_t> after) const {
    if (after.size() < suffix.size())
        return false;
    for (std::size_t i = 0; i < suffix.size(); ++i)
        if (suffix[i] && *suffix[i] != after[i])
            return false;
    return true;
}

SafePattern lock_check_pattern(PkruValue locked) {
    std::uint32_t v = locked.bits();
    SafePattern p;
    p.name = "lock-check";
    p.applies_to = UnsafeKind::Wrpkru;
    p.suffix = {0x3D,
                static_cast<std::uint8_t>(v),
                static_cast<std::uint8_t>(v >> 8),
                static_cast<std::uint8_t>(v >> 16),
                static_cast<std::uint8_t>(v >> 24),
                0x74,
                0x01,
                0xCC};
    return p;
}

SafePattern xrstor_check_pattern() {
    return SafePattern::parse("xrstor-bit9-check", UnsafeKind::Xrstor, "a9 00 02 00 00 74 01 cc");
}

std::vector<SafePattern> default_patterns(PkruValue locked) {
    return {lock_check_pattern(locked), xrstor_check_pattern()};
}

std::optional<std::pair<UnsafeKind, std::size_t>> occurrence_at(std::span<const std::uint8_t> b) {
    if (b.size() < 3 || b[0] != 0x0F)
        return std::nullopt;
    if (b[1] == 0x01 && b[2] == 0xEF)
        return std::pair{UnsafeKind::Wrpkru, std::size_t{3}};
    if (b[1] == 0xAE && ((b[2] >> 3) & 7) == 5 && (b[2] >> 6) != 3) {
        auto n = x86::modrm_operand_length(b.subspan(2));
        if (!n)
            return std::nullopt;
        return std::pair{UnsafeKind::Xrstor, 2 + *n};
    }
    return std::nullopt;
}

namespace {

bool classify(std::span<const std::uint8_t> after, UnsafeKind kind, const std::vector<SafePattern>& patterns) {
    for (const auto& p : patterns)
        if (p.applies_to == kind && p.matches(after))
            return true;
    return false;
}

std::size_t max_pattern_length(const std::vector<SafePattern>& patterns) {
    std::size_t n = 0;
    for (const auto& p : patterns)
        n = std::max(n, p.suffix.size());
    return n;
}

}  // namespace

std::vector<UnsafeOccurrence> scan_bytes(std::span<const std::uint8_t> bytes, Addr base,
                                         const std::vector<SafePattern>& patterns) {
    std::vector<UnsafeOccurrence> out;
    for (std::size_t i = 0; i + 3 <= bytes.size(); ++i) {
        auto hit = occurrence_at(bytes.subspan(i));
        if (!hit)
            continue;
        auto [kind, len] = *hit;
        UnsafeOccurrence occ;
        occ.addr = base + i;
        occ.kind = kind;
        occ.length = static_cast<std::uint8_t>(len);
        occ.safe = classify(bytes.subspan(i + len), kind, patterns);
        out.push_back(occ);
    }
    return out;
}

std::vector<UnsafeOccurrence> scan_boundary(const CodeView& left, const CodeView& right,
                                            const std::vector<SafePattern>& patterns) {
    std::vector<UnsafeOccurrence> out;
    if (right.start != left.end() || left.bytes.empty() || right.bytes.empty())
        return out;
    std::size_t take_left = std::min(left.bytes.size(), kBoundaryWindow);
    // Extra bytes from the right side so suffixes of spanning occurrences can
    // be classified.
    std::size_t take_right = std::min(right.bytes.size(), kBoundaryWindow + max_pattern_length(patterns));
    Bytes window(left.bytes.end() - static_cast<std::ptrdiff_t>(take_left), left.bytes.end());
    window.insert(window.end(), right.bytes.begin(), right.bytes.begin() + static_cast<std::ptrdiff_t>(take_right));
    Addr wbase = left.end() - take_left;
    std::span<const std::uint8_t> w(window);
    for (std::size_t i = 0; i < take_left; ++i) {
        auto hit = occurrence_at(w.subspan(i));
        if (!hit)
            continue;
        auto [kind, len] = *hit;
        if (i + len <= take_left)
            continue;  // entirely inside left
        UnsafeOccurrence occ;
        occ.addr = wbase + i;
        occ.kind = kind;
        occ.length = static_cast<std::uint8_t>(len);
        occ.spanning = true;
        occ.safe = classify(w.subspan(i + len), kind, patterns);
        out.push_back(occ);
    }
    return out;
}

std::string format_occurrence(const UnsafeOccurrence& occ) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "0x%llx %s %s %s len=%u", static_cast<unsigned long long>(occ.addr),
                  std::string(to_string(occ.kind)).c_str(), occ.safe ? "safe" : "unsafe",
                  occ.spanning ? "spanning" : "contig", static_cast<unsigned>(occ.length));
    return buf;
}

std::optional<UnsafeOccurrence> parse_occurrence(std::string_view line) {
    std::istringstream in{std::string(line)};
    std::string addr, kind, safe, span, len;
    if (!(in >> addr >> kind >> safe >> span >> len))
        return std::nullopt;
    UnsafeOccurrence occ;
    if (addr.rfind("0x", 0) != 0)
        return std::nullopt;
    auto [p, ec] = std::from_chars(addr.data() + 2, addr.data() + addr.size(), occ.addr, 16);
    if (ec != std::errc() || p != addr.data() + addr.size())
        return std::nullopt;
    if (kind == "wrpkru")
        occ.kind = UnsafeKind::Wrpkru;
    else if (kind == "xrstor")
        occ.kind = UnsafeKind::Xrstor;
    else
        return std::nullopt;
    if (safe != "safe" && safe != "unsafe")
        return std::nullopt;
    occ.safe = safe == "safe";
    if (span != "spanning" && span != "contig")
        return std::nullopt;
    occ.spanning = span == "spanning";
    if (len.rfind("len=", 0) != 0)
        return std::nullopt;
    unsigned n = 0;
    auto [p2, ec2] = std::from_chars(len.data() + 4, len.data() + len.size(), n);
    if (ec2 != std::errc() || p2 != len.data() + len.size())
        return std::nullopt;
    occ.length = static_cast<std::uint8_t>(n);
    return occ;
}

}  // namespace pkusim
