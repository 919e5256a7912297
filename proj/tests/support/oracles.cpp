#include "oracles.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "pkusim/kernel.hpp"

namespace pkusim::oracle {

namespace {

constexpr Addr kCode = 0x400000;
constexpr Addr kData = 0x10000000;
constexpr Addr kDataLen = 16 * kPageSize;
constexpr ProtectionKey kDataKey{2};

std::string hexstr(std::span<const std::uint8_t> b) {
    std::string s;
    char buf[4];
    for (auto x : b) {
        std::snprintf(buf, sizeof buf, "%02x", x);
        s += buf;
    }
    return s;
}

Bytes parse_hex(const std::string& s) {
    Bytes out;
    for (std::size_t i = 0; i + 1 < s.size(); i += 2)
        out.push_back(static_cast<std::uint8_t>(std::stoul(s.substr(i, 2), nullptr, 16)));
    return out;
}

void le32(Bytes& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
        b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

Bytes lock_suffix(PkruValue locked) {
    Bytes b{0x3D};
    le32(b, locked.bits());
    b.insert(b.end(), {0x74, 0x01, 0xCC});
    return b;
}

const Bytes kXrstorSuffix{0xA9, 0x00, 0x02, 0x00, 0x00, 0x74, 0x01, 0xCC};

std::uint64_t pick(std::mt19937_64& rng, std::uint64_t lo, std::uint64_t hi) {
    return std::uniform_int_distribution<std::uint64_t>(lo, hi)(rng);
}

bool coin(std::mt19937_64& rng) { return rng() & 1; }

}  // namespace

std::string fixture_path(const std::string& name) { return std::string(PKUSIM_FIXTURES) + "/" + name; }

std::vector<CorpusEntry> load_corpus(const std::string& name) {
    std::ifstream in(fixture_path(name));
    if (!in)
        throw std::runtime_error("missing fixture " + name);
    std::vector<CorpusEntry> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#')
            continue;
        auto a = line.find('|');
        auto b = line.find('|', a + 1);
        out.push_back({parse_hex(line.substr(0, a)), std::stoul(line.substr(a + 1, b - a - 1)), line.substr(b + 1)});
    }
    return out;
}

std::vector<ModrmEntry> load_modrm_table() {
    std::ifstream in(fixture_path("xrstor_modrm_objdump.txt"));
    if (!in)
        throw std::runtime_error("missing fixture xrstor_modrm_objdump.txt");
    std::vector<ModrmEntry> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#')
            continue;
        std::istringstream ls(line);
        std::string m, s, mn;
        std::size_t len = 0;
        ls >> m >> s >> len;
        std::getline(ls >> std::ws, mn);
        out.push_back({static_cast<std::uint8_t>(std::stoul(m, nullptr, 16)),
                       static_cast<std::uint8_t>(std::stoul(s, nullptr, 16)), len, mn});
    }
    return out;
}

std::vector<UnsafeOccurrence> reference_scan(std::span<const std::uint8_t> b, Addr base, PkruValue locked) {
    const Bytes lock = lock_suffix(locked);
    std::vector<UnsafeOccurrence> out;
    const std::size_t n = b.size();
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t len = 0;
        UnsafeKind kind{};
        if (i + 3 <= n && b[i] == 0x0F && b[i + 1] == 0x01 && b[i + 2] == 0xEF) {
            len = 3;
            kind = UnsafeKind::Wrpkru;
        } else if (i + 3 <= n && b[i] == 0x0F && b[i + 1] == 0xAE) {
            unsigned mod = b[i + 2] >> 6, reg = (b[i + 2] >> 3) & 7, rm = b[i + 2] & 7;
            if (reg != 5 || mod == 3)
                continue;
            len = 3;
            if (rm == 4) {
                if (i + 4 > n)
                    continue;
                len += 1;
                if (mod == 0 && (b[i + 3] & 7) == 5)
                    len += 4;
            } else if (mod == 0 && rm == 5) {
                len += 4;
            }
            len += mod == 1 ? 1 : mod == 2 ? 4 : 0;
            if (i + len > n)
                continue;
            kind = UnsafeKind::Xrstor;
        } else {
            continue;
        }
        const Bytes& want = kind == UnsafeKind::Wrpkru ? lock : kXrstorSuffix;
        bool safe = i + len + want.size() <= n && std::equal(want.begin(), want.end(), b.begin() + i + len);
        out.push_back({base + i, kind, safe, false, static_cast<std::uint8_t>(len)});
    }
    return out;
}

Bytes random_code_bytes(std::mt19937_64& rng, std::size_t n, PkruValue locked) {
    static const std::uint8_t alphabet[] = {0x0F, 0x01, 0xEF, 0xAE, 0x3D, 0x0C, 0x00, 0x74, 0xCC, 0xA9,
                                            0x02, 0x2F, 0x28, 0x25, 0x2C, 0x6D, 0xAC, 0x24, 0x04, 0x05};
    const Bytes lock = lock_suffix(locked);
    std::vector<Bytes> fragments = {
        {0x0F, 0x01, 0xEF},
        {0x0F, 0xAE, 0x2F},
        {0x0F, 0xAE, 0x2C, 0x25},
        {0x0F, 0xAE, 0xAC, 0x24, 0x00, 0x01, 0x00, 0x00},
        lock,
        kXrstorSuffix,
    };
    Bytes gate{0x0F, 0x01, 0xEF};
    gate.insert(gate.end(), lock.begin(), lock.end());
    fragments.push_back(gate);
    Bytes xr{0x0F, 0xAE, 0x2F};
    xr.insert(xr.end(), kXrstorSuffix.begin(), kXrstorSuffix.end());
    fragments.push_back(xr);

    Bytes out;
    out.reserve(n);
    while (out.size() < n) {
        auto r = pick(rng, 0, 99);
        if (r < 4) {
            const Bytes& f = fragments[pick(rng, 0, fragments.size() - 1)];
            // Sometimes only a prefix of the fragment, to make near misses.
            std::size_t take = coin(rng) ? f.size() : pick(rng, 1, f.size());
            out.insert(out.end(), f.begin(), f.begin() + static_cast<std::ptrdiff_t>(take));
        } else if (r < 6) {
            out.insert(out.end(), {0x0F, 0xAE, static_cast<std::uint8_t>(rng())});
        } else if (r < 50) {
            out.push_back(alphabet[pick(rng, 0, std::size(alphabet) - 1)]);
        } else {
            out.push_back(static_cast<std::uint8_t>(rng()));
        }
    }
    out.resize(n);
    return out;
}

namespace {

const PkruValue kLocked = PkruValue::locking(ProtectionKey{1});

std::size_t random_length(std::mt19937_64& rng, std::size_t i, std::size_t max_len) {
    if (i < 4)
        return max_len;
    auto r = pick(rng, 0, 99);
    if (r < 85)
        return pick(rng, 0, std::min<std::size_t>(max_len, 1024));
    if (r < 97)
        return pick(rng, 0, std::min<std::size_t>(max_len, 16384));
    return pick(rng, 0, max_len);
}

void compare_scan(CheckResult& res, const Bytes& b, Addr base, const std::vector<SafePattern>& pats) {
    ++res.cases;
    auto got = scan_bytes(b, base, pats);
    auto want = reference_scan(b, base, kLocked);
    if (got == want)
        return;
    std::ostringstream o;
    o << "len " << b.size() << ": scanner " << got.size() << " occurrences, reference " << want.size();
    for (std::size_t i = 0; i < std::min(got.size(), want.size()); ++i)
        if (!(got[i] == want[i])) {
            o << "; first difference " << format_occurrence(got[i]) << " vs " << format_occurrence(want[i]);
            break;
        }
    res.fail(o.str());
}

}  // namespace

CheckResult check_scanner_random(std::uint64_t seed, std::size_t count, std::size_t max_len) {
    std::mt19937_64 rng(seed);
    auto pats = default_patterns(kLocked);
    CheckResult res;
    for (std::size_t i = 0; i < count; ++i) {
        Bytes b = random_code_bytes(rng, random_length(rng, i, max_len), kLocked);
        compare_scan(res, b, pick(rng, 0, 1) ? 0 : pick(rng, 0, 0xffffffff), pats);
    }
    return res;
}

CheckResult check_scanner_fixtures() {
    auto pats = default_patterns(kLocked);
    CheckResult res;
    Bytes all;
    for (const auto& e : load_corpus("asm_corpus.txt")) {
        compare_scan(res, e.bytes, 0x1000, pats);
        all.insert(all.end(), e.bytes.begin(), e.bytes.end());
    }
    compare_scan(res, all, 0x1000, pats);
    Bytes table;
    for (const auto& m : load_modrm_table()) {
        Bytes b{0x0F, 0xAE, m.modrm, m.sib, 0, 0, 0, 0};
        compare_scan(res, b, 0, pats);
        table.insert(table.end(), b.begin(), b.end());
    }
    compare_scan(res, table, 0, pats);
    for (const auto& e : load_corpus("attack_payload.txt"))
        compare_scan(res, e.bytes, 0, pats);
    return res;
}

namespace {

using Parts = std::map<Addr, std::pair<UnsafeOccurrence, int>>;  // 0 left, 1 right, 2 seam

std::size_t max_suffix(const std::vector<SafePattern>& pats) {
    std::size_t m = 0;
    for (const auto& p : pats)
        m = std::max(m, p.suffix.size());
    return m;
}

void add_parts(CheckResult& res, Parts& parts, const std::vector<UnsafeOccurrence>& v, int from, std::size_t split) {
    for (auto o : v) {
        o.spanning = false;
        if (!parts.emplace(o.addr, std::pair{o, from}).second)
            res.fail("split " + std::to_string(split) + ": duplicate occurrence at " + std::to_string(o.addr));
    }
}

void check_seam(CheckResult& res, const std::vector<UnsafeOccurrence>& seam, Addr seam_addr, std::size_t split) {
    for (const auto& o : seam)
        if (!o.spanning || o.addr >= seam_addr || o.addr + o.length <= seam_addr)
            res.fail("split " + std::to_string(split) + ": seam occurrence does not cross the seam");
}

// `whole` is the slice of scan(A ++ B) that `parts` claims to describe.
void compare_parts(CheckResult& res, const Parts& parts, std::span<const UnsafeOccurrence> whole, std::size_t split,
                   Addr seam_addr, std::size_t max_pat) {
    if (whole.size() != parts.size()) {
        res.fail("split " + std::to_string(split) + ": " + std::to_string(parts.size()) + " pieces vs " +
                 std::to_string(whole.size()) + " whole");
        return;
    }
    for (const auto& w : whole) {
        auto it = parts.find(w.addr);
        if (it == parts.end()) {
            res.fail("split " + std::to_string(split) + ": missed " + format_occurrence(w));
            return;
        }
        const auto& [p, from] = it->second;
        if (p.kind != w.kind || p.length != w.length) {
            res.fail("split " + std::to_string(split) + ": " + format_occurrence(p) + " vs " + format_occurrence(w));
            return;
        }
        // A left-side occurrence whose suffix runs past the seam cannot be
        // shown safe from the left bytes alone; it must then read unsafe.
        bool truncated = from == 0 && w.addr + w.length + max_pat > seam_addr;
        if (truncated ? (p.safe && !w.safe) : p.safe != w.safe) {
            res.fail("split " + std::to_string(split) + ": safety of " + format_occurrence(w));
            return;
        }
    }
}

void check_split(CheckResult& res, const Bytes& ab, const std::vector<UnsafeOccurrence>& whole, std::size_t split,
                 Addr base, const std::vector<SafePattern>& pats, std::size_t max_pat) {
    ++res.cases;
    std::span<const std::uint8_t> all(ab);
    auto a = all.first(split);
    auto b = all.subspan(split);
    Parts parts;
    add_parts(res, parts, scan_bytes(a, base, pats), 0, split);
    add_parts(res, parts, scan_bytes(b, base + split, pats), 1, split);
    auto seam = scan_boundary({base, a}, {base + split, b}, pats);
    check_seam(res, seam, base + split, split);
    add_parts(res, parts, seam, 2, split);
    compare_parts(res, parts, whole, split, base + split, max_pat);
}

// Farthest an occurrence's classification looks past its first byte.
std::size_t reach(std::size_t max_pat) { return kMaxOccurrenceLength + max_pat; }

std::span<const UnsafeOccurrence> slice(const std::vector<UnsafeOccurrence>& v, Addr lo, Addr hi) {
    auto by_addr = [](const UnsafeOccurrence& o, Addr a) { return o.addr < a; };
    auto first = std::lower_bound(v.begin(), v.end(), lo, by_addr);
    auto last = std::lower_bound(first, v.end(), hi, by_addr);
    return {first, last};
}

// The same split as check_split, with A and B rescanned only within `window`
// bytes of the seam. Occurrences farther away are classified from bytes the
// split does not touch, which check_forward_locality establishes.
void check_split_windowed(CheckResult& res, const Bytes& ab, const std::vector<UnsafeOccurrence>& whole,
                          std::size_t split, Addr base, const std::vector<SafePattern>& pats, std::size_t max_pat,
                          std::size_t window) {
    ++res.cases;
    std::span<const std::uint8_t> all(ab);
    std::size_t lo = split > window ? split - window : 0;
    std::size_t hi = std::min(ab.size(), split + window);
    Addr cut = hi == ab.size() ? base + hi : base + hi - reach(max_pat);
    auto a = all.subspan(lo, split - lo);
    Parts parts;
    add_parts(res, parts, scan_bytes(a, base + lo, pats), 0, split);
    std::vector<UnsafeOccurrence> right;
    for (const auto& o : scan_bytes(all.subspan(split, hi - split), base + split, pats))
        if (o.addr < cut)
            right.push_back(o);
    add_parts(res, parts, right, 1, split);
    auto seam = scan_boundary({base + lo, a}, {base + split, all.subspan(split)}, pats);
    check_seam(res, seam, base + split, split);
    add_parts(res, parts, seam, 2, split);
    compare_parts(res, parts, slice(whole, base + lo, cut), split, base + split, max_pat);
}

}  // namespace

CheckResult check_forward_locality(std::uint64_t seed, std::size_t count, std::size_t max_len) {
    std::mt19937_64 rng(seed);
    auto pats = default_patterns(kLocked);
    std::size_t r = reach(max_suffix(pats));
    CheckResult res;
    for (std::size_t i = 0; i < count; ++i) {
        Bytes b = random_code_bytes(rng, random_length(rng, i, max_len), kLocked);
        Addr base = 0x10000;
        auto whole = scan_bytes(b, base, pats);
        for (int k = 0; k < 16; ++k) {
            ++res.cases;
            std::size_t lo = pick(rng, 0, b.size());
            std::size_t hi = pick(rng, lo, std::min(b.size(), lo + 4 * r));
            Addr cut = hi == b.size() ? base + hi : base + hi - std::min(hi, r);
            std::vector<UnsafeOccurrence> got;
            for (const auto& o : scan_bytes(std::span<const std::uint8_t>(b).subspan(lo, hi - lo), base + lo, pats))
                if (o.addr < cut)
                    got.push_back(o);
            auto want = slice(whole, base + lo, cut);
            if (!std::equal(got.begin(), got.end(), want.begin(), want.end()))
                res.fail("len " + std::to_string(b.size()) + " window [" + std::to_string(lo) + ", " +
                         std::to_string(hi) + "): " + std::to_string(got.size()) + " vs " +
                         std::to_string(want.size()) + " occurrences");
        }
    }
    return res;
}

CheckResult check_concatenation(std::uint64_t seed, std::size_t count, std::size_t max_len,
                                std::size_t full_rescan_up_to) {
    std::mt19937_64 rng(seed);
    auto pats = default_patterns(kLocked);
    std::size_t max_pat = max_suffix(pats);
    std::size_t window = 4 * reach(max_pat);
    CheckResult res;
    for (std::size_t i = 0; i < count; ++i) {
        Bytes b = random_code_bytes(rng, random_length(rng, i, max_len), kLocked);
        Addr base = 0x10000;
        auto whole = scan_bytes(b, base, pats);
        for (std::size_t s = 0; s <= b.size(); ++s) {
            if (b.size() <= full_rescan_up_to)
                check_split(res, b, whole, s, base, pats, max_pat);
            else
                check_split_windowed(res, b, whole, s, base, pats, max_pat, window);
        }
    }
    return res;
}

// --- emulator differential ----------------------------------------------------------

const std::vector<x86::Opcode>& all_opcodes() {
    using x86::Opcode;
    static const std::vector<Opcode> ops = {
        Opcode::Nop,    Opcode::MovRegImm, Opcode::MovRegReg, Opcode::MovRegMem,  Opcode::MovMemReg,
        Opcode::AddRegImm, Opcode::CmpRegImm, Opcode::TestRegImm, Opcode::JmpRel, Opcode::JccRel,
        Opcode::CallRel, Opcode::Ret,     Opcode::PushReg,   Opcode::PopReg,     Opcode::XorRegReg,
        Opcode::Int3,   Opcode::Rdpkru,    Opcode::Wrpkru,    Opcode::Xrstor,
    };
    return ops;
}

namespace {

SimState differential_state(std::mt19937_64& rng) {
    SimState s;
    Mapping code;
    code.start = kCode;
    code.length = kPageSize;
    code.perms = Permissions::parse("r-x");
    code.backing = Backing{Backing::Kind::Anonymous, s.new_object(kPageSize), 0};
    s.space.insert(code);

    Mapping data;
    data.start = kData;
    data.length = kDataLen;
    data.perms = Permissions::parse("rw-");
    data.pkey = kDataKey;
    data.backing = Backing{Backing::Kind::Anonymous, s.new_object(kDataLen), 0};
    for (auto& byte : s.objects[data.backing.id])
        byte = static_cast<std::uint8_t>(rng());
    s.space.insert(data);
    s.allocated_keys.set(kDataKey.id);

    ThreadState t;
    t.tid = 0;
    for (auto& r : t.regs.gpr)
        r = rng();
    t.regs.flags = {coin(rng), coin(rng), coin(rng), coin(rng)};
    switch (pick(rng, 0, 3)) {
    case 0: t.pkru = PkruValue(0); break;
    case 1: t.pkru = PkruValue().with_access_disabled(kDataKey); break;
    case 2: t.pkru = PkruValue().with_write_disabled(kDataKey); break;
    default: t.pkru = PkruValue(static_cast<std::uint32_t>(rng()) & ~3u); break;
    }
    s.threads.push_back(t);
    return s;
}

Addr random_target(std::mt19937_64& rng) { return kData + pick(rng, 0x100, 0xE000); }

/// Appends a ModRM memory operand (plus SIB and displacement) whose
/// effective address is close to `target` and sets the registers it uses.
/// `tail` is the number of bytes that follow the operand (immediates).
void emit_mem(std::mt19937_64& rng, Bytes& out, unsigned reg_field, Registers& regs, Addr target, Addr insn_start,
              std::size_t tail) {
    auto r = [&](unsigned i) -> std::uint64_t& { return regs.gpr[i]; };
    switch (pick(rng, 0, 4)) {
    case 0: {  // [base], [base+disp8], [base+disp32]
        unsigned mod = static_cast<unsigned>(pick(rng, 0, 2));
        unsigned rm;
        do
            rm = static_cast<unsigned>(pick(rng, 0, 7));
        while (rm == 4 || (mod == 0 && rm == 5));
        out.push_back(static_cast<std::uint8_t>(mod << 6 | reg_field << 3 | rm));
        std::int64_t disp = 0;
        if (mod == 1) {
            disp = static_cast<std::int8_t>(rng());
            out.push_back(static_cast<std::uint8_t>(disp));
        } else if (mod == 2) {
            disp = static_cast<std::int64_t>(pick(rng, 0, 0x2000)) - 0x1000;
            le32(out, static_cast<std::uint32_t>(disp));
        }
        r(rm) = target - static_cast<Addr>(disp);
        return;
    }
    case 1:
    case 2: {  // SIB with a base register
        unsigned mod = static_cast<unsigned>(pick(rng, 0, 2));
        unsigned scale = static_cast<unsigned>(pick(rng, 0, 3));
        unsigned index = static_cast<unsigned>(pick(rng, 0, 7));
        unsigned base;
        do
            base = static_cast<unsigned>(pick(rng, 0, 7));
        while (mod == 0 && base == 5);
        out.push_back(static_cast<std::uint8_t>(mod << 6 | reg_field << 3 | 4));
        out.push_back(static_cast<std::uint8_t>(scale << 6 | index << 3 | base));
        std::int64_t disp = 0;
        if (mod == 1) {
            disp = static_cast<std::int8_t>(rng());
            out.push_back(static_cast<std::uint8_t>(disp));
        } else if (mod == 2) {
            disp = static_cast<std::int64_t>(pick(rng, 0, 0x2000)) - 0x1000;
            le32(out, static_cast<std::uint32_t>(disp));
        }
        Addr want = target - static_cast<Addr>(disp);
        if (index == 4) {
            r(base) = want;
        } else if (index == base) {
            r(base) = want / ((1u << scale) + 1);
        } else {
            r(index) = pick(rng, 0, 0x40);
            r(base) = want - (r(index) << scale);
        }
        return;
    }
    case 3: {  // SIB without base: [index*scale + disp32]
        unsigned scale = static_cast<unsigned>(pick(rng, 0, 3));
        unsigned index = static_cast<unsigned>(pick(rng, 0, 7));
        out.push_back(static_cast<std::uint8_t>(0u << 6 | reg_field << 3 | 4));
        out.push_back(static_cast<std::uint8_t>(scale << 6 | index << 3 | 5));
        std::uint64_t idx = 0;
        if (index != 4) {
            r(index) = pick(rng, 0, 0x40);
            idx = r(index) << scale;
        }
        le32(out, static_cast<std::uint32_t>(target - idx));
        return;
    }
    default: {  // [rip + disp32]
        out.push_back(static_cast<std::uint8_t>(0u << 6 | reg_field << 3 | 5));
        Addr next = insn_start + out.size() + 4 + tail;
        le32(out, static_cast<std::uint32_t>(target - next));
        return;
    }
    }
}

}  // namespace

DiffCase random_diff_case(std::mt19937_64& rng, x86::Opcode op) {
    using x86::Opcode;
    DiffCase c{differential_state(rng), {}};
    ThreadState& t = c.state.threads[0];
    Registers& regs = t.regs;
    Addr rip = kCode + pick(rng, 0, 0xF00);
    regs.rip = rip;
    Bytes& e = c.encoding;
    auto reg = [&] { return static_cast<unsigned>(pick(rng, 0, 7)); };
    auto imm32 = [&] { le32(e, static_cast<std::uint32_t>(rng())); };
    auto rexw = [&] {
        if (coin(rng))
            e.push_back(0x48);
    };
    auto stack = [&] { regs[Reg::Rsp] = kData + pick(rng, 0x20, 0x1C00) * 8; };

    switch (op) {
    case Opcode::Nop: e = {0x90}; break;
    case Opcode::MovRegImm:
        e = {static_cast<std::uint8_t>(0xB8 + reg())};
        imm32();
        break;
    case Opcode::MovRegReg:
        rexw();
        e.push_back(coin(rng) ? 0x89 : 0x8B);
        e.push_back(static_cast<std::uint8_t>(0xC0 | reg() << 3 | reg()));
        break;
    case Opcode::MovRegMem:
    case Opcode::MovMemReg:
        rexw();
        e.push_back(op == Opcode::MovRegMem ? 0x8B : 0x89);
        emit_mem(rng, e, reg(), regs, random_target(rng), rip, 0);
        break;
    case Opcode::AddRegImm:
    case Opcode::CmpRegImm: {
        unsigned ext = op == Opcode::AddRegImm ? 0 : 7;
        switch (pick(rng, 0, 2)) {
        case 0:
            rexw();
            e.insert(e.end(), {0x83, static_cast<std::uint8_t>(0xC0 | ext << 3 | reg()), static_cast<std::uint8_t>(rng())});
            break;
        case 1:
            rexw();
            e.insert(e.end(), {0x81, static_cast<std::uint8_t>(0xC0 | ext << 3 | reg())});
            imm32();
            break;
        default:
            e.push_back(op == Opcode::AddRegImm ? 0x05 : 0x3D);
            imm32();
        }
        break;
    }
    case Opcode::TestRegImm:
        e = {0xA9};
        imm32();
        break;
    case Opcode::JmpRel:
        if (coin(rng)) {
            e = {0xEB, static_cast<std::uint8_t>(rng())};
        } else {
            e = {0xE9};
            imm32();
        }
        break;
    case Opcode::JccRel: {
        unsigned cond;
        do
            cond = static_cast<unsigned>(pick(rng, 0, 15));
        while (cond == 0xA || cond == 0xB);
        if (coin(rng)) {
            e = {static_cast<std::uint8_t>(0x70 + cond), static_cast<std::uint8_t>(rng())};
        } else {
            e = {0x0F, static_cast<std::uint8_t>(0x80 + cond)};
            imm32();
        }
        break;
    }
    case Opcode::CallRel:
        stack();
        e = {0xE8};
        imm32();
        break;
    case Opcode::Ret:
        stack();
        e = {0xC3};
        break;
    case Opcode::PushReg:
    case Opcode::PopReg: {
        unsigned r = reg();
        stack();
        e = {static_cast<std::uint8_t>((op == Opcode::PushReg ? 0x50 : 0x58) + r)};
        break;
    }
    case Opcode::XorRegReg:
        rexw();
        e.push_back(0x31);
        e.push_back(static_cast<std::uint8_t>(0xC0 | reg() << 3 | reg()));
        break;
    case Opcode::Int3: e = {0xCC}; break;
    case Opcode::Rdpkru: e = {0x0F, 0x01, 0xEE}; break;
    case Opcode::Wrpkru:
        e = {0x0F, 0x01, 0xEF};
        regs[Reg::Rax] = rng();
        if (pick(rng, 0, 2) != 0) {
            regs[Reg::Rcx] = 0;
            regs[Reg::Rdx] = 0;
        } else {
            (coin(rng) ? regs[Reg::Rcx] : regs[Reg::Rdx]) = pick(rng, 1, ~0ull);
        }
        break;
    case Opcode::Xrstor:
        regs[Reg::Rax] = rng();
        e = {0x0F, 0xAE};
        emit_mem(rng, e, 5, regs, random_target(rng), rip, 0);
        break;
    }

    auto& code = c.state.objects[c.state.space.find(kCode)->backing.id];
    std::copy(e.begin(), e.end(), code.begin() + static_cast<std::ptrdiff_t>(rip - kCode));
    return c;
}

namespace {

// Second implementation of the instruction subset, written from the encoding
// table and the ISA rules rather than from the decoder: it works on raw bytes
// and does its own ModRM/SIB arithmetic and flag computation.
enum class RefKind { Advanced, PkuFault, Fault };

struct RefCpu {
    SimState& s;
    ThreadState& t;

    std::uint64_t& gpr(unsigned i) { return t.regs.gpr[i & 7]; }

    // Page and key checks for one data access; nullopt when allowed.
    std::optional<RefKind> check(Addr a, std::size_t n, bool write) {
        for (std::size_t i = 0; i < n; ++i) {
            const Mapping* m = s.space.find(a + i);
            if (!m || !(write ? m->perms.write : m->perms.read))
                return RefKind::Fault;
            std::uint32_t bits = t.pkru.bits();
            bool ad = (bits >> (2 * m->pkey.id)) & 1u;
            bool wd = (bits >> (2 * m->pkey.id + 1)) & 1u;
            if (ad || (write && wd))
                return RefKind::PkuFault;
        }
        return std::nullopt;
    }
    std::uint8_t& byte(Addr a) {
        const Mapping* m = s.space.find(a);
        return s.objects[m->backing.id][m->backing.offset + (a - m->start)];
    }
    std::uint64_t load(Addr a, std::size_t n) {
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < n; ++i)
            v |= std::uint64_t(byte(a + i)) << (8 * i);
        return v;
    }
    void store(Addr a, std::uint64_t v, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i)
            byte(a + i) = static_cast<std::uint8_t>(v >> (8 * i));
    }
};

std::int64_t sx8(std::uint8_t b) { return static_cast<std::int8_t>(b); }
std::int64_t sx32(std::span<const std::uint8_t> b) {
    return static_cast<std::int32_t>(b[0] | b[1] << 8 | b[2] << 16 | std::uint32_t(b[3]) << 24);
}

struct RefOperand {
    bool is_reg = false;
    unsigned reg = 0;  // ModRM.reg
    unsigned rm = 0;   // register number when is_reg
    Addr ea = 0;
    std::size_t len = 0;  // ModRM + SIB + displacement
};

/// `next_tail` is the number of bytes after the operand, needed for
/// rip-relative addressing.
RefOperand ref_modrm(std::span<const std::uint8_t> b, const Registers& regs, Addr insn, std::size_t before,
                     std::size_t next_tail) {
    RefOperand o;
    unsigned mod = b[0] >> 6, rm = b[0] & 7;
    o.reg = (b[0] >> 3) & 7;
    if (mod == 3) {
        o.is_reg = true;
        o.rm = rm;
        o.len = 1;
        return o;
    }
    std::size_t i = 1;
    std::uint64_t addr = 0;
    bool rip_rel = false;
    if (rm == 4) {
        unsigned scale = b[1] >> 6, index = (b[1] >> 3) & 7, base = b[1] & 7;
        i = 2;
        if (index != 4)
            addr += regs.gpr[index] << scale;
        if (base == 5 && mod == 0) {
            addr += static_cast<std::uint64_t>(sx32(b.subspan(i)));
            i += 4;
        } else {
            addr += regs.gpr[base];
        }
    } else if (rm == 5 && mod == 0) {
        rip_rel = true;
        addr = static_cast<std::uint64_t>(sx32(b.subspan(1)));
        i = 5;
    } else {
        addr = regs.gpr[rm];
    }
    if (mod == 1) {
        addr += static_cast<std::uint64_t>(sx8(b[i]));
        i += 1;
    } else if (mod == 2) {
        addr += static_cast<std::uint64_t>(sx32(b.subspan(i)));
        i += 4;
    }
    o.len = i;
    if (rip_rel)
        addr += insn + before + o.len + next_tail;
    o.ea = addr;
    return o;
}

void ref_logic_flags(Flags& f, std::uint64_t res, unsigned bits) {
    std::uint64_t mask = bits == 64 ? ~0ull : (1ull << bits) - 1;
    res &= mask;
    f.zf = res == 0;
    f.sf = (res >> (bits - 1)) & 1;
    f.cf = false;
    f.of = false;
}

std::uint64_t ref_add(Flags& f, std::uint64_t a, std::uint64_t b, unsigned bits, bool subtract) {
    std::uint64_t mask = bits == 64 ? ~0ull : (1ull << bits) - 1;
    a &= mask;
    b &= mask;
    std::uint64_t res = (subtract ? a - b : a + b) & mask;
    auto sign = [&](std::uint64_t v) { return (v >> (bits - 1)) & 1; };
    f.zf = res == 0;
    f.sf = sign(res);
    if (subtract) {
        f.cf = a < b;
        f.of = sign(a) != sign(b) && sign(res) != sign(a);
    } else {
        f.cf = res < a;
        f.of = sign(a) == sign(b) && sign(res) != sign(a);
    }
    return res;
}

bool ref_condition(const Flags& f, unsigned cc) {
    bool r = false;
    switch (cc >> 1) {
    case 0: r = f.of; break;
    case 1: r = f.cf; break;
    case 2: r = f.zf; break;
    case 3: r = f.cf || f.zf; break;
    case 4: r = f.sf; break;
    case 6: r = f.sf != f.of; break;
    case 7: r = f.zf || f.sf != f.of; break;
    default: break;
    }
    return (cc & 1) ? !r : r;
}

RefKind reference_step(SimState& s, Tid tid) {
    ThreadState& t = *s.thread(tid);
    RefCpu cpu{s, t};
    Registers& r = t.regs;
    const Addr insn = r.rip;
    Bytes code = fetch_window(s, insn, x86::kMaxInstructionLength, false);
    std::span<const std::uint8_t> b(code);
    std::size_t p = 0;
    bool w = false;
    if (b[p] == 0x48) {
        w = true;
        ++p;
    }
    const unsigned bits = w ? 64 : 32;
    auto write_reg = [&](unsigned i, std::uint64_t v) { cpu.gpr(i) = w ? v : (v & 0xFFFFFFFFull); };
    auto push = [&](std::uint64_t v) -> std::optional<RefKind> {
        Addr sp = r[Reg::Rsp] - 8;
        if (auto f = cpu.check(sp, 8, true))
            return f;
        cpu.store(sp, v, 8);
        r[Reg::Rsp] = sp;
        return std::nullopt;
    };

    const std::uint8_t op = b[p];
    Addr next = 0;
    if (op == 0x90) {
        next = insn + p + 1;
    } else if (op >= 0xB8 && op <= 0xBF) {
        cpu.gpr(op - 0xB8) = static_cast<std::uint32_t>(sx32(b.subspan(p + 1)));
        next = insn + p + 5;
    } else if (op == 0x89 || op == 0x8B) {
        auto o = ref_modrm(b.subspan(p + 1), r, insn, p + 1, 0);
        next = insn + p + 1 + o.len;
        std::size_t n = w ? 8 : 4;
        if (o.is_reg) {
            if (op == 0x89)
                write_reg(o.rm, cpu.gpr(o.reg));
            else
                write_reg(o.reg, cpu.gpr(o.rm));
        } else if (op == 0x8B) {
            if (auto f = cpu.check(o.ea, n, false))
                return *f;
            write_reg(o.reg, cpu.load(o.ea, n));
        } else {
            if (auto f = cpu.check(o.ea, n, true))
                return *f;
            cpu.store(o.ea, cpu.gpr(o.reg), n);
        }
    } else if (op == 0x83 || op == 0x81) {
        auto o = ref_modrm(b.subspan(p + 1), r, insn, p + 1, 0);
        std::size_t at = p + 1 + o.len;
        std::int64_t imm = op == 0x83 ? sx8(b[at]) : sx32(b.subspan(at));
        next = insn + at + (op == 0x83 ? 1 : 4);
        auto res = ref_add(r.flags, cpu.gpr(o.rm), static_cast<std::uint64_t>(imm), bits, o.reg == 7);
        if (o.reg == 0)
            write_reg(o.rm, res);
    } else if (op == 0x05 || op == 0x3D) {
        auto res = ref_add(r.flags, r[Reg::Rax], static_cast<std::uint64_t>(sx32(b.subspan(p + 1))), bits, op == 0x3D);
        if (op == 0x05)
            write_reg(0, res);
        next = insn + p + 5;
    } else if (op == 0xA9) {
        ref_logic_flags(r.flags, r[Reg::Rax] & static_cast<std::uint64_t>(sx32(b.subspan(p + 1))), bits);
        next = insn + p + 5;
    } else if (op == 0x31) {
        auto o = ref_modrm(b.subspan(p + 1), r, insn, p + 1, 0);
        std::uint64_t res = cpu.gpr(o.rm) ^ cpu.gpr(o.reg);
        ref_logic_flags(r.flags, res, bits);
        write_reg(o.rm, res);
        next = insn + p + 2;
    } else if (op == 0xEB) {
        next = insn + 2 + static_cast<std::uint64_t>(sx8(b[1]));
    } else if (op == 0xE9) {
        next = insn + 5 + static_cast<std::uint64_t>(sx32(b.subspan(1)));
    } else if (op >= 0x70 && op <= 0x7F) {
        next = insn + 2;
        if (ref_condition(r.flags, op & 0xF))
            next += static_cast<std::uint64_t>(sx8(b[1]));
    } else if (op == 0xE8) {
        Addr ret = insn + 5;
        if (auto f = push(ret))
            return *f;
        next = ret + static_cast<std::uint64_t>(sx32(b.subspan(1)));
    } else if (op == 0xC3) {
        if (auto f = cpu.check(r[Reg::Rsp], 8, false))
            return *f;
        next = cpu.load(r[Reg::Rsp], 8);
        r[Reg::Rsp] += 8;
    } else if (op >= 0x50 && op <= 0x57) {
        if (auto f = push(cpu.gpr(op - 0x50)))
            return *f;
        next = insn + 1;
    } else if (op >= 0x58 && op <= 0x5F) {
        if (auto f = cpu.check(r[Reg::Rsp], 8, false))
            return *f;
        std::uint64_t v = cpu.load(r[Reg::Rsp], 8);
        r[Reg::Rsp] += 8;
        cpu.gpr(op - 0x58) = v;
        next = insn + 1;
    } else if (op == 0xCC) {
        return RefKind::Fault;
    } else if (op == 0x0F && b[p + 1] >= 0x80 && b[p + 1] <= 0x8F) {
        next = insn + 6;
        if (ref_condition(r.flags, b[p + 1] & 0xF))
            next += static_cast<std::uint64_t>(sx32(b.subspan(2)));
    } else if (op == 0x0F && b[p + 1] == 0x01 && (b[p + 2] == 0xEE || b[p + 2] == 0xEF)) {
        // Both #GP unless ECX is zero; wrpkru also needs EDX zero.
        bool wr = b[p + 2] == 0xEF;
        if ((r[Reg::Rcx] & 0xFFFFFFFFull) != 0 || (wr && (r[Reg::Rdx] & 0xFFFFFFFFull) != 0))
            return RefKind::Fault;
        if (wr) {
            t.pkru = PkruValue(static_cast<std::uint32_t>(r[Reg::Rax]));
        } else {
            r[Reg::Rax] = t.pkru.bits();
            r[Reg::Rdx] = 0;
        }
        next = insn + 3;
    } else if (op == 0x0F && b[p + 1] == 0xAE) {
        auto o = ref_modrm(b.subspan(p + 2), r, insn, p + 2, 0);
        next = insn + p + 2 + o.len;
        // Only the PKRU component is modelled.
        if (r[Reg::Rax] & (1u << 9)) {
            Addr a = o.ea + 0xA80;
            if (auto f = cpu.check(a, 4, false))
                return *f;
            t.pkru = PkruValue(static_cast<std::uint32_t>(cpu.load(a, 4)));
        }
    } else {
        return RefKind::Fault;
    }
    r.rip = next;
    return RefKind::Advanced;
}

}  // namespace

namespace {

std::string kind_name(StepResult::Kind k) { return std::string(to_string(k)); }

bool same_kind(StepResult::Kind native, x86::ExecResult::Kind emu) {
    using E = x86::ExecResult::Kind;
    switch (native) {
    case StepResult::Kind::Advanced: return emu == E::Advanced;
    case StepResult::Kind::PkuFault: return emu == E::PkuFault;
    case StepResult::Kind::Terminated: return emu == E::Terminated || emu == E::PageFault;
    default: return false;
    }
}

}  // namespace

CheckResult check_emulator_differential(std::uint64_t seed, std::size_t per_opcode, std::set<x86::Opcode>* covered) {
    std::mt19937_64 rng(seed);
    CheckResult res;
    for (auto op : all_opcodes()) {
        for (std::size_t i = 0; i < per_opcode; ++i) {
            ++res.cases;
            DiffCase c = random_diff_case(rng, op);
            std::string where = std::string(x86::to_string(op)) + " " + hexstr(c.encoding);

            auto d = x86::decode(c.encoding);
            auto* ins = std::get_if<x86::Instruction>(&d);
            if (!ins || ins->op != op || ins->length != c.encoding.size()) {
                res.fail(where + ": generator produced a different instruction");
                continue;
            }
            if (covered)
                covered->insert(op);

            SimState native = c.state;
            auto nr = step(native, 0);

            SimState emu = c.state;
            Mapping* m = emu.space.find(kCode);
            m->monitor_marked_nonexec = true;
            auto fault = step(emu, 0);
            if (fault.kind != StepResult::Kind::ExecFault) {
                res.fail(where + ": marked page did not fault");
                continue;
            }
            auto er = x86::emulate_at(emu, 0);
            m->monitor_marked_nonexec = false;

            if (nr.kind == StepResult::Kind::ExecFault || nr.kind == StepResult::Kind::BreakpointTrap) {
                res.fail(where + ": native step trapped");
                continue;
            }
            if (!same_kind(nr.kind, er.kind)) {
                res.fail(where + ": native " + kind_name(nr.kind) + ", emulated kind differs");
                continue;
            }
            const ThreadState& a = native.threads[0];
            const ThreadState& b = emu.threads[0];
            if (!(a.regs == b.regs))
                res.fail(where + ": registers differ");
            else if (a.pkru != b.pkru)
                res.fail(where + ": pkru differs");
            else if (native.objects != emu.objects)
                res.fail(where + ": memory differs");

            SimState ref = c.state;
            RefKind rk = reference_step(ref, 0);
            bool kinds = (rk == RefKind::Advanced && nr.kind == StepResult::Kind::Advanced) ||
                         (rk == RefKind::PkuFault && nr.kind == StepResult::Kind::PkuFault) ||
                         (rk == RefKind::Fault && nr.kind == StepResult::Kind::Terminated);
            const ThreadState& rt = ref.threads[0];
            if (!kinds)
                res.fail(where + ": native " + kind_name(nr.kind) + ", reference disagrees");
            else if (!(a.regs == rt.regs))
                res.fail(where + ": registers differ from reference");
            else if (a.pkru != rt.pkru)
                res.fail(where + ": pkru differs from reference");
            else if (native.objects != ref.objects)
                res.fail(where + ": memory differs from reference");
        }
    }
    return res;
}

// --- PKRU properties ----------------------------------------------------------------

namespace {

bool bit(std::uint32_t v, int i) { return (v >> i) & 1u; }

PkruValue with_key_bits(std::uint32_t other, int key, bool ad, bool wd) {
    std::uint32_t v = other & ~(3u << (2 * key));
    v |= (ad ? 1u : 0u) << (2 * key);
    v |= (wd ? 1u : 0u) << (2 * key + 1);
    return PkruValue(v);
}

SimState one_page_state(ProtectionKey key, const Bytes& code, Permissions perms) {
    SimState s;
    Mapping m;
    m.start = kCode;
    m.length = kPageSize;
    m.perms = perms;
    m.pkey = key;
    m.backing = Backing{Backing::Kind::Anonymous, s.new_object(kPageSize), 0};
    std::copy(code.begin(), code.end(), s.objects[m.backing.id].begin());
    s.space.insert(m);
    ThreadState t;
    t.regs.rip = kCode;
    s.threads.push_back(t);
    return s;
}

}  // namespace

CheckResult check_fetch_always_allowed(std::uint64_t seed, std::size_t samples) {
    std::mt19937_64 rng(seed);
    CheckResult res;
    for (int k = 0; k < kNumKeys; ++k)
        for (int combo = 0; combo < 4; ++combo) {
            bool ad = combo & 1, wd = combo & 2;
            for (std::size_t i = 0; i < samples; ++i) {
                ++res.cases;
                PkruValue p = with_key_bits(static_cast<std::uint32_t>(rng()), k, ad, wd);
                if (!pkru_allows(p, ProtectionKey{static_cast<std::uint8_t>(k)}, Access::Fetch))
                    res.fail("fetch denied for key " + std::to_string(k) + " pkru " + std::to_string(p.bits()));
            }
            // And on the machine: a nop on a page of key k runs under any PKRU.
            ++res.cases;
            SimState s = one_page_state(ProtectionKey{static_cast<std::uint8_t>(k)}, {0x90}, Permissions::parse("r-x"));
            s.threads[0].pkru = with_key_bits(0xffffffffu, k, ad, wd);
            auto r = step(s, 0);
            if (r.kind != StepResult::Kind::Advanced || s.threads[0].regs.rip != kCode + 1)
                res.fail("nop on key " + std::to_string(k) + " did not run");
        }
    return res;
}

CheckResult check_write_implies_read(std::uint64_t seed, std::size_t samples) {
    std::mt19937_64 rng(seed);
    CheckResult res;
    for (int k = 0; k < kNumKeys; ++k)
        for (int combo = 0; combo < 4; ++combo) {
            bool ad = combo & 1, wd = combo & 2;
            ProtectionKey key{static_cast<std::uint8_t>(k)};
            for (std::size_t i = 0; i < samples; ++i) {
                ++res.cases;
                PkruValue p = with_key_bits(static_cast<std::uint32_t>(rng()), k, ad, wd);
                bool w = pkru_allows(p, key, Access::Write);
                bool r = pkru_allows(p, key, Access::Read);
                if (w && !r)
                    res.fail("write without read, key " + std::to_string(k));
                // Bit layout: AD = bit 2k, WD = bit 2k+1.
                if (r != !bit(p.bits(), 2 * k) || w != (!bit(p.bits(), 2 * k) && !bit(p.bits(), 2 * k + 1)))
                    res.fail("bit layout mismatch, key " + std::to_string(k));
            }
            // Through mem_access on a read-write page tagged with k.
            ++res.cases;
            SimState s = one_page_state(key, {}, Permissions::parse("rw-"));
            s.threads[0].pkru = with_key_bits(static_cast<std::uint32_t>(rng()), k, ad, wd);
            std::uint8_t buf[8] = {};
            bool wok = mem_access(s, 0, kCode + 8, AccessKind::Write, Route::Cpu, buf).ok();
            bool rok = mem_access(s, 0, kCode + 8, AccessKind::Read, Route::Cpu, buf).ok();
            if (wok && !rok)
                res.fail("mem_access: write allowed, read denied, key " + std::to_string(k));
            if (rok == ad || wok == (ad || wd))
                res.fail("mem_access disagrees with the key bits, key " + std::to_string(k));
        }
    return res;
}

CheckResult check_xrstor_bit9(std::uint64_t seed, std::size_t samples) {
    std::mt19937_64 rng(seed);
    CheckResult res;
    for (std::size_t i = 0; i < samples; ++i) {
        ++res.cases;
        // xrstor [rdi] with the save area on a page of key 3 that stays open.
        SimState s = one_page_state(ProtectionKey{0}, {0x0F, 0xAE, 0x2F}, Permissions::parse("r-x"));
        Mapping area;
        area.start = kData;
        area.length = kPageSize;
        area.perms = Permissions::parse("rw-");
        area.pkey = ProtectionKey{3};
        area.backing = Backing{Backing::Kind::Anonymous, s.new_object(kPageSize), 0};
        s.space.insert(area);
        std::uint32_t word = static_cast<std::uint32_t>(rng());
        Bytes w;
        le32(w, word);
        s.poke(kData + x86::kXsavePkruOffset, w);

        ThreadState& t = s.threads[0];
        t.regs[Reg::Rdi] = kData;
        t.regs[Reg::Rax] = rng();
        t.pkru = with_key_bits(static_cast<std::uint32_t>(rng()) & ~3u, 3, false, false);
        PkruValue before = t.pkru;
        bool set = t.regs[Reg::Rax] & x86::kXrstorPkruBit;

        auto r = step(s, 0);
        PkruValue want = set ? PkruValue(word) : before;
        if (r.kind != StepResult::Kind::Advanced)
            res.fail("xrstor did not advance");
        else if (s.threads[0].pkru != want)
            res.fail(std::string("bit 9 ") + (set ? "set" : "clear") + ": pkru " +
                     std::to_string(s.threads[0].pkru.bits()) + ", want " + std::to_string(want.bits()));
    }
    return res;
}

CheckResult check_wrpkru_gp(std::uint64_t seed, std::size_t samples) {
    std::mt19937_64 rng(seed);
    CheckResult res;
    for (std::size_t i = 0; i < samples; ++i) {
        ++res.cases;
        SimState s = one_page_state(ProtectionKey{0}, {0x0F, 0x01, 0xEF}, Permissions::parse("r-x"));
        ThreadState& t = s.threads[0];
        t.regs[Reg::Rax] = rng();
        switch (pick(rng, 0, 3)) {
        case 0: break;
        case 1: t.regs[Reg::Rcx] = pick(rng, 1, ~0ull); break;
        case 2: t.regs[Reg::Rdx] = pick(rng, 1, ~0ull); break;
        default:
            t.regs[Reg::Rcx] = pick(rng, 1, ~0ull);
            t.regs[Reg::Rdx] = pick(rng, 1, ~0ull);
        }
        t.pkru = PkruValue(static_cast<std::uint32_t>(rng()));
        PkruValue before = t.pkru;
        bool zero = t.regs[Reg::Rcx] == 0 && t.regs[Reg::Rdx] == 0;
        std::uint32_t eax = static_cast<std::uint32_t>(t.regs[Reg::Rax]);

        auto r = step(s, 0);
        if (zero && (r.kind != StepResult::Kind::Advanced || s.threads[0].pkru != PkruValue(eax)))
            res.fail("wrpkru with ecx=edx=0 did not load eax");
        if (!zero && (r.kind != StepResult::Kind::Terminated || s.threads[0].pkru != before))
            res.fail("wrpkru with nonzero ecx/edx was not fatal or changed pkru");
    }
    return res;
}

}  // namespace pkusim::oracle
