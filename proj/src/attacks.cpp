#include "pkusim/attacks.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>

namespace pkusim {

namespace {

// Payload: xor ecx,ecx; xor edx,edx; mov eax,0; wrpkru; mov rbx,[0x200000]
#define PAYLOAD "31c931d2b8000000000f01ef488b1c2500002000"

const char* const kAttackTexts[] = {
    R"(scenario pt-permissions
title Inconsistencies of PT permissions
group attacks
# /proc/self/mem writes ignore the r-x page table entry of U's code.
sys t0 open path=/proc/self/mem
sys t0 write fd=3 data=)" PAYLOAD R"( offset=0x300010
setreg t0 rip 0x300010
step t0 5
expect blocked
expect none breach
expect erim-model breach
expect hodor-model breach
)",
    R"(scenario pku-permissions
title Inconsistencies of PKU permissions
group attacks
# The kernel copies from M_T without looking at PKRU.
sys t0 process_vm_readv addr=0x200000 len=8
expect blocked
expect none breach
expect erim-model breach
expect hodor-model breach
)",
    R"(scenario mutable-backings
title Mapping with mutable backings
group attacks
# Executable MAP_SHARED view of a file that stays writable through its fd.
sys t0 open path=/tmp/jit.bin create=1
sys t0 write fd=3 data=9090909090909090909090909090909090909090
sys t0 mmap addr=0x800000 len=0x1000 prot=r-x flags=shared fd=3 offset=0x0
sys t0 write fd=3 data=)" PAYLOAD R"( offset=0x0
setreg t0 rip 0x800000
step t0 5
expect blocked
expect none breach
expect erim-model breach
expect hodor-model breach
)",
    R"(scenario relocation
title Changing code by relocation
group attacks
# 0f 01 at the end of one page, ef at the start of another; mremap joins them.
sys t0 mmap addr=0x800000 len=0x1000 prot=rw- flags=private,anon
write t0 0x800ff5 31c931d2b8000000000f01
sys t0 mmap addr=0x900000 len=0x1000 prot=rw- flags=private,anon
write t0 0x900000 ef488b1c2500002000
sys t0 mprotect addr=0x800000 len=0x1000 prot=r-x
sys t0 mprotect addr=0x900000 len=0x1000 prot=r-x
sys t0 mremap old_addr=0x900000 old_len=0x1000 new_len=0x1000 new_addr=0x801000
setreg t0 rip 0x800ff5
step t0 5
expect blocked
expect none breach
expect erim-model breach
expect hodor-model breach
)",
    R"(scenario seccomp
title Influencing intra-process behavior with seccomp
group attacks
# U installs a filter that fakes success for pkey_mprotect; T then believes
# its new page is tagged with the trusted key.
sys t0 seccomp rules=pkey_mprotect:fake
step t0 8
sys t0 mmap addr=0x800000 len=0x1000 prot=rw- flags=private,anon
sys t0 pkey_mprotect addr=0x800000 len=0x1000 prot=rw- key=1
write t0 0x800000 5345435245543221
step t0 15
setreg t0 rdi 0x800000
setreg t0 rip 0x501000
step t0 1
expect blocked
expect none breach
expect erim-model breach
expect hodor-model breach
expect garmr-xom breach
)",
    R"(scenario trusted-mappings
title Modifying trusted mappings
group attacks
sys t0 pkey_mprotect addr=0x200000 len=0x1000 prot=rw- key=0
setreg t0 rdi 0x200000
setreg t0 rip 0x501000
step t0 1
expect blocked
expect none breach
expect erim-model breach
)",
    R"(scenario scan-race
title Race conditions in scanning
group attacks
# t1 rewrites the page while t0's mprotect is between scan and publish.
sys t0 mmap addr=0x800000 len=0x1000 prot=rw- flags=private,anon
write t0 0x800000 9090909090909090909090909090909090909090
spawn t1
interleave begin
sys t0 mprotect addr=0x800000 len=0x1000 prot=r-x
write t1 0x800000 31c931d2b8000000000f01ef
write t1 0x80000c 488b1c2500002000
resume t0
resume t0
resume t0
resume t0
interleave end
setreg t1 rip 0x800000
step t1 5
expect blocked
expect none breach
expect erim-model breach
expect hodor-model breach
)",
    R"(scenario trusted-determination
title Determination of trusted mappings
group attacks
# A monitor that trusts the syscall site sees a call from inside T.
sys t0 mmap addr=0x800000 len=0x1000 prot=rw- flags=private,anon
write t0 0x800000 )" PAYLOAD R"(
setreg t0 rip 0x10001c
sys t0 mprotect addr=0x800000 len=0x1000 prot=r-x
setreg t0 rip 0x800000
step t0 5
expect blocked
expect none breach
expect erim-model breach
)",
    R"(scenario signal
title Signal context attacks
group attacks
# A forged signal frame restores an open PKRU.
sys t0 sigreturn rip=0x501000 pkru=0x0 rdi=0x200000
step t0 1
expect breach
)",
    R"(scenario vetted-relocation
title Vetted unsafe instruction relocation
group attacks
# The breakpoint stays at the old address after mremap.
sys t0 mmap addr=0x800000 len=0x1000 prot=rw- flags=private,anon
write t0 0x800000 )" PAYLOAD R"(
sys t0 mprotect addr=0x800000 len=0x1000 prot=r-x
sys t0 mremap old_addr=0x800000 old_len=0x1000 new_len=0x1000 new_addr=0x900000
setreg t0 rip 0x900000
step t0 5
expect blocked
expect none breach
expect hodor-model breach
)",
    R"(scenario debug-registers
title Incomplete debug register update
group attacks
# Breakpoints land only in the mapping thread; t1 runs the code.
spawn t1
sys t0 mmap addr=0x800000 len=0x1000 prot=rw- flags=private,anon
write t0 0x800000 )" PAYLOAD R"(
sys t0 mprotect addr=0x800000 len=0x1000 prot=r-x
setreg t1 rip 0x800000
step t1 5
expect blocked
expect none breach
expect hodor-model breach
)",
};

const char* const kFlawTexts[] = {
    R"(scenario unsafe-xrstor
title Unsafe xrstor
group flaws
# xrstor in U's library with eax bit 9 set loads PKRU from U memory.
setreg t0 eax 0x200
setreg t0 rdi 0x400000
setreg t0 rip 0x500100
step t0 2
expect blocked
expect none breach
expect hodor-model breach
)",
};

const char* const kBenignTexts[] = {
    R"(scenario gate-roundtrip
title Call gate round trip
group benign
# U calls into T through the entry gate, T reads M_T, the exit gate returns.
step t0 23
expect completed
)",
    R"(scenario anon-jit
title Anonymous executable mapping
group benign
sys t0 mmap addr=0x800000 len=0x1000 prot=rw- flags=private,anon
write t0 0x800000 b80500000031c990
sys t0 mprotect addr=0x800000 len=0x1000 prot=r-x
setreg t0 rip 0x800000
step t0 3
expect completed
)",
    R"(scenario file-load
title File-backed library load
group benign
sys t0 open path=/usr/lib/libbenign.so
sys t0 mmap addr=0x800000 len=0x1000 prot=r-x flags=private fd=3 offset=0x0
setreg t0 rip 0x800000
step t0 4
expect completed
)",
    R"(scenario lib-call
title Library call next to an xrstor
group benign
# The library page also holds xrstor; the call itself never reaches it.
write t0 0x600ff8 0500300000000000
setreg t0 rsp 0x600ff8
setreg t0 rip 0x500000
step t0 5
expect completed
expect erim-model blocked
)",
    R"(scenario threads
title Second thread runs U code
group benign
spawn t1
setreg t1 rip 0x300005
step t1 4
sys t1 exit
sys t0 list_tasks
step t0 23
expect completed
)",
};

#undef PAYLOAD

std::vector<Scenario> parse_all() {
    std::vector<Scenario> out;
    for (const char* t : kAttackTexts)
        out.push_back(parse_scenario(t));
    for (const char* t : kFlawTexts)
        out.push_back(parse_scenario(t));
    for (const char* t : kBenignTexts)
        out.push_back(parse_scenario(t));
    return out;
}

}  // namespace

const std::vector<Scenario>& builtin_scenarios() {
    static const std::vector<Scenario> all = parse_all();
    return all;
}

std::vector<Scenario> builtin_group(std::string_view group) {
    std::vector<Scenario> out;
    for (const auto& s : builtin_scenarios())
        if (s.group == group)
            out.push_back(s);
    return out;
}

std::vector<Scenario> builtin_attacks() { return builtin_group("attacks"); }

std::optional<Scenario> find_builtin(std::string_view name) {
    for (const auto& s : builtin_scenarios())
        if (s.name == name)
            return s;
    return std::nullopt;
}

Bytes attack_payload() { return parse_hex_bytes("31c931d2b8000000000f01ef488b1c2500002000"); }

RunReport run_scenario(const Scenario& scn, PolicyKind policy, const RunOptions& opts) {
    validate(scn);
    Simulator sim(policy, opts);
    for (std::size_t i = 0; i < scn.steps.size() && !sim.terminated(); ++i) {
        sim.set_step_index(i);
        try {
            std::visit(
                [&](const auto& st) {
                    using T = std::decay_t<decltype(st)>;
                    if constexpr (std::is_same_v<T, steps::Spawn>)
                        sim.spawn(st.tid, st.from);
                    else if constexpr (std::is_same_v<T, steps::Run>)
                        sim.step(st.tid, st.count);
                    else if constexpr (std::is_same_v<T, steps::Sys>)
                        sim.syscall(st.tid, st.call);
                    else if constexpr (std::is_same_v<T, steps::WriteBytes>)
                        sim.write_bytes(st.tid, st.addr, st.bytes);
                    else if constexpr (std::is_same_v<T, steps::SetReg>)
                        sim.set_reg(st.tid, st.reg, st.value);
                    else if constexpr (std::is_same_v<T, steps::Resume>)
                        sim.resume(st.tid);
                    else if (st.begin)
                        sim.interleave_begin();
                    else
                        sim.interleave_end();
                },
                scn.steps[i]);
        } catch (const EngineError& e) {
            throw ScenarioError(scn.name + ": step " + std::to_string(i) + " (" + print_step(scn.steps[i]) +
                                "): " + e.what());
        }
    }
    RunReport r;
    r.scenario = scn.name;
    r.policy = policy;
    r.outcome = sim.finish();
    r.expected = scn.expect.for_policy(policy);
    r.log = sim.log_lines();
    r.audit_failures = sim.audit_failures();
    return r;
}

std::size_t AttackMatrix::count(std::size_t column, Outcome::Kind k) const {
    std::size_t n = 0;
    for (const auto& row : rows)
        if (row.outcomes.at(column).kind == k)
            ++n;
    return n;
}

AttackMatrix attack_matrix(const std::vector<Scenario>& scenarios, const std::vector<PolicyKind>& policies,
                           const RunOptions& opts) {
    AttackMatrix m;
    m.policies = policies;
    for (const auto& s : scenarios) {
        MatrixRow row;
        row.name = s.name;
        row.title = s.title;
        for (PolicyKind p : policies)
            row.outcomes.push_back(run_scenario(s, p, opts).outcome);
        m.rows.push_back(std::move(row));
    }
    return m;
}

std::string render_matrix(const AttackMatrix& m) {
    std::size_t w0 = 8;
    for (const auto& r : m.rows)
        w0 = std::max(w0, (r.title.empty() ? r.name : r.title).size());
    std::vector<std::size_t> widths;
    for (PolicyKind p : m.policies)
        widths.push_back(std::max<std::size_t>(to_string(p).size(), 9));

    auto pad = [](std::string s, std::size_t w) {
        s.resize(std::max(w, s.size()), ' ');
        return s;
    };
    std::string out = pad("scenario", w0);
    for (std::size_t c = 0; c < m.policies.size(); ++c)
        out += "  " + pad(std::string(to_string(m.policies[c])), widths[c]);
    out += "\n";
    for (const auto& r : m.rows) {
        out += pad(r.title.empty() ? r.name : r.title, w0);
        for (std::size_t c = 0; c < m.policies.size(); ++c)
            out += "  " + pad(std::string(to_string(r.outcomes[c].kind)), widths[c]);
        while (!out.empty() && out.back() == ' ')
            out.pop_back();
        out += "\n";
    }
    for (std::size_t c = 0; c < m.policies.size(); ++c) {
        out += std::string(to_string(m.policies[c])) + ": ";
        bool first = true;
        for (auto k : {Outcome::Kind::Blocked, Outcome::Kind::Breach, Outcome::Kind::Completed}) {
            std::size_t n = m.count(c, k);
            if (!n)
                continue;
            out += (first ? "" : ", ") + std::to_string(n) + " " + std::string(to_string(k));
            first = false;
        }
        out += "\n";
    }
    return out;
}

namespace {

Tid step_tid(const ScenarioStep& s) {
    return std::visit(
        [](const auto& x) -> Tid {
            if constexpr (std::is_same_v<std::decay_t<decltype(x)>, steps::Interleave>)
                return 0;
            else
                return x.tid;
        },
        s);
}

}  // namespace

std::vector<Scenario> enumerate_interleavings(const Scenario& scn) {
    auto is_marker = [](const ScenarioStep& s, bool begin) {
        auto* m = std::get_if<steps::Interleave>(&s);
        return m && m->begin == begin;
    };
    auto b = std::find_if(scn.steps.begin(), scn.steps.end(), [&](const auto& s) { return is_marker(s, true); });
    auto e = std::find_if(b, scn.steps.end(), [&](const auto& s) { return is_marker(s, false); });
    if (b == scn.steps.end() || e == scn.steps.end() || std::next(b) == e)
        return {scn};

    std::vector<ScenarioStep> prefix(scn.steps.begin(), std::next(b, 2));
    std::vector<ScenarioStep> suffix(e, scn.steps.end());
    std::map<Tid, std::vector<ScenarioStep>> lanes;
    for (auto it = std::next(b, 2); it != e; ++it)
        lanes[step_tid(*it)].push_back(*it);

    std::vector<Scenario> out;
    std::map<Tid, std::size_t> pos;
    std::vector<ScenarioStep> cur;
    std::size_t total = static_cast<std::size_t>(std::distance(std::next(b, 2), e));
    std::function<void()> rec = [&] {
        if (cur.size() == total) {
            Scenario s = scn;
            s.name = scn.name + "#" + std::to_string(out.size());
            s.steps = prefix;
            s.steps.insert(s.steps.end(), cur.begin(), cur.end());
            s.steps.insert(s.steps.end(), suffix.begin(), suffix.end());
            out.push_back(std::move(s));
            return;
        }
        for (auto& [tid, lane] : lanes) {
            if (pos[tid] == lane.size())
                continue;
            cur.push_back(lane[pos[tid]++]);
            rec();
            --pos[tid];
            cur.pop_back();
        }
    };
    rec();
    return out;
}

}  // namespace pkusim
