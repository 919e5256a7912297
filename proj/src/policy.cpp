#include "pkusim/policy.hpp"

#include <algorithm>
#include <cstdio>

#include "pkusim/agent.hpp"
#include "pkusim/x86.hpp"

namespace pkusim {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};

std::string hex(Addr a) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(a));
    return buf;
}

std::string range_str(Addr lo, Addr hi) { return hex(lo) + "-" + hex(hi); }

Permissions strip_wx(Permissions p) {
    p.write = false;
    p.exec = false;
    return p;
}

bool ranges_overlap(Addr lo, Addr hi, Addr a, Addr b) { return lo < hi && a < b && lo < b && a < hi; }

std::size_t max_pattern_length(const std::vector<SafePattern>& patterns) {
    std::size_t n = 0;
    for (const auto& p : patterns)
        n = std::max(n, p.suffix.size());
    return n;
}

bool any_mapping(const SimState& s, Addr lo, Addr hi, const std::function<bool(const Mapping&)>& pred) {
    for (const Mapping* m : s.space.overlapping(lo, hi))
        if (pred(*m))
            return true;
    return false;
}

void copy_in(SimState& s, Addr addr, Bytes content) {
    if (content.empty())
        return;
    mem_access(s, kMonitorTid, addr, AccessKind::Write, Route::KernelDirect, std::span(content));
    s.log(kMonitorTid, "copy", "-", std::to_string(content.size()) + " bytes to " + hex(addr));
}

Bytes file_slice(const SimState& s, InodeId ino, std::uint64_t offset, Addr len) {
    Bytes out(len, 0);
    const Bytes& f = s.files.at(ino).bytes;
    for (Addr i = 0; i < len && offset + i < f.size(); ++i)
        out[i] = f[offset + i];
    return out;
}

std::vector<UnsafeOccurrence> scan_all(const SimState& s, const std::vector<SafePattern>& patterns) {
    return scan_code_range(s, 0, ~Addr{0}, patterns);
}

}  // namespace

// --- names ---------------------------------------------------------------------

std::string_view to_string(PolicyKind k) {
    switch (k) {
    case PolicyKind::NoSandbox: return "none";
    case PolicyKind::ErimModel: return "erim-model";
    case PolicyKind::HodorModel: return "hodor-model";
    case PolicyKind::GarmrErim: return "garmr-erim";
    case PolicyKind::GarmrXom: return "garmr-xom";
    }
    return "?";
}

std::optional<PolicyKind> parse_policy_kind(std::string_view s) {
    for (PolicyKind k : all_policy_kinds())
        if (to_string(k) == s)
            return k;
    return std::nullopt;
}

const std::vector<PolicyKind>& all_policy_kinds() {
    static const std::vector<PolicyKind> kinds = {PolicyKind::NoSandbox, PolicyKind::ErimModel,
                                                  PolicyKind::HodorModel, PolicyKind::GarmrErim,
                                                  PolicyKind::GarmrXom};
    return kinds;
}

bool is_garmr(PolicyKind k) { return k == PolicyKind::GarmrErim || k == PolicyKind::GarmrXom; }

std::string_view to_string(Decision::Kind k) {
    switch (k) {
    case Decision::Kind::Allow: return "allow";
    case Decision::Kind::Deny: return "deny";
    case Decision::Kind::Rewrite: return "rewrite";
    case Decision::Kind::Terminate: return "terminate";
    }
    return "?";
}

std::string_view to_string(VetKind k) { return k == VetKind::Breakpoint ? "breakpoint" : "fault-emulate"; }

std::string_view to_string(Domain d) { return d == Domain::T ? "T" : "U"; }

void SyscallTask::advance() {
    if (finished())
        return;
    auto fn = std::move(phases[next]);
    ++next;
    fn(*this);
}

// --- scanning code in the address space -----------------------------------------

std::size_t rescan_margin(const std::vector<SafePattern>& patterns) {
    return kMaxOccurrenceLength + max_pattern_length(patterns);
}

std::vector<UnsafeOccurrence> scan_code_range(const SimState& s, Addr lo, Addr hi,
                                              const std::vector<SafePattern>& patterns, Addr extra_lo,
                                              Addr extra_hi) {
    std::vector<UnsafeOccurrence> out;
    if (lo >= hi)
        return out;
    auto is_code = [&](const Mapping& m) { return m.perms.exec || m.overlaps(extra_lo, extra_hi); };
    const std::size_t look = kBoundaryWindow + max_pattern_length(patterns);
    const std::size_t tail = kMaxOccurrenceLength + max_pattern_length(patterns);
    for (const Mapping* m : s.space.overlapping(lo, hi)) {
        if (!is_code(*m))
            continue;
        const Mapping* next = s.space.find(m->end());
        bool seam = next && next->start == m->end() && is_code(*next);
        Bytes right;
        if (seam)
            right = *s.peek_range(next->start, std::min<Addr>(next->length, look));

        Addr from = std::max(lo, m->start);
        Addr to = hi > m->end() - std::min<Addr>(m->length, tail) ? m->end() : hi + tail;
        Bytes own = *s.peek_range(from, to - from);
        if (to == m->end())
            own.insert(own.end(), right.begin(), right.end());
        for (const auto& occ : scan_bytes(own, from, patterns))
            if (occ.addr + occ.length <= m->end() && occ.addr >= lo && occ.addr < hi)
                out.push_back(occ);

        if (seam) {
            Addr k = std::min<Addr>(m->length, kBoundaryWindow);
            Bytes left = *s.peek_range(m->end() - k, k);
            for (const auto& occ : scan_boundary(CodeView{m->end() - k, left}, CodeView{next->start, right}, patterns))
                if (occ.addr >= lo && occ.addr < hi)
                    out.push_back(occ);
        }
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.addr < b.addr; });
    return out;
}

// --- base policy -----------------------------------------------------------------

void Policy::attach(SimState&, const image::ImageInfo& info) {
    mon_.t_code = info.t_code;
    mon_.t_code_len = info.t_code_len;
    mon_.gate_sites = info.gate_sites;
}

SyscallTask Policy::begin_syscall(SimState& state, Tid tid, const Syscall& call) {
    return passthrough(state, tid, call);
}

TrapAction Policy::on_trap(SimState&, Tid, const StepResult& trap) {
    if (trap.kind == StepResult::Kind::BreakpointTrap)
        return {TrapAction::Kind::Terminate, "unexpected breakpoint at " + hex(trap.addr)};
    return {TrapAction::Kind::Terminate, "segmentation fault: exec at " + hex(trap.addr)};
}

void Policy::on_thread_event(SimState&, const ThreadEvent&) {}

SyscallTask Policy::passthrough(SimState& state, Tid tid, const Syscall& call) const {
    SyscallTask task;
    task.tid = tid;
    task.call = call;
    if (is_mapping_call(call))
        task.phases.push_back([](SyscallTask&) {});
    task.phases.push_back([&state](SyscallTask& t) { t.result = apply_syscall(state, t.tid, t.call); });
    return task;
}

std::unique_ptr<Policy> make_policy(PolicyKind kind, const PolicyOptions& opts) {
    switch (kind) {
    case PolicyKind::NoSandbox: return std::make_unique<NoSandboxPolicy>();
    case PolicyKind::ErimModel: return std::make_unique<ErimModelPolicy>();
    case PolicyKind::HodorModel: return std::make_unique<HodorModelPolicy>();
    case PolicyKind::GarmrErim: return std::make_unique<GarmrPolicy>(false, opts);
    case PolicyKind::GarmrXom: return std::make_unique<GarmrPolicy>(true, opts);
    }
    return nullptr;
}

namespace {

struct ExecRange {
    Addr lo = 0;
    Addr hi = 0;
    Permissions prot;
};

/// Range and resulting permissions of calls that may make memory executable.
std::optional<ExecRange> exec_request(const Syscall& call) {
    if (auto* c = std::get_if<sys::Mprotect>(&call))
        return ExecRange{c->addr, c->addr + page_ceil(c->len), c->xom ? Permissions::parse("r-x") : c->prot};
    if (auto* c = std::get_if<sys::PkeyMprotect>(&call))
        return ExecRange{c->addr, c->addr + page_ceil(c->len), c->prot};
    return std::nullopt;
}

}  // namespace

// --- ERIM model ---------------------------------------------------------------------

ErimModelPolicy::ErimModelPolicy() = default;

void ErimModelPolicy::attach(SimState& s, const image::ImageInfo& info) {
    Policy::attach(s, info);
    patterns_ = default_patterns(info.locked);
    mark_unsafe(s, scan_all(s, patterns_));
}

void ErimModelPolicy::mark_unsafe(SimState& s, const std::vector<UnsafeOccurrence>& occs) {
    for (const auto& o : occs) {
        if (o.safe || mon_.gate_sites.count(o.addr))
            continue;
        Addr page = page_floor(o.addr);
        for (Mapping* m : s.space.isolate(page, page + kPageSize))
            m->monitor_marked_nonexec = true;
        unsafe_pages_.insert(page);
        s.log(kMonitorTid, "scan", "mark", "unsafe " + std::string(to_string(o.kind)) + " at " + hex(o.addr));
    }
}

SyscallTask ErimModelPolicy::begin_syscall(SimState& s, Tid tid, const Syscall& call) {
    const ThreadState* t = s.thread(tid);
    // The syscall site stands in for the caller's identity.
    bool from_t = t && mon_.in_t_code(t->regs.rip);

    if (auto* c = std::get_if<sys::Mmap>(&call); c && c->prot.exec) {
        SyscallTask task;
        task.tid = tid;
        task.call = call;
        task.phases.push_back([](SyscallTask&) {});
        task.phases.push_back([this, &s, from_t](SyscallTask& tk) {
            tk.result = apply_syscall(s, tk.tid, tk.call);
            auto& c = std::get<sys::Mmap>(tk.call);
            if (!tk.result.ok() || from_t)
                return;
            Addr lo = static_cast<Addr>(tk.result.value);
            mark_unsafe(s, scan_code_range(s, lo, lo + page_ceil(c.len), patterns_));
        });
        return task;
    }
    if (auto r = exec_request(call); r && r->prot.exec) {
        SyscallTask task;
        task.tid = tid;
        task.call = call;
        auto found = std::make_shared<std::vector<UnsafeOccurrence>>();
        Addr lo = r->lo, hi = r->hi;
        task.phases.push_back([this, &s, from_t, found, lo, hi](SyscallTask&) {
            if (from_t) {
                s.log(kMonitorTid, "scan", "-", "skipped, caller inside trusted code");
                return;
            }
            *found = scan_code_range(s, lo, hi, patterns_, lo, hi);
            s.log(kMonitorTid, "scan", "-", range_str(lo, hi) + ": " + std::to_string(found->size()) + " occurrences");
        });
        task.phases.push_back([this, &s, found](SyscallTask& tk) {
            tk.result = apply_syscall(s, tk.tid, tk.call);
            if (tk.result.ok())
                mark_unsafe(s, *found);
        });
        return task;
    }
    return passthrough(s, tid, call);
}

TrapAction ErimModelPolicy::on_trap(SimState& s, Tid tid, const StepResult& trap) {
    Addr rip = s.thread(tid)->regs.rip;
    const Mapping* m = s.space.find(rip);
    // The mark travels with the pages when they are remapped.
    if (unsafe_pages_.count(page_floor(rip)) || unsafe_pages_.count(page_floor(trap.addr)) ||
        (m && m->monitor_marked_nonexec))
        return {TrapAction::Kind::Terminate, "executed page with unsafe instruction at " + hex(rip)};
    return Policy::on_trap(s, tid, trap);
}

// --- Hodor model ------------------------------------------------------------------

HodorModelPolicy::HodorModelPolicy() = default;

void HodorModelPolicy::attach(SimState& s, const image::ImageInfo& info) {
    Policy::attach(s, info);
    patterns_ = {lock_check_pattern(info.locked)};
    for (Addr p = info.t_code; p < info.t_code + info.t_code_len; p += kPageSize)
        protected_pages_.insert(p);
    for (Addr p = info.t_data; p < info.t_data + info.t_data_len; p += kPageSize)
        protected_pages_.insert(p);
    vet(s, 0, scan_all(s, patterns_));
}

void HodorModelPolicy::vet(SimState& s, Tid tid, const std::vector<UnsafeOccurrence>& occs) {
    std::vector<UnsafeOccurrence> need;
    for (const auto& o : occs)
        if (o.kind == UnsafeKind::Wrpkru && !o.safe && !mon_.gate_sites.count(o.addr) && !mon_.vetting.count(o.addr))
            need.push_back(o);
    if (need.empty())
        return;
    ThreadState* t = s.thread(tid);
    std::vector<std::size_t> free;
    std::size_t slots = std::min(s.debug_slot_count, kMaxDebugSlots);
    for (std::size_t i = 0; t && i < slots; ++i)
        if (!t->debug_regs[i].enabled)
            free.push_back(i);
    if (free.size() >= need.size()) {
        for (std::size_t i = 0; i < need.size(); ++i) {
            t->debug_regs[free[i]] = DebugSlot{need[i].addr, true};
            mon_.vetting[need[i].addr] = Vetting{VetKind::Breakpoint, free[i]};
            s.log(tid, "vet", "breakpoint", "slot " + std::to_string(free[i]) + " at " + hex(need[i].addr));
        }
        return;
    }
    for (const auto& o : need) {
        Addr page = page_floor(o.addr);
        for (Mapping* m : s.space.isolate(page, page + kPageSize))
            m->monitor_marked_nonexec = true;
        marked_pages_.insert(page);
        mon_.vetting[o.addr] = Vetting{VetKind::FaultEmulate, 0};
        s.log(tid, "vet", "fault-emulate", hex(o.addr));
    }
}

SyscallTask HodorModelPolicy::begin_syscall(SimState& s, Tid tid, const Syscall& call) {
    if (auto* c = std::get_if<sys::PkeyMprotect>(&call)) {
        Addr hi = c->addr + page_ceil(c->len);
        for (Addr p : protected_pages_) {
            if (ranges_overlap(c->addr, hi, p, p + kPageSize)) {
                SyscallTask task;
                task.tid = tid;
                task.call = call;
                task.phases.push_back([](SyscallTask& tk) {
                    tk.decision = Decision::deny("pkey_mprotect on trusted memory");
                    tk.result = SyscallResult::failure(err::kPerm);
                });
                return task;
            }
        }
    }
    if (auto* c = std::get_if<sys::Mmap>(&call); c && c->prot.exec) {
        SyscallTask task;
        task.tid = tid;
        task.call = call;
        task.phases.push_back([](SyscallTask&) {});
        task.phases.push_back([this, &s](SyscallTask& tk) {
            tk.result = apply_syscall(s, tk.tid, tk.call);
            if (!tk.result.ok())
                return;
            Addr lo = static_cast<Addr>(tk.result.value);
            vet(s, tk.tid, scan_code_range(s, lo, lo + page_ceil(std::get<sys::Mmap>(tk.call).len), patterns_));
        });
        return task;
    }
    if (auto r = exec_request(call); r && r->prot.exec) {
        SyscallTask task;
        task.tid = tid;
        task.call = call;
        auto found = std::make_shared<std::vector<UnsafeOccurrence>>();
        Addr lo = r->lo, hi = r->hi;
        task.phases.push_back([this, &s, found, lo, hi](SyscallTask&) {
            *found = scan_code_range(s, lo, hi, patterns_, lo, hi);
            s.log(kMonitorTid, "scan", "-", range_str(lo, hi) + ": " + std::to_string(found->size()) + " occurrences");
        });
        task.phases.push_back([this, &s, found](SyscallTask& tk) {
            tk.result = apply_syscall(s, tk.tid, tk.call);
            if (tk.result.ok())
                vet(s, tk.tid, *found);
        });
        return task;
    }
    return passthrough(s, tid, call);
}

TrapAction HodorModelPolicy::on_trap(SimState& s, Tid tid, const StepResult& trap) {
    ThreadState* t = s.thread(tid);
    Addr rip = t->regs.rip;
    if (trap.kind == StepResult::Kind::BreakpointTrap)
        return {TrapAction::Kind::Terminate, "hardware breakpoint at " + hex(rip)};
    if (!marked_pages_.count(page_floor(rip)) && !marked_pages_.count(page_floor(trap.addr)))
        return Policy::on_trap(s, tid, trap);
    // Single-step mode: wrpkru is checked, everything else runs.
    Bytes w = fetch_window(s, rip, 3, true);
    if (w.size() == 3 && w[0] == 0x0F && w[1] == 0x01 && w[2] == 0xEF && !mon_.gate_sites.count(rip)) {
        auto occs = scan_bytes(fetch_window(s, rip, 3 + max_pattern_length(patterns_), true), rip, patterns_);
        if (occs.empty() || !occs.front().safe)
            return {TrapAction::Kind::Terminate, "unsafe wrpkru at " + hex(rip)};
    }
    auto e = x86::emulate_at(s, tid);
    if (e.kind != x86::ExecResult::Kind::Advanced)
        return {TrapAction::Kind::Terminate, e.reason.empty() ? "fault during emulation at " + hex(rip) : e.reason};
    s.log(tid, "trap", "emulate", hex(rip));
    return {};
}

// --- Garmr -----------------------------------------------------------------------

struct GarmrPolicy::PublishJob {
    Addr lo = 0;
    Addr hi = 0;
    Permissions final_perms;
    bool xom = false;
    std::optional<int> key;
    Domain domain = Domain::U;
    std::function<SyscallResult(SyscallTask&)> enter;
    std::vector<UnsafeOccurrence> found;
};

GarmrPolicy::GarmrPolicy(bool xom, const PolicyOptions& opts) : xom_(xom), opts_(opts) {}

void GarmrPolicy::attach(SimState& s, const image::ImageInfo& info) {
    Policy::attach(s, info);
    info_ = info;
    // Without user-level gates every wrpkru outside the loader's own sites
    // is unsafe.
    patterns_ = xom_ ? std::vector<SafePattern>{xrstor_check_pattern()} : default_patterns(info.locked);
    image::map_special_page(s, info);
    mon_.special_page = info.special_page;
    for (Addr p = info.t_data; p < info.t_data + info.t_data_len; p += kPageSize)
        mon_.trusted_pages.insert(p);
    agent_init(s, 0, default_slist(), {s.proc_self_mem});
    replace_scan(0, ~Addr{0}, scan_all(s, patterns_));
    revet(s);
    s.log(kMonitorTid, "loader", "-",
          "special page at " + hex(mon_.special_page) + ", " + std::to_string(mon_.scanned_exec.size()) +
              " occurrences, " + std::to_string(mon_.vetting.size()) + " vetted");
}

bool GarmrPolicy::special_page_intact(const SimState& s) const {
    const Mapping* m = s.space.find(mon_.special_page);
    if (!m || m->perms != Permissions::parse("r-x") || m->monitor_marked_nonexec || m->share != ShareMode::Private ||
        m->file_backed())
        return false;
    Bytes code = image::special_page_code();
    auto b = s.peek_range(mon_.special_page, code.size());
    return b && *b == code;
}

std::optional<Domain> GarmrPolicy::current_domain(SimState& s, Tid tid) {
    if (!special_page_intact(s)) {
        s.log(tid, "domain", "-", "special page missing or altered");
        return std::nullopt;
    }
    if (xom_) {
        s.log(tid, "domain", "-", "U (all threads untrusted)");
        return Domain::U;
    }
    ThreadState* t = s.thread(tid);
    Registers saved = t->regs;
    t->regs.rip = mon_.special_page;
    t->regs[Reg::Rcx] = 0;
    s.log(tid, "probe", "-", "redirect to special page " + hex(mon_.special_page));
    StepResult r = step(s, tid);
    std::uint32_t value = static_cast<std::uint32_t>(t->regs[Reg::Rax]);
    t->regs = saved;
    if (r.kind != StepResult::Kind::Advanced) {
        s.log(tid, "probe", "-", "rdpkru failed: " + std::string(to_string(r.kind)));
        return std::nullopt;
    }
    s.log(tid, "probe", "-", "rdpkru = " + hex(value));
    Domain d = PkruValue(value).access_disabled(s.trusted_key) ? Domain::U : Domain::T;
    s.log(tid, "probe", "-", "registers restored, domain " + std::string(to_string(d)));
    return d;
}

bool GarmrPolicy::touches_protected(const SimState& s, Addr lo, Addr hi, bool include_code) const {
    if (ranges_overlap(lo, hi, mon_.t_code, mon_.t_code + mon_.t_code_len))
        return true;
    if (ranges_overlap(lo, hi, mon_.special_page, mon_.special_page + kPageSize))
        return true;
    for (Addr p : mon_.trusted_pages)
        if (ranges_overlap(lo, hi, p, p + kPageSize))
            return true;
    return any_mapping(s, lo, hi, [&](const Mapping& m) {
        return (xom_ && m.exec_only) || (include_code && (m.perms.exec || m.monitor_marked_nonexec));
    });
}

std::optional<Decision> GarmrPolicy::check_u_call(const SimState& s, const Syscall& call) const {
    auto range_check = [&](Addr lo, Addr len, bool code, const char* what) -> std::optional<Decision> {
        if (touches_protected(s, lo, lo + std::max<Addr>(page_ceil(len), len), code))
            return Decision::deny(std::string(what) + " touches protected memory");
        return std::nullopt;
    };
    return std::visit(
        overloaded{
            [](const sys::ModifyLdt&) -> std::optional<Decision> { return Decision::deny("modify_ldt from U"); },
            [](const sys::Seccomp&) -> std::optional<Decision> { return Decision::deny("seccomp from U"); },
            [](const sys::Prctl& c) -> std::optional<Decision> {
                if (c.option == sys::PrctlOption::SetSeccomp)
                    return Decision::deny("prctl installing seccomp from U");
                if (c.option == sys::PrctlOption::AgentInit)
                    return Decision::deny("agent re-initialisation from U");
                return std::nullopt;
            },
            [](const sys::Ptrace&) -> std::optional<Decision> { return Decision::deny("ptrace from U"); },
            [](const sys::PkeyAlloc&) -> std::optional<Decision> { return Decision::deny("pkey_alloc from U"); },
            [](const sys::PkeyFree&) -> std::optional<Decision> { return Decision::deny("pkey_free from U"); },
            [](const sys::PkeyMprotect&) -> std::optional<Decision> {
                return Decision::deny("pkey_mprotect from U");
            },
            [](const sys::Shmat&) -> std::optional<Decision> { return Decision::deny("shmat from U"); },
            [](const sys::Shmdt&) -> std::optional<Decision> { return Decision::deny("shmdt from U"); },
            [&](const sys::ProcessVmReadv& c) { return range_check(c.addr, c.len, false, "process_vm_readv"); },
            [&](const sys::ProcessVmWritev& c) {
                return range_check(c.addr, c.data.size(), true, "process_vm_writev");
            },
            [&](const sys::Mmap& c) -> std::optional<Decision> {
                if (c.addr == 0)
                    return std::nullopt;
                return range_check(c.addr, c.len, false, "mmap");
            },
            [&](const sys::Munmap& c) { return range_check(c.addr, c.len, false, "munmap"); },
            [&](const sys::Mprotect& c) { return range_check(c.addr, c.len, false, "mprotect"); },
            [&](const sys::Mremap& c) -> std::optional<Decision> {
                if (auto d = range_check(c.old_addr, c.old_len, false, "mremap"))
                    return d;
                if (c.fixed)
                    return range_check(c.new_addr, c.new_len, false, "mremap");
                return std::nullopt;
            },
            [](const auto&) -> std::optional<Decision> { return std::nullopt; },
        },
        call);
}

std::optional<Decision> GarmrPolicy::check_mapping_rules(const SimState& s, const Syscall& call) const {
    auto wx = [](Permissions p) { return p.write && p.exec; };
    auto shared_in = [&](Addr lo, Addr len) {
        return any_mapping(s, lo, lo + page_ceil(len), [](const Mapping& m) { return m.share == ShareMode::Shared; });
    };
    auto exec_only_in = [&](Addr lo, Addr len) {
        return any_mapping(s, lo, lo + page_ceil(len), [](const Mapping& m) { return m.exec_only; });
    };
    if (auto* c = std::get_if<sys::Mmap>(&call)) {
        if (wx(c->prot))
            return Decision::deny("W^X: writable and executable mapping");
        if (c->prot.exec && c->share != MmapShare::Private)
            return Decision::deny("executable shared mapping");
    } else if (auto* c = std::get_if<sys::Mprotect>(&call)) {
        if (!c->xom && wx(c->prot))
            return Decision::deny("W^X: writable and executable mapping");
        if ((c->prot.exec || c->xom) && shared_in(c->addr, c->len))
            return Decision::deny("executable shared mapping");
        if (xom_ && !c->xom && exec_only_in(c->addr, c->len))
            return Decision::deny("permission change on execute-only memory");
    } else if (auto* c = std::get_if<sys::PkeyMprotect>(&call)) {
        if (wx(c->prot))
            return Decision::deny("W^X: writable and executable mapping");
        if (c->prot.exec && shared_in(c->addr, c->len))
            return Decision::deny("executable shared mapping");
        if (xom_ && exec_only_in(c->addr, c->len))
            return Decision::deny("permission change on execute-only memory");
    } else if (auto* c = std::get_if<sys::Shmat>(&call)) {
        if (c->prot.exec)
            return Decision::deny("executable shared mapping");
    }
    return std::nullopt;
}

SyscallTask GarmrPolicy::begin_syscall(SimState& s, Tid tid, const Syscall& call) {
    SyscallTask task;
    task.tid = tid;
    task.call = call;
    task.phases.push_back([this, &s](SyscallTask& t) {
        auto refuse = [&](Decision d) {
            t.result = SyscallResult::failure(d.error ? d.error : err::kPerm);
            t.decision = std::move(d);
            t.stop();
        };
        auto dom = current_domain(s, t.tid);
        if (!dom) {
            refuse(Decision::terminate("special page missing or altered"));
            return;
        }
        if (*dom == Domain::U) {
            if (auto d = check_u_call(s, t.call)) {
                refuse(*d);
                return;
            }
        }
        if (auto d = check_mapping_rules(s, t.call)) {
            refuse(*d);
            return;
        }
        Domain domain = *dom;
        std::visit(
            overloaded{
                [&](const sys::Mmap& c) { plan_mmap(t, s, c); },
                [&](const sys::Mprotect& c) { plan_protect(t, s, c.addr, c.len, c.prot, std::nullopt, c.xom); },
                [&](const sys::PkeyMprotect& c) {
                    plan_protect(t, s, c.addr, c.len, c.prot, c.key, false);
                    (void)domain;
                },
                [&](const sys::Mremap& c) { plan_mremap(t, s, c); },
                [&](const sys::Munmap& c) {
                    t.result = apply_syscall(s, t.tid, t.call);
                    if (t.result.ok())
                        rescan(s, c.addr, c.addr + page_ceil(c.len));
                },
                [&](const sys::Shmdt& c) {
                    const Mapping* m = s.space.find(c.addr);
                    Addr hi = m ? m->end() : c.addr;
                    t.result = apply_syscall(s, t.tid, t.call);
                    if (t.result.ok())
                        rescan(s, c.addr, hi);
                },
                [&](const sys::Execve&) {
                    t.result = apply_syscall(s, t.tid, t.call);
                    if (t.result.ok())
                        after_execve(s, t.tid);
                },
                [&](const auto&) { t.result = apply_syscall(s, t.tid, t.call); },
            },
            t.call);
    });
    return task;
}

void GarmrPolicy::plan_protect(SyscallTask& t, SimState& s, Addr addr, Addr len, Permissions prot,
                               std::optional<int> key, bool xom) {
    Addr lo = addr, hi = addr + page_ceil(len);
    auto track_trusted = [this, lo, hi, key, &s](const SyscallResult& r) {
        if (!key || !r.ok())
            return;
        for (Addr p = page_floor(lo); p < hi; p += kPageSize) {
            if (*key == s.trusted_key.id)
                mon_.trusted_pages.insert(p);
            else
                mon_.trusted_pages.erase(p);
        }
    };
    if (!prot.exec && !xom) {
        t.result = apply_syscall(s, t.tid, t.call);
        if (t.result.ok())
            rescan(s, lo, hi);
        track_trusted(t.result);
        return;
    }
    if (any_mapping(s, lo, hi, [](const Mapping& m) { return m.file_backed(); })) {
        t.decision = Decision::deny("executable file-backed mapping");
        t.result = SyscallResult::failure(err::kPerm);
        return;
    }
    if (!opts_.race_safe_publish) {
        auto found = std::make_shared<std::vector<UnsafeOccurrence>>(
            scan_code_range(s, lo > rescan_margin(patterns_) ? lo - rescan_margin(patterns_) : 0, hi, patterns_, lo, hi));
        s.log(t.tid, "scan", "-", range_str(lo, hi) + " while writable: " + std::to_string(found->size()) + " occurrences");
        t.phases.push_back([this, &s, found, lo, hi, track_trusted](SyscallTask& tk) {
            tk.result = apply_syscall(s, tk.tid, tk.call);
            if (!tk.result.ok())
                return;
            Addr from = lo > rescan_margin(patterns_) ? lo - rescan_margin(patterns_) : 0;
            replace_scan(from, hi, *found);
            revet(s);
            track_trusted(tk.result);
            s.log(tk.tid, "publish", "allow", range_str(lo, hi));
        });
        return;
    }
    auto job = std::make_shared<PublishJob>();
    job->lo = lo;
    job->hi = hi;
    job->final_perms = xom ? Permissions::parse("r-x") : prot;
    job->xom = xom;
    job->key = key;
    job->enter = [&s, lo, hi, prot, key](SyscallTask& tk) {
        if (key)
            return apply_syscall(s, tk.tid, sys::PkeyMprotect{lo, hi - lo, strip_wx(prot), *key});
        return apply_syscall(s, tk.tid, sys::Mprotect{lo, hi - lo, strip_wx(prot), false});
    };
    plan_publish(t, s, job);
    t.phases.push_back([track_trusted](SyscallTask& tk) { track_trusted(tk.result); });
}

void GarmrPolicy::plan_mmap(SyscallTask& t, SimState& s, const sys::Mmap& c) {
    bool rewrite = false;
    if (!c.anonymous && c.share == MmapShare::Private) {
        auto fd = s.fds.find(c.fd);
        rewrite = fd != s.fds.end() && fd->second.inode != s.proc_self_mem && page_aligned(c.offset);
    }
    Bytes content;
    sys::Mmap anon = c;
    if (rewrite) {
        content = file_slice(s, s.fds.at(c.fd).inode, c.offset, page_ceil(c.len));
        anon.anonymous = true;
        anon.fd = -1;
        anon.offset = 0;
        t.decision = Decision::rewrite(anon, "file-backed mapping replaced by anonymous copy");
    }
    if (!c.prot.exec) {
        t.result = apply_syscall(s, t.tid, anon);
        if (!t.result.ok())
            return;
        Addr lo = static_cast<Addr>(t.result.value);
        copy_in(s, lo, content);
        rescan(s, lo, lo + page_ceil(c.len));
        return;
    }
    auto job = std::make_shared<PublishJob>();
    job->final_perms = c.prot;
    job->enter = [this, &s, anon, content, job](SyscallTask& tk) {
        sys::Mmap stripped = anon;
        stripped.prot = strip_wx(anon.prot);
        SyscallResult r = apply_syscall(s, tk.tid, stripped);
        if (!r.ok())
            return r;
        job->lo = static_cast<Addr>(r.value);
        job->hi = job->lo + page_ceil(anon.len);
        copy_in(s, job->lo, content);
        return r;
    };
    plan_publish(t, s, job);
}

void GarmrPolicy::plan_publish(SyscallTask& t, SimState& s, std::shared_ptr<PublishJob> job) {
    SyscallResult r = job->enter(t);
    t.result = r;
    if (!r.ok())
        return;
    mon_.scan_lock = t.tid;
    t.holds_scan_lock = true;
    rescan(s, job->lo, job->hi);
    s.log(t.tid, "publish", "-", "strip write/exec on " + range_str(job->lo, job->hi) + ", scan_lock taken");

    t.phases.push_back([this, &s, job](SyscallTask& tk) {
        Addr m = rescan_margin(patterns_);
        job->found = scan_code_range(s, job->lo > m ? job->lo - m : 0, job->hi, patterns_, job->lo, job->hi);
        s.log(tk.tid, "scan", "-", range_str(job->lo, job->hi) + ": " + std::to_string(job->found.size()) + " occurrences");
    });
    t.phases.push_back([this, &s, job](SyscallTask& tk) {
        if (job->xom) {
            apply_syscall(s, tk.tid, sys::Mprotect{job->lo, job->hi - job->lo, job->final_perms, true});
        } else {
            for (Mapping* m : s.space.isolate(job->lo, job->hi))
                m->perms = job->final_perms;
            s.space.coalesce();
        }
        Addr margin = rescan_margin(patterns_);
        replace_scan(job->lo > margin ? job->lo - margin : 0, job->hi, job->found);
        revet(s);
        std::size_t bp = 0, fe = 0;
        for (const auto& o : job->found) {
            auto v = mon_.vetting.find(o.addr);
            if (v == mon_.vetting.end())
                continue;
            (v->second.kind == VetKind::Breakpoint ? bp : fe)++;
        }
        mon_.scan_lock.reset();
        tk.holds_scan_lock = false;
        std::string how = fe ? "rejected to fault-and-emulate" : "published";
        s.log(tk.tid, "publish", "-",
              how + " " + range_str(job->lo, job->hi) + " (" + std::to_string(bp) + " breakpoints, " +
                  std::to_string(fe) + " fault-emulate), scan_lock released");
    });
}

GarmrPolicy::PublishResult GarmrPolicy::safe_publish(SimState& s, Tid tid, Addr lo, Addr hi, Permissions final_perms) {
    SyscallTask task;
    task.tid = tid;
    auto job = std::make_shared<PublishJob>();
    job->lo = lo;
    job->hi = hi;
    job->final_perms = final_perms;
    job->enter = [&s, lo, hi](SyscallTask& tk) {
        for (Mapping* m : s.space.isolate(lo, hi))
            m->perms = strip_wx(m->perms);
        s.log(tk.tid, "publish", "-", "monitor strips " + range_str(lo, hi));
        return SyscallResult::success();
    };
    plan_publish(task, s, job);
    while (!task.finished())
        task.advance();
    for (const auto& o : job->found) {
        auto v = mon_.vetting.find(o.addr);
        if (v != mon_.vetting.end() && v->second.kind == VetKind::FaultEmulate)
            return PublishResult::Rejected;
    }
    return PublishResult::Published;
}

void GarmrPolicy::plan_mremap(SyscallTask& t, SimState& s, const sys::Mremap& c) {
    Addr old_lo = c.old_addr, old_hi = c.old_addr + page_ceil(c.old_len);
    Addr new_len = page_ceil(c.new_len);
    bool code = page_aligned(old_lo) && s.space.fully_mapped(old_lo, old_hi) &&
                any_mapping(s, old_lo, old_hi, [](const Mapping& m) { return m.perms.exec; });
    if (!code) {
        t.result = apply_syscall(s, t.tid, t.call);
        if (t.result.ok()) {
            rescan(s, old_lo, old_hi);
            Addr dest = static_cast<Addr>(t.result.value);
            rescan(s, dest, dest + new_len);
        }
        return;
    }
    auto pieces = std::make_shared<std::vector<std::pair<Addr, Permissions>>>();
    for (Mapping* m : s.space.isolate(old_lo, old_hi)) {
        pieces->emplace_back(m->start - old_lo, m->perms);
        m->perms = strip_wx(m->perms);
    }
    mon_.scan_lock = t.tid;
    t.holds_scan_lock = true;
    rescan(s, old_lo, old_hi);
    s.log(t.tid, "relocate", "-", "strip write/exec on " + range_str(old_lo, old_hi) + ", vetting removed");

    auto restore = [&s, pieces](Addr base, Addr len) {
        for (Mapping* m : s.space.isolate(base, base + len)) {
            Addr off = m->start - base;
            Permissions p = pieces->front().second;
            for (const auto& [o, perms] : *pieces)
                if (o <= off)
                    p = perms;
            m->perms = p;
        }
        s.space.coalesce();
    };
    auto found = std::make_shared<std::vector<UnsafeOccurrence>>();
    auto dest = std::make_shared<Addr>(0);
    t.phases.push_back([this, &s, found, dest, old_lo, old_hi, new_len, restore](SyscallTask& tk) {
        tk.result = apply_syscall(s, tk.tid, tk.call);
        if (!tk.result.ok()) {
            restore(old_lo, old_hi - old_lo);
            rescan(s, old_lo, old_hi);
            mon_.scan_lock.reset();
            tk.holds_scan_lock = false;
            tk.stop();
            return;
        }
        *dest = static_cast<Addr>(tk.result.value);
        rescan(s, old_lo, old_hi);
        Addr m = rescan_margin(patterns_);
        *found = scan_code_range(s, *dest > m ? *dest - m : 0, *dest + new_len, patterns_, *dest, *dest + new_len);
        s.log(tk.tid, "scan", "-",
              range_str(*dest, *dest + new_len) + " after move: " + std::to_string(found->size()) + " occurrences");
    });
    t.phases.push_back([this, &s, found, dest, new_len, restore](SyscallTask& tk) {
        restore(*dest, new_len);
        Addr m = rescan_margin(patterns_);
        replace_scan(*dest > m ? *dest - m : 0, *dest + new_len, *found);
        revet(s);
        mon_.scan_lock.reset();
        tk.holds_scan_lock = false;
        s.log(tk.tid, "relocate", "-", "vetting re-established at " + range_str(*dest, *dest + new_len));
    });
}

void GarmrPolicy::after_execve(SimState& s, Tid tid) {
    mon_.trusted_pages.clear();
    mon_.scanned_exec.clear();
    mon_.vetting.clear();
    mon_.frozen_breakpoints.clear();
    mon_.multi_threaded = false;
    mon_.t_code_len = 0;
    mon_.gate_sites.clear();
    image::map_special_page(s, info_);
    agent_init(s, tid, default_slist(), {s.proc_self_mem});
    s.log(tid, "loader", "-", "re-initialised after execve");
}

void GarmrPolicy::replace_scan(Addr lo, Addr hi, const std::vector<UnsafeOccurrence>& occs) {
    auto it = mon_.scanned_exec.lower_bound(lo);
    while (it != mon_.scanned_exec.end() && it->first < hi)
        it = mon_.scanned_exec.erase(it);
    for (const auto& o : occs)
        if (o.addr >= lo && o.addr < hi)
            mon_.scanned_exec[o.addr] = o;
}

void GarmrPolicy::rescan(SimState& s, Addr lo, Addr hi) {
    Addr m = rescan_margin(patterns_);
    Addr from = lo > m ? lo - m : 0;
    replace_scan(from, hi, scan_code_range(s, from, hi, patterns_));
    revet(s);
}

bool GarmrPolicy::needs_vetting(const UnsafeOccurrence& o) const { return !o.safe && !mon_.gate_sites.count(o.addr); }

std::size_t GarmrPolicy::free_slots(const SimState& s) const {
    std::size_t used = 0;
    for (const auto& [a, v] : mon_.vetting)
        if (v.kind == VetKind::Breakpoint)
            ++used;
    std::size_t total = std::min(s.debug_slot_count, kMaxDebugSlots);
    return used >= total ? 0 : total - used;
}

void GarmrPolicy::remove_vetting(SimState& s, Addr addr) {
    auto it = mon_.vetting.find(addr);
    if (it == mon_.vetting.end())
        return;
    if (it->second.kind == VetKind::Breakpoint) {
        for (auto& t : s.threads) {
            DebugSlot& d = t.debug_regs[it->second.slot];
            if (d.addr == addr)
                d = DebugSlot{};
        }
        mon_.frozen_breakpoints.erase(addr);
    }
    s.log(kMonitorTid, "vet", "-", "removed " + std::string(to_string(it->second.kind)) + " at " + hex(addr));
    mon_.vetting.erase(it);
}

VetKind GarmrPolicy::install_vetting(SimState& s, const std::vector<UnsafeOccurrence>& occs) {
    if (!mon_.multi_threaded && free_slots(s) >= occs.size()) {
        std::size_t total = std::min(s.debug_slot_count, kMaxDebugSlots);
        for (const auto& o : occs) {
            std::vector<bool> used(total, false);
            for (const auto& [a, v] : mon_.vetting)
                if (v.kind == VetKind::Breakpoint && v.slot < total)
                    used[v.slot] = true;
            std::size_t slot = static_cast<std::size_t>(std::find(used.begin(), used.end(), false) - used.begin());
            mon_.vetting[o.addr] = Vetting{VetKind::Breakpoint, slot};
            for (auto& t : s.threads)
                if (t.alive)
                    t.debug_regs[slot] = DebugSlot{o.addr, true};
            s.log(kMonitorTid, "vet", "breakpoint",
                  std::string(to_string(o.kind)) + " at " + hex(o.addr) + " in slot " + std::to_string(slot));
        }
        return VetKind::Breakpoint;
    }
    for (const auto& o : occs) {
        mon_.vetting[o.addr] = Vetting{VetKind::FaultEmulate, 0};
        s.log(kMonitorTid, "vet", "fault-emulate",
              std::string(to_string(o.kind)) + " at " + hex(o.addr) + ", page " + hex(page_floor(o.addr)) +
                  " marked non-executable");
    }
    apply_marks(s);
    return VetKind::FaultEmulate;
}

void GarmrPolicy::revet(SimState& s) {
    std::vector<Addr> stale;
    for (const auto& [a, v] : mon_.vetting) {
        auto f = mon_.scanned_exec.find(a);
        if (f == mon_.scanned_exec.end() || !needs_vetting(f->second))
            stale.push_back(a);
    }
    for (Addr a : stale)
        remove_vetting(s, a);
    std::vector<UnsafeOccurrence> need;
    for (const auto& [a, o] : mon_.scanned_exec)
        if (needs_vetting(o) && !mon_.vetting.count(a))
            need.push_back(o);
    if (!need.empty())
        install_vetting(s, need);
    apply_marks(s);
}

void GarmrPolicy::apply_marks(SimState& s) {
    std::set<Addr> pages;
    for (const auto& [a, v] : mon_.vetting)
        if (v.kind == VetKind::FaultEmulate)
            pages.insert(page_floor(a));
    std::vector<std::pair<Addr, Addr>> marked;
    for (const auto& [start, m] : s.space)
        if (m.monitor_marked_nonexec)
            marked.emplace_back(m.start, m.end());
    for (auto [lo, hi] : marked)
        for (Mapping* m : s.space.isolate(lo, hi))
            m->monitor_marked_nonexec = false;
    for (Addr p : pages) {
        if (!s.space.find(p))
            continue;
        for (Mapping* m : s.space.isolate(p, p + kPageSize))
            if (m->perms.exec)
                m->monitor_marked_nonexec = true;
    }
    s.space.coalesce();
}

void GarmrPolicy::on_thread_event(SimState& s, const ThreadEvent& ev) {
    if (ev.kind == ThreadEvent::Kind::Exited) {
        s.log(ev.tid, "thread", "-", "exited, " + std::to_string(s.live_threads()) + " threads listed");
        return;
    }
    std::size_t listed = s.live_threads();
    if (!mon_.multi_threaded && listed > 1) {
        mon_.multi_threaded = true;
        for (const auto& [a, v] : mon_.vetting)
            if (v.kind == VetKind::Breakpoint)
                mon_.frozen_breakpoints.insert(a);
        s.log(ev.tid, "thread", "-",
              "multi-threaded (" + std::to_string(listed) + " threads listed), " +
                  std::to_string(mon_.frozen_breakpoints.size()) + " breakpoints frozen");
    }
    if (ThreadState* t = s.thread(ev.tid)) {
        for (const auto& [a, v] : mon_.vetting)
            if (v.kind == VetKind::Breakpoint)
                t->debug_regs[v.slot] = DebugSlot{a, true};
    }
    revet(s);
}

TrapAction GarmrPolicy::on_trap(SimState& s, Tid tid, const StepResult& trap) {
    Addr rip = s.thread(tid)->regs.rip;
    if (trap.kind == StepResult::Kind::BreakpointTrap)
        return vet_site(s, tid, rip, "breakpoint");
    const Mapping* a = s.space.find(rip);
    const Mapping* b = s.space.find(trap.addr);
    bool marked = (a && a->perms.exec && a->monitor_marked_nonexec) || (b && b->perms.exec && b->monitor_marked_nonexec);
    if (!marked)
        return Policy::on_trap(s, tid, trap);
    return vet_site(s, tid, rip, "exec fault");
}

TrapAction GarmrPolicy::vet_site(SimState& s, Tid tid, Addr rip, std::string_view how) {
    ThreadState* t = s.thread(tid);
    if (!mon_.gate_sites.count(rip)) {
        Bytes w = fetch_window(s, rip, kMaxOccurrenceLength + max_pattern_length(patterns_), true);
        auto occs = scan_bytes(w, rip, patterns_);
        if (!occs.empty() && occs.front().addr == rip && !occs.front().safe) {
            std::string where = " at " + hex(rip) + " (" + std::string(how) + ")";
            if (occs.front().kind == UnsafeKind::Wrpkru)
                return {TrapAction::Kind::Terminate, "unsafe wrpkru" + where};
            if (t->regs[Reg::Rax] & x86::kXrstorPkruBit)
                return {TrapAction::Kind::Terminate, "unsafe xrstor with eax bit 9 set" + where};
            s.log(tid, "trap", "-", "unsafe xrstor with eax bit 9 clear" + where);
        }
    }
    auto e = x86::emulate_at(s, tid);
    if (e.kind == x86::ExecResult::Kind::PkuFault)
        return {TrapAction::Kind::Terminate, "pku fault at " + hex(e.addr) + " during emulation"};
    if (e.kind == x86::ExecResult::Kind::PageFault)
        return {TrapAction::Kind::Terminate, "segmentation fault at " + hex(e.addr) + " during emulation"};
    if (e.kind == x86::ExecResult::Kind::Terminated)
        return {TrapAction::Kind::Terminate, e.reason};
    s.log(tid, "trap", "emulate", hex(rip) + " (" + std::string(how) + ")");
    return {};
}

}  // namespace pkusim
