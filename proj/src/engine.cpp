#include "pkusim/engine.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>

#include "pkusim/agent.hpp"
#include "pkusim/x86.hpp"

namespace pkusim {

namespace {

std::string hex(Addr a) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(a));
    return buf;
}

std::string tid_name(Tid t) { return t == kMonitorTid ? "monitor" : "t" + std::to_string(t); }

std::string result_str(const SyscallResult& r) {
    if (r.ok())
        return "= " + (r.value >= 0x10000 ? hex(static_cast<Addr>(r.value)) : std::to_string(r.value));
    return "= -" + std::string(errno_name(r.error));
}

}  // namespace

// --- outcome --------------------------------------------------------------------

std::string to_string(const Evidence& e) {
    switch (e.kind) {
    case Evidence::Kind::TrustedRead: return "TrustedRead(" + hex(e.addr) + ")";
    case Evidence::Kind::TrustedWrite: return "TrustedWrite(" + hex(e.addr) + ")";
    case Evidence::Kind::PkruUnlocked: return "PkruUnlocked(" + tid_name(e.tid) + ")";
    }
    return "?";
}

std::string_view to_string(Outcome::Kind k) {
    switch (k) {
    case Outcome::Kind::Completed: return "Completed";
    case Outcome::Kind::Blocked: return "Blocked";
    case Outcome::Kind::Breach: return "Breach";
    }
    return "?";
}

std::optional<Outcome::Kind> parse_outcome_kind(std::string_view s) {
    std::string lower(s);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "completed")
        return Outcome::Kind::Completed;
    if (lower == "blocked")
        return Outcome::Kind::Blocked;
    if (lower == "breach")
        return Outcome::Kind::Breach;
    return std::nullopt;
}

std::string describe(const Outcome& o) {
    switch (o.kind) {
    case Outcome::Kind::Completed: return "Completed";
    case Outcome::Kind::Blocked: return "Blocked (step " + std::to_string(o.step) + ": " + o.reason + ")";
    case Outcome::Kind::Breach: return "Breach (" + to_string(*o.evidence) + ")";
    }
    return "?";
}

// --- breach oracle ------------------------------------------------------------------

std::optional<BreachOracle::PageKey> BreachOracle::key_of(const SimState& s, Addr a) const {
    auto id = s.identity(a);
    if (!id)
        return std::nullopt;
    return PageKey{static_cast<int>(id->kind), id->id, page_floor(id->offset)};
}

void BreachOracle::add_pages(const SimState& s, Addr lo, Addr hi, std::set<PageKey>& into) {
    for (Addr p = page_floor(lo); p < hi; p += kPageSize)
        if (auto k = key_of(s, p))
            into.insert(*k);
}

void BreachOracle::seed(const SimState& s, const image::ImageInfo& info) {
    add_pages(s, info.t_data, info.t_data + info.t_data_len, secret_);
    add_pages(s, info.t_code, info.t_code + info.t_code_len, trusted_code_);
    if (const Mapping* m = s.space.find(info.special_page); m && m->perms.exec)
        add_pages(s, info.special_page, info.special_page + kPageSize, trusted_code_);
}

void BreachOracle::record(Evidence e) { evidence_.push_back(e); }

bool BreachOracle::unlocked(const SimState& s, Tid tid) const {
    const ThreadState* t = s.thread(tid);
    if (!t)
        return false;
    if (!t->pkru.access_disabled(s.trusted_key))
        return true;
    return s.xom_key && !t->pkru.access_disabled(*s.xom_key);
}

bool BreachOracle::in_trusted_code(const SimState& s, Addr a) const {
    auto k = key_of(s, a);
    return k && trusted_code_.count(*k);
}

bool BreachOracle::is_trusted_actor(const SimState& s, Tid tid) const {
    if (tid == kMonitorTid)
        return false;
    const ThreadState* t = s.thread(tid);
    return t && unlocked(s, tid) && in_trusted_code(s, t->regs.rip);
}

void BreachOracle::on_mem_access(const SimState& s, Tid tid, Addr addr, std::size_t len, AccessKind kind, Route) {
    if (is_trusted_actor(s, tid) || len == 0)
        return;
    for (Addr p = page_floor(addr); p < addr + len; p += kPageSize) {
        auto k = key_of(s, std::max(p, addr));
        if (!k)
            continue;
        Addr at = std::max(p, addr);
        if (secret_.count(*k)) {
            record({kind == AccessKind::Read ? Evidence::Kind::TrustedRead : Evidence::Kind::TrustedWrite, at, tid});
            return;
        }
        if (kind == AccessKind::Write && trusted_code_.count(*k)) {
            record({Evidence::Kind::TrustedWrite, at, tid});
            return;
        }
    }
}

void BreachOracle::on_execute(const SimState& s, Tid tid, Addr rip, const x86::Instruction& ins) {
    if (ins.is_validation() || !unlocked(s, tid) || in_trusted_code(s, rip))
        return;
    record({Evidence::Kind::PkruUnlocked, rip, tid});
}

void BreachOracle::on_syscall(const SimState& s, Tid tid, const Syscall& call) {
    const ThreadState* t = s.thread(tid);
    if (!t)
        return;
    if (unlocked(s, tid) && !in_trusted_code(s, t->regs.rip)) {
        record({Evidence::Kind::PkruUnlocked, t->regs.rip, tid});
        return;
    }
    if (auto* c = std::get_if<sys::PkeyMprotect>(&call); c && is_trusted_actor(s, tid) && c->key == s.trusted_key.id)
        add_pages(s, c->addr, c->addr + page_ceil(c->len), secret_);
    if (auto* c = std::get_if<sys::Mprotect>(&call); c && c->xom)
        add_pages(s, c->addr, c->addr + page_ceil(c->len), secret_);
}

void BreachOracle::finish(const SimState& s) {
    for (const auto& t : s.threads)
        if (t.alive && unlocked(s, t.tid) && !in_trusted_code(s, t.regs.rip))
            record({Evidence::Kind::PkruUnlocked, t.regs.rip, t.tid});
}

// --- auditor ---------------------------------------------------------------------------

std::vector<std::string> audit_state(const SimState& s, const std::vector<SafePattern>& patterns,
                                     const std::set<Addr>& exempt) {
    std::vector<std::string> out;
    std::vector<std::pair<Addr, Bytes>> runs;
    for (const auto& [start, m] : s.space) {
        std::string where = hex(m.start) + "-" + hex(m.end());
        if (m.perms.write && m.perms.exec)
            out.push_back("W^X violated at " + where);
        if (!m.perms.exec)
            continue;
        if (m.share == ShareMode::Shared)
            out.push_back("executable shared mapping at " + where);
        if (m.file_backed())
            out.push_back("executable file-backed mapping at " + where);
        Bytes b = *s.peek_range(m.start, m.length);
        if (!runs.empty() && runs.back().first + runs.back().second.size() == m.start)
            runs.back().second.insert(runs.back().second.end(), b.begin(), b.end());
        else
            runs.emplace_back(m.start, std::move(b));
    }

    std::set<Addr> unsafe;
    for (const auto& [base, bytes] : runs) {
        for (const auto& occ : scan_bytes(bytes, base, patterns)) {
            if (occ.safe || exempt.count(occ.addr))
                continue;
            unsafe.insert(occ.addr);
            const Mapping* m = s.space.find(occ.addr);
            if (m && m->monitor_marked_nonexec)
                continue;
            bool covered = true;
            for (const auto& t : s.threads)
                if (t.alive && !t.breakpoint_at(occ.addr, s.debug_slot_count))
                    covered = false;
            if (!covered)
                out.push_back("uncovered unsafe " + std::string(to_string(occ.kind)) + " at " + hex(occ.addr));
        }
    }

    std::size_t slots = std::min(s.debug_slot_count, kMaxDebugSlots);
    for (const auto& t : s.threads) {
        if (!t.alive)
            continue;
        for (std::size_t i = 0; i < slots; ++i) {
            const DebugSlot& d = t.debug_regs[i];
            if (d.enabled && !unsafe.count(d.addr))
                out.push_back("stale breakpoint at " + hex(d.addr) + " in " + tid_name(t.tid) + " slot " +
                              std::to_string(i));
        }
    }
    return out;
}

// --- simulator -------------------------------------------------------------------------

Simulator::Simulator(PolicyKind kind, const RunOptions& opts) : opts_(opts) {
    if (opts.debug_slots)
        state_.debug_slot_count = *opts.debug_slots;
    info_ = image::load_standard_image(state_);
    policy_ = make_policy(kind, opts.policy);
    policy_->attach(state_, info_);
    oracle_.seed(state_, info_);
    state_.observer = &oracle_;
    audit("attach");
}

Simulator::~Simulator() { state_.observer = nullptr; }

ThreadState& Simulator::live_thread(Tid tid) {
    ThreadState* t = state_.thread(tid);
    if (!t || !t->alive)
        throw EngineError("thread " + tid_name(tid) + " is not running");
    return *t;
}

void Simulator::block(std::string why) {
    if (!first_block_)
        first_block_ = Outcome::blocked(std::move(why), step_index_);
}

void Simulator::terminate(std::string why) {
    state_.log(kMonitorTid, "terminate", "terminate", why);
    block(std::move(why));
    terminated_ = true;
    pending_.clear();
}

void Simulator::audit(std::string_view after) {
    if (!opts_.audit || !is_garmr(policy_->kind()) || terminated_)
        return;
    for (auto& v : audit_state(state_, policy_->patterns(), policy_->monitor().gate_sites))
        audit_failures_.push_back("after " + std::string(after) + " (seq " + std::to_string(state_.event_log.size()) +
                                  "): " + v);
}

void Simulator::spawn(Tid tid, Tid from) { syscall(from, sys::Clone{sys::CloneVariant::Clone, tid}); }

void Simulator::syscall(Tid tid, const Syscall& call) {
    if (terminated_)
        return;
    live_thread(tid);
    if (pending_.count(tid))
        complete(tid);
    if (is_mapping_call(call)) {
        for (auto& [other, task] : pending_) {
            if (other != tid && task.holds_scan_lock) {
                state_.log(tid, syscall_name(call), "wait", "blocked on scan_lock held by " + tid_name(other));
                complete(other);
                break;
            }
        }
    }
    if (terminated_)
        return;
    oracle_.on_syscall(state_, tid, call);

    SyscallTask task;
    bool forward = true;
    if (state_.agent && state_.agent->initialized) {
        std::optional<InodeId> ino;
        if (auto* o = std::get_if<sys::Open>(&call))
            ino = resolve_path(state_, o->path);
        AgentRoute route = agent_route(*state_.agent, call, ino);
        if (route == AgentRoute::Deny) {
            last_result_ = SyscallResult::failure(err::kPerm);
            state_.log(tid, syscall_name(call), "deny", "agent: inode on deny list " + result_str(*last_result_));
            block("agent denied " + syscall_name(call));
            audit(syscall_name(call));
            return;
        }
        forward = route == AgentRoute::Forward;
    }
    if (forward) {
        task = policy_->begin_syscall(state_, tid, call);
    } else {
        task.tid = tid;
        task.call = call;
        task.decision.reason = "native";
        task.phases.push_back([this](SyscallTask& t) { t.result = apply_syscall(state_, t.tid, t.call); });
    }
    pending_[tid] = std::move(task);
    advance(tid);
    if (!interleaving_)
        complete(tid);
}

void Simulator::advance(Tid tid) {
    auto it = pending_.find(tid);
    if (it == pending_.end() || terminated_)
        return;
    it->second.advance();
    if (it->second.finished())
        finalize(tid);
    else
        audit(syscall_name(it->second.call));
}

void Simulator::complete(Tid tid) {
    while (!terminated_ && pending_.count(tid))
        advance(tid);
}

void Simulator::resume(Tid tid) {
    if (terminated_)
        return;
    advance(tid);
}

void Simulator::finalize(Tid tid) {
    SyscallTask task = std::move(pending_.at(tid));
    pending_.erase(tid);
    last_result_ = task.result;
    std::string name = syscall_name(task.call);
    std::string reason = task.decision.reason.empty() ? result_str(task.result)
                                                      : task.decision.reason + " " + result_str(task.result);
    state_.log(tid, name, std::string(to_string(task.decision.kind)), reason);

    switch (task.decision.kind) {
    case Decision::Kind::Deny:
        block(name + " denied: " + task.decision.reason);
        break;
    case Decision::Kind::Terminate:
        terminate(task.decision.reason);
        return;
    default:
        break;
    }
    if (task.result.ok()) {
        if (auto* c = std::get_if<sys::Clone>(&task.call);
            c && (c->variant == sys::CloneVariant::Clone || c->variant == sys::CloneVariant::Clone3))
            policy_->on_thread_event(state_, {ThreadEvent::Kind::Created, static_cast<Tid>(task.result.value)});
        if (std::holds_alternative<sys::Exit>(task.call))
            policy_->on_thread_event(state_, {ThreadEvent::Kind::Exited, tid});
        if (std::holds_alternative<sys::Execve>(task.call))
            std::erase_if(pending_, [&](const auto& p) { return !state_.thread(p.first); });
    }
    audit(name);
}

void Simulator::step(Tid tid, int count) {
    for (int i = 0; i < count && !terminated_; ++i) {
        live_thread(tid);
        if (pending_.count(tid))
            complete(tid);
        if (terminated_)
            return;
        Addr rip = state_.thread(tid)->regs.rip;
        StepResult r = pkusim::step(state_, tid);
        switch (r.kind) {
        case StepResult::Kind::Advanced:
            break;
        case StepResult::Kind::BreakpointTrap:
        case StepResult::Kind::ExecFault: {
            state_.log(tid, "trap", "-", std::string(to_string(r.kind)) + " at " + hex(rip));
            TrapAction a = policy_->on_trap(state_, tid, r);
            if (a.kind == TrapAction::Kind::Terminate) {
                terminate(a.reason);
                return;
            }
            break;
        }
        case StepResult::Kind::PkuFault:
            terminate("pku fault at " + hex(r.addr) + " (rip " + hex(rip) + ")");
            return;
        case StepResult::Kind::Terminated:
            terminate(r.reason + " at " + hex(rip));
            return;
        }
        audit("step");
    }
}

void Simulator::write_bytes(Tid tid, Addr addr, const Bytes& data) {
    if (terminated_)
        return;
    live_thread(tid);
    Bytes buf = data;
    AccessResult r = mem_access(state_, tid, addr, AccessKind::Write, Route::Cpu, std::span(buf));
    if (!r.ok()) {
        std::string kind = r.status == AccessResult::Status::PkuFault ? "pku fault" : "segmentation fault";
        terminate(kind + ": write to " + hex(r.fault_addr));
        return;
    }
    state_.log(tid, "write", "-", std::to_string(data.size()) + " bytes at " + hex(addr));
    audit("write");
}

void Simulator::set_reg(Tid tid, std::string_view reg, std::uint64_t value) {
    if (terminated_)
        return;
    ThreadState& t = live_thread(tid);
    if (reg == "rip") {
        t.regs.rip = value;
        return;
    }
    auto r = parse_reg(reg);
    if (!r)
        throw EngineError("unknown register " + std::string(reg));
    t.regs[*r] = reg.front() == 'e' ? (value & 0xFFFFFFFFull) : value;
}

void Simulator::interleave_begin() { interleaving_ = true; }

void Simulator::interleave_end() {
    interleaving_ = false;
    while (!terminated_ && !pending_.empty())
        complete(pending_.begin()->first);
}

Outcome Simulator::finish() {
    if (!finished_) {
        interleave_end();
        if (!terminated_)
            oracle_.finish(state_);
        finished_ = true;
    }
    if (!oracle_.evidence().empty())
        return Outcome::breach(oracle_.evidence().front());
    if (first_block_)
        return *first_block_;
    return Outcome::completed();
}

std::string format_log_line(const LogEvent& e, PolicyKind policy) {
    std::string line = std::to_string(e.seq) + " " + tid_name(e.tid) + " " + e.event + " " +
                       std::string(to_string(policy)) + " " + (e.decision.empty() ? "-" : e.decision);
    if (!e.reason.empty())
        line += " " + e.reason;
    return line;
}

std::vector<std::string> Simulator::log_lines() const {
    std::vector<std::string> out;
    for (const auto& e : state_.event_log)
        out.push_back(format_log_line(e, policy_->kind()));
    return out;
}

}  // namespace pkusim
