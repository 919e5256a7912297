#pragma once

// Sandbox policies. A policy sees the syscalls the agent forwards (or every
// syscall when no agent is installed), hardware traps, and thread creation
// and exit, and decides what happens.

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "pkusim/image.hpp"
#include "pkusim/kernel.hpp"
#include "pkusim/machine.hpp"
#include "pkusim/scanner.hpp"

namespace pkusim {

enum class PolicyKind { NoSandbox, ErimModel, HodorModel, GarmrErim, GarmrXom };

/// CLI spelling: none, erim-model, hodor-model, garmr-erim, garmr-xom.
std::string_view to_string(PolicyKind k);
std::optional<PolicyKind> parse_policy_kind(std::string_view s);
const std::vector<PolicyKind>& all_policy_kinds();
bool is_garmr(PolicyKind k);

struct PolicyOptions {
    /// When false the monitor scans a page while it is still writable and
    /// grants exec afterwards, i.e. without the strip/scan/publish protocol.
    bool race_safe_publish = true;
};

struct Decision {
    enum class Kind { Allow, Deny, Rewrite, Terminate };
    Kind kind = Kind::Allow;
    int error = 0;
    std::optional<Syscall> rewritten;
    std::string reason;

    static Decision allow(std::string why = {}) { return {Kind::Allow, 0, std::nullopt, std::move(why)}; }
    static Decision deny(std::string why, int e = err::kPerm) { return {Kind::Deny, e, std::nullopt, std::move(why)}; }
    static Decision rewrite(Syscall call, std::string why) { return {Kind::Rewrite, 0, std::move(call), std::move(why)}; }
    static Decision terminate(std::string why) { return {Kind::Terminate, 0, std::nullopt, std::move(why)}; }
};

std::string_view to_string(Decision::Kind k);

enum class VetKind { Breakpoint, FaultEmulate };
std::string_view to_string(VetKind k);

struct Vetting {
    VetKind kind = VetKind::Breakpoint;
    std::size_t slot = 0;
};

struct MonitorState {
    std::set<Addr> trusted_pages;
    /// Every occurrence found on code pages, by address.
    std::map<Addr, UnsafeOccurrence> scanned_exec;
    std::map<Addr, Vetting> vetting;
    bool multi_threaded = false;
    std::set<Addr> frozen_breakpoints;
    std::optional<Tid> scan_lock;
    Addr special_page = 0;
    std::set<Addr> gate_sites;
    Addr t_code = 0;
    Addr t_code_len = 0;

    bool in_t_code(Addr a) const { return a >= t_code && a < t_code + t_code_len; }
};

enum class Domain { T, U };
std::string_view to_string(Domain d);

/// A syscall as seen by the monitor, split into atomic phases so that other
/// threads can be scheduled between them.
struct SyscallTask {
    Tid tid = 0;
    Syscall call;
    std::vector<std::function<void(SyscallTask&)>> phases;
    std::size_t next = 0;
    SyscallResult result;
    Decision decision;
    bool holds_scan_lock = false;

    bool finished() const { return next >= phases.size(); }
    /// Skip whatever phases remain.
    void stop() { next = phases.size(); }
    void advance();
};

struct TrapAction {
    enum class Kind { Continue, Terminate };
    Kind kind = Kind::Continue;
    std::string reason;
};

struct ThreadEvent {
    enum class Kind { Created, Exited };
    Kind kind = Kind::Created;
    Tid tid = 0;
};

class Policy {
public:
    virtual ~Policy() = default;

    virtual PolicyKind kind() const = 0;
    /// Loader work, before the first U instruction.
    virtual void attach(SimState& state, const image::ImageInfo& info);
    virtual SyscallTask begin_syscall(SimState& state, Tid tid, const Syscall& call);
    /// `trap` is a BreakpointTrap or ExecFault from step().
    virtual TrapAction on_trap(SimState& state, Tid tid, const StepResult& trap);
    virtual void on_thread_event(SimState& state, const ThreadEvent& ev);

    const std::vector<SafePattern>& patterns() const { return patterns_; }
    const MonitorState& monitor() const { return mon_; }

protected:
    /// Runs the call through the kernel unchanged. Mapping calls get an
    /// empty entry phase first, the point at which a monitor would inspect
    /// arguments.
    SyscallTask passthrough(SimState& state, Tid tid, const Syscall& call) const;

    MonitorState mon_;
    std::vector<SafePattern> patterns_;
};

std::unique_ptr<Policy> make_policy(PolicyKind kind, const PolicyOptions& opts = {});

/// Occurrences starting in [lo, hi) on code: mappings with exec permission,
/// plus [extra_lo, extra_hi) which is about to become executable. Each
/// mapping is scanned with scan_bytes and every seam with scan_boundary.
std::vector<UnsafeOccurrence> scan_code_range(const SimState& state, Addr lo, Addr hi,
                                              const std::vector<SafePattern>& patterns, Addr extra_lo = 0,
                                              Addr extra_hi = 0);

/// How far before a changed range an occurrence can start and still depend
/// on bytes inside it (its own encoding plus a pattern suffix).
std::size_t rescan_margin(const std::vector<SafePattern>& patterns);

class NoSandboxPolicy : public Policy {
public:
    PolicyKind kind() const override { return PolicyKind::NoSandbox; }
};

/// ERIM's ptrace sandbox: scans at load and on mmap/mprotect/pkey_mprotect,
/// makes pages with unsafe occurrences non-executable and kills the process
/// if one is executed. Decides whether T issued a call from the syscall
/// site address, and does not look at open-like calls.
class ErimModelPolicy : public Policy {
public:
    ErimModelPolicy();
    PolicyKind kind() const override { return PolicyKind::ErimModel; }
    void attach(SimState& state, const image::ImageInfo& info) override;
    SyscallTask begin_syscall(SimState& state, Tid tid, const Syscall& call) override;
    TrapAction on_trap(SimState& state, Tid tid, const StepResult& trap) override;

private:
    void mark_unsafe(SimState& state, const std::vector<UnsafeOccurrence>& occs);
    std::set<Addr> unsafe_pages_;
};

/// Hodor: vets wrpkru only; breakpoints go into the thread that mapped the
/// code; more occurrences than slots fall back to fault-and-emulate; any
/// breakpoint hit kills the process; mremap is not intercepted.
class HodorModelPolicy : public Policy {
public:
    HodorModelPolicy();
    PolicyKind kind() const override { return PolicyKind::HodorModel; }
    void attach(SimState& state, const image::ImageInfo& info) override;
    SyscallTask begin_syscall(SimState& state, Tid tid, const Syscall& call) override;
    TrapAction on_trap(SimState& state, Tid tid, const StepResult& trap) override;

private:
    void vet(SimState& state, Tid tid, const std::vector<UnsafeOccurrence>& occs);
    std::set<Addr> marked_pages_;
    std::set<Addr> protected_pages_;
};

class GarmrPolicy : public Policy {
public:
    GarmrPolicy(bool xom, const PolicyOptions& opts);

    PolicyKind kind() const override { return xom_ ? PolicyKind::GarmrXom : PolicyKind::GarmrErim; }
    void attach(SimState& state, const image::ImageInfo& info) override;
    SyscallTask begin_syscall(SimState& state, Tid tid, const Syscall& call) override;
    TrapAction on_trap(SimState& state, Tid tid, const StepResult& trap) override;
    void on_thread_event(SimState& state, const ThreadEvent& ev) override;

    /// Reads PKRU through the special page. nullopt when the page has been
    /// unmapped or altered.
    std::optional<Domain> current_domain(SimState& state, Tid tid);
    bool special_page_intact(const SimState& state) const;

    enum class PublishResult { Published, Rejected };
    /// All three publish phases back to back for [lo, hi).
    PublishResult safe_publish(SimState& state, Tid tid, Addr lo, Addr hi, Permissions final_perms);

    /// Covers the given occurrences. Breakpoints in every thread while the
    /// process is single-threaded and enough slots are free; otherwise the
    /// pages holding them are marked non-executable.
    VetKind install_vetting(SimState& state, const std::vector<UnsafeOccurrence>& occs);

    std::size_t free_slots(const SimState& state) const;

private:
    struct PublishJob;

    bool touches_protected(const SimState& state, Addr lo, Addr hi, bool include_code) const;
    std::optional<Decision> check_u_call(const SimState& state, const Syscall& call) const;
    std::optional<Decision> check_mapping_rules(const SimState& state, const Syscall& call) const;

    /// Rescan [lo, hi) and the margin before it and bring vetting in line.
    void rescan(SimState& state, Addr lo, Addr hi);
    void replace_scan(Addr lo, Addr hi, const std::vector<UnsafeOccurrence>& occs);
    void revet(SimState& state);
    void remove_vetting(SimState& state, Addr addr);
    void apply_marks(SimState& state);
    bool needs_vetting(const UnsafeOccurrence& occ) const;

    void plan_publish(SyscallTask& task, SimState& state, std::shared_ptr<PublishJob> job);
    void plan_mremap(SyscallTask& task, SimState& state, const sys::Mremap& c);
    void plan_mmap(SyscallTask& task, SimState& state, const sys::Mmap& c);
    void plan_protect(SyscallTask& task, SimState& state, Addr addr, Addr len, Permissions prot,
                      std::optional<int> key, bool xom);
    void after_execve(SimState& state, Tid tid);

    TrapAction vet_site(SimState& state, Tid tid, Addr rip, std::string_view how);

    bool xom_;
    PolicyOptions opts_;
    image::ImageInfo info_;
};

}  // namespace pkusim
