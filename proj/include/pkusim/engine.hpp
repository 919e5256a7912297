#pragma once

// Drives one process under one policy: routes syscalls through the agent and
// the policy, runs instructions, hands traps to the policy, watches for
// breaches and audits policy invariants after every event.

#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "pkusim/image.hpp"
#include "pkusim/kernel.hpp"
#include "pkusim/machine.hpp"
#include "pkusim/policy.hpp"

namespace pkusim {

struct Evidence {
    enum class Kind { TrustedRead, TrustedWrite, PkruUnlocked };
    Kind kind = Kind::TrustedRead;
    Addr addr = 0;
    Tid tid = 0;

    friend bool operator==(const Evidence&, const Evidence&) = default;
};

/// "TrustedRead(0x200000)", "PkruUnlocked(t0)".
std::string to_string(const Evidence& e);

struct Outcome {
    enum class Kind { Completed, Blocked, Breach };
    Kind kind = Kind::Completed;
    std::string reason;
    std::size_t step = 0;  // scenario step index of the first block
    std::optional<Evidence> evidence;

    static Outcome completed() { return {}; }
    static Outcome blocked(std::string why, std::size_t at) { return {Kind::Blocked, std::move(why), at, std::nullopt}; }
    static Outcome breach(Evidence e) { return {Kind::Breach, {}, 0, e}; }
};

std::string_view to_string(Outcome::Kind k);  // Completed, Blocked, Breach
std::optional<Outcome::Kind> parse_outcome_kind(std::string_view s);  // case-insensitive
std::string describe(const Outcome& o);

/// Watches machine events only. A thread acts as T while a protected key is
/// unlocked in its PKRU and it executes trusted code (T's code pages or the
/// special page); everything else, the monitor included, is U.
class BreachOracle : public MachineObserver {
public:
    /// Records M_T and the trusted code pages by backing identity.
    void seed(const SimState& state, const image::ImageInfo& info);

    void on_mem_access(const SimState& state, Tid tid, Addr addr, std::size_t len, AccessKind kind,
                       Route route) override;
    void on_execute(const SimState& state, Tid tid, Addr rip, const x86::Instruction& ins) override;
    /// Before the call is routed anywhere.
    void on_syscall(const SimState& state, Tid tid, const Syscall& call);
    /// End of a run that did not terminate: a thread left unlocked outside
    /// trusted code is a breach.
    void finish(const SimState& state);

    bool is_trusted_actor(const SimState& state, Tid tid) const;
    bool unlocked(const SimState& state, Tid tid) const;
    bool in_trusted_code(const SimState& state, Addr a) const;

    const std::vector<Evidence>& evidence() const { return evidence_; }

private:
    using PageKey = std::tuple<int, std::uint64_t, std::uint64_t>;
    std::optional<PageKey> key_of(const SimState& state, Addr a) const;
    void add_pages(const SimState& state, Addr lo, Addr hi, std::set<PageKey>& into);
    void record(Evidence e);

    std::set<PageKey> secret_;
    std::set<PageKey> trusted_code_;
    std::vector<Evidence> evidence_;
};

struct RunOptions {
    PolicyOptions policy;
    std::optional<std::size_t> debug_slots;
    bool audit = true;
};

class EngineError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class Simulator {
public:
    explicit Simulator(PolicyKind kind, const RunOptions& opts = {});
    Simulator(const Simulator&) = delete;
    Simulator& operator=(const Simulator&) = delete;
    ~Simulator();

    SimState& state() { return state_; }
    const SimState& state() const { return state_; }
    Policy& policy() { return *policy_; }
    const BreachOracle& oracle() const { return oracle_; }
    const image::ImageInfo& image() const { return info_; }

    /// Scenario step index used when reporting a block.
    void set_step_index(std::size_t i) { step_index_ = i; }

    /// Each of these is a no-op once the process has terminated.
    void spawn(Tid tid, Tid from);
    void step(Tid tid, int count = 1);
    void syscall(Tid tid, const Syscall& call);
    void write_bytes(Tid tid, Addr addr, const Bytes& data);
    void set_reg(Tid tid, std::string_view reg, std::uint64_t value);
    /// Runs the next phase of tid's pending syscall, if any.
    void resume(Tid tid);
    void interleave_begin();
    void interleave_end();

    bool terminated() const { return terminated_; }
    /// Completes pending work and classifies the run.
    Outcome finish();

    const std::optional<SyscallResult>& last_result() const { return last_result_; }
    const std::vector<std::string>& audit_failures() const { return audit_failures_; }
    std::vector<std::string> log_lines() const;

private:
    ThreadState& live_thread(Tid tid);
    void complete(Tid tid);
    void advance(Tid tid);
    void finalize(Tid tid);
    void block(std::string why);
    void terminate(std::string why);
    void audit(std::string_view after);

    SimState state_;
    image::ImageInfo info_;
    std::unique_ptr<Policy> policy_;
    BreachOracle oracle_;
    RunOptions opts_;
    std::map<Tid, SyscallTask> pending_;
    bool interleaving_ = false;
    bool terminated_ = false;
    bool finished_ = false;
    std::size_t step_index_ = 0;
    std::optional<Outcome> first_block_;
    std::optional<SyscallResult> last_result_;
    std::vector<std::string> audit_failures_;
};

/// One log line: `<seq> <tid> <event> <policy> <decision> <reason>`.
std::string format_log_line(const LogEvent& e, PolicyKind policy);

/// Invariant violations in the current state (empty when all hold): W^X, no
/// executable shared or file-backed mapping, every unsafe occurrence on
/// executable memory covered by a marked page or a breakpoint in every live
/// thread, and no enabled breakpoint off such an occurrence.
std::vector<std::string> audit_state(const SimState& state, const std::vector<SafePattern>& patterns,
                                     const std::set<Addr>& exempt);

}  // namespace pkusim
