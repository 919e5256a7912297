#pragma once

// Simulated PKU hardware and process substrate: protection keys, PKRU,
// address space with aliasable backing objects, per-thread registers and
// debug registers, and the single-instruction step contract.

#include <array>
#include <bitset>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace pkusim {

using Addr = std::uint64_t;
using Tid = std::uint32_t;
using InodeId = std::uint64_t;
using ObjectId = std::uint64_t;
using Bytes = std::vector<std::uint8_t>;

inline constexpr Addr kPageSize = 4096;
inline constexpr int kNumKeys = 16;
inline constexpr std::size_t kMaxDebugSlots = 4;

// Pseudo thread id used for accesses performed by the monitor itself.
inline constexpr Tid kMonitorTid = 0xffffffffu;

constexpr Addr page_floor(Addr a) { return a & ~(kPageSize - 1); }
constexpr Addr page_ceil(Addr a) { return (a + kPageSize - 1) & ~(kPageSize - 1); }
constexpr bool page_aligned(Addr a) { return (a & (kPageSize - 1)) == 0; }

struct ProtectionKey {
    std::uint8_t id = 0;

    friend constexpr auto operator<=>(const ProtectionKey&, const ProtectionKey&) = default;
};

enum class Access { Read, Write, Fetch };

/// PKRU register image. Key k owns bit 2k (access disable) and bit 2k+1
/// (write disable).
class PkruValue {
public:
    constexpr PkruValue() = default;
    constexpr explicit PkruValue(std::uint32_t bits) : bits_(bits) {}

    constexpr std::uint32_t bits() const { return bits_; }

    constexpr bool access_disabled(ProtectionKey k) const { return (bits_ >> (2 * k.id)) & 1u; }
    constexpr bool write_disabled(ProtectionKey k) const { return (bits_ >> (2 * k.id + 1)) & 1u; }

    constexpr PkruValue with_access_disabled(ProtectionKey k, bool on = true) const {
        return PkruValue(set_bit(bits_, 2 * k.id, on));
    }
    constexpr PkruValue with_write_disabled(ProtectionKey k, bool on = true) const {
        return PkruValue(set_bit(bits_, 2 * k.id + 1, on));
    }

    /// AD|WD set for `k`, everything else open.
    static constexpr PkruValue locking(ProtectionKey k) {
        return PkruValue().with_access_disabled(k).with_write_disabled(k);
    }

    friend constexpr bool operator==(PkruValue, PkruValue) = default;

private:
    static constexpr std::uint32_t set_bit(std::uint32_t v, int bit, bool on) {
        return on ? (v | (1u << bit)) : (v & ~(1u << bit));
    }

    std::uint32_t bits_ = 0;
};

/// Instruction fetches are never restricted by PKRU; reads need AD clear;
/// writes need AD and WD clear.
constexpr bool pkru_allows(PkruValue pkru, ProtectionKey key, Access access) {
    switch (access) {
    case Access::Fetch:
        return true;
    case Access::Read:
        return !pkru.access_disabled(key);
    case Access::Write:
        return !pkru.access_disabled(key) && !pkru.write_disabled(key);
    }
    return false;
}

struct Permissions {
    bool read = false;
    bool write = false;
    bool exec = false;

    static Permissions parse(std::string_view s);  // "rwx", "r-x", "rx", "none"
    std::string str() const;

    friend bool operator==(const Permissions&, const Permissions&) = default;
};

enum class ShareMode { Private, Shared };

struct Backing {
    enum class Kind { Anonymous, File };
    Kind kind = Kind::Anonymous;
    std::uint64_t id = 0;  // ObjectId or InodeId depending on kind
    std::uint64_t offset = 0;

    friend bool operator==(const Backing&, const Backing&) = default;
};

struct Mapping {
    Addr start = 0;
    Addr length = 0;
    Permissions perms;
    ProtectionKey pkey;
    ShareMode share = ShareMode::Private;
    Backing backing;
    bool monitor_marked_nonexec = false;
    bool exec_only = false;

    Addr end() const { return start + length; }
    bool contains(Addr a) const { return a >= start && a < end(); }
    bool overlaps(Addr lo, Addr hi) const { return start < hi && lo < end(); }
    bool file_backed() const { return backing.kind == Backing::Kind::File; }
    /// Executable as far as the CPU is concerned right now.
    bool fetchable() const { return perms.exec && !monitor_marked_nonexec; }
};

/// Non-overlapping set of mappings keyed by start address.
class AddressSpace {
public:
    const Mapping* find(Addr a) const;
    Mapping* find(Addr a);

    /// Mappings intersecting [lo, hi) in address order.
    std::vector<const Mapping*> overlapping(Addr lo, Addr hi) const;
    bool fully_mapped(Addr lo, Addr hi) const;

    /// Ensure no mapping straddles `a`.
    void split_at(Addr a);
    /// Split at both ends and return pointers to the mappings inside [lo, hi).
    std::vector<Mapping*> isolate(Addr lo, Addr hi);

    void insert(Mapping m);
    /// Remove [lo, hi) and return the removed pieces.
    std::vector<Mapping> remove(Addr lo, Addr hi);
    void clear() { maps_.clear(); }

    /// Merge neighbours that are identical apart from their start address.
    void coalesce();

    auto begin() const { return maps_.begin(); }
    auto end() const { return maps_.end(); }
    std::size_t size() const { return maps_.size(); }

    /// Lowest page-aligned hole of `len` bytes at or above `hint`.
    Addr find_free(Addr hint, Addr len) const;

private:
    std::map<Addr, Mapping> maps_;
};

enum class Reg : std::uint8_t { Rax = 0, Rcx, Rdx, Rbx, Rsp, Rbp, Rsi, Rdi };
inline constexpr int kNumGprs = 8;

std::string_view reg_name(Reg r);
/// Accepts 64- and 32-bit names ("rax", "eax") and "rip".
std::optional<Reg> parse_reg(std::string_view name);

struct Flags {
    bool zf = false;
    bool sf = false;
    bool cf = false;
    bool of = false;

    friend bool operator==(const Flags&, const Flags&) = default;
};

struct Registers {
    std::array<std::uint64_t, kNumGprs> gpr{};
    Addr rip = 0;
    Flags flags;

    std::uint64_t& operator[](Reg r) { return gpr[static_cast<int>(r)]; }
    std::uint64_t operator[](Reg r) const { return gpr[static_cast<int>(r)]; }

    friend bool operator==(const Registers&, const Registers&) = default;
};

struct DebugSlot {
    Addr addr = 0;
    bool enabled = false;

    friend bool operator==(const DebugSlot&, const DebugSlot&) = default;
};

struct ThreadState {
    Tid tid = 0;
    Registers regs;
    PkruValue pkru;
    std::array<DebugSlot, kMaxDebugSlots> debug_regs{};
    bool alive = true;

    bool breakpoint_at(Addr a, std::size_t slot_limit) const;
};

struct FileObject {
    Bytes bytes;
    bool mutable_ = true;
};

enum class SeccompAction { Allow, DenyWithFakeSuccess };

struct SeccompFilter {
    std::map<std::string, SeccompAction> rules;

    friend bool operator==(const SeccompFilter&, const SeccompFilter&) = default;
};

struct AgentState {
    std::set<std::string> slist;
    std::set<InodeId> ilist;
    bool initialized = false;
};

struct FdEntry {
    InodeId inode = 0;
    std::uint64_t cursor = 0;
};

/// One line of the append-only event log.
struct LogEvent {
    std::uint64_t seq = 0;
    Tid tid = 0;
    std::string event;
    std::string decision;  // "-" for pure machine events
    std::string reason;

    friend bool operator==(const LogEvent&, const LogEvent&) = default;
};

enum class AccessKind { Read, Write };
enum class Route { Cpu, KernelDirect };

class SimState;

namespace x86 {
struct Instruction;
}

/// Hook for detectors that must see every machine-level event without
/// relying on policy state.
class MachineObserver {
public:
    virtual ~MachineObserver() = default;
    virtual void on_mem_access(const SimState&, Tid, Addr, std::size_t, AccessKind, Route) {}
    virtual void on_pkru_write(const SimState&, Tid, PkruValue /*old*/, PkruValue /*now*/, std::string_view /*cause*/) {}
    /// Called right before an instruction's effects are applied.
    virtual void on_execute(const SimState&, Tid, Addr /*rip*/, const x86::Instruction&) {}
};

class SimState {
public:
    AddressSpace space;
    std::map<ObjectId, Bytes> objects;
    std::vector<ThreadState> threads;
    std::map<InodeId, FileObject> files;
    std::map<std::string, InodeId> path_table;
    std::map<std::string, std::string> symlinks;
    std::map<int, FdEntry> fds;
    std::map<int, ObjectId> shm_segments;
    std::optional<SeccompFilter> seccomp;
    std::optional<AgentState> agent;
    ProtectionKey trusted_key{1};
    std::optional<ProtectionKey> xom_key;
    std::bitset<kNumKeys> allocated_keys{1};  // key 0 always allocated
    InodeId proc_self_mem = 0;
    std::size_t debug_slot_count = kMaxDebugSlots;
    std::vector<LogEvent> event_log;
    MachineObserver* observer = nullptr;

    ThreadState* thread(Tid tid);
    const ThreadState* thread(Tid tid) const;
    std::size_t live_threads() const;

    ObjectId new_object(std::size_t size);
    InodeId new_file(std::string path, Bytes bytes, bool is_mutable = true);

    void log(Tid tid, std::string event, std::string decision, std::string reason);

    /// Byte behind `a` for any mapped address regardless of permissions.
    /// Reads beyond a file's end yield zero.
    std::optional<std::uint8_t> peek(Addr a) const;
    /// Contiguous bytes via peek; nullopt if any byte is unmapped.
    std::optional<Bytes> peek_range(Addr a, std::size_t len) const;
    /// Raw write into backing objects, honouring private-file copy-on-write.
    bool poke(Addr a, std::span<const std::uint8_t> bytes);

    /// Resolve a mapped address to (backing kind, id, offset) identity.
    std::optional<Backing> identity(Addr a) const;

private:
    ObjectId next_object_ = 1;
    InodeId next_inode_ = 1;
    std::uint64_t next_seq_ = 0;
};

struct AccessResult {
    enum class Status { Ok, PageFault, PkuFault };
    Status status = Status::Ok;
    Addr fault_addr = 0;

    bool ok() const { return status == Status::Ok; }
};

/// Data access on behalf of thread `tid`. `buf` is filled on reads and
/// consumed on writes. Cpu route checks mapping presence, page permissions and
/// PKRU; KernelDirect only checks presence.
AccessResult mem_access(SimState& state, Tid tid, Addr addr, AccessKind kind, Route route,
                        std::span<std::uint8_t> buf);

struct StepResult {
    enum class Kind { Advanced, ExecFault, BreakpointTrap, PkuFault, Terminated };
    Kind kind = Kind::Advanced;
    Addr addr = 0;
    std::string reason;

    static StepResult advanced() { return {}; }
    static StepResult exec_fault(Addr a) { return {Kind::ExecFault, a, {}}; }
    static StepResult breakpoint(Addr a) { return {Kind::BreakpointTrap, a, {}}; }
    static StepResult pku_fault(Addr a) { return {Kind::PkuFault, a, {}}; }
    static StepResult terminated(std::string why) { return {Kind::Terminated, 0, std::move(why)}; }
};

std::string_view to_string(StepResult::Kind k);

/// Execute one instruction of thread `tid`. Breakpoints are checked before
/// anything else; exec permission (and monitor marking) next; then the
/// instruction is decoded and applied.
StepResult step(SimState& state, Tid tid);

/// Fetch up to `max` instruction bytes starting at `rip`, stopping at the
/// first byte whose page is not fetchable (or, with ignore_perms, unmapped).
Bytes fetch_window(const SimState& state, Addr rip, std::size_t max, bool ignore_perms);

}  // namespace pkusim
