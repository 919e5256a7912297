#pragma once

// Linux-like syscall semantics with no sandbox in the loop, including the
// interfaces that access memory on the caller's behalf without page or PKU
// checks (process_vm_*, /proc/self/mem, ptrace).

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "pkusim/machine.hpp"

namespace pkusim {

namespace err {
inline constexpr int kPerm = 1;
inline constexpr int kNoEnt = 2;
inline constexpr int kBadF = 9;
inline constexpr int kNoMem = 12;
inline constexpr int kAccess = 13;
inline constexpr int kFault = 14;
inline constexpr int kExist = 17;
inline constexpr int kInval = 22;
inline constexpr int kNoSpc = 28;
inline constexpr int kRofs = 30;
}  // namespace err

std::string_view errno_name(int e);

enum class MmapShare { Private, Shared, SharedValidate };

namespace sys {

struct Mmap {
    Addr addr = 0;  // nonzero places the mapping there, replacing overlaps
    Addr len = 0;
    Permissions prot;
    MmapShare share = MmapShare::Private;
    bool anonymous = true;
    int fd = -1;
    std::uint64_t offset = 0;
    friend bool operator==(const Mmap&, const Mmap&) = default;
};
struct Munmap {
    Addr addr = 0;
    Addr len = 0;
    friend bool operator==(const Munmap&, const Munmap&) = default;
};
struct Mremap {
    Addr old_addr = 0;
    Addr old_len = 0;
    Addr new_len = 0;
    bool fixed = false;
    Addr new_addr = 0;
    friend bool operator==(const Mremap&, const Mremap&) = default;
};
struct Mprotect {
    Addr addr = 0;
    Addr len = 0;
    Permissions prot;
    bool xom = false;
    friend bool operator==(const Mprotect&, const Mprotect&) = default;
};
struct PkeyAlloc {
    friend bool operator==(const PkeyAlloc&, const PkeyAlloc&) = default;
};
struct PkeyFree {
    int key = 0;
    friend bool operator==(const PkeyFree&, const PkeyFree&) = default;
};
struct PkeyMprotect {
    Addr addr = 0;
    Addr len = 0;
    Permissions prot;
    int key = 0;
    friend bool operator==(const PkeyMprotect&, const PkeyMprotect&) = default;
};
struct Open {
    std::string path;
    bool create = false;
    bool at = false;  // openat
    friend bool operator==(const Open&, const Open&) = default;
};
struct Read {
    int fd = -1;
    std::uint64_t len = 0;
    std::optional<std::uint64_t> offset;  // pread when set
    friend bool operator==(const Read&, const Read&) = default;
};
struct Write {
    int fd = -1;
    Bytes data;
    std::optional<std::uint64_t> offset;  // pwrite when set
    friend bool operator==(const Write&, const Write&) = default;
};
struct Link {
    std::string target;
    std::string path;
    bool symbolic = false;
    friend bool operator==(const Link&, const Link&) = default;
};
struct ProcessVmReadv {
    Addr addr = 0;
    std::uint64_t len = 0;
    friend bool operator==(const ProcessVmReadv&, const ProcessVmReadv&) = default;
};
struct ProcessVmWritev {
    Addr addr = 0;
    Bytes data;
    friend bool operator==(const ProcessVmWritev&, const ProcessVmWritev&) = default;
};
enum class PtraceRequest { Attach, PeekData, PokeData };
struct Ptrace {
    PtraceRequest request = PtraceRequest::Attach;
    Addr addr = 0;
    std::uint64_t len = 0;  // PeekData
    Bytes data;             // PokeData
    friend bool operator==(const Ptrace&, const Ptrace&) = default;
};
struct Seccomp {
    SeccompFilter filter;
    friend bool operator==(const Seccomp&, const Seccomp&) = default;
};
enum class PrctlOption { SetSeccomp, AgentInit, Other };
struct Prctl {
    PrctlOption option = PrctlOption::Other;
    SeccompFilter filter;            // SetSeccomp
    std::vector<std::string> slist;  // AgentInit; empty means the default list
    friend bool operator==(const Prctl&, const Prctl&) = default;
};
struct ModifyLdt {
    friend bool operator==(const ModifyLdt&, const ModifyLdt&) = default;
};
struct Shmget {
    std::uint64_t size = 0;
    friend bool operator==(const Shmget&, const Shmget&) = default;
};
struct Shmat {
    int shmid = 0;
    Addr addr = 0;
    Permissions prot;
    friend bool operator==(const Shmat&, const Shmat&) = default;
};
struct Shmdt {
    Addr addr = 0;
    friend bool operator==(const Shmdt&, const Shmdt&) = default;
};
enum class CloneVariant { Clone, Clone3, Fork, Vfork };
struct Clone {
    CloneVariant variant = CloneVariant::Clone;
    Tid new_tid = 0;  // 0 picks the next free id
    friend bool operator==(const Clone&, const Clone&) = default;
};
struct Execve {
    std::string path;
    friend bool operator==(const Execve&, const Execve&) = default;
};
struct Sigaltstack {
    Addr addr = 0;
    std::uint64_t size = 0;
    friend bool operator==(const Sigaltstack&, const Sigaltstack&) = default;
};
/// Restores the given saved context. Registers absent from the frame keep
/// their current values.
struct Sigreturn {
    std::map<Reg, std::uint64_t> regs;
    std::optional<Addr> rip;
    std::optional<std::uint32_t> pkru;
    friend bool operator==(const Sigreturn&, const Sigreturn&) = default;
};
struct Exit {
    friend bool operator==(const Exit&, const Exit&) = default;
};
/// Reading /proc/self/task: returns the live thread count.
struct ListTasks {
    friend bool operator==(const ListTasks&, const ListTasks&) = default;
};

}  // namespace sys

using Syscall = std::variant<sys::Mmap, sys::Munmap, sys::Mremap, sys::Mprotect, sys::PkeyAlloc, sys::PkeyFree,
                             sys::PkeyMprotect, sys::Open, sys::Read, sys::Write, sys::Link, sys::ProcessVmReadv,
                             sys::ProcessVmWritev, sys::Ptrace, sys::Seccomp, sys::Prctl, sys::ModifyLdt,
                             sys::Shmget, sys::Shmat, sys::Shmdt, sys::Clone, sys::Execve, sys::Sigaltstack,
                             sys::Sigreturn, sys::Exit, sys::ListTasks>;

/// Name of the call as used in SList and the scenario format ("mmap",
/// "openat", "clone3", "sigreturn", ...).
std::string syscall_name(const Syscall& call);

bool is_open_like(const Syscall& call);
/// Calls that create, remove, move or re-protect mappings.
bool is_mapping_call(const Syscall& call);

struct SyscallResult {
    std::int64_t value = 0;
    int error = 0;
    Bytes data;  // read-like results

    bool ok() const { return error == 0; }
    static SyscallResult success(std::int64_t v = 0) { return {v, 0, {}}; }
    static SyscallResult failure(int e) { return {-1, e, {}}; }
};

/// Follows symlinks; hard links share the inode. nullopt means not found.
std::optional<InodeId> resolve_path(const SimState& state, std::string_view path);

/// Kernel semantics. A matching DenyWithFakeSuccess seccomp rule short-circuits
/// everything else.
SyscallResult apply_syscall(SimState& state, Tid tid, const Syscall& call);

/// Lowest fd >= 3 not in use.
int next_fd(const SimState& state);

}  // namespace pkusim
