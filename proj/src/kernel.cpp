#include "pkusim/kernel.hpp"

#include <algorithm>

#include "pkusim/agent.hpp"

namespace pkusim {

std::string_view errno_name(int e) {
    switch (e) {
    case 0: return "OK";
    case err::kPerm: return "EPERM";
    case err::kNoEnt: return "ENOENT";
    case err::kBadF: return "EBADF";
    case err::kNoMem: return "ENOMEM";
    case err::kAccess: return "EACCES";
    case err::kFault: return "EFAULT";
    case err::kExist: return "EEXIST";
    case err::kInval: return "EINVAL";
    case err::kNoSpc: return "ENOSPC";
    case err::kRofs: return "EROFS";
    }
    return "E?";
}

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};

}  // namespace

std::string syscall_name(const Syscall& call) {
    return std::visit(
        overloaded{
            [](const sys::Mmap&) -> std::string { return "mmap"; },
            [](const sys::Munmap&) -> std::string { return "munmap"; },
            [](const sys::Mremap&) -> std::string { return "mremap"; },
            [](const sys::Mprotect&) -> std::string { return "mprotect"; },
            [](const sys::PkeyAlloc&) -> std::string { return "pkey_alloc"; },
            [](const sys::PkeyFree&) -> std::string { return "pkey_free"; },
            [](const sys::PkeyMprotect&) -> std::string { return "pkey_mprotect"; },
            [](const sys::Open& o) -> std::string { return o.at ? "openat" : "open"; },
            [](const sys::Read&) -> std::string { return "read"; },
            [](const sys::Write&) -> std::string { return "write"; },
            [](const sys::Link& l) -> std::string { return l.symbolic ? "symlink" : "link"; },
            [](const sys::ProcessVmReadv&) -> std::string { return "process_vm_readv"; },
            [](const sys::ProcessVmWritev&) -> std::string { return "process_vm_writev"; },
            [](const sys::Ptrace&) -> std::string { return "ptrace"; },
            [](const sys::Seccomp&) -> std::string { return "seccomp"; },
            [](const sys::Prctl&) -> std::string { return "prctl"; },
            [](const sys::ModifyLdt&) -> std::string { return "modify_ldt"; },
            [](const sys::Shmget&) -> std::string { return "shmget"; },
            [](const sys::Shmat&) -> std::string { return "shmat"; },
            [](const sys::Shmdt&) -> std::string { return "shmdt"; },
            [](const sys::Clone& c) -> std::string {
                switch (c.variant) {
                case sys::CloneVariant::Clone: return "clone";
                case sys::CloneVariant::Clone3: return "clone3";
                case sys::CloneVariant::Fork: return "fork";
                case sys::CloneVariant::Vfork: return "vfork";
                }
                return "clone";
            },
            [](const sys::Execve&) -> std::string { return "execve"; },
            [](const sys::Sigaltstack&) -> std::string { return "sigaltstack"; },
            [](const sys::Sigreturn&) -> std::string { return "sigreturn"; },
            [](const sys::Exit&) -> std::string { return "exit"; },
            [](const sys::ListTasks&) -> std::string { return "list_tasks"; },
        },
        call);
}

bool is_open_like(const Syscall& call) { return std::holds_alternative<sys::Open>(call); }

bool is_mapping_call(const Syscall& call) {
    return std::holds_alternative<sys::Mmap>(call) || std::holds_alternative<sys::Munmap>(call) ||
           std::holds_alternative<sys::Mremap>(call) || std::holds_alternative<sys::Mprotect>(call) ||
           std::holds_alternative<sys::PkeyMprotect>(call) || std::holds_alternative<sys::Shmat>(call) ||
           std::holds_alternative<sys::Shmdt>(call);
}

std::optional<InodeId> resolve_path(const SimState& state, std::string_view path) {
    std::string cur(path);
    for (int hops = 0; hops < 8; ++hops) {
        auto sl = state.symlinks.find(cur);
        if (sl == state.symlinks.end())
            break;
        cur = sl->second;
    }
    auto it = state.path_table.find(cur);
    if (it == state.path_table.end())
        return std::nullopt;
    return it->second;
}

int next_fd(const SimState& state) {
    int fd = 3;
    while (state.fds.count(fd))
        ++fd;
    return fd;
}

namespace {

bool range_ok(Addr addr, Addr len) { return page_aligned(addr) && len > 0; }

SyscallResult do_mmap(SimState& s, const sys::Mmap& c) {
    if (!page_aligned(c.addr) || c.len == 0)
        return SyscallResult::failure(err::kInval);
    Addr len = page_ceil(c.len);
    Mapping m;
    m.length = len;
    m.perms = c.prot;
    m.share = c.share == MmapShare::Private ? ShareMode::Private : ShareMode::Shared;
    if (c.anonymous) {
        m.backing = Backing{Backing::Kind::Anonymous, s.new_object(len), 0};
    } else {
        auto fd = s.fds.find(c.fd);
        if (fd == s.fds.end())
            return SyscallResult::failure(err::kBadF);
        if (fd->second.inode == s.proc_self_mem || !page_aligned(c.offset))
            return SyscallResult::failure(err::kInval);
        m.backing = Backing{Backing::Kind::File, fd->second.inode, c.offset};
    }
    m.start = c.addr ? c.addr : s.space.find_free(0x10000000, len);
    s.space.remove(m.start, m.start + len);
    s.space.insert(m);
    return SyscallResult::success(static_cast<std::int64_t>(m.start));
}

SyscallResult do_mremap(SimState& s, const sys::Mremap& c) {
    if (!range_ok(c.old_addr, c.old_len) || c.new_len == 0)
        return SyscallResult::failure(err::kInval);
    Addr old_len = page_ceil(c.old_len);
    Addr new_len = page_ceil(c.new_len);
    if (!s.space.fully_mapped(c.old_addr, c.old_addr + old_len))
        return SyscallResult::failure(err::kFault);
    Addr dest;
    if (c.fixed) {
        if (!page_aligned(c.new_addr))
            return SyscallResult::failure(err::kInval);
        dest = c.new_addr;
        if (dest < c.old_addr + old_len && c.old_addr < dest + new_len)
            return SyscallResult::failure(err::kInval);
    } else if (new_len <= old_len) {
        dest = c.old_addr;
    } else {
        dest = s.space.find_free(0x10000000, new_len);
    }
    std::vector<Mapping> pieces = s.space.remove(c.old_addr, c.old_addr + old_len);
    // Keep only the first new_len bytes; growth extends the last piece.
    std::vector<Mapping> kept;
    Addr covered = 0;
    for (Mapping m : pieces) {
        if (covered >= new_len)
            break;
        m.length = std::min(m.length, new_len - covered);
        covered += m.length;
        kept.push_back(m);
    }
    if (covered < new_len)
        kept.back().length += new_len - covered;
    if (dest != c.old_addr)
        s.space.remove(dest, dest + new_len);
    Addr cur = dest;
    for (Mapping m : kept) {
        m.start = cur;
        cur += m.length;
        s.space.insert(m);
    }
    return SyscallResult::success(static_cast<std::int64_t>(dest));
}

ProtectionKey ensure_xom_key(SimState& s) {
    if (s.xom_key)
        return *s.xom_key;
    for (int k = kNumKeys - 1; k > 0; --k) {
        if (!s.allocated_keys[k]) {
            s.allocated_keys[k] = true;
            s.xom_key = ProtectionKey{static_cast<std::uint8_t>(k)};
            break;
        }
    }
    if (!s.xom_key)
        return ProtectionKey{0};
    for (auto& t : s.threads)
        t.pkru = t.pkru.with_access_disabled(*s.xom_key);
    return *s.xom_key;
}

SyscallResult do_protect(SimState& s, Addr addr, Addr len, Permissions prot, std::optional<int> key, bool xom) {
    if (!range_ok(addr, len))
        return SyscallResult::failure(err::kInval);
    len = page_ceil(len);
    if (key && (*key < 0 || *key >= kNumKeys || !s.allocated_keys[*key]))
        return SyscallResult::failure(err::kInval);
    if (!s.space.fully_mapped(addr, addr + len))
        return SyscallResult::failure(err::kNoMem);
    std::optional<ProtectionKey> xk;
    if (xom) {
        xk = ensure_xom_key(s);
        if (xk->id == 0)
            return SyscallResult::failure(err::kNoSpc);
    }
    for (Mapping* m : s.space.isolate(addr, addr + len)) {
        if (xom) {
            // Page tables keep read; the key's access-disable bit hides the bytes.
            m->perms = Permissions{true, false, true};
            m->pkey = *xk;
            m->exec_only = true;
            continue;
        }
        m->perms = prot;
        if (key) {
            m->pkey = ProtectionKey{static_cast<std::uint8_t>(*key)};
        } else if (m->exec_only) {
            m->pkey = ProtectionKey{0};
        }
        m->exec_only = false;
    }
    s.space.coalesce();
    return SyscallResult::success();
}

SyscallResult kernel_read(SimState& s, Tid tid, Addr addr, std::uint64_t len) {
    SyscallResult r;
    r.data.resize(len);
    auto acc = mem_access(s, tid, addr, AccessKind::Read, Route::KernelDirect, std::span(r.data));
    if (!acc.ok())
        return SyscallResult::failure(err::kFault);
    r.value = static_cast<std::int64_t>(len);
    return r;
}

SyscallResult kernel_write(SimState& s, Tid tid, Addr addr, const Bytes& data) {
    Bytes buf = data;
    auto acc = mem_access(s, tid, addr, AccessKind::Write, Route::KernelDirect, std::span(buf));
    if (!acc.ok())
        return SyscallResult::failure(err::kFault);
    return SyscallResult::success(static_cast<std::int64_t>(data.size()));
}

SyscallResult do_read(SimState& s, Tid tid, const sys::Read& c) {
    auto it = s.fds.find(c.fd);
    if (it == s.fds.end())
        return SyscallResult::failure(err::kBadF);
    FdEntry& fd = it->second;
    std::uint64_t off = c.offset.value_or(fd.cursor);
    SyscallResult r;
    if (fd.inode == s.proc_self_mem) {
        r = kernel_read(s, tid, off, c.len);
    } else {
        const Bytes& file = s.files.at(fd.inode).bytes;
        if (off < file.size()) {
            auto n = std::min<std::uint64_t>(c.len, file.size() - off);
            r.data.assign(file.begin() + static_cast<std::ptrdiff_t>(off),
                          file.begin() + static_cast<std::ptrdiff_t>(off + n));
        }
        r.value = static_cast<std::int64_t>(r.data.size());
    }
    if (r.ok() && !c.offset)
        fd.cursor += static_cast<std::uint64_t>(r.value);
    return r;
}

SyscallResult do_write(SimState& s, Tid tid, const sys::Write& c) {
    auto it = s.fds.find(c.fd);
    if (it == s.fds.end())
        return SyscallResult::failure(err::kBadF);
    FdEntry& fd = it->second;
    std::uint64_t off = c.offset.value_or(fd.cursor);
    SyscallResult r;
    if (fd.inode == s.proc_self_mem) {
        r = kernel_write(s, tid, off, c.data);
    } else {
        FileObject& file = s.files.at(fd.inode);
        if (!file.mutable_)
            return SyscallResult::failure(err::kRofs);
        if (file.bytes.size() < off + c.data.size())
            file.bytes.resize(off + c.data.size(), 0);
        std::copy(c.data.begin(), c.data.end(), file.bytes.begin() + static_cast<std::ptrdiff_t>(off));
        r = SyscallResult::success(static_cast<std::int64_t>(c.data.size()));
    }
    if (r.ok() && !c.offset)
        fd.cursor += c.data.size();
    return r;
}

SyscallResult do_open(SimState& s, const sys::Open& c) {
    auto ino = resolve_path(s, c.path);
    if (!ino) {
        if (!c.create)
            return SyscallResult::failure(err::kNoEnt);
        ino = s.new_file(c.path, {});
    }
    int fd = next_fd(s);
    s.fds[fd] = FdEntry{*ino, 0};
    return SyscallResult::success(fd);
}

SyscallResult do_link(SimState& s, const sys::Link& c) {
    if (s.path_table.count(c.path) || s.symlinks.count(c.path))
        return SyscallResult::failure(err::kExist);
    if (c.symbolic) {
        s.symlinks[c.path] = c.target;
        return SyscallResult::success();
    }
    auto ino = resolve_path(s, c.target);
    if (!ino)
        return SyscallResult::failure(err::kNoEnt);
    s.path_table[c.path] = *ino;
    return SyscallResult::success();
}

SyscallResult do_clone(SimState& s, Tid tid, const sys::Clone& c) {
    if (c.variant == sys::CloneVariant::Fork || c.variant == sys::CloneVariant::Vfork) {
        // The child is a separate process outside the simulation.
        return SyscallResult::success(1000 + static_cast<std::int64_t>(s.threads.size()));
    }
    const ThreadState* parent = s.thread(tid);
    Tid id = c.new_tid;
    if (id == 0) {
        id = 1;
        for (const auto& t : s.threads)
            id = std::max(id, t.tid + 1);
    }
    if (s.thread(id))
        return SyscallResult::failure(err::kExist);
    ThreadState t;
    t.tid = id;
    t.regs = parent->regs;
    t.pkru = parent->pkru;
    s.threads.push_back(t);
    return SyscallResult::success(id);
}

SyscallResult do_execve(SimState& s, Tid tid) {
    s.space.clear();
    ThreadState caller = *s.thread(tid);
    caller.regs = Registers{};
    caller.debug_regs = {};
    s.threads = {caller};
    if (s.agent)
        s.agent = AgentState{};
    return SyscallResult::success();
}

SyscallResult do_sigreturn(SimState& s, Tid tid, const sys::Sigreturn& c) {
    ThreadState& t = *s.thread(tid);
    for (auto [r, v] : c.regs)
        t.regs[r] = v;
    if (c.rip)
        t.regs.rip = *c.rip;
    if (c.pkru) {
        PkruValue old = t.pkru;
        t.pkru = PkruValue(*c.pkru);
        if (s.observer)
            s.observer->on_pkru_write(s, tid, old, t.pkru, "sigreturn");
    }
    return SyscallResult::success();
}

SyscallResult do_ptrace(SimState& s, Tid tid, const sys::Ptrace& c) {
    switch (c.request) {
    case sys::PtraceRequest::Attach: return SyscallResult::success();
    case sys::PtraceRequest::PeekData: return kernel_read(s, tid, c.addr, c.len);
    case sys::PtraceRequest::PokeData: return kernel_write(s, tid, c.addr, c.data);
    }
    return SyscallResult::failure(err::kInval);
}

void install_filter(SimState& s, const SeccompFilter& f) {
    if (!s.seccomp) {
        s.seccomp = f;
        return;
    }
    for (const auto& [name, action] : f.rules)
        s.seccomp->rules[name] = action;
}

}  // namespace

SyscallResult apply_syscall(SimState& s, Tid tid, const Syscall& call) {
    if (s.seccomp) {
        auto it = s.seccomp->rules.find(syscall_name(call));
        if (it != s.seccomp->rules.end() && it->second == SeccompAction::DenyWithFakeSuccess) {
            s.log(tid, "seccomp", "fake-success", syscall_name(call));
            return SyscallResult::success();
        }
    }
    return std::visit(
        overloaded{
            [&](const sys::Mmap& c) { return do_mmap(s, c); },
            [&](const sys::Munmap& c) {
                if (!range_ok(c.addr, c.len))
                    return SyscallResult::failure(err::kInval);
                s.space.remove(c.addr, c.addr + page_ceil(c.len));
                return SyscallResult::success();
            },
            [&](const sys::Mremap& c) { return do_mremap(s, c); },
            [&](const sys::Mprotect& c) { return do_protect(s, c.addr, c.len, c.prot, std::nullopt, c.xom); },
            [&](const sys::PkeyAlloc&) {
                for (int k = 1; k < kNumKeys; ++k) {
                    if (!s.allocated_keys[k]) {
                        s.allocated_keys[k] = true;
                        return SyscallResult::success(k);
                    }
                }
                return SyscallResult::failure(err::kNoSpc);
            },
            [&](const sys::PkeyFree& c) {
                if (c.key <= 0 || c.key >= kNumKeys || !s.allocated_keys[c.key])
                    return SyscallResult::failure(err::kInval);
                s.allocated_keys[c.key] = false;
                return SyscallResult::success();
            },
            [&](const sys::PkeyMprotect& c) { return do_protect(s, c.addr, c.len, c.prot, c.key, false); },
            [&](const sys::Open& c) { return do_open(s, c); },
            [&](const sys::Read& c) { return do_read(s, tid, c); },
            [&](const sys::Write& c) { return do_write(s, tid, c); },
            [&](const sys::Link& c) { return do_link(s, c); },
            [&](const sys::ProcessVmReadv& c) { return kernel_read(s, tid, c.addr, c.len); },
            [&](const sys::ProcessVmWritev& c) { return kernel_write(s, tid, c.addr, c.data); },
            [&](const sys::Ptrace& c) { return do_ptrace(s, tid, c); },
            [&](const sys::Seccomp& c) {
                install_filter(s, c.filter);
                return SyscallResult::success();
            },
            [&](const sys::Prctl& c) {
                if (c.option == sys::PrctlOption::SetSeccomp) {
                    install_filter(s, c.filter);
                } else if (c.option == sys::PrctlOption::AgentInit) {
                    auto slist = c.slist.empty() ? default_slist() : c.slist;
                    if (agent_init(s, tid, slist, {s.proc_self_mem}) == AgentInitResult::AlreadyInitialized)
                        return SyscallResult::failure(err::kPerm);
                }
                return SyscallResult::success();
            },
            [&](const sys::ModifyLdt&) { return SyscallResult::success(); },
            [&](const sys::Shmget& c) {
                int id = static_cast<int>(s.shm_segments.size()) + 1;
                s.shm_segments[id] = s.new_object(page_ceil(c.size));
                return SyscallResult::success(id);
            },
            [&](const sys::Shmat& c) {
                auto it = s.shm_segments.find(c.shmid);
                if (it == s.shm_segments.end())
                    return SyscallResult::failure(err::kInval);
                Mapping m;
                m.length = s.objects.at(it->second).size();
                m.start = c.addr ? c.addr : s.space.find_free(0x20000000, m.length);
                if (!page_aligned(m.start))
                    return SyscallResult::failure(err::kInval);
                m.perms = c.prot;
                m.share = ShareMode::Shared;
                m.backing = Backing{Backing::Kind::Anonymous, it->second, 0};
                s.space.remove(m.start, m.end());
                s.space.insert(m);
                return SyscallResult::success(static_cast<std::int64_t>(m.start));
            },
            [&](const sys::Shmdt& c) {
                const Mapping* m = s.space.find(c.addr);
                if (!m || m->start != c.addr || m->share != ShareMode::Shared)
                    return SyscallResult::failure(err::kInval);
                s.space.remove(m->start, m->end());
                return SyscallResult::success();
            },
            [&](const sys::Clone& c) { return do_clone(s, tid, c); },
            [&](const sys::Execve&) { return do_execve(s, tid); },
            [&](const sys::Sigaltstack&) { return SyscallResult::success(); },
            [&](const sys::Sigreturn& c) { return do_sigreturn(s, tid, c); },
            [&](const sys::Exit&) {
                s.thread(tid)->alive = false;
                return SyscallResult::success();
            },
            [&](const sys::ListTasks&) { return SyscallResult::success(static_cast<std::int64_t>(s.live_threads())); },
        },
        call);
}

}  // namespace pkusim
