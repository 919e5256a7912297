#include "pkusim/agent.hpp"

namespace pkusim {

const std::vector<std::string>& default_slist() {
    static const std::vector<std::string> list = {
        "modify_ldt",       "prctl",  "seccomp", "ptrace", "process_vm_readv", "process_vm_writev",
        "mprotect",         "pkey_mprotect",     "pkey_alloc", "pkey_free", "mmap", "munmap",
        "mremap",           "execve", "shmat",   "shmdt",  "clone",  "clone3", "fork", "vfork",
    };
    return list;
}

AgentInitResult agent_init(SimState& state, Tid tid, const std::vector<std::string>& slist,
                           const std::vector<InodeId>& ilist) {
    if (state.agent && state.agent->initialized) {
        state.log(tid, "agent-init", "deny", "already initialized");
        return AgentInitResult::AlreadyInitialized;
    }
    AgentState a;
    a.slist.insert(slist.begin(), slist.end());
    a.ilist.insert(ilist.begin(), ilist.end());
    a.initialized = true;
    state.agent = std::move(a);
    state.log(tid, "agent-init", "ok", std::to_string(slist.size()) + " calls, " + std::to_string(ilist.size()) + " inodes");
    return AgentInitResult::Ok;
}

std::string_view to_string(AgentRoute r) {
    switch (r) {
    case AgentRoute::Forward: return "forward";
    case AgentRoute::Native: return "native";
    case AgentRoute::Deny: return "deny";
    }
    return "?";
}

AgentRoute agent_route(const AgentState& agent, const Syscall& call, std::optional<InodeId> resolved_inode) {
    if (is_open_like(call) && resolved_inode && agent.ilist.count(*resolved_inode))
        return AgentRoute::Deny;
    if (agent.slist.count(syscall_name(call)))
        return AgentRoute::Forward;
    return AgentRoute::Native;
}

}  // namespace pkusim
