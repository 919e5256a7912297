#pragma once

// In-kernel syscall agent: decides per call whether the monitor sees it,
// whether it runs natively, or whether it is refused outright.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pkusim/kernel.hpp"
#include "pkusim/machine.hpp"

namespace pkusim {

/// Calls forwarded to the monitor, as installed by the loader.
const std::vector<std::string>& default_slist();

enum class AgentInitResult { Ok, AlreadyInitialized };

/// Once per image; a repeat attempt leaves the installed lists untouched.
AgentInitResult agent_init(SimState& state, Tid tid, const std::vector<std::string>& slist,
                           const std::vector<InodeId>& ilist);

enum class AgentRoute { Forward, Native, Deny };
std::string_view to_string(AgentRoute r);

/// Open-like calls on an IList inode are denied; SList calls are forwarded;
/// everything else runs natively.
AgentRoute agent_route(const AgentState& agent, const Syscall& call, std::optional<InodeId> resolved_inode);

}  // namespace pkusim
