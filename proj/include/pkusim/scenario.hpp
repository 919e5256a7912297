#pragma once

// Scenario text format, one step per line:
//
//   scenario <name>
//   title <free text>
//   group attacks|flaws|benign
//   spawn t1 [from t0]
//   step t0 3
//   sys t0 mmap addr=0x800000 len=0x1000 prot=rx flags=private,anon
//   write t0 0x800000 0f01ef
//   setreg t0 eax 0
//   resume t0
//   interleave begin|end
//   expect blocked                 default for every policy
//   expect hodor-model breach      per-policy override
//
// `#` starts a comment. Numbers are hex with 0x, decimal otherwise.

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "pkusim/engine.hpp"
#include "pkusim/kernel.hpp"
#include "pkusim/policy.hpp"

namespace pkusim {

class ScenarioError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace steps {

struct Spawn {
    Tid tid = 0;
    Tid from = 0;
    friend bool operator==(const Spawn&, const Spawn&) = default;
};
struct Run {
    Tid tid = 0;
    int count = 1;
    friend bool operator==(const Run&, const Run&) = default;
};
struct Sys {
    Tid tid = 0;
    Syscall call;
    friend bool operator==(const Sys&, const Sys&) = default;
};
struct WriteBytes {
    Tid tid = 0;
    Addr addr = 0;
    Bytes bytes;
    friend bool operator==(const WriteBytes&, const WriteBytes&) = default;
};
struct SetReg {
    Tid tid = 0;
    std::string reg;
    std::uint64_t value = 0;
    friend bool operator==(const SetReg&, const SetReg&) = default;
};
struct Resume {
    Tid tid = 0;
    friend bool operator==(const Resume&, const Resume&) = default;
};
struct Interleave {
    bool begin = true;
    friend bool operator==(const Interleave&, const Interleave&) = default;
};

}  // namespace steps

using ScenarioStep = std::variant<steps::Spawn, steps::Run, steps::Sys, steps::WriteBytes, steps::SetReg, steps::Resume,
                                  steps::Interleave>;

struct Expectation {
    Outcome::Kind fallback = Outcome::Kind::Completed;
    std::map<PolicyKind, Outcome::Kind> overrides;

    Outcome::Kind for_policy(PolicyKind k) const;
    friend bool operator==(const Expectation&, const Expectation&) = default;
};

struct Scenario {
    std::string name;
    std::string title;
    std::string group;
    std::vector<ScenarioStep> steps;
    Expectation expect;

    friend bool operator==(const Scenario&, const Scenario&) = default;
};

/// Throws ScenarioError with the offending line number.
Scenario parse_scenario(std::string_view text);
/// Canonical text; parse_scenario(print_scenario(s)) == s.
std::string print_scenario(const Scenario& s);

Syscall parse_syscall(std::string_view line);
std::string print_syscall(const Syscall& call);
std::string print_step(const ScenarioStep& s);

/// Every step refers to t0 or a thread spawned earlier; interleave markers
/// pair up.
void validate(const Scenario& s);

Bytes parse_hex_bytes(std::string_view hex);
std::string hex_bytes(const Bytes& b);

}  // namespace pkusim
