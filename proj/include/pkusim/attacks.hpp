#pragma once

// Built-in scenarios (the eleven attacks, the published-flaw cases and
// benign workloads), the harness that runs them, and the attack matrix.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pkusim/engine.hpp"
#include "pkusim/policy.hpp"
#include "pkusim/scenario.hpp"

namespace pkusim {

/// Groups: "attacks" (11, in table order), "flaws", "benign".
const std::vector<Scenario>& builtin_scenarios();
std::vector<Scenario> builtin_group(std::string_view group);
std::vector<Scenario> builtin_attacks();
std::optional<Scenario> find_builtin(std::string_view name);

/// The instructions every attack payload runs once it has code execution:
/// xor ecx,ecx; xor edx,edx; mov eax,0; wrpkru; mov rbx,[0x200000].
Bytes attack_payload();

struct RunReport {
    std::string scenario;
    PolicyKind policy = PolicyKind::NoSandbox;
    Outcome outcome;
    Outcome::Kind expected = Outcome::Kind::Completed;
    std::vector<std::string> log;
    std::vector<std::string> audit_failures;

    bool matches() const { return outcome.kind == expected; }
};

/// Throws ScenarioError for malformed steps.
RunReport run_scenario(const Scenario& scn, PolicyKind policy, const RunOptions& opts = {});

struct MatrixRow {
    std::string name;
    std::string title;
    std::vector<Outcome> outcomes;  // one per policy, in column order
};

struct AttackMatrix {
    std::vector<PolicyKind> policies;
    std::vector<MatrixRow> rows;

    std::size_t count(std::size_t column, Outcome::Kind k) const;
};

AttackMatrix attack_matrix(const std::vector<Scenario>& scenarios, const std::vector<PolicyKind>& policies,
                           const RunOptions& opts = {});
std::string render_matrix(const AttackMatrix& m);

/// Every schedule of the steps inside the scenario's interleave window that
/// keeps each thread's own steps in order. The first step of the window (the
/// syscall that opens it) stays first.
std::vector<Scenario> enumerate_interleavings(const Scenario& scn);

}  // namespace pkusim
