// pkusim: scan binaries, run scenarios, print the attack matrix.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pkusim/attacks.hpp"
#include "pkusim/elf.hpp"
#include "pkusim/scanner.hpp"

using namespace pkusim;
using nlohmann::json;

namespace {

constexpr int kUsage = 2;
constexpr int kMismatch = 1;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string hex(std::uint64_t v) {
    std::ostringstream o;
    o << "0x" << std::hex << v;
    return o.str();
}

Bytes read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw UsageError("cannot read " + path);
    return Bytes(std::istreambuf_iterator<char>(in), {});
}

RunOptions run_options() {
    RunOptions o;
    if (const char* s = std::getenv("PKUSIM_DEBUG_SLOTS")) {
        try {
            o.debug_slots = std::stoul(s);
        } catch (const std::exception&) {
            throw UsageError(std::string("PKUSIM_DEBUG_SLOTS is not a number: ") + s);
        }
    }
    return o;
}

PolicyKind policy_arg(const std::string& s) {
    auto p = parse_policy_kind(s);
    if (!p)
        throw UsageError("unknown policy '" + s + "'");
    return *p;
}

json occurrence_json(const UnsafeOccurrence& o) {
    return {{"addr", hex(o.addr)},
            {"kind", std::string(to_string(o.kind))},
            {"safe", o.safe},
            {"spanning", o.spanning},
            {"length", o.length}};
}

json outcome_json(const Outcome& o) {
    json j = {{"kind", std::string(to_string(o.kind))}};
    if (o.kind == Outcome::Kind::Blocked) {
        j["reason"] = o.reason;
        j["step"] = o.step;
    }
    if (o.evidence) {
        const char* k = o.evidence->kind == Evidence::Kind::TrustedRead    ? "TrustedRead"
                        : o.evidence->kind == Evidence::Kind::TrustedWrite ? "TrustedWrite"
                                                                           : "PkruUnlocked";
        j["evidence"] = {{"kind", k}, {"addr", hex(o.evidence->addr)}, {"tid", o.evidence->tid}};
    }
    return j;
}

int cmd_scan(const std::string& file, const std::string& base_str, bool elf, bool as_json) {
    Bytes bytes = read_file(file);
    auto patterns = default_patterns(PkruValue::locking(ProtectionKey{1}));

    std::vector<std::pair<Addr, Bytes>> regions;
    if (elf) {
        try {
            for (auto& seg : elf_exec_segments(bytes))
                regions.emplace_back(seg.vaddr, std::move(seg.bytes));
        } catch (const ElfError& e) {
            throw UsageError(std::string(e.kind == ElfError::Kind::NotElf ? "not an ELF file: " : "malformed ELF: ") +
                             e.what());
        }
    } else {
        Addr base = 0;
        if (!base_str.empty()) {
            try {
                base = std::stoull(base_str, nullptr, 16);
            } catch (const std::exception&) {
                throw UsageError("bad --base " + base_str);
            }
        }
        regions.emplace_back(base, std::move(bytes));
    }

    json j = json::array();
    for (const auto& [base, data] : regions) {
        json seg = {{"vaddr", hex(base)}, {"size", data.size()}, {"occurrences", json::array()}};
        if (elf && !as_json)
            std::cout << "# segment " << hex(base) << " size=" << data.size() << "\n";
        for (const auto& o : scan_bytes(data, base, patterns)) {
            if (as_json)
                seg["occurrences"].push_back(occurrence_json(o));
            else
                std::cout << format_occurrence(o) << "\n";
        }
        j.push_back(seg);
    }
    if (as_json)
        std::cout << (elf ? json{{"segments", j}} : j.at(0)).dump(2) << "\n";
    return 0;
}

int cmd_run(const std::string& policy, const std::string& file, bool as_json, bool unsafe_publish) {
    PolicyKind kind = policy_arg(policy);
    Bytes raw = read_file(file);
    Scenario scn;
    RunReport r;
    RunOptions opts = run_options();
    opts.policy.race_safe_publish = !unsafe_publish;
    try {
        scn = parse_scenario(std::string(raw.begin(), raw.end()));
        r = run_scenario(scn, kind, opts);
    } catch (const ScenarioError& e) {
        throw UsageError(file + ": " + e.what());
    }
    std::string expected(to_string(r.expected));
    if (as_json) {
        json j = {{"scenario", r.scenario},
                  {"policy", std::string(to_string(kind))},
                  {"outcome", outcome_json(r.outcome)},
                  {"expected", expected},
                  {"matches", r.matches()},
                  {"log", r.log},
                  {"audit_failures", r.audit_failures}};
        std::cout << j.dump(2) << "\n";
    } else {
        for (const auto& l : r.log)
            std::cout << l << "\n";
        for (const auto& a : r.audit_failures)
            std::cout << "audit: " << a << "\n";
        std::cout << "outcome: " << describe(r.outcome) << "\n";
        std::cout << "expected: " << expected << (r.matches() ? "" : " (MISMATCH)") << "\n";
    }
    return r.matches() ? 0 : kMismatch;
}

int cmd_attacks(const std::vector<std::string>& policies, bool all, bool as_json) {
    std::vector<PolicyKind> kinds;
    for (const auto& p : policies)
        kinds.push_back(policy_arg(p));
    if (kinds.empty())
        kinds = all_policy_kinds();
    std::vector<Scenario> scns = all ? builtin_scenarios() : builtin_attacks();
    RunOptions opts = run_options();
    AttackMatrix m = attack_matrix(scns, kinds, opts);

    bool ok = true;
    for (std::size_t r = 0; r < m.rows.size(); ++r)
        for (std::size_t c = 0; c < kinds.size(); ++c)
            if (m.rows[r].outcomes[c].kind != scns[r].expect.for_policy(kinds[c]))
                ok = false;

    if (as_json) {
        json j = {{"policies", json::array()}, {"rows", json::array()}, {"summary", json::object()}};
        for (PolicyKind k : kinds)
            j["policies"].push_back(std::string(to_string(k)));
        for (const auto& row : m.rows) {
            json jr = {{"name", row.name}, {"title", row.title}, {"outcomes", json::object()}};
            for (std::size_t c = 0; c < kinds.size(); ++c)
                jr["outcomes"][std::string(to_string(kinds[c]))] = outcome_json(row.outcomes[c]);
            j["rows"].push_back(jr);
        }
        for (std::size_t c = 0; c < kinds.size(); ++c) {
            json s = json::object();
            for (auto k : {Outcome::Kind::Blocked, Outcome::Kind::Breach, Outcome::Kind::Completed})
                if (auto n = m.count(c, k))
                    s[std::string(to_string(k))] = n;
            j["summary"][std::string(to_string(kinds[c]))] = s;
        }
        std::cout << j.dump(2) << "\n";
    } else {
        std::cout << render_matrix(m);
    }
    return ok ? 0 : kMismatch;
}

int cmd_dump(const std::string& dir) {
    for (const auto& s : builtin_scenarios()) {
        std::filesystem::path p = std::filesystem::path(dir) / s.group / (s.name + ".scn");
        std::filesystem::create_directories(p.parent_path());
        std::ofstream out(p);
        if (!out)
            throw UsageError("cannot write " + p.string());
        out << print_scenario(s);
        std::cout << p.string() << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PKU sandbox simulator"};
    app.require_subcommand(1);

    std::string file, base, policy, dir;
    std::vector<std::string> policies;
    bool elf = false, as_json = false, all = false, unsafe_publish = false;

    auto* scan = app.add_subcommand("scan", "report wrpkru/xrstor occurrences in a flat binary or ELF");
    scan->add_option("--base", base, "load address of a flat binary (hex)");
    scan->add_flag("--elf", elf, "scan the executable PT_LOAD segments of an ELF64 file");
    scan->add_flag("--json", as_json);
    scan->add_option("file", file)->required();

    auto* run = app.add_subcommand("run", "run a scenario file under a policy");
    run->add_option("--policy", policy, "none|erim-model|hodor-model|garmr-erim|garmr-xom")->required();
    run->add_flag("--json", as_json);
    run->add_flag("--unsafe-publish", unsafe_publish, "scan before stripping write access (race demonstration)");
    run->add_option("file", file)->required();

    auto* attacks = app.add_subcommand("attacks", "print the attack matrix");
    attacks->add_option("--policy", policies, "policies to include (default: all)");
    attacks->add_flag("--all", all, "include published-flaw and benign scenarios");
    attacks->add_flag("--json", as_json);

    auto* dump = app.add_subcommand("dump", "write the built-in scenarios as .scn files");
    dump->add_option("dir", dir)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*scan)
            return cmd_scan(file, base, elf, as_json);
        if (*run)
            return cmd_run(policy, file, as_json, unsafe_publish);
        if (*attacks)
            return cmd_attacks(policies, all, as_json);
        if (*dump)
            return cmd_dump(dir);
    } catch (const UsageError& e) {
        std::cerr << "pkusim: " << e.what() << "\n";
        return kUsage;
    }
    return kUsage;
}
