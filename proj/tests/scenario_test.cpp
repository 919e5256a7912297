#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "pkusim/attacks.hpp"
#include "pkusim/scenario.hpp"

using namespace pkusim;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string error_of(std::string_view text) {
    try {
        parse_scenario(text);
    } catch (const ScenarioError& e) {
        return e.what();
    }
    return {};
}

}  // namespace

TEST(ScenarioText, BuiltinsRoundTrip) {
    for (const auto& s : builtin_scenarios()) {
        auto text = print_scenario(s);
        EXPECT_EQ(parse_scenario(text), s) << s.name;
        EXPECT_EQ(print_scenario(parse_scenario(text)), text) << s.name;
    }
}

TEST(ScenarioText, CommittedFilesMatchBuiltins) {
    std::size_t n = 0;
    for (const auto& entry : fs::recursive_directory_iterator(PKUSIM_SCENARIOS)) {
        if (entry.path().extension() != ".scn")
            continue;
        ++n;
        auto parsed = parse_scenario(slurp(entry.path()));
        auto builtin = find_builtin(parsed.name);
        ASSERT_TRUE(builtin) << entry.path();
        EXPECT_EQ(parsed, *builtin) << entry.path();
        EXPECT_EQ(entry.path().parent_path().filename(), builtin->group);
        EXPECT_EQ(entry.path().stem(), builtin->name);
    }
    EXPECT_EQ(n, builtin_scenarios().size());
}

TEST(ScenarioText, Groups) {
    EXPECT_EQ(builtin_group("attacks").size(), 11u);
    EXPECT_FALSE(builtin_group("flaws").empty());
    EXPECT_FALSE(builtin_group("benign").empty());
    EXPECT_EQ(builtin_group("attacks").size() + builtin_group("flaws").size() + builtin_group("benign").size(),
              builtin_scenarios().size());
}

TEST(ScenarioText, ParsesEveryStepKind) {
    auto s = parse_scenario(R"(# comment
scenario demo
title A demo scenario
group benign
spawn t1 from t0
step t0 3
sys t0 mmap addr=0x800000 len=0x1000 prot=rw- flags=private,anon
write t1 0x800000 0f01ef   # trailing comment
setreg t0 eax 0
interleave begin
resume t0
interleave end
expect blocked
expect hodor-model breach
)");
    EXPECT_EQ(s.name, "demo");
    EXPECT_EQ(s.title, "A demo scenario");
    ASSERT_EQ(s.steps.size(), 8u);
    EXPECT_EQ(std::get<steps::Spawn>(s.steps[0]), (steps::Spawn{1, 0}));
    EXPECT_EQ(std::get<steps::Run>(s.steps[1]), (steps::Run{0, 3}));
    auto& m = std::get<sys::Mmap>(std::get<steps::Sys>(s.steps[2]).call);
    EXPECT_EQ(m.addr, 0x800000u);
    EXPECT_EQ(m.len, 0x1000u);
    EXPECT_TRUE(m.anonymous);
    EXPECT_EQ(std::get<steps::WriteBytes>(s.steps[3]).bytes, (Bytes{0x0F, 0x01, 0xEF}));
    EXPECT_EQ(std::get<steps::SetReg>(s.steps[4]).reg, "eax");
    EXPECT_EQ(s.expect.for_policy(PolicyKind::GarmrErim), Outcome::Kind::Blocked);
    EXPECT_EQ(s.expect.for_policy(PolicyKind::HodorModel), Outcome::Kind::Breach);
}

TEST(ScenarioText, ErrorsCarryLineNumbers) {
    EXPECT_NE(error_of("scenario x\nstep t0 1\nfrobnicate t0\n").find("line 3"), std::string::npos);
    EXPECT_NE(error_of("scenario x\nsys t0 mmap len=zz\n").find("line 2"), std::string::npos);
    EXPECT_NE(error_of("scenario x\nwrite t0 0x10 0f0\n").find("line 2"), std::string::npos);
    EXPECT_NE(error_of("scenario x\nexpect maybe\n").find("line 2"), std::string::npos);
    EXPECT_NE(error_of("scenario x\nexpect garmr breach\n").find("line 2"), std::string::npos);
    EXPECT_NE(error_of("scenario x\nstep q0 1\n").find("line 2"), std::string::npos);
    EXPECT_FALSE(error_of("step t0 1\n").empty());
}

TEST(ScenarioText, ValidateThreadsAndMarkers) {
    auto with = [](std::vector<ScenarioStep> st) {
        Scenario s;
        s.name = "x";
        s.steps = std::move(st);
        return s;
    };
    EXPECT_NO_THROW(validate(with({steps::Spawn{1, 0}, steps::Run{1, 1}})));
    EXPECT_THROW(validate(with({steps::Run{1, 1}})), ScenarioError);
    EXPECT_THROW(validate(with({steps::Spawn{2, 1}})), ScenarioError);
    EXPECT_THROW(validate(with({steps::Interleave{true}})), ScenarioError);
    EXPECT_THROW(validate(with({steps::Interleave{false}})), ScenarioError);
    EXPECT_THROW(validate(with({steps::Interleave{true}, steps::Interleave{true}, steps::Interleave{false},
                                steps::Interleave{false}})),
                 ScenarioError);
    EXPECT_NE(error_of("scenario x\nstep t0 1\n").find("expect"), std::string::npos);
}

TEST(ScenarioText, SyscallRoundTrip) {
    std::vector<Syscall> calls{
        sys::Mmap{0x800000, 0x2000, Permissions::parse("r-x"), MmapShare::Shared, false, 3, 0x1000},
        sys::Munmap{0x800000, 0x1000},
        sys::Mremap{0x800000, 0x1000, 0x2000, true, 0x900000},
        sys::Mprotect{0x800000, 0x1000, Permissions::parse("--x"), true},
        sys::PkeyMprotect{0x200000, 0x1000, Permissions::parse("rw-"), 0},
        sys::Open{"/proc/self/mem", false, true},
        sys::Read{3, 8, 0x200000},
        sys::Write{3, Bytes{0x0F, 0x01, 0xEF}, 0x800000},
        sys::Link{"/proc/self/mem", "/tmp/m", true},
        sys::ProcessVmReadv{0x200000, 8},
        sys::ProcessVmWritev{0x200000, Bytes{1}},
        sys::Ptrace{sys::PtraceRequest::PokeData, 0x200000, 0, Bytes{1, 2}},
        sys::Seccomp{SeccompFilter{{{"mmap", SeccompAction::DenyWithFakeSuccess}}}},
        sys::Prctl{sys::PrctlOption::AgentInit, {}, {"read", "write"}},
        sys::Shmget{0x1000},
        sys::Shmat{5, 0x800000, Permissions::parse("r-x")},
        sys::Clone{sys::CloneVariant::Clone3, 4},
        sys::Execve{"/bin/true"},
        sys::Sigreturn{{{Reg::Rax, 0}, {Reg::Rdx, 0}}, 0x800000, 0},
        sys::Exit{},
        sys::ListTasks{},
    };
    for (const auto& c : calls) {
        auto text = print_syscall(c);
        EXPECT_EQ(parse_syscall(text), c) << text;
    }
}

TEST(ScenarioText, HexBytes) {
    EXPECT_EQ(parse_hex_bytes("0f01EF"), (Bytes{0x0F, 0x01, 0xEF}));
    EXPECT_EQ(hex_bytes(Bytes{0x0F, 0x01, 0xEF}), "0f01ef");
    EXPECT_THROW(parse_hex_bytes("0f0"), ScenarioError);
    EXPECT_THROW(parse_hex_bytes("zz"), ScenarioError);
}

TEST(ScenarioText, ExpectationOverrides) {
    Expectation e;
    e.fallback = Outcome::Kind::Blocked;
    e.overrides[PolicyKind::NoSandbox] = Outcome::Kind::Breach;
    EXPECT_EQ(e.for_policy(PolicyKind::NoSandbox), Outcome::Kind::Breach);
    EXPECT_EQ(e.for_policy(PolicyKind::GarmrXom), Outcome::Kind::Blocked);
}
