#include "pkusim/scenario.hpp"

#include <cstdio>
#include <set>
#include <sstream>

namespace pkusim {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};

std::string hex(std::uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
    return buf;
}

std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::vector<std::string> words(std::string_view line) {
    std::vector<std::string> out;
    std::istringstream in{std::string(line)};
    std::string w;
    while (in >> w)
        out.push_back(w);
    return out;
}

std::uint64_t parse_number(std::string_view s) {
    if (s.empty())
        throw ScenarioError("missing number");
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
        v = std::stoull(std::string(s), &used, s.starts_with("0x") || s.starts_with("0X") ? 16 : 10);
    } catch (const std::exception&) {
        throw ScenarioError("bad number '" + std::string(s) + "'");
    }
    if (used != s.size())
        throw ScenarioError("bad number '" + std::string(s) + "'");
    return v;
}

Tid parse_tid(std::string_view s) {
    if (s.size() < 2 || s[0] != 't')
        throw ScenarioError("bad thread '" + std::string(s) + "'");
    return static_cast<Tid>(parse_number(s.substr(1)));
}

std::string tid_str(Tid t) { return "t" + std::to_string(t); }

/// key=value arguments of a `sys` line. Every key must be consumed.
class Args {
public:
    Args(const std::vector<std::string>& w, std::size_t from) {
        for (std::size_t i = from; i < w.size(); ++i) {
            auto eq = w[i].find('=');
            if (eq == std::string::npos)
                throw ScenarioError("expected key=value, got '" + w[i] + "'");
            kv_[w[i].substr(0, eq)] = w[i].substr(eq + 1);
        }
    }

    bool has(const std::string& k) const { return kv_.count(k) != 0; }

    std::string str(const std::string& k) {
        auto it = kv_.find(k);
        if (it == kv_.end())
            throw ScenarioError("missing argument " + k);
        std::string v = it->second;
        kv_.erase(it);
        return v;
    }
    std::string str_or(const std::string& k, std::string dflt) { return has(k) ? str(k) : dflt; }
    std::uint64_t num(const std::string& k) { return parse_number(str(k)); }
    std::uint64_t num_or(const std::string& k, std::uint64_t dflt) { return has(k) ? num(k) : dflt; }
    std::optional<std::uint64_t> opt(const std::string& k) {
        if (!has(k))
            return std::nullopt;
        return num(k);
    }
    Permissions prot() {
        std::string p = str("prot");
        try {
            return Permissions::parse(p);
        } catch (const std::invalid_argument&) {
            throw ScenarioError("bad prot '" + p + "'");
        }
    }
    bool flag(const std::string& k) { return num_or(k, 0) != 0; }

    /// Remaining keys, for free-form register lists.
    std::map<std::string, std::string> take_rest() { return std::exchange(kv_, {}); }

    void done() const {
        if (!kv_.empty())
            throw ScenarioError("unknown argument " + kv_.begin()->first);
    }

private:
    std::map<std::string, std::string> kv_;
};

SeccompFilter parse_rules(const std::string& s) {
    SeccompFilter f;
    if (s.empty())
        return f;
    for (const auto& rule : split(s, ',')) {
        auto parts = split(rule, ':');
        if (parts.size() != 2 || parts[0].empty())
            throw ScenarioError("bad seccomp rule '" + rule + "'");
        if (parts[1] == "fake")
            f.rules[parts[0]] = SeccompAction::DenyWithFakeSuccess;
        else if (parts[1] == "allow")
            f.rules[parts[0]] = SeccompAction::Allow;
        else
            throw ScenarioError("bad seccomp action '" + parts[1] + "'");
    }
    return f;
}

std::string print_rules(const SeccompFilter& f) {
    std::string out;
    for (const auto& [name, action] : f.rules) {
        if (!out.empty())
            out += ',';
        out += name + (action == SeccompAction::DenyWithFakeSuccess ? ":fake" : ":allow");
    }
    return out;
}

}  // namespace

Bytes parse_hex_bytes(std::string_view s) {
    if (s.size() % 2 != 0)
        throw ScenarioError("odd number of hex digits in '" + std::string(s) + "'");
    Bytes out;
    for (std::size_t i = 0; i < s.size(); i += 2) {
        auto digit = [&](char c) -> int {
            if (c >= '0' && c <= '9')
                return c - '0';
            if (c >= 'a' && c <= 'f')
                return c - 'a' + 10;
            if (c >= 'A' && c <= 'F')
                return c - 'A' + 10;
            throw ScenarioError("bad hex digit in '" + std::string(s) + "'");
        };
        out.push_back(static_cast<std::uint8_t>(digit(s[i]) * 16 + digit(s[i + 1])));
    }
    return out;
}

std::string hex_bytes(const Bytes& b) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (auto v : b) {
        out += digits[v >> 4];
        out += digits[v & 15];
    }
    return out;
}

Outcome::Kind Expectation::for_policy(PolicyKind k) const {
    auto it = overrides.find(k);
    return it == overrides.end() ? fallback : it->second;
}

Syscall parse_syscall(std::string_view line) {
    auto w = words(line);
    if (w.empty())
        throw ScenarioError("missing syscall name");
    const std::string& name = w[0];
    Args a(w, 1);
    Syscall call;
    if (name == "mmap") {
        sys::Mmap c;
        c.addr = a.num_or("addr", 0);
        c.len = a.num("len");
        c.prot = a.prot();
        bool anon_seen = false;
        bool share_seen = false;
        for (const auto& f : split(a.str_or("flags", "private,anon"), ',')) {
            if (f == "private" || f == "shared" || f == "shared_validate") {
                c.share = f == "private" ? MmapShare::Private
                                         : (f == "shared" ? MmapShare::Shared : MmapShare::SharedValidate);
                share_seen = true;
            } else if (f == "anon") {
                anon_seen = true;
            } else {
                throw ScenarioError("bad mmap flag '" + f + "'");
            }
        }
        if (!share_seen)
            throw ScenarioError("mmap needs private, shared or shared_validate");
        c.anonymous = anon_seen;
        if (!c.anonymous) {
            c.fd = static_cast<int>(a.num("fd"));
            c.offset = a.num_or("offset", 0);
        }
        call = c;
    } else if (name == "munmap") {
        call = sys::Munmap{a.num("addr"), a.num("len")};
    } else if (name == "mremap") {
        sys::Mremap c;
        c.old_addr = a.num("old_addr");
        c.old_len = a.num("old_len");
        c.new_len = a.num("new_len");
        if (auto n = a.opt("new_addr")) {
            c.fixed = true;
            c.new_addr = *n;
        }
        call = c;
    } else if (name == "mprotect") {
        sys::Mprotect c;
        c.addr = a.num("addr");
        c.len = a.num("len");
        c.prot = a.has("prot") ? a.prot() : Permissions::parse("r-x");
        c.xom = a.flag("xom");
        call = c;
    } else if (name == "pkey_mprotect") {
        sys::PkeyMprotect c;
        c.addr = a.num("addr");
        c.len = a.num("len");
        c.prot = a.prot();
        c.key = static_cast<int>(a.num("key"));
        call = c;
    } else if (name == "pkey_alloc") {
        call = sys::PkeyAlloc{};
    } else if (name == "pkey_free") {
        call = sys::PkeyFree{static_cast<int>(a.num("key"))};
    } else if (name == "open" || name == "openat") {
        call = sys::Open{a.str("path"), a.flag("create"), name == "openat"};
    } else if (name == "read") {
        sys::Read c;
        c.fd = static_cast<int>(a.num("fd"));
        c.len = a.num("len");
        c.offset = a.opt("offset");
        call = c;
    } else if (name == "write") {
        sys::Write c;
        c.fd = static_cast<int>(a.num("fd"));
        c.data = parse_hex_bytes(a.str("data"));
        c.offset = a.opt("offset");
        call = c;
    } else if (name == "link" || name == "symlink") {
        call = sys::Link{a.str("target"), a.str("path"), name == "symlink"};
    } else if (name == "process_vm_readv") {
        call = sys::ProcessVmReadv{a.num("addr"), a.num("len")};
    } else if (name == "process_vm_writev") {
        call = sys::ProcessVmWritev{a.num("addr"), parse_hex_bytes(a.str("data"))};
    } else if (name == "ptrace") {
        sys::Ptrace c;
        std::string r = a.str_or("request", "attach");
        if (r == "attach") {
            c.request = sys::PtraceRequest::Attach;
        } else if (r == "peek") {
            c.request = sys::PtraceRequest::PeekData;
            c.addr = a.num("addr");
            c.len = a.num("len");
        } else if (r == "poke") {
            c.request = sys::PtraceRequest::PokeData;
            c.addr = a.num("addr");
            c.data = parse_hex_bytes(a.str("data"));
        } else {
            throw ScenarioError("bad ptrace request '" + r + "'");
        }
        call = c;
    } else if (name == "seccomp") {
        call = sys::Seccomp{parse_rules(a.str_or("rules", ""))};
    } else if (name == "prctl") {
        sys::Prctl c;
        std::string o = a.str_or("option", "other");
        if (o == "set_seccomp") {
            c.option = sys::PrctlOption::SetSeccomp;
            c.filter = parse_rules(a.str_or("rules", ""));
        } else if (o == "agent_init") {
            c.option = sys::PrctlOption::AgentInit;
            if (a.has("slist"))
                c.slist = split(a.str("slist"), ',');
        } else if (o != "other") {
            throw ScenarioError("bad prctl option '" + o + "'");
        }
        call = c;
    } else if (name == "modify_ldt") {
        call = sys::ModifyLdt{};
    } else if (name == "shmget") {
        call = sys::Shmget{a.num("size")};
    } else if (name == "shmat") {
        sys::Shmat c;
        c.shmid = static_cast<int>(a.num("shmid"));
        c.addr = a.num_or("addr", 0);
        c.prot = a.has("prot") ? a.prot() : Permissions::parse("rw-");
        call = c;
    } else if (name == "shmdt") {
        call = sys::Shmdt{a.num("addr")};
    } else if (name == "clone" || name == "clone3" || name == "fork" || name == "vfork") {
        sys::Clone c;
        c.variant = name == "clone"    ? sys::CloneVariant::Clone
                    : name == "clone3" ? sys::CloneVariant::Clone3
                    : name == "fork"   ? sys::CloneVariant::Fork
                                       : sys::CloneVariant::Vfork;
        if (a.has("tid"))
            c.new_tid = parse_tid(a.str("tid"));
        call = c;
    } else if (name == "execve") {
        call = sys::Execve{a.str("path")};
    } else if (name == "sigaltstack") {
        call = sys::Sigaltstack{a.num("addr"), a.num("size")};
    } else if (name == "sigreturn") {
        sys::Sigreturn c;
        if (a.has("rip"))
            c.rip = a.num("rip");
        if (a.has("pkru"))
            c.pkru = static_cast<std::uint32_t>(a.num("pkru"));
        for (const auto& [k, v] : a.take_rest()) {
            auto r = parse_reg(k);
            if (!r)
                throw ScenarioError("unknown register " + k);
            c.regs[*r] = parse_number(v);
        }
        call = c;
    } else if (name == "exit") {
        call = sys::Exit{};
    } else if (name == "list_tasks") {
        call = sys::ListTasks{};
    } else {
        throw ScenarioError("unknown syscall '" + name + "'");
    }
    a.done();
    return call;
}

std::string print_syscall(const Syscall& call) {
    std::string name = syscall_name(call);
    std::string args = std::visit(
        overloaded{
            [](const sys::Mmap& c) {
                std::string s = "addr=" + hex(c.addr) + " len=" + hex(c.len) + " prot=" + c.prot.str() + " flags=";
                s += c.share == MmapShare::Private ? "private"
                                                   : (c.share == MmapShare::Shared ? "shared" : "shared_validate");
                if (c.anonymous)
                    return s + ",anon";
                return s + " fd=" + std::to_string(c.fd) + " offset=" + hex(c.offset);
            },
            [](const sys::Munmap& c) { return "addr=" + hex(c.addr) + " len=" + hex(c.len); },
            [](const sys::Mremap& c) {
                std::string s = "old_addr=" + hex(c.old_addr) + " old_len=" + hex(c.old_len) + " new_len=" + hex(c.new_len);
                if (c.fixed)
                    s += " new_addr=" + hex(c.new_addr);
                return s;
            },
            [](const sys::Mprotect& c) {
                std::string s = "addr=" + hex(c.addr) + " len=" + hex(c.len) + " prot=" + c.prot.str();
                return c.xom ? s + " xom=1" : s;
            },
            [](const sys::PkeyMprotect& c) {
                return "addr=" + hex(c.addr) + " len=" + hex(c.len) + " prot=" + c.prot.str() +
                       " key=" + std::to_string(c.key);
            },
            [](const sys::PkeyAlloc&) { return std::string(); },
            [](const sys::PkeyFree& c) { return "key=" + std::to_string(c.key); },
            [](const sys::Open& c) { return "path=" + c.path + (c.create ? " create=1" : ""); },
            [](const sys::Read& c) {
                std::string s = "fd=" + std::to_string(c.fd) + " len=" + std::to_string(c.len);
                return c.offset ? s + " offset=" + hex(*c.offset) : s;
            },
            [](const sys::Write& c) {
                std::string s = "fd=" + std::to_string(c.fd) + " data=" + hex_bytes(c.data);
                return c.offset ? s + " offset=" + hex(*c.offset) : s;
            },
            [](const sys::Link& c) { return "target=" + c.target + " path=" + c.path; },
            [](const sys::ProcessVmReadv& c) { return "addr=" + hex(c.addr) + " len=" + std::to_string(c.len); },
            [](const sys::ProcessVmWritev& c) { return "addr=" + hex(c.addr) + " data=" + hex_bytes(c.data); },
            [](const sys::Ptrace& c) {
                switch (c.request) {
                case sys::PtraceRequest::Attach: return std::string("request=attach");
                case sys::PtraceRequest::PeekData:
                    return "request=peek addr=" + hex(c.addr) + " len=" + std::to_string(c.len);
                case sys::PtraceRequest::PokeData:
                    return "request=poke addr=" + hex(c.addr) + " data=" + hex_bytes(c.data);
                }
                return std::string();
            },
            [](const sys::Seccomp& c) { return "rules=" + print_rules(c.filter); },
            [](const sys::Prctl& c) {
                switch (c.option) {
                case sys::PrctlOption::SetSeccomp: return "option=set_seccomp rules=" + print_rules(c.filter);
                case sys::PrctlOption::AgentInit: {
                    std::string s = "option=agent_init";
                    if (!c.slist.empty()) {
                        s += " slist=";
                        for (std::size_t i = 0; i < c.slist.size(); ++i)
                            s += (i ? "," : "") + c.slist[i];
                    }
                    return s;
                }
                case sys::PrctlOption::Other: return std::string("option=other");
                }
                return std::string();
            },
            [](const sys::ModifyLdt&) { return std::string(); },
            [](const sys::Shmget& c) { return "size=" + hex(c.size); },
            [](const sys::Shmat& c) {
                return "shmid=" + std::to_string(c.shmid) + " addr=" + hex(c.addr) + " prot=" + c.prot.str();
            },
            [](const sys::Shmdt& c) { return "addr=" + hex(c.addr); },
            [](const sys::Clone& c) { return c.new_tid ? "tid=" + tid_str(c.new_tid) : std::string(); },
            [](const sys::Execve& c) { return "path=" + c.path; },
            [](const sys::Sigaltstack& c) { return "addr=" + hex(c.addr) + " size=" + hex(c.size); },
            [](const sys::Sigreturn& c) {
                std::string s;
                if (c.rip)
                    s += "rip=" + hex(*c.rip);
                if (c.pkru)
                    s += std::string(s.empty() ? "" : " ") + "pkru=" + hex(*c.pkru);
                for (const auto& [r, v] : c.regs)
                    s += std::string(s.empty() ? "" : " ") + std::string(reg_name(r)) + "=" + hex(v);
                return s;
            },
            [](const sys::Exit&) { return std::string(); },
            [](const sys::ListTasks&) { return std::string(); },
        },
        call);
    return args.empty() ? name : name + " " + args;
}

std::string print_step(const ScenarioStep& s) {
    return std::visit(
        overloaded{
            [](const steps::Spawn& x) {
                return "spawn " + tid_str(x.tid) + (x.from ? " from " + tid_str(x.from) : std::string());
            },
            [](const steps::Run& x) { return "step " + tid_str(x.tid) + " " + std::to_string(x.count); },
            [](const steps::Sys& x) { return "sys " + tid_str(x.tid) + " " + print_syscall(x.call); },
            [](const steps::WriteBytes& x) {
                return "write " + tid_str(x.tid) + " " + hex(x.addr) + " " + hex_bytes(x.bytes);
            },
            [](const steps::SetReg& x) { return "setreg " + tid_str(x.tid) + " " + x.reg + " " + hex(x.value); },
            [](const steps::Resume& x) { return "resume " + tid_str(x.tid); },
            [](const steps::Interleave& x) { return std::string(x.begin ? "interleave begin" : "interleave end"); },
        },
        s);
}

Scenario parse_scenario(std::string_view text) {
    Scenario s;
    bool have_fallback = false;
    std::size_t lineno = 0;
    for (const auto& raw : split(text, '\n')) {
        ++lineno;
        std::string line = raw.substr(0, raw.find('#'));
        auto w = words(line);
        if (w.empty())
            continue;
        try {
            const std::string& kw = w[0];
            auto need = [&](std::size_t n) {
                if (w.size() != n)
                    throw ScenarioError("'" + kw + "' takes " + std::to_string(n - 1) + " arguments");
            };
            if (kw == "scenario") {
                need(2);
                s.name = w[1];
            } else if (kw == "title") {
                auto at = line.find("title") + 5;
                auto first = line.find_first_not_of(" \t", at);
                auto last = line.find_last_not_of(" \t\r");
                s.title = first == std::string::npos ? "" : line.substr(first, last - first + 1);
            } else if (kw == "group") {
                need(2);
                s.group = w[1];
            } else if (kw == "spawn") {
                if (w.size() == 2)
                    s.steps.push_back(steps::Spawn{parse_tid(w[1]), 0});
                else if (w.size() == 4 && w[2] == "from")
                    s.steps.push_back(steps::Spawn{parse_tid(w[1]), parse_tid(w[3])});
                else
                    throw ScenarioError("usage: spawn tN [from tM]");
            } else if (kw == "step") {
                if (w.size() == 2)
                    s.steps.push_back(steps::Run{parse_tid(w[1]), 1});
                else if (w.size() == 3)
                    s.steps.push_back(steps::Run{parse_tid(w[1]), static_cast<int>(parse_number(w[2]))});
                else
                    throw ScenarioError("usage: step tN [count]");
            } else if (kw == "sys") {
                if (w.size() < 3)
                    throw ScenarioError("usage: sys tN name [key=value ...]");
                auto rest = line.substr(line.find(w[2], line.find(w[1]) + w[1].size()));
                s.steps.push_back(steps::Sys{parse_tid(w[1]), parse_syscall(rest)});
            } else if (kw == "write") {
                need(4);
                s.steps.push_back(steps::WriteBytes{parse_tid(w[1]), parse_number(w[2]), parse_hex_bytes(w[3])});
            } else if (kw == "setreg") {
                need(4);
                if (w[2] != "rip" && !parse_reg(w[2]))
                    throw ScenarioError("unknown register " + w[2]);
                s.steps.push_back(steps::SetReg{parse_tid(w[1]), w[2], parse_number(w[3])});
            } else if (kw == "resume") {
                need(2);
                s.steps.push_back(steps::Resume{parse_tid(w[1])});
            } else if (kw == "interleave") {
                need(2);
                if (w[1] != "begin" && w[1] != "end")
                    throw ScenarioError("usage: interleave begin|end");
                s.steps.push_back(steps::Interleave{w[1] == "begin"});
            } else if (kw == "expect") {
                if (w.size() == 2) {
                    auto k = parse_outcome_kind(w[1]);
                    if (!k)
                        throw ScenarioError("bad outcome '" + w[1] + "'");
                    s.expect.fallback = *k;
                    have_fallback = true;
                } else if (w.size() == 3) {
                    auto p = parse_policy_kind(w[1]);
                    auto k = parse_outcome_kind(w[2]);
                    if (!p)
                        throw ScenarioError("unknown policy '" + w[1] + "'");
                    if (!k)
                        throw ScenarioError("bad outcome '" + w[2] + "'");
                    s.expect.overrides[*p] = *k;
                } else {
                    throw ScenarioError("usage: expect [policy] completed|blocked|breach");
                }
            } else {
                throw ScenarioError("unknown step '" + kw + "'");
            }
        } catch (const ScenarioError& e) {
            throw ScenarioError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (s.name.empty())
        throw ScenarioError("missing 'scenario <name>' line");
    if (!have_fallback)
        throw ScenarioError("missing 'expect' line");
    validate(s);
    return s;
}

std::string print_scenario(const Scenario& s) {
    std::string out = "scenario " + s.name + "\n";
    if (!s.title.empty())
        out += "title " + s.title + "\n";
    if (!s.group.empty())
        out += "group " + s.group + "\n";
    for (const auto& st : s.steps)
        out += print_step(st) + "\n";
    std::string fallback(to_string(s.expect.fallback));
    for (auto& c : fallback)
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    out += "expect " + fallback + "\n";
    for (const auto& [p, k] : s.expect.overrides) {
        std::string o(to_string(k));
        for (auto& c : o)
            c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        out += "expect " + std::string(to_string(p)) + " " + o + "\n";
    }
    return out;
}

void validate(const Scenario& s) {
    std::set<Tid> known = {0};
    bool open = false;
    auto check = [&](Tid t, std::size_t i) {
        if (!known.count(t))
            throw ScenarioError("step " + std::to_string(i) + " uses " + tid_str(t) + " before it is spawned");
    };
    for (std::size_t i = 0; i < s.steps.size(); ++i) {
        std::visit(overloaded{
                       [&](const steps::Spawn& x) {
                           check(x.from, i);
                           if (!known.insert(x.tid).second)
                               throw ScenarioError("step " + std::to_string(i) + " spawns " + tid_str(x.tid) + " twice");
                       },
                       [&](const steps::Interleave& x) {
                           if (x.begin == open)
                               throw ScenarioError("step " + std::to_string(i) + ": unbalanced interleave");
                           open = x.begin;
                       },
                       [&](const steps::Sys& x) {
                           check(x.tid, i);
                           if (auto* c = std::get_if<sys::Clone>(&x.call); c && c->new_tid)
                               known.insert(c->new_tid);
                       },
                       [&](const auto& x) { check(x.tid, i); },
                   },
                   s.steps[i]);
    }
    if (open)
        throw ScenarioError("interleave begin without end");
}

}  // namespace pkusim
