#include "pkusim/machine.hpp"

#include <algorithm>
#include <stdexcept>

#include "pkusim/x86.hpp"

namespace pkusim {

Permissions Permissions::parse(std::string_view s) {
    Permissions p;
    if (s == "none" || s == "---")
        return p;
    for (char c : s) {
        switch (c) {
        case 'r': p.read = true; break;
        case 'w': p.write = true; break;
        case 'x': p.exec = true; break;
        case '-': break;
        default: throw std::invalid_argument("bad permission string: " + std::string(s));
        }
    }
    return p;
}

std::string Permissions::str() const {
    std::string s;
    s += read ? 'r' : '-';
    s += write ? 'w' : '-';
    s += exec ? 'x' : '-';
    return s;
}

// --- AddressSpace -----------------------------------------------------------

const Mapping* AddressSpace::find(Addr a) const {
    auto it = maps_.upper_bound(a);
    if (it == maps_.begin())
        return nullptr;
    --it;
    return it->second.contains(a) ? &it->second : nullptr;
}

Mapping* AddressSpace::find(Addr a) {
    return const_cast<Mapping*>(std::as_const(*this).find(a));
}

std::vector<const Mapping*> AddressSpace::overlapping(Addr lo, Addr hi) const {
    std::vector<const Mapping*> out;
    if (lo >= hi)
        return out;
    auto it = maps_.upper_bound(lo);
    if (it != maps_.begin())
        --it;
    for (; it != maps_.end() && it->first < hi; ++it)
        if (it->second.overlaps(lo, hi))
            out.push_back(&it->second);
    return out;
}

bool AddressSpace::fully_mapped(Addr lo, Addr hi) const {
    Addr cur = lo;
    for (const Mapping* m : overlapping(lo, hi)) {
        if (m->start > cur)
            return false;
        cur = m->end();
    }
    return cur >= hi;
}

void AddressSpace::split_at(Addr a) {
    Mapping* m = find(a);
    if (!m || m->start == a)
        return;
    Mapping right = *m;
    right.start = a;
    right.length = m->end() - a;
    right.backing.offset += a - m->start;
    m->length = a - m->start;
    maps_.emplace(a, right);
}

std::vector<Mapping*> AddressSpace::isolate(Addr lo, Addr hi) {
    split_at(lo);
    split_at(hi);
    std::vector<Mapping*> out;
    for (auto it = maps_.lower_bound(lo); it != maps_.end() && it->first < hi; ++it)
        out.push_back(&it->second);
    return out;
}

void AddressSpace::insert(Mapping m) {
    if (!overlapping(m.start, m.end()).empty())
        throw std::logic_error("overlapping mapping insert");
    maps_.emplace(m.start, m);
}

std::vector<Mapping> AddressSpace::remove(Addr lo, Addr hi) {
    std::vector<Mapping> removed;
    for (Mapping* m : isolate(lo, hi))
        removed.push_back(*m);
    for (const Mapping& m : removed)
        maps_.erase(m.start);
    return removed;
}

void AddressSpace::coalesce() {
    for (auto it = maps_.begin(); it != maps_.end();) {
        auto next = std::next(it);
        if (next == maps_.end())
            break;
        Mapping& a = it->second;
        const Mapping& b = next->second;
        bool same = a.end() == b.start && a.perms == b.perms && a.pkey == b.pkey && a.share == b.share &&
                    a.backing.kind == b.backing.kind && a.backing.id == b.backing.id &&
                    a.backing.offset + a.length == b.backing.offset &&
                    a.monitor_marked_nonexec == b.monitor_marked_nonexec && a.exec_only == b.exec_only;
        if (same) {
            a.length += b.length;
            maps_.erase(next);
        } else {
            it = next;
        }
    }
}

Addr AddressSpace::find_free(Addr hint, Addr len) const {
    Addr cur = page_ceil(hint);
    for (;;) {
        auto hits = overlapping(cur, cur + len);
        if (hits.empty())
            return cur;
        cur = page_ceil(hits.back()->end());
    }
}

// --- registers ---------------------------------------------------------------

namespace {
constexpr std::array<std::string_view, kNumGprs> kRegNames64 = {"rax", "rcx", "rdx", "rbx",
                                                                "rsp", "rbp", "rsi", "rdi"};
constexpr std::array<std::string_view, kNumGprs> kRegNames32 = {"eax", "ecx", "edx", "ebx",
                                                                "esp", "ebp", "esi", "edi"};
}  // namespace

std::string_view reg_name(Reg r) { return kRegNames64[static_cast<int>(r)]; }

std::optional<Reg> parse_reg(std::string_view name) {
    for (int i = 0; i < kNumGprs; ++i)
        if (name == kRegNames64[i] || name == kRegNames32[i])
            return static_cast<Reg>(i);
    return std::nullopt;
}

bool ThreadState::breakpoint_at(Addr a, std::size_t slot_limit) const {
    std::size_t n = std::min(slot_limit, debug_regs.size());
    for (std::size_t i = 0; i < n; ++i)
        if (debug_regs[i].enabled && debug_regs[i].addr == a)
            return true;
    return false;
}

// --- SimState ----------------------------------------------------------------

ThreadState* SimState::thread(Tid tid) {
    for (auto& t : threads)
        if (t.tid == tid)
            return &t;
    return nullptr;
}

const ThreadState* SimState::thread(Tid tid) const {
    for (const auto& t : threads)
        if (t.tid == tid)
            return &t;
    return nullptr;
}

std::size_t SimState::live_threads() const {
    return static_cast<std::size_t>(std::count_if(threads.begin(), threads.end(), [](const auto& t) { return t.alive; }));
}

ObjectId SimState::new_object(std::size_t size) {
    ObjectId id = next_object_++;
    objects[id] = Bytes(size, 0);
    return id;
}

InodeId SimState::new_file(std::string path, Bytes bytes, bool is_mutable) {
    InodeId id = next_inode_++;
    files[id] = FileObject{std::move(bytes), is_mutable};
    path_table[std::move(path)] = id;
    return id;
}

void SimState::log(Tid tid, std::string event, std::string decision, std::string reason) {
    event_log.push_back(LogEvent{next_seq_++, tid, std::move(event), std::move(decision), std::move(reason)});
}

std::optional<Backing> SimState::identity(Addr a) const {
    const Mapping* m = space.find(a);
    if (!m)
        return std::nullopt;
    Backing b = m->backing;
    b.offset += a - m->start;
    return b;
}

std::optional<std::uint8_t> SimState::peek(Addr a) const {
    auto id = identity(a);
    if (!id)
        return std::nullopt;
    const Bytes* store = nullptr;
    if (id->kind == Backing::Kind::Anonymous) {
        auto it = objects.find(id->id);
        if (it != objects.end())
            store = &it->second;
    } else {
        auto it = files.find(id->id);
        if (it != files.end())
            store = &it->second.bytes;
    }
    if (!store || id->offset >= store->size())
        return std::uint8_t{0};
    return (*store)[id->offset];
}

std::optional<Bytes> SimState::peek_range(Addr a, std::size_t len) const {
    Bytes out;
    out.reserve(len);
    for (std::size_t i = 0; i < len; ++i) {
        auto b = peek(a + i);
        if (!b)
            return std::nullopt;
        out.push_back(*b);
    }
    return out;
}

bool SimState::poke(Addr a, std::span<const std::uint8_t> bytes) {
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        Addr at = a + i;
        Mapping* m = space.find(at);
        if (!m)
            return false;
        if (m->file_backed() && m->share == ShareMode::Private) {
            // Copy-on-write: the private mapping stops tracking the file.
            const auto& file = files.at(m->backing.id).bytes;
            ObjectId obj = new_object(m->length);
            Bytes& dst = objects[obj];
            for (Addr off = 0; off < m->length; ++off) {
                Addr src = m->backing.offset + off;
                dst[off] = src < file.size() ? file[src] : 0;
            }
            m->backing = Backing{Backing::Kind::Anonymous, obj, 0};
        }
        Backing id = m->backing;
        id.offset += at - m->start;
        Bytes& store = id.kind == Backing::Kind::Anonymous ? objects[id.id] : files[id.id].bytes;
        if (id.offset >= store.size())
            store.resize(id.offset + 1, 0);
        store[id.offset] = bytes[i];
    }
    return true;
}

// --- memory access -----------------------------------------------------------

AccessResult mem_access(SimState& state, Tid tid, Addr addr, AccessKind kind, Route route,
                        std::span<std::uint8_t> buf) {
    const ThreadState* t = state.thread(tid);
    // Check every byte first so a faulting access has no partial effect.
    for (std::size_t i = 0; i < buf.size(); ++i) {
        const Mapping* m = state.space.find(addr + i);
        if (!m)
            return {AccessResult::Status::PageFault, addr + i};
        if (route == Route::KernelDirect)
            continue;
        bool page_ok = kind == AccessKind::Read ? m->perms.read : m->perms.write;
        if (!page_ok)
            return {AccessResult::Status::PageFault, addr + i};
        PkruValue pkru = t ? t->pkru : PkruValue();
        Access acc = kind == AccessKind::Read ? Access::Read : Access::Write;
        if (!pkru_allows(pkru, m->pkey, acc))
            return {AccessResult::Status::PkuFault, addr + i};
    }
    if (kind == AccessKind::Read) {
        for (std::size_t i = 0; i < buf.size(); ++i)
            buf[i] = *state.peek(addr + i);
    } else {
        state.poke(addr, buf);
    }
    if (state.observer)
        state.observer->on_mem_access(state, tid, addr, buf.size(), kind, route);
    return {};
}

// --- step --------------------------------------------------------------------

std::string_view to_string(StepResult::Kind k) {
    switch (k) {
    case StepResult::Kind::Advanced: return "advanced";
    case StepResult::Kind::ExecFault: return "exec-fault";
    case StepResult::Kind::BreakpointTrap: return "breakpoint";
    case StepResult::Kind::PkuFault: return "pku-fault";
    case StepResult::Kind::Terminated: return "terminated";
    }
    return "?";
}

Bytes fetch_window(const SimState& state, Addr rip, std::size_t max, bool ignore_perms) {
    Bytes out;
    for (std::size_t i = 0; i < max; ++i) {
        const Mapping* m = state.space.find(rip + i);
        if (!m || (!ignore_perms && !m->fetchable()))
            break;
        out.push_back(*state.peek(rip + i));
    }
    return out;
}

StepResult step(SimState& state, Tid tid) {
    ThreadState* t = state.thread(tid);
    if (!t || !t->alive)
        return StepResult::terminated("thread not runnable");
    Addr rip = t->regs.rip;
    if (t->breakpoint_at(rip, state.debug_slot_count))
        return StepResult::breakpoint(rip);
    Bytes window = fetch_window(state, rip, x86::kMaxInstructionLength, false);
    if (window.empty())
        return StepResult::exec_fault(rip);
    auto decoded = x86::decode(window);
    if (auto* err = std::get_if<x86::DecodeError>(&decoded)) {
        if (err->kind == x86::DecodeError::Kind::Truncated && window.size() < x86::kMaxInstructionLength)
            return StepResult::exec_fault(rip + window.size());
        return StepResult::terminated("unsupported instruction");
    }
    const auto& ins = std::get<x86::Instruction>(decoded);
    auto r = x86::execute(state, tid, ins);
    switch (r.kind) {
    case x86::ExecResult::Kind::Advanced: return StepResult::advanced();
    case x86::ExecResult::Kind::PkuFault: return StepResult::pku_fault(r.addr);
    case x86::ExecResult::Kind::PageFault: return StepResult::terminated("segmentation fault");
    case x86::ExecResult::Kind::Terminated: return StepResult::terminated(r.reason);
    }
    return StepResult::terminated("unreachable");
}

}  // namespace pkusim
