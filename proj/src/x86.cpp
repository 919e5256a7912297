#include "pkusim/x86.hpp"

#include <cstdio>
#include <cstring>

namespace pkusim::x86 {

std::string_view to_string(Opcode op) {
    switch (op) {
    case Opcode::Nop: return "nop";
    case Opcode::MovRegImm: return "mov-reg-imm";
    case Opcode::MovRegReg: return "mov-reg-reg";
    case Opcode::MovRegMem: return "mov-reg-mem";
    case Opcode::MovMemReg: return "mov-mem-reg";
    case Opcode::AddRegImm: return "add-reg-imm";
    case Opcode::CmpRegImm: return "cmp-reg-imm";
    case Opcode::TestRegImm: return "test-reg-imm";
    case Opcode::JmpRel: return "jmp";
    case Opcode::JccRel: return "jcc";
    case Opcode::CallRel: return "call";
    case Opcode::Ret: return "ret";
    case Opcode::PushReg: return "push";
    case Opcode::PopReg: return "pop";
    case Opcode::XorRegReg: return "xor-reg-reg";
    case Opcode::Int3: return "int3";
    case Opcode::Rdpkru: return "rdpkru";
    case Opcode::Wrpkru: return "wrpkru";
    case Opcode::Xrstor: return "xrstor";
    }
    return "?";
}

namespace {

DecodeError truncated(std::size_t needed) { return {DecodeError::Kind::Truncated, needed}; }
DecodeError unsupported() { return {DecodeError::Kind::Unsupported, 0}; }

std::int64_t read_le(std::span<const std::uint8_t> b, std::size_t at, std::size_t n, bool sign) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i)
        v |= static_cast<std::uint64_t>(b[at + i]) << (8 * i);
    if (sign && n < 8) {
        std::uint64_t sbit = 1ull << (8 * n - 1);
        if (v & sbit)
            v |= ~((sbit << 1) - 1);
    }
    return static_cast<std::int64_t>(v);
}

struct ModRm {
    std::uint8_t mod, reg, rm;
};

ModRm split(std::uint8_t b) { return {static_cast<std::uint8_t>(b >> 6), static_cast<std::uint8_t>((b >> 3) & 7), static_cast<std::uint8_t>(b & 7)}; }

// Parses the memory operand beginning at bytes[at] (the ModRM byte).
std::variant<MemOperand, DecodeError> parse_mem(std::span<const std::uint8_t> b, std::size_t at,
                                                std::size_t& len) {
    auto n = modrm_operand_length(b.subspan(at));
    if (!n)
        return truncated(at + 6);
    len = *n;
    ModRm m = split(b[at]);
    MemOperand op;
    std::size_t disp_at = at + 1;
    std::size_t disp_len = m.mod == 1 ? 1 : (m.mod == 2 ? 4 : 0);
    if (m.rm == 4) {
        ModRm sib = split(b[at + 1]);
        disp_at += 1;
        op.scale = static_cast<std::uint8_t>(1u << sib.mod);
        if (sib.reg != 4)
            op.index = static_cast<Reg>(sib.reg);
        if (sib.rm == 5 && m.mod == 0)
            disp_len = 4;
        else
            op.base = static_cast<Reg>(sib.rm);
    } else if (m.rm == 5 && m.mod == 0) {
        op.rip_relative = true;
        disp_len = 4;
    } else {
        op.base = static_cast<Reg>(m.rm);
    }
    if (disp_len)
        op.disp = read_le(b, disp_at, disp_len, true);
    return op;
}

}  // namespace

std::optional<std::size_t> modrm_operand_length(std::span<const std::uint8_t> b) {
    if (b.empty())
        return std::nullopt;
    ModRm m = split(b[0]);
    std::size_t len = 1;
    if (m.mod == 3)
        return len;
    if (m.rm == 4) {
        if (b.size() < 2)
            return std::nullopt;
        len += 1;
        if (m.mod == 0 && (b[1] & 7) == 5)
            len += 4;
    } else if (m.mod == 0 && m.rm == 5) {
        len += 4;
    }
    if (m.mod == 1)
        len += 1;
    else if (m.mod == 2)
        len += 4;
    if (b.size() < len)
        return std::nullopt;
    return len;
}

DecodeResult decode(std::span<const std::uint8_t> b) {
    if (b.empty())
        return truncated(1);
    std::size_t i = 0;
    bool wide = false;
    if (b[0] == 0x48) {
        wide = true;
        i = 1;
        if (b.size() < 2)
            return truncated(2);
    } else if ((b[0] & 0xF0) == 0x40) {
        return unsupported();
    }
    auto need = [&](std::size_t n) { return b.size() >= n; };
    Instruction ins;
    ins.wide = wide;
    std::uint8_t op = b[i];

    auto finish = [&](std::size_t len) -> DecodeResult {
        ins.length = static_cast<std::uint8_t>(len);
        return ins;
    };
    // Opcodes that do not accept REX.W in this subset.
    auto no_rex = [&]() { return !wide; };

    if (op == 0x90 && no_rex()) {
        ins.op = Opcode::Nop;
        return finish(1);
    }
    if (op >= 0xB8 && op <= 0xBF && no_rex()) {
        if (!need(5))
            return truncated(5);
        ins.op = Opcode::MovRegImm;
        ins.dst = static_cast<Reg>(op - 0xB8);
        ins.imm = read_le(b, 1, 4, false);
        return finish(5);
    }
    if (op == 0x89 || op == 0x8B || op == 0x31) {
        if (!need(i + 2))
            return truncated(i + 2);
        ModRm m = split(b[i + 1]);
        if (m.mod == 3) {
            ins.op = op == 0x31 ? Opcode::XorRegReg : Opcode::MovRegReg;
            // 89 /r: r/m <- reg ; 8B /r: reg <- r/m ; 31 /r: r/m ^= reg
            if (op == 0x8B) {
                ins.dst = static_cast<Reg>(m.reg);
                ins.src = static_cast<Reg>(m.rm);
            } else {
                ins.dst = static_cast<Reg>(m.rm);
                ins.src = static_cast<Reg>(m.reg);
            }
            return finish(i + 2);
        }
        if (op == 0x31)
            return unsupported();
        std::size_t mlen = 0;
        auto mem = parse_mem(b, i + 1, mlen);
        if (auto* e = std::get_if<DecodeError>(&mem))
            return *e;
        ins.mem = std::get<MemOperand>(mem);
        if (op == 0x8B) {
            ins.op = Opcode::MovRegMem;
            ins.dst = static_cast<Reg>(m.reg);
        } else {
            ins.op = Opcode::MovMemReg;
            ins.src = static_cast<Reg>(m.reg);
        }
        return finish(i + 1 + mlen);
    }
    if (op == 0x83 || op == 0x81) {
        std::size_t immlen = op == 0x83 ? 1 : 4;
        if (!need(i + 2))
            return truncated(i + 2);
        ModRm m = split(b[i + 1]);
        if (m.mod != 3 || (m.reg != 0 && m.reg != 7))
            return unsupported();
        if (!need(i + 2 + immlen))
            return truncated(i + 2 + immlen);
        ins.op = m.reg == 0 ? Opcode::AddRegImm : Opcode::CmpRegImm;
        ins.dst = static_cast<Reg>(m.rm);
        ins.imm = read_le(b, i + 2, immlen, true);
        return finish(i + 2 + immlen);
    }
    if (op == 0x05 || op == 0x3D || op == 0xA9) {
        if (!need(i + 5))
            return truncated(i + 5);
        ins.op = op == 0x05 ? Opcode::AddRegImm : (op == 0x3D ? Opcode::CmpRegImm : Opcode::TestRegImm);
        if (ins.op == Opcode::TestRegImm && wide)
            return unsupported();
        ins.dst = Reg::Rax;
        ins.imm = read_le(b, i + 1, 4, true);
        return finish(i + 5);
    }
    if (!no_rex())
        return unsupported();

    switch (op) {
    case 0xEB:
    case 0x70: case 0x71: case 0x72: case 0x73: case 0x74: case 0x75: case 0x76: case 0x77:
    case 0x78: case 0x79: case 0x7C: case 0x7D: case 0x7E: case 0x7F:
        if (!need(2))
            return truncated(2);
        ins.op = op == 0xEB ? Opcode::JmpRel : Opcode::JccRel;
        ins.cond = op & 0x0F;
        ins.imm = read_le(b, 1, 1, true);
        return finish(2);
    case 0xE9:
    case 0xE8:
        if (!need(5))
            return truncated(5);
        ins.op = op == 0xE9 ? Opcode::JmpRel : Opcode::CallRel;
        ins.imm = read_le(b, 1, 4, true);
        return finish(5);
    case 0xC3:
        ins.op = Opcode::Ret;
        return finish(1);
    case 0xCC:
        ins.op = Opcode::Int3;
        return finish(1);
    default:
        break;
    }
    if (op >= 0x50 && op <= 0x57) {
        ins.op = Opcode::PushReg;
        ins.src = static_cast<Reg>(op - 0x50);
        return finish(1);
    }
    if (op >= 0x58 && op <= 0x5F) {
        ins.op = Opcode::PopReg;
        ins.dst = static_cast<Reg>(op - 0x58);
        return finish(1);
    }
    if (op == 0x0F) {
        if (!need(2))
            return truncated(2);
        std::uint8_t op2 = b[1];
        if (op2 == 0x01) {
            if (!need(3))
                return truncated(3);
            if (b[2] == 0xEE) {
                ins.op = Opcode::Rdpkru;
                return finish(3);
            }
            if (b[2] == 0xEF) {
                ins.op = Opcode::Wrpkru;
                return finish(3);
            }
            return unsupported();
        }
        if (op2 == 0xAE) {
            if (!need(3))
                return truncated(3);
            ModRm m = split(b[2]);
            if (m.reg != 5 || m.mod == 3)
                return unsupported();
            std::size_t mlen = 0;
            auto mem = parse_mem(b, 2, mlen);
            if (auto* e = std::get_if<DecodeError>(&mem))
                return *e;
            ins.op = Opcode::Xrstor;
            ins.mem = std::get<MemOperand>(mem);
            return finish(2 + mlen);
        }
        if (op2 >= 0x80 && op2 <= 0x8F && op2 != 0x8A && op2 != 0x8B) {
            if (!need(6))
                return truncated(6);
            ins.op = Opcode::JccRel;
            ins.cond = op2 & 0x0F;
            ins.imm = read_le(b, 2, 4, true);
            return finish(6);
        }
    }
    return unsupported();
}

Addr effective_address(const Registers& regs, const Instruction& ins) {
    const MemOperand& m = ins.mem;
    Addr ea = static_cast<Addr>(m.disp);
    if (m.rip_relative)
        ea += regs.rip + ins.length;
    if (m.base)
        ea += regs[*m.base];
    if (m.index)
        ea += regs[*m.index] * m.scale;
    return ea;
}

namespace {

std::uint64_t mask(bool wide) { return wide ? ~0ull : 0xFFFFFFFFull; }

Flags flags_sub(std::uint64_t a, std::uint64_t b, bool wide) {
    std::uint64_t m = mask(wide);
    a &= m;
    b &= m;
    std::uint64_t r = (a - b) & m;
    std::uint64_t sign = wide ? (1ull << 63) : (1ull << 31);
    Flags f;
    f.zf = r == 0;
    f.sf = (r & sign) != 0;
    f.cf = a < b;
    f.of = (((a ^ b) & (a ^ r)) & sign) != 0;
    return f;
}

Flags flags_add(std::uint64_t a, std::uint64_t b, std::uint64_t& out, bool wide) {
    std::uint64_t m = mask(wide);
    a &= m;
    b &= m;
    std::uint64_t r = (a + b) & m;
    std::uint64_t sign = wide ? (1ull << 63) : (1ull << 31);
    Flags f;
    f.zf = r == 0;
    f.sf = (r & sign) != 0;
    f.cf = r < a;
    f.of = ((~(a ^ b) & (a ^ r)) & sign) != 0;
    out = r;
    return f;
}

Flags flags_logic(std::uint64_t r, bool wide) {
    std::uint64_t sign = wide ? (1ull << 63) : (1ull << 31);
    Flags f;
    f.zf = (r & mask(wide)) == 0;
    f.sf = (r & sign) != 0;
    return f;
}

bool condition(std::uint8_t cc, const Flags& f) {
    bool r = false;
    switch (cc >> 1) {
    case 0: r = f.of; break;                     // O
    case 1: r = f.cf; break;                     // B
    case 2: r = f.zf; break;                     // E
    case 3: r = f.cf || f.zf; break;             // BE
    case 4: r = f.sf; break;                     // S
    case 6: r = f.sf != f.of; break;             // L
    case 7: r = f.zf || (f.sf != f.of); break;   // LE
    default: break;
    }
    return (cc & 1) ? !r : r;
}

ExecResult fault_of(const AccessResult& r) {
    ExecResult e;
    e.kind = r.status == AccessResult::Status::PkuFault ? ExecResult::Kind::PkuFault : ExecResult::Kind::PageFault;
    e.addr = r.fault_addr;
    return e;
}

void set_pkru(SimState& state, ThreadState& t, PkruValue v, std::string_view cause) {
    PkruValue old = t.pkru;
    t.pkru = v;
    if (state.observer)
        state.observer->on_pkru_write(state, t.tid, old, v, cause);
}

}  // namespace

ExecResult execute(SimState& state, Tid tid, const Instruction& ins) {
    ThreadState* tp = state.thread(tid);
    if (!tp)
        return {ExecResult::Kind::Terminated, 0, "no such thread"};
    if (state.observer)
        state.observer->on_execute(state, tid, tp->regs.rip, ins);
    ThreadState& t = *tp;
    Registers& r = t.regs;
    const Addr next = r.rip + ins.length;
    auto wr = [&](Reg reg, std::uint64_t v) { r[reg] = ins.wide ? v : (v & 0xFFFFFFFFull); };

    switch (ins.op) {
    case Opcode::Nop:
        break;
    case Opcode::MovRegImm:
        r[ins.dst] = static_cast<std::uint64_t>(ins.imm) & 0xFFFFFFFFull;
        break;
    case Opcode::MovRegReg:
        wr(ins.dst, r[ins.src]);
        break;
    case Opcode::MovRegMem: {
        std::uint8_t buf[8] = {};
        std::size_t n = ins.wide ? 8 : 4;
        auto res = mem_access(state, tid, effective_address(r, ins), AccessKind::Read, Route::Cpu, std::span(buf, n));
        if (!res.ok())
            return fault_of(res);
        std::uint64_t v = 0;
        std::memcpy(&v, buf, n);
        r[ins.dst] = v;
        break;
    }
    case Opcode::MovMemReg: {
        std::uint64_t v = r[ins.src];
        std::uint8_t buf[8];
        std::memcpy(buf, &v, 8);
        std::size_t n = ins.wide ? 8 : 4;
        auto res = mem_access(state, tid, effective_address(r, ins), AccessKind::Write, Route::Cpu, std::span(buf, n));
        if (!res.ok())
            return fault_of(res);
        break;
    }
    case Opcode::AddRegImm: {
        std::uint64_t out = 0;
        r.flags = flags_add(r[ins.dst], static_cast<std::uint64_t>(ins.imm), out, ins.wide);
        wr(ins.dst, out);
        break;
    }
    case Opcode::CmpRegImm:
        r.flags = flags_sub(r[ins.dst], static_cast<std::uint64_t>(ins.imm), ins.wide);
        break;
    case Opcode::TestRegImm:
        r.flags = flags_logic(r[ins.dst] & static_cast<std::uint64_t>(ins.imm) & 0xFFFFFFFFull, false);
        break;
    case Opcode::XorRegReg: {
        std::uint64_t v = (r[ins.dst] ^ r[ins.src]) & mask(ins.wide);
        r.flags = flags_logic(v, ins.wide);
        r[ins.dst] = v;
        break;
    }
    case Opcode::JmpRel:
        r.rip = next + static_cast<Addr>(ins.imm);
        return {};
    case Opcode::JccRel:
        r.rip = condition(ins.cond, r.flags) ? next + static_cast<Addr>(ins.imm) : next;
        return {};
    case Opcode::CallRel: {
        std::uint8_t buf[8];
        std::memcpy(buf, &next, 8);
        Addr sp = r[Reg::Rsp] - 8;
        auto res = mem_access(state, tid, sp, AccessKind::Write, Route::Cpu, std::span(buf, 8));
        if (!res.ok())
            return fault_of(res);
        r[Reg::Rsp] = sp;
        r.rip = next + static_cast<Addr>(ins.imm);
        return {};
    }
    case Opcode::Ret: {
        std::uint8_t buf[8];
        auto res = mem_access(state, tid, r[Reg::Rsp], AccessKind::Read, Route::Cpu, std::span(buf, 8));
        if (!res.ok())
            return fault_of(res);
        Addr target = 0;
        std::memcpy(&target, buf, 8);
        r[Reg::Rsp] += 8;
        r.rip = target;
        return {};
    }
    case Opcode::PushReg: {
        std::uint64_t v = r[ins.src];
        std::uint8_t buf[8];
        std::memcpy(buf, &v, 8);
        Addr sp = r[Reg::Rsp] - 8;
        auto res = mem_access(state, tid, sp, AccessKind::Write, Route::Cpu, std::span(buf, 8));
        if (!res.ok())
            return fault_of(res);
        r[Reg::Rsp] = sp;
        break;
    }
    case Opcode::PopReg: {
        std::uint8_t buf[8];
        auto res = mem_access(state, tid, r[Reg::Rsp], AccessKind::Read, Route::Cpu, std::span(buf, 8));
        if (!res.ok())
            return fault_of(res);
        std::uint64_t v = 0;
        std::memcpy(&v, buf, 8);
        r[Reg::Rsp] += 8;
        r[ins.dst] = v;
        break;
    }
    case Opcode::Int3:
        return {ExecResult::Kind::Terminated, r.rip, "int3 abort"};
    case Opcode::Rdpkru:
        if ((r[Reg::Rcx] & 0xFFFFFFFFull) != 0)
            return {ExecResult::Kind::Terminated, r.rip, "rdpkru with nonzero ecx (#GP)"};
        r[Reg::Rax] = t.pkru.bits();
        r[Reg::Rdx] = 0;
        break;
    case Opcode::Wrpkru:
        if ((r[Reg::Rcx] & 0xFFFFFFFFull) != 0 || (r[Reg::Rdx] & 0xFFFFFFFFull) != 0)
            return {ExecResult::Kind::Terminated, r.rip, "wrpkru with nonzero ecx/edx (#GP)"};
        set_pkru(state, t, PkruValue(static_cast<std::uint32_t>(r[Reg::Rax])), "wrpkru");
        break;
    case Opcode::Xrstor:
        if (r[Reg::Rax] & kXrstorPkruBit) {
            std::uint8_t buf[4];
            Addr area = effective_address(r, ins) + kXsavePkruOffset;
            auto res = mem_access(state, tid, area, AccessKind::Read, Route::Cpu, std::span(buf, 4));
            if (!res.ok())
                return fault_of(res);
            std::uint32_t v = 0;
            std::memcpy(&v, buf, 4);
            set_pkru(state, t, PkruValue(v), "xrstor");
        }
        break;
    }
    r.rip = next;
    return {};
}

ExecResult emulate_at(SimState& state, Tid tid) {
    const ThreadState* t = state.thread(tid);
    if (!t)
        return {ExecResult::Kind::Terminated, 0, "no such thread"};
    Bytes window = fetch_window(state, t->regs.rip, kMaxInstructionLength, true);
    auto decoded = decode(window);
    if (std::holds_alternative<DecodeError>(decoded))
        return {ExecResult::Kind::Terminated, t->regs.rip, "unsupported instruction"};
    return execute(state, tid, std::get<Instruction>(decoded));
}

std::string disassemble(const Instruction& ins) {
    std::string s(to_string(ins.op));
    char buf[64];
    switch (ins.op) {
    case Opcode::MovRegImm:
    case Opcode::AddRegImm:
    case Opcode::CmpRegImm:
    case Opcode::TestRegImm:
        std::snprintf(buf, sizeof buf, " %s,0x%llx", std::string(reg_name(ins.dst)).c_str(),
                      static_cast<unsigned long long>(ins.imm));
        s += buf;
        break;
    case Opcode::JmpRel:
    case Opcode::JccRel:
    case Opcode::CallRel:
        std::snprintf(buf, sizeof buf, " %+lld", static_cast<long long>(ins.imm));
        s += buf;
        break;
    default:
        break;
    }
    return s;
}

}  // namespace pkusim::x86
