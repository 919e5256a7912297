#pragma once

// Decoder and executor for the small x86-64 subset the simulator runs.
//
// Supported encodings (no prefixes other than REX.W = 0x48):
//
//   Nop        90
//   MovRegImm  B8+r id                 mov r32, imm32 (zero-extends)
//   MovRegReg  [48] 89 /r, [48] 8B /r  mod = 11
//   MovRegMem  [48] 8B /r              mod != 11
//   MovMemReg  [48] 89 /r              mod != 11
//   AddRegImm  [48] 83 /0 ib, [48] 81 /0 id, 05 id
//   CmpRegImm  [48] 83 /7 ib, [48] 81 /7 id, 3D id
//   TestRegImm A9 id                   test eax, imm32
//   JmpRel     EB cb, E9 cd
//   JccRel     7x cb, 0F 8x cd         parity conditions unsupported
//   CallRel    E8 cd
//   Ret        C3
//   PushReg    50+r
//   PopReg     58+r
//   XorRegReg  [48] 31 /r              mod = 11
//   Int3       CC
//   Rdpkru     0F 01 EE
//   Wrpkru     0F 01 EF
//   Xrstor     0F AE /5                mod != 11 (mod = 11 is lfence)
//
// Memory operands use the full 32/64-bit ModRM+SIB forms without REX
// extension, including RIP-relative and SIB disp32-only addressing.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>

#include "pkusim/machine.hpp"

namespace pkusim::x86 {

/// Offset of the PKRU word inside the xrstor save area. Matches the PKRU
/// component offset of the standard (non-compacted) XSAVE layout; no other
/// component is modelled.
inline constexpr Addr kXsavePkruOffset = 0xA80;

/// XCR0/RFBM bit selecting the PKRU state component.
inline constexpr std::uint64_t kXrstorPkruBit = 1u << 9;

inline constexpr std::size_t kMaxInstructionLength = 15;

enum class Opcode {
    Nop,
    MovRegImm,
    MovRegReg,
    MovRegMem,
    MovMemReg,
    AddRegImm,
    CmpRegImm,
    TestRegImm,
    JmpRel,
    JccRel,
    CallRel,
    Ret,
    PushReg,
    PopReg,
    XorRegReg,
    Int3,
    Rdpkru,
    Wrpkru,
    Xrstor,
};

std::string_view to_string(Opcode op);

struct MemOperand {
    std::optional<Reg> base;
    std::optional<Reg> index;
    std::uint8_t scale = 1;
    std::int64_t disp = 0;
    bool rip_relative = false;

    friend bool operator==(const MemOperand&, const MemOperand&) = default;
};

struct Instruction {
    Opcode op = Opcode::Nop;
    std::uint8_t length = 0;
    bool wide = false;  // 64-bit operand size
    Reg dst = Reg::Rax;
    Reg src = Reg::Rax;
    std::int64_t imm = 0;
    std::uint8_t cond = 0;  // Jcc condition nibble
    MemOperand mem;

    /// Instructions that neither touch memory nor transfer control to an
    /// attacker-chosen target beyond a conditional branch. Used by the
    /// breach detector to tolerate validation tails after a PKRU write.
    bool is_validation() const {
        return op == Opcode::CmpRegImm || op == Opcode::TestRegImm || op == Opcode::JccRel ||
               op == Opcode::Int3;
    }
};

struct DecodeError {
    enum class Kind { Unsupported, Truncated };
    Kind kind = Kind::Unsupported;
    std::size_t needed = 0;  // for Truncated: bytes required
};

using DecodeResult = std::variant<Instruction, DecodeError>;

/// Deterministic decode of the first instruction in `bytes`.
DecodeResult decode(std::span<const std::uint8_t> bytes);

/// Length of a ModRM memory operand (modrm + sib + displacement) given the
/// bytes starting at the ModRM byte, or nullopt when more bytes are needed.
std::optional<std::size_t> modrm_operand_length(std::span<const std::uint8_t> bytes);

struct ExecResult {
    enum class Kind { Advanced, PkuFault, PageFault, Terminated };
    Kind kind = Kind::Advanced;
    Addr addr = 0;
    std::string reason;
};

/// Apply `ins` (located at the thread's rip) to the state. All memory operands
/// use the Cpu route so PKU applies to emulated code as well.
ExecResult execute(SimState& state, Tid tid, const Instruction& ins);

/// Monitor-side emulation of the instruction at the thread's rip. Bytes are
/// fetched regardless of page permissions; effects are those of execute().
ExecResult emulate_at(SimState& state, Tid tid);

Addr effective_address(const Registers& regs, const Instruction& ins);

/// Human readable form used in logs and tests.
std::string disassemble(const Instruction& ins);

}  // namespace pkusim::x86
