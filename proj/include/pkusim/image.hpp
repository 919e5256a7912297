#pragma once

// The process image every scenario starts from: a trusted component T with
// its call gates and data M_T, and an untrusted component U with code, a
// small library, data and stack.
//
//   0x100000  T code   r-x key 1   entry gate, T body, exit gate
//   0x200000  M_T      rw- key 1   secret bytes
//   0x300000  U code   r-x         call entry_gate; nops
//   0x400000  U data   rw-         xrstor save area at +0
//   0x500000  U lib    r-x         +0 mov eax,1; ret
//                                  +0x100 xrstor [rdi]; ret
//                                  +0x1000 mov rbx,[rdi]; ret
//   0x600000  U stack  rw-         rsp = 0x601000
//   0x700000  special  r-x         rdpkru; int3 (mapped by the sandbox loader)

#include <set>

#include "pkusim/machine.hpp"

namespace pkusim::image {

inline constexpr Addr kTCode = 0x100000;
inline constexpr Addr kTData = 0x200000;
inline constexpr Addr kUCode = 0x300000;
inline constexpr Addr kUData = 0x400000;
inline constexpr Addr kULib = 0x500000;
inline constexpr Addr kUStack = 0x600000;
inline constexpr Addr kSpecialPage = 0x700000;

inline constexpr Addr kEntryGate = kTCode;
inline constexpr Addr kEntryWrpkru = kTCode + 9;
inline constexpr Addr kTBody = kTCode + 20;
inline constexpr Addr kTSyscallSite = kTCode + 28;
inline constexpr Addr kExitGate = kTCode + 36;
inline constexpr Addr kExitWrpkru = kTCode + 45;

inline constexpr Addr kUReturn = kUCode + 5;
inline constexpr Addr kLibFunc = kULib;
inline constexpr Addr kLibXrstor = kULib + 0x100;
inline constexpr Addr kLibLoad = kULib + 0x1000;
inline constexpr Addr kStackTop = kUStack + kPageSize;

/// Steps from the first U instruction into the T body, and for a full
/// U -> T -> U round trip ending at kUReturn.
inline constexpr int kStepsToTBody = 7;
inline constexpr int kStepsRoundTrip = 23;

struct ImageInfo {
    Addr t_code = kTCode;
    Addr t_code_len = kPageSize;
    Addr t_data = kTData;
    Addr t_data_len = kPageSize;
    Addr special_page = kSpecialPage;
    std::set<Addr> gate_sites;
    PkruValue locked;    // U running, M_T inaccessible
    PkruValue unlocked;  // T running
    Bytes secret;
};

/// Populates an empty state with the standard image and thread t0.
ImageInfo load_standard_image(SimState& state);

/// Code of the special page: rdpkru; int3.
Bytes special_page_code();

/// Maps the special page (the sandbox loader's job).
void map_special_page(SimState& state, const ImageInfo& info);

Bytes t_code_bytes(PkruValue locked);

}  // namespace pkusim::image
