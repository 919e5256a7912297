#include "pkusim/image.hpp"

#include <algorithm>
#include <cstring>

namespace pkusim::image {

namespace {

void le32(Bytes& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
        b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

// xor ecx,ecx; xor edx,edx; mov eax,v; wrpkru; cmp eax,v; je +1; int3
void gate(Bytes& b, std::uint32_t v) {
    b.insert(b.end(), {0x31, 0xC9, 0x31, 0xD2, 0xB8});
    le32(b, v);
    b.insert(b.end(), {0x0F, 0x01, 0xEF, 0x3D});
    le32(b, v);
    b.insert(b.end(), {0x74, 0x01, 0xCC});
}

Mapping make_mapping(SimState& s, Addr start, Permissions perms, ProtectionKey key, const Bytes& content) {
    Mapping m;
    m.start = start;
    m.length = std::max<std::size_t>(kPageSize, (content.size() + kPageSize - 1) / kPageSize * kPageSize);
    m.perms = perms;
    m.pkey = key;
    m.backing = Backing{Backing::Kind::Anonymous, s.new_object(m.length), 0};
    std::copy(content.begin(), content.end(), s.objects[m.backing.id].begin());
    return m;
}

}  // namespace

Bytes t_code_bytes(PkruValue locked) {
    Bytes b;
    gate(b, 0);
    // mov rbx, [0x200000]
    b.insert(b.end(), {0x48, 0x8B, 0x1C, 0x25});
    le32(b, static_cast<std::uint32_t>(kTData));
    b.insert(b.end(), 8, 0x90);
    gate(b, locked.bits());
    b.push_back(0xC3);
    return b;
}

Bytes special_page_code() { return {0x0F, 0x01, 0xEE, 0xCC}; }

ImageInfo load_standard_image(SimState& s) {
    ImageInfo info;
    ProtectionKey tk = s.trusted_key;
    s.allocated_keys[tk.id] = true;
    info.locked = PkruValue::locking(tk);
    info.unlocked = PkruValue(0);
    info.gate_sites = {kEntryWrpkru, kExitWrpkru};
    info.secret = {'S', 'E', 'C', 'R', 'E', 'T', '!', '!'};

    Permissions rx = Permissions::parse("r-x");
    Permissions rw = Permissions::parse("rw-");

    s.space.insert(make_mapping(s, kTCode, rx, tk, t_code_bytes(info.locked)));
    s.space.insert(make_mapping(s, kTData, rw, tk, info.secret));

    Bytes ucode = {0xE8};
    le32(ucode, static_cast<std::uint32_t>(kEntryGate - kUReturn));
    ucode.insert(ucode.end(), 0x40, 0x90);
    s.space.insert(make_mapping(s, kUCode, rx, {}, ucode));

    s.space.insert(make_mapping(s, kUData, rw, {}, {}));

    Bytes lib(0x1004, 0x90);
    const std::uint8_t func[] = {0xB8, 0x01, 0x00, 0x00, 0x00, 0xC3};
    const std::uint8_t xrstor[] = {0x0F, 0xAE, 0x2F, 0xC3};
    const std::uint8_t load[] = {0x48, 0x8B, 0x1F, 0xC3};
    std::memcpy(lib.data(), func, sizeof func);
    std::memcpy(lib.data() + 0x100, xrstor, sizeof xrstor);
    std::memcpy(lib.data() + (kLibLoad - kULib), load, sizeof load);
    s.space.insert(make_mapping(s, kULib, rx, {}, lib));

    s.space.insert(make_mapping(s, kUStack, rw, {}, {}));

    s.proc_self_mem = s.new_file("/proc/self/mem", {}, true);
    s.new_file("/usr/lib/libbenign.so",
               {0xB8, 0x02, 0x00, 0x00, 0x00, 0x05, 0x03, 0x00, 0x00, 0x00, 0x90, 0x90, 0x90, 0x90, 0xC3}, false);

    ThreadState t0;
    t0.tid = 0;
    t0.regs.rip = kUCode;
    t0.regs[Reg::Rsp] = kStackTop;
    t0.pkru = info.locked;
    s.threads.push_back(t0);
    return info;
}

void map_special_page(SimState& s, const ImageInfo& info) {
    s.space.remove(info.special_page, info.special_page + kPageSize);
    s.space.insert(make_mapping(s, info.special_page, Permissions::parse("r-x"), {}, special_page_code()));
}

}  // namespace pkusim::image
