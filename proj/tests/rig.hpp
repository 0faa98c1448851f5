#pragma once

#include <string>

#include "capsule/isa.hpp"
#include "capsule/machine.hpp"

namespace capsule::testing {

// One host thread, one single-TCS enclave (id 0, key 1) and a host stub
// page holding EENTER at offset 0.
struct Rig {
  static constexpr uint64_t kStub = 0x10, kStack = 0x100, kSig = 0x108;
  static constexpr uint64_t kCode = 0x1000, kData = 0x1001, kTls = 0x1002, kSsa = 0x1003;
  static constexpr uint64_t kHostRw = 0x20, kKey3 = 0x21;

  Machine m;
  int t = 0;
  int e = 0;

  explicit Rig(uint64_t xfrm = 0x3, bool patched = true) : m(MachineConfig{patched}) {
    m.map_page(kStub, perm::RX, 0, kHostOwner).bytes[0] = static_cast<uint8_t>(isa::Op::Eenter);
    m.map_page(kStack, perm::RW, 0, kHostOwner);
    m.map_page(kSig, perm::RW, 0, kHostOwner);
    m.map_page(kHostRw, perm::RW, 0, kHostOwner);
    m.map_page(kKey3, perm::RW, 3, kHostOwner);
    for (auto [p, pm] : {std::pair{kCode, perm::RX}, {kData, perm::RW}, {kTls, perm::RW}, {kSsa, perm::RW}})
      m.map_page(p, pm, 1, 0);
    Tcs tcs;
    tcs.ssa_page = kSsa;
    tcs.tls_page = kTls;
    e = m.add_enclave(xfrm, page_addr(kCode), {kCode, kData, kTls, kSsa}, {tcs});
    t = m.add_thread(page_addr(kSig + 1));
    auto& ctx = m.thread(t);
    ctx.rip = page_addr(kStub);
    ctx.reg(isa::kRsp) = page_addr(kStack + 1) - 64;
    ctx.reg(isa::kRbp) = page_addr(kStack + 1) - 48;
  }

  void load(const std::string& text) {
    auto p = isa::assemble(text, page_addr(kCode));
    m.raw_write(page_addr(kCode), p.bytes);
  }

  void enter(uint32_t pkru = Pkru::only(1).value()) {
    m.thread(t).pkru = Pkru(pkru);
    m.eenter(t, e, 0);
  }

  // Steps until the thread leaves enclave mode.
  StepOutcome run(int limit = 1000) {
    StepOutcome o = StepOutcome::Retired;
    for (int i = 0; i < limit && m.thread(t).mode == Mode::Enclave; ++i) o = m.step_enclave(t);
    return o;
  }
};


}  // namespace capsule::testing
