#include <doctest.h>

#include <random>

#include "capsule/image.hpp"
#include "capsule/inspector.hpp"
#include "rig.hpp"

using namespace capsule;
using namespace capsule::inspector;
using capsule::testing::Rig;

namespace {

bool naive_has(const std::vector<uint8_t>& v) {
  for (size_t i = 0; i + 2 < v.size(); ++i)
    if (v[i] == 0x0F && v[i + 1] == 0x01 && v[i + 2] == 0xEF) return true;
  return false;
}

// Runs the embedded routine over `bytes` placed in the rig's data page.
uint64_t run_routine(const std::vector<uint8_t>& bytes) {
  Rig r;
  r.load(std::string(routine_asm()));
  r.m.raw_write(page_addr(Rig::kData), bytes);
  auto& ctx = r.m.thread(r.t);
  ctx.reg(isa::kRsi) = page_addr(Rig::kData);
  ctx.reg(isa::kRdx) = bytes.size();
  r.enter();
  r.run(200000);
  REQUIRE(ctx.mode == Mode::Host);
  REQUIRE(ctx.rip == page_addr(Rig::kStub) + 1);
  return ctx.reg(isa::kRax);
}

EnclaveSource simple(const std::string& code) {
  EnclaveSource s;
  s.name = "t";
  s.code = code;
  s.ecalls = {"run"};
  return s;
}

}  // namespace

TEST_CASE("lifecycle transitions") {
  using L = Lifecycle;
  CHECK(legal_transition(L::UninspectedRw, L::UnderInspectionRo));
  CHECK(legal_transition(L::UnderInspectionRo, L::ExecutableRx));
  CHECK(legal_transition(L::UnderInspectionRo, L::UninspectedRw));
  CHECK_FALSE(legal_transition(L::UninspectedRw, L::ExecutableRx));
  CHECK_FALSE(legal_transition(L::ExecutableRx, L::UninspectedRw));
  CHECK_FALSE(legal_transition(L::ExecutableRx, L::UnderInspectionRo));
  CHECK(to_string(L::ExecutableRx) == "executable-RX");
}

TEST_CASE("the routine itself is free of the pattern") {
  CHECK_FALSE(naive_has(routine_bytes()));
  CHECK(find_routine(routine_bytes()) == 0u);
}

TEST_CASE("routine agrees with the naive search when run on the machine") {
  std::mt19937_64 rng(5);
  static const uint8_t alphabet[] = {0x0F, 0x01, 0xEF, 0x0F, 0x33};
  int found = 0;
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<uint8_t> v(1 + rng() % 48);
    for (auto& b : v) b = alphabet[rng() % 5];
    bool want = naive_has(v);
    found += want;
    CHECK(run_routine(v) == (want ? 0u : 1u));
  }
  CHECK(found > 5);
  CHECK(run_routine({0x0F, 0x0F, 0x01, 0xEF}) == 0);
  CHECK(run_routine({0x0F, 0x01, 0x0F, 0x01, 0xEF}) == 0);
  CHECK(run_routine({0x0F, 0x01, 0x01, 0xEF}) == 1);
  CHECK(run_routine({}) == 1);
}

TEST_CASE("reachability on a five-instruction toy") {
  // entry: movi r8, target ; jmpr r8 ; nop ; target: (routine stand-in) eexit
  auto ind = isa::assemble("movi r8, target\njmpr r8\nnop\ntarget:\nnop\neexit\n", 0x100);
  CHECK_FALSE(reachable(ind.bytes, 0x100, 0x100, ind.labels.at("target")));
  auto dir = isa::assemble("movi r8, 0\njz target\nnop\ntarget:\nnop\neexit\n", 0x100);
  CHECK(reachable(dir.bytes, 0x100, 0x100, dir.labels.at("target")));
  auto fall = isa::assemble("nop\nnop\ntarget:\nnop\neexit\n", 0x100);
  CHECK(reachable(fall.bytes, 0x100, 0x100, fall.labels.at("target")));
  auto past = isa::assemble("nop\neexit\ntarget:\nnop\n", 0x100);
  CHECK_FALSE(reachable(past.bytes, 0x100, 0x100, past.labels.at("target")));
  CHECK(reachable(past.bytes, 0x100, 0x100, 0x100));  // routine at entry itself
}

TEST_CASE("static inspection of built images") {
  const std::string ok = "run:\n  mov rbx, rcx\n  eexit\n";
  {
    auto b = build_image(simple(ok), 0x1000);
    auto r = static_inspect(b.image);
    CHECK(r.status == StaticResult::Status::Ok);
    CHECK(reachability_check(b.image, r.routine_addr) == Reachability::Ok);
  }
  {
    auto b = build_image(simple("run:\n  wrpkru\n" + ok.substr(5)), 0x1000);
    auto r = static_inspect(b.image);
    CHECK(r.status == StaticResult::Status::WrpkruFound);
    REQUIRE(r.hits.size() == 1);
    CHECK(r.hits[0] == b.symbols.at("t:run"));
  }
  {
    auto s = simple(ok);
    s.placement = RoutinePlacement::Omitted;
    CHECK(static_inspect(build_image(s, 0x1000).image).status == StaticResult::Status::MissingRoutine);
  }
  {
    auto s = simple(ok);
    s.placement = RoutinePlacement::IndirectOnly;
    auto b = build_image(s, 0x1000);
    auto r = static_inspect(b.image);
    REQUIRE(r.status == StaticResult::Status::Ok);
    CHECK(reachability_check(b.image, r.routine_addr) == Reachability::Unreachable);
  }
  {
    auto s = simple(ok);
    s.placement = RoutinePlacement::AtEntry;
    auto b = build_image(s, 0x1000);
    auto r = static_inspect(b.image);
    REQUIRE(r.status == StaticResult::Status::Ok);
    CHECK(r.routine_addr == b.image.entry);
    CHECK(reachability_check(b.image, r.routine_addr) == Reachability::Ok);
  }
}

TEST_CASE("static inspection joins adjacent code pages") {
  auto b = build_image(simple("run:\n  mov rbx, rcx\n  eexit\n.page\n.zero 4094\n.byte 0x0f, 0x01\n.byte 0xef\n"),
                       0x1000);
  auto r = static_inspect(b.image);
  CHECK(r.status == StaticResult::Status::WrpkruFound);
  REQUIRE(r.hits.size() == 1);
  CHECK(r.hits[0] % kPageSize == kPageSize - 2);
}

TEST_CASE("masked pcl pages are not statically scanned") {
  auto s = simple("");
  s.ecalls = {"run"};
  s.pcl_code = "run:\n  wrpkru\n  mov rbx, rcx\n  eexit\n";
  s.pcl_mask = 0x5A;
  auto b = build_image(s, 0x1000);
  CHECK(static_inspect(b.image).status == StaticResult::Status::Ok);
  bool saw_pcl = false;
  for (const auto& p : b.image.pages)
    if (p.role == PageRole::PclCode) {
      saw_pcl = true;
      CHECK_FALSE(naive_has(p.bytes));
    }
  CHECK(saw_pcl);
}

TEST_CASE("image layout and symbols") {
  auto s = simple("run:\n  mov rbx, rcx\n  eexit\n");
  s.tcs = 3;
  s.rwx_pages = 2;
  s.data_pages = 1;
  auto b = build_image(s, 0x2000);
  CHECK(b.symbols.at("t.rwx") == b.symbols.at("self.rwx"));
  CHECK(b.symbols.at("t:run") >= b.symbols.at("t.code"));
  int tls = 0, ssa = 0, rwx = 0;
  for (const auto& p : b.image.pages) {
    tls += p.role == PageRole::Tls;
    ssa += p.role == PageRole::Ssa;
    rwx += p.role == PageRole::RwxCode;
  }
  CHECK(tls == 3);
  CHECK(ssa == 3);
  CHECK(rwx == 2);
  CHECK(b.symbols.at("t.ssa2") == b.symbols.at("self.ssa2"));
  CHECK(b.symbols.at("self.ssa0") == b.symbols.at("self.tls0") + kPageSize);
  CHECK_THROWS(build_image(simple("run:\n  jmp nowhere\n"), 0x2000));
}
