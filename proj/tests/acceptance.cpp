// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "capsule/edl.hpp"
#include "capsule/inspector.hpp"
#include "capsule/runtime.hpp"
#include "capsule/scan.hpp"
#include "capsule/scenario.hpp"

using namespace capsule;
namespace sc = capsule::scenario;

namespace {

struct Outcome {
  bool pass = true;
  std::string note;
  void fail(const std::string& why) {
    if (pass) note = why;
    pass = false;
  }
};

const sc::Scenario* find(const std::vector<sc::Scenario>& c, const std::string& name) {
  for (const auto& s : c)
    if (s.name == name) return &s;
  return nullptr;
}

// --- 1. attack matrix -------------------------------------------------------

Outcome attack_matrix() {
  Outcome o;
  auto corpus = sc::builtin_corpus();
  auto t0 = std::chrono::steady_clock::now();
  int a = 0, b = 0;
  for (const auto& s : corpus) {
    auto r = sc::run(s).report;
    if (s.name[0] == 'A') {
      ++a;
      if (r.verdict != "blocked") o.fail(s.name + " verdict " + r.verdict);
      if (s.expect.reason.empty() || r.reason != s.expect.reason) o.fail(s.name + " reason " + r.reason);
    } else {
      ++b;
    }
    if (!r.matches) o.fail(s.name + " does not match its expectation");
  }
  // B5 aborts only without the kernel patch.
  if (const auto* b5 = find(corpus, "B5")) {
    auto patched = *b5;
    patched.patched_kernel = true;
    auto r = sc::run(patched).report;
    if (r.verdict != "passed") o.fail("B5 on the patched kernel: " + r.verdict);
  } else {
    o.fail("no B5");
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (a < 12) o.fail("only " + std::to_string(a) + " attack scenarios");
  if (b != 5) o.fail(std::to_string(b) + " benign scenarios");
  if (secs >= 10.0) o.fail("took " + std::to_string(secs) + " s");
  if (o.pass) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%d attack + %d benign scenarios in %.2f s", a, b, secs);
    o.note = buf;
  }
  return o;
}

// --- 2. scanner oracle ------------------------------------------------------

// Start offsets (relative to the page) of every 0F 01 EF that ends inside
// `page`, searching carry ++ page.
std::vector<int64_t> naive_hits(const std::vector<uint8_t>& carry, const std::vector<uint8_t>& page) {
  std::vector<uint8_t> all(carry);
  all.insert(all.end(), page.begin(), page.end());
  std::vector<int64_t> out;
  for (size_t i = 0; i + 2 < all.size(); ++i)
    if (all[i] == 0x0F && all[i + 1] == 0x01 && all[i + 2] == 0xEF && i + 2 >= carry.size())
      out.push_back(static_cast<int64_t>(i) - static_cast<int64_t>(carry.size()));
  return out;
}

Outcome scanner_oracle() {
  Outcome o;
  std::mt19937_64 rng(2024);
  static const uint8_t pat[] = {0x0F, 0x01, 0xEF};
  int spans = 0, with_hits = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<uint8_t> prev(kPageSize), page(kPageSize);
    // Biased alphabet so partial patterns are common.
    for (auto* v : {&prev, &page})
      for (auto& x : *v) x = rng() % 4 == 0 ? pat[rng() % 3] : static_cast<uint8_t>(rng());
    int plants = static_cast<int>(rng() % 3);
    for (int p = 0; p < plants; ++p) {
      size_t at = rng() % (kPageSize - 2);
      for (int k = 0; k < 3; ++k) page[at + k] = pat[k];
    }
    if (trial % 3 == 0) {  // span the seam: 1 or 2 bytes in the previous page
      int before = 1 + static_cast<int>(rng() % 2);
      for (int k = 0; k < 3; ++k) {
        if (k < before)
          prev[kPageSize - before + k] = pat[k];
        else
          page[k - before] = pat[k];
      }
      ++spans;
    }
    std::vector<uint8_t> carry(prev.end() - 2, prev.end());
    auto want = naive_hits(carry, page);
    auto got = inspector::scan_page(page, carry);
    with_hits += !want.empty();
    if (got.hits != want || got.clean != want.empty()) {
      o.fail("disagreement at trial " + std::to_string(trial));
      break;
    }
  }
  if (o.pass) o.note = "10000 pages, " + std::to_string(spans) + " planted seam spans, " + std::to_string(with_hits) +
                       " pages with hits, 0 disagreements";
  return o;
}

// --- 3. per-step W^X and soundness sweep ------------------------------------

Outcome sweep_every_step() {
  Outcome o;
  sc::RunOptions opt;
  opt.sweep_every_step = true;
  uint64_t sweeps = 0;
  for (const auto& s : sc::builtin_corpus()) {
    auto r = sc::run(s, opt).report;
    sweeps += r.step_sweeps;
    if (r.step_sweeps == 0 && r.steps > 0) o.fail(s.name + " was not swept");
    if (r.step_sweep_failures != 0) o.fail(s.name + ": " + std::to_string(r.step_sweep_failures) + " failing sweeps");
    if (r.illegal_transitions != 0) o.fail(s.name + ": illegal lifecycle transition");
  }
  if (o.pass) o.note = std::to_string(sweeps) + " sweeps, no W+X page and no executable 0F 01 EF";
  return o;
}

// --- 4. PKRU confinement ----------------------------------------------------

Outcome pkru_confinement() {
  Outcome o;
  uint64_t inspections = 0;
  for (const auto& s : sc::builtin_corpus()) {
    auto r = sc::run(s).report;
    inspections += r.counters.inspections;
    if (!r.pkru_audit.empty()) o.fail(s.name + ": " + r.pkru_audit.front());
    if (!r.secret_confined) o.fail(s.name + ": seal key leaked into enclave memory");
  }
  if (inspections == 0) o.fail("no inspection entry was exercised");
  if (o.pass) o.note = "audit clean; " + std::to_string(inspections) + " inspection entries ran with SSA on key 0";
  return o;
}

// --- 5. event counts on B2 --------------------------------------------------

Outcome event_counts() {
  Outcome o;
  auto corpus = sc::builtin_corpus();
  const auto* b2 = find(corpus, "B2");
  if (!b2) {
    o.fail("no B2");
    return o;
  }
  auto r = sc::run(*b2).report;
  // depth 8: one top-level ECALL plus 8 nested ones, and 8 OCALLs.
  const uint64_t entries = 9, ocalls = 8;
  // Each ECALL-level entry: restrict + restore, one TF set, one trap, one seal,
  // one verify. Each OCALL return re-enters: one more restrict/restore pair,
  // TF set, trap and verify, but no new seal.
  struct Row {
    const char* name;
    uint64_t got, want;
  } rows[] = {
      {"pkru_writes", r.counters.pkru_writes, 2 * entries + 2 * ocalls},
      {"tf_sets", r.counters.tf_sets, entries + ocalls},
      {"traps", r.counters.traps, entries + ocalls},
      {"seals", r.counters.seals, entries},
      {"verifies", r.counters.verifies, entries + ocalls},
      {"ecalls", r.counters.ecalls, entries},
      {"ocalls", r.counters.ocalls, ocalls},
  };
  std::string line;
  for (const auto& row : rows) {
    if (row.got != row.want)
      o.fail(std::string(row.name) + " " + std::to_string(row.got) + " != " + std::to_string(row.want));
    line += std::string(line.empty() ? "" : " ") + row.name + "=" + std::to_string(row.got);
  }
  if (r.verdict != "passed") o.fail("B2 verdict " + r.verdict);
  if (o.pass) o.note = line;
  return o;
}

// --- 6. seal robustness -----------------------------------------------------

Outcome seal_robustness() {
  Outcome o;
  Machine m;
  Capsule cap(m, CapsuleConfig{99});
  int t = cap.add_host_thread();
  uint64_t rsp = cap.stack_top(t) - 512;
  std::mt19937_64 rng(6);
  for (int i = 0; i < 10000 && o.pass; ++i) {
    uint64_t x = rng(), key = rng();
    if (seal_sp(seal_sp(x, key), key) != x) o.fail("involution broke");
    uint64_t rbp = x;
    m.raw_set_u64(rsp, seal_sp(rsp, key));
    m.raw_set_u64(rsp + 8, seal_sp(rbp, key));
    if (!verify_sp(m, rsp, rbp, key)) o.fail("genuine seal rejected");
    // The adversary does not know `key` and replaces exactly one slot.
    uint64_t slot = rsp + 8 * (rng() % 2);
    uint64_t old = m.raw_u64(slot);
    uint64_t forged = rng() % 2 ? rng() : (slot == rsp ? rsp : rbp);  // random or plaintext
    if (forged == old) forged ^= 1;
    m.raw_set_u64(slot, forged);
    if (verify_sp(m, rsp, rbp, key)) o.fail("forgery accepted at trial " + std::to_string(i));
  }
  if (o.pass) o.note = "10000 pairs; involution holds, every single-slot forgery rejected";
  return o;
}

// --- 7. marshaling fuzz -----------------------------------------------------

struct Generated {
  std::string edl;
  std::string code;
  std::vector<ArgValue> args;
  std::vector<edl::Param> params;
  bool returns = false;
};

// A random declaration plus generic enclave code for it:
//   scalars      -> added to the return value
//   in buffers   -> bytes added to the return value, then overwritten in place
//   in,out       -> bytes added, then complemented
//   out          -> bytes checked for zero (adds 2^40 if not), then filled with 0x11*(i+1)
Generated generate(std::mt19937_64& rng) {
  Generated g;
  int np = 1 + static_cast<int>(rng() % 6);
  g.returns = rng() % 4 != 0;
  std::vector<int> size_scalars;
  std::vector<uint64_t> values(np);
  std::vector<bool> is_buf(np);
  for (int i = 0; i < np; ++i) is_buf[i] = i > 0 && rng() % 2;
  for (int i = 0; i < np; ++i)
    if (!is_buf[i]) size_scalars.push_back(i);
  for (int i = 0; i < np; ++i) {
    edl::Param p;
    p.name = "p" + std::to_string(i);
    if (!is_buf[i]) {
      p.type = "uint64_t";
      values[i] = rng() % 3 == 0 ? rng() % 41 : rng();
    } else {
      p.type = "uint8_t";
      p.kind = edl::ParamKind::Buffer;
      p.dir = static_cast<edl::Direction>(rng() % 3);
      bool by_ref = rng() % 2;
      if (by_ref) {
        int s = size_scalars[rng() % size_scalars.size()];
        p.size.ref = "p" + std::to_string(s);
      } else {
        p.size.literal = rng() % 41;
      }
    }
    g.params.push_back(p);
  }
  // Referenced scalars must be small lengths.
  for (const auto& p : g.params)
    if (p.kind == edl::ParamKind::Buffer && !p.size.is_literal()) {
      int s = std::stoi(p.size.ref.substr(1));
      if (values[s] > 40) values[s] %= 41;
    }
  auto size_of = [&](const edl::Param& p) {
    return p.size.is_literal() ? *p.size.literal : values[std::stoi(p.size.ref.substr(1))];
  };

  g.edl = "trusted {\n  public " + std::string(g.returns ? "uint64_t" : "void") + " g(";
  for (int i = 0; i < np; ++i) {
    const auto& p = g.params[i];
    if (i) g.edl += ", ";
    if (p.kind == edl::ParamKind::Scalar)
      g.edl += "uint64_t " + p.name;
    else
      g.edl += "[" + std::string(edl::to_string(p.dir)) + ", size=" + p.size.text() + "] uint8_t* " + p.name;
  }
  g.edl += ");\n};\n";

  std::string c = "g:\n  movi rax, 0\n  movi rbx, 0\n";
  for (int i = 0; i < np; ++i) {
    const auto& p = g.params[i];
    std::string slot = "[rsi+" + std::to_string(8 * i) + "]";
    if (p.kind == edl::ParamKind::Scalar) {
      c += "  load r9, " + slot + "\n  add rax, r9\n";
      g.args.push_back(ArgValue{values[i], {}});
      continue;
    }
    uint64_t n = size_of(p);
    ArgValue a;
    if (p.dir != edl::Direction::Out) {
      a.bytes.resize(n);
      for (auto& b : a.bytes) b = static_cast<uint8_t>(rng());
    }
    g.args.push_back(a);
    std::string l = "b" + std::to_string(i);
    c += "  load r8, " + slot + "\n  movi rdx, " + std::to_string(n) + "\n" + l + ":\n  cmpi rdx, 0\n  jz " + l +
         "_done\n  loadb r9, [r8+0]\n";
    switch (p.dir) {
      case edl::Direction::In:
        c += "  add rax, r9\n  movi r9, 0xaa\n";
        break;
      case edl::Direction::InOut:
        c += "  add rax, r9\n  movi rdi, 0xff\n  xor r9, rdi\n";
        break;
      case edl::Direction::Out:
        c += "  add rbx, r9\n  movi r9, " + std::to_string((0x11 * (i + 1)) & 0xff) + "\n";
        break;
    }
    c += "  storeb [r8+0], r9\n  addi r8, 1\n  addi rdx, -1\n  jmp " + l + "\n" + l + "_done:\n";
  }
  c += "  cmpi rbx, 0\n  jz fin\n  movi r9, 0x10000000000\n  add rax, r9\nfin:\n";
  if (g.returns) c += "  store [rsi+" + std::to_string(8 * np) + "], rax\n";
  c += "  movi rax, 0\n  mov rbx, rcx\n  eexit\n";
  g.code = c;
  return g;
}

Outcome marshaling_fuzz() {
  Outcome o;
  std::mt19937_64 rng(7);
  Machine m;
  Capsule cap(m, CapsuleConfig{7});
  int t = cap.add_host_thread();
  int dirs[3] = {0, 0, 0};
  for (int trial = 0; trial < 1000 && o.pass; ++trial) {
    auto g = generate(rng);
    edl::InterfaceSpec spec;
    try {
      spec = edl::parse(g.edl);
    } catch (const edl::EdlError& e) {
      o.fail("generated EDL rejected: " + std::string(e.what()));
      break;
    }
    if (spec.ecalls.size() != 1 || spec.ecalls[0].params != g.params) {
      o.fail("parsed declaration differs at trial " + std::to_string(trial));
      break;
    }
    EnclaveSource src;
    src.name = "g";
    src.code = g.code;
    src.ecalls = {"g"};
    int h = cap.create_enclave(src, spec);
    auto r = cap.ecall_sync(t, h, "g", g.args);
    cap.destroy_enclave(h);
    if (!r.ok) {
      o.fail("call failed at trial " + std::to_string(trial) + ": " + r.error);
      break;
    }
    uint64_t want = 0;
    for (size_t i = 0; i < g.params.size(); ++i) {
      const auto& p = g.params[i];
      const auto& a = g.args[i];
      if (p.kind == edl::ParamKind::Scalar) {
        want += a.scalar;
        continue;
      }
      ++dirs[static_cast<int>(p.dir)];
      const auto& back = r.buffers.at(i);
      switch (p.dir) {
        case edl::Direction::In:
          for (auto b : a.bytes) want += b;
          if (!back.empty()) o.fail("in buffer copied back");
          break;
        case edl::Direction::InOut: {
          for (auto b : a.bytes) want += b;
          std::vector<uint8_t> flipped(a.bytes);
          for (auto& b : flipped) b = static_cast<uint8_t>(~b);
          if (back != flipped) o.fail("in,out buffer mismatch at trial " + std::to_string(trial));
          break;
        }
        case edl::Direction::Out: {
          uint64_t n = p.size.is_literal() ? *p.size.literal : g.args[*spec.ecalls[0].param_index(p.size.ref)].scalar;
          if (back != std::vector<uint8_t>(n, static_cast<uint8_t>((0x11 * (i + 1)) & 0xff)))
            o.fail("out buffer mismatch at trial " + std::to_string(trial));
          break;
        }
      }
    }
    if (g.returns) {
      if (r.ret != want) o.fail("return mismatch at trial " + std::to_string(trial) + " (out slot not zero?)");
    } else if (r.ret) {
      o.fail("void call returned a value");
    }
  }
  // user_check in any position is a parse error.
  int rejected = 0;
  for (int trial = 0; trial < 200; ++trial) {
    int np = 1 + static_cast<int>(rng() % 4);
    int at = static_cast<int>(rng() % np);
    std::string text = rng() % 2 ? "trusted {\n  public void f(" : "untrusted {\n  void f(";
    for (int i = 0; i < np; ++i) {
      if (i) text += ", ";
      text += i == at ? "[user_check] void* u" + std::to_string(i) : "uint64_t s" + std::to_string(i);
    }
    text += ");\n};\n";
    try {
      edl::parse(text);
    } catch (const edl::EdlError& e) {
      rejected += e.kind() == edl::EdlError::Kind::UserCheckRejected;
    }
  }
  if (rejected != 200) o.fail(std::to_string(200 - rejected) + " user_check declarations accepted");
  if (o.pass)
    o.note = "1000 declarations (in=" + std::to_string(dirs[0]) + " out=" + std::to_string(dirs[1]) +
             " in,out=" + std::to_string(dirs[2]) + " buffers); 200/200 user_check rejected";
  return o;
}

// --- 8. XFRM gate -----------------------------------------------------------

const char* kXrstorEdl = "trusted { public uint64_t x([in, size=8] uint8_t* img); };\n";
const char* kXrstorCode = R"(
x:
  load r8, [rsi+0]
  rdpkru
  mov r9, rax
  xrstor r8
  rdpkru
  sub rax, r9
  store [rsi+8], rax
  movi rax, 0
  mov rbx, rcx
  eexit
)";

Outcome xfrm_gate() {
  Outcome o;
  std::mt19937_64 rng(8);
  auto spec = edl::parse(kXrstorEdl);
  Machine m;
  Capsule cap(m, CapsuleConfig{8});
  int t = cap.add_host_thread();
  EnclaveSource src;
  src.name = "x";
  src.code = kXrstorCode;
  src.ecalls = {"x"};
  for (int i = 0; i < 100; ++i) {
    src.xfrm = rng() | kXfrmPkruBit;
    try {
      cap.create_enclave(src, spec);
      o.fail("created with xfrm bit 9 set");
      break;
    } catch (const CapsuleError& e) {
      if (e.reason() != reason::kXfrm) o.fail(std::string("wrong reason ") + e.reason());
    }
  }
  src.xfrm = 0x3;
  int h = cap.create_enclave(src, spec);
  uint32_t host_pkru = m.thread(t).pkru.value();
  for (int i = 0; i < 1000 && o.pass; ++i) {
    ArgValue img;
    uint64_t v = rng();
    for (int k = 0; k < 8; ++k) img.bytes.push_back(static_cast<uint8_t>(v >> (8 * k)));
    auto r = cap.ecall_sync(t, h, "x", {img});
    if (!r.ok) o.fail("call failed: " + r.error);
    else if (r.ret != 0u) o.fail("xrstor changed pkru at trial " + std::to_string(i));
    if (m.thread(t).pkru.value() != host_pkru) o.fail("host pkru changed");
  }
  if (!cap.pkru_audit().empty()) o.fail(cap.pkru_audit().front());
  if (o.pass) o.note = "100/100 bit-9 creations refused; 1000 payloads left pkru unchanged";
  return o;
}

// --- 9. determinism ---------------------------------------------------------

Outcome determinism() {
  Outcome o;
  size_t bytes = 0;
  for (const auto& s : sc::builtin_corpus()) {
    auto a = sc::run(s);
    auto b = sc::run(s);
    bytes += a.trace.size();
    if (a.trace != b.trace) o.fail(s.name + " traces differ");
    if (sc::report_json(a.report) != sc::report_json(b.report)) o.fail(s.name + " reports differ");
  }
  if (o.pass) o.note = "every scenario twice; " + std::to_string(bytes) + " trace bytes identical";
  return o;
}

// --- 10. golden EDL ---------------------------------------------------------

Outcome golden_edl() {
  Outcome o;
  auto spec = edl::parse("trusted {\n  public void ecall_pointer_in_size([in, size=len] void *ptr, size_t len);\n};\n");
  if (spec.ecalls.size() != 1 || !spec.ocalls.empty()) {
    o.fail("wrong block contents");
    return o;
  }
  const auto& f = spec.ecalls[0];
  if (f.name != "ecall_pointer_in_size" || !f.is_public || f.returns_value()) o.fail("wrong function header");
  if (f.params.size() != 2) {
    o.fail("wrong parameter count");
    return o;
  }
  const auto& ptr = f.params[0];
  const auto& len = f.params[1];
  if (ptr.name != "ptr" || ptr.kind != edl::ParamKind::Buffer || ptr.dir != edl::Direction::In ||
      ptr.size.ref != "len" || ptr.type != "void")
    o.fail("ptr parameter");
  if (len.name != "len" || len.kind != edl::ParamKind::Scalar || len.type != "size_t") o.fail("len parameter");
  auto d = edl::gen_edge(spec, 16 * kPageSize).at(0);
  // header 32, slots for ptr and len, no return slot, body align8(len)
  if (d.slot_offsets != std::vector<uint64_t>{0, 8}) o.fail("slot offsets");
  if (d.ret_offset) o.fail("void function got a return slot");
  if (d.fixed_size != 48) o.fail("fixed size " + std::to_string(d.fixed_size));
  if (d.buffers.size() != 1 || d.buffers[0].slot_offset != 0 || d.buffers[0].dir != edl::Direction::In)
    o.fail("buffer record");
  for (uint64_t n : {0, 1, 8, 10, 4000}) {
    std::vector<uint64_t> sizes{n};
    if (d.frame_size(sizes) != 48 + ((n + 7) / 8) * 8) o.fail("frame size for len=" + std::to_string(n));
  }
  if (d.frame_size_expr() != "48+align8(len)") o.fail("size expression " + d.frame_size_expr());
  if (o.pass) o.note = "frame = 32 header + 2 slots + align8(len), no return slot";
  return o;
}

}  // namespace

int main() {
  struct Criterion {
    const char* title;
    std::function<Outcome()> check;
  } criteria[] = {
      {"attack matrix", attack_matrix},
      {"scanner oracle equivalence", scanner_oracle},
      {"per-step W^X and soundness sweep", sweep_every_step},
      {"PKRU confinement", pkru_confinement},
      {"boundary event counts", event_counts},
      {"seal robustness", seal_robustness},
      {"marshaling fuzz", marshaling_fuzz},
      {"XFRM gate", xfrm_gate},
      {"determinism", determinism},
      {"golden EDL", golden_edl},
  };
  int failed = 0;
  int n = 0;
  for (const auto& c : criteria) {
    ++n;
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o.fail(std::string("exception: ") + e.what());
    }
    failed += !o.pass;
    std::printf("criterion %2d %s: %s (%s)\n", n, o.pass ? "PASS" : "FAIL", c.title, o.note.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
