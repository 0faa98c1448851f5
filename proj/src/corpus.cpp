// The built-in attack (A*) and benign (B*) scenarios.

#include <cstdio>

#include "capsule/isa.hpp"
#include "capsule/scenario.hpp"

namespace capsule::scenario {

namespace {

using nlohmann::json;

constexpr uint64_t kMask = 0x5a5a5a5a5a5a5a5aULL;

const char* kExit = "  movi rax, 0\n  mov rbx, rcx\n  eexit\n";

// Emits stores that place `bytes` at [base + off] (base already in `base`).
// Immediates are masked so the generated bytes never appear in plain code.
// Clobbers r9 and rdx.
std::string emit_bytes(const std::string& base, int64_t off, std::vector<uint8_t> bytes) {
  while (bytes.size() % 8) bytes.push_back(0x90);  // nop padding
  std::string out = "  movi rdx, " + std::to_string(kMask) + "\n";
  for (size_t i = 0; i < bytes.size(); i += 8) {
    uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<uint64_t>(bytes[i + b]) << (8 * b);
    char line[96];
    std::snprintf(line, sizeof line, "  movi r9, 0x%llx\n  xor r9, rdx\n  store [%s+%lld], r9\n",
                  static_cast<unsigned long long>(v ^ kMask), base.c_str(), static_cast<long long>(off + i));
    out += line;
  }
  return out;
}

std::vector<uint8_t> asm_bytes(const std::string& text) { return isa::assemble(text, 0).bytes; }

EnclaveManifest enclave(const std::string& name, const std::string& edl, const std::string& code) {
  EnclaveManifest m;
  m.source.name = name;
  m.edl = edl;
  m.source.code = code;
  return m;
}

Call call(const std::string& enc, const std::string& fn, json args = json::object()) {
  Call c;
  c.enclave = enc;
  c.fn = fn;
  c.args = std::move(args);
  return c;
}

Scenario base(const std::string& name, const std::string& desc, const std::string& verdict,
              const std::string& why = "") {
  Scenario s;
  s.name = name;
  s.description = desc;
  s.seed = 7;
  s.expect.verdict = verdict;
  s.expect.reason = why;
  return s;
}

const char* kRunEdl = "trusted { public uint64_t run(); };";

const std::string kEchoEdl =
    "trusted {\n"
    "  public uint64_t ecall_echo([in, size=len] uint8_t* src, [out, size=len] uint8_t* dst, size_t len);\n"
    "};\n";

const std::string kEchoCode = R"(
ecall_echo:
  load r8, [rsi+0]
  load r9, [rsi+8]
  load rdx, [rsi+16]
echo_loop:
  cmpi rdx, 0
  jz echo_done
  loadb rax, [r8+0]
  storeb [r9+0], rax
  addi r8, 1
  addi r9, 1
  addi rdx, -1
  jmp echo_loop
echo_done:
  load rax, [rsi+16]
  store [rsi+24], rax
)" + std::string(kExit);

const std::string kNestEdl =
    "trusted { public uint64_t ecall_nest(uint64_t depth); };\n"
    "untrusted { uint64_t ocall_nest(uint64_t depth); };\n";

// depth 0 returns 0; otherwise returns whatever ocall_nest(depth) returned.
const std::string kNestCode = R"(
ecall_nest:
  load r8, [rsi+0]
  cmpi r8, 0
  jnz nest_call
  movi rax, 0
  store [rsi+8], rax
)" + std::string(kExit) + R"(
nest_call:
  store [rdi+32], r8
  movi rdx, 0
  mov r9, rsi
  mov rsi, rdi
  mov rbx, rcx
  ocall
  load rax, [rsi+40]
  store [r9+8], rax
)" + std::string(kExit);

Scenario nest_scenario(const std::string& name, const std::string& desc, bool patched) {
  Scenario s = base(name, desc, patched ? "passed" : "aborted", patched ? "" : reason::kSignalDelivery);
  s.patched_kernel = patched;
  s.enclaves.push_back(enclave("n", kNestEdl, kNestCode));
  Call c = call("n", "ecall_nest", {{"depth", 8}});
  if (patched) c.expect_ret = 8;
  s.threads.push_back({0, "", {c}});
  if (patched)
    s.expect_counters = {{"pkru_writes", 34}, {"traps", 17}, {"tf_sets", 17}, {"seals", 9}, {"verifies", 17}};
  return s;
}

// Single-ECALL attack scaffold: enclave "x" exporting `run`.
Scenario attack(const std::string& name, const std::string& desc, const std::string& why,
                const std::string& code) {
  Scenario s = base(name, desc, "blocked", why);
  s.enclaves.push_back(enclave("x", kRunEdl, code));
  s.threads.push_back({0, "", {call("x", "run")}});
  return s;
}

}  // namespace

std::vector<Scenario> builtin_corpus() {
  std::vector<Scenario> out;

  out.push_back(attack("A1", "enclave loads from the host secret page", reason::kAccessError,
                       "run:\n  movi r8, host.secret\n  load rax, [r8+0]\n  store [rsi+0], rax\n" +
                           std::string(kExit)));

  out.push_back(attack("A2", "enclave stores into host data", reason::kAccessError,
                       "run:\n  movi r8, host.data\n  movi r9, 0x4141414141414141\n  store [r8+0], r9\n" +
                           std::string(kExit)));

  {
    Scenario s = attack("A3", "enclave probes host pages with fault-suppressing reads", reason::kProbeDenied,
                        R"(
run:
  movi rax, 0
  movi r8, host.secret
  probe r9, [r8+0]
  add rax, r9
  movi r8, host.data
  probe r9, [r8+0]
  add rax, r9
  movi r8, host.stub
  probe r9, [r8+0]
  add rax, r9
  movi r8, self.data
  probe r9, [r8+0]
  add rax, r9
  store [rsi+0], rax
  mov rbx, rcx
  eexit
)");
    s.threads[0].calls[0].expect_ret = 3;  // every host page faults, the own page does not
    out.push_back(s);
  }

  out.push_back(attack("A4", "EEXIT to a host gadget instead of the return location", reason::kControlFlow,
                       "run:\n  movi rax, 0\n  movi rbx, host.gadget\n  eexit\n"));

  out.push_back(attack("A5", "EEXIT with a forged host stack", reason::kStackIntegrity,
                       "run:\n  mov rsp, rdi\n  addi rsp, 64\n  mov rbp, rsp\n" + std::string(kExit)));

  out.push_back(attack("A6", "WRPKRU shipped in plain code", reason::kInspectionFailure,
                       "run:\n  movi rax, 0\n  wrpkru\n" + std::string(kExit)));

  {
    auto payload = asm_bytes("wrpkru\nmov rbx, rcx\neexit\n");
    Scenario s = attack("A7", "WRPKRU generated at run time on an RWX page", reason::kWrpkruFound,
                        "run:\n  movi r8, self.rwx\n" + emit_bytes("r8", 0, payload) + "  movi rax, 0\n  jmpr r8\n");
    s.enclaves[0].source.rwx_pages = 1;
    out.push_back(s);
  }

  {
    // 0F 01 at the last two bytes of the first page, EF opening the second.
    auto tail = asm_bytes("mov rbx, rcx\neexit\n");
    std::vector<uint8_t> second{0xEF};
    second.insert(second.end(), tail.begin(), tail.end());
    Scenario s = attack("A7b", "WRPKRU split across two generated pages", reason::kWrpkruFound,
                        "run:\n  movi r8, self.rwx\n" + emit_bytes("r8", 4088, {0x90, 0x90, 0x90, 0x90, 0x90, 0x90, 0x0F, 0x01}) +
                            emit_bytes("r8", 4096, second) + "  movi rax, 0\n  mov r9, r8\n  addi r9, 4094\n  jmpr r9\n");
    s.enclaves[0].source.rwx_pages = 2;
    out.push_back(s);
  }

  out.push_back(attack("A8", "XRSTOR of an all-access PKRU image, then a host read", reason::kAccessError,
                       "run:\n  movi r8, self.data\n  xrstor r8\n  movi r8, host.secret\n  load rax, [r8+0]\n" +
                           std::string(kExit)));

  {
    Scenario s = attack("A8b", "enclave requests the PKRU state component", reason::kXfrm, "run:\n" + std::string(kExit));
    s.enclaves[0].source.xfrm = 0x203;
    out.push_back(s);
  }

  {
    // Thread 0 generates clean code (returns 7), which triggers a runtime
    // inspection. While that inspection is interrupted, thread 1 tries to
    // corrupt the interrupted TCS's SSA frame.
    auto payload = asm_bytes("movi rax, 7\nstore [rsi+0], rax\nmovi rax, 0\nmov rbx, rcx\neexit\n");
    Scenario s = base("A9", "SSA corruption during an interrupted inspection", "blocked", reason::kAccessError);
    std::string code = "run:\n  movi r8, self.rwx\n" + emit_bytes("r8", 0, payload) + "  jmpr r8\n" + R"(
smash:
  movi r8, self.ssa1
  movi r9, 0x4242424242424242
smash_loop:
  store [r8+80], r9
  jmp smash_loop
)";
    auto m = enclave("x", "trusted { public uint64_t run(); public void smash(); };", code);
    m.source.tcs = 3;
    m.source.rwx_pages = 1;
    s.enclaves.push_back(m);
    Call c = call("x", "run");
    c.expect_ret = 7;
    s.threads.push_back({0, "", {c}});
    s.threads.push_back({0, "inspect", {call("x", "smash")}});
    s.aex.push_back({0, 0, "inspection", 40});
    out.push_back(s);
  }

  {
    // Thread 0 sends 8 bytes through ocall_log; thread 1 rewrites the
    // parameter buffer while the host function runs.
    Scenario s = base("A10", "OCALL argument rewritten after copy-in", "blocked", reason::kTocttou);
    std::string code = R"(
send:
  mov r8, rdi
  movi r9, 0x0807060504030201
  store [r8+56], r9
  mov r9, r8
  addi r9, 56
  store [r8+32], r9
  movi r9, 8
  store [r8+40], r9
  movi rdx, 0
  mov rsi, r8
  mov rbx, rcx
  ocall
)" + std::string(kExit) + R"(
race:
  movi r8, self.pb0
  movi r9, 0x6666666666666666
  movi rdx, 64
race_loop:
  store [r8+96], r9
  addi rdx, -1
  cmpi rdx, 0
  jnz race_loop
)" + std::string(kExit);
    s.enclaves.push_back(enclave("x",
                                 "trusted { public uint64_t send(); public void race(); };\n"
                                 "untrusted { uint64_t ocall_log([in, size=len] uint8_t* buf, size_t len); };\n",
                                 code));
    s.threads.push_back({0, "", {call("x", "send")}});
    s.threads.push_back({0, "copy-in", {call("x", "race")}});
    Pin p;
    p.thread = 1;
    p.after = "copy-in";
    p.count = 40;
    s.pins.push_back(p);
    s.expect_host_log = {"ocall_log:0102030405060708"};
    out.push_back(s);
  }

  out.push_back(attack("A11", "EDL with a user_check pointer", reason::kUserCheck, "run:\n" + std::string(kExit)));
  out.back().enclaves[0].edl = "trusted { public uint64_t run([user_check] uint8_t* p); };";

  {
    Scenario s = base("B1", "echo ECALL", "passed");
    s.enclaves.push_back(enclave("e", kEchoEdl, kEchoCode));
    Call c = call("e", "ecall_echo", {{"src", "48656c6c6f2c2043617073756c65"}, {"len", 14}});
    c.expect_ret = 14;
    c.expect_out["dst"] = "48656c6c6f2c2043617073756c65";
    s.threads.push_back({0, "", {c}});
    out.push_back(s);
  }

  out.push_back(nest_scenario("B2", "nested ECALL/OCALL to depth 8", true));

  {
    Scenario s = base("B3", "masked PCL section decrypted and inspected at load", "passed");
    auto m = enclave("p", "trusted { public uint64_t ecall_sum(uint64_t a, uint64_t b); };", "");
    m.source.pcl_code = R"(
ecall_sum:
  load rax, [rsi+0]
  load r8, [rsi+8]
  add rax, r8
  store [rsi+16], rax
)" + std::string(kExit);
    m.source.pcl_mask = 0x5A;
    s.enclaves.push_back(m);
    Call c = call("p", "ecall_sum", {{"a", 40}, {"b", 2}});
    c.expect_ret = 42;
    s.threads.push_back({0, "", {c}});
    out.push_back(s);
  }

  {
    Scenario s = base("B4", "two enclaves, each audited against the other's parameter buffer", "passed");
    const char* spin = "trusted { public uint64_t spin(uint64_t n); };";
    const std::string spin_code = R"(
spin:
  load r8, [rsi+0]
spin_loop:
  cmpi r8, 0
  jz spin_done
  addi r8, -1
  jmp spin_loop
spin_done:
  load rax, [rsi+0]
  store [rsi+8], rax
)" + std::string(kExit);
    s.enclaves.push_back(enclave("a", spin, spin_code));
    s.enclaves.push_back(enclave("b", spin, spin_code));
    Call ca = call("a", "spin", {{"n", 20}});
    ca.expect_ret = 20;
    Call cb = call("b", "spin", {{"n", 20}});
    cb.expect_ret = 20;
    s.threads.push_back({0, "", {ca}});
    s.threads.push_back({0, "", {cb}});
    s.audits = {{0, "b.pb0", true}, {0, "a.pb0", false}, {1, "a.pb0", true}, {1, "b.pb0", false}};
    out.push_back(s);
  }

  out.push_back(nest_scenario("B5", "B2 replayed under an unpatched kernel", false));
  return out;
}

}  // namespace capsule::scenario
