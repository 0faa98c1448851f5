#include <doctest.h>

#include <algorithm>

#include "capsule/isa.hpp"

using namespace capsule::isa;

TEST_CASE("encoded lengths by opcode class") {
  CHECK(length_of(static_cast<uint8_t>(Op::Movi)) == 10);
  CHECK(length_of(static_cast<uint8_t>(Op::Mov)) == 3);
  CHECK(length_of(static_cast<uint8_t>(Op::Load)) == 7);
  CHECK(length_of(static_cast<uint8_t>(Op::Addi)) == 6);
  CHECK(length_of(static_cast<uint8_t>(Op::Jz)) == 5);
  CHECK(length_of(static_cast<uint8_t>(Op::Jmpr)) == 2);
  CHECK(length_of(static_cast<uint8_t>(Op::Eexit)) == 1);
  CHECK(length_of(0x0F) == 3);
  CHECK_FALSE(length_of(0x00).has_value());
  CHECK_FALSE(length_of(0x60).has_value());
}

TEST_CASE("wrpkru keeps its x86 encoding") {
  auto p = assemble("wrpkru\nrdpkru\n", 0);
  CHECK(p.bytes == std::vector<uint8_t>{0x0F, 0x01, 0xEF, 0x0F, 0x01, 0xEE});
}

TEST_CASE("encode/decode round trip for every opcode") {
  for (Op op : {Op::Nop, Op::Movi, Op::Mov, Op::Load, Op::Store, Op::Loadb, Op::Storeb, Op::Add, Op::Sub,
                Op::Xor, Op::Addi, Op::Cmp, Op::Cmpi, Op::Jmp, Op::Jz, Op::Jnz, Op::Jb, Op::Jmpr, Op::Eexit,
                Op::Ocall, Op::Oresume, Op::Xrstor, Op::Xsave, Op::Probe, Op::Popfq, Op::Eenter, Op::Wrpkru,
                Op::Rdpkru}) {
    Instruction in;
    in.op = op;
    in.r1 = kR8;
    in.r2 = kRsi;
    in.imm = -12;
    std::vector<uint8_t> buf;
    encode(in, buf);
    auto out = decode(buf);
    REQUIRE(out.has_value());
    CHECK(out->op == op);
    CHECK(out->length == buf.size());
    CHECK(buf.size() == *length_of(buf[0]));
  }
}

TEST_CASE("truncated and invalid encodings do not decode") {
  std::vector<uint8_t> movi{static_cast<uint8_t>(Op::Movi), 0, 1, 2};
  CHECK_FALSE(decode(movi).has_value());
  std::vector<uint8_t> bad{0x0F, 0x01, 0x00};
  CHECK_FALSE(decode(bad).has_value());
  std::vector<uint8_t> badreg{static_cast<uint8_t>(Op::Mov), 12, 0};
  CHECK_FALSE(decode(badreg).has_value());
}

TEST_CASE("jumps are relative to the next instruction") {
  auto p = assemble("top:\n  nop\n  jmp top\n  jz done\ndone:\n  eexit\n", 0x1000);
  CHECK(p.labels.at("top") == 0x1000);
  CHECK(p.labels.at("done") == 0x1000 + 1 + 5 + 5);
  auto j = decode(std::span(p.bytes).subspan(1));
  REQUIRE(j);
  CHECK(j->imm == -6);
  auto z = decode(std::span(p.bytes).subspan(6));
  REQUIRE(z);
  CHECK(z->imm == 0);
}

TEST_CASE("symbols, label references and directives") {
  auto p = assemble("movi rax, host.x\nmovi rbx, @here\nhere:\n.byte 1, 2\n.quad 0x0102\n.align 8\n.zero 3\n", 0x100,
                    {{"host.x", 0xABCD}});
  auto a = decode(p.bytes);
  REQUIRE(a);
  CHECK(a->imm == 0xABCD);
  auto b = decode(std::span(p.bytes).subspan(10));
  REQUIRE(b);
  CHECK(b->imm == 0x114);
  CHECK(p.bytes[20] == 1);
  CHECK(p.bytes[22] == 0x02);
  // 20 + 2 + 8 = 30 -> align to 0x100+32, then 3 zero bytes
  CHECK(p.bytes.size() == 32 + 3);
}

TEST_CASE(".page pads to the next page boundary") {
  auto p = assemble("nop\n.page\nlater:\nnop\n", 0x2000);
  CHECK(p.labels.at("later") == 0x3000);
}

TEST_CASE("assembler errors carry line numbers") {
  try {
    assemble("nop\n  bogus rax\n", 0);
    FAIL("expected AsmError");
  } catch (const AsmError& e) {
    CHECK(e.line() == 2);
  }
  CHECK_THROWS_AS(assemble("jmp nowhere\n", 0), AsmError);
  CHECK_THROWS_AS(assemble("a:\na:\n", 0), AsmError);
  CHECK_THROWS_AS(assemble("mov rax\n", 0), AsmError);
  CHECK_THROWS_AS(assemble("load rax, rbx\n", 0), AsmError);
}

TEST_CASE("comments and case") {
  auto p = assemble("  MOVI rax, 5 ; five\n# whole line\n", 0);
  CHECK(p.bytes.size() == 10);
}

TEST_CASE("branch and terminator classes") {
  CHECK(is_branch(Op::Jz));
  CHECK(is_branch(Op::Jmp));
  CHECK_FALSE(is_branch(Op::Jmpr));
  CHECK(is_terminator(Op::Eexit));
  CHECK(is_terminator(Op::Jmpr));
  CHECK(is_terminator(Op::Oresume));
  CHECK_FALSE(is_terminator(Op::Add));
}

TEST_CASE("disassembly is readable") {
  auto p = assemble("load r8, [rsi+16]\n", 0);
  auto i = decode(p.bytes);
  REQUIRE(i);
  CHECK(disassemble(*i) == "load r8, [rsi+16]");
}
