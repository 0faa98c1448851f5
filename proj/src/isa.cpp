#include "capsule/isa.hpp"

#include <cstdio>

namespace capsule::isa {

namespace {

constexpr std::array<std::string_view, kNumGprs> kRegNames = {
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rsp", "rbp", "r8", "r9"};

enum class Form { None, RegImm64, RegReg, RegRegDisp, RegImm32, Rel32, Reg, Sys };

Form form_of(Op op) {
  switch (op) {
    case Op::Nop:
    case Op::Eexit:
    case Op::Ocall:
    case Op::Oresume:
    case Op::Eenter:
      return Form::None;
    case Op::Movi:
      return Form::RegImm64;
    case Op::Mov:
    case Op::Add:
    case Op::Sub:
    case Op::Xor:
    case Op::Cmp:
      return Form::RegReg;
    case Op::Load:
    case Op::Store:
    case Op::Loadb:
    case Op::Storeb:
    case Op::Probe:
      return Form::RegRegDisp;
    case Op::Addi:
    case Op::Cmpi:
      return Form::RegImm32;
    case Op::Jmp:
    case Op::Jz:
    case Op::Jnz:
    case Op::Jb:
      return Form::Rel32;
    case Op::Jmpr:
    case Op::Xrstor:
    case Op::Xsave:
    case Op::Popfq:
      return Form::Reg;
    case Op::Wrpkru:
    case Op::Rdpkru:
      return Form::Sys;
  }
  return Form::None;
}

uint8_t length_of_form(Form f) {
  switch (f) {
    case Form::None: return 1;
    case Form::RegImm64: return 10;
    case Form::RegReg: return 3;
    case Form::RegRegDisp: return 7;
    case Form::RegImm32: return 6;
    case Form::Rel32: return 5;
    case Form::Reg: return 2;
    case Form::Sys: return 3;
  }
  return 1;
}

bool valid_single_byte_op(uint8_t b) {
  switch (b) {
    case 0x40: case 0x41: case 0x42: case 0x43: case 0x44: case 0x45:
    case 0x46: case 0x47: case 0x48: case 0x49: case 0x4A: case 0x4B:
    case 0x4C: case 0x50: case 0x51: case 0x52: case 0x53: case 0x54:
    case 0x58: case 0x59: case 0x5A: case 0x5B: case 0x5C: case 0x5D:
    case 0x5E: case 0x5F:
      return true;
    default:
      return false;
  }
}

int64_t read_le(std::span<const uint8_t> b, size_t n) {
  uint64_t v = 0;
  for (size_t i = 0; i < n; ++i) v |= uint64_t{b[i]} << (8 * i);
  if (n < 8 && (v >> (8 * n - 1)) & 1) v |= ~uint64_t{0} << (8 * n);
  return static_cast<int64_t>(v);
}

void write_le(std::vector<uint8_t>& out, uint64_t v, size_t n) {
  for (size_t i = 0; i < n; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

}  // namespace

std::string_view reg_name(Reg r) { return r < kNumGprs ? kRegNames[r] : "?"; }

std::optional<Reg> parse_reg(std::string_view name) {
  for (size_t i = 0; i < kRegNames.size(); ++i)
    if (kRegNames[i] == name) return static_cast<Reg>(i);
  return std::nullopt;
}

std::optional<uint8_t> length_of(uint8_t first) {
  if (first == 0x0F) return 3;
  if (!valid_single_byte_op(first)) return std::nullopt;
  return length_of_form(form_of(static_cast<Op>(first)));
}

std::optional<Instruction> decode(std::span<const uint8_t> bytes) {
  if (bytes.empty()) return std::nullopt;
  Instruction insn;
  if (bytes[0] == 0x0F) {
    if (bytes.size() < 3 || bytes[1] != 0x01) return std::nullopt;
    if (bytes[2] == 0xEF) insn.op = Op::Wrpkru;
    else if (bytes[2] == 0xEE) insn.op = Op::Rdpkru;
    else return std::nullopt;
    insn.length = 3;
    return insn;
  }
  if (!valid_single_byte_op(bytes[0])) return std::nullopt;
  insn.op = static_cast<Op>(bytes[0]);
  Form f = form_of(insn.op);
  insn.length = length_of_form(f);
  if (bytes.size() < insn.length) return std::nullopt;
  auto reg_at = [&](size_t i) -> std::optional<Reg> {
    if (bytes[i] >= kNumGprs) return std::nullopt;
    return static_cast<Reg>(bytes[i]);
  };
  switch (f) {
    case Form::None:
    case Form::Sys:
      break;
    case Form::RegImm64: {
      auto r = reg_at(1);
      if (!r) return std::nullopt;
      insn.r1 = *r;
      insn.imm = read_le(bytes.subspan(2), 8);
      break;
    }
    case Form::RegReg: {
      auto a = reg_at(1), b = reg_at(2);
      if (!a || !b) return std::nullopt;
      insn.r1 = *a;
      insn.r2 = *b;
      break;
    }
    case Form::RegRegDisp: {
      auto a = reg_at(1), b = reg_at(2);
      if (!a || !b) return std::nullopt;
      insn.r1 = *a;
      insn.r2 = *b;
      insn.imm = read_le(bytes.subspan(3), 4);
      break;
    }
    case Form::RegImm32: {
      auto r = reg_at(1);
      if (!r) return std::nullopt;
      insn.r1 = *r;
      insn.imm = read_le(bytes.subspan(2), 4);
      break;
    }
    case Form::Rel32:
      insn.imm = read_le(bytes.subspan(1), 4);
      break;
    case Form::Reg: {
      auto r = reg_at(1);
      if (!r) return std::nullopt;
      insn.r1 = *r;
      break;
    }
  }
  return insn;
}

void encode(const Instruction& insn, std::vector<uint8_t>& out) {
  Form f = form_of(insn.op);
  if (f == Form::Sys) {
    out.push_back(0x0F);
    out.push_back(0x01);
    out.push_back(static_cast<uint8_t>(insn.op));
    return;
  }
  out.push_back(static_cast<uint8_t>(insn.op));
  switch (f) {
    case Form::None:
    case Form::Sys:
      break;
    case Form::RegImm64:
      out.push_back(insn.r1);
      write_le(out, static_cast<uint64_t>(insn.imm), 8);
      break;
    case Form::RegReg:
      out.push_back(insn.r1);
      out.push_back(insn.r2);
      break;
    case Form::RegRegDisp:
      out.push_back(insn.r1);
      out.push_back(insn.r2);
      write_le(out, static_cast<uint64_t>(insn.imm), 4);
      break;
    case Form::RegImm32:
      out.push_back(insn.r1);
      write_le(out, static_cast<uint64_t>(insn.imm), 4);
      break;
    case Form::Rel32:
      write_le(out, static_cast<uint64_t>(insn.imm), 4);
      break;
    case Form::Reg:
      out.push_back(insn.r1);
      break;
  }
}

bool is_branch(Op op) {
  return op == Op::Jmp || op == Op::Jz || op == Op::Jnz || op == Op::Jb;
}

bool is_terminator(Op op) {
  return op == Op::Jmp || op == Op::Jmpr || op == Op::Eexit || op == Op::Oresume;
}

std::string disassemble(const Instruction& insn) {
  char buf[96];
  std::string a(reg_name(insn.r1)), b(reg_name(insn.r2));
  switch (insn.op) {
    case Op::Nop: return "nop";
    case Op::Eexit: return "eexit";
    case Op::Ocall: return "ocall";
    case Op::Oresume: return "oresume";
    case Op::Eenter: return "eenter";
    case Op::Wrpkru: return "wrpkru";
    case Op::Rdpkru: return "rdpkru";
    case Op::Movi:
      std::snprintf(buf, sizeof buf, "movi %s, 0x%llx", a.c_str(),
                    static_cast<unsigned long long>(insn.imm));
      return buf;
    case Op::Mov: return "mov " + a + ", " + b;
    case Op::Add: return "add " + a + ", " + b;
    case Op::Sub: return "sub " + a + ", " + b;
    case Op::Xor: return "xor " + a + ", " + b;
    case Op::Cmp: return "cmp " + a + ", " + b;
    case Op::Load:
    case Op::Loadb:
    case Op::Probe:
      std::snprintf(buf, sizeof buf, "%s %s, [%s%+lld]",
                    insn.op == Op::Load ? "load" : insn.op == Op::Loadb ? "loadb" : "probe",
                    a.c_str(), b.c_str(), static_cast<long long>(insn.imm));
      return buf;
    case Op::Store:
    case Op::Storeb:
      std::snprintf(buf, sizeof buf, "%s [%s%+lld], %s",
                    insn.op == Op::Store ? "store" : "storeb", a.c_str(),
                    static_cast<long long>(insn.imm), b.c_str());
      return buf;
    case Op::Addi:
    case Op::Cmpi:
      std::snprintf(buf, sizeof buf, "%s %s, %lld", insn.op == Op::Addi ? "addi" : "cmpi",
                    a.c_str(), static_cast<long long>(insn.imm));
      return buf;
    case Op::Jmp:
    case Op::Jz:
    case Op::Jnz:
    case Op::Jb: {
      const char* m = insn.op == Op::Jmp ? "jmp" : insn.op == Op::Jz ? "jz"
                      : insn.op == Op::Jnz ? "jnz" : "jb";
      std::snprintf(buf, sizeof buf, "%s %+lld", m, static_cast<long long>(insn.imm));
      return buf;
    }
    case Op::Jmpr: return "jmpr " + a;
    case Op::Xrstor: return "xrstor " + a;
    case Op::Xsave: return "xsave " + a;
    case Op::Popfq: return "popfq " + a;
  }
  return "?";
}

}  // namespace capsule::isa
