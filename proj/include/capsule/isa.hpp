#pragma once

// Compact byte-encoded instruction set executed by the simulator.
//
// Every opcode byte lives in 0x40..0x5F and register operands are 0..9, so
// the byte 0x0F only ever starts WRPKRU / RDPKRU (or appears inside an
// immediate). WRPKRU keeps its real x86 encoding 0F 01 EF; the scanner works
// on raw bytes and does not care about instruction boundaries.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace capsule::isa {

enum Reg : uint8_t {
  kRax = 0,
  kRbx,
  kRcx,
  kRdx,
  kRsi,
  kRdi,
  kRsp,
  kRbp,
  kR8,
  kR9,
  kNumGprs
};

std::string_view reg_name(Reg r);
std::optional<Reg> parse_reg(std::string_view name);

enum class Op : uint8_t {
  Nop = 0x40,
  Movi = 0x41,
  Mov = 0x42,
  Load = 0x43,
  Store = 0x44,
  Loadb = 0x45,
  Storeb = 0x46,
  Add = 0x47,
  Sub = 0x48,
  Xor = 0x49,
  Addi = 0x4A,
  Cmp = 0x4B,
  Cmpi = 0x4C,
  Jmp = 0x50,
  Jz = 0x51,
  Jnz = 0x52,
  Jb = 0x53,
  Jmpr = 0x54,
  Eexit = 0x58,
  Ocall = 0x59,
  Oresume = 0x5A,
  Xrstor = 0x5B,
  Xsave = 0x5C,
  Probe = 0x5D,
  Popfq = 0x5E,
  Eenter = 0x5F,
  // Two-byte-prefixed system instructions (0F 01 xx).
  Wrpkru = 0xEF,
  Rdpkru = 0xEE,
};

inline constexpr std::array<uint8_t, 3> kWrpkruBytes = {0x0F, 0x01, 0xEF};
inline constexpr std::array<uint8_t, 3> kRdpkruBytes = {0x0F, 0x01, 0xEE};

struct Instruction {
  Op op = Op::Nop;
  uint8_t length = 1;
  Reg r1 = kRax;
  Reg r2 = kRax;
  int64_t imm = 0;  // immediate, displacement or rel32 (sign-extended)
};

// Encoded length implied by the first byte (and, for 0F, the next two).
// Returns nullopt for an invalid leading byte.
std::optional<uint8_t> length_of(uint8_t first);

// Decodes one instruction from the start of `bytes`. Returns nullopt when the
// bytes are not a valid encoding or are truncated.
std::optional<Instruction> decode(std::span<const uint8_t> bytes);

void encode(const Instruction& insn, std::vector<uint8_t>& out);

bool is_branch(Op op);
bool is_terminator(Op op);

std::string disassemble(const Instruction& insn);

// ---------------------------------------------------------------------------
// Assembler

class AsmError : public std::runtime_error {
 public:
  AsmError(int line, const std::string& msg)
      : std::runtime_error("line " + std::to_string(line) + ": " + msg), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

struct Program {
  uint64_t origin = 0;
  std::vector<uint8_t> bytes;
  std::map<std::string, uint64_t> labels;  // absolute addresses
};

// Two-pass assembler. `symbols` supplies external absolute addresses
// (e.g. "host.gadget"); labels defined in the text shadow nothing and may
// not collide with symbols.
//
// Syntax, one statement per line, `;` or `#` starts a comment:
//   label:
//   movi rax, 0x10        movi rax, @label      movi rax, host.secret
//   mov rd, rs            add/sub/xor/cmp rd, rs
//   addi rd, -1           cmpi rd, 0xEF
//   load rd, [rs+8]       store [rd+8], rs      (loadb/storeb: one byte)
//   probe rd, [rs+0]      jmp/jz/jnz/jb label  jmpr rs
//   eexit ocall oresume wrpkru rdpkru nop eenter
//   xrstor rs  xsave rs  popfq rs
//   .byte 0x0f, 0x01      .quad 5   .zero 16   .align 8   .page
Program assemble(std::string_view text, uint64_t origin,
                 const std::map<std::string, uint64_t>& symbols = {});

}  // namespace capsule::isa
