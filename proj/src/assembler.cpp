#include <cctype>
#include <charconv>

#include "capsule/isa.hpp"

namespace capsule::isa {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_operands(std::string_view s) {
  std::vector<std::string_view> out;
  int depth = 0;
  size_t start = 0;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '[') ++depth;
    if (s[i] == ']') --depth;
    if (s[i] == ',' && depth == 0) {
      out.push_back(trim(s.substr(start, i - start)));
      start = i + 1;
    }
  }
  auto last = trim(s.substr(start));
  if (!last.empty() || !out.empty()) out.push_back(last);
  return out;
}

std::optional<int64_t> parse_int(std::string_view s) {
  s = trim(s);
  bool neg = false;
  if (!s.empty() && (s[0] == '-' || s[0] == '+')) {
    neg = s[0] == '-';
    s.remove_prefix(1);
  }
  int base = 10;
  if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
    base = 16;
    s.remove_prefix(2);
  }
  if (s.empty()) return std::nullopt;
  uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, base);
  if (ec != std::errc{} || p != s.data() + s.size()) return std::nullopt;
  return neg ? -static_cast<int64_t>(v) : static_cast<int64_t>(v);
}

struct Statement {
  int line = 0;
  std::string mnemonic;
  std::vector<std::string> operands;
  uint64_t offset = 0;
  size_t size = 0;
};

class Assembler {
 public:
  Assembler(uint64_t origin, const std::map<std::string, uint64_t>& symbols)
      : origin_(origin), symbols_(symbols) {}

  Program run(std::string_view text) {
    parse(text);
    layout();
    emit();
    Program p;
    p.origin = origin_;
    p.bytes = std::move(bytes_);
    p.labels = labels_;
    return p;
  }

 private:
  void parse(std::string_view text) {
    int line_no = 0;
    while (!text.empty()) {
      ++line_no;
      auto nl = text.find('\n');
      std::string_view line = text.substr(0, nl);
      text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
      if (auto c = line.find_first_of(";#"); c != std::string_view::npos) line = line.substr(0, c);
      line = trim(line);
      while (!line.empty()) {
        auto colon = line.find(':');
        auto space = line.find_first_of(" \t");
        if (colon != std::string_view::npos && (space == std::string_view::npos || colon < space)) {
          Statement label;
          label.line = line_no;
          label.mnemonic = ":";
          label.operands.emplace_back(trim(line.substr(0, colon)));
          if (label.operands[0].empty()) throw AsmError(line_no, "empty label");
          stmts_.push_back(std::move(label));
          line = trim(line.substr(colon + 1));
          continue;
        }
        Statement st;
        st.line = line_no;
        std::string_view mn = line.substr(0, space);
        for (char ch : mn) st.mnemonic.push_back(static_cast<char>(std::tolower(ch)));
        if (space != std::string_view::npos)
          for (auto op : split_operands(line.substr(space + 1))) st.operands.emplace_back(op);
        stmts_.push_back(std::move(st));
        break;
      }
    }
  }

  size_t size_of(const Statement& st, uint64_t offset) const {
    const auto& m = st.mnemonic;
    if (m == ":") return 0;
    if (m == ".byte") return st.operands.size();
    if (m == ".quad") return 8 * st.operands.size();
    if (m == ".zero") {
      auto n = st.operands.size() == 1 ? parse_int(st.operands[0]) : std::nullopt;
      if (!n || *n < 0) throw AsmError(st.line, ".zero needs a non-negative count");
      return static_cast<size_t>(*n);
    }
    if (m == ".align" || m == ".page") {
      uint64_t a = 4096;
      if (m == ".align") {
        auto n = st.operands.size() == 1 ? parse_int(st.operands[0]) : std::nullopt;
        if (!n || *n <= 0) throw AsmError(st.line, ".align needs a positive value");
        a = static_cast<uint64_t>(*n);
      }
      uint64_t abs = origin_ + offset;
      return static_cast<size_t>((a - abs % a) % a);
    }
    auto op = opcode(st);
    Instruction tmp;
    tmp.op = op;
    std::vector<uint8_t> buf;
    encode(tmp, buf);
    return buf.size();
  }

  void layout() {
    uint64_t off = 0;
    for (auto& st : stmts_) {
      st.offset = off;
      if (st.mnemonic == ":") {
        const auto& name = st.operands[0];
        if (labels_.count(name) || symbols_.count(name))
          throw AsmError(st.line, "duplicate symbol '" + name + "'");
        labels_[name] = origin_ + off;
      }
      st.size = size_of(st, off);
      off += st.size;
    }
  }

  Op opcode(const Statement& st) const {
    static const std::map<std::string, Op> kOps = {
        {"nop", Op::Nop},       {"movi", Op::Movi},     {"mov", Op::Mov},
        {"load", Op::Load},     {"store", Op::Store},   {"loadb", Op::Loadb},
        {"storeb", Op::Storeb}, {"add", Op::Add},       {"sub", Op::Sub},
        {"xor", Op::Xor},       {"addi", Op::Addi},     {"cmp", Op::Cmp},
        {"cmpi", Op::Cmpi},     {"jmp", Op::Jmp},       {"jz", Op::Jz},
        {"jnz", Op::Jnz},       {"jb", Op::Jb},         {"jmpr", Op::Jmpr},
        {"eexit", Op::Eexit},   {"ocall", Op::Ocall},   {"oresume", Op::Oresume},
        {"xrstor", Op::Xrstor}, {"xsave", Op::Xsave},   {"probe", Op::Probe},
        {"popfq", Op::Popfq},   {"eenter", Op::Eenter}, {"wrpkru", Op::Wrpkru},
        {"rdpkru", Op::Rdpkru}};
    auto it = kOps.find(st.mnemonic);
    if (it == kOps.end()) throw AsmError(st.line, "unknown mnemonic '" + st.mnemonic + "'");
    return it->second;
  }

  Reg reg(const Statement& st, size_t i) const {
    if (i >= st.operands.size()) throw AsmError(st.line, "missing operand");
    auto r = parse_reg(st.operands[i]);
    if (!r) throw AsmError(st.line, "expected register, got '" + st.operands[i] + "'");
    return *r;
  }

  int64_t value(const Statement& st, std::string_view text) const {
    text = trim(text);
    if (auto n = parse_int(text)) return *n;
    std::string name(text.starts_with('@') ? text.substr(1) : text);
    if (auto it = labels_.find(name); it != labels_.end()) return static_cast<int64_t>(it->second);
    if (auto it = symbols_.find(name); it != symbols_.end()) return static_cast<int64_t>(it->second);
    throw AsmError(st.line, "undefined symbol '" + name + "'");
  }

  // "[reg+disp]" / "[reg-disp]" / "[reg]"
  std::pair<Reg, int64_t> mem(const Statement& st, size_t i) const {
    if (i >= st.operands.size()) throw AsmError(st.line, "missing memory operand");
    std::string_view s = trim(st.operands[i]);
    if (s.size() < 3 || s.front() != '[' || s.back() != ']')
      throw AsmError(st.line, "expected [reg+disp]");
    s = trim(s.substr(1, s.size() - 2));
    auto pos = s.find_first_of("+-");
    auto r = parse_reg(trim(s.substr(0, pos)));
    if (!r) throw AsmError(st.line, "bad base register");
    int64_t disp = 0;
    if (pos != std::string_view::npos) {
      disp = value(st, s.substr(pos + 1));
      if (s[pos] == '-') disp = -disp;
    }
    return {*r, disp};
  }

  void expect_operands(const Statement& st, size_t n) const {
    if (st.operands.size() != n)
      throw AsmError(st.line, st.mnemonic + " expects " + std::to_string(n) + " operand(s)");
  }

  void emit() {
    for (const auto& st : stmts_) {
      const auto& m = st.mnemonic;
      size_t before = bytes_.size();
      if (m == ":") continue;
      if (m == ".byte") {
        for (const auto& o : st.operands) {
          auto v = value(st, o);
          if (v < -128 || v > 255) throw AsmError(st.line, "byte out of range");
          bytes_.push_back(static_cast<uint8_t>(v));
        }
      } else if (m == ".quad") {
        for (const auto& o : st.operands) {
          auto v = static_cast<uint64_t>(value(st, o));
          for (int b = 0; b < 8; ++b) bytes_.push_back(static_cast<uint8_t>(v >> (8 * b)));
        }
      } else if (m == ".zero" || m == ".align" || m == ".page") {
        bytes_.resize(bytes_.size() + st.size, 0);
      } else {
        Instruction insn;
        insn.op = opcode(st);
        switch (insn.op) {
          case Op::Nop: case Op::Eexit: case Op::Ocall: case Op::Oresume:
          case Op::Eenter: case Op::Wrpkru: case Op::Rdpkru:
            expect_operands(st, 0);
            break;
          case Op::Movi:
            expect_operands(st, 2);
            insn.r1 = reg(st, 0);
            insn.imm = value(st, st.operands[1]);
            break;
          case Op::Mov: case Op::Add: case Op::Sub: case Op::Xor: case Op::Cmp:
            expect_operands(st, 2);
            insn.r1 = reg(st, 0);
            insn.r2 = reg(st, 1);
            break;
          case Op::Load: case Op::Loadb: case Op::Probe: {
            expect_operands(st, 2);
            insn.r1 = reg(st, 0);
            auto [base, disp] = mem(st, 1);
            insn.r2 = base;
            insn.imm = disp;
            break;
          }
          case Op::Store: case Op::Storeb: {
            expect_operands(st, 2);
            auto [base, disp] = mem(st, 0);
            insn.r1 = base;
            insn.imm = disp;
            insn.r2 = reg(st, 1);
            break;
          }
          case Op::Addi: case Op::Cmpi:
            expect_operands(st, 2);
            insn.r1 = reg(st, 0);
            insn.imm = value(st, st.operands[1]);
            if (insn.imm < INT32_MIN || insn.imm > INT32_MAX)
              throw AsmError(st.line, "imm32 out of range");
            break;
          case Op::Jmp: case Op::Jz: case Op::Jnz: case Op::Jb: {
            expect_operands(st, 1);
            int64_t target = value(st, st.operands[0]);
            insn.imm = target - static_cast<int64_t>(origin_ + st.offset + st.size);
            break;
          }
          case Op::Jmpr: case Op::Xrstor: case Op::Xsave: case Op::Popfq:
            expect_operands(st, 1);
            insn.r1 = reg(st, 0);
            break;
        }
        encode(insn, bytes_);
      }
      if (bytes_.size() - before != st.size) throw AsmError(st.line, "internal size mismatch");
    }
  }

  uint64_t origin_;
  const std::map<std::string, uint64_t>& symbols_;
  std::vector<Statement> stmts_;
  std::map<std::string, uint64_t> labels_;
  std::vector<uint8_t> bytes_;
};

}  // namespace

Program assemble(std::string_view text, uint64_t origin,
                 const std::map<std::string, uint64_t>& symbols) {
  return Assembler(origin, symbols).run(text);
}

}  // namespace capsule::isa
