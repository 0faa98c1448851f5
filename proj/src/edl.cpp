#include "capsule/edl.hpp"

#include <cctype>
#include <charconv>
#include <set>

namespace capsule::edl {

std::string_view to_string(Side s) { return s == Side::Trusted ? "trusted" : "untrusted"; }

std::string_view to_string(Direction d) {
  switch (d) {
    case Direction::In: return "in";
    case Direction::Out: return "out";
    case Direction::InOut: return "in,out";
  }
  return "?";
}

std::string_view to_string(EdlError::Kind k) {
  switch (k) {
    case EdlError::Kind::Syntax: return "syntax-error";
    case EdlError::Kind::UserCheckRejected: return "user-check-rejected";
    case EdlError::Kind::UnknownSizeRef: return "unknown-size-ref";
    case EdlError::Kind::DuplicateName: return "duplicate-name";
    case EdlError::Kind::FrameTooLarge: return "frame-too-large";
  }
  return "?";
}

EdlError::EdlError(Kind kind, int line, int col, const std::string& msg)
    : std::runtime_error(std::string(to_string(kind)) + " at " + std::to_string(line) + ":" +
                         std::to_string(col) + ": " + msg),
      kind_(kind),
      line_(line),
      col_(col) {}

bool is_scalar_type(std::string_view t) {
  static const std::set<std::string_view> kScalars = {
      "int64_t", "uint64_t", "size_t", "int64", "uint64", "int", "long", "unsigned"};
  return kScalars.count(t) != 0;
}

std::optional<size_t> FunctionDecl::param_index(std::string_view n) const {
  for (size_t i = 0; i < params.size(); ++i)
    if (params[i].name == n) return i;
  return std::nullopt;
}

std::optional<size_t> InterfaceSpec::ecall_index(std::string_view n) const {
  for (size_t i = 0; i < ecalls.size(); ++i)
    if (ecalls[i].name == n) return i;
  return std::nullopt;
}

std::optional<size_t> InterfaceSpec::ocall_index(std::string_view n) const {
  for (size_t i = 0; i < ocalls.size(); ++i)
    if (ocalls[i].name == n) return i;
  return std::nullopt;
}

namespace {

struct Token {
  enum class T { Ident, Int, Punct, End } type = T::End;
  std::string text;
  int line = 1;
  int col = 1;
};

std::vector<Token> tokenize(std::string_view src) {
  std::vector<Token> out;
  int line = 1, col = 1;
  size_t i = 0;
  auto advance = [&](size_t n) {
    for (size_t k = 0; k < n; ++k, ++i) {
      if (src[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
  };
  while (i < src.size()) {
    char c = src[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      advance(1);
      continue;
    }
    if (c == '/' && i + 1 < src.size() && src[i + 1] == '/') {
      while (i < src.size() && src[i] != '\n') advance(1);
      continue;
    }
    if (c == '/' && i + 1 < src.size() && src[i + 1] == '*') {
      int l = line, cl = col;
      advance(2);
      while (i + 1 < src.size() && !(src[i] == '*' && src[i + 1] == '/')) advance(1);
      if (i + 1 >= src.size()) throw EdlError(EdlError::Kind::Syntax, l, cl, "unterminated comment");
      advance(2);
      continue;
    }
    Token t;
    t.line = line;
    t.col = col;
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      size_t j = i;
      while (j < src.size() && (std::isalnum(static_cast<unsigned char>(src[j])) || src[j] == '_')) ++j;
      t.type = Token::T::Ident;
      t.text = std::string(src.substr(i, j - i));
      advance(j - i);
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      size_t j = i;
      while (j < src.size() && std::isalnum(static_cast<unsigned char>(src[j]))) ++j;
      t.type = Token::T::Int;
      t.text = std::string(src.substr(i, j - i));
      advance(j - i);
    } else if (std::string_view("{}()[];,=*").find(c) != std::string_view::npos) {
      t.type = Token::T::Punct;
      t.text = std::string(1, c);
      advance(1);
    } else {
      throw EdlError(EdlError::Kind::Syntax, line, col, std::string("unexpected character '") + c + "'");
    }
    out.push_back(std::move(t));
  }
  Token end;
  end.line = line;
  end.col = col;
  out.push_back(end);
  return out;
}

class Parser {
 public:
  explicit Parser(std::vector<Token> toks) : toks_(std::move(toks)) {}

  InterfaceSpec run() {
    InterfaceSpec spec;
    if (peek().type == Token::T::End) fail(peek(), "expected a trusted or untrusted block");
    while (peek().type != Token::T::End) block(spec);
    return spec;
  }

 private:
  const Token& peek(size_t k = 0) const { return toks_[std::min(pos_ + k, toks_.size() - 1)]; }
  const Token& next() {
    const Token& t = toks_[pos_];
    if (pos_ + 1 < toks_.size()) ++pos_;
    return t;
  }
  [[noreturn]] void fail(const Token& t, const std::string& msg) const {
    throw EdlError(EdlError::Kind::Syntax, t.line, t.col, msg);
  }
  bool is(const Token& t, std::string_view text) const {
    return t.type != Token::T::End && t.text == text;
  }
  const Token& expect(std::string_view text) {
    if (!is(peek(), text)) fail(peek(), "expected '" + std::string(text) + "'");
    return next();
  }
  const Token& ident(const char* what) {
    if (peek().type != Token::T::Ident) fail(peek(), std::string("expected ") + what);
    if (peek().text == "user_check")
      throw EdlError(EdlError::Kind::UserCheckRejected, peek().line, peek().col,
                     "the user_check attribute is not supported");
    return next();
  }

  void block(InterfaceSpec& spec) {
    const Token& kw = peek();
    Side side;
    if (is(kw, "trusted")) side = Side::Trusted;
    else if (is(kw, "untrusted")) side = Side::Untrusted;
    else fail(kw, "expected 'trusted' or 'untrusted'");
    next();
    expect("{");
    auto& list = side == Side::Trusted ? spec.ecalls : spec.ocalls;
    while (!is(peek(), "}")) {
      if (peek().type == Token::T::End) fail(peek(), "unterminated block");
      const Token& start = peek();
      FunctionDecl fn = decl(side);
      for (const auto& other : list)
        if (other.name == fn.name)
          throw EdlError(EdlError::Kind::DuplicateName, start.line, start.col,
                         "duplicate function '" + fn.name + "'");
      list.push_back(std::move(fn));
    }
    expect("}");
    if (is(peek(), ";")) next();
  }

  FunctionDecl decl(Side side) {
    FunctionDecl fn;
    const Token& first = peek();
    if (is(first, "public")) {
      if (side == Side::Untrusted) fail(first, "'public' is only valid for ECALLs");
      fn.is_public = true;
      next();
    } else if (side == Side::Trusted) {
      fail(first, "ECALLs must be declared public");
    }
    const Token& rt = ident("return type");
    if (rt.text != "void" && !is_scalar_type(rt.text)) fail(rt, "unsupported return type '" + rt.text + "'");
    fn.return_type = rt.text;
    fn.name = ident("function name").text;
    expect("(");
    if (is(peek(), "void") && is(peek(1), ")")) {
      next();
    } else if (!is(peek(), ")")) {
      for (;;) {
        fn.params.push_back(param());
        if (is(peek(), ",")) {
          next();
          continue;
        }
        break;
      }
    }
    expect(")");
    expect(";");
    check_params(fn);
    return fn;
  }

  Param param() {
    Param p;
    const Token& start = peek();
    bool has_attrs = false;
    bool saw_in = false, saw_out = false, saw_size = false;
    if (is(peek(), "[")) {
      has_attrs = true;
      next();
      for (;;) {
        const Token& a = peek();
        if (a.type != Token::T::Ident) fail(a, "expected attribute");
        if (a.text == "user_check")
          throw EdlError(EdlError::Kind::UserCheckRejected, a.line, a.col,
                         "the user_check attribute is not supported");
        next();
        if (a.text == "in") {
          if (saw_in) fail(a, "duplicate 'in'");
          saw_in = true;
        } else if (a.text == "out") {
          if (saw_out) fail(a, "duplicate 'out'");
          saw_out = true;
        } else if (a.text == "size") {
          if (saw_size) fail(a, "duplicate 'size'");
          saw_size = true;
          expect("=");
          const Token& v = next();
          if (v.type == Token::T::Int) {
            uint64_t n = 0;
            int base = 10;
            std::string_view s = v.text;
            if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
              base = 16;
              s.remove_prefix(2);
            }
            auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), n, base);
            if (ec != std::errc{} || ptr != s.data() + s.size()) fail(v, "bad size literal");
            p.size.literal = n;
          } else if (v.type == Token::T::Ident) {
            if (v.text == "user_check")
              throw EdlError(EdlError::Kind::UserCheckRejected, v.line, v.col,
                             "the user_check attribute is not supported");
            p.size.ref = v.text;
          } else {
            fail(v, "expected size literal or parameter name");
          }
        } else {
          fail(a, "unsupported attribute '" + a.text + "'");
        }
        if (is(peek(), ",")) {
          next();
          continue;
        }
        break;
      }
      expect("]");
    }
    const Token& type = ident("parameter type");
    p.type = type.text;
    if (is(peek(), "*")) {
      next();
      if (!has_attrs) fail(start, "pointer parameter needs [in|out, size=...] attributes");
      if (!saw_in && !saw_out) fail(start, "buffer parameter needs a direction");
      if (!saw_size) fail(start, "buffer parameter needs a size");
      p.kind = ParamKind::Buffer;
      p.dir = saw_in && saw_out ? Direction::InOut : saw_in ? Direction::In : Direction::Out;
    } else {
      if (has_attrs) fail(start, "attributes are only valid on pointer parameters");
      if (!is_scalar_type(p.type)) fail(type, "unsupported scalar type '" + p.type + "'");
      p.kind = ParamKind::Scalar;
    }
    p.name = ident("parameter name").text;
    if (p.kind == ParamKind::Buffer) size_refs_.push_back({p.name, p.size, start});
    return p;
  }

  void check_params(const FunctionDecl& fn) {
    std::set<std::string> names;
    for (const auto& p : fn.params)
      if (!names.insert(p.name).second)
        throw EdlError(EdlError::Kind::DuplicateName, 0, 0, "duplicate parameter '" + p.name + "'");
    for (const auto& ref : size_refs_) {
      if (ref.size.is_literal()) continue;
      auto idx = fn.param_index(ref.size.ref);
      if (!idx || fn.params[*idx].kind != ParamKind::Scalar)
        throw EdlError(EdlError::Kind::UnknownSizeRef, ref.at.line, ref.at.col,
                       "size of '" + ref.param + "' refers to unknown scalar '" + ref.size.ref + "'");
    }
    size_refs_.clear();
  }

  struct PendingRef {
    std::string param;
    SizeExpr size;
    Token at;
  };

  std::vector<Token> toks_;
  size_t pos_ = 0;
  std::vector<PendingRef> size_refs_;
};

}  // namespace

InterfaceSpec parse(std::string_view text) { return Parser(tokenize(text)).run(); }

std::string print(const InterfaceSpec& spec) {
  std::string out;
  auto emit_block = [&](Side side, const std::vector<FunctionDecl>& fns) {
    out += to_string(side);
    out += " {\n";
    for (const auto& fn : fns) {
      out += "    ";
      if (fn.is_public) out += "public ";
      out += fn.return_type + " " + fn.name + "(";
      for (size_t i = 0; i < fn.params.size(); ++i) {
        const auto& p = fn.params[i];
        if (i) out += ", ";
        if (p.kind == ParamKind::Buffer) {
          out += "[";
          out += to_string(p.dir);
          out += ", size=" + p.size.text() + "] " + p.type + " *" + p.name;
        } else {
          out += p.type + " " + p.name;
        }
      }
      out += ");\n";
    }
    out += "};\n";
  };
  emit_block(Side::Trusted, spec.ecalls);
  emit_block(Side::Untrusted, spec.ocalls);
  return out;
}

uint64_t EdgeDescriptor::frame_size(std::span<const uint64_t> buffer_sizes) const {
  uint64_t total = fixed_size;
  for (uint64_t s : buffer_sizes) total += align8(s);
  return total;
}

std::string EdgeDescriptor::frame_size_expr() const {
  uint64_t literal = fixed_size;
  std::string refs;
  for (const auto& b : buffers) {
    if (b.size.is_literal()) {
      literal += align8(*b.size.literal);
    } else {
      refs += "+align8(" + b.size.ref + ")";
    }
  }
  return std::to_string(literal) + refs;
}

std::vector<EdgeDescriptor> gen_edge(const InterfaceSpec& spec, uint64_t capacity_bytes) {
  std::vector<EdgeDescriptor> out;
  auto gen = [&](Side side, const std::vector<FunctionDecl>& fns) {
    for (size_t id = 0; id < fns.size(); ++id) {
      const auto& fn = fns[id];
      EdgeDescriptor d;
      d.name = fn.name;
      d.side = side;
      d.fn_id = id;
      uint64_t off = 0;
      bool all_literal = true;
      for (size_t i = 0; i < fn.params.size(); ++i) {
        d.slot_offsets.push_back(off);
        const auto& p = fn.params[i];
        if (p.kind == ParamKind::Buffer) {
          d.buffers.push_back(BufferRecord{i, off, p.dir, p.size});
          all_literal = all_literal && p.size.is_literal();
        }
        off += 8;
      }
      if (fn.returns_value()) {
        d.ret_offset = off;
        d.ret_size = 8;
        off += 8;
      }
      d.fixed_size = kFrameHeader + off;
      if (all_literal) {
        std::vector<uint64_t> sizes;
        for (const auto& b : d.buffers) sizes.push_back(*b.size.literal);
        if (d.frame_size(sizes) > capacity_bytes)
          throw EdlError(EdlError::Kind::FrameTooLarge, 0, 0,
                         "frame of '" + fn.name + "' needs " + std::to_string(d.frame_size(sizes)) +
                             " bytes, parameter buffer holds " + std::to_string(capacity_bytes));
      }
      out.push_back(std::move(d));
    }
  };
  gen(Side::Trusted, spec.ecalls);
  gen(Side::Untrusted, spec.ocalls);
  return out;
}

nlohmann::json to_json(const InterfaceSpec& spec, const std::vector<EdgeDescriptor>& edges) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& d : edges) {
    const auto& fns = d.side == Side::Trusted ? spec.ecalls : spec.ocalls;
    const auto& fn = fns.at(d.fn_id);
    nlohmann::json params = nlohmann::json::array();
    for (size_t i = 0; i < fn.params.size(); ++i) {
      const auto& p = fn.params[i];
      nlohmann::json jp;
      jp["name"] = p.name;
      jp["kind"] = p.kind == ParamKind::Buffer ? "buffer" : "scalar";
      if (p.kind == ParamKind::Buffer) {
        jp["dir"] = to_string(p.dir);
        if (p.size.is_literal()) jp["size"] = *p.size.literal;
        else jp["size"] = p.size.ref;
      } else {
        jp["dir"] = nullptr;
        jp["size"] = 8;
      }
      jp["offset"] = d.slot_offsets[i];
      params.push_back(std::move(jp));
    }
    nlohmann::json j;
    j["name"] = d.name;
    j["side"] = to_string(d.side);
    j["id"] = d.fn_id;
    j["return_type"] = fn.return_type;
    j["params"] = std::move(params);
    j["frame_size_expr"] = d.frame_size_expr();
    j["header_size"] = kFrameHeader;
    if (d.ret_offset) {
      j["ret_offset"] = *d.ret_offset;
      j["ret_size"] = d.ret_size;
    }
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace capsule::edl
