#include <doctest.h>

#include <random>

#include "capsule/edl.hpp"

using namespace capsule::edl;

namespace {

const char* kPointer =
    "trusted {\n"
    "  public void ecall_pointer_in_size([in, size=len] void *ptr, size_t len);\n"
    "};\n";

EdlError::Kind error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const EdlError& e) {
    return e.kind();
  }
  FAIL("no error for: " << text);
  return EdlError::Kind::Syntax;
}

}  // namespace

TEST_CASE("pointer-in-size declaration") {
  auto spec = parse(kPointer);
  REQUIRE(spec.ecalls.size() == 1);
  CHECK(spec.ocalls.empty());
  const auto& f = spec.ecalls[0];
  CHECK(f.name == "ecall_pointer_in_size");
  CHECK(f.is_public);
  CHECK_FALSE(f.returns_value());
  REQUIRE(f.params.size() == 2);
  CHECK(f.params[0].kind == ParamKind::Buffer);
  CHECK(f.params[0].dir == Direction::In);
  CHECK(f.params[0].size.ref == "len");
  CHECK(f.params[1].kind == ParamKind::Scalar);
  CHECK(f.param_index("len") == 1u);
  CHECK(spec.ecall_index("ecall_pointer_in_size") == 0u);
}

TEST_CASE("empty and multi-block files") {
  CHECK(parse("trusted {};").ecalls.empty());
  auto spec = parse(
      "trusted { public uint64_t a(uint64_t x); public void b(void); };\n"
      "untrusted { void o([out, size=16] uint8_t* buf); };\n"
      "trusted { public int64_t c([in,out, size=n] uint8_t* p, size_t n); };\n");
  CHECK(spec.ecalls.size() == 3);
  CHECK(spec.ocalls.size() == 1);
  CHECK(spec.ocalls[0].params[0].dir == Direction::Out);
  CHECK(*spec.ocalls[0].params[0].size.literal == 16);
  CHECK(spec.ecalls[2].params[0].dir == Direction::InOut);
  CHECK(spec.ecalls[1].params.empty());
}

TEST_CASE("parse errors") {
  CHECK(error_of("trusted { public void f([user_check] void *p); };") == EdlError::Kind::UserCheckRejected);
  CHECK(error_of("trusted { public void f([in, size=n] void *p); };") == EdlError::Kind::UnknownSizeRef);
  CHECK(error_of("trusted { public void f(); public void f(); };") == EdlError::Kind::DuplicateName);
  CHECK(error_of("trusted { public void f(uint64_t a, uint64_t a); };") == EdlError::Kind::DuplicateName);
  CHECK(error_of("trusted { public void f( };") == EdlError::Kind::Syntax);
  CHECK(error_of("bogus { };") == EdlError::Kind::Syntax);
  CHECK(error_of("trusted { public void f(void *p); };") == EdlError::Kind::Syntax);
  CHECK(error_of("trusted { public void f([size=4] void *p); };") == EdlError::Kind::Syntax);
  CHECK(error_of("trusted { public void f([in] void *p); };") == EdlError::Kind::Syntax);
  try {
    parse("trusted {\n  public void f(\n    [user_check] void *p);\n};");
  } catch (const EdlError& e) {
    CHECK(e.line() == 3);
    CHECK(e.col() > 0);
  }
}

TEST_CASE("golden frame layout for the pointer declaration") {
  auto spec = parse(kPointer);
  auto edges = gen_edge(spec, 16 * 4096);
  REQUIRE(edges.size() == 1);
  const auto& d = edges[0];
  CHECK(d.slot_offsets == std::vector<uint64_t>{0, 8});
  CHECK_FALSE(d.ret_offset.has_value());
  CHECK(d.fixed_size == 32 + 2 * 8);
  REQUIRE(d.buffers.size() == 1);
  CHECK(d.buffers[0].slot_offset == 0);
  // len = 10: one 10-byte in-buffer body (8-aligned) after the fixed part.
  std::vector<uint64_t> sizes{10};
  CHECK(d.frame_size(sizes) == 32 + 16 + 16);
  CHECK(d.frame_size_expr() == "48+align8(len)");
}

TEST_CASE("layout arithmetic") {
  auto edges = gen_edge(parse("trusted { public void v(void); public uint64_t r(uint64_t a); };"), 4096);
  CHECK(edges[0].fixed_size == 32);
  CHECK_FALSE(edges[0].ret_offset);
  CHECK(edges[1].ret_offset == 8u);
  CHECK(edges[1].fixed_size == 48);

  auto two = parse("trusted { public void t([in, size=4096] uint8_t* a, [out, size=4096] uint8_t* b); };");
  CHECK_NOTHROW(gen_edge(two, 16 * 4096));
  try {
    gen_edge(two, 4096);
    FAIL("expected frame-too-large");
  } catch (const EdlError& e) {
    CHECK(e.kind() == EdlError::Kind::FrameTooLarge);
  }
  CHECK(align8(0) == 0);
  CHECK(align8(1) == 8);
  CHECK(align8(8) == 8);
}

TEST_CASE("json descriptor") {
  auto spec = parse(kPointer);
  auto j = to_json(spec, gen_edge(spec, 65536));
  REQUIRE(j.size() == 1);
  CHECK(j[0]["name"] == "ecall_pointer_in_size");
  CHECK(j[0]["side"] == "trusted");
  CHECK(j[0]["params"][0]["kind"] == "buffer");
  CHECK(j[0]["params"][0]["dir"] == "in");
  CHECK(j[0]["params"][0]["size"] == "len");
  CHECK(j[0]["params"][1]["kind"] == "scalar");
  CHECK(j[0]["frame_size_expr"] == "48+align8(len)");
  CHECK_FALSE(j[0].contains("ret_offset"));
}

TEST_CASE("parse(print(parse(x))) == parse(x) on random declarations") {
  std::mt19937_64 rng(77);
  const char* scalars[] = {"uint64_t", "int64_t", "size_t"};
  const char* dirs[] = {"in", "out", "in,out"};
  for (int trial = 0; trial < 300; ++trial) {
    std::string text;
    for (const char* side : {"trusted", "untrusted"}) {
      text += std::string(side) + " {\n";
      int nf = static_cast<int>(rng() % 3);
      for (int f = 0; f < nf; ++f) {
        text += std::string(side[0] == 't' ? "public " : "") + (rng() % 2 ? "void" : "uint64_t") + " " + side[0] +
                "fn" + std::to_string(f) + "(";
        int np = static_cast<int>(rng() % 6);
        std::vector<std::string> names;
        for (int p = 0; p < np; ++p) names.push_back("p" + std::to_string(p));
        for (int p = 0; p < np; ++p) {
          if (p) text += ", ";
          bool buf = p > 0 && rng() % 2;
          if (buf) {
            std::string size = rng() % 2 ? std::to_string(rng() % 100) : "p0";
            text += "[" + std::string(dirs[rng() % 3]) + ", size=" + size + "] uint8_t* " + names[p];
          } else {
            text += std::string(scalars[rng() % 3]) + " " + names[p];
          }
        }
        text += ");\n";
      }
      text += "};\n";
    }
    auto a = parse(text);
    auto b = parse(print(a));
    CHECK(a.ecalls == b.ecalls);
    CHECK(a.ocalls == b.ocalls);
  }
}
