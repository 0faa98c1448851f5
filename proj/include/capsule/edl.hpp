#pragma once

// Enclave Definition Language subset: parser, printer and marshaling-layout
// generator.
//
//   file  := block+
//   block := ("trusted" | "untrusted") "{" decl* "}" [";"]
//   decl  := ["public"] type ident "(" [params | "void"] ")" ";"
//   param := "[" attrs "]" type "*" ident | type ident
//   attrs := ("in" | "out" | "in,out") ["," "size" "=" (ident | int)]
//
// `user_check` is rejected outright: every buffer travels through the
// per-TCS parameter buffer.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace capsule::edl {

enum class Side { Trusted, Untrusted };
enum class ParamKind { Scalar, Buffer };
enum class Direction { In, Out, InOut };

std::string_view to_string(Side s);
std::string_view to_string(Direction d);

inline bool copies_in(Direction d) { return d == Direction::In || d == Direction::InOut; }
inline bool copies_out(Direction d) { return d == Direction::Out || d == Direction::InOut; }

struct SizeExpr {
  std::optional<uint64_t> literal;
  std::string ref;  // scalar parameter name when not literal

  bool is_literal() const { return literal.has_value(); }
  std::string text() const { return literal ? std::to_string(*literal) : ref; }
  friend bool operator==(const SizeExpr&, const SizeExpr&) = default;
};

struct Param {
  std::string name;
  std::string type;  // scalar type, or pointee type for buffers
  ParamKind kind = ParamKind::Scalar;
  Direction dir = Direction::In;  // buffers only
  SizeExpr size;                  // buffers only
  friend bool operator==(const Param&, const Param&) = default;
};

struct FunctionDecl {
  std::string name;
  bool is_public = false;
  std::string return_type = "void";
  std::vector<Param> params;

  bool returns_value() const { return return_type != "void"; }
  std::optional<size_t> param_index(std::string_view name) const;
  friend bool operator==(const FunctionDecl&, const FunctionDecl&) = default;
};

struct InterfaceSpec {
  std::vector<FunctionDecl> ecalls;
  std::vector<FunctionDecl> ocalls;

  std::optional<size_t> ecall_index(std::string_view name) const;
  std::optional<size_t> ocall_index(std::string_view name) const;
  friend bool operator==(const InterfaceSpec&, const InterfaceSpec&) = default;
};

class EdlError : public std::runtime_error {
 public:
  enum class Kind { Syntax, UserCheckRejected, UnknownSizeRef, DuplicateName, FrameTooLarge };
  EdlError(Kind kind, int line, int col, const std::string& msg);
  Kind kind() const { return kind_; }
  int line() const { return line_; }
  int col() const { return col_; }

 private:
  Kind kind_;
  int line_;
  int col_;
};

std::string_view to_string(EdlError::Kind k);

bool is_scalar_type(std::string_view type);

InterfaceSpec parse(std::string_view text);
std::string print(const InterfaceSpec& spec);

// ---------------------------------------------------------------------------
// Marshaling layout
//
// A frame in the parameter buffer is a 32-byte header followed by the
// marshaling struct (`ms`): one 8-byte slot per parameter in declaration
// order (the value for scalars, the buffer's address for buffers), an
// optional 8-byte return slot, then the buffer bodies, each 8-byte aligned.
//
// Header (mirrors ms_param_meta_t): [0] function id, [8] total frame size,
// [16] return-slot offset within ms (~0 when void), [24] return size.

inline constexpr uint64_t kFrameHeader = 32;
inline constexpr uint64_t kNoReturnSlot = ~uint64_t{0};

namespace header {
inline constexpr uint64_t kFnId = 0;
inline constexpr uint64_t kFrameSize = 8;
inline constexpr uint64_t kRetOffset = 16;
inline constexpr uint64_t kRetSize = 24;
}  // namespace header

constexpr uint64_t align8(uint64_t n) { return (n + 7) & ~uint64_t{7}; }

// One record per buffer parameter; mirrors ms_buf_meta_t {offset, size, in_out}.
struct BufferRecord {
  size_t param = 0;
  uint64_t slot_offset = 0;  // ms-relative slot holding the buffer address
  Direction dir = Direction::In;
  SizeExpr size;
};

struct EdgeDescriptor {
  std::string name;
  Side side = Side::Trusted;
  size_t fn_id = 0;
  std::vector<uint64_t> slot_offsets;  // ms-relative, per parameter
  std::optional<uint64_t> ret_offset;  // ms-relative
  uint64_t ret_size = 0;
  uint64_t fixed_size = 0;  // header + slots + return slot
  std::vector<BufferRecord> buffers;

  // Total frame size for concrete buffer sizes (same order as `buffers`).
  uint64_t frame_size(std::span<const uint64_t> buffer_sizes) const;
  std::string frame_size_expr() const;
};

// Throws FrameTooLarge when a frame whose sizes are all literal cannot fit in
// `capacity_bytes`.
std::vector<EdgeDescriptor> gen_edge(const InterfaceSpec& spec, uint64_t capacity_bytes);

// `{name, side, params:[{name,kind,dir,size}], frame_size_expr}` per function,
// plus the computed layout.
nlohmann::json to_json(const InterfaceSpec& spec, const std::vector<EdgeDescriptor>& edges);

}  // namespace capsule::edl
