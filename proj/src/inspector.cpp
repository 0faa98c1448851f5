#include "capsule/inspector.hpp"

#include <algorithm>
#include <set>

#include "capsule/isa.hpp"
#include "capsule/machine.hpp"

namespace capsule::inspector {

std::string_view to_string(Lifecycle s) {
  switch (s) {
    case Lifecycle::UninspectedRw: return "uninspected-RW";
    case Lifecycle::UnderInspectionRo: return "under-inspection-RO";
    case Lifecycle::ExecutableRx: return "executable-RX";
  }
  return "?";
}

bool legal_transition(Lifecycle from, Lifecycle to) {
  return (from == Lifecycle::UninspectedRw && to == Lifecycle::UnderInspectionRo) ||
         (from == Lifecycle::UnderInspectionRo && to == Lifecycle::ExecutableRx) ||
         (from == Lifecycle::UnderInspectionRo && to == Lifecycle::UninspectedRw);
}

// r9 tracks how many bytes of 0F 01 EF have matched so far. The pattern has
// no proper border, so a mismatch only needs to re-test the current byte
// against the first pattern byte.
std::string_view routine_asm() {
  return R"(  movi rax, 1
  movi r9, 0
__i_loop:
  cmpi rdx, 0
  jz __i_done
  loadb r8, [rsi+0]
  addi rsi, 1
  addi rdx, -1
  cmpi r8, 0xEF
  jnz __i_not_third
  cmpi r9, 2
  jz __i_found
__i_not_third:
  cmpi r8, 0x01
  jnz __i_not_second
  cmpi r9, 1
  jnz __i_not_second
  movi r9, 2
  jmp __i_loop
__i_not_second:
  cmpi r8, 0x0F
  jnz __i_reset
  movi r9, 1
  jmp __i_loop
__i_reset:
  movi r9, 0
  jmp __i_loop
__i_found:
  movi rax, 0
__i_done:
  mov rbx, rcx
  eexit
)";
}

const std::vector<uint8_t>& routine_bytes() {
  static const std::vector<uint8_t> bytes = isa::assemble(routine_asm(), 0).bytes;
  return bytes;
}

std::optional<uint64_t> find_routine(std::span<const uint8_t> code) {
  const auto& sig = routine_bytes();
  auto it = std::search(code.begin(), code.end(), sig.begin(), sig.end());
  if (it == code.end()) return std::nullopt;
  return static_cast<uint64_t>(it - code.begin());
}

bool reachable(std::span<const uint8_t> code, uint64_t code_base, uint64_t entry, uint64_t target) {
  std::vector<uint64_t> work{entry};
  std::set<uint64_t> seen;
  while (!work.empty()) {
    uint64_t pc = work.back();
    work.pop_back();
    while (true) {
      if (pc == target) return true;
      if (pc < code_base || pc >= code_base + code.size()) break;
      if (!seen.insert(pc).second) break;
      auto insn = isa::decode(code.subspan(pc - code_base));
      if (!insn) break;
      uint64_t next = pc + insn->length;
      if (isa::is_branch(insn->op)) work.push_back(next + static_cast<uint64_t>(insn->imm));
      if (isa::is_terminator(insn->op)) break;
      pc = next;
    }
  }
  return false;
}

namespace {

// Plain code pages concatenated, with the address of the first byte.
std::pair<std::vector<uint8_t>, uint64_t> plain_code(const EnclaveImage& image) {
  std::vector<uint8_t> out;
  uint64_t base = 0;
  bool started = false;
  for (size_t i = 0; i < image.pages.size(); ++i) {
    const auto& p = image.pages[i];
    if (p.role != PageRole::Code) continue;
    if (!started) {
      base = page_addr(image.page_index(i));
      started = true;
    }
    size_t at = out.size();
    out.resize(at + kPageSize, 0);
    std::copy_n(p.bytes.begin(), std::min(p.bytes.size(), static_cast<size_t>(kPageSize)),
                out.begin() + static_cast<long>(at));
  }
  return {std::move(out), base};
}

}  // namespace

StaticResult static_inspect(const EnclaveImage& image) {
  StaticResult r;
  // Page-by-page with a 2-byte carry from the preceding adjacent code page.
  std::vector<uint8_t> carry;
  std::optional<uint64_t> prev_index;
  for (size_t i = 0; i < image.pages.size(); ++i) {
    const auto& p = image.pages[i];
    if (p.role != PageRole::Code) continue;
    std::vector<uint8_t> bytes(kPageSize, 0);
    std::copy_n(p.bytes.begin(), std::min(p.bytes.size(), static_cast<size_t>(kPageSize)), bytes.begin());
    uint64_t index = image.page_index(i);
    if (!prev_index || *prev_index + 1 != index) carry.clear();
    auto v = scan_page(bytes, carry);
    for (int64_t off : v.hits)
      r.hits.push_back(static_cast<uint64_t>(static_cast<int64_t>(page_addr(index)) + off));
    carry.assign(bytes.end() - 2, bytes.end());
    prev_index = index;
  }
  if (!r.hits.empty()) {
    r.status = StaticResult::Status::WrpkruFound;
    return r;
  }
  auto [code, base] = plain_code(image);
  auto off = find_routine(code);
  if (!off) {
    r.status = StaticResult::Status::MissingRoutine;
    return r;
  }
  r.routine_addr = base + *off;
  return r;
}

Reachability reachability_check(const EnclaveImage& image, uint64_t routine_addr) {
  auto [code, base] = plain_code(image);
  return reachable(code, base, image.entry, routine_addr) ? Reachability::Ok : Reachability::Unreachable;
}

}  // namespace capsule::inspector
