#include "capsule/image.hpp"

#include <stdexcept>

#include "capsule/inspector.hpp"
#include "capsule/isa.hpp"
#include "capsule/machine.hpp"

namespace capsule {

std::string_view to_string(PageRole r) {
  switch (r) {
    case PageRole::Code: return "code";
    case PageRole::PclCode: return "pcl";
    case PageRole::RwxCode: return "rwx";
    case PageRole::Data: return "data";
    case PageRole::Tls: return "tls";
    case PageRole::Ssa: return "ssa";
  }
  return "?";
}

namespace {

struct Layout {
  uint64_t code = 0, pcl = 0, rwx = 0, data = 0, tcs0 = 0, end = 0;
  int code_pages = 0, pcl_pages = 0;
};

Layout layout_of(const EnclaveSource& src, uint64_t base_page, int code_pages, int pcl_pages) {
  Layout l;
  l.code_pages = code_pages;
  l.pcl_pages = pcl_pages;
  l.code = base_page;
  l.pcl = l.code + static_cast<uint64_t>(code_pages);
  l.rwx = l.pcl + static_cast<uint64_t>(pcl_pages);
  l.data = l.rwx + static_cast<uint64_t>(src.rwx_pages);
  l.tcs0 = l.data + static_cast<uint64_t>(src.data_pages);
  l.end = l.tcs0 + 2 * static_cast<uint64_t>(src.tcs);
  return l;
}

void add_symbols(std::map<std::string, uint64_t>& out, const std::string& prefix, const Layout& l,
                 int tcs) {
  out[prefix + ".base"] = page_addr(l.code);
  out[prefix + ".code"] = page_addr(l.code);
  out[prefix + ".pcl"] = page_addr(l.pcl);
  out[prefix + ".rwx"] = page_addr(l.rwx);
  out[prefix + ".data"] = page_addr(l.data);
  out[prefix + ".end"] = page_addr(l.end);
  for (int i = 0; i < tcs; ++i) {
    out[prefix + ".tls" + std::to_string(i)] = page_addr(l.tcs0 + 2 * static_cast<uint64_t>(i));
    out[prefix + ".ssa" + std::to_string(i)] = page_addr(l.tcs0 + 2 * static_cast<uint64_t>(i) + 1);
  }
}

std::string compose(const EnclaveSource& src) {
  std::string t;
  std::string routine = "__inspect:\n" + std::string(inspector::routine_asm()) + "\n";
  t += "__entry:\n";
  if (src.placement == RoutinePlacement::AtEntry) t += routine;
  switch (src.placement) {
    case RoutinePlacement::AfterDispatcher:
    case RoutinePlacement::AtEntry:
      t += "  cmpi rax, 2\n  jz __inspect\n";
      break;
    case RoutinePlacement::IndirectOnly:
      t += "  cmpi rax, 2\n  jnz __no_inspect\n  movi r9, @__inspect\n  jmpr r9\n__no_inspect:\n";
      break;
    case RoutinePlacement::Omitted:
      break;
  }
  t += "  cmpi rax, 1\n  jz __oret\n";
  for (size_t i = 0; i < src.ecalls.size(); ++i)
    t += "  cmpi rdx, " + std::to_string(i) + "\n  jz " + src.ecalls[i] + "\n";
  t += "  movi rax, 0\n  mov rbx, rcx\n  eexit\n";
  t += "__oret:\n  oresume\n";
  if (src.placement == RoutinePlacement::AfterDispatcher ||
      src.placement == RoutinePlacement::IndirectOnly)
    t += routine;
  t += src.code;
  t += "\n.page\n__pcl_start:\n";
  t += src.pcl_code;
  t += "\n.page\n";
  return t;
}

}  // namespace

BuiltImage build_image(const EnclaveSource& src, uint64_t base_page,
                       const std::map<std::string, uint64_t>& externals) {
  if (src.tcs < 1) throw std::invalid_argument("enclave needs at least one TCS");
  const bool has_pcl = src.pcl_mask || !src.pcl_code.empty();
  const std::string text = compose(src);

  // Instruction sizes do not depend on symbol values, so a second pass with
  // the page counts measured by the first one always fits.
  Layout l = layout_of(src, base_page, 1, has_pcl ? 1 : 0);
  isa::Program program;
  uint64_t code_bytes = 0;
  for (int pass = 0;; ++pass) {
    std::map<std::string, uint64_t> symbols = externals;
    add_symbols(symbols, "self", l, src.tcs);
    add_symbols(symbols, src.name, l, src.tcs);
    program = isa::assemble(text, page_addr(l.code), symbols);
    code_bytes = program.labels.at("__pcl_start") - page_addr(l.code);
    uint64_t pcl_bytes = program.bytes.size() - code_bytes;
    int code_pages = std::max<int>(1, static_cast<int>((code_bytes + kPageSize - 1) / kPageSize));
    int pcl_pages = has_pcl ? std::max<int>(1, static_cast<int>((pcl_bytes + kPageSize - 1) / kPageSize)) : 0;
    if (code_pages == l.code_pages && pcl_pages == l.pcl_pages) break;
    if (pass == 2) throw std::logic_error("image layout of '" + src.name + "' does not converge");
    l = layout_of(src, base_page, code_pages, pcl_pages);
  }

  BuiltImage out;
  auto& img = out.image;
  img.base_page = base_page;
  img.entry = program.labels.at("__entry");
  if (src.placement == RoutinePlacement::AtEntry) img.entry = program.labels.at("__inspect");
  img.xfrm = src.xfrm;
  img.tcs_count = src.tcs;
  img.pcl_mask = src.pcl_mask;

  auto slice = [&](uint64_t from, uint64_t len) {
    std::vector<uint8_t> b(kPageSize, 0);
    for (uint64_t i = 0; i < len && from + i < program.bytes.size(); ++i) b[i] = program.bytes[from + i];
    return b;
  };
  for (int i = 0; i < l.code_pages; ++i) {
    uint64_t from = static_cast<uint64_t>(i) * kPageSize;
    img.pages.push_back({PageRole::Code, perm::RX, slice(from, std::min(kPageSize, code_bytes - from))});
  }
  for (int i = 0; i < l.pcl_pages; ++i) {
    auto bytes = slice(code_bytes + static_cast<uint64_t>(i) * kPageSize, kPageSize);
    if (src.pcl_mask)
      for (auto& b : bytes) b ^= *src.pcl_mask;
    img.pages.push_back({PageRole::PclCode, perm::RWX, std::move(bytes)});
  }
  for (int i = 0; i < src.rwx_pages; ++i) img.pages.push_back({PageRole::RwxCode, perm::RWX, {}});
  for (int i = 0; i < src.data_pages; ++i) img.pages.push_back({PageRole::Data, perm::RW, {}});
  for (int i = 0; i < src.tcs; ++i) {
    img.pages.push_back({PageRole::Tls, perm::RW, {}});
    img.pages.push_back({PageRole::Ssa, perm::RW, {}});
  }

  add_symbols(out.symbols, "self", l, src.tcs);
  add_symbols(out.symbols, src.name, l, src.tcs);
  for (const auto& [name, addr] : program.labels) out.symbols[src.name + ":" + name] = addr;
  return out;
}

}  // namespace capsule
