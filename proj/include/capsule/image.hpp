#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace capsule {

enum class PageRole { Code, PclCode, RwxCode, Data, Tls, Ssa };

std::string_view to_string(PageRole r);

struct ImagePage {
  PageRole role = PageRole::Data;
  uint8_t perm = 0;             // declared permission, before W^X enforcement
  std::vector<uint8_t> bytes;   // at most one page; zero-filled past the end
};

// A loadable enclave: contiguous pages starting at `base_page`. Every TCS
// owns one Tls page followed by one Ssa page, in TCS order.
struct EnclaveImage {
  uint64_t base_page = 0;
  std::vector<ImagePage> pages;
  uint64_t entry = 0;  // absolute address
  uint64_t xfrm = 0x3;
  int tcs_count = 1;
  std::optional<uint8_t> pcl_mask;

  uint64_t page_index(size_t i) const { return base_page + i; }
};

enum class RoutinePlacement { AfterDispatcher, AtEntry, IndirectOnly, Omitted };

// Source-level description of an enclave; the builder adds the entry
// dispatcher and the embedded inspection routine around the user code.
//
// Entry protocol (registers at EENTER):
//   rax = 0 ecall (rdx = function id, rsi = ms address,
//                  rdi = free parameter-buffer space, r8 = its end)
//   rax = 1 return from an ocall
//   rax = 2 inspection request (rsi = start address, rdx = byte count)
//   rcx = return location (set by EENTER)
// User code provides one label per ECALL, named after it.
struct EnclaveSource {
  std::string name = "enclave";
  std::string code;      // plain user code
  std::string pcl_code;  // shipped masked when pcl_mask is set
  std::optional<uint8_t> pcl_mask;
  std::vector<std::string> ecalls;  // in interface order
  int tcs = 2;
  int data_pages = 1;
  int rwx_pages = 0;
  uint64_t xfrm = 0x3;
  RoutinePlacement placement = RoutinePlacement::AfterDispatcher;
};

struct BuiltImage {
  EnclaveImage image;
  // Absolute addresses: self.* / <name>.* for base, code, pcl, rwx, data,
  // end, tls<i>, ssa<i>; <name>:<label> for every code label.
  std::map<std::string, uint64_t> symbols;
};

BuiltImage build_image(const EnclaveSource& src, uint64_t base_page,
                       const std::map<std::string, uint64_t>& externals = {});

}  // namespace capsule
