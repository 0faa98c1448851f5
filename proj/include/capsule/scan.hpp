#pragma once

// WRPKRU (0F 01 EF) byte scanners.
//
// scan_page is the page-granular primitive used by every inspection stage.
// For whole regions there are two kernels: a serial reference and an OpenMP
// version that splits the region into page chunks and stitches the 2-byte
// seams. Both must report identical hit lists.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace capsule::inspector {

struct ScanVerdict {
  bool clean = true;
  // Offsets relative to the page start; a hit that begins in the carry has a
  // negative offset (-1 or -2).
  std::vector<int64_t> hits;
};

// `carry` holds the last 0-2 bytes of the preceding executable page.
ScanVerdict scan_page(std::span<const uint8_t> page, std::span<const uint8_t> carry = {});

std::vector<uint64_t> scan_region_serial(std::span<const uint8_t> bytes);
std::vector<uint64_t> scan_region_parallel(std::span<const uint8_t> bytes, size_t chunk = 4096);

}  // namespace capsule::inspector
