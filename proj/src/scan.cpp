#include "capsule/scan.hpp"

#include <cstring>

#include <omp.h>

namespace capsule::inspector {

namespace {

constexpr uint8_t kB0 = 0x0F, kB1 = 0x01, kB2 = 0xEF;

// Appends every match start in [begin, end) of `bytes` (a match may extend up
// to two bytes past `end` if those bytes exist).
void scan_range(std::span<const uint8_t> bytes, size_t begin, size_t end,
                std::vector<uint64_t>& out) {
  const uint8_t* base = bytes.data();
  size_t n = bytes.size();
  size_t i = begin;
  while (i < end) {
    const void* p = std::memchr(base + i, kB0, end - i);
    if (!p) break;
    i = static_cast<size_t>(static_cast<const uint8_t*>(p) - base);
    if (i + 2 < n && base[i + 1] == kB1 && base[i + 2] == kB2) out.push_back(i);
    ++i;
  }
}

}  // namespace

ScanVerdict scan_page(std::span<const uint8_t> page, std::span<const uint8_t> carry) {
  ScanVerdict v;
  if (carry.size() > 2) carry = carry.subspan(carry.size() - 2);
  // Hits starting in the carry need the first bytes of the page.
  for (size_t c = 0; c < carry.size(); ++c) {
    auto at = [&](size_t k) -> int {
      size_t idx = c + k;
      if (idx < carry.size()) return carry[idx];
      idx -= carry.size();
      return idx < page.size() ? page[idx] : -1;
    };
    if (at(0) == kB0 && at(1) == kB1 && at(2) == kB2)
      v.hits.push_back(static_cast<int64_t>(c) - static_cast<int64_t>(carry.size()));
  }
  std::vector<uint64_t> in_page;
  scan_range(page, 0, page.size(), in_page);
  for (uint64_t off : in_page) v.hits.push_back(static_cast<int64_t>(off));
  v.clean = v.hits.empty();
  return v;
}

std::vector<uint64_t> scan_region_serial(std::span<const uint8_t> bytes) {
  std::vector<uint64_t> out;
  scan_range(bytes, 0, bytes.size(), out);
  return out;
}

std::vector<uint64_t> scan_region_parallel(std::span<const uint8_t> bytes, size_t chunk) {
  if (chunk == 0) chunk = 4096;
  const size_t n = bytes.size();
  const size_t chunks = (n + chunk - 1) / chunk;
  std::vector<std::vector<uint64_t>> partial(chunks);

  // Each chunk owns the match starts inside it; matches may read past the
  // chunk end, which is how seams between chunks are covered.
#pragma omp parallel for schedule(static)
  for (long long c = 0; c < static_cast<long long>(chunks); ++c) {
    size_t begin = static_cast<size_t>(c) * chunk;
    size_t end = std::min(n, begin + chunk);
    scan_range(bytes, begin, end, partial[static_cast<size_t>(c)]);
  }

  std::vector<uint64_t> out;
  for (auto& p : partial) out.insert(out.end(), p.begin(), p.end());
  return out;
}

}  // namespace capsule::inspector
