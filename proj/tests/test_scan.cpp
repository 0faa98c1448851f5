#include <doctest.h>

#include <random>

#include "capsule/scan.hpp"

using namespace capsule::inspector;

namespace {

// Oracle: every start index of 0F 01 EF in `v`.
std::vector<uint64_t> naive(const std::vector<uint8_t>& v) {
  std::vector<uint64_t> out;
  for (size_t i = 0; i + 2 < v.size(); ++i)
    if (v[i] == 0x0F && v[i + 1] == 0x01 && v[i + 2] == 0xEF) out.push_back(i);
  return out;
}

std::vector<uint8_t> random_bytes(std::mt19937_64& rng, size_t n, int plants) {
  // Small alphabet so partial matches are common.
  static const uint8_t alphabet[] = {0x0F, 0x01, 0xEF, 0x00, 0x90};
  std::vector<uint8_t> v(n);
  for (auto& b : v) b = alphabet[rng() % 5];
  for (int p = 0; p < plants && n >= 3; ++p) {
    size_t at = rng() % (n - 2);
    v[at] = 0x0F;
    v[at + 1] = 0x01;
    v[at + 2] = 0xEF;
  }
  return v;
}

}  // namespace

TEST_CASE("scan_page examples") {
  std::vector<uint8_t> page(4096, 0x90);
  CHECK(scan_page(page).clean);
  page[100] = 0x0F;
  page[101] = 0x01;
  page[102] = 0xEF;
  auto v = scan_page(page);
  CHECK_FALSE(v.clean);
  CHECK(v.hits == std::vector<int64_t>{100});
  page[102] = 0xEE;  // RDPKRU is fine
  CHECK(scan_page(page).clean);
}

TEST_CASE("scan_page finds a pattern straddling the carry") {
  std::vector<uint8_t> prev(4096, 0);
  prev[4094] = 0x0F;
  prev[4095] = 0x01;
  std::vector<uint8_t> next(4096, 0);
  next[0] = 0xEF;
  CHECK(scan_page(prev).clean);
  CHECK(scan_page(next).clean);
  std::vector<uint8_t> carry{0x0F, 0x01};
  auto v = scan_page(next, carry);
  CHECK(v.hits == std::vector<int64_t>{-2});
  std::vector<uint8_t> carry1{0x0F};
  std::vector<uint8_t> next2{0x01, 0xEF};
  CHECK(scan_page(next2, carry1).hits == std::vector<int64_t>{-1});
}

TEST_CASE("scan_page agrees with the naive search on random pages with carries") {
  std::mt19937_64 rng(1234);
  for (int trial = 0; trial < 2000; ++trial) {
    size_t carry_len = rng() % 3;
    auto joined = random_bytes(rng, carry_len + 64 + rng() % 64, static_cast<int>(rng() % 3));
    std::vector<uint8_t> carry(joined.begin(), joined.begin() + static_cast<long>(carry_len));
    std::vector<uint8_t> page(joined.begin() + static_cast<long>(carry_len), joined.end());
    std::vector<int64_t> want;
    for (auto h : naive(joined)) want.push_back(static_cast<int64_t>(h) - static_cast<int64_t>(carry_len));
    auto got = scan_page(page, carry);
    CHECK(got.hits == want);
    CHECK(got.clean == want.empty());
  }
}

TEST_CASE("serial and parallel region scans match the oracle") {
  std::mt19937_64 rng(99);
  for (size_t chunk : {size_t{1}, size_t{2}, size_t{3}, size_t{7}, size_t{64}, size_t{4096}}) {
    for (int trial = 0; trial < 20; ++trial) {
      auto v = random_bytes(rng, 1 + rng() % 20000, 10);
      auto want = naive(v);
      CHECK(scan_region_serial(v) == want);
      CHECK(scan_region_parallel(v, chunk) == want);
    }
  }
  CHECK(scan_region_parallel(std::vector<uint8_t>{}).empty());
  CHECK(scan_region_serial(std::vector<uint8_t>{0x0F, 0x01}).empty());
}
