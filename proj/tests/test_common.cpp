#include <algorithm>
#include <set>
#include <sstream>

#include "doctest.h"
#include "xco2/common.hpp"

using namespace xco2;

TEST_CASE("fnv1a matches published test vectors") {
  CHECK(fnv1a(std::string_view("")) == 0xcbf29ce484222325ULL);
  CHECK(fnv1a(std::string_view("a")) == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a(std::string_view("foobar")) == 0x85944171f73967e8ULL);
  CHECK(hex64(0xabcULL) == "0000000000000abc");
}

TEST_CASE("derived seeds are distinct across streams") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 50; ++a)
    for (std::uint64_t b = 0; b < 50; ++b) seen.insert(derive_seed(7, a, b));
  CHECK(seen.size() == 2500);
  CHECK(derive_seed(7, 1, 2) != derive_seed(8, 1, 2));
}

TEST_CASE("shuffled_indices is a seeded permutation") {
  Rng a(3), b(3);
  const auto p = shuffled_indices(100, a);
  CHECK(p == shuffled_indices(100, b));
  auto s = p;
  std::sort(s.begin(), s.end());
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(s[i] == i);
}

TEST_CASE("binary helpers round-trip and reject bad magic") {
  std::stringstream ss;
  bin::write_magic(ss, "ABCD");
  bin::write_u32(ss, 7);
  bin::write_u64(ss, 1ULL << 40);
  const std::vector<double> v{1.5, -2.25, 1e-300};
  bin::write_f64s(ss, v);
  bin::expect_magic(ss, "ABCD", "stream");
  CHECK(bin::read_u32(ss) == 7);
  CHECK(bin::read_u64(ss) == (1ULL << 40));
  std::vector<double> back(3);
  bin::read_f64s(ss, back);
  CHECK(back == v);
  CHECK_THROWS_AS(bin::read_u32(ss), Error);

  std::stringstream bad("WXYZ");
  CHECK_THROWS_AS(bin::expect_magic(bad, "ABCD", "stream"), Error);
}
