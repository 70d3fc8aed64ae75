#include "xco2/common.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <numeric>
#include <ostream>

namespace xco2 {

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = rng.index(i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h) {
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a(std::string_view text) {
  return fnv1a(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

std::uint64_t file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::runtime, "cannot open " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(is)),
                        std::istreambuf_iterator<char>());
  return fnv1a(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(buf.data()), buf.size()));
}

namespace bin {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  os.write(raw, sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  char raw[sizeof(T)];
  is.read(raw, sizeof(T));
  require(is.gcount() == static_cast<std::streamsize>(sizeof(T)),
          ErrorKind::validation, "truncated binary file");
  T v;
  std::memcpy(&v, raw, sizeof(T));
  return v;
}

}  // namespace

void write_magic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}
void write_u32(std::ostream& os, std::uint32_t v) { put(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { put(os, v); }
void write_f64(std::ostream& os, double v) { put(os, v); }
void write_f64s(std::ostream& os, std::span<const double> v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void expect_magic(std::istream& is, std::string_view magic, const std::string& what) {
  std::string got(magic.size(), '\0');
  is.read(got.data(), static_cast<std::streamsize>(got.size()));
  require(is.gcount() == static_cast<std::streamsize>(magic.size()) && got == magic,
          ErrorKind::validation,
          what + ": bad magic, expected \"" + std::string(magic) + "\"");
}
std::uint32_t read_u32(std::istream& is) { return get<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return get<std::uint64_t>(is); }
double read_f64(std::istream& is) { return get<double>(is); }
void read_f64s(std::istream& is, std::span<double> out) {
  const auto n = static_cast<std::streamsize>(out.size() * sizeof(double));
  is.read(reinterpret_cast<char*>(out.data()), n);
  require(is.gcount() == n, ErrorKind::validation, "truncated binary file");
}

}  // namespace bin
}  // namespace xco2
