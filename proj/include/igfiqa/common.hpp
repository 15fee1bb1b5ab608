#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

namespace igfiqa {

// Error taxonomy. The CLI maps these onto exit codes:
// ConfigError -> 1, FormatError/StructuralError -> 2, NumericError/DomainError -> 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class StructuralError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// ---------------------------------------------------------------------------
// Counter-based RNG streams. Every random decision in the library draws from a
// stream keyed by (seed, purpose, indices...), so results never depend on call
// order or on which thread produced them.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t stream_key(std::uint64_t seed, std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = splitmix64(seed);
  for (auto p : parts) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> parts) {
  return Rng(stream_key(seed, parts));
}

// Stream purposes.
enum class Stream : std::uint64_t {
  kClassTemplate = 1,
  kClassFlags = 2,
  kSample = 3,
  kInit = 4,
  kShuffle = 5,
  kCleanAug = 6,
  kRegAug = 7,
  kPairs = 8,
  kProbe = 9,
};

inline std::uint64_t id(Stream s) { return static_cast<std::uint64_t>(s); }

// Uniform real in [lo, hi) built from raw 64-bit draws so values are identical
// across standard library implementations.
inline double uniform(Rng& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

inline bool bernoulli(Rng& rng, double p) { return uniform(rng, 0.0, 1.0) < p; }

// Uniform integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % n;
}

inline double normal(Rng& rng) {
  // Box-Muller over the portable uniforms above.
  double u1 = uniform(rng, 0.0, 1.0);
  while (u1 <= 0.0) u1 = uniform(rng, 0.0, 1.0);
  const double u2 = uniform(rng, 0.0, 1.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <typename It>
void shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = uniform_index(rng, i);
    std::swap(first[i - 1], first[j]);
  }
}

// ---------------------------------------------------------------------------
// Little-endian binary IO.

namespace bin {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_le(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  } else {
    return v;
  }
}

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}

  void bytes(std::string_view s) { os_.write(s.data(), static_cast<std::streamsize>(s.size())); }

  template <typename T>
  void put(T v) {
    static_assert(std::is_arithmetic_v<T>);
    const T le = to_le(v);
    os_.write(reinterpret_cast<const char*>(&le), sizeof(T));
  }
  void u8(std::uint8_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f32(float v) { put(v); }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  std::uint64_t offset() const { return offset_; }

  void expect_magic(std::string_view magic) {
    std::string got(magic.size(), '\0');
    read_raw(got.data(), got.size(), "magic");
    if (got != magic) throw FormatError("bad magic, expected \"" + std::string(magic) + "\"", 0);
  }

  template <typename T>
  T get(const char* what) {
    T v;
    read_raw(reinterpret_cast<char*>(&v), sizeof(T), what);
    return to_le(v);
  }
  std::uint8_t u8(const char* what) { return get<std::uint8_t>(what); }
  std::uint32_t u32(const char* what) { return get<std::uint32_t>(what); }
  std::uint64_t u64(const char* what) { return get<std::uint64_t>(what); }
  float f32(const char* what) { return get<float>(what); }

  void expect_eof() {
    if (is_.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after payload", offset_);
  }

 private:
  void read_raw(char* dst, std::size_t n, const char* what) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n)
      throw FormatError(std::string("truncated file while reading ") + what, offset_ + static_cast<std::uint64_t>(is_.gcount()));
    offset_ += n;
  }

  std::istream& is_;
  std::uint64_t offset_ = 0;
};

}  // namespace bin

}  // namespace igfiqa
