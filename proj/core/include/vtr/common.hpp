// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace vtr {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// shape or contract violation in tensor ops and module wiring
struct ShapeError : Error {
  using Error::Error;
};
// math domain violation: log of non-positive, zero-norm row, bad id, ...
struct DomainError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
// training aborted mid-run; message names the last good checkpoint
struct TrainAbort : Error {
  using Error::Error;
};

namespace detail {
inline void str_append(std::ostringstream&) {}
template <class T, class... Rest>
void str_append(std::ostringstream& os, T&& v, Rest&&... rest) {
  os << v;
  str_append(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <class... Args>
std::string str(Args&&... args) {
  std::ostringstream os;
  os.precision(17);
  detail::str_append(os, std::forward<Args>(args)...);
  return os.str();
}

// token id conventions shared by the text pipeline and the synthetic data
inline constexpr int kPadToken = 0;
inline constexpr int kBosToken = 1;
inline constexpr int kEosToken = 2;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream));
}

// mt19937_64 with explicit uniform/normal transforms; the standard
// distributions are implementation-defined and would break seeded
// reproducibility across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller without caching: two draws per normal
  double normal() {
    double u1 = uniform();
    while (u1 == 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // uniform index in [0, n), rejection sampled to avoid modulo bias
  std::size_t index(std::size_t n) {
    const std::uint64_t bound = ~std::uint64_t{0} - ~std::uint64_t{0} % n;
    std::uint64_t r = gen_();
    while (r >= bound) r = gen_();
    return static_cast<std::size_t>(r % n);
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace vtr
