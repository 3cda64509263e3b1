#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dithead {

// Error taxonomy. Everything user-facing throws one of these.
struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};
struct ParameterError : std::invalid_argument {
  explicit ParameterError(const std::string& msg) : std::invalid_argument("parameter error: " + msg) {}
};
struct StateError : std::logic_error {
  explicit StateError(const std::string& msg) : std::logic_error("state error: " + msg) {}
};
struct GeometryError : std::invalid_argument {
  explicit GeometryError(const std::string& msg) : std::invalid_argument("geometry error: " + msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error("filesystem error: " + msg) {}
};
struct ValidationError : std::invalid_argument {
  explicit ValidationError(const std::string& msg) : std::invalid_argument("validation error: " + msg) {}
};

// Deterministic RNG with no hidden distribution state, so the full state is
// exactly the mt19937_64 engine and serializes losslessly.
class Rng {
 public:
  Rng() : gen_(0x9e3779b97f4a7c15ull) {}
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // uniform in [lo, hi]
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [lo, hi], rejection sampled
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw ParameterError("uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<int64_t>(gen_());  // full 64-bit range
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return lo + static_cast<int64_t>(v % span);
  }

  // standard normal via Box-Muller; computes a fresh pair every call so the
  // engine state is the whole state
  double normal() {
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // derive an independent child stream
  Rng fork() { return Rng(gen_() ^ 0xd1b54a32d192ed03ull); }

  std::string serialize() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }
  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    if (!is) throw IoError("rng state: malformed");
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace dithead
