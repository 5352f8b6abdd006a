#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace layoutgen {

inline constexpr const char* kVersion = "0.1.0";

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct InvalidGeometry : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };
struct SchemaError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct DegenerateSample : Error { using Error::Error; };
struct EmptyForeground : Error { using Error::Error; };
struct InvalidDataset : Error { using Error::Error; };
struct InsufficientElements : Error { using Error::Error; };
struct TrainingDiverged : Error { using Error::Error; };
struct GenerationFailed : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

// Deterministic RNG. Gaussian draws are generated without caching so the
// mt19937_64 state alone captures the full stream position (needed for
// checkpoint/resume equality).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0,1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int n) {
    return static_cast<int>(engine_() % static_cast<std::uint64_t>(n));
  }

  double normal(double mean, double stddev) {
    double u1 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586476925286766559 * u2);
  }

  Rng split() { return Rng(next_u64()); }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw FormatError("invalid rng state string");
  }

 private:
  std::mt19937_64 engine_;
};

inline bool finite(double v) { return std::isfinite(v); }

}  // namespace layoutgen
