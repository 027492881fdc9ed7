#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace drqs {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Rng = std::mt19937_64;

/// Raised when a sampler or filter reaches a numerically invalid state.
/// `where` carries the time index or iteration at which it happened (-1 if none).
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, long where = -1)
      : std::runtime_error(where >= 0 ? what + " (at index " + std::to_string(where) + ")" : what),
        where_(where) {}
  long where() const noexcept { return where_; }

 private:
  long where_;
};

/// Malformed input file; carries the 1-based line number of the offending row.
class SchemaError : public std::runtime_error {
 public:
  SchemaError(const std::string& what, long row = -1)
      : std::runtime_error(row >= 0 ? "row " + std::to_string(row) + ": " + what : what), row_(row) {}
  long row() const noexcept { return row_; }

 private:
  long row_;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Target probability of a quantile, strictly inside (0, 1).
class QuantileLevel {
 public:
  explicit QuantileLevel(double tau) : tau_(tau) {
    if (!(tau > 0.0 && tau < 1.0)) {
      throw std::invalid_argument("quantile level must lie in (0,1), got " + std::to_string(tau));
    }
  }
  double value() const noexcept { return tau_; }
  friend bool operator==(QuantileLevel a, QuantileLevel b) { return a.tau_ == b.tau_; }

 private:
  double tau_;
};

// Integer key for a quantile level, used wherever taus index maps or files.
inline std::int64_t tau_key(double tau) { return std::llround(tau * 1e6); }

struct McmcConfig {
  int draws = 3000;
  int burnin = 1000;
  // When false only the terminal state needed for forecasting is retained.
  bool keep_paths = true;

  void validate() const {
    if (draws <= 0) throw ConfigError("mcmc draws must be positive");
    if (burnin < 0) throw ConfigError("mcmc burnin must be nonnegative");
  }
};

// RNG streams are keyed by logical task identity so results do not depend on
// scheduling order.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline Rng make_stream(std::uint64_t root, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t state = splitmix64(root);
  for (auto k : keys) state = splitmix64(state ^ splitmix64(k));
  std::seed_seq seq{static_cast<std::uint32_t>(state), static_cast<std::uint32_t>(state >> 32)};
  return Rng(seq);
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace drqs
