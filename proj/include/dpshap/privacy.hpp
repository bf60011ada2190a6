#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpshap/common.hpp"
#include "dpshap/dataset.hpp"

namespace dpshap {

enum class Mechanism { laplace, gaussian };

inline std::string to_string(Mechanism m) {
  return m == Mechanism::laplace ? "laplace" : "gaussian";
}

inline Mechanism parse_mechanism(std::string_view s) {
  if (s == "laplace" || s == "Laplace") return Mechanism::laplace;
  if (s == "gaussian" || s == "Gaussian") return Mechanism::gaussian;
  throw Error("unknown mechanism '" + std::string(s) + "'");
}

inline constexpr double kDefaultDelta = 1e-5;

// Input-perturbation noise configuration. `sensitivity` holds one entry per
// feature (the per-dimension Delta f).
struct NoiseSpec {
  Mechanism mechanism = Mechanism::laplace;
  double epsilon = 1.0;
  double delta = kDefaultDelta;
  std::vector<double> sensitivity;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw Error("epsilon must be > 0");
    if (mechanism == Mechanism::gaussian && !(delta > 0.0)) {
      throw Error("gaussian mechanism requires delta > 0");
    }
    if (delta < 0.0 || delta >= 1.0) throw Error("delta must lie in [0, 1)");
    for (double s : sensitivity) {
      if (!(s >= 0.0) || !std::isfinite(s)) throw Error("sensitivity entries must be >= 0");
    }
  }

  void validate(std::size_t d) const {
    validate();
    if (sensitivity.size() != d) {
      throw Error("sensitivity has " + std::to_string(sensitivity.size()) +
                  " entries but data has " + std::to_string(d) + " features");
    }
  }

  // The classical Gaussian calibration only guarantees (epsilon, delta)-DP
  // for epsilon <= 1; larger budgets are applied as-is and flagged.
  bool outside_classical_gaussian_regime() const {
    return mechanism == Mechanism::gaussian && epsilon > 1.0;
  }
};

inline void to_json(nlohmann::json& j, const NoiseSpec& s) {
  j = nlohmann::json{{"mechanism", to_string(s.mechanism)},
                     {"epsilon", s.epsilon},
                     {"delta", s.delta},
                     {"sensitivity", s.sensitivity},
                     {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, NoiseSpec& s) {
  s.mechanism = parse_mechanism(j.at("mechanism").get<std::string>());
  s.epsilon = j.at("epsilon").get<double>();
  s.delta = j.value("delta", kDefaultDelta);
  s.sensitivity = j.value("sensitivity", std::vector<double>{});
  s.seed = j.value("seed", std::uint64_t{0});
  s.validate();
}

// Per-feature empirical range (max - min) over the training rows.
inline std::vector<double> estimate_sensitivity(const Matrix& x) {
  if (x.rows() == 0) throw Error("estimate_sensitivity: empty data");
  std::vector<double> lo(x.cols(), std::numeric_limits<double>::infinity());
  std::vector<double> hi(x.cols(), -std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      lo[j] = std::min(lo[j], x(r, j));
      hi[j] = std::max(hi[j], x(r, j));
    }
  }
  std::vector<double> out(x.cols());
  for (std::size_t j = 0; j < x.cols(); ++j) out[j] = hi[j] - lo[j];
  return out;
}

// Laplace: b = sensitivity / epsilon.
// Gaussian: sigma = sensitivity * sqrt(2 ln(1.25 / delta)) / epsilon.
inline double noise_scale(const NoiseSpec& spec, double sensitivity) {
  spec.validate();
  if (sensitivity < 0.0) throw Error("sensitivity must be >= 0");
  if (spec.mechanism == Mechanism::laplace) return sensitivity / spec.epsilon;
  return sensitivity * std::sqrt(2.0 * std::log(1.25 / spec.delta)) / spec.epsilon;
}

// One noise draw for a given stream position; counter-based so that the value
// of a cell does not depend on generation order.
inline double noise_draw(Mechanism mechanism, double scale, std::uint64_t seed,
                         std::uint64_t counter) {
  if (scale == 0.0) return 0.0;
  const std::uint64_t key = splitmix64(seed ^ splitmix64(counter));
  if (mechanism == Mechanism::laplace) {
    const double u = bits_to_open_unit(key) - 0.5;
    return -scale * std::copysign(1.0, u) * std::log1p(-2.0 * std::fabs(u));
  }
  const double u1 = bits_to_open_unit(key);
  const double u2 = bits_to_open_unit(splitmix64(key ^ 0xd1b54a32d192ed03ULL));
  return scale * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

struct PrivatizedDataset {
  Dataset data;
  NoiseSpec spec;
  std::string parent_hash;
};

// Adds independent noise to every cell of the feature matrix. Labels are
// copied untouched. Features with zero sensitivity receive no noise.
inline PrivatizedDataset privatize(const Dataset& data, const NoiseSpec& spec) {
  spec.validate(data.d());
  PrivatizedDataset out;
  out.parent_hash = digest_of(data.features);
  out.spec = spec;
  out.data = data;
  out.data.provenance = data.provenance + "+" + to_string(spec.mechanism) +
                        "(eps=" + format_real(spec.epsilon) + ")";
  const std::size_t d = data.d();
  std::vector<double> scale(d);
  for (std::size_t j = 0; j < d; ++j) scale[j] = noise_scale(spec, spec.sensitivity[j]);
  auto& values = out.data.features.values();
  for (std::size_t r = 0; r < data.n(); ++r) {
    for (std::size_t j = 0; j < d; ++j) {
      const std::uint64_t cell = static_cast<std::uint64_t>(r) * d + j;
      values[cell] += noise_draw(spec.mechanism, scale[j], spec.seed, cell);
    }
  }
  return out;
}

}  // namespace dpshap
