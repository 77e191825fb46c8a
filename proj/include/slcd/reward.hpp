#pragma once

#include "slcd/numcore.hpp"

#include <functional>

namespace slcd {

/// Bounded reward r(x) in [-r_max, 0]. The bound is declared up front so the
/// histogram binning is fixed before any data exists.
struct RewardSpec {
  enum class Kind { negative_quadratic, region_indicator, discrete_table, custom };

  Kind kind = Kind::negative_quadratic;
  double r_max = 1.0;

  // negative_quadratic: r(x) = max(-r_max, -1/2 (x-target)'Q(x-target))
  Vec target;
  Mat quad;

  // region_indicator: 0 inside the ball, -r_max outside
  Vec center;
  double radius = 1.0;

  // discrete_table: values over the lexicographic enumeration of {1..vocab}^len
  int seq_len = 0;
  int vocab = 0;
  std::vector<double> table;

  // custom: arbitrary function, clipped into range
  std::function<double(const Vec&)> fn;
  int custom_dim = 0;

  int dim() const {
    switch (kind) {
      case Kind::negative_quadratic: return static_cast<int>(target.size());
      case Kind::region_indicator: return static_cast<int>(center.size());
      case Kind::discrete_table: return seq_len;
      case Kind::custom: return custom_dim;
    }
    return 0;
  }
};

inline RewardSpec negative_quadratic_reward(Vec target, Mat quad, double r_max) {
  if (r_max <= 0.0) throw ArgumentError("reward: r_max must be positive");
  if (quad.rows() != target.size() || quad.cols() != target.size())
    throw DimensionError("reward: quadratic shape does not match target");
  RewardSpec s;
  s.kind = RewardSpec::Kind::negative_quadratic;
  s.r_max = r_max;
  s.target = std::move(target);
  s.quad = std::move(quad);
  return s;
}

inline RewardSpec region_indicator_reward(Vec center, double radius, double r_max) {
  if (r_max <= 0.0) throw ArgumentError("reward: r_max must be positive");
  if (radius < 0.0) throw ArgumentError("reward: negative radius");
  RewardSpec s;
  s.kind = RewardSpec::Kind::region_indicator;
  s.r_max = r_max;
  s.center = std::move(center);
  s.radius = radius;
  return s;
}

inline std::size_t lexicographic_index(std::span<const int> tokens, int vocab) {
  std::size_t idx = 0;
  for (int tok : tokens) {
    if (tok < 1 || tok > vocab)
      throw ArgumentError("reward: token outside alphabet");
    idx = idx * static_cast<std::size_t>(vocab) + static_cast<std::size_t>(tok - 1);
  }
  return idx;
}

inline RewardSpec discrete_table_reward(int seq_len, int vocab,
                                        std::vector<double> values, double r_max) {
  if (r_max <= 0.0) throw ArgumentError("reward: r_max must be positive");
  if (seq_len < 1 || vocab < 1) throw ArgumentError("reward: bad table shape");
  std::size_t expected = 1;
  for (int i = 0; i < seq_len; ++i) expected *= static_cast<std::size_t>(vocab);
  if (values.size() != expected)
    throw DimensionError("reward: table size does not match vocab^len");
  for (double v : values)
    if (!(v >= -r_max - 1e-12 && v <= 1e-12))
      throw ArgumentError("reward: table value outside [-r_max, 0]");
  RewardSpec s;
  s.kind = RewardSpec::Kind::discrete_table;
  s.r_max = r_max;
  s.seq_len = seq_len;
  s.vocab = vocab;
  s.table = std::move(values);
  return s;
}

inline RewardSpec custom_reward(std::function<double(const Vec&)> fn, int dim,
                                double r_max) {
  if (r_max <= 0.0) throw ArgumentError("reward: r_max must be positive");
  RewardSpec s;
  s.kind = RewardSpec::Kind::custom;
  s.r_max = r_max;
  s.fn = std::move(fn);
  s.custom_dim = dim;
  return s;
}

inline double eval_reward(const RewardSpec& spec, const Vec& x) {
  if (x.size() != spec.dim())
    throw ArgumentError("reward: input dimension mismatch");
  double r = 0.0;
  switch (spec.kind) {
    case RewardSpec::Kind::negative_quadratic: {
      Vec d = x - spec.target;
      r = -0.5 * d.dot(spec.quad * d);
      break;
    }
    case RewardSpec::Kind::region_indicator:
      r = ((x - spec.center).norm() <= spec.radius) ? 0.0 : -spec.r_max;
      break;
    case RewardSpec::Kind::discrete_table: {
      std::vector<int> toks(spec.seq_len);
      for (int i = 0; i < spec.seq_len; ++i)
        toks[i] = static_cast<int>(std::llround(x[i]));
      r = spec.table[lexicographic_index(toks, spec.vocab)];
      break;
    }
    case RewardSpec::Kind::custom:
      r = spec.fn(x);
      break;
  }
  if (!std::isfinite(r)) throw NumericError("reward: non-finite value");
  return std::clamp(r, -spec.r_max, 0.0);
}

/// Affine map [-r_max, 0] -> [0, 1]; the gradient of the guidance field is
/// unchanged by this rescaling, so the classifier always sees unit rewards.
inline double normalize_to_unit(const RewardSpec& spec, double r) {
  if (r < -spec.r_max - 1e-9 || r > 1e-9)
    throw ArgumentError("reward: value outside [-r_max, 0]");
  return std::clamp((r + spec.r_max) / spec.r_max, 0.0, 1.0);
}

inline double unit_to_reward(const RewardSpec& spec, double r_unit) {
  if (r_unit < -1e-9 || r_unit > 1.0 + 1e-9)
    throw ArgumentError("reward: unit value outside [0, 1]");
  return std::clamp(r_unit, 0.0, 1.0) * spec.r_max - spec.r_max;
}

/// B equally spaced bin centers partitioning [0, 1]; bin 0 sits at 0 and
/// bin B-1 at 1.
struct HistogramSpec {
  int n_bins = 21;

  HistogramSpec() = default;
  explicit HistogramSpec(int bins) : n_bins(bins) {
    if (bins < 2) throw ArgumentError("histogram: need at least 2 bins");
  }

  double bin_value(int i) const {
    return static_cast<double>(i) / static_cast<double>(n_bins - 1);
  }

  // nearest bin center, ties toward the lower index
  int bin_index(double r_unit) const {
    double u = std::clamp(r_unit, 0.0, 1.0);
    double scaled = u * static_cast<double>(n_bins - 1);
    int k = static_cast<int>(std::ceil(scaled - 0.5));
    return std::clamp(k, 0, n_bins - 1);
  }

  std::vector<double> bin_values() const {
    std::vector<double> v(n_bins);
    for (int i = 0; i < n_bins; ++i) v[i] = bin_value(i);
    return v;
  }
};

}  // namespace slcd
