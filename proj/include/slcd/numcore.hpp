#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace slcd {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// ------------------------------------------------------------------ errors

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error { using Error::Error; };
struct ArgumentError : Error { using Error::Error; };
struct DecompositionError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct CapacityError : Error { using Error::Error; };
struct OracleError : Error { using Error::Error; };

struct TrainingDivergedError : Error {
  int round = -1;
  explicit TrainingDivergedError(const std::string& msg, int round_index = -1)
      : Error(msg), round(round_index) {}
};

struct ConfigError : Error {
  std::string field;
  ConfigError(const std::string& field_path, const std::string& msg)
      : Error(field_path + ": " + msg), field(field_path) {}
};

// --------------------------------------------------------------------- rng

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix64(std::uint64_t x) {
  return splitmix64_next(x);
}

/// Splittable xoshiro256** stream. Identical (seed, stream_id) pairs replay
/// the same draw sequence; distinct stream_ids give statistically
/// independent streams, so parallel workers each take their own substream
/// instead of sharing mutable state.
class RngStream {
 public:
  RngStream() : RngStream(0, 0) {}
  RngStream(std::uint64_t seed, std::uint64_t stream_id = 0)
      : seed_(seed), stream_(stream_id) {
    std::uint64_t s = seed ^ mix64(stream_id + 0x632BE59BD9B4E019ULL);
    for (auto& w : state_) w = splitmix64_next(s);
    if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_; }

  RngStream substream(std::uint64_t k) const {
    return RngStream(seed_, mix64(stream_ + 0x9E3779B97F4A7C15ULL) + k);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5ULL, 7) * 9ULL;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // 53-bit precision in [0, 1)
  double uniform01() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // unbiased draw from {0, ..., n-1}
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw ArgumentError("uniform_index: empty range");
    std::uint64_t threshold = (-n) % n;
    for (;;) {
      std::uint64_t x = next_u64();
      if (x >= threshold) return x % n;
    }
  }

  // standard normal draw, Box-Muller with one cached value
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 1.0 - uniform01();  // (0, 1]
    double u2 = uniform01();
    double radius = std::sqrt(-2.0 * std::log(u1));
    double angle = 2.0 * std::numbers::pi * u2;
    cached_ = radius * std::sin(angle);
    has_cached_ = true;
    return radius * std::cos(angle);
  }

  Vec normal_vec(int d) {
    Vec v(d);
    for (int i = 0; i < d; ++i) v[i] = normal();
    return v;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::array<std::uint64_t, 4> state_{};
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

// ---------------------------------------------------------------- gaussian

struct GaussianParams {
  Vec mean;
  Mat cov;
  int dim() const { return static_cast<int>(mean.size()); }
};

inline GaussianParams make_gaussian(Vec mean, Mat cov) {
  if (cov.rows() != mean.size() || cov.cols() != mean.size())
    throw DimensionError("gaussian: covariance shape does not match mean");
  if (!mean.allFinite() || !cov.allFinite())
    throw ArgumentError("gaussian: non-finite parameters");
  double scale = std::max(1.0, cov.cwiseAbs().maxCoeff());
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw ArgumentError("gaussian: covariance not symmetric");
  Eigen::SelfAdjointEigenSolver<Mat> es(cov);
  if (es.info() != Eigen::Success)
    throw DecompositionError("gaussian: eigendecomposition failed");
  if (es.eigenvalues().minCoeff() < -1e-12 * scale)
    throw DecompositionError("gaussian: covariance not positive semi-definite");
  return GaussianParams{std::move(mean), std::move(cov)};
}

// A with A*A^T = cov, valid for any PSD cov (zero eigenvalues allowed).
inline Mat psd_factor(const Mat& cov) {
  Eigen::SelfAdjointEigenSolver<Mat> es(cov);
  if (es.info() != Eigen::Success)
    throw DecompositionError("psd_factor: eigendecomposition failed");
  double scale = std::max(1.0, cov.cwiseAbs().maxCoeff());
  Vec lam = es.eigenvalues();
  for (int i = 0; i < lam.size(); ++i) {
    if (lam[i] < -1e-12 * scale)
      throw DecompositionError("psd_factor: matrix not positive semi-definite");
    lam[i] = std::sqrt(std::max(0.0, lam[i]));
  }
  return es.eigenvectors() * lam.asDiagonal();
}

inline Vec sample_gaussian(const GaussianParams& g, RngStream& rng) {
  Vec z = rng.normal_vec(g.dim());
  return g.mean + psd_factor(g.cov) * z;
}

inline double gaussian_logpdf(const GaussianParams& g, const Vec& x) {
  if (x.size() != g.mean.size())
    throw DimensionError("gaussian_logpdf: dimension mismatch");
  Eigen::LLT<Mat> llt(g.cov);
  if (llt.info() != Eigen::Success)
    throw DecompositionError("gaussian_logpdf: covariance not positive definite");
  Vec diff = x - g.mean;
  Vec sol = llt.solve(diff);
  double logdet = 0.0;
  for (int i = 0; i < g.dim(); ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  return -0.5 * (diff.dot(sol) + g.dim() * std::log(2.0 * std::numbers::pi) + logdet);
}

// ------------------------------------------------------------- finite dist

struct FiniteDist {
  std::vector<std::string> support;  // optional labels; empty means indexed outcomes
  Vec probs;
  int size() const { return static_cast<int>(probs.size()); }
};

inline FiniteDist make_finite_dist(std::vector<std::string> support, Vec probs) {
  if (!support.empty() && static_cast<int>(support.size()) != probs.size())
    throw DimensionError("finite_dist: support/probs size mismatch");
  if (probs.size() == 0) throw ArgumentError("finite_dist: empty");
  for (int i = 0; i < probs.size(); ++i) {
    if (!(probs[i] > -1e-12)) throw ArgumentError("finite_dist: negative probability");
    probs[i] = std::max(0.0, probs[i]);
  }
  if (std::abs(probs.sum() - 1.0) > 1e-10)
    throw ArgumentError("finite_dist: probabilities do not sum to 1");
  return FiniteDist{std::move(support), std::move(probs)};
}

inline FiniteDist make_finite_dist(Vec probs) {
  return make_finite_dist({}, std::move(probs));
}

enum class DivergenceKind { tv, kl };

inline void check_same_support(const FiniteDist& a, const FiniteDist& b) {
  if (a.size() != b.size())
    throw DimensionError("divergence: support size mismatch");
  if (!a.support.empty() && !b.support.empty() && a.support != b.support)
    throw DimensionError("divergence: support labels differ");
}

inline double divergence(const FiniteDist& a, const FiniteDist& b, DivergenceKind kind) {
  check_same_support(a, b);
  if (kind == DivergenceKind::tv) {
    double s = 0.0;
    for (int i = 0; i < a.size(); ++i) s += std::abs(a.probs[i] - b.probs[i]);
    return std::clamp(0.5 * s, 0.0, 1.0);
  }
  double kl = 0.0;
  for (int i = 0; i < a.size(); ++i) {
    if (a.probs[i] <= 0.0) continue;
    if (b.probs[i] <= 0.0) return std::numeric_limits<double>::infinity();
    kl += a.probs[i] * std::log(a.probs[i] / b.probs[i]);
  }
  return std::max(0.0, kl);
}

inline double standard_normal_cdf(double z) {
  return 0.5 * std::erfc(-z / std::numbers::sqrt2);
}

inline double divergence(const GaussianParams& a, const GaussianParams& b,
                         DivergenceKind kind) {
  if (a.dim() != b.dim()) throw DimensionError("divergence: dimension mismatch");
  const int d = a.dim();
  if (kind == DivergenceKind::kl) {
    Eigen::LLT<Mat> lb(b.cov);
    Eigen::LLT<Mat> la(a.cov);
    if (lb.info() != Eigen::Success || la.info() != Eigen::Success)
      throw DecompositionError("gaussian kl: covariance not positive definite");
    double logdet_a = 0.0, logdet_b = 0.0;
    for (int i = 0; i < d; ++i) {
      logdet_a += 2.0 * std::log(la.matrixL()(i, i));
      logdet_b += 2.0 * std::log(lb.matrixL()(i, i));
    }
    Vec diff = b.mean - a.mean;
    double quad = diff.dot(lb.solve(diff));
    double trace = lb.solve(a.cov).trace();
    return std::max(0.0, 0.5 * (trace + quad - d + logdet_b - logdet_a));
  }
  // TV has no general closed form; the 1-D case follows from the density
  // crossing points.
  if (d != 1)
    throw ArgumentError("gaussian tv: only dimension 1 is supported");
  double m1 = a.mean[0], m2 = b.mean[0];
  double s1 = std::sqrt(a.cov(0, 0)), s2 = std::sqrt(b.cov(0, 0));
  if (s1 <= 0.0 || s2 <= 0.0)
    throw DecompositionError("gaussian tv: degenerate variance");
  if (m1 == m2 && s1 == s2) return 0.0;
  auto cdf1 = [&](double x) { return standard_normal_cdf((x - m1) / s1); };
  auto cdf2 = [&](double x) { return standard_normal_cdf((x - m2) / s2); };
  std::vector<double> cuts;
  if (s1 == s2) {
    cuts.push_back(0.5 * (m1 + m2));
  } else {
    // log-density difference is quadratic; its roots are the crossings
    double qa = 0.5 / (s2 * s2) - 0.5 / (s1 * s1);
    double qb = m1 / (s1 * s1) - m2 / (s2 * s2);
    double qc = 0.5 * (m2 * m2 / (s2 * s2) - m1 * m1 / (s1 * s1)) + std::log(s2 / s1);
    double disc = qb * qb - 4.0 * qa * qc;
    if (disc > 0.0) {
      double r = std::sqrt(disc);
      cuts.push_back((-qb - r) / (2.0 * qa));
      cuts.push_back((-qb + r) / (2.0 * qa));
      std::sort(cuts.begin(), cuts.end());
    }
  }
  double tv = 0.0, prev1 = 0.0, prev2 = 0.0;
  for (double c : cuts) {
    double c1 = cdf1(c), c2 = cdf2(c);
    tv += std::abs((c1 - prev1) - (c2 - prev2));
    prev1 = c1;
    prev2 = c2;
  }
  tv += std::abs((1.0 - prev1) - (1.0 - prev2));
  return std::clamp(0.5 * tv, 0.0, 1.0);
}

// --------------------------------------------------------- energy distance

/// Energy distance 2 E|a-b| - E|a-a'| - E|b-b'| (V-statistic, all pairs).
/// Metric-free two-sample discrepancy used as the sample-quality proxy.
inline double energy_distance(std::span<const Vec> a, std::span<const Vec> b) {
  if (a.empty() || b.empty())
    throw ArgumentError("energy_distance: empty sample");
  if (a[0].size() != b[0].size())
    throw DimensionError("energy_distance: dimension mismatch");
  auto mean_cross = [](std::span<const Vec> u, std::span<const Vec> v) {
    double s = 0.0;
    for (const Vec& x : u)
      for (const Vec& y : v) s += (x - y).norm();
    return s / (double(u.size()) * double(v.size()));
  };
  double ab = mean_cross(a, b);
  double aa = mean_cross(a, a);
  double bb = mean_cross(b, b);
  return std::max(0.0, 2.0 * ab - aa - bb);
}

/// Permutation p-value for the energy-distance two-sample test.
/// Precomputes the pooled distance matrix once (float to keep it small).
inline double energy_distance_pvalue(const std::vector<Vec>& a,
                                     const std::vector<Vec>& b,
                                     int n_perms, RngStream& rng) {
  if (a.empty() || b.empty())
    throw ArgumentError("energy_distance_pvalue: empty sample");
  const int n = static_cast<int>(a.size());
  const int m = static_cast<int>(b.size());
  const int total = n + m;
  std::vector<const Vec*> pool(total);
  for (int i = 0; i < n; ++i) pool[i] = &a[i];
  for (int j = 0; j < m; ++j) pool[n + j] = &b[j];
  Eigen::MatrixXf dist(total, total);
  for (int i = 0; i < total; ++i) {
    dist(i, i) = 0.0f;
    for (int j = i + 1; j < total; ++j) {
      float dij = static_cast<float>((*pool[i] - *pool[j]).norm());
      dist(i, j) = dij;
      dist(j, i) = dij;
    }
  }
  std::vector<int> labels(total);
  auto statistic = [&](const std::vector<int>& idx) {
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (int i = 0; i < total; ++i) {
      for (int j = i + 1; j < total; ++j) {
        double dij = dist(idx[i], idx[j]);
        bool ia = i < n, ja = j < n;
        if (ia && ja) saa += dij;
        else if (!ia && !ja) sbb += dij;
        else sab += dij;
      }
    }
    double maa = 2.0 * saa / (double(n) * n);
    double mbb = 2.0 * sbb / (double(m) * m);
    double mab = sab / (double(n) * m);
    return 2.0 * mab - maa - mbb;
  };
  for (int i = 0; i < total; ++i) labels[i] = i;
  double observed = statistic(labels);
  int n_ge = 0;
  for (int p = 0; p < n_perms; ++p) {
    for (int i = total - 1; i > 0; --i)
      std::swap(labels[i], labels[rng.uniform_index(i + 1)]);
    if (statistic(labels) >= observed) ++n_ge;
  }
  return double(1 + n_ge) / double(1 + n_perms);
}

}  // namespace slcd
