#pragma once

#include "slcd/diffusion.hpp"
#include "slcd/numcore.hpp"
#include "slcd/reward.hpp"

#include <span>

namespace slcd {

// ------------------------------------------------------- tilted closed form

namespace detail {

// int N(z; m, S) exp(-1/2 (z-mu)'B(z-mu)) dz
//   = det(I + SB)^{-1/2} exp(-1/2 d' W d),  W = (I + BS)^{-1} B,  d = m - mu
struct GaussianTilt {
  double log_integral;
  Mat W;  // symmetric PSD weight of the exponent
};

inline GaussianTilt gaussian_tilt(const Vec& m, const Mat& S, const Vec& mu,
                                  const Mat& B) {
  const int d = static_cast<int>(m.size());
  Mat M = Mat::Identity(d, d) + B * S;
  Eigen::PartialPivLU<Mat> lu(M);
  double det = lu.determinant();
  if (!(det > 0.0))
    throw OracleError("oracle: indefinite exponent matrix in Gaussian tilt");
  GaussianTilt out;
  out.W = lu.solve(B);
  out.W = 0.5 * (out.W + out.W.transpose());
  Vec diff = m - mu;
  out.log_integral = -0.5 * std::log(det) - 0.5 * diff.dot(out.W * diff);
  return out;
}

}  // namespace detail

/// Exact tilt of one Gaussian by exp(-eta/2 (x-mu*)'A(x-mu*)):
/// S' = (S^-1 + eta A)^-1, m' = S'(S^-1 m + eta A mu*).
inline GaussianParams tilted_gaussian(const GaussianParams& q0, const Vec& quad_target,
                                      const Mat& quad, double eta) {
  const int d = q0.dim();
  Mat B = eta * quad;
  Mat M = Mat::Identity(d, d) + q0.cov * B;
  Eigen::PartialPivLU<Mat> lu(M);
  if (!(lu.determinant() > 0.0))
    throw OracleError("oracle: indefinite exponent matrix");
  Mat cov = lu.solve(q0.cov);
  cov = 0.5 * (cov + cov.transpose());
  Vec mean = lu.solve(q0.mean + q0.cov * (B * quad_target));
  return GaussianParams{std::move(mean), std::move(cov)};
}

/// Exact tilt of a Gaussian mixture: every component tilts in closed form and
/// the weights pick up the component-wise tilt integrals.
inline PriorModel tilted_mixture(const PriorModel& prior, const RewardSpec& reward,
                                 double eta) {
  if (reward.kind != RewardSpec::Kind::negative_quadratic)
    throw OracleError("oracle: tilt requires a negative_quadratic reward");
  if (prior.kind == PriorModel::Kind::point_cloud)
    throw OracleError("oracle: tilt requires a Gaussian(-mixture) prior");
  Mat B = eta * reward.quad;
  std::vector<double> log_w(prior.components.size());
  std::vector<GaussianParams> comps;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < prior.components.size(); ++k) {
    const auto& c = prior.components[k];
    auto tilt = detail::gaussian_tilt(c.mean, c.cov, reward.target, B);
    log_w[k] = std::log(std::max(prior.weights[k], 1e-300)) + tilt.log_integral;
    best = std::max(best, log_w[k]);
    comps.push_back(tilted_gaussian(c, reward.target, reward.quad, eta));
  }
  std::vector<double> w(log_w.size());
  double total = 0.0;
  for (std::size_t k = 0; k < log_w.size(); ++k) {
    w[k] = std::exp(log_w[k] - best);
    total += w[k];
  }
  for (auto& wk : w) wk /= total;
  if (comps.size() == 1) return make_gaussian_prior(std::move(comps[0]));
  return make_mixture_prior(std::move(w), std::move(comps));
}

// ------------------------------------------------------------ target oracle

/// Exact tilted target p* = q0 exp(eta r) / Z on instances where it is
/// computable: full enumeration, the Gaussian-quadratic closed form, or a
/// grid-binned reference for mixture fixtures.
struct TargetOracle {
  enum class Kind { discrete_enumeration, gaussian_quadratic, mc_reference };

  Kind kind = Kind::discrete_enumeration;
  double eta = 1.0;

  // discrete_enumeration
  FiniteDist q0;
  std::vector<double> rewards;

  // gaussian_quadratic / mc_reference
  GaussianParams gauss_prior;
  PriorModel mixture_prior;
  RewardSpec reward;

  // mc_reference grid
  Vec grid_lo, grid_hi;
  int grid_res = 32;
};

namespace detail {

inline void check_clip_mass(const PriorModel& prior, const RewardSpec& reward,
                            double tol = 1e-4) {
  // the closed form assumes the quadratic never clips; estimate the clipped
  // mass under q0 with a fixed internal stream
  RngStream guard(0x0c11f0ffULL, 0);
  const int n = 200000;
  int clipped = 0;
  for (int i = 0; i < n; ++i) {
    Vec x = sample_prior(prior, guard);
    Vec d = x - reward.target;
    if (0.5 * d.dot(reward.quad * d) > reward.r_max) ++clipped;
  }
  if (double(clipped) / n > tol)
    throw OracleError("oracle: reward clip region carries non-negligible mass");
}

}  // namespace detail

inline TargetOracle make_discrete_oracle(FiniteDist q0, std::vector<double> rewards,
                                         double eta) {
  if (static_cast<int>(rewards.size()) != q0.size())
    throw DimensionError("oracle: rewards/support size mismatch");
  TargetOracle o;
  o.kind = TargetOracle::Kind::discrete_enumeration;
  o.q0 = std::move(q0);
  o.rewards = std::move(rewards);
  o.eta = eta;
  return o;
}

inline TargetOracle make_gaussian_quadratic_oracle(GaussianParams q0,
                                                   RewardSpec reward, double eta) {
  if (reward.kind != RewardSpec::Kind::negative_quadratic)
    throw OracleError("oracle: gaussian_quadratic needs a negative_quadratic reward");
  detail::check_clip_mass(make_gaussian_prior(q0), reward);
  TargetOracle o;
  o.kind = TargetOracle::Kind::gaussian_quadratic;
  o.gauss_prior = std::move(q0);
  o.reward = std::move(reward);
  o.eta = eta;
  return o;
}

/// Grid-binned reference for mixture priors: the tilted mixture is exact, the
/// divergence is reported on a fixed grid (a documented proxy).
inline TargetOracle make_mixture_grid_oracle(PriorModel prior, RewardSpec reward,
                                             double eta, int grid_res = 32,
                                             double span_sigmas = 5.0) {
  if (reward.kind != RewardSpec::Kind::negative_quadratic)
    throw OracleError("oracle: mixture oracle needs a negative_quadratic reward");
  detail::check_clip_mass(prior, reward);
  TargetOracle o;
  o.kind = TargetOracle::Kind::mc_reference;
  o.mixture_prior = tilted_mixture(prior, reward, eta);
  o.reward = std::move(reward);
  o.eta = eta;
  o.grid_res = grid_res;
  const int d = prior.dim;
  o.grid_lo = Vec::Constant(d, std::numeric_limits<double>::infinity());
  o.grid_hi = Vec::Constant(d, -std::numeric_limits<double>::infinity());
  auto widen = [&](const PriorModel& p) {
    for (const auto& c : p.components) {
      for (int i = 0; i < d; ++i) {
        double s = std::sqrt(std::max(c.cov(i, i), 1e-12));
        o.grid_lo[i] = std::min(o.grid_lo[i], c.mean[i] - span_sigmas * s);
        o.grid_hi[i] = std::max(o.grid_hi[i], c.mean[i] + span_sigmas * s);
      }
    }
  };
  widen(prior);
  widen(o.mixture_prior);
  return o;
}

inline FiniteDist exact_target_discrete(const TargetOracle& oracle) {
  if (oracle.kind != TargetOracle::Kind::discrete_enumeration)
    throw OracleError("oracle: not a discrete oracle");
  Vec probs(oracle.q0.size());
  double best = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < oracle.q0.size(); ++i) {
    probs[i] = std::log(std::max(oracle.q0.probs[i], 1e-300)) +
               oracle.eta * oracle.rewards[i];
    best = std::max(best, probs[i]);
  }
  probs = (probs.array() - best).exp();
  probs /= probs.sum();
  return make_finite_dist(oracle.q0.support, std::move(probs));
}

inline GaussianParams exact_target_gaussian(const TargetOracle& oracle) {
  if (oracle.kind != TargetOracle::Kind::gaussian_quadratic)
    throw OracleError("oracle: not a gaussian_quadratic oracle");
  return tilted_gaussian(oracle.gauss_prior, oracle.reward.target,
                         oracle.reward.quad, oracle.eta);
}

// ----------------------------------------------- exact continuous classifier

namespace detail {

struct OuConditional {
  Vec m_base;  // m(x) = m_base + K x
  Mat K;
  Mat S;
};

// law of the clean sample given the noised one under the OU forward process
inline OuConditional ou_conditional(const GaussianParams& q0, double tau) {
  const int d = q0.dim();
  double a = std::exp(-tau);
  double s2 = 1.0 - a * a;
  Mat cov_tau = a * a * q0.cov + s2 * Mat::Identity(d, d);
  Eigen::LLT<Mat> llt(cov_tau);
  if (llt.info() != Eigen::Success)
    throw DecompositionError("oracle: marginal covariance not positive definite");
  OuConditional out;
  out.K = a * q0.cov * llt.solve(Mat::Identity(d, d));
  out.S = q0.cov - a * out.K * q0.cov;
  out.S = 0.5 * (out.S + out.S.transpose());
  out.m_base = q0.mean - out.K * (a * q0.mean);
  return out;
}

}  // namespace detail

/// Closed-form classifier value E[exp(eta r(x_T)) | x_t] for a Gaussian prior
/// with an (unclipped) quadratic reward under the OU process.
inline double exact_continuous_classifier(const GaussianParams& q0,
                                          const RewardSpec& reward,
                                          const SdeSchedule& schedule, const Vec& x,
                                          double t, double eta) {
  if (reward.kind != RewardSpec::Kind::negative_quadratic)
    throw OracleError("oracle: classifier needs a negative_quadratic reward");
  double tau = schedule.horizon - t;
  if (tau < 0.0 || tau > schedule.horizon + 1e-9)
    throw ArgumentError("oracle: time outside [0, T]");
  auto cond = detail::ou_conditional(q0, tau);
  Vec m = cond.m_base + cond.K * x;
  auto tilt = detail::gaussian_tilt(m, cond.S, reward.target, eta * reward.quad);
  return std::exp(tilt.log_integral);
}

/// The exact guidance field grad_x ln E[exp(eta r(x_T)) | x_t]; isolates
/// sampler error from learning error.
class ExactQuadraticGuidance final : public GuidanceField {
 public:
  ExactQuadraticGuidance(GaussianParams q0, RewardSpec reward, SdeSchedule schedule,
                         double eta)
      : q0_(std::move(q0)),
        reward_(std::move(reward)),
        schedule_(schedule),
        eta_(eta) {
    if (reward_.kind != RewardSpec::Kind::negative_quadratic)
      throw OracleError("oracle: guidance needs a negative_quadratic reward");
  }

  Vec evaluate(const Vec& x, double t) const override {
    auto parts = factors(t);
    Vec m = parts.cond.m_base + parts.cond.K * x;
    return -parts.cond.K.transpose() * (parts.W * (m - reward_.target));
  }

  Mat evaluate_batch(const Mat& X, double t) const override {
    auto parts = factors(t);
    Mat M = (parts.cond.K * X).colwise() + (parts.cond.m_base - reward_.target);
    return -parts.cond.K.transpose() * (parts.W * M);
  }

 private:
  struct Factors {
    detail::OuConditional cond;
    Mat W;
  };

  Factors factors(double t) const {
    Factors f;
    f.cond = detail::ou_conditional(q0_, schedule_.horizon - t);
    const int d = q0_.dim();
    Mat B = eta_ * reward_.quad;
    Mat M = Mat::Identity(d, d) + B * f.cond.S;
    Eigen::PartialPivLU<Mat> lu(M);
    if (!(lu.determinant() > 0.0))
      throw OracleError("oracle: indefinite exponent matrix");
    f.W = lu.solve(B);
    f.W = 0.5 * (f.W + f.W.transpose());
    return f;
  }

  GaussianParams q0_;
  RewardSpec reward_;
  SdeSchedule schedule_;
  double eta_;
};

// ------------------------------------------------------------ kl to target

inline double kl_to_target(const FiniteDist& empirical, const TargetOracle& oracle) {
  return divergence(empirical, exact_target_discrete(oracle), DivergenceKind::kl);
}

inline GaussianParams moment_matched_gaussian(std::span<const Vec> samples) {
  if (samples.empty()) throw ArgumentError("moment match: empty sample");
  const int d = static_cast<int>(samples[0].size());
  Vec mean = Vec::Zero(d);
  for (const Vec& x : samples) mean += x;
  mean /= double(samples.size());
  Mat cov = Mat::Zero(d, d);
  for (const Vec& x : samples) {
    Vec c = x - mean;
    cov += c * c.transpose();
  }
  cov /= double(samples.size());
  return GaussianParams{std::move(mean), std::move(cov)};
}

inline double mixture_logpdf(const PriorModel& p, const Vec& x) {
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> logp(p.components.size());
  for (std::size_t k = 0; k < p.components.size(); ++k) {
    logp[k] = std::log(std::max(p.weights[k], 1e-300)) +
              gaussian_logpdf(p.components[k], x);
    best = std::max(best, logp[k]);
  }
  double acc = 0.0;
  for (double lp : logp) acc += std::exp(lp - best);
  return best + std::log(acc);
}

/// KL(samples || p*). Gaussian fixtures use a moment-matched Gaussian
/// (exact in the limit since p* is Gaussian); mixture fixtures report the KL
/// of grid-binned histograms against exact grid masses of the tilted mixture.
inline double kl_to_target(std::span<const Vec> samples, const TargetOracle& oracle) {
  if (oracle.kind == TargetOracle::Kind::gaussian_quadratic) {
    return divergence(moment_matched_gaussian(samples), exact_target_gaussian(oracle),
                      DivergenceKind::kl);
  }
  if (oracle.kind != TargetOracle::Kind::mc_reference)
    throw OracleError("oracle: continuous samples need a continuous oracle");
  const int d = static_cast<int>(oracle.grid_lo.size());
  if (d != 2) throw OracleError("oracle: grid reference implemented for 2-D");
  const int R = oracle.grid_res;
  Vec width = (oracle.grid_hi - oracle.grid_lo) / double(R);
  Vec target = Vec::Zero(R * R);
  Vec emp = Vec::Zero(R * R);
  for (int i = 0; i < R; ++i) {
    for (int j = 0; j < R; ++j) {
      Vec center(2);
      center[0] = oracle.grid_lo[0] + (i + 0.5) * width[0];
      center[1] = oracle.grid_lo[1] + (j + 0.5) * width[1];
      target[i * R + j] = std::exp(mixture_logpdf(oracle.mixture_prior, center));
    }
  }
  target /= target.sum();
  auto cell = [&](double v, int axis) {
    int c = static_cast<int>((v - oracle.grid_lo[axis]) / width[axis]);
    return std::clamp(c, 0, R - 1);  // edge cells absorb out-of-range mass
  };
  for (const Vec& x : samples)
    emp[cell(x[0], 0) * R + cell(x[1], 1)] += 1.0;
  emp /= emp.sum();
  double kl = 0.0;
  for (int c = 0; c < R * R; ++c) {
    if (emp[c] <= 0.0) continue;
    kl += emp[c] * std::log(emp[c] / target[c]);
  }
  return std::max(0.0, kl);
}

// --------------------------------------------------------- the svdd target

/// The distribution a mean-value selector actually targets: q0 reweighted by
/// the shifted expected reward, which is a linear tilt rather than the
/// exponential one.
inline FiniteDist svdd_implied_target(const FiniteDist& q0,
                                      std::span<const double> rewards, double r_max) {
  if (static_cast<int>(rewards.size()) != q0.size())
    throw DimensionError("svdd target: rewards/support size mismatch");
  Vec probs(q0.size());
  for (int i = 0; i < q0.size(); ++i)
    probs[i] = q0.probs[i] * std::max(0.0, rewards[i] + r_max);
  double total = probs.sum();
  if (total <= 0.0) throw ArgumentError("svdd target: all values are zero");
  probs /= total;
  return make_finite_dist(q0.support, std::move(probs));
}

// ---------------------------------------------------------- quantile report

struct QuantileReport {
  double top50 = 0.0, top50_lo = 0.0, top50_hi = 0.0;
  double top10 = 0.0, top10_lo = 0.0, top10_hi = 0.0;
  int n_samples = 0;
};

/// p-th quantile with the linear interpolation convention h = (n-1)p.
inline double percentile_linear(const std::vector<double>& sorted, double p) {
  const std::size_t n = sorted.size();
  if (n == 0) throw ArgumentError("percentile: empty sample");
  if (n == 1) return sorted[0];
  double h = (double(n) - 1.0) * p;
  std::size_t lo = static_cast<std::size_t>(std::floor(h));
  if (lo >= n - 1) return sorted[n - 1];
  double frac = h - double(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

/// Top-50% and top-10% quantiles (the 50th and 90th percentiles: higher is
/// better) with percentile-bootstrap 95% intervals. Intervals are widened to
/// contain the point estimate.
inline QuantileReport quantile_report(const std::vector<double>& rewards,
                                      int bootstrap_iters, RngStream& rng) {
  if (rewards.size() < 20)
    throw ArgumentError("quantile_report: need at least 20 rewards");
  std::vector<double> sorted = rewards;
  std::sort(sorted.begin(), sorted.end());
  QuantileReport rep;
  rep.n_samples = static_cast<int>(rewards.size());
  rep.top50 = percentile_linear(sorted, 0.5);
  rep.top10 = percentile_linear(sorted, 0.9);
  std::vector<double> boot50(bootstrap_iters), boot90(bootstrap_iters);
  std::vector<double> resample(rewards.size());
  for (int b = 0; b < bootstrap_iters; ++b) {
    for (std::size_t i = 0; i < rewards.size(); ++i)
      resample[i] = rewards[rng.uniform_index(rewards.size())];
    std::sort(resample.begin(), resample.end());
    boot50[b] = percentile_linear(resample, 0.5);
    boot90[b] = percentile_linear(resample, 0.9);
  }
  std::sort(boot50.begin(), boot50.end());
  std::sort(boot90.begin(), boot90.end());
  rep.top50_lo = std::min(rep.top50, percentile_linear(boot50, 0.025));
  rep.top50_hi = std::max(rep.top50, percentile_linear(boot50, 0.975));
  rep.top10_lo = std::min(rep.top10, percentile_linear(boot90, 0.025));
  rep.top10_hi = std::max(rep.top10, percentile_linear(boot90, 0.975));
  return rep;
}

}  // namespace slcd
