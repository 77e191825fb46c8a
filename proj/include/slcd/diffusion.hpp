#pragma once

#include "slcd/numcore.hpp"

#include <functional>
#include <memory>
#include <sstream>

namespace slcd {

/// Uniform step grid for the Euler-Maruyama solver of the OU pair
///   forward:  dx = -x dtau + g dW        (tau: 0 data -> T noise)
///   reverse:  dx = [x + g^2 (score + f)] dt + g dW   (t: 0 noise -> T data)
/// g = sqrt(2) gives unit stationary variance, so every forward marginal of
/// a Gaussian (mixture) prior stays closed-form.
struct SdeSchedule {
  double horizon = 3.0;  // T
  int n_steps = 500;
  double diffusion_coeff = std::numbers::sqrt2;  // g

  void validate() const {
    if (!(horizon > 0.0)) throw ArgumentError("schedule: horizon must be positive");
    if (n_steps < 2) throw ArgumentError("schedule: need at least 2 steps");
    if (!std::isfinite(diffusion_coeff))
      throw ArgumentError("schedule: diffusion coefficient must be bounded");
  }

  double dt() const { return horizon / n_steps; }
  double grid_time(int i) const {
    return horizon * static_cast<double>(i) / static_cast<double>(n_steps);
  }
  int grid_index(double t) const {
    double k = t / horizon * n_steps;
    int i = static_cast<int>(std::llround(k));
    if (i < 0 || i > n_steps || std::abs(k - i) > 1e-6)
      throw ArgumentError("schedule: time is not on the step grid");
    return i;
  }
};

// ------------------------------------------------------------------- prior

/// Base distribution q0 with exact scores of its noised marginals; the
/// stand-in for a pre-trained diffusion model.
struct PriorModel {
  enum class Kind { gaussian, gaussian_mixture, point_cloud };

  Kind kind = Kind::gaussian;
  std::vector<double> weights;
  std::vector<GaussianParams> components;
  std::vector<Vec> points;
  int dim = 0;
};

inline PriorModel make_gaussian_prior(GaussianParams g) {
  PriorModel p;
  p.kind = PriorModel::Kind::gaussian;
  p.dim = g.dim();
  p.weights = {1.0};
  p.components.push_back(std::move(g));
  return p;
}

inline PriorModel make_mixture_prior(std::vector<double> weights,
                                     std::vector<GaussianParams> components) {
  if (weights.size() != components.size() || components.empty())
    throw ArgumentError("prior: weights/components mismatch");
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw ArgumentError("prior: negative mixture weight");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-10)
    throw ArgumentError("prior: mixture weights must sum to 1");
  int d = components[0].dim();
  for (const auto& c : components)
    if (c.dim() != d) throw DimensionError("prior: mixed component dimensions");
  PriorModel p;
  p.kind = PriorModel::Kind::gaussian_mixture;
  p.dim = d;
  p.weights = std::move(weights);
  p.components = std::move(components);
  return p;
}

inline PriorModel make_point_cloud_prior(std::vector<Vec> points) {
  if (points.empty()) throw ArgumentError("prior: empty point cloud");
  PriorModel p;
  p.kind = PriorModel::Kind::point_cloud;
  p.dim = static_cast<int>(points[0].size());
  p.points = std::move(points);
  return p;
}

inline Vec sample_prior(const PriorModel& prior, RngStream& rng) {
  switch (prior.kind) {
    case PriorModel::Kind::gaussian:
      return sample_gaussian(prior.components[0], rng);
    case PriorModel::Kind::gaussian_mixture: {
      double u = rng.uniform01();
      double acc = 0.0;
      std::size_t k = 0;
      for (; k + 1 < prior.weights.size(); ++k) {
        acc += prior.weights[k];
        if (u < acc) break;
      }
      return sample_gaussian(prior.components[k], rng);
    }
    case PriorModel::Kind::point_cloud:
      return prior.points[rng.uniform_index(prior.points.size())];
  }
  throw ArgumentError("prior: unknown kind");
}

// --------------------------------------------------------- forward process

/// Exact noised marginal q_tau: N(mu, S) -> N(mu e^-tau, e^-2tau S + (1 - e^-2tau) I).
inline PriorModel forward_marginal(const PriorModel& prior, double tau) {
  if (prior.kind == PriorModel::Kind::point_cloud)
    throw ArgumentError("forward_marginal: unsupported prior kind (point_cloud)");
  if (tau < 0.0) throw ArgumentError("forward_marginal: negative time");
  double a = std::exp(-tau);
  double s2 = 1.0 - a * a;
  PriorModel out = prior;
  Mat eye = Mat::Identity(prior.dim, prior.dim);
  for (auto& c : out.components) {
    c.mean = a * c.mean;
    c.cov = a * a * c.cov + s2 * eye;
  }
  return out;
}

namespace detail {

struct MarginalFactors {
  // per component: mean, inverse covariance, log-normalizer
  std::vector<Vec> mean;
  std::vector<Mat> cov_inv;
  std::vector<double> log_norm;  // log w_k - 1/2 (d log 2pi + log det)
  int dim = 0;
};

inline MarginalFactors marginal_factors(const PriorModel& prior, double tau) {
  if (prior.kind == PriorModel::Kind::point_cloud)
    throw ArgumentError("score: unsupported prior kind (point_cloud)");
  double a = std::exp(-tau);
  double s2 = 1.0 - a * a;
  MarginalFactors f;
  f.dim = prior.dim;
  Mat eye = Mat::Identity(prior.dim, prior.dim);
  for (std::size_t k = 0; k < prior.components.size(); ++k) {
    const auto& c = prior.components[k];
    Mat cov = a * a * c.cov + s2 * eye;
    Eigen::LLT<Mat> llt(cov);
    if (llt.info() != Eigen::Success)
      throw DecompositionError("score: marginal covariance not positive definite");
    double logdet = 0.0;
    for (int i = 0; i < prior.dim; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
    f.mean.push_back(a * c.mean);
    f.cov_inv.push_back(llt.solve(eye));
    double w = prior.weights.empty() ? 1.0 : prior.weights[k];
    f.log_norm.push_back(std::log(std::max(w, 1e-300)) -
                         0.5 * (prior.dim * std::log(2.0 * std::numbers::pi) + logdet));
  }
  return f;
}

}  // namespace detail

inline double marginal_logpdf(const PriorModel& prior, double tau, const Vec& x) {
  auto f = detail::marginal_factors(prior, tau);
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> logp(f.mean.size());
  for (std::size_t k = 0; k < f.mean.size(); ++k) {
    Vec d = x - f.mean[k];
    logp[k] = f.log_norm[k] - 0.5 * d.dot(f.cov_inv[k] * d);
    best = std::max(best, logp[k]);
  }
  double acc = 0.0;
  for (double lp : logp) acc += std::exp(lp - best);
  return best + std::log(acc);
}

/// Score of the noised marginal at forward time tau, exact for Gaussian and
/// Gaussian-mixture priors. Computed in log-space so extreme inputs stay
/// finite.
inline Vec marginal_score(const PriorModel& prior, double tau, const Vec& x) {
  auto f = detail::marginal_factors(prior, tau);
  if (x.size() != f.dim) throw DimensionError("score: dimension mismatch");
  const std::size_t K = f.mean.size();
  std::vector<double> logp(K);
  std::vector<Vec> comp_score(K);
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < K; ++k) {
    Vec d = x - f.mean[k];
    Vec sol = f.cov_inv[k] * d;
    logp[k] = f.log_norm[k] - 0.5 * d.dot(sol);
    comp_score[k] = -sol;
    best = std::max(best, logp[k]);
  }
  double denom = 0.0;
  Vec score = Vec::Zero(f.dim);
  for (std::size_t k = 0; k < K; ++k) {
    double resp = std::exp(logp[k] - best);
    denom += resp;
    score += resp * comp_score[k];
  }
  return score / denom;
}

/// Batched score over columns of X, sharing the per-time factorizations.
inline Mat marginal_score_batch(const PriorModel& prior, double tau, const Mat& X) {
  auto f = detail::marginal_factors(prior, tau);
  if (X.rows() != f.dim) throw DimensionError("score: dimension mismatch");
  const std::size_t K = f.mean.size();
  const Eigen::Index n = X.cols();
  if (K == 1) {
    return -(f.cov_inv[0] * (X.colwise() - f.mean[0]));
  }
  Mat logp(K, n);
  std::vector<Mat> comp_score(K);
  for (std::size_t k = 0; k < K; ++k) {
    Mat d = X.colwise() - f.mean[k];
    Mat sol = f.cov_inv[k] * d;
    logp.row(k) = (-0.5 * (d.array() * sol.array()).colwise().sum()).matrix();
    logp.row(k).array() += f.log_norm[k];
    comp_score[k] = -sol;
  }
  Eigen::RowVectorXd best = logp.colwise().maxCoeff();
  Mat resp = (logp.rowwise() - best).array().exp().matrix();
  Eigen::RowVectorXd denom = resp.colwise().sum();
  Mat score = Mat::Zero(f.dim, n);
  for (std::size_t k = 0; k < K; ++k)
    score += comp_score[k] * resp.row(k).asDiagonal();
  return score * denom.cwiseInverse().asDiagonal();
}

/// Score in reverse-time coordinates (t = 0 noise, t = T data).
inline Vec prior_score(const PriorModel& prior, const Vec& x, double t,
                       const SdeSchedule& schedule) {
  return marginal_score(prior, schedule.horizon - t, x);
}

// ---------------------------------------------------------------- guidance

/// Additive score term f(x, t) in the guided reverse SDE.
class GuidanceField {
 public:
  virtual ~GuidanceField() = default;
  virtual Vec evaluate(const Vec& x, double t) const = 0;
  virtual Mat evaluate_batch(const Mat& X, double t) const {
    Mat out(X.rows(), X.cols());
    for (Eigen::Index j = 0; j < X.cols(); ++j)
      out.col(j) = evaluate(X.col(j), t);
    return out;
  }
};

class ZeroGuidance final : public GuidanceField {
 public:
  Vec evaluate(const Vec& x, double) const override { return Vec::Zero(x.size()); }
  Mat evaluate_batch(const Mat& X, double) const override {
    return Mat::Zero(X.rows(), X.cols());
  }
};

class FunctionGuidance final : public GuidanceField {
 public:
  explicit FunctionGuidance(std::function<Vec(const Vec&, double)> fn)
      : fn_(std::move(fn)) {}
  Vec evaluate(const Vec& x, double t) const override { return fn_(x, t); }

 private:
  std::function<Vec(const Vec&, double)> fn_;
};

// ----------------------------------------------------------- reverse solver

/// One Euler-Maruyama step of the guided reverse SDE. Passing rng == nullptr
/// drops the Wiener increment and integrates the drift alone.
inline Vec reverse_step(const Vec& x, double t, double dt, const PriorModel& prior,
                        const SdeSchedule& schedule, const GuidanceField* guidance,
                        RngStream* rng) {
  if (!(dt > 0.0)) throw ArgumentError("reverse_step: dt must be positive");
  if (t + dt > schedule.horizon + 1e-9)
    throw ArgumentError("reverse_step: step leaves the horizon");
  double g = schedule.diffusion_coeff;
  Vec drift = marginal_score(prior, schedule.horizon - t, x);
  if (guidance) drift += guidance->evaluate(x, t);
  drift = x + g * g * drift;  // -h(x) = x for the OU drift
  if (!drift.allFinite()) {
    std::ostringstream oss;
    oss << "diffusion: non-finite drift at t=" << t << " x=[" << x.transpose() << "]";
    throw NumericError(oss.str());
  }
  Vec next = x + dt * drift;
  if (rng) next += g * std::sqrt(dt) * rng->normal_vec(static_cast<int>(x.size()));
  return next;
}

struct Trajectory {
  std::vector<double> times;
  std::vector<Vec> states;
};

/// Path on the step grid from from_t to to_t. Covers both the guided roll-in
/// (guidance set) and the plain prior roll-out (guidance null).
inline Trajectory sample_trajectory(const PriorModel& prior, const SdeSchedule& schedule,
                                    const GuidanceField* guidance, double from_t,
                                    Vec init, double to_t, RngStream& rng,
                                    bool deterministic = false) {
  schedule.validate();
  int i0 = schedule.grid_index(from_t);
  int i1 = schedule.grid_index(to_t);
  if (i0 > i1) throw ArgumentError("trajectory: from_t must not exceed to_t");
  Trajectory traj;
  traj.times.reserve(i1 - i0 + 1);
  traj.states.reserve(i1 - i0 + 1);
  Vec x = std::move(init);
  traj.times.push_back(schedule.grid_time(i0));
  traj.states.push_back(x);
  for (int i = i0; i < i1; ++i) {
    x = reverse_step(x, schedule.grid_time(i), schedule.dt(), prior, schedule,
                     guidance, deterministic ? nullptr : &rng);
    traj.times.push_back(schedule.grid_time(i + 1));
    traj.states.push_back(x);
  }
  return traj;
}

inline Trajectory sample_trajectory(const PriorModel& prior, const SdeSchedule& schedule,
                                    const GuidanceField* guidance, double from_t,
                                    const GaussianParams& init, double to_t,
                                    RngStream& rng, bool deterministic = false) {
  Vec x0 = sample_gaussian(init, rng);
  return sample_trajectory(prior, schedule, guidance, from_t, std::move(x0), to_t, rng,
                           deterministic);
}

inline Vec sample_terminal(const PriorModel& prior, const SdeSchedule& schedule,
                           const GuidanceField* guidance, double from_t, Vec init,
                           double to_t, RngStream& rng) {
  int i0 = schedule.grid_index(from_t);
  int i1 = schedule.grid_index(to_t);
  Vec x = std::move(init);
  for (int i = i0; i < i1; ++i)
    x = reverse_step(x, schedule.grid_time(i), schedule.dt(), prior, schedule,
                     guidance, &rng);
  return x;
}

/// Advances n paths in lockstep; column j draws its noise from
/// base.substream(j), so each column reproduces the single-path sampler run
/// on that substream.
inline Mat sample_terminal_batch(const PriorModel& prior, const SdeSchedule& schedule,
                                 const GuidanceField* guidance, double from_t,
                                 const Mat& init, double to_t, const RngStream& base,
                                 bool deterministic = false) {
  schedule.validate();
  int i0 = schedule.grid_index(from_t);
  int i1 = schedule.grid_index(to_t);
  const int d = static_cast<int>(init.rows());
  const Eigen::Index n = init.cols();
  std::vector<RngStream> streams;
  streams.reserve(n);
  for (Eigen::Index j = 0; j < n; ++j) streams.push_back(base.substream(j));
  Mat X = init;
  double g = schedule.diffusion_coeff;
  double dt = schedule.dt();
  double noise_scale = g * std::sqrt(dt);
  for (int i = i0; i < i1; ++i) {
    double t = schedule.grid_time(i);
    Mat drift = marginal_score_batch(prior, schedule.horizon - t, X);
    if (guidance) drift += guidance->evaluate_batch(X, t);
    drift = X + g * g * drift;
    if (!drift.allFinite()) {
      std::ostringstream oss;
      oss << "diffusion: non-finite drift in batch at t=" << t;
      throw NumericError(oss.str());
    }
    X += dt * drift;
    if (!deterministic) {
      for (Eigen::Index j = 0; j < n; ++j)
        X.col(j) += noise_scale * streams[j].normal_vec(d);
    }
  }
  return X;
}

/// n draws from N(0, I) arranged column-wise, one substream per column.
inline Mat standard_normal_batch(int dim, int n, const RngStream& base) {
  Mat X(dim, n);
  for (int j = 0; j < n; ++j) {
    RngStream s = base.substream(j);
    X.col(j) = s.normal_vec(dim);
  }
  return X;
}

}  // namespace slcd
