#pragma once

#include "slcd/numcore.hpp"
#include "slcd/reward.hpp"

#include <functional>
#include <optional>
#include <span>

namespace slcd {

inline constexpr int kTimeFeatureDim = 9;

/// Normalized time plus a 4-frequency sinusoidal embedding.
inline Vec time_features(double t, double horizon) {
  Vec f(kTimeFeatureDim);
  double u = t / horizon;
  f[0] = u;
  for (int k = 0; k < 4; ++k) {
    double w = 2.0 * std::numbers::pi * static_cast<double>(1 << k);
    f[1 + 2 * k] = std::sin(w * u);
    f[2 + 2 * k] = std::cos(w * u);
  }
  return f;
}

struct TrainExample {
  Vec x;
  double t = 0.0;
  int label = 0;
};
using TrainBatch = std::vector<TrainExample>;

struct SphericalEstimatorConfig {
  double delta = 0.1;
  int n_dirs = 64;
  std::optional<double> curvature_bound;  // only used to compute tolerances

  void validate() const {
    if (!(delta > 0.0)) throw ArgumentError("spherical: delta must be positive");
    if (n_dirs < 1) throw ArgumentError("spherical: need at least one direction");
  }
};

struct ModelGrad {
  std::vector<Mat> W;
  std::vector<Vec> b;
};

struct FitConfig {
  int epochs = 10;
  int steps = 0;  // when > 0, a fixed minibatch-step budget replaces epochs
  int batch_size = 64;
  double step_size = 1e-3;
  double momentum = 0.9;
  int divergence_warmup = 50;
};

struct FitResult {
  std::vector<double> loss_trace;
  std::uint64_t prob_clamp_count = 0;
};

/// Learned reward distribution over B histogram bins, conditioned on a state
/// and a time. A small tanh MLP with a softmax head; tanh keeps the guidance
/// field (the input gradient of the log value) smooth.
class HistogramClassifier {
 public:
  HistogramClassifier() = default;

  static HistogramClassifier init(int x_dim, const std::vector<int>& hidden,
                                  HistogramSpec hist, double horizon, RngStream& rng) {
    HistogramClassifier m = skeleton(x_dim, hidden, hist, horizon);
    for (std::size_t l = 0; l < m.W_.size(); ++l) {
      double a = std::sqrt(6.0 / double(m.W_[l].rows() + m.W_[l].cols()));
      for (Eigen::Index i = 0; i < m.W_[l].rows(); ++i)
        for (Eigen::Index j = 0; j < m.W_[l].cols(); ++j)
          m.W_[l](i, j) = a * (2.0 * rng.uniform01() - 1.0);
    }
    return m;
  }

  static HistogramClassifier zeros(int x_dim, const std::vector<int>& hidden,
                                   HistogramSpec hist, double horizon) {
    return skeleton(x_dim, hidden, hist, horizon);
  }

  int x_dim() const { return x_dim_; }
  int input_dim() const { return x_dim_ + kTimeFeatureDim; }
  int n_bins() const { return hist_.n_bins; }
  int n_layers() const { return static_cast<int>(W_.size()); }
  const HistogramSpec& hist() const { return hist_; }
  double horizon() const { return horizon_; }
  const std::vector<Mat>& weight_matrices() const { return W_; }
  const std::vector<Vec>& bias_vectors() const { return b_; }

  bool same_parameters(const HistogramClassifier& o) const {
    if (W_.size() != o.W_.size()) return false;
    for (std::size_t l = 0; l < W_.size(); ++l)
      if (W_[l] != o.W_[l] || b_[l] != o.b_[l]) return false;
    return true;
  }

  Vec features(const Vec& x, double t) const {
    if (x.size() != x_dim_)
      throw DimensionError("histmodel: input dimension mismatch");
    Vec f(input_dim());
    f.head(x_dim_) = x;
    f.tail(kTimeFeatureDim) = time_features(t, horizon_);
    return f;
  }

  Vec logits(const Vec& x, double t) const {
    Vec a = features(x, t);
    for (std::size_t l = 0; l < W_.size(); ++l) {
      Vec z = W_[l] * a + b_[l];
      if (!z.allFinite())
        throw NumericError("histmodel: non-finite activations at layer " +
                           std::to_string(l));
      a = (l + 1 < W_.size()) ? Vec(z.array().tanh()) : z;
    }
    return a;
  }

  Mat logits_batch(const Mat& X, const std::vector<double>& ts) const {
    Mat A = assemble_inputs(X, ts);
    for (std::size_t l = 0; l < W_.size(); ++l) {
      Mat Z = (W_[l] * A).colwise() + b_[l];
      if (!Z.allFinite())
        throw NumericError("histmodel: non-finite activations at layer " +
                           std::to_string(l));
      A = (l + 1 < W_.size()) ? Mat(Z.array().tanh()) : Z;
    }
    return A;
  }

  Vec predict_probs(const Vec& x, double t) const {
    return softmax(logits(x, t));
  }

  FiniteDist predict(const Vec& x, double t) const {
    return make_finite_dist(predict_probs(x, t));
  }

  // ln sum_i p_i exp(eta r_i) with the spec'd unit bin values r_i in [0, 1]
  double log_value(const Vec& x, double t, double eta) const {
    Vec l = logits(x, t);
    Vec shifted = l;
    for (int i = 0; i < n_bins(); ++i) shifted[i] += eta * hist_.bin_value(i);
    return log_sum_exp(shifted) - log_sum_exp(l);
  }

  double mean_bin_value(const Vec& x, double t) const {
    Vec p = predict_probs(x, t);
    double v = 0.0;
    for (int i = 0; i < n_bins(); ++i) v += p[i] * hist_.bin_value(i);
    return v;
  }

  /// Exact gradient w.r.t. x of ln sum_i p_i(x,t) exp(e_i): reverse mode with
  /// cotangent softmax(l + e) - softmax(l), so eta = 0 gives exactly zero.
  Vec input_grad_log_value(const Vec& x, double t, double eta) const {
    std::vector<double> exps(n_bins());
    for (int i = 0; i < n_bins(); ++i) exps[i] = eta * hist_.bin_value(i);
    return input_grad_log_value(x, t, exps);
  }

  Vec input_grad_log_value(const Vec& x, double t,
                           std::span<const double> bin_exponents) const {
    if (static_cast<int>(bin_exponents.size()) != n_bins())
      throw DimensionError("histmodel: exponent count mismatch");
    std::vector<Vec> acts;  // post-tanh activations, acts[0] = input features
    acts.push_back(features(x, t));
    for (std::size_t l = 0; l < W_.size(); ++l) {
      Vec z = W_[l] * acts.back() + b_[l];
      if (!z.allFinite())
        throw NumericError("histmodel: non-finite activations at layer " +
                           std::to_string(l));
      acts.push_back((l + 1 < W_.size()) ? Vec(z.array().tanh()) : z);
    }
    Vec l_plain = acts.back();
    Vec l_shift = l_plain;
    for (int i = 0; i < n_bins(); ++i) l_shift[i] += bin_exponents[i];
    Vec cot = softmax(l_shift) - softmax(l_plain);
    for (int l = static_cast<int>(W_.size()) - 1; l >= 0; --l) {
      cot = W_[l].transpose() * cot;
      if (l > 0) cot = cot.cwiseProduct(Vec(1.0 - acts[l].array().square()));
    }
    return cot.head(x_dim_);
  }

  Mat input_grad_log_value_batch(const Mat& X, double t, double eta) const {
    std::vector<double> ts(X.cols(), t);
    std::vector<Mat> acts;
    acts.push_back(assemble_inputs(X, ts));
    for (std::size_t l = 0; l < W_.size(); ++l) {
      Mat Z = (W_[l] * acts.back()).colwise() + b_[l];
      if (!Z.allFinite())
        throw NumericError("histmodel: non-finite activations at layer " +
                           std::to_string(l));
      acts.push_back((l + 1 < W_.size()) ? Mat(Z.array().tanh()) : Z);
    }
    Mat l_plain = acts.back();
    Mat l_shift = l_plain;
    for (int i = 0; i < n_bins(); ++i) l_shift.row(i).array() += eta * hist_.bin_value(i);
    Mat cot = softmax_cols(l_shift) - softmax_cols(l_plain);
    for (int l = static_cast<int>(W_.size()) - 1; l >= 0; --l) {
      cot = W_[l].transpose() * cot;
      if (l > 0) cot = cot.cwiseProduct(Mat(1.0 - acts[l].array().square()));
    }
    return cot.topRows(x_dim_);
  }

  // flattened parameter access, used by the trainer and finite-difference checks
  Eigen::Index n_parameters() const {
    Eigen::Index n = 0;
    for (std::size_t l = 0; l < W_.size(); ++l) n += W_[l].size() + b_[l].size();
    return n;
  }

  Vec flatten_parameters() const {
    Vec p(n_parameters());
    Eigen::Index at = 0;
    for (std::size_t l = 0; l < W_.size(); ++l) {
      p.segment(at, W_[l].size()) = Eigen::Map<const Vec>(W_[l].data(), W_[l].size());
      at += W_[l].size();
      p.segment(at, b_[l].size()) = b_[l];
      at += b_[l].size();
    }
    return p;
  }

  void set_parameters(const Vec& p) {
    if (p.size() != n_parameters())
      throw DimensionError("histmodel: parameter vector size mismatch");
    Eigen::Index at = 0;
    for (std::size_t l = 0; l < W_.size(); ++l) {
      Eigen::Map<Vec>(W_[l].data(), W_[l].size()) = p.segment(at, W_[l].size());
      at += W_[l].size();
      b_[l] = p.segment(at, b_[l].size());
      at += b_[l].size();
    }
  }

  static HistogramClassifier from_parameters(int x_dim, const std::vector<int>& hidden,
                                             HistogramSpec hist, double horizon,
                                             const Vec& params) {
    HistogramClassifier m = skeleton(x_dim, hidden, hist, horizon);
    m.set_parameters(params);
    return m;
  }

  std::vector<int> hidden_sizes() const {
    std::vector<int> h;
    for (std::size_t l = 0; l + 1 < W_.size(); ++l)
      h.push_back(static_cast<int>(W_[l].rows()));
    return h;
  }

  static Vec softmax(const Vec& logits) {
    Vec z = logits.array() - logits.maxCoeff();
    Vec e = z.array().exp();
    return e / e.sum();
  }

  static Mat softmax_cols(const Mat& logits) {
    Mat z = logits.rowwise() - logits.colwise().maxCoeff();
    Mat e = z.array().exp();
    Eigen::RowVectorXd sums = e.colwise().sum();
    return e * sums.cwiseInverse().asDiagonal();
  }

  static double log_sum_exp(const Vec& v) {
    double m = v.maxCoeff();
    return m + std::log((v.array() - m).exp().sum());
  }

 private:
  static HistogramClassifier skeleton(int x_dim, const std::vector<int>& hidden,
                                      HistogramSpec hist, double horizon) {
    if (x_dim < 1) throw ArgumentError("histmodel: bad input dimension");
    if (!(horizon > 0.0)) throw ArgumentError("histmodel: bad horizon");
    HistogramClassifier m;
    m.x_dim_ = x_dim;
    m.hist_ = hist;
    m.horizon_ = horizon;
    int in = x_dim + kTimeFeatureDim;
    for (int h : hidden) {
      if (h < 1) throw ArgumentError("histmodel: bad hidden width");
      m.W_.push_back(Mat::Zero(h, in));
      m.b_.push_back(Vec::Zero(h));
      in = h;
    }
    m.W_.push_back(Mat::Zero(hist.n_bins, in));
    m.b_.push_back(Vec::Zero(hist.n_bins));
    return m;
  }

  Mat assemble_inputs(const Mat& X, const std::vector<double>& ts) const {
    if (X.rows() != x_dim_)
      throw DimensionError("histmodel: input dimension mismatch");
    if (static_cast<Eigen::Index>(ts.size()) != X.cols())
      throw DimensionError("histmodel: time count mismatch");
    Mat A(input_dim(), X.cols());
    A.topRows(x_dim_) = X;
    for (Eigen::Index j = 0; j < X.cols(); ++j)
      A.col(j).tail(kTimeFeatureDim) = time_features(ts[j], horizon_);
    return A;
  }

  friend ModelGrad param_grad(const HistogramClassifier&, const TrainBatch&);
  friend double nll_loss(const HistogramClassifier&, const TrainBatch&,
                         std::uint64_t*);
  friend FitResult fit(HistogramClassifier&, std::span<const TrainBatch>,
                       const FitConfig&, RngStream&);

  std::vector<Mat> W_;
  std::vector<Vec> b_;
  HistogramSpec hist_;
  int x_dim_ = 0;
  double horizon_ = 1.0;
};

namespace detail {

struct BatchMatrices {
  Mat inputs;               // input_dim x n
  std::vector<int> labels;  // n
};

inline BatchMatrices assemble_batch(const HistogramClassifier& m,
                                    std::span<const TrainExample* const> examples) {
  BatchMatrices out;
  const Eigen::Index n = static_cast<Eigen::Index>(examples.size());
  out.inputs.resize(m.input_dim(), n);
  out.labels.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const TrainExample& e = *examples[j];
    if (e.label < 0 || e.label >= m.n_bins())
      throw ArgumentError("histmodel: label outside bin range");
    out.inputs.col(j) = m.features(e.x, e.t);
    out.labels[j] = e.label;
  }
  return out;
}

// forward with stored activations; returns mean NLL, fills grads when asked
inline double batch_nll_and_grad(const HistogramClassifier& m,
                                 const BatchMatrices& batch, ModelGrad* grads,
                                 std::uint64_t* clamp_count) {
  const auto& W = m.weight_matrices();
  const auto& b = m.bias_vectors();
  const Eigen::Index n = batch.inputs.cols();
  std::vector<Mat> acts;
  acts.push_back(batch.inputs);
  for (std::size_t l = 0; l < W.size(); ++l) {
    Mat Z = (W[l] * acts.back()).colwise() + b[l];
    if (!Z.allFinite())
      throw NumericError("histmodel: non-finite activations at layer " +
                         std::to_string(l));
    acts.push_back((l + 1 < W.size()) ? Mat(Z.array().tanh()) : Z);
  }
  Mat P = HistogramClassifier::softmax_cols(acts.back());
  const double floor_logp = std::log(1e-12);
  double loss = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    double logp = std::log(std::max(P(batch.labels[j], j), 0.0));
    if (logp < floor_logp) {
      logp = floor_logp;
      if (clamp_count) ++*clamp_count;
    }
    loss -= logp;
  }
  loss /= static_cast<double>(n);
  if (grads) {
    Mat delta = P;
    for (Eigen::Index j = 0; j < n; ++j) delta(batch.labels[j], j) -= 1.0;
    delta /= static_cast<double>(n);
    grads->W.assign(W.size(), Mat());
    grads->b.assign(W.size(), Vec());
    for (int l = static_cast<int>(W.size()) - 1; l >= 0; --l) {
      grads->W[l] = delta * acts[l].transpose();
      grads->b[l] = delta.rowwise().sum();
      if (l > 0) {
        delta = W[l].transpose() * delta;
        delta = delta.cwiseProduct(Mat(1.0 - acts[l].array().square()));
      }
    }
  }
  return loss;
}

}  // namespace detail

/// Mean negative log likelihood of the labels under the predicted histograms.
inline double nll_loss(const HistogramClassifier& m, const TrainBatch& batch,
                       std::uint64_t* clamp_count) {
  if (batch.empty()) throw ArgumentError("nll_loss: empty batch");
  std::vector<const TrainExample*> ptrs;
  ptrs.reserve(batch.size());
  for (const auto& e : batch) ptrs.push_back(&e);
  auto mats = detail::assemble_batch(m, ptrs);
  return detail::batch_nll_and_grad(m, mats, nullptr, clamp_count);
}

inline double nll_loss(const HistogramClassifier& m, const TrainBatch& batch) {
  return nll_loss(m, batch, nullptr);
}

/// Exact mean gradient of nll_loss w.r.t. every weight and bias.
inline ModelGrad param_grad(const HistogramClassifier& m, const TrainBatch& batch) {
  if (batch.empty()) throw ArgumentError("param_grad: empty batch");
  std::vector<const TrainExample*> ptrs;
  ptrs.reserve(batch.size());
  for (const auto& e : batch) ptrs.push_back(&e);
  auto mats = detail::assemble_batch(m, ptrs);
  ModelGrad g;
  detail::batch_nll_and_grad(m, mats, &g, nullptr);
  return g;
}

/// Minibatch SGD with momentum over the union of all aggregated datasets.
/// Deterministic given the stream: shuffling and minibatch assembly use a
/// fixed order, and gradient reduction is the batched matrix product.
inline FitResult fit(HistogramClassifier& m, std::span<const TrainBatch> sources,
                     const FitConfig& cfg, RngStream& rng) {
  std::vector<const TrainExample*> all;
  for (const auto& src : sources)
    for (const auto& e : src) all.push_back(&e);
  if (all.empty()) throw ArgumentError("fit: aggregate dataset is empty");
  FitResult result;
  const Eigen::Index n = static_cast<Eigen::Index>(all.size());
  const int bs = std::max(1, cfg.batch_size);
  const long steps_per_epoch = (n + bs - 1) / bs;
  long total_steps = cfg.steps > 0 ? cfg.steps : cfg.epochs * steps_per_epoch;
  if (total_steps <= 0) return result;

  std::vector<Eigen::Index> order(n);
  for (Eigen::Index i = 0; i < n; ++i) order[i] = i;
  auto reshuffle = [&] {
    for (Eigen::Index i = n - 1; i > 0; --i)
      std::swap(order[i], order[rng.uniform_index(i + 1)]);
  };
  reshuffle();

  std::vector<Mat> vel_W;
  std::vector<Vec> vel_b;
  for (std::size_t l = 0; l < m.W_.size(); ++l) {
    vel_W.push_back(Mat::Zero(m.W_[l].rows(), m.W_[l].cols()));
    vel_b.push_back(Vec::Zero(m.b_[l].size()));
  }

  const double nll_ceiling = 10.0 * std::log(static_cast<double>(m.n_bins()));
  Eigen::Index cursor = 0;
  std::vector<const TrainExample*> batch_ptrs;
  for (long step = 0; step < total_steps; ++step) {
    batch_ptrs.clear();
    for (int k = 0; k < bs; ++k) {
      if (cursor >= n) {
        reshuffle();
        cursor = 0;
      }
      batch_ptrs.push_back(all[order[cursor++]]);
    }
    auto mats = detail::assemble_batch(m, batch_ptrs);
    ModelGrad g;
    double loss = detail::batch_nll_and_grad(m, mats, &g, &result.prob_clamp_count);
    result.loss_trace.push_back(loss);
    if (step >= cfg.divergence_warmup &&
        (!std::isfinite(loss) || loss > nll_ceiling)) {
      throw TrainingDivergedError(
          "fit: training diverged (loss " + std::to_string(loss) +
          " above 10 ln B); try a smaller step size");
    }
    for (std::size_t l = 0; l < m.W_.size(); ++l) {
      vel_W[l] = cfg.momentum * vel_W[l] - cfg.step_size * g.W[l];
      vel_b[l] = cfg.momentum * vel_b[l] - cfg.step_size * g.b[l];
      m.W_[l] += vel_W[l];
      m.b_[l] += vel_b[l];
    }
  }
  return result;
}

inline FitResult fit(HistogramClassifier& m, const TrainBatch& data,
                     const FitConfig& cfg, RngStream& rng) {
  std::array<TrainBatch, 1> one{data};
  return fit(m, std::span<const TrainBatch>(one.data(), 1), cfg, rng);
}

/// Sphere-smoothed gradient estimate (d/delta) E[f(x + delta u) u] over the
/// unit sphere, evaluated with antithetic direction pairs so constants cancel
/// exactly and odd terms survive.
inline Vec spherical_grad(const std::function<double(const Vec&)>& f, const Vec& x,
                          const SphericalEstimatorConfig& cfg, RngStream& rng) {
  cfg.validate();
  const int d = static_cast<int>(x.size());
  Vec est = Vec::Zero(d);
  for (int i = 0; i < cfg.n_dirs; ++i) {
    Vec u = rng.normal_vec(d);
    double norm = u.norm();
    while (norm < 1e-12) {
      u = rng.normal_vec(d);
      norm = u.norm();
    }
    u /= norm;
    double fp = f(x + cfg.delta * u);
    double fm = f(x - cfg.delta * u);
    est += (0.5 * (fp - fm)) * u;
  }
  return (static_cast<double>(d) / cfg.delta) * est / static_cast<double>(cfg.n_dirs);
}

}  // namespace slcd
