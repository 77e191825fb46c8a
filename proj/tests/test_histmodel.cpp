#include <catch2/catch_amalgamated.hpp>

#include "slcd/histmodel.hpp"

using namespace slcd;

namespace {

HistogramClassifier random_net(int x_dim, std::vector<int> hidden, int bins,
                               std::uint64_t seed) {
  RngStream rng(seed, 0);
  return HistogramClassifier::init(x_dim, hidden, HistogramSpec(bins), 2.0, rng);
}

}  // namespace

TEST_CASE("zero weights predict the uniform histogram", "[histmodel]") {
  auto m = HistogramClassifier::zeros(3, {8}, HistogramSpec(21), 1.0);
  Vec p = m.predict_probs(Vec::Ones(3), 0.5);
  for (int i = 0; i < 21; ++i)
    CHECK_THAT(p[i], Catch::Matchers::WithinAbs(1.0 / 21.0, 1e-15));
}

TEST_CASE("predicted histograms normalize to one", "[histmodel]") {
  auto m = random_net(2, {16, 16}, 11, 5);
  RngStream rng(6, 0);
  for (int i = 0; i < 50; ++i) {
    Vec p = m.predict_probs(3.0 * rng.normal_vec(2), 2.0 * rng.uniform01());
    CHECK(std::abs(p.sum() - 1.0) < 1e-10);
    CHECK(p.minCoeff() >= 0.0);
  }
  // the FiniteDist wrapper revalidates the same contract
  CHECK(m.predict(Vec::Zero(2), 0.1).size() == 11);
}

TEST_CASE("nll of a saturated prediction is zero", "[histmodel]") {
  auto m = HistogramClassifier::zeros(1, {}, HistogramSpec(4), 1.0);
  Vec params = m.flatten_parameters();
  // output biases only: drive all mass onto bin 2
  params[m.n_parameters() - 2] = 200.0;
  m.set_parameters(params);
  TrainBatch batch{{Vec::Zero(1), 0.5, 2}};
  CHECK(nll_loss(m, batch) < 1e-12);
}

TEST_CASE("nll of the uniform prediction is ln B", "[histmodel]") {
  auto m = HistogramClassifier::zeros(2, {8, 8}, HistogramSpec(21), 1.0);
  TrainBatch batch{{Vec::Ones(2), 0.2, 0}, {Vec::Zero(2), 0.9, 17}};
  CHECK_THAT(nll_loss(m, batch), Catch::Matchers::WithinAbs(std::log(21.0), 1e-12));
}

TEST_CASE("nll hand value for a fixed constant predictor", "[histmodel]") {
  // constant predictor (0.5, 0.25, 0.125, 0.125); labels hit 0.5 and 0.25
  auto m = HistogramClassifier::zeros(1, {}, HistogramSpec(4), 1.0);
  Vec params = m.flatten_parameters();
  Vec bias(4);
  bias << std::log(0.5), std::log(0.25), std::log(0.125), std::log(0.125);
  params.tail(4) = bias;
  m.set_parameters(params);
  TrainBatch batch{{Vec::Zero(1), 0.1, 0}, {Vec::Zero(1), 0.7, 1}};
  CHECK_THAT(nll_loss(m, batch),
             Catch::Matchers::WithinAbs(0.5 * (std::log(2.0) + std::log(4.0)), 1e-12));
  CHECK_THAT(nll_loss(m, batch), Catch::Matchers::WithinAbs(1.0397, 1e-4));
}

TEST_CASE("nll clamps vanishing probabilities and counts them", "[histmodel]") {
  auto m = HistogramClassifier::zeros(1, {}, HistogramSpec(3), 1.0);
  Vec params = m.flatten_parameters();
  params[m.n_parameters() - 3] = 500.0;  // all mass on bin 0
  m.set_parameters(params);
  TrainBatch batch{{Vec::Zero(1), 0.5, 2}};
  std::uint64_t clamped = 0;
  double loss = nll_loss(m, batch, &clamped);
  CHECK(clamped == 1);
  CHECK_THAT(loss, Catch::Matchers::WithinAbs(-std::log(1e-12), 1e-9));
}

TEST_CASE("parameter gradient matches central finite differences", "[histmodel]") {
  auto m = random_net(2, {6, 5}, 4, 11);
  RngStream rng(12, 0);
  TrainBatch batch;
  for (int i = 0; i < 7; ++i)
    batch.push_back({rng.normal_vec(2), 2.0 * rng.uniform01(),
                     int(rng.uniform_index(4))});
  ModelGrad g = param_grad(m, batch);
  Vec flat_grad(m.n_parameters());
  {
    Eigen::Index at = 0;
    for (std::size_t l = 0; l < g.W.size(); ++l) {
      flat_grad.segment(at, g.W[l].size()) =
          Eigen::Map<const Vec>(g.W[l].data(), g.W[l].size());
      at += g.W[l].size();
      flat_grad.segment(at, g.b[l].size()) = g.b[l];
      at += g.b[l].size();
    }
  }
  Vec params = m.flatten_parameters();
  const double h = 1e-5;
  for (Eigen::Index k = 0; k < params.size(); ++k) {
    Vec pp = params, pm = params;
    pp[k] += h;
    pm[k] -= h;
    auto mp = m, mm = m;
    mp.set_parameters(pp);
    mm.set_parameters(pm);
    double fd = (nll_loss(mp, batch) - nll_loss(mm, batch)) / (2.0 * h);
    CHECK(std::abs(fd - flat_grad[k]) <= 1e-5 * (std::abs(flat_grad[k]) + 1e-4));
  }
}

TEST_CASE("output bias gradient vanishes at the symmetric configuration",
          "[histmodel]") {
  auto m = HistogramClassifier::zeros(2, {4}, HistogramSpec(4), 1.0);
  TrainBatch batch;
  RngStream rng(3, 0);
  for (int label = 0; label < 4; ++label)
    batch.push_back({rng.normal_vec(2), 0.5, label});  // balanced labels
  ModelGrad g = param_grad(m, batch);
  CHECK(g.b.back().cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("duplicating the batch leaves the mean gradient unchanged",
          "[histmodel]") {
  auto m = random_net(2, {6}, 5, 21);
  RngStream rng(9, 0);
  TrainBatch batch;
  for (int i = 0; i < 5; ++i)
    batch.push_back({rng.normal_vec(2), rng.uniform01(), int(rng.uniform_index(5))});
  TrainBatch doubled = batch;
  doubled.insert(doubled.end(), batch.begin(), batch.end());
  ModelGrad g1 = param_grad(m, batch);
  ModelGrad g2 = param_grad(m, doubled);
  for (std::size_t l = 0; l < g1.W.size(); ++l) {
    CHECK((g1.W[l] - g2.W[l]).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((g1.b[l] - g2.b[l]).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("input gradient of the log value vanishes at eta zero", "[histmodel]") {
  auto m = random_net(3, {16, 16}, 21, 21);
  RngStream rng(4, 0);
  Vec x = rng.normal_vec(3);
  Vec g = m.input_grad_log_value(x, 0.3, 0.0);
  CHECK(g.cwiseAbs().maxCoeff() == 0.0);
  CHECK_THAT(m.log_value(x, 0.3, 0.0), Catch::Matchers::WithinAbs(0.0, 1e-14));
}

TEST_CASE("a network that ignores x has zero input gradient", "[histmodel]") {
  auto m = random_net(2, {8}, 11, 31);
  Vec params = m.flatten_parameters();
  // first layer stores x-columns first in column-major order
  params.head(2 * 8).setZero();
  m.set_parameters(params);
  Vec g = m.input_grad_log_value(Vec::Ones(2), 0.7, 1.5);
  CHECK(g.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("input gradient matches finite differences of the log value",
          "[histmodel]") {
  auto m = random_net(2, {16, 16}, 21, 41);
  RngStream rng(42, 0);
  const double h = 1e-6;
  for (int trial = 0; trial < 20; ++trial) {
    Vec x = 2.0 * rng.normal_vec(2);
    double t = 2.0 * rng.uniform01();
    double eta = 1.0;
    Vec g = m.input_grad_log_value(x, t, eta);
    Vec fd(2);
    for (int i = 0; i < 2; ++i) {
      Vec xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      fd[i] = (m.log_value(xp, t, eta) - m.log_value(xm, t, eta)) / (2.0 * h);
    }
    CHECK((g - fd).norm() <= 1e-5 * std::max(g.norm(), 1e-6));
  }
}

TEST_CASE("shifting every bin exponent by a constant leaves the gradient fixed",
          "[histmodel]") {
  auto m = random_net(2, {12}, 11, 51);
  RngStream rng(52, 0);
  for (int trial = 0; trial < 10; ++trial) {
    Vec x = rng.normal_vec(2);
    double t = rng.uniform01();
    std::vector<double> base(11), shifted(11);
    for (int i = 0; i < 11; ++i) {
      base[i] = 2.0 * m.hist().bin_value(i);
      shifted[i] = base[i] + 7.3;
    }
    Vec g0 = m.input_grad_log_value(x, t, base);
    Vec g1 = m.input_grad_log_value(x, t, shifted);
    CHECK((g0 - g1).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("guidance equals the ratio of tilted probability gradients",
          "[histmodel]") {
  // f = (sum_i grad p_i e^{eta r_i}) / (sum_i p_i e^{eta r_i}), with the
  // per-bin gradients taken by finite differences as the independent route
  auto m = random_net(2, {10}, 7, 61);
  RngStream rng(62, 0);
  const double h = 1e-6;
  double eta = 1.3;
  for (int trial = 0; trial < 10; ++trial) {
    Vec x = rng.normal_vec(2);
    double t = rng.uniform01();
    Vec p = m.predict_probs(x, t);
    Vec num = Vec::Zero(2);
    double den = 0.0;
    for (int i = 0; i < 7; ++i) {
      double w = std::exp(eta * m.hist().bin_value(i));
      Vec dp(2);
      for (int k = 0; k < 2; ++k) {
        Vec xp = x, xm = x;
        xp[k] += h;
        xm[k] -= h;
        dp[k] = (m.predict_probs(xp, t)[i] - m.predict_probs(xm, t)[i]) / (2.0 * h);
      }
      num += w * dp;
      den += w * p[i];
    }
    Vec expected = num / den;
    Vec g = m.input_grad_log_value(x, t, eta);
    CHECK((g - expected).norm() <= 1e-4 * std::max(1.0, expected.norm()));
  }
}

TEST_CASE("batch input gradient equals the per-column gradient", "[histmodel]") {
  auto m = random_net(2, {16, 16}, 21, 71);
  RngStream rng(72, 0);
  Mat X(2, 9);
  for (int j = 0; j < 9; ++j) X.col(j) = rng.normal_vec(2);
  Mat G = m.input_grad_log_value_batch(X, 0.4, 2.0);
  for (int j = 0; j < 9; ++j)
    CHECK((G.col(j) - m.input_grad_log_value(Vec(X.col(j)), 0.4, 2.0)).norm() <
          1e-12);
}

TEST_CASE("spherical estimate of a constant is exactly zero", "[histmodel]") {
  RngStream rng(81, 0);
  auto f = [](const Vec&) { return 4.2; };
  Vec g = spherical_grad(f, Vec::Zero(3), {0.2, 32, {}}, rng);
  CHECK(g.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("spherical estimate of a linear map is exact in 1-d", "[histmodel]") {
  RngStream rng(82, 0);
  auto f = [](const Vec& x) { return 3.5 * x[0] - 1.0; };
  Vec x = Vec::Constant(1, 0.7);
  Vec g = spherical_grad(f, x, {0.05, 8, {}}, rng);
  CHECK_THAT(g[0], Catch::Matchers::WithinAbs(3.5, 1e-12));
}

TEST_CASE("spherical estimate of the cubic has error delta squared",
          "[histmodel]") {
  auto f = [](const Vec& x) { return x[0] * x[0] * x[0]; };
  for (double delta : {0.1, 0.01}) {
    for (double x0 : {-1.5, -0.3, 0.0, 0.8, 2.0}) {
      RngStream rng(83, 0);
      Vec x = Vec::Constant(1, x0);
      Vec g = spherical_grad(f, x, {delta, 16, {}}, rng);
      double err = std::abs(g[0] - 3.0 * x0 * x0);
      CHECK_THAT(err, Catch::Matchers::WithinAbs(delta * delta, 1e-9));
      // curvature bound d delta M / 2 with M = sup |f''| over the delta ball
      double M = 6.0 * (std::abs(x0) + delta);
      CHECK(err <= 1.0 * delta * M / 2.0 + 1e-12);
    }
  }
}

TEST_CASE("spherical error of quadratic-plus-cubic fields respects the bound",
          "[histmodel]") {
  // 2-d polynomial; curvature bound from the Hessian over the delta ball
  auto f = [](const Vec& x) {
    return x[0] * x[0] * x[0] + x[0] * x[1] + x[1] * x[1];
  };
  auto grad = [](const Vec& x) {
    Vec g(2);
    g << 3.0 * x[0] * x[0] + x[1], x[0] + 2.0 * x[1];
    return g;
  };
  RngStream rng(84, 0);
  for (double delta : {0.1, 0.01}) {
    for (int trial = 0; trial < 4; ++trial) {
      Vec x = rng.normal_vec(2);
      RngStream est_rng(85 + trial, 0);
      Vec g = spherical_grad(f, x, {delta, 200000, {}}, est_rng);
      double M = 6.0 * (std::abs(x[0]) + delta) + 3.0;
      double bound = 2.0 * delta * M / 2.0;
      CHECK((g - grad(x)).norm() <= bound);
    }
  }
}

TEST_CASE("fit drives a single-example dataset below 0.01 nll", "[histmodel]") {
  auto m = random_net(2, {16}, 21, 91);
  TrainBatch data{{Vec::Ones(2), 0.5, 13}};
  FitConfig cfg;
  cfg.steps = 2000;
  cfg.batch_size = 8;
  cfg.step_size = 1e-3;
  RngStream rng(92, 0);
  fit(m, data, cfg, rng);
  CHECK(nll_loss(m, data) < 0.01);
}

TEST_CASE("fit recovers an input-independent label distribution", "[histmodel]") {
  // labels drawn from a fixed histogram regardless of x; the maximum
  // likelihood fit converges to that histogram
  RngStream rng(93, 0);
  Vec p(5);
  p << 0.35, 0.25, 0.2, 0.15, 0.05;
  TrainBatch data;
  for (int i = 0; i < 10000; ++i) {
    double u = rng.uniform01();
    int label = 4;
    double acc = 0.0;
    for (int k = 0; k < 5; ++k) {
      acc += p[k];
      if (u < acc) {
        label = k;
        break;
      }
    }
    data.push_back({rng.normal_vec(2), 2.0 * rng.uniform01(), label});
  }
  auto m = random_net(2, {16}, 5, 94);
  FitConfig cfg;
  cfg.steps = 4000;
  cfg.batch_size = 128;
  cfg.step_size = 2e-3;
  RngStream fit_rng(95, 0);
  fit(m, data, cfg, fit_rng);
  RngStream probe(96, 0);
  for (int i = 0; i < 5; ++i) {
    Vec pred = m.predict_probs(probe.normal_vec(2), 2.0 * probe.uniform01());
    double tv = 0.5 * (pred - p).cwiseAbs().sum();
    CHECK(tv < 0.02);
  }
}

TEST_CASE("fitting on one-bin labels concentrates the prediction", "[histmodel]") {
  RngStream rng(97, 0);
  TrainBatch data;
  for (int i = 0; i < 200; ++i)
    data.push_back({rng.normal_vec(2), rng.uniform01(), 7});
  auto m = random_net(2, {16}, 11, 98);
  FitConfig cfg;
  cfg.steps = 3000;
  cfg.batch_size = 64;
  cfg.step_size = 2e-3;
  RngStream fit_rng(99, 0);
  fit(m, data, cfg, fit_rng);
  CHECK(nll_loss(m, data) < 0.01);
  for (const auto& e : data) CHECK(m.predict_probs(e.x, e.t)[7] > 0.99);
}

TEST_CASE("zero epochs return the model unchanged", "[histmodel]") {
  auto m = random_net(2, {8}, 5, 101);
  auto before = m;
  FitConfig cfg;
  cfg.epochs = 0;
  TrainBatch data{{Vec::Zero(2), 0.1, 1}};
  RngStream rng(102, 0);
  FitResult res = fit(m, data, cfg, rng);
  CHECK(m.same_parameters(before));
  CHECK(res.loss_trace.empty());
}

TEST_CASE("an absurd step size raises the divergence error", "[histmodel]") {
  RngStream rng(103, 0);
  TrainBatch data;
  for (int i = 0; i < 64; ++i)
    data.push_back({rng.normal_vec(2), rng.uniform01(), i % 2});
  auto m = random_net(2, {8}, 2, 104);
  FitConfig cfg;
  cfg.steps = 400;
  cfg.batch_size = 32;
  cfg.step_size = 1e3;
  RngStream fit_rng(105, 0);
  CHECK_THROWS_AS(fit(m, data, cfg, fit_rng), TrainingDivergedError);
}

TEST_CASE("fit is deterministic given the stream", "[histmodel]") {
  RngStream rng(106, 0);
  TrainBatch data;
  for (int i = 0; i < 300; ++i)
    data.push_back({rng.normal_vec(2), rng.uniform01(), int(rng.uniform_index(5))});
  auto m1 = random_net(2, {8}, 5, 107);
  auto m2 = m1;
  FitConfig cfg;
  cfg.steps = 200;
  RngStream r1(108, 0), r2(108, 0);
  fit(m1, data, cfg, r1);
  fit(m2, data, cfg, r2);
  CHECK(m1.same_parameters(m2));
}

TEST_CASE("smoothed loss trace falls on a learnable fixture", "[histmodel]") {
  RngStream rng(109, 0);
  HistogramSpec hist(11);
  TrainBatch data;
  for (int i = 0; i < 4000; ++i) {
    Vec x = rng.normal_vec(2);
    double v = std::clamp(0.5 + 0.3 * x[0], 0.0, 1.0);
    data.push_back({x, rng.uniform01(), hist.bin_index(v)});
  }
  auto m = random_net(2, {16}, 11, 110);
  FitConfig cfg;
  cfg.steps = 2500;
  cfg.batch_size = 64;
  cfg.step_size = 2e-3;
  RngStream fit_rng(111, 0);
  FitResult res = fit(m, data, cfg, fit_rng);
  auto window_mean = [&](std::size_t lo, std::size_t hi) {
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += res.loss_trace[i];
    return s / double(hi - lo);
  };
  std::size_t n = res.loss_trace.size();
  double early = window_mean(0, n / 10);
  double mid = window_mean(n / 2, n / 2 + n / 10);
  double late = window_mean(n - n / 10, n);
  CHECK(late < early);
  CHECK(late <= mid + 0.05);
}
