#include <catch2/catch_amalgamated.hpp>

#include "slcd/diffusion.hpp"

using namespace slcd;

namespace {

PriorModel mixture_2d() {
  Vec m1(2), m2(2);
  m1 << -1.5, 0.0;
  m2 << 1.5, 0.5;
  Mat c1 = 0.3 * Mat::Identity(2, 2);
  Mat c2(2, 2);
  c2 << 0.4, 0.1, 0.1, 0.25;
  return make_mixture_prior({0.4, 0.6}, {make_gaussian(m1, c1), make_gaussian(m2, c2)});
}

}  // namespace

TEST_CASE("standard normal prior is stationary under the forward process",
          "[diffusion]") {
  PriorModel prior = make_gaussian_prior(
      make_gaussian(Vec::Zero(3), Mat::Identity(3, 3)));
  for (double tau : {0.0, 0.1, 1.0, 5.0}) {
    PriorModel q = forward_marginal(prior, tau);
    CHECK((q.components[0].mean - Vec::Zero(3)).norm() == 0.0);
    CHECK((q.components[0].cov - Mat::Identity(3, 3)).norm() < 1e-14);
  }
}

TEST_CASE("forward marginal closed form matches a simulated forward SDE",
          "[diffusion]") {
  const double mu = 1.3, sigma2 = 0.49;
  PriorModel prior = make_gaussian_prior(
      make_gaussian(Vec::Constant(1, mu), Mat::Constant(1, 1, sigma2)));
  const double tau = std::log(2.0);
  PriorModel q = forward_marginal(prior, tau);
  CHECK_THAT(q.components[0].mean[0], Catch::Matchers::WithinAbs(mu / 2.0, 1e-12));
  CHECK_THAT(q.components[0].cov(0, 0),
             Catch::Matchers::WithinAbs(sigma2 / 4.0 + 0.75, 1e-12));

  // Monte Carlo forward simulation as the independent oracle
  RngStream rng(101, 0);
  const int n_paths = 100000;
  const double dt = 1e-3;
  const int n_steps = static_cast<int>(std::ceil(tau / dt));
  double sum = 0.0, sum2 = 0.0;
  for (int p = 0; p < n_paths; ++p) {
    double x = mu + std::sqrt(sigma2) * rng.normal();
    double t = 0.0;
    for (int i = 0; i < n_steps; ++i) {
      double h = std::min(dt, tau - t);
      x += -x * h + std::numbers::sqrt2 * std::sqrt(h) * rng.normal();
      t += h;
    }
    sum += x;
    sum2 += x * x;
  }
  double mc_mean = sum / n_paths;
  double mc_var = sum2 / n_paths - mc_mean * mc_mean;
  CHECK_THAT(mc_mean, Catch::Matchers::WithinAbs(q.components[0].mean[0], 0.02));
  CHECK_THAT(mc_var, Catch::Matchers::WithinAbs(q.components[0].cov(0, 0), 0.03));
}

TEST_CASE("kl to the stationary law decays at rate -2", "[diffusion]") {
  PriorModel prior = make_gaussian_prior(
      make_gaussian(Vec::Constant(1, 3.0), Mat::Identity(1, 1)));
  GaussianParams stationary = make_gaussian(Vec::Zero(1), Mat::Identity(1, 1));
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  int n = 0;
  for (double tau = 0.5; tau <= 3.0 + 1e-9; tau += 0.125) {
    PriorModel q = forward_marginal(prior, tau);
    double kl = divergence(
        GaussianParams{q.components[0].mean, q.components[0].cov}, stationary,
        DivergenceKind::kl);
    double y = std::log(kl);
    sx += tau;
    sy += y;
    sxx += tau * tau;
    sxy += tau * y;
    ++n;
  }
  double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  CHECK_THAT(slope, Catch::Matchers::WithinAbs(-2.0, 0.02));
}

TEST_CASE("point cloud priors have no closed-form marginal", "[diffusion]") {
  std::vector<Vec> pts{Vec::Zero(2), Vec::Ones(2)};
  PriorModel prior = make_point_cloud_prior(pts);
  CHECK_THROWS_AS(forward_marginal(prior, 0.5), ArgumentError);
  CHECK_THROWS_AS(marginal_score(prior, 0.5, Vec::Zero(2)), ArgumentError);
}

TEST_CASE("score of the stationary marginal is -x", "[diffusion]") {
  PriorModel prior = make_gaussian_prior(
      make_gaussian(Vec::Zero(2), Mat::Identity(2, 2)));
  Vec x(2);
  x << 0.7, -2.2;
  for (double tau : {0.01, 0.5, 2.0})
    CHECK((marginal_score(prior, tau, x) + x).norm() < 1e-12);
}

TEST_CASE("single gaussian score matches the quadratic form", "[diffusion]") {
  Vec mu(2);
  mu << 1.0, -0.5;
  Mat cov(2, 2);
  cov << 0.5, 0.1, 0.1, 0.8;
  PriorModel prior = make_gaussian_prior(make_gaussian(mu, cov));
  double tau = 0.7;
  PriorModel q = forward_marginal(prior, tau);
  Vec x(2);
  x << 0.3, 0.9;
  Vec expected = q.components[0].cov.llt().solve(q.components[0].mean - x);
  CHECK((marginal_score(prior, tau, x) - expected).norm() < 1e-10);
}

TEST_CASE("mixture score matches finite differences of the log density",
          "[diffusion]") {
  PriorModel prior = mixture_2d();
  RngStream rng(7, 1);
  const double h = 1e-5;
  for (int trial = 0; trial < 25; ++trial) {
    double tau = 0.05 + 2.5 * rng.uniform01();
    Vec x = 2.5 * rng.normal_vec(2);
    Vec grad = marginal_score(prior, tau, x);
    Vec fd(2);
    for (int i = 0; i < 2; ++i) {
      Vec xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      fd[i] = (marginal_logpdf(prior, tau, xp) - marginal_logpdf(prior, tau, xm)) /
              (2.0 * h);
    }
    CHECK((grad - fd).norm() <= 1e-6 * std::max(1.0, grad.norm()));
  }
}

TEST_CASE("score stays finite at extreme inputs", "[diffusion]") {
  PriorModel prior = mixture_2d();
  Vec x(2);
  x << 80.0, -120.0;
  Vec s = marginal_score(prior, 0.3, x);
  CHECK(s.allFinite());
}

TEST_CASE("batch score equals per-column score", "[diffusion]") {
  PriorModel prior = mixture_2d();
  RngStream rng(8, 0);
  Mat X(2, 17);
  for (int j = 0; j < 17; ++j) X.col(j) = 3.0 * rng.normal_vec(2);
  Mat batch = marginal_score_batch(prior, 0.9, X);
  for (int j = 0; j < 17; ++j)
    CHECK((batch.col(j) - marginal_score(prior, 0.9, Vec(X.col(j)))).norm() < 1e-12);
}

TEST_CASE("zero guidance reproduces the unguided step draw for draw",
          "[diffusion]") {
  PriorModel prior = mixture_2d();
  SdeSchedule sched{3.0, 500};
  ZeroGuidance zero;
  Vec x(2);
  x << 0.4, -0.2;
  RngStream r1(5, 0), r2(5, 0);
  Vec a = reverse_step(x, 0.6, sched.dt(), prior, sched, &zero, &r1);
  Vec b = reverse_step(x, 0.6, sched.dt(), prior, sched, nullptr, &r2);
  CHECK(a == b);
}

TEST_CASE("deterministic euler step by hand", "[diffusion]") {
  // stationary prior gives score(x) = -x; with the noise dropped,
  // x' = x + (x + 2(-x)) dt = 1 + (1 - 2) * 0.1
  PriorModel prior = make_gaussian_prior(
      make_gaussian(Vec::Zero(1), Mat::Identity(1, 1)));
  SdeSchedule sched{1.0, 10};
  Vec x = Vec::Constant(1, 1.0);
  Vec next = reverse_step(x, 0.0, 0.1, prior, sched, nullptr, nullptr);
  CHECK_THAT(next[0], Catch::Matchers::WithinAbs(0.9, 1e-12));
}

TEST_CASE("blowup in the drift names the state and time", "[diffusion]") {
  PriorModel prior = make_gaussian_prior(
      make_gaussian(Vec::Zero(1), Mat::Identity(1, 1)));
  SdeSchedule sched{1.0, 10};
  FunctionGuidance bad([](const Vec& x, double) {
    return Vec::Constant(x.size(), std::numeric_limits<double>::quiet_NaN());
  });
  RngStream rng(1, 0);
  Vec x = Vec::Constant(1, 1.0);
  CHECK_THROWS_WITH(reverse_step(x, 0.1, 0.1, prior, sched, &bad, &rng),
                    Catch::Matchers::ContainsSubstring("t=0.1"));
}

TEST_CASE("single-interval trajectory is one reverse step", "[diffusion]") {
  PriorModel prior = mixture_2d();
  SdeSchedule sched{2.0, 100};
  Vec x(2);
  x << 0.2, 0.8;
  RngStream r1(77, 0), r2(77, 0);
  double t0 = sched.grid_time(40), t1 = sched.grid_time(41);
  Trajectory traj = sample_trajectory(prior, sched, nullptr, t0, x, t1, r1);
  Vec direct = reverse_step(x, t0, sched.dt(), prior, sched, nullptr, &r2);
  REQUIRE(traj.states.size() == 2);
  CHECK(traj.states[1] == direct);
  CHECK(traj.times.front() == t0);
  CHECK(traj.times.back() == t1);
}

TEST_CASE("reverse sampling recovers a shifted gaussian prior", "[diffusion]") {
  PriorModel prior = make_gaussian_prior(
      make_gaussian(Vec::Constant(1, 2.0), Mat::Constant(1, 1, 0.5)));
  SdeSchedule sched{3.0, 500};
  RngStream rng(2025, 0);
  const int n = 10000;
  Mat x0 = standard_normal_batch(1, n, rng.substream(0));
  Mat xT = sample_terminal_batch(prior, sched, nullptr, 0.0, x0, sched.horizon,
                                 rng.substream(1));
  double mean = xT.row(0).mean();
  CHECK_THAT(mean, Catch::Matchers::WithinAbs(2.0, 0.05));
  double var = (xT.row(0).array() - mean).square().mean();
  CHECK_THAT(var, Catch::Matchers::WithinAbs(0.5, 0.05));
}

TEST_CASE("batch sampler equals the per-path sampler on each substream",
          "[diffusion]") {
  PriorModel prior = mixture_2d();
  SdeSchedule sched{2.0, 50};
  RngStream base(31, 5);
  Mat x0(2, 4);
  for (int j = 0; j < 4; ++j) {
    RngStream s = base.substream(100 + j);
    x0.col(j) = s.normal_vec(2);
  }
  Mat batch =
      sample_terminal_batch(prior, sched, nullptr, 0.0, x0, sched.horizon, base);
  for (int j = 0; j < 4; ++j) {
    RngStream s = base.substream(j);
    Vec single = sample_terminal(prior, sched, nullptr, 0.0, Vec(x0.col(j)),
                                 sched.horizon, s);
    // identical noise draws; only floating-point association differs
    CHECK((batch.col(j) - single).norm() < 1e-10);
  }
}

TEST_CASE("unguided terminal samples match direct prior draws", "[diffusion]") {
  PriorModel prior = mixture_2d();
  SdeSchedule sched{3.0, 500};
  RngStream rng(404, 0);
  const int n = 2000;
  Mat x0 = standard_normal_batch(2, n, rng.substream(0));
  Mat xT = sample_terminal_batch(prior, sched, nullptr, 0.0, x0, sched.horizon,
                                 rng.substream(1));
  std::vector<Vec> gen(n), direct(n);
  RngStream draw = rng.substream(2);
  for (int j = 0; j < n; ++j) {
    gen[j] = xT.col(j);
    direct[j] = sample_prior(prior, draw);
  }
  CHECK(energy_distance(gen, direct) < 0.05);
  RngStream perm = rng.substream(3);
  CHECK(energy_distance_pvalue(gen, direct, 99, perm) > 0.01);
}

TEST_CASE("sampling in two legs matches sampling in one leg", "[diffusion]") {
  PriorModel prior = mixture_2d();
  SdeSchedule sched{3.0, 300};
  RngStream rng(505, 0);
  const int n = 1000;
  double mid = sched.grid_time(120);
  Mat x0a = standard_normal_batch(2, n, rng.substream(0));
  Mat mid_states =
      sample_terminal_batch(prior, sched, nullptr, 0.0, x0a, mid, rng.substream(1));
  Mat two_leg = sample_terminal_batch(prior, sched, nullptr, mid, mid_states,
                                      sched.horizon, rng.substream(2));
  Mat x0b = standard_normal_batch(2, n, rng.substream(3));
  Mat one_leg = sample_terminal_batch(prior, sched, nullptr, 0.0, x0b,
                                      sched.horizon, rng.substream(4));
  std::vector<Vec> a(n), b(n);
  for (int j = 0; j < n; ++j) {
    a[j] = two_leg.col(j);
    b[j] = one_leg.col(j);
  }
  RngStream perm = rng.substream(5);
  CHECK(energy_distance_pvalue(a, b, 99, perm) > 0.01);
}

TEST_CASE("noise-free integration agrees with a fine-step reference",
          "[diffusion]") {
  PriorModel prior = make_gaussian_prior(
      make_gaussian(Vec::Constant(1, 2.0), Mat::Constant(1, 1, 0.5)));
  RngStream rng(606, 0);
  Vec x0 = rng.normal_vec(1);
  SdeSchedule coarse{3.0, 1600};
  SdeSchedule fine{3.0, 25600};
  Trajectory tc =
      sample_trajectory(prior, coarse, nullptr, 0.0, x0, 3.0, rng, true);
  Trajectory tf = sample_trajectory(prior, fine, nullptr, 0.0, x0, 3.0, rng, true);
  CHECK(std::abs(tc.states.back()[0] - tf.states.back()[0]) < 1e-3);
}

TEST_CASE("off-grid times are rejected", "[diffusion]") {
  SdeSchedule sched{1.0, 10};
  CHECK_THROWS_AS(sched.grid_index(0.051), ArgumentError);
  CHECK(sched.grid_index(0.3) == 3);
  CHECK_THROWS_AS((SdeSchedule{0.0, 10}.validate()), ArgumentError);
  CHECK_THROWS_AS((SdeSchedule{1.0, 1}.validate()), ArgumentError);
}
