#pragma once

#include "slcd/diffusion.hpp"
#include "slcd/histmodel.hpp"
#include "slcd/reward.hpp"

#include <memory>
#include <optional>

namespace slcd {

struct GuidanceConfig {
  double eta = 1.0;    // KL temperature; a free test-time knob, no retraining
  double scale = 1.0;  // multiplier applied at sampling time

  void validate() const {
    if (eta < 0.0) throw ArgumentError("guidance: eta must be non-negative");
    if (scale < 0.0) throw ArgumentError("guidance: scale must be non-negative");
  }
};

/// Score of the classifier: scale * grad_x ln sum_i R(r_i|x,t) exp(eta r_i).
class ClassifierGuidance final : public GuidanceField {
 public:
  ClassifierGuidance(HistogramClassifier model, GuidanceConfig cfg)
      : model_(std::move(model)), cfg_(cfg) {
    cfg_.validate();
  }

  Vec evaluate(const Vec& x, double t) const override {
    if (cfg_.scale == 0.0 || cfg_.eta == 0.0) return Vec::Zero(x.size());
    return cfg_.scale * model_.input_grad_log_value(x, t, cfg_.eta);
  }

  Mat evaluate_batch(const Mat& X, double t) const override {
    if (cfg_.scale == 0.0 || cfg_.eta == 0.0) return Mat::Zero(X.rows(), X.cols());
    return cfg_.scale * model_.input_grad_log_value_batch(X, t, cfg_.eta);
  }

  const HistogramClassifier& model() const { return model_; }
  const GuidanceConfig& config() const { return cfg_; }

 private:
  HistogramClassifier model_;
  GuidanceConfig cfg_;
};

inline std::shared_ptr<GuidanceField> build_guidance(const HistogramClassifier& model,
                                                     const GuidanceConfig& cfg) {
  return std::make_shared<ClassifierGuidance>(model, cfg);
}

// ------------------------------------------------------------ data rounds

/// One training triple: the junction time t, the roll-in state x_t, and the
/// reward of the terminal sample reached by rolling out with the prior.
struct RolloutRecord {
  double t = 0.0;
  Vec x;
  double reward = 0.0;
};

struct CollectOptions {
  // Round one (no guidance yet): label every grid state of each unguided
  // trajectory with the terminal reward.
  bool whole_trajectory = false;
  // Later rounds may also record rollout-interior states past the junction.
  bool record_rollout_states = false;
  int rollout_stride = 8;
};

struct CollectResult {
  std::vector<RolloutRecord> records;
  int paths = 0;
  int dropped = 0;
};

/// Roll in with the guided sampler to a uniform junction time, roll out with
/// the prior, label with the terminal reward. A path that blows up is dropped
/// and counted, never retried on the same stream.
inline CollectResult collect_round(const PriorModel& prior, const SdeSchedule& schedule,
                                   const GuidanceField* guidance,
                                   const RewardSpec& reward, int M, RngStream& rng,
                                   const CollectOptions& opts = {}) {
  if (M < 1) throw ArgumentError("collect_round: need at least one path");
  schedule.validate();
  CollectResult out;
  out.records.reserve(opts.whole_trajectory ? std::size_t(M) * (schedule.n_steps + 1)
                                            : std::size_t(M));
  const double T = schedule.horizon;
  for (int m = 0; m < M; ++m) {
    RngStream stream = rng.substream(m);
    ++out.paths;
    try {
      if (opts.whole_trajectory) {
        Vec x0 = stream.normal_vec(prior.dim);
        Trajectory traj =
            sample_trajectory(prior, schedule, guidance, 0.0, std::move(x0), T, stream);
        double r = eval_reward(reward, traj.states.back());
        for (std::size_t i = 0; i < traj.states.size(); ++i)
          out.records.push_back({traj.times[i], traj.states[i], r});
      } else {
        int junction = static_cast<int>(stream.uniform_index(schedule.n_steps + 1));
        double t = schedule.grid_time(junction);
        Vec x0 = stream.normal_vec(prior.dim);
        Vec xt = (junction == 0)
                     ? std::move(x0)
                     : sample_terminal(prior, schedule, guidance, 0.0, std::move(x0),
                                       t, stream);
        double r;
        std::vector<RolloutRecord> interior;
        if (junction == schedule.n_steps) {
          r = eval_reward(reward, xt);  // zero-length rollout
        } else if (opts.record_rollout_states) {
          Trajectory roll =
              sample_trajectory(prior, schedule, nullptr, t, xt, T, stream);
          r = eval_reward(reward, roll.states.back());
          for (std::size_t i = opts.rollout_stride;
               i + 1 < roll.states.size();
               i += opts.rollout_stride)
            interior.push_back({roll.times[i], roll.states[i], 0.0});
        } else {
          Vec xT = sample_terminal(prior, schedule, nullptr, t, xt, T, stream);
          r = eval_reward(reward, xT);
        }
        out.records.push_back({t, std::move(xt), r});
        for (auto& rec : interior) {
          rec.reward = r;
          out.records.push_back(std::move(rec));
        }
      }
    } catch (const NumericError&) {
      ++out.dropped;
    }
  }
  return out;
}

// ------------------------------------------------------------ trainer loop

struct TrainerConfig {
  int n_rounds = 4;
  int samples_per_round = 128;
  int first_round_oversample = 4;
  FitConfig fit;
  int validation_samples = 256;
  std::optional<double> validation_eta;  // defaults to the training eta
  bool reinit_each_round = false;        // image-task style restart
  std::vector<int> hidden = {64, 64};
  int n_bins = 21;
  int heldout_per_round = 32;
  CollectOptions collect;

  void validate() const {
    if (n_rounds < 1) throw ArgumentError("trainer: need at least one round");
    if (samples_per_round < 1) throw ArgumentError("trainer: need samples per round");
    if (first_round_oversample < 1)
      throw ArgumentError("trainer: oversample factor must be >= 1");
    if (validation_samples < 2)
      throw ArgumentError("trainer: need validation samples");
  }
};

struct RoundReport {
  int round = 0;  // 1-based
  double mean_reward = 0.0;
  double median_reward = 0.0;
  double se_reward = 0.0;
  double divergence_proxy = 0.0;  // energy distance to direct prior draws
  double heldout_nll = 0.0;
  std::int64_t n_train_records = 0;
};

struct SlcdResult {
  int selected_round = 1;  // 1-based index into models/reports
  std::vector<HistogramClassifier> models;
  std::vector<RoundReport> reports;
  std::vector<std::vector<RolloutRecord>> datasets;  // per-round training records
};

inline TrainBatch records_to_batch(const std::vector<RolloutRecord>& records,
                                   const RewardSpec& reward, const HistogramSpec& hist) {
  TrainBatch batch;
  batch.reserve(records.size());
  for (const auto& rec : records)
    batch.push_back(
        {rec.x, rec.t, hist.bin_index(normalize_to_unit(reward, rec.reward))});
  return batch;
}

namespace detail {

struct ValidationStats {
  double mean = 0.0, median = 0.0, se = 0.0;
};

inline ValidationStats reward_stats(std::vector<double> rewards) {
  ValidationStats s;
  const std::size_t n = rewards.size();
  double sum = 0.0, sum2 = 0.0;
  for (double r : rewards) {
    sum += r;
    sum2 += r * r;
  }
  s.mean = sum / double(n);
  double var = std::max(0.0, sum2 / double(n) - s.mean * s.mean);
  s.se = std::sqrt(var / double(n));
  std::sort(rewards.begin(), rewards.end());
  s.median = (n % 2 == 1) ? rewards[n / 2]
                          : 0.5 * (rewards[n / 2 - 1] + rewards[n / 2]);
  return s;
}

}  // namespace detail

/// Iterative loop: round n collects data with the current guidance, refits on
/// the union of all rounds, and reports validation metrics of the refit
/// model. Round one collects without guidance, so a single round reproduces
/// the offline classifier-guidance pipeline exactly. Aggregation is strictly
/// cumulative; no record is ever dropped from the training set.
inline SlcdResult run_slcd(const PriorModel& prior, const SdeSchedule& schedule,
                           const RewardSpec& reward, const TrainerConfig& trainer,
                           const GuidanceConfig& guidance_cfg, RngStream& rng) {
  trainer.validate();
  guidance_cfg.validate();
  schedule.validate();
  HistogramSpec hist(trainer.n_bins);

  RngStream init_stream = rng.substream(0x1001);
  HistogramClassifier model = HistogramClassifier::init(
      prior.dim, trainer.hidden, hist, schedule.horizon, init_stream);

  GuidanceConfig val_cfg = guidance_cfg;
  if (trainer.validation_eta) val_cfg.eta = *trainer.validation_eta;

  SlcdResult result;
  std::vector<TrainBatch> aggregate;
  TrainBatch heldout;
  std::int64_t total_records = 0;

  for (int round = 1; round <= trainer.n_rounds; ++round) {
    std::shared_ptr<GuidanceField> guidance;
    if (round > 1) guidance = build_guidance(model, guidance_cfg);

    CollectOptions opts = trainer.collect;
    opts.whole_trajectory = (round == 1);
    int m_round = trainer.samples_per_round *
                  (round == 1 ? trainer.first_round_oversample : 1);
    RngStream collect_stream = rng.substream(0x2000 + round);
    CollectResult collected = collect_round(prior, schedule, guidance.get(), reward,
                                            m_round, collect_stream, opts);

    // split a fixed-size tail off for held-out NLL reporting
    std::size_t held = std::min<std::size_t>(trainer.heldout_per_round,
                                             collected.records.size() / 4);
    std::vector<RolloutRecord> train_records(collected.records.begin(),
                                             collected.records.end() - held);
    std::vector<RolloutRecord> held_records(collected.records.end() - held,
                                            collected.records.end());
    TrainBatch held_batch = records_to_batch(held_records, reward, hist);
    heldout.insert(heldout.end(), held_batch.begin(), held_batch.end());

    aggregate.push_back(records_to_batch(train_records, reward, hist));
    total_records += static_cast<std::int64_t>(train_records.size());

    if (trainer.reinit_each_round) {
      RngStream reinit = rng.substream(0x1001);  // same init as round one
      model = HistogramClassifier::init(prior.dim, trainer.hidden, hist,
                                        schedule.horizon, reinit);
    }
    RngStream fit_stream = rng.substream(0x3000 + round);
    try {
      fit(model, std::span<const TrainBatch>(aggregate.data(), aggregate.size()),
          trainer.fit, fit_stream);
    } catch (const TrainingDivergedError& e) {
      throw TrainingDivergedError(std::string(e.what()) + " (round " +
                                      std::to_string(round) + ")",
                                  round);
    }

    // validate the refit model with guidance at the validation eta
    auto val_guidance = build_guidance(model, val_cfg);
    RngStream val_stream = rng.substream(0x4000 + round);
    Mat x0 = standard_normal_batch(prior.dim, trainer.validation_samples,
                                   val_stream.substream(0));
    Mat gens = sample_terminal_batch(prior, schedule, val_guidance.get(), 0.0, x0,
                                     schedule.horizon, val_stream.substream(1));
    std::vector<double> rewards(gens.cols());
    std::vector<Vec> gen_vecs(gens.cols());
    for (Eigen::Index j = 0; j < gens.cols(); ++j) {
      gen_vecs[j] = gens.col(j);
      rewards[j] = eval_reward(reward, gen_vecs[j]);
    }
    auto stats = detail::reward_stats(rewards);

    RngStream prior_stream = val_stream.substream(2);
    std::vector<Vec> prior_draws(trainer.validation_samples);
    for (int j = 0; j < trainer.validation_samples; ++j)
      prior_draws[j] = sample_prior(prior, prior_stream);

    RoundReport report;
    report.round = round;
    report.mean_reward = stats.mean;
    report.median_reward = stats.median;
    report.se_reward = stats.se;
    report.divergence_proxy = energy_distance(gen_vecs, prior_draws);
    report.heldout_nll = heldout.empty() ? 0.0 : nll_loss(model, heldout);
    report.n_train_records = total_records;

    result.reports.push_back(report);
    result.models.push_back(model);
    result.datasets.push_back(std::move(train_records));
  }

  // best round on validation; ties break toward the earliest round
  int best = 0;
  for (int i = 1; i < static_cast<int>(result.reports.size()); ++i)
    if (result.reports[i].mean_reward > result.reports[best].mean_reward) best = i;
  result.selected_round = best + 1;
  return result;
}

/// The offline baseline is the one-round special case of the loop.
inline SlcdResult naive_offline(const PriorModel& prior, const SdeSchedule& schedule,
                                const RewardSpec& reward, TrainerConfig trainer,
                                const GuidanceConfig& guidance_cfg, RngStream& rng) {
  trainer.n_rounds = 1;
  return run_slcd(prior, schedule, reward, trainer, guidance_cfg, rng);
}

// ----------------------------------------------------------- baselines

/// Highest-reward sample out of n independent unguided generations.
inline Vec best_of_n(const PriorModel& prior, const SdeSchedule& schedule,
                     const RewardSpec& reward, int n, RngStream& rng) {
  if (n < 1) throw ArgumentError("best_of_n: n must be >= 1");
  Vec best;
  double best_reward = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    RngStream stream = rng.substream(i);
    Vec x0 = stream.normal_vec(prior.dim);
    Vec x = sample_terminal(prior, schedule, nullptr, 0.0, std::move(x0),
                            schedule.horizon, stream);
    double r = eval_reward(reward, x);
    if (r > best_reward) {  // strict: ties keep the first
      best_reward = r;
      best = std::move(x);
    }
  }
  return best;
}

using ValueField = std::function<double(const Vec&, double)>;

/// Mean predicted unit reward; the nonnegative value head used by the
/// candidate-selection baseline.
inline ValueField mean_value_field(const HistogramClassifier& model) {
  return [model](const Vec& x, double t) { return model.mean_bin_value(x, t); };
}

/// Candidate-selection baseline: at each reverse step draw k candidate next
/// states and keep the one the value head scores highest.
inline Vec svdd_guidance_select(const ValueField& value, int k,
                                const PriorModel& prior, const SdeSchedule& schedule,
                                RngStream& rng) {
  if (k < 1) throw ArgumentError("svdd: need at least one candidate");
  schedule.validate();
  Vec x = rng.normal_vec(prior.dim);
  double dt = schedule.dt();
  for (int i = 0; i < schedule.n_steps; ++i) {
    double t = schedule.grid_time(i);
    Vec best;
    double best_value = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      Vec cand = reverse_step(x, t, dt, prior, schedule, nullptr, &rng);
      double v = (k == 1) ? 0.0 : value(cand, t + dt);
      if (v > best_value) {
        best_value = v;
        best = std::move(cand);
      }
    }
    x = std::move(best);
  }
  return x;
}

}  // namespace slcd
