#pragma once

#include "slcd/histmodel.hpp"
#include "slcd/loop.hpp"
#include "slcd/numcore.hpp"
#include "slcd/reward.hpp"

#include <functional>
#include <string>

namespace slcd {

inline constexpr int kMaskToken = 0;

/// Sequence over {1..V} with MASK holes; t = 0 is all-masked, t = T fully
/// unmasked in a completed generation.
struct SeqState {
  std::vector<int> tokens;

  int length() const { return static_cast<int>(tokens.size()); }
  bool fully_unmasked() const {
    for (int tok : tokens)
      if (tok == kMaskToken) return false;
    return true;
  }
  int n_masked() const {
    int n = 0;
    for (int tok : tokens)
      if (tok == kMaskToken) ++n;
    return n;
  }
  bool operator==(const SeqState&) const = default;
};

inline SeqState all_masked(int length) {
  SeqState s;
  s.tokens.assign(length, kMaskToken);
  return s;
}

inline std::string to_string(const SeqState& s) {
  std::string out;
  for (int i = 0; i < s.length(); ++i) {
    if (i) out += ' ';
    out += (s.tokens[i] == kMaskToken) ? std::string("M")
                                       : std::to_string(s.tokens[i]);
  }
  return out;
}

/// Discrete base distribution with an absorbing-mask forward process.
/// alpha(t) = t/T is the unmasked fraction: alpha(0) = 0, alpha(T) = 1.
struct DiscretePrior {
  enum class Kind { factorized, markov_chain };

  Kind kind = Kind::factorized;
  int seq_len = 0;
  int vocab = 0;
  Mat position_probs;  // factorized: seq_len x vocab, rows sum to 1
  Vec initial;         // markov: vocab
  Mat transition;      // markov: vocab x vocab, rows sum to 1

  double alpha(double t, double T) const { return std::clamp(t / T, 0.0, 1.0); }
};

inline void check_rows_sum_to_one(const Mat& m, const char* what) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (m.row(i).minCoeff() < -1e-12)
      throw ArgumentError(std::string(what) + ": negative probability");
    if (std::abs(m.row(i).sum() - 1.0) > 1e-10)
      throw ArgumentError(std::string(what) + ": row does not sum to 1");
  }
}

inline DiscretePrior make_factorized_prior(Mat position_probs) {
  check_rows_sum_to_one(position_probs, "discrete prior");
  DiscretePrior p;
  p.kind = DiscretePrior::Kind::factorized;
  p.seq_len = static_cast<int>(position_probs.rows());
  p.vocab = static_cast<int>(position_probs.cols());
  p.position_probs = std::move(position_probs);
  return p;
}

inline DiscretePrior make_markov_prior(Vec initial, Mat transition, int seq_len) {
  if (transition.rows() != transition.cols() ||
      transition.rows() != initial.size())
    throw DimensionError("discrete prior: transition shape mismatch");
  Mat init_row = initial.transpose();
  check_rows_sum_to_one(init_row, "discrete prior initial");
  check_rows_sum_to_one(transition, "discrete prior transition");
  DiscretePrior p;
  p.kind = DiscretePrior::Kind::markov_chain;
  p.seq_len = seq_len;
  p.vocab = static_cast<int>(initial.size());
  p.initial = std::move(initial);
  p.transition = std::move(transition);
  return p;
}

// ------------------------------------------------------------- enumeration

/// All fully unmasked sequences in lexicographic order (token 1 first).
inline std::vector<SeqState> enumerate_space(int L, int V) {
  if (L < 1 || V < 1) throw ArgumentError("enumerate_space: bad shape");
  double count = std::pow(double(V), double(L));
  if (count > 1e6) throw CapacityError("enumerate_space: space larger than 10^6");
  std::size_t n = static_cast<std::size_t>(std::llround(count));
  std::vector<SeqState> out;
  out.reserve(n);
  SeqState s;
  s.tokens.assign(L, 1);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(s);
    for (int pos = L - 1; pos >= 0; --pos) {
      if (s.tokens[pos] < V) {
        ++s.tokens[pos];
        break;
      }
      s.tokens[pos] = 1;
    }
  }
  return out;
}

inline double sequence_prob(const DiscretePrior& prior, const SeqState& x) {
  if (!x.fully_unmasked())
    throw ArgumentError("sequence_prob: sequence has masked positions");
  double p = 1.0;
  if (prior.kind == DiscretePrior::Kind::factorized) {
    for (int i = 0; i < prior.seq_len; ++i)
      p *= prior.position_probs(i, x.tokens[i] - 1);
  } else {
    p = prior.initial[x.tokens[0] - 1];
    for (int i = 1; i < prior.seq_len; ++i)
      p *= prior.transition(x.tokens[i - 1] - 1, x.tokens[i] - 1);
  }
  return p;
}

inline FiniteDist prior_distribution(const DiscretePrior& prior) {
  auto space = enumerate_space(prior.seq_len, prior.vocab);
  Vec probs(space.size());
  std::vector<std::string> labels(space.size());
  for (std::size_t i = 0; i < space.size(); ++i) {
    probs[static_cast<Eigen::Index>(i)] = sequence_prob(prior, space[i]);
    labels[i] = to_string(space[i]);
  }
  probs /= probs.sum();
  return make_finite_dist(std::move(labels), std::move(probs));
}

inline FiniteDist empirical_distribution(const std::vector<SeqState>& samples,
                                         int L, int V) {
  auto space = enumerate_space(L, V);
  Vec counts = Vec::Zero(space.size());
  for (const auto& s : samples) {
    std::vector<int> toks = s.tokens;
    counts[static_cast<Eigen::Index>(lexicographic_index(toks, V))] += 1.0;
  }
  counts /= double(samples.size());
  std::vector<std::string> labels(space.size());
  for (std::size_t i = 0; i < space.size(); ++i) labels[i] = to_string(space[i]);
  return make_finite_dist(std::move(labels), std::move(counts));
}

inline double eval_reward(const RewardSpec& spec, const SeqState& x) {
  if (spec.kind != RewardSpec::Kind::discrete_table)
    throw ArgumentError("reward: sequence input needs a discrete_table reward");
  if (!x.fully_unmasked())
    throw ArgumentError("reward: sequence has masked positions");
  if (x.length() != spec.seq_len)
    throw ArgumentError("reward: sequence length mismatch");
  return spec.table[lexicographic_index(x.tokens, spec.vocab)];
}

// ---------------------------------------------------------- forward masking

/// Each position of a clean sequence is independently masked with probability
/// 1 - alpha(t).
inline SeqState mask_forward(const DiscretePrior& prior, const SeqState& x0,
                             double t, double T, RngStream& rng) {
  if (!x0.fully_unmasked())
    throw ArgumentError("mask_forward: input must be fully unmasked");
  double keep = prior.alpha(t, T);
  SeqState out = x0;
  for (int i = 0; i < out.length(); ++i)
    if (rng.uniform01() >= keep) out.tokens[i] = kMaskToken;
  return out;
}

// --------------------------------------------------- conditional unmasking

/// P(x_pos = v | unmasked context). Exact row for factorized priors;
/// forward-backward messages along the chain for markov priors.
inline Vec conditional_at(const DiscretePrior& prior, const SeqState& x, int pos) {
  if (pos < 0 || pos >= prior.seq_len)
    throw ArgumentError("conditional_at: position out of range");
  const int V = prior.vocab;
  if (prior.kind == DiscretePrior::Kind::factorized)
    return prior.position_probs.row(pos).transpose();

  const int L = prior.seq_len;
  auto allowed = [&](int i, int v) {
    return x.tokens[i] == kMaskToken || i == pos || x.tokens[i] == v + 1;
  };
  Mat fwd(L, V);
  for (int v = 0; v < V; ++v)
    fwd(0, v) = allowed(0, v) ? prior.initial[v] : 0.0;
  for (int i = 1; i < L; ++i)
    for (int v = 0; v < V; ++v) {
      double acc = 0.0;
      if (allowed(i, v))
        for (int u = 0; u < V; ++u) acc += fwd(i - 1, u) * prior.transition(u, v);
      fwd(i, v) = acc;
    }
  Mat bwd(L, V);
  for (int v = 0; v < V; ++v) bwd(L - 1, v) = 1.0;
  for (int i = L - 2; i >= 0; --i)
    for (int v = 0; v < V; ++v) {
      double acc = 0.0;
      for (int u = 0; u < V; ++u)
        if (allowed(i + 1, u)) acc += prior.transition(v, u) * bwd(i + 1, u);
      bwd(i, v) = acc;
    }
  Vec marg(V);
  for (int v = 0; v < V; ++v) marg[v] = fwd(pos, v) * bwd(pos, v);
  double total = marg.sum();
  if (total <= 0.0)
    throw NumericError("conditional_at: context has zero probability");
  return marg / total;
}

// -------------------------------------------------------- exact classifier

/// E over prior completions of exp(eta * reward). For the absorbing-mask
/// process the completion law given the unmasked context does not depend on
/// t, so the value is a function of the partial state alone.
inline double exact_discrete_classifier(const DiscretePrior& prior,
                                        const RewardSpec& reward, const SeqState& x,
                                        double /*t*/, double eta) {
  if (x.length() != prior.seq_len)
    throw ArgumentError("exact_classifier: length mismatch");
  std::vector<int> masked;
  for (int i = 0; i < x.length(); ++i)
    if (x.tokens[i] == kMaskToken) masked.push_back(i);
  double combos = std::pow(double(prior.vocab), double(masked.size()));
  if (combos > 1e6)
    throw CapacityError("exact_classifier: completion set larger than 10^6");
  if (masked.empty()) return std::exp(eta * eval_reward(reward, x));

  SeqState full = x;
  double num = 0.0, den = 0.0;
  std::vector<int> digits(masked.size(), 1);
  std::size_t n = static_cast<std::size_t>(std::llround(combos));
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t k = 0; k < masked.size(); ++k)
      full.tokens[masked[k]] = digits[k];
    double w;
    if (prior.kind == DiscretePrior::Kind::factorized) {
      w = 1.0;
      for (std::size_t k = 0; k < masked.size(); ++k)
        w *= prior.position_probs(masked[k], digits[k] - 1);
    } else {
      w = sequence_prob(prior, full);  // conditioning constant cancels below
    }
    num += w * std::exp(eta * eval_reward(reward, full));
    den += w;
    for (int k = static_cast<int>(masked.size()) - 1; k >= 0; --k) {
      if (digits[k] < prior.vocab) {
        ++digits[k];
        break;
      }
      digits[k] = 1;
    }
  }
  if (den <= 0.0)
    throw NumericError("exact_classifier: context has zero probability");
  return num / den;
}

// ---------------------------------------------------------------- guidance

/// Log of the nonnegative value v(x, t) used to reweight unmask proposals.
struct DiscreteGuidance {
  std::function<double(const SeqState&, double)> log_value;
  double kappa = 1.0;  // discrete guidance scale
};

/// Precomputed exact classifier values over every partial state; makes the
/// exact-guided sampler a table lookup.
class ExactDiscreteValue {
 public:
  ExactDiscreteValue(const DiscretePrior& prior, const RewardSpec& reward,
                     double eta)
      : seq_len_(prior.seq_len), vocab_(prior.vocab) {
    double count = std::pow(double(vocab_ + 1), double(seq_len_));
    if (count > 2e6)
      throw CapacityError("exact value table: partial-state space too large");
    std::size_t n = static_cast<std::size_t>(std::llround(count));
    log_values_.resize(n);
    SeqState s;
    s.tokens.assign(seq_len_, kMaskToken);
    for (std::size_t i = 0; i < n; ++i) {
      log_values_[i] =
          std::log(exact_discrete_classifier(prior, reward, s, 0.0, eta));
      for (int pos = seq_len_ - 1; pos >= 0; --pos) {
        if (s.tokens[pos] < vocab_) {
          ++s.tokens[pos];
          break;
        }
        s.tokens[pos] = kMaskToken;
      }
    }
  }

  double log_value(const SeqState& x, double) const {
    std::size_t idx = 0;
    for (int tok : x.tokens)
      idx = idx * static_cast<std::size_t>(vocab_ + 1) +
            static_cast<std::size_t>(tok);
    return log_values_[idx];
  }

  DiscreteGuidance guidance(double kappa = 1.0) const {
    return DiscreteGuidance{
        [this](const SeqState& s, double t) { return log_value(s, t); }, kappa};
  }

 private:
  int seq_len_;
  int vocab_;
  std::vector<double> log_values_;
};

/// One-hot-plus-mask encoding: V+1 channels per position, channel 0 = MASK.
inline Vec encode_seq(const SeqState& x, int vocab) {
  Vec v = Vec::Zero(static_cast<Eigen::Index>(x.length()) * (vocab + 1));
  for (int i = 0; i < x.length(); ++i)
    v[static_cast<Eigen::Index>(i) * (vocab + 1) + x.tokens[i]] = 1.0;
  return v;
}

inline DiscreteGuidance classifier_log_value_guidance(const HistogramClassifier& model,
                                                      int vocab, double eta,
                                                      double kappa = 1.0) {
  return DiscreteGuidance{
      [model, vocab, eta](const SeqState& s, double t) {
        return model.log_value(encode_seq(s, vocab), t, eta);
      },
      kappa};
}

/// Mean-value ablation: reweight by the expected unit reward instead of the
/// exponential-tilt value.
inline DiscreteGuidance classifier_mean_value_guidance(const HistogramClassifier& model,
                                                       int vocab, double kappa = 1.0) {
  return DiscreteGuidance{
      [model, vocab](const SeqState& s, double t) {
        return std::log(std::max(model.mean_bin_value(encode_seq(s, vocab), t),
                                 1e-300));
      },
      kappa};
}

struct DiscreteSampleStats {
  int fallback_count = 0;  // guided rows that degenerated to the prior row
};

/// Token distribution at an unmasking position: the prior conditional,
/// reweighted by value(candidate)^kappa and renormalized when guided.
inline Vec unmask_distribution(const DiscretePrior& prior, const SeqState& x, int pos,
                               double t_next, const DiscreteGuidance* guidance,
                               DiscreteSampleStats* stats = nullptr) {
  Vec cond = conditional_at(prior, x, pos);
  if (!guidance || guidance->kappa == 0.0) return cond;
  const int V = prior.vocab;
  Vec logw(V);
  SeqState candidate = x;
  bool any = false;
  for (int v = 0; v < V; ++v) {
    if (cond[v] <= 0.0) {
      logw[v] = -std::numeric_limits<double>::infinity();
      continue;
    }
    candidate.tokens[pos] = v + 1;
    logw[v] = std::log(cond[v]) +
              guidance->kappa * guidance->log_value(candidate, t_next);
    if (std::isfinite(logw[v])) any = true;
  }
  if (!any) {
    if (stats) ++stats->fallback_count;
    return cond;
  }
  double m = logw.maxCoeff();
  Vec w = (logw.array() - m).exp();
  return w / w.sum();
}

/// One reverse step of the absorbing-mask process: each masked position
/// unmasks with probability (alpha(t+dt) - alpha(t)) / (1 - alpha(t)); filled
/// positions are drawn left to right so later fills condition on earlier
/// ones within the same step.
inline SeqState reverse_unmask_step(const SeqState& x, double t, double dt,
                                    const DiscretePrior& prior, double T,
                                    const DiscreteGuidance* guidance, RngStream& rng,
                                    DiscreteSampleStats* stats = nullptr) {
  if (t + dt > T + 1e-9)
    throw ArgumentError("reverse_unmask_step: step leaves the horizon");
  double a0 = prior.alpha(t, T);
  double a1 = prior.alpha(t + dt, T);
  double p_unmask = (a0 >= 1.0) ? 1.0 : std::clamp((a1 - a0) / (1.0 - a0), 0.0, 1.0);
  SeqState out = x;
  std::vector<int> to_fill;
  for (int i = 0; i < out.length(); ++i) {
    if (out.tokens[i] != kMaskToken) continue;
    if (rng.uniform01() < p_unmask) to_fill.push_back(i);
  }
  for (int pos : to_fill) {
    Vec dist = unmask_distribution(prior, out, pos, t + dt, guidance, stats);
    double u = rng.uniform01();
    double acc = 0.0;
    int v = prior.vocab - 1;
    for (int w = 0; w < prior.vocab; ++w) {
      acc += dist[w];
      if (u < acc) {
        v = w;
        break;
      }
    }
    out.tokens[pos] = v + 1;
  }
  return out;
}

/// Generation from all-MASK at t = 0 to the junction grid index (or all the
/// way to T with to_step = n_steps).
inline SeqState sample_sequence(const DiscretePrior& prior, int n_steps, double T,
                                const DiscreteGuidance* guidance, RngStream& rng,
                                int from_step = 0, SeqState init = {},
                                int to_step = -1,
                                DiscreteSampleStats* stats = nullptr) {
  if (n_steps < 1) throw ArgumentError("sample_sequence: need steps");
  if (to_step < 0) to_step = n_steps;
  SeqState x = init.tokens.empty() ? all_masked(prior.seq_len) : std::move(init);
  double dt = T / n_steps;
  for (int i = from_step; i < to_step; ++i)
    x = reverse_unmask_step(x, i * dt, dt, prior, T, guidance, rng, stats);
  return x;
}

// --------------------------------------------------------------- baselines

inline SeqState best_of_n_discrete(const DiscretePrior& prior,
                                   const RewardSpec& reward, int n, int n_steps,
                                   double T, RngStream& rng) {
  if (n < 1) throw ArgumentError("best_of_n: n must be >= 1");
  SeqState best;
  double best_reward = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    RngStream stream = rng.substream(i);
    SeqState s = sample_sequence(prior, n_steps, T, nullptr, stream);
    double r = eval_reward(reward, s);
    if (r > best_reward) {
      best_reward = r;
      best = std::move(s);
    }
  }
  return best;
}

using SeqValueField = std::function<double(const SeqState&, double)>;

/// Candidate-selection baseline on sequences: k proposals per reverse step,
/// keep the argmax of the value head.
inline SeqState svdd_select_discrete(const DiscretePrior& prior,
                                     const SeqValueField& value, int k, int n_steps,
                                     double T, RngStream& rng) {
  if (k < 1) throw ArgumentError("svdd: need at least one candidate");
  SeqState x = all_masked(prior.seq_len);
  double dt = T / n_steps;
  for (int i = 0; i < n_steps; ++i) {
    double t = i * dt;
    SeqState best;
    double best_value = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      SeqState cand = reverse_unmask_step(x, t, dt, prior, T, nullptr, rng);
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

// ----------------------------------------------------------- training loop

struct DiscreteSlcdResult {
  int selected_round = 1;
  std::vector<HistogramClassifier> models;
  std::vector<RoundReport> reports;
  std::vector<TrainBatch> datasets;
};

/// The iterative loop on the masked process. Round one collects unguided
/// trajectories and labels every grid state with the terminal reward; later
/// rounds roll in with the current classifier and record the junction pair.
inline DiscreteSlcdResult run_slcd_discrete(const DiscretePrior& prior,
                                            const RewardSpec& reward, int n_steps,
                                            double T, const TrainerConfig& trainer,
                                            const GuidanceConfig& guidance_cfg,
                                            double kappa, RngStream& rng,
                                            bool mean_value_guidance = false) {
  trainer.validate();
  guidance_cfg.validate();
  HistogramSpec hist(trainer.n_bins);
  const int enc_dim = prior.seq_len * (prior.vocab + 1);

  RngStream init_stream = rng.substream(0x1001);
  HistogramClassifier model =
      HistogramClassifier::init(enc_dim, trainer.hidden, hist, T, init_stream);

  GuidanceConfig val_cfg = guidance_cfg;
  if (trainer.validation_eta) val_cfg.eta = *trainer.validation_eta;

  FiniteDist prior_dist = prior_distribution(prior);

  DiscreteSlcdResult result;
  std::vector<TrainBatch> aggregate;
  TrainBatch heldout;
  std::int64_t total_records = 0;
  const double dt = T / n_steps;

  auto make_guidance = [&](const HistogramClassifier& m,
                           const GuidanceConfig& cfg) -> DiscreteGuidance {
    if (mean_value_guidance)
      return classifier_mean_value_guidance(m, prior.vocab, kappa);
    return classifier_log_value_guidance(m, prior.vocab, cfg.eta,
                                         kappa * cfg.scale);
  };

  for (int round = 1; round <= trainer.n_rounds; ++round) {
    TrainBatch round_batch;
    RngStream collect_stream = rng.substream(0x2000 + round);
    int m_round = trainer.samples_per_round *
                  (round == 1 ? trainer.first_round_oversample : 1);
    DiscreteGuidance guidance;
    bool guided = round > 1;
    if (guided) guidance = make_guidance(model, guidance_cfg);

    for (int m = 0; m < m_round; ++m) {
      RngStream stream = collect_stream.substream(m);
      if (round == 1) {
        SeqState x = all_masked(prior.seq_len);
        std::vector<SeqState> states;
        states.reserve(n_steps + 1);
        states.push_back(x);
        for (int i = 0; i < n_steps; ++i) {
          x = reverse_unmask_step(x, i * dt, dt, prior, T, nullptr, stream);
          states.push_back(x);
        }
        double r = eval_reward(reward, x);
        int label = hist.bin_index(normalize_to_unit(reward, r));
        for (int i = 0; i <= n_steps; ++i)
          round_batch.push_back({encode_seq(states[i], prior.vocab), i * dt, label});
      } else {
        int junction = static_cast<int>(stream.uniform_index(n_steps + 1));
        SeqState xt = sample_sequence(prior, n_steps, T, &guidance, stream, 0, {},
                                      junction);
        SeqState xT = (junction == n_steps)
                          ? xt
                          : sample_sequence(prior, n_steps, T, nullptr, stream,
                                            junction, xt, n_steps);
        double r = eval_reward(reward, xT);
        round_batch.push_back({encode_seq(xt, prior.vocab), junction * dt,
                               hist.bin_index(normalize_to_unit(reward, r))});
      }
    }

    std::size_t held = std::min<std::size_t>(trainer.heldout_per_round,
                                             round_batch.size() / 4);
    TrainBatch train_batch(round_batch.begin(), round_batch.end() - held);
    heldout.insert(heldout.end(), round_batch.end() - held, round_batch.end());
    total_records += static_cast<std::int64_t>(train_batch.size());
    aggregate.push_back(std::move(train_batch));

    if (trainer.reinit_each_round) {
      RngStream reinit = rng.substream(0x1001);
      model = HistogramClassifier::init(enc_dim, trainer.hidden, hist, T, reinit);
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

    DiscreteGuidance val_guidance = make_guidance(model, val_cfg);
    RngStream val_stream = rng.substream(0x4000 + round);
    std::vector<SeqState> gens(trainer.validation_samples);
    std::vector<double> rewards(trainer.validation_samples);
    for (int j = 0; j < trainer.validation_samples; ++j) {
      RngStream s = val_stream.substream(j);
      gens[j] = sample_sequence(prior, n_steps, T, &val_guidance, s);
      rewards[j] = eval_reward(reward, gens[j]);
    }
    auto stats = detail::reward_stats(rewards);
    FiniteDist emp = empirical_distribution(gens, prior.seq_len, prior.vocab);

    RoundReport report;
    report.round = round;
    report.mean_reward = stats.mean;
    report.median_reward = stats.median;
    report.se_reward = stats.se;
    report.divergence_proxy = divergence(emp, prior_dist, DivergenceKind::tv);
    report.heldout_nll = heldout.empty() ? 0.0 : nll_loss(model, heldout);
    report.n_train_records = total_records;

    result.reports.push_back(report);
    result.models.push_back(model);
    result.datasets.push_back(aggregate.back());
  }

  int best = 0;
  for (int i = 1; i < static_cast<int>(result.reports.size()); ++i)
    if (result.reports[i].mean_reward > result.reports[best].mean_reward) best = i;
  result.selected_round = best + 1;
  return result;
}

}  // namespace slcd
