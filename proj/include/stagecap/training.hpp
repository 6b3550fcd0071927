#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "stagecap/corpus.hpp"
#include "stagecap/error.hpp"
#include "stagecap/graph.hpp"
#include "stagecap/masking.hpp"
#include "stagecap/model.hpp"
#include "stagecap/rng.hpp"
#include "stagecap/vocab.hpp"

namespace stagecap {

enum class Regime { kAR, kNA, kMNIC };

inline std::string regime_name(Regime r) {
  switch (r) {
    case Regime::kAR:
      return "ar";
    case Regime::kNA:
      return "na";
    default:
      return "mnic";
  }
}

inline Regime parse_regime(const std::string& s) {
  if (s == "ar" || s == "aic") return Regime::kAR;
  if (s == "na" || s == "naic") return Regime::kNA;
  if (s == "mnic") return Regime::kMNIC;
  throw Error("unknown regime '" + s + "' (expected ar, na or mnic)");
}

inline DecoderMode mode_for(Regime r) {
  return r == Regime::kAR ? DecoderMode::kCausal : DecoderMode::kBidirectional;
}

struct TrainConfig {
  Regime regime = Regime::kMNIC;
  RatioSet ratios{{0.4, 0.6, 0.8, 1.0}};
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::size_t warmup = 400;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
  bool noise = true;
  std::size_t noise_words = 1;
  // Present every example once per ratio instead of sampling one ratio.
  bool replicate_ratios = false;

  /// NA always trains the fully masked case; the ratio set is forced to {1}.
  void normalize() {
    if (regime == Regime::kNA) ratios = RatioSet({1.0});
  }

  void validate() const {
    if (batch_size == 0) throw Error("train config: batch_size must be >= 1");
    if (warmup == 0) throw Error("train config: warmup must be >= 1");
    if (regime == Regime::kNA && ratios.size() != 1) {
      throw Error("train config: regime na requires the ratio set {1.0}");
    }
  }
};

struct OptimizerState {
  std::size_t step = 0;
  std::vector<NDArray> first_moment;
  std::vector<NDArray> second_moment;
};

/// d^-0.5 * min(step^-0.5, step * warmup^-1.5).
inline double lr_schedule(std::size_t step, std::size_t d_model,
                          std::size_t warmup) {
  if (step == 0) throw Error("lr_schedule: step must be >= 1");
  if (warmup == 0) throw Error("lr_schedule: warmup must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

/// Bias-corrected Adam update in place.
inline void adam_step(OptimizerState& state, std::vector<NDArray>& params,
                      const std::vector<NDArray>& grads, double lr,
                      double beta1, double beta2, double eps) {
  if (params.size() != grads.size()) {
    throw Error("adam_step: parameter and gradient counts differ");
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.shape(), 0.0);
      state.second_moment.emplace_back(p.shape(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw Error("adam_step: optimizer state does not match parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape() ||
        state.first_moment[i].shape() != params[i].shape()) {
      throw Error("adam_step: shape mismatch for parameter " +
                  std::to_string(i));
    }
    if (!grads[i].all_finite()) {
      throw Error("adam_step: non-finite gradient at step " +
                  std::to_string(state.step + 1));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    NDArray& p = params[i];
    NDArray& m = state.first_moment[i];
    NDArray& v = state.second_moment[i];
    const NDArray& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
    }
  }
}

struct TrainingExample {
  TokenSeq input_ids;
  TokenSeq target_ids;
  std::vector<bool> weight_mask;
  DecoderMode mode;
  double ratio = 1.0;
};

/// Builds the decoder input for one reference at a given masking ratio
/// (ignored for AR).
inline TrainingExample make_example_at_ratio(const TokenSeq& target,
                                             Regime regime, double ratio,
                                             Rng& rng, const Vocab& vocab,
                                             bool noise,
                                             std::size_t noise_words = 1) {
  if (target.empty()) throw Error("training example: empty reference");
  TrainingExample ex{{}, target, std::vector<bool>(target.size(), true),
                     mode_for(regime), ratio};
  switch (regime) {
    case Regime::kAR:
      // [MASK] doubles as the start symbol; the input is the target shifted
      // right by one.
      ex.input_ids.push_back(kMask);
      ex.input_ids.insert(ex.input_ids.end(), target.begin(), target.end() - 1);
      ex.ratio = 0.0;
      break;
    case Regime::kNA:
      ex.input_ids.assign(target.size(), kMask);
      ex.ratio = 1.0;
      break;
    case Regime::kMNIC: {
      MaskedExample m = mask_sequence(target, ratio, rng);
      if (noise) m = inject_noise(std::move(m), rng, vocab, noise_words);
      ex.input_ids = std::move(m.input_ids);
      break;
    }
  }
  return ex;
}

/// One uniformly chosen reference of the scene, with a ratio drawn from the
/// set for MNIC.
inline TrainingExample make_training_example(const Scene& scene, Regime regime,
                                             const RatioSet& ratios, Rng& rng,
                                             const Vocab& vocab,
                                             bool noise = true,
                                             std::size_t noise_words = 1) {
  if (scene.references.empty()) {
    throw Error("training example: scene " + scene.id + " has no references");
  }
  const TokenSeq& target =
      scene.references[uniform_index(rng, scene.references.size())];
  const double ratio = regime == Regime::kMNIC ? sample_ratio(ratios, rng)
                       : regime == Regime::kNA ? 1.0
                                               : 0.0;
  return make_example_at_ratio(target, regime, ratio, rng, vocab, noise,
                               noise_words);
}

/// Examples padded with [PAD] to the longest one. Padded slots are excluded
/// from the loss and hidden from self-attention as keys.
struct TrainingBatch {
  DecoderBatch decoder;
  NDArray features;
  TokenSeq targets;
  std::vector<bool> weight_mask;
  Visibility visibility = Visibility::kFull;
};

inline TrainingBatch assemble_batch(
    const std::vector<TrainingExample>& examples,
    const std::vector<const std::vector<double>*>& features) {
  if (examples.empty() || examples.size() != features.size()) {
    throw Error("assemble_batch: need one feature row per example");
  }
  std::size_t len = 0;
  for (const auto& e : examples) len = std::max(len, e.input_ids.size());
  const std::size_t n = examples.size();
  const std::size_t dim = features.front()->size();
  TrainingBatch b;
  b.decoder = DecoderBatch{n, len, TokenSeq(n * len, kPad), {}};
  b.features = NDArray(Shape{n, dim});
  b.targets.assign(n * len, kPad);
  b.weight_mask.assign(n * len, false);
  b.visibility = visibility_for(examples.front().mode);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = examples[i];
    if (e.mode != examples.front().mode) {
      throw Error("assemble_batch: mixed decoder modes in one batch");
    }
    if (features[i]->size() != dim) {
      throw Error("assemble_batch: ragged feature rows");
    }
    b.decoder.lengths.push_back(e.input_ids.size());
    std::copy(features[i]->begin(), features[i]->end(),
              b.features.row(i).begin());
    for (std::size_t t = 0; t < e.input_ids.size(); ++t) {
      b.decoder.ids[i * len + t] = e.input_ids[t];
      b.targets[i * len + t] = e.target_ids[t];
      b.weight_mask[i * len + t] = e.weight_mask[t];
    }
  }
  return b;
}

struct StepResult {
  double loss = 0.0;
  std::vector<NDArray> grads;
};

/// Forward and backward for one batch. Dropout is applied when `dropout_rng`
/// is non-null.
inline StepResult compute_gradients(const CaptionModel& model,
                                    const TrainingBatch& batch,
                                    Rng* dropout_rng) {
  Graph g(true);
  BoundModel bm = bind(g, model);
  NodeId features = g.constant(batch.features);
  NodeId memory = encode(g, bm, features);
  auto taps =
      decode_taps(g, bm, memory, batch.decoder, batch.visibility, dropout_rng);
  NodeId loss = supervised_loss(g, taps, batch.targets, batch.weight_mask,
                                model.config().supervision);
  g.backward(loss);
  StepResult r;
  r.loss = g.value(loss).item();
  r.grads.reserve(bm.nodes.size());
  for (NodeId id : bm.nodes) r.grads.push_back(g.grad(id));
  return r;
}

/// Loss without dropout and without gradients.
inline double evaluate_loss(const CaptionModel& model,
                            const TrainingBatch& batch) {
  Graph g(false);
  BoundModel bm = bind(g, model);
  NodeId memory = encode(g, bm, g.constant(batch.features));
  auto taps = decode_taps(g, bm, memory, batch.decoder, batch.visibility,
                          nullptr);
  return g
      .value(supervised_loss(g, taps, batch.targets, batch.weight_mask,
                             model.config().supervision))
      .item();
}

inline double clip_global_norm(std::vector<NDArray>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double v : g.values()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads) {
      for (double& v : g.values()) v *= f;
    }
  }
  return norm;
}

struct LossRecord {
  std::size_t epoch;
  std::size_t step;
  double loss;  // mean training loss over the epoch
  double lr;    // learning rate of the last step in the epoch
};

struct TrainResult {
  CaptionModel model;
  OptimizerState optimizer;
  std::vector<LossRecord> log;
};

/// Examples for one epoch, in a seed-determined order.
inline std::vector<std::pair<std::size_t, TrainingExample>> epoch_examples(
    const std::vector<Scene>& scenes, const TrainConfig& cfg,
    const Vocab& vocab, std::size_t epoch) {
  Rng rng = make_rng(cfg.seed, 0xe90c0000ULL + epoch);
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::pair<std::size_t, TrainingExample>> out;
  for (std::size_t idx : order) {
    const Scene& s = scenes[idx];
    if (cfg.replicate_ratios && cfg.regime == Regime::kMNIC) {
      for (double r : cfg.ratios.ascending()) {
        const TokenSeq& target =
            s.references[uniform_index(rng, s.references.size())];
        out.emplace_back(idx, make_example_at_ratio(target, cfg.regime, r, rng,
                                                    vocab, cfg.noise,
                                                    cfg.noise_words));
      }
    } else {
      out.emplace_back(idx, make_training_example(s, cfg.regime, cfg.ratios,
                                                  rng, vocab, cfg.noise,
                                                  cfg.noise_words));
    }
  }
  return out;
}

using EpochCallback = std::function<void(const LossRecord&)>;

inline TrainResult train(CaptionModel model, const std::vector<Scene>& scenes,
                         TrainConfig cfg, const Vocab& vocab,
                         const EpochCallback& on_epoch = {}) {
  if (scenes.empty()) throw Error("train: empty corpus");
  cfg.normalize();
  cfg.validate();
  TrainResult result{std::move(model), {}, {}};
  CaptionModel& m = result.model;
  Rng dropout_rng = make_rng(cfg.seed, 0xd409);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto examples = epoch_examples(scenes, cfg, vocab, epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    double lr = 0.0;
    for (std::size_t start = 0; start < examples.size();
         start += cfg.batch_size) {
      const std::size_t end = std::min(examples.size(), start + cfg.batch_size);
      std::vector<TrainingExample> chunk;
      std::vector<const std::vector<double>*> feats;
      for (std::size_t i = start; i < end; ++i) {
        chunk.push_back(examples[i].second);
        feats.push_back(&scenes[examples[i].first].features);
      }
      TrainingBatch batch = assemble_batch(chunk, feats);
      StepResult step = compute_gradients(m, batch, &dropout_rng);
      if (!std::isfinite(step.loss)) {
        throw Error("train: non-finite loss at step " +
                    std::to_string(result.optimizer.step + 1));
      }
      clip_global_norm(step.grads, cfg.clip_norm);
      lr = lr_schedule(result.optimizer.step + 1, m.config().d_model,
                       cfg.warmup);
      adam_step(result.optimizer, m.parameters(), step.grads, lr, cfg.beta1,
                cfg.beta2, cfg.eps);
      loss_sum += step.loss;
      ++batches;
    }
    LossRecord rec{epoch, result.optimizer.step,
                   loss_sum / static_cast<double>(batches), lr};
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

}  // namespace stagecap
