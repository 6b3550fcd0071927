#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stagecap/corpus.hpp"
#include "stagecap/error.hpp"
#include "stagecap/masking.hpp"
#include "stagecap/model.hpp"
#include "stagecap/rng.hpp"
#include "stagecap/vocab.hpp"

namespace stagecap {

/// Argmax token and its softmax probability at every position.
struct Prediction {
  TokenSeq ids;
  std::vector<double> probs;
};

/// Row-wise argmax over emittable tokens ([PAD] and [MASK] are never
/// emitted); ties go to the lower id. Probabilities come from the softmax over
/// the full vocabulary.
inline Prediction predict_rows(const NDArray& logits, std::size_t rows) {
  Prediction p;
  p.ids.reserve(rows);
  p.probs.reserve(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = logits.row(r);
    const double peak = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double v : row) total += std::exp(v - peak);
    std::size_t best = 0;
    double best_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < row.size(); ++c) {
      const auto id = static_cast<TokenId>(c);
      if (id == kPad || id == kMask) continue;
      if (row[c] > best_logit) {
        best_logit = row[c];
        best = c;
      }
    }
    p.ids.push_back(static_cast<TokenId>(best));
    p.probs.push_back(std::exp(best_logit - peak) / total);
  }
  return p;
}

/// One bidirectional pass re-predicting every position.
inline Prediction predict_all(const CaptionModel& model, const NDArray& memory,
                              const TokenSeq& input) {
  NDArray logits =
      decode_final(model, memory, input, DecoderMode::kBidirectional);
  return predict_rows(logits, input.size());
}

struct DecodeResult {
  TokenSeq ids;
  std::size_t passes = 0;
};

/// Greedy left-to-right decoding of exactly `length` tokens, recomputing the
/// full prefix on each pass. [MASK] is the start symbol.
inline DecodeResult decode_ar(const CaptionModel& model, const NDArray& memory,
                              std::size_t length) {
  if (length == 0 || length > model.config().max_len) {
    throw Error("decode_ar: length " + std::to_string(length) +
                " outside [1," + std::to_string(model.config().max_len) + "]");
  }
  DecodeResult r;
  TokenSeq input{kMask};
  for (std::size_t i = 0; i < length; ++i) {
    NDArray logits = decode_final(model, memory, input, DecoderMode::kCausal);
    NDArray last(Shape{1, logits.cols()},
                 std::vector<double>(logits.row(i).begin(),
                                     logits.row(i).end()));
    const TokenId next = predict_rows(last, 1).ids[0];
    ++r.passes;
    r.ids.push_back(next);
    input.push_back(next);
  }
  return r;
}

/// Single pass over an all-[MASK] input.
inline DecodeResult decode_na(const CaptionModel& model, const NDArray& memory,
                              std::size_t length) {
  if (length == 0) throw Error("decode_na: length must be >= 1");
  Prediction p = predict_all(model, memory, TokenSeq(length, kMask));
  return {std::move(p.ids), 1};
}

struct PreservationPolicy {
  std::set<TokenId> high_freq;
};

struct Remasked {
  TokenSeq input;
  std::vector<std::size_t> preserved;  // ascending positions
  bool fallback = false;
};

/// Keeps T - mask_count(T, ratio) positions of `output`, visiting positions
/// by descending probability (ties by lower index). A position is kept when
/// its token is outside the high-frequency set and not already kept; if that
/// runs out, the remaining quota comes from skipped positions in the same
/// order. Everything else becomes [MASK].
inline Remasked preserve_and_remask(const TokenSeq& output,
                                    const std::vector<double>& probs,
                                    double ratio,
                                    const PreservationPolicy& policy) {
  if (output.size() != probs.size()) {
    throw Error("preserve_and_remask: output and probabilities differ in size");
  }
  const std::size_t length = output.size();
  const std::size_t quota = length - mask_count(length, ratio);
  std::vector<std::size_t> ranking(length);
  std::iota(ranking.begin(), ranking.end(), std::size_t{0});
  std::stable_sort(ranking.begin(), ranking.end(),
                   [&](std::size_t a, std::size_t b) {
                     return probs[a] > probs[b];
                   });
  Remasked r{TokenSeq(length, kMask), {}, false};
  std::set<TokenId> kept_tokens;
  std::vector<std::size_t> skipped;
  for (std::size_t pos : ranking) {
    if (r.preserved.size() == quota) break;
    const TokenId tok = output[pos];
    if (policy.high_freq.count(tok) || kept_tokens.count(tok)) {
      skipped.push_back(pos);
      continue;
    }
    kept_tokens.insert(tok);
    r.preserved.push_back(pos);
  }
  for (std::size_t i = 0; r.preserved.size() < quota && i < skipped.size();
       ++i) {
    r.fallback = true;
    r.preserved.push_back(skipped[i]);
  }
  std::sort(r.preserved.begin(), r.preserved.end());
  for (std::size_t pos : r.preserved) r.input[pos] = output[pos];
  return r;
}

/// Drops every token equal to its immediate predecessor.
inline TokenSeq finalize(const TokenSeq& ids) {
  TokenSeq out;
  for (TokenId id : ids) {
    if (out.empty() || out.back() != id) out.push_back(id);
  }
  return out;
}

struct StageRecord {
  std::size_t round = 1;  // 1-based
  std::size_t stage = 1;  // 1-based position in the descending ratio schedule
  double input_ratio = 1.0;
  TokenSeq input;
  TokenSeq output;
  std::vector<double> probs;
  // Positions kept unmasked in the next stage's input (empty for the last
  // stage of the last round).
  std::vector<std::size_t> preserved;
  bool fallback = false;
};

struct DecodeTrace {
  std::size_t length = 0;
  std::size_t rounds = 0;
  std::vector<StageRecord> stages;
  TokenSeq final_ids;
  std::size_t passes = 0;
};

/// K-stage masked decoding. Round 1 walks the ratio schedule from 1.0 down to
/// the smallest ratio, re-predicting all positions each stage; every further
/// round re-masks the previous output at the second largest ratio and runs
/// the remaining K-1 stages.
inline DecodeTrace decode_mnic(const CaptionModel& model,
                               const NDArray& memory, std::size_t length,
                               const RatioSet& ratios, std::size_t rounds,
                               const PreservationPolicy& policy) {
  if (length == 0) throw Error("decode_mnic: length must be >= 1");
  if (rounds == 0) throw Error("decode_mnic: rounds must be >= 1");
  if (rounds > 1 && ratios.size() < 2) {
    throw Error("decode_mnic: more than one round needs at least two ratios");
  }
  const std::vector<double> schedule = ratios.descending();
  const std::size_t k = schedule.size();
  DecodeTrace trace;
  trace.length = length;
  trace.rounds = rounds;
  TokenSeq input(length, kMask);
  for (std::size_t round = 1; round <= rounds; ++round) {
    const std::size_t first = round == 1 ? 0 : 1;
    for (std::size_t s = first; s < k; ++s) {
      Prediction p = predict_all(model, memory, input);
      ++trace.passes;
      StageRecord rec{round, s + 1, schedule[s], input, p.ids, p.probs, {},
                      false};
      const bool last_stage = s + 1 == k;
      const bool last_round = round == rounds;
      if (!(last_stage && last_round)) {
        const double next_ratio = last_stage ? schedule[1] : schedule[s + 1];
        Remasked next = preserve_and_remask(p.ids, p.probs, next_ratio, policy);
        rec.preserved = std::move(next.preserved);
        rec.fallback = next.fallback;
        input = std::move(next.input);
      } else {
        trace.final_ids = finalize(p.ids);
      }
      trace.stages.push_back(std::move(rec));
    }
  }
  return trace;
}

struct LengthMode {
  enum class Kind { kFixed, kSampled };
  Kind kind = Kind::kFixed;
  std::size_t fixed = 11;
  const LengthDistribution* distribution = nullptr;

  static LengthMode fixed_at(std::size_t c) { return {Kind::kFixed, c, nullptr}; }
  static LengthMode sampled(const LengthDistribution& d) {
    return {Kind::kSampled, 0, &d};
  }
};

inline std::size_t choose_length(const LengthMode& mode, Rng& rng) {
  if (mode.kind == LengthMode::Kind::kFixed) {
    if (mode.fixed == 0) throw Error("choose_length: fixed length must be >= 1");
    return mode.fixed;
  }
  if (!mode.distribution) throw Error("choose_length: no length distribution");
  return mode.distribution->sample(rng);
}

}  // namespace stagecap
