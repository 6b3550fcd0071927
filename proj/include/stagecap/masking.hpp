#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "stagecap/error.hpp"
#include "stagecap/rng.hpp"
#include "stagecap/vocab.hpp"

namespace stagecap {

/// Strictly increasing masking ratios in (0,1] ending in 1.0.
class RatioSet {
 public:
  explicit RatioSet(std::vector<double> ratios) : ratios_(std::move(ratios)) {
    if (ratios_.empty()) throw Error("ratio set: must not be empty");
    for (std::size_t i = 0; i < ratios_.size(); ++i) {
      if (!(ratios_[i] > 0.0 && ratios_[i] <= 1.0)) {
        throw Error("ratio set: ratio " + std::to_string(ratios_[i]) +
                    " outside (0,1]");
      }
      if (i > 0 && !(ratios_[i] > ratios_[i - 1])) {
        throw Error("ratio set: ratios must be strictly increasing");
      }
    }
    if (ratios_.back() != 1.0) {
      throw Error("ratio set: largest ratio must be 1.0");
    }
  }

  /// Parses "0.4,0.6,0.8,1.0"; order in the text does not matter.
  static RatioSet parse(const std::string& text) {
    std::vector<double> values;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
      if (item.empty()) continue;
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(item, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != item.size()) {
        throw Error("ratio set: cannot parse '" + item + "'");
      }
      values.push_back(v);
    }
    std::sort(values.begin(), values.end());
    return RatioSet(std::move(values));
  }

  const std::vector<double>& ascending() const { return ratios_; }
  std::vector<double> descending() const {
    return {ratios_.rbegin(), ratios_.rend()};
  }
  std::size_t size() const { return ratios_.size(); }

  double second_largest() const {
    if (ratios_.size() < 2) throw Error("ratio set: no second largest ratio");
    return ratios_[ratios_.size() - 2];
  }

  std::string to_string() const {
    std::ostringstream out;
    for (std::size_t i = 0; i < ratios_.size(); ++i) {
      if (i) out << ',';
      out << ratios_[i];
    }
    return out.str();
  }

  friend bool operator==(const RatioSet&, const RatioSet&) = default;

 private:
  std::vector<double> ratios_;
};

/// round-half-up(r * T). The small offset keeps exact halves such as
/// 0.3 * 5 from landing just below .5 in binary floating point.
inline std::size_t mask_count(std::size_t length, double ratio) {
  if (ratio <= 0.0) return 0;
  if (ratio >= 1.0) return length;
  const double scaled = ratio * static_cast<double>(length);
  return std::min(length,
                  static_cast<std::size_t>(std::floor(scaled + 0.5 + 1e-9)));
}

struct MaskedExample {
  TokenSeq input_ids;
  TokenSeq target_ids;
  std::vector<bool> mask_flags;
  double ratio = 0.0;
  std::vector<std::size_t> noised_positions;
};

inline MaskedExample mask_sequence(const TokenSeq& target, double ratio,
                                   Rng& rng) {
  for (TokenId t : target) {
    if (t == kPad || t == kMask) {
      throw Error("mask_sequence: target contains a reserved token");
    }
  }
  MaskedExample ex{target, target, std::vector<bool>(target.size(), false),
                   ratio, {}};
  const std::size_t m = mask_count(target.size(), ratio);
  std::vector<std::size_t> positions(target.size());
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  // Partial Fisher-Yates: the first m slots end up a uniform m-subset.
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + uniform_index(rng, positions.size() - i);
    std::swap(positions[i], positions[j]);
    ex.mask_flags[positions[i]] = true;
    ex.input_ids[positions[i]] = kMask;
  }
  return ex;
}

/// Replaces `words` uniformly chosen unmasked positions with uniformly drawn
/// content tokens. Fully masked examples pass through untouched.
inline MaskedExample inject_noise(MaskedExample ex, Rng& rng,
                                  const Vocab& vocab, std::size_t words = 1) {
  if (ex.ratio >= 1.0 || words == 0) return ex;
  std::vector<std::size_t> unmasked;
  for (std::size_t i = 0; i < ex.mask_flags.size(); ++i) {
    if (!ex.mask_flags[i]) unmasked.push_back(i);
  }
  if (unmasked.empty()) return ex;
  const auto content = vocab.content_ids();
  if (content.empty()) throw Error("inject_noise: vocabulary has no content tokens");
  const std::size_t n = std::min(words, unmasked.size());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + uniform_index(rng, unmasked.size() - i);
    std::swap(unmasked[i], unmasked[j]);
    const std::size_t pos = unmasked[i];
    ex.input_ids[pos] = content[uniform_index(rng, content.size())];
    ex.noised_positions.push_back(pos);
  }
  return ex;
}

inline double sample_ratio(const RatioSet& ratios, Rng& rng) {
  return ratios.ascending()[uniform_index(rng, ratios.size())];
}

}  // namespace stagecap
