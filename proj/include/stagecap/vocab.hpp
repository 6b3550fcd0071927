#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stagecap/error.hpp"

namespace stagecap {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;
using Words = std::vector<std::string>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kMask = 2;
inline constexpr TokenId kFirstContentId = 3;
inline constexpr std::size_t kDefaultMaxLen = 16;

/// Lowercases, splits on whitespace and truncates to max_len words.
inline Words tokenize(const std::string& text,
                      std::size_t max_len = kDefaultMaxLen) {
  std::string lowered = text;
  std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  std::istringstream in(lowered);
  Words words;
  std::string w;
  while (words.size() < max_len && in >> w) words.push_back(w);
  return words;
}

inline std::string join_words(const Words& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

class Vocab {
 public:
  /// Words seen at most `min_count` times are left out and encode to [UNK].
  static Vocab build(const std::vector<Words>& captions, std::size_t min_count,
                     std::size_t max_len = kDefaultMaxLen) {
    if (captions.empty()) throw Error("build_vocab: empty corpus");
    std::map<std::string, std::size_t> counts;
    for (const Words& caption : captions) {
      const std::size_t n = std::min(caption.size(), max_len);
      for (std::size_t i = 0; i < n; ++i) {
        std::string w = caption[i];
        std::transform(w.begin(), w.end(), w.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        ++counts[w];
      }
    }
    std::vector<std::string> tokens;
    for (const auto& [word, count] : counts) {
      if (count > min_count && !is_special_surface(word)) tokens.push_back(word);
    }
    return from_tokens(std::move(tokens));
  }

  /// Rebuilds a vocabulary from its non-special tokens in id order.
  static Vocab from_tokens(std::vector<std::string> content_tokens) {
    Vocab v;
    v.id_to_token_ = {"[PAD]", "[UNK]", "[MASK]"};
    for (auto& t : content_tokens) {
      if (is_special_surface(t) || v.token_to_id_.count(t)) {
        throw Error("vocab: duplicate or reserved token '" + t + "'");
      }
      v.token_to_id_[t] = static_cast<TokenId>(v.id_to_token_.size());
      v.id_to_token_.push_back(std::move(t));
    }
    return v;
  }

  std::size_t size() const { return id_to_token_.size(); }

  TokenId id(const std::string& word) const {
    auto it = token_to_id_.find(word);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& word) const {
    return token_to_id_.count(word) > 0;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
      throw Error("vocab: id " + std::to_string(id) + " out of range");
    }
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  static bool is_special(TokenId id) { return id < kFirstContentId; }

  TokenSeq encode(const Words& words) const {
    TokenSeq ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(id(w));
    return ids;
  }

  Words decode(std::span<const TokenId> ids) const {
    Words words;
    words.reserve(ids.size());
    for (TokenId i : ids) words.push_back(token(i));
    return words;
  }

  /// Non-special ids, ascending.
  std::vector<TokenId> content_ids() const {
    std::vector<TokenId> ids;
    for (std::size_t i = kFirstContentId; i < id_to_token_.size(); ++i) {
      ids.push_back(static_cast<TokenId>(i));
    }
    return ids;
  }

  std::vector<std::string> content_tokens() const {
    return {id_to_token_.begin() + kFirstContentId, id_to_token_.end()};
  }

  const std::set<TokenId>& high_freq() const { return high_freq_; }

  void set_high_freq(std::set<TokenId> ids) {
    for (TokenId id : ids) {
      if (is_special(id) || static_cast<std::size_t>(id) >= size()) {
        throw Error("vocab: high-frequency id " + std::to_string(id) +
                    " is special or out of range");
      }
    }
    high_freq_ = std::move(ids);
  }

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.id_to_token_ == b.id_to_token_ && a.high_freq_ == b.high_freq_;
  }

 private:
  static bool is_special_surface(const std::string& w) {
    return w == "[PAD]" || w == "[UNK]" || w == "[MASK]";
  }

  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::set<TokenId> high_freq_;
};

/// Greedily takes the most frequent non-special tokens (ties by lower id)
/// until their share of all tokens in `corpus` reaches `coverage`.
inline std::set<TokenId> high_frequency_set(const Vocab& vocab,
                                            const std::vector<TokenSeq>& corpus,
                                            double coverage) {
  if (!(coverage > 0.0 && coverage < 1.0)) {
    throw Error("high_frequency_set: coverage must be in (0,1)");
  }
  std::vector<std::size_t> counts(vocab.size(), 0);
  std::size_t total = 0;
  for (const auto& seq : corpus) {
    for (TokenId id : seq) {
      ++counts.at(static_cast<std::size_t>(id));
      ++total;
    }
  }
  std::vector<TokenId> order = vocab.content_ids();
  std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
    return counts[static_cast<std::size_t>(a)] >
           counts[static_cast<std::size_t>(b)];
  });
  std::set<TokenId> chosen;
  if (total == 0) return chosen;
  std::size_t mass = 0;
  for (TokenId id : order) {
    if (static_cast<double>(mass) >= coverage * static_cast<double>(total)) {
      break;
    }
    if (counts[static_cast<std::size_t>(id)] == 0) break;
    chosen.insert(id);
    mass += counts[static_cast<std::size_t>(id)];
  }
  return chosen;
}

}  // namespace stagecap
