#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "stagecap/error.hpp"
#include "stagecap/vocab.hpp"

namespace stagecap {

using NGramCounts = std::map<std::string, std::size_t>;

/// n-grams of exactly order n, keyed by their space-joined words.
inline NGramCounts ngrams(const Words& words, std::size_t n) {
  NGramCounts counts;
  if (words.size() < n) return counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    std::string key = words[i];
    for (std::size_t j = 1; j < n; ++j) key += ' ' + words[i + j];
    ++counts[key];
  }
  return counts;
}

/// Corpus BLEU-1..4: clipped counts and lengths are summed over the corpus
/// before taking ratios; brevity penalty uses the closest reference length
/// (shorter on ties). No smoothing.
inline std::array<double, 4> bleu(const std::vector<Words>& candidates,
                                  const std::vector<std::vector<Words>>& refs) {
  if (candidates.size() != refs.size()) {
    throw Error("bleu: " + std::to_string(candidates.size()) +
                " candidates but " + std::to_string(refs.size()) +
                " reference sets");
  }
  std::array<double, 4> matched{};
  std::array<double, 4> total{};
  double cand_len = 0.0;
  double ref_len = 0.0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    if (refs[s].empty()) throw Error("bleu: empty reference set");
    const Words& c = candidates[s];
    cand_len += static_cast<double>(c.size());
    std::size_t best = refs[s].front().size();
    for (const auto& r : refs[s]) {
      const auto diff = [&](std::size_t len) {
        return len > c.size() ? len - c.size() : c.size() - len;
      };
      if (diff(r.size()) < diff(best) ||
          (diff(r.size()) == diff(best) && r.size() < best)) {
        best = r.size();
      }
    }
    ref_len += static_cast<double>(best);
    for (std::size_t n = 1; n <= 4; ++n) {
      NGramCounts cand = ngrams(c, n);
      NGramCounts max_ref;
      for (const auto& r : refs[s]) {
        for (const auto& [g, k] : ngrams(r, n)) {
          max_ref[g] = std::max(max_ref[g], k);
        }
      }
      for (const auto& [g, k] : cand) {
        total[n - 1] += static_cast<double>(k);
        auto it = max_ref.find(g);
        if (it != max_ref.end()) {
          matched[n - 1] += static_cast<double>(std::min(k, it->second));
        }
      }
    }
  }
  std::array<double, 4> scores{};
  if (cand_len == 0.0) return scores;
  const double bp =
      cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (total[n] == 0.0 || matched[n] == 0.0) {
      for (std::size_t m = n; m < 4; ++m) scores[m] = 0.0;
      break;
    }
    log_sum += std::log(matched[n] / total[n]);
    scores[n] = bp * std::exp(log_sum / static_cast<double>(n + 1));
  }
  return scores;
}

/// CIDEr (TF-IDF n-gram cosine, n = 1..4, averaged over references and n,
/// scaled by 10). Document frequencies come from the reference corpus.
class Cider {
 public:
  explicit Cider(const std::vector<std::vector<Words>>& refs) : refs_(refs) {
    if (refs_.size() < 2) {
      throw Error("cider: reference corpus needs at least 2 scenes");
    }
    for (const auto& scene : refs_) {
      std::set<std::string> seen;
      for (const auto& r : scene) {
        for (std::size_t n = 1; n <= 4; ++n) {
          for (const auto& [g, k] : ngrams(r, n)) seen.insert(g);
        }
      }
      for (const auto& g : seen) ++doc_freq_[g];
    }
    log_n_ = std::log(static_cast<double>(refs_.size()));
  }

  /// Score of one candidate against reference set `scene`, in [0, 10].
  double scene_score(const Words& candidate, std::size_t scene) const {
    const auto& rs = refs_.at(scene);
    if (rs.empty()) throw Error("cider: empty reference set");
    double total = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto vc = tfidf(ngrams(candidate, n));
      double per_n = 0.0;
      for (const auto& r : rs) per_n += cosine(vc, tfidf(ngrams(r, n)));
      total += per_n / static_cast<double>(rs.size());
    }
    return 10.0 * total / 4.0;
  }

  double corpus_score(const std::vector<Words>& candidates) const {
    if (candidates.size() != refs_.size()) {
      throw Error("cider: candidate count does not match reference corpus");
    }
    double sum = 0.0;
    for (std::size_t s = 0; s < candidates.size(); ++s) {
      sum += scene_score(candidates[s], s);
    }
    return sum / static_cast<double>(candidates.size());
  }

  std::size_t doc_freq(const std::string& gram) const {
    auto it = doc_freq_.find(gram);
    return it == doc_freq_.end() ? 0 : it->second;
  }

 private:
  std::map<std::string, double> tfidf(const NGramCounts& counts) const {
    std::map<std::string, double> v;
    for (const auto& [g, k] : counts) {
      const double df = std::max<double>(1.0, static_cast<double>(doc_freq(g)));
      v[g] = static_cast<double>(k) * (log_n_ - std::log(df));
    }
    return v;
  }

  static double cosine(const std::map<std::string, double>& a,
                       const std::map<std::string, double>& b) {
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (const auto& [g, x] : a) {
      na += x * x;
      auto it = b.find(g);
      if (it != b.end()) dot += x * it->second;
    }
    for (const auto& [g, y] : b) nb += y * y;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
  }

  std::vector<std::vector<Words>> refs_;
  std::unordered_map<std::string, std::size_t> doc_freq_;
  double log_n_ = 0.0;
};

inline double cider(const std::vector<Words>& candidates,
                    const std::vector<std::vector<Words>>& refs) {
  return Cider(refs).corpus_score(candidates);
}

struct Diversity {
  double novel_pct = 0.0;
  double unique_pct = 0.0;
  double vocab_usage_pct = 0.0;
};

inline Diversity diversity(const std::vector<Words>& candidates,
                           const std::vector<Words>& training_captions,
                           const Vocab& vocab) {
  Diversity d;
  if (candidates.empty()) return d;
  std::unordered_set<std::string> train;
  for (const auto& c : training_captions) train.insert(join_words(c));
  std::unordered_map<std::string, std::size_t> freq;
  std::set<std::string> used;
  for (const auto& c : candidates) {
    ++freq[join_words(c)];
    for (const auto& w : c) {
      const TokenId id = vocab.id(w);
      if (!Vocab::is_special(id)) used.insert(w);
    }
  }
  std::size_t novel = 0;
  std::size_t unique = 0;
  for (const auto& c : candidates) {
    const std::string s = join_words(c);
    if (!train.count(s)) ++novel;
    if (freq[s] == 1) ++unique;
  }
  const double n = static_cast<double>(candidates.size());
  d.novel_pct = 100.0 * static_cast<double>(novel) / n;
  d.unique_pct = 100.0 * static_cast<double>(unique) / n;
  const std::size_t types = vocab.size() - kFirstContentId;
  d.vocab_usage_pct =
      types == 0 ? 0.0
                 : 100.0 * static_cast<double>(used.size()) /
                       static_cast<double>(types);
  return d;
}

/// Mean over scenes (with a non-empty attribute record) of the fraction of
/// attribute words that appear in the caption.
inline double content_recall(const std::vector<Words>& candidates,
                             const std::vector<Words>& attributes) {
  if (candidates.size() != attributes.size()) {
    throw Error("content_recall: one attribute record per candidate needed");
  }
  double sum = 0.0;
  std::size_t scored = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (attributes[i].empty()) continue;
    std::set<std::string> words(candidates[i].begin(), candidates[i].end());
    std::set<std::string> attrs(attributes[i].begin(), attributes[i].end());
    std::size_t hit = 0;
    for (const auto& a : attrs) hit += words.count(a);
    sum += static_cast<double>(hit) / static_cast<double>(attrs.size());
    ++scored;
  }
  return scored == 0 ? std::nan("") : sum / static_cast<double>(scored);
}

struct MetricsReport {
  std::array<double, 4> bleu{};
  double cider = 0.0;
  double novel_pct = 0.0;
  double unique_pct = 0.0;
  double vocab_usage_pct = 0.0;
  double content_recall = 0.0;
  double mean_passes = 0.0;
  std::size_t captions = 0;
};

namespace detail {
inline std::string fixed6(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}
}  // namespace detail

/// Flat key=value text, one metric per line.
inline std::string to_key_values(const MetricsReport& r) {
  using detail::fixed6;
  std::string out;
  for (std::size_t n = 0; n < 4; ++n) {
    out += "bleu" + std::to_string(n + 1) + "=" + fixed6(r.bleu[n]) + "\n";
  }
  out += "cider=" + fixed6(r.cider) + "\n";
  out += "novel_pct=" + fixed6(r.novel_pct) + "\n";
  out += "unique_pct=" + fixed6(r.unique_pct) + "\n";
  out += "vocab_usage_pct=" + fixed6(r.vocab_usage_pct) + "\n";
  out += "content_recall=" + fixed6(r.content_recall) + "\n";
  out += "mean_passes=" + fixed6(r.mean_passes) + "\n";
  out += "captions=" + std::to_string(r.captions) + "\n";
  return out;
}

inline std::string metrics_csv_header() {
  return "bleu1,bleu2,bleu3,bleu4,cider,novel_pct,unique_pct,vocab_usage_pct,"
         "content_recall,mean_passes,captions";
}

inline std::string metrics_csv_row(const MetricsReport& r) {
  using detail::fixed6;
  std::string out;
  for (double b : r.bleu) out += fixed6(b) + ",";
  out += fixed6(r.cider) + "," + fixed6(r.novel_pct) + "," +
         fixed6(r.unique_pct) + "," + fixed6(r.vocab_usage_pct) + "," +
         fixed6(r.content_recall) + "," + fixed6(r.mean_passes) + "," +
         std::to_string(r.captions);
  return out;
}

/// All metrics for a set of captions against per-scene references.
inline MetricsReport evaluate(const std::vector<Words>& candidates,
                              const std::vector<std::vector<Words>>& refs,
                              const std::vector<Words>& attributes,
                              const std::vector<Words>& training_captions,
                              const Vocab& vocab, double mean_passes) {
  MetricsReport r;
  r.bleu = bleu(candidates, refs);
  r.cider = cider(candidates, refs);
  const Diversity d = diversity(candidates, training_captions, vocab);
  r.novel_pct = d.novel_pct;
  r.unique_pct = d.unique_pct;
  r.vocab_usage_pct = d.vocab_usage_pct;
  r.content_recall = content_recall(candidates, attributes);
  r.mean_passes = mean_passes;
  r.captions = candidates.size();
  return r;
}

}  // namespace stagecap
