#pragma once

// Independent reference implementations used as test oracles. They share no
// code with the library beyond the basic containers and are written for
// clarity, not speed.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "stagecap/graph.hpp"
#include "stagecap/ndarray.hpp"

namespace oracle {

using Sentence = std::vector<std::string>;

// ---------------------------------------------------------------------------
// Finite differences.

struct GradientMismatch {
  std::size_t param = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double error = 0.0;
};

using LossBuilder =
    std::function<stagecap::NodeId(stagecap::Graph&, const std::vector<stagecap::NodeId>&)>;

/// Largest |analytic - numeric| / max(1, |analytic|) over every parameter
/// element, using central differences with step h.
inline GradientMismatch worst_gradient_error(
    const std::vector<stagecap::NDArray>& params, const LossBuilder& build,
    double h = 1e-5) {
  using namespace stagecap;
  Graph g(true);
  std::vector<NodeId> ids;
  for (const auto& p : params) ids.push_back(g.parameter(p));
  g.backward(build(g, ids));
  auto loss_at = [&](const std::vector<NDArray>& ps) {
    Graph f(false);
    std::vector<NodeId> fid;
    for (const auto& p : ps) fid.push_back(f.parameter(p));
    return f.value(build(f, fid)).item();
  };
  GradientMismatch worst;
  std::vector<NDArray> work = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const NDArray analytic = g.grad(ids[p]);
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = work[p][i];
      work[p][i] = orig + h;
      const double up = loss_at(work);
      work[p][i] = orig - h;
      const double down = loss_at(work);
      work[p][i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double err =
          std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      if (err > worst.error) worst = {p, i, analytic[i], numeric, err};
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Metrics.

/// All contiguous n-word windows, as word vectors (duplicates kept).
inline std::vector<Sentence> windows(const Sentence& s, std::size_t n) {
  std::vector<Sentence> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    out.emplace_back(s.begin() + static_cast<std::ptrdiff_t>(i),
                     s.begin() + static_cast<std::ptrdiff_t>(i + n));
  }
  return out;
}

inline std::size_t occurrences(const std::vector<Sentence>& bag,
                               const Sentence& gram) {
  return static_cast<std::size_t>(std::count(bag.begin(), bag.end(), gram));
}

/// Corpus BLEU-1..4 (clipped counts pooled over the corpus, no smoothing,
/// closest reference length with the shorter one on ties).
inline std::array<double, 4> bleu(const std::vector<Sentence>& cands,
                                  const std::vector<std::vector<Sentence>>& refs) {
  std::array<double, 4> hit{}, tot{};
  double c = 0.0, r = 0.0;
  for (std::size_t s = 0; s < cands.size(); ++s) {
    const Sentence& cand = cands[s];
    c += static_cast<double>(cand.size());
    long best = -1;
    for (const auto& ref : refs[s]) {
      const long len = static_cast<long>(ref.size());
      const long gap = std::labs(len - static_cast<long>(cand.size()));
      const long best_gap =
          best < 0 ? -1 : std::labs(best - static_cast<long>(cand.size()));
      if (best < 0 || gap < best_gap || (gap == best_gap && len < best)) {
        best = len;
      }
    }
    r += static_cast<double>(best);
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto cw = windows(cand, n);
      std::set<Sentence> distinct(cw.begin(), cw.end());
      for (const auto& gram : distinct) {
        std::size_t max_ref = 0;
        for (const auto& ref : refs[s]) {
          max_ref = std::max(max_ref, occurrences(windows(ref, n), gram));
        }
        hit[n - 1] += static_cast<double>(std::min(occurrences(cw, gram), max_ref));
      }
      tot[n - 1] += static_cast<double>(cw.size());
    }
  }
  std::array<double, 4> out{};
  if (c == 0.0) return out;
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  for (std::size_t n = 1; n <= 4; ++n) {
    double prod = 1.0;
    bool zero = false;
    for (std::size_t m = 0; m < n; ++m) {
      if (hit[m] == 0.0 || tot[m] == 0.0) zero = true;
      else prod *= hit[m] / tot[m];
    }
    out[n - 1] = zero ? 0.0 : bp * std::pow(prod, 1.0 / static_cast<double>(n));
  }
  return out;
}

/// Corpus CIDEr: TF-IDF (idf = log(N / max(1, df))) cosine per n-gram order,
/// averaged over references and orders, times 10, mean over scenes.
inline double cider(const std::vector<Sentence>& cands,
                    const std::vector<std::vector<Sentence>>& refs) {
  const double n_scenes = static_cast<double>(refs.size());
  auto df = [&](const Sentence& gram) {
    std::size_t count = 0;
    for (const auto& scene : refs) {
      bool present = false;
      for (const auto& ref : scene) {
        if (occurrences(windows(ref, gram.size()), gram) > 0) present = true;
      }
      if (present) ++count;
    }
    return static_cast<double>(count);
  };
  auto vec = [&](const Sentence& s, std::size_t n) {
    std::vector<std::pair<Sentence, double>> v;
    const auto w = windows(s, n);
    std::set<Sentence> distinct(w.begin(), w.end());
    for (const auto& gram : distinct) {
      v.emplace_back(gram, static_cast<double>(occurrences(w, gram)) *
                               std::log(n_scenes / std::max(1.0, df(gram))));
    }
    return v;
  };
  auto cosine = [](const std::vector<std::pair<Sentence, double>>& a,
                   const std::vector<std::pair<Sentence, double>>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [ga, x] : a) {
      na += x * x;
      for (const auto& [gb, y] : b) {
        if (ga == gb) dot += x * y;
      }
    }
    for (const auto& [gb, y] : b) nb += y * y;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
  };
  double total = 0.0;
  for (std::size_t s = 0; s < cands.size(); ++s) {
    double scene = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
      double per = 0.0;
      for (const auto& ref : refs[s]) per += cosine(vec(cands[s], n), vec(ref, n));
      scene += per / static_cast<double>(refs[s].size());
    }
    total += 10.0 * scene / 4.0;
  }
  return total / static_cast<double>(cands.size());
}

struct DiversityOracle {
  double novel = 0.0, unique = 0.0, usage = 0.0;
};

/// Set arithmetic over joined caption strings; `vocabulary` lists the
/// non-special types.
inline DiversityOracle diversity(const std::vector<Sentence>& cands,
                                 const std::vector<Sentence>& training,
                                 const std::set<std::string>& vocabulary) {
  auto join = [](const Sentence& s) {
    std::string out;
    for (const auto& w : s) out += (out.empty() ? "" : " ") + w;
    return out;
  };
  std::multiset<std::string> all;
  std::set<std::string> train;
  for (const auto& t : training) train.insert(join(t));
  for (const auto& c : cands) all.insert(join(c));
  std::set<std::string> used;
  double novel = 0, unique = 0;
  for (const auto& c : cands) {
    if (!train.count(join(c))) novel += 1;
    if (all.count(join(c)) == 1) unique += 1;
    for (const auto& w : c) {
      if (vocabulary.count(w)) used.insert(w);
    }
  }
  const double n = static_cast<double>(cands.size());
  return {100.0 * novel / n, 100.0 * unique / n,
          100.0 * static_cast<double>(used.size()) /
              static_cast<double>(vocabulary.size())};
}

// ---------------------------------------------------------------------------
// Statistics.

/// Upper 1% point of the chi-square distribution (Wilson-Hilferty).
inline double chi_square_critical_99(std::size_t dof) {
  const double k = static_cast<double>(dof);
  const double z = 2.326347874;
  const double t = 1.0 - 2.0 / (9.0 * k) + z * std::sqrt(2.0 / (9.0 * k));
  return k * t * t * t;
}

inline double chi_square(const std::vector<double>& observed,
                         const std::vector<double>& expected) {
  double stat = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    if (expected[i] > 0.0) {
      const double d = observed[i] - expected[i];
      stat += d * d / expected[i];
    }
  }
  return stat;
}

}  // namespace oracle
