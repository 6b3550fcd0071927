#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stagecap/error.hpp"
#include "stagecap/rng.hpp"
#include "stagecap/vocab.hpp"

namespace stagecap {

/// A scene with its captions as words, as produced by the generator or read
/// from disk. `attributes` holds the generator's attribute words (empty for
/// external data).
struct SceneText {
  std::string id;
  std::vector<double> features;
  std::vector<Words> captions;
  Words attributes;

  friend bool operator==(const SceneText&, const SceneText&) = default;
};

/// A scene with references encoded against a vocabulary.
struct Scene {
  std::string id;
  std::vector<double> features;
  std::vector<TokenSeq> references;
  Words attributes;
};

inline std::vector<Scene> encode_scenes(const std::vector<SceneText>& texts,
                                        const Vocab& vocab) {
  std::vector<Scene> scenes;
  scenes.reserve(texts.size());
  for (const auto& t : texts) {
    Scene s{t.id, t.features, {}, t.attributes};
    for (const auto& c : t.captions) s.references.push_back(vocab.encode(c));
    scenes.push_back(std::move(s));
  }
  return scenes;
}

inline std::vector<Words> all_captions(const std::vector<SceneText>& texts) {
  std::vector<Words> out;
  for (const auto& t : texts) {
    out.insert(out.end(), t.captions.begin(), t.captions.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scene/caption grammar.

struct SyntheticParams {
  double noise_sigma = 0.1;
  std::size_t max_objects = 3;
  std::size_t min_refs = 2;
  std::size_t max_refs = 5;
  std::size_t max_len = kDefaultMaxLen;
};

namespace lexicon {

inline constexpr std::array<std::string_view, 3> kCounts = {"a", "two",
                                                            "three"};
inline constexpr std::array<std::string_view, 12> kColors = {
    "red",   "blue",  "green",  "yellow", "black",  "white",
    "brown", "orange", "pink", "purple", "gray", "golden"};
inline constexpr std::array<std::string_view, 4> kSizes = {"small", "big",
                                                           "tiny", "huge"};
inline constexpr std::array<std::string_view, 20> kNouns = {
    "dog",   "cat",  "horse", "bird",  "cow",   "duck",     "bear",
    "car",   "bus",  "bike",  "boat",  "man",   "woman",    "child",
    "kite",  "train", "truck", "elephant", "giraffe", "zebra"};
inline constexpr std::array<std::string_view, 20> kPlurals = {
    "dogs",  "cats",  "horses", "birds",  "cows",   "ducks",     "bears",
    "cars",  "buses", "bikes",  "boats",  "men",    "women",     "children",
    "kites", "trains", "trucks", "elephants", "giraffes", "zebras"};
inline constexpr std::array<std::string_view, 12> kVerbs = {
    "standing", "sitting", "running", "walking", "eating",  "sleeping",
    "playing",  "resting", "waiting", "jumping", "looking", "moving"};
inline constexpr std::array<std::string_view, 12> kPlaces = {
    "grass", "water", "beach",   "street", "field", "snow",
    "park",  "road",  "river", "kitchen", "hill",  "forest"};
inline constexpr std::array<std::string_view, 12> kPlacePreps = {
    "on", "in", "on", "on", "in", "in", "in", "on", "near", "in", "on", "in"};
inline constexpr std::array<std::string_view, 13> kFunctionWords = {
    "a",  "the", "is",   "are", "on",   "in",  "near",
    "there", "and", "next", "to", "with", "of"};

inline constexpr std::size_t kSlotWidth =
    1 + kCounts.size() + kColors.size() + kSizes.size() + kNouns.size() +
    kVerbs.size();

}  // namespace lexicon

inline std::size_t synthetic_feature_dim(const SyntheticParams& p = {}) {
  return p.max_objects * lexicon::kSlotWidth + lexicon::kPlaces.size();
}

inline bool is_synthetic_function_word(const std::string& w) {
  return std::find(lexicon::kFunctionWords.begin(),
                   lexicon::kFunctionWords.end(),
                   w) != lexicon::kFunctionWords.end();
}

namespace detail {

struct SceneObject {
  std::size_t count;  // index into kCounts
  std::size_t color;
  std::size_t size;
  std::size_t noun;
  std::size_t verb;
};

inline std::size_t weighted_pick(Rng& rng, std::initializer_list<double> w) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x = u(rng);
  std::size_t i = 0;
  for (double p : w) {
    if (x < p) return i;
    x -= p;
    ++i;
  }
  return i - 1;
}

inline void append(Words& out, std::string_view w) { out.emplace_back(w); }

inline void noun_phrase(Words& out, const SceneObject& o, bool with_size) {
  append(out, lexicon::kCounts[o.count]);
  if (with_size) append(out, lexicon::kSizes[o.size]);
  append(out, lexicon::kColors[o.color]);
  append(out, o.count == 0 ? lexicon::kNouns[o.noun] : lexicon::kPlurals[o.noun]);
}

inline std::string_view copula(const SceneObject& o) {
  return o.count == 0 ? "is" : "are";
}

inline void place_phrase(Words& out, std::size_t place) {
  append(out, lexicon::kPlacePreps[place]);
  append(out, "the");
  append(out, lexicon::kPlaces[place]);
}

inline Words render_caption(Rng& rng, const std::vector<SceneObject>& objects,
                            std::size_t place, std::size_t max_len) {
  std::vector<std::size_t> order(objects.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t mentioned = 1 + uniform_index(rng, objects.size());
  std::bernoulli_distribution coin(0.5);
  auto np = [&](Words& out, std::size_t k) {
    noun_phrase(out, objects[order[k]], coin(rng));
  };
  const SceneObject& first = objects[order[0]];
  Words w;
  if (mentioned == 1) {
    switch (uniform_index(rng, 3)) {
      case 0:
        np(w, 0);
        append(w, lexicon::kVerbs[first.verb]);
        break;
      case 1:
        np(w, 0);
        append(w, copula(first));
        append(w, lexicon::kVerbs[first.verb]);
        break;
      default:
        append(w, "there");
        append(w, copula(first));
        np(w, 0);
        append(w, lexicon::kVerbs[first.verb]);
        break;
    }
    place_phrase(w, place);
  } else if (mentioned == 2) {
    const SceneObject& second = objects[order[1]];
    switch (uniform_index(rng, 3)) {
      case 0:
        np(w, 0);
        append(w, "and");
        np(w, 1);
        place_phrase(w, place);
        break;
      case 1:
        np(w, 0);
        append(w, lexicon::kVerbs[first.verb]);
        append(w, "next");
        append(w, "to");
        np(w, 1);
        place_phrase(w, place);
        break;
      default:
        np(w, 0);
        append(w, lexicon::kVerbs[first.verb]);
        append(w, "and");
        np(w, 1);
        append(w, lexicon::kVerbs[second.verb]);
        place_phrase(w, place);
        break;
    }
  } else {
    np(w, 0);
    append(w, "with");
    np(w, 1);
    append(w, "and");
    np(w, 2);
    place_phrase(w, place);
  }
  if (w.size() > max_len) w.resize(max_len);
  return w;
}

inline Words attribute_words(const std::vector<SceneObject>& objects,
                             std::size_t place) {
  std::set<std::string> words;
  for (const auto& o : objects) {
    if (o.count > 0) words.emplace(lexicon::kCounts[o.count]);
    words.emplace(lexicon::kColors[o.color]);
    words.emplace(lexicon::kSizes[o.size]);
    words.emplace(o.count == 0 ? lexicon::kNouns[o.noun]
                               : lexicon::kPlurals[o.noun]);
    words.emplace(lexicon::kVerbs[o.verb]);
  }
  words.emplace(lexicon::kPlaces[place]);
  return {words.begin(), words.end()};
}

}  // namespace detail

/// Deterministic scene/caption corpus. Each scene holds one to max_objects
/// objects (count, color, size, noun, verb) at a shared place. Features are
/// per-object one-hot slots plus a place one-hot, with Gaussian noise, rounded
/// to float precision so they survive the on-disk format unchanged.
inline std::vector<SceneText> generate_synthetic(std::size_t n,
                                                 std::uint64_t seed,
                                                 const SyntheticParams& p = {}) {
  if (n == 0) throw Error("generate_synthetic: n must be >= 1");
  if (p.max_objects < 1 || p.max_objects > 3 || p.min_refs < 1 ||
      p.max_refs < p.min_refs) {
    throw Error("generate_synthetic: invalid grammar parameters");
  }
  using namespace lexicon;
  Rng rng = make_rng(seed, 0x5ce9e);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t dim = synthetic_feature_dim(p);
  std::vector<SceneText> scenes;
  scenes.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    std::size_t n_objects = 1;
    if (p.max_objects == 2) n_objects += detail::weighted_pick(rng, {0.55, 0.45});
    if (p.max_objects == 3) {
      n_objects += detail::weighted_pick(rng, {0.4, 0.35, 0.25});
    }
    std::vector<std::size_t> nouns(kNouns.size());
    std::iota(nouns.begin(), nouns.end(), std::size_t{0});
    std::shuffle(nouns.begin(), nouns.end(), rng);
    std::vector<detail::SceneObject> objects;
    for (std::size_t i = 0; i < n_objects; ++i) {
      objects.push_back({detail::weighted_pick(rng, {0.6, 0.25, 0.15}),
                         uniform_index(rng, kColors.size()),
                         uniform_index(rng, kSizes.size()), nouns[i],
                         uniform_index(rng, kVerbs.size())});
    }
    const std::size_t place = uniform_index(rng, kPlaces.size());

    std::vector<double> features(dim, 0.0);
    for (std::size_t i = 0; i < objects.size(); ++i) {
      const auto& o = objects[i];
      std::size_t at = i * kSlotWidth;
      features[at] = 1.0;
      at += 1;
      features[at + o.count] = 1.0;
      at += kCounts.size();
      features[at + o.color] = 1.0;
      at += kColors.size();
      features[at + o.size] = 1.0;
      at += kSizes.size();
      features[at + o.noun] = 1.0;
      at += kNouns.size();
      features[at + o.verb] = 1.0;
    }
    features[p.max_objects * kSlotWidth + place] = 1.0;
    for (double& f : features) {
      const double z = noise(rng);
      f = static_cast<double>(static_cast<float>(f + p.noise_sigma * z));
    }

    const std::size_t refs =
        p.min_refs + uniform_index(rng, p.max_refs - p.min_refs + 1);
    SceneText scene{std::to_string(s), std::move(features), {},
                    detail::attribute_words(objects, place)};
    for (std::size_t r = 0; r < refs; ++r) {
      scene.captions.push_back(
          detail::render_caption(rng, objects, place, p.max_len));
    }
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

// ---------------------------------------------------------------------------

/// Empirical distribution of reference lengths. counts()[len] is the number
/// of references of that length; index 0 is always zero.
class LengthDistribution {
 public:
  LengthDistribution() = default;

  static LengthDistribution from_counts(std::vector<std::size_t> counts) {
    if (counts.empty()) throw Error("length_distribution: no counts");
    if (counts[0] != 0) {
      throw Error("length_distribution: zero-length references not allowed");
    }
    LengthDistribution d;
    d.counts_ = std::move(counts);
    std::size_t total = 0;
    for (std::size_t c : d.counts_) total += c;
    if (total == 0) throw Error("length_distribution: empty reference set");
    d.cumulative_.resize(d.counts_.size());
    std::size_t running = 0;
    for (std::size_t i = 0; i < d.counts_.size(); ++i) {
      running += d.counts_[i];
      d.cumulative_[i] =
          static_cast<double>(running) / static_cast<double>(total);
    }
    d.total_ = total;
    return d;
  }

  template <typename SceneRange>
  static LengthDistribution from_scenes(const SceneRange& scenes,
                                        std::size_t max_len = kDefaultMaxLen) {
    std::vector<std::size_t> counts(max_len + 1, 0);
    for (const auto& s : scenes) {
      for (const auto& ref : s.references) {
        if (ref.empty() || ref.size() > max_len) {
          throw Error("length_distribution: reference length " +
                      std::to_string(ref.size()) + " outside [1," +
                      std::to_string(max_len) + "]");
        }
        ++counts[ref.size()];
      }
    }
    return from_counts(std::move(counts));
  }

  std::size_t sample(Rng& rng) const {
    if (total_ == 0) throw Error("length_distribution: empty");
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    for (std::size_t i = 1; i < cumulative_.size(); ++i) {
      if (counts_[i] > 0 && u < cumulative_[i]) return i;
    }
    for (std::size_t i = counts_.size(); i-- > 1;) {
      if (counts_[i] > 0) return i;
    }
    return 1;
  }

  double probability(std::size_t len) const {
    if (len >= counts_.size() || total_ == 0) return 0.0;
    return static_cast<double>(counts_[len]) / static_cast<double>(total_);
  }

  const std::vector<std::size_t>& counts() const { return counts_; }
  std::size_t total() const { return total_; }
  std::size_t max_len() const { return counts_.empty() ? 0 : counts_.size() - 1; }

  /// Most frequent length; ties go to the shorter length.
  std::size_t mode() const {
    std::size_t best = 1;
    for (std::size_t i = 1; i < counts_.size(); ++i) {
      if (counts_[i] > counts_[best]) best = i;
    }
    return best;
  }

  friend bool operator==(const LengthDistribution& a,
                         const LengthDistribution& b) {
    return a.counts_ == b.counts_;
  }

 private:
  std::vector<std::size_t> counts_;
  std::vector<double> cumulative_;
  std::size_t total_ = 0;
};

// ---------------------------------------------------------------------------
// On-disk formats.
//
// Feature file: "FEAT 1 <n> <d>\n" then n*d little-endian float32, row-major.
// Row i is the scene whose id is the decimal string of i.
// Captions file: "<scene_id>\t<caption>" per line.
// Attributes file: "<scene_id>\t<space separated attribute words>" per line.

inline void write_features(const std::filesystem::path& path,
                           const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw Error("write_features: no rows");
  const std::size_t d = rows.front().size();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "FEAT 1 " << rows.size() << ' ' << d << '\n';
  for (const auto& row : rows) {
    if (row.size() != d) throw Error("write_features: ragged rows");
    for (double v : row) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      const char bytes[4] = {static_cast<char>(bits & 0xff),
                             static_cast<char>((bits >> 8) & 0xff),
                             static_cast<char>((bits >> 16) & 0xff),
                             static_cast<char>((bits >> 24) & 0xff)};
      out.write(bytes, 4);
    }
  }
  if (!out) throw Error("write_features: write failed for " + path.string());
}

inline std::vector<std::vector<double>> read_features(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(path.string() + ": cannot open feature file");
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string magic;
  int version = 0;
  long long n = -1;
  long long d = -1;
  if (!(hs >> magic >> version >> n >> d) || magic != "FEAT" || version != 1 ||
      n <= 0 || d <= 0) {
    throw Error(path.string() + ": bad header '" + header +
                "', expected 'FEAT 1 <n> <d>'");
  }
  std::vector<char> blob((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
  const std::size_t expected = static_cast<std::size_t>(n * d) * 4;
  if (blob.size() != expected) {
    throw Error(path.string() + ": header declares " + std::to_string(n) +
                " rows of " + std::to_string(d) + " floats (" +
                std::to_string(expected) + " bytes) but payload has " +
                std::to_string(blob.size()) + " bytes");
  }
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(n));
  std::size_t at = 0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    rows[r].resize(static_cast<std::size_t>(d));
    for (std::size_t c = 0; c < rows[r].size(); ++c, at += 4) {
      std::uint32_t bits = 0;
      for (int b = 3; b >= 0; --b) {
        bits = (bits << 8) | static_cast<unsigned char>(blob[at + b]);
      }
      const float f = std::bit_cast<float>(bits);
      if (!std::isfinite(f)) {
        throw Error(path.string() + ": non-finite feature at record " +
                    std::to_string(r) + ", column " + std::to_string(c));
      }
      rows[r][c] = static_cast<double>(f);
    }
  }
  return rows;
}

inline std::vector<std::pair<std::string, std::string>> read_tsv(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(path.string() + ": cannot open");
  std::vector<std::pair<std::string, std::string>> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw Error(path.string() + ":" + std::to_string(lineno) +
                  ": expected '<scene_id>\\t<text>'");
    }
    records.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return records;
}

/// Joins a feature file with a captions file (and optionally an attributes
/// file) by scene id.
inline std::vector<SceneText> load_external(
    const std::filesystem::path& features_path,
    const std::filesystem::path& captions_path,
    std::size_t max_len = kDefaultMaxLen,
    const std::filesystem::path& attributes_path = {}) {
  auto rows = read_features(features_path);
  std::vector<SceneText> scenes(rows.size());
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    scenes[i].id = std::to_string(i);
    scenes[i].features = std::move(rows[i]);
    index[scenes[i].id] = i;
  }
  std::size_t lineno = 0;
  for (const auto& [id, text] : read_tsv(captions_path)) {
    ++lineno;
    auto it = index.find(id);
    if (it == index.end()) {
      throw Error(captions_path.string() + ": record " +
                  std::to_string(lineno) + " references unknown scene_id '" +
                  id + "'");
    }
    Words words = tokenize(text, max_len);
    if (words.empty()) {
      throw Error(captions_path.string() + ": record " +
                  std::to_string(lineno) + " has an empty caption");
    }
    scenes[it->second].captions.push_back(std::move(words));
  }
  for (const auto& s : scenes) {
    if (s.captions.empty()) {
      throw Error(captions_path.string() + ": scene_id '" + s.id +
                  "' has no captions");
    }
  }
  if (!attributes_path.empty() && std::filesystem::exists(attributes_path)) {
    for (const auto& [id, text] : read_tsv(attributes_path)) {
      auto it = index.find(id);
      if (it == index.end()) {
        throw Error(attributes_path.string() + ": unknown scene_id '" + id +
                    "'");
      }
      scenes[it->second].attributes = tokenize(text, SIZE_MAX);
    }
  }
  return scenes;
}

struct CorpusFiles {
  std::filesystem::path features;
  std::filesystem::path captions;
  std::filesystem::path attributes;
};

inline CorpusFiles corpus_files(const std::filesystem::path& dir,
                                const std::string& split) {
  return {dir / (split + ".feat"), dir / (split + ".captions.tsv"),
          dir / (split + ".attributes.tsv")};
}

/// Scene ids must be the decimal row indices 0..n-1.
inline void save_corpus(const std::filesystem::path& dir,
                        const std::string& split,
                        const std::vector<SceneText>& scenes) {
  std::filesystem::create_directories(dir);
  const auto files = corpus_files(dir, split);
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    if (scenes[i].id != std::to_string(i)) {
      throw Error("save_corpus: scene ids must be row indices");
    }
    rows.push_back(scenes[i].features);
  }
  write_features(files.features, rows);
  std::ofstream caps(files.captions, std::ios::binary);
  std::ofstream attrs(files.attributes, std::ios::binary);
  for (const auto& s : scenes) {
    for (const auto& c : s.captions) caps << s.id << '\t' << join_words(c) << '\n';
    attrs << s.id << '\t' << join_words(s.attributes) << '\n';
  }
  if (!caps || !attrs) throw Error("save_corpus: write failed in " + dir.string());
}

inline std::vector<SceneText> load_corpus(const std::filesystem::path& dir,
                                          const std::string& split,
                                          std::size_t max_len = kDefaultMaxLen) {
  const auto files = corpus_files(dir, split);
  return load_external(files.features, files.captions, max_len,
                       files.attributes);
}

}  // namespace stagecap
