#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stagecap/checkpoint.hpp"
#include "stagecap/corpus.hpp"
#include "stagecap/decoding.hpp"
#include "stagecap/metrics.hpp"
#include "stagecap/model.hpp"
#include "stagecap/training.hpp"

namespace stagecap {

/// Vocabulary with its high-frequency set, built from training captions.
inline Vocab build_training_vocab(const std::vector<SceneText>& train,
                                  std::size_t min_count, double coverage,
                                  std::size_t max_len = kDefaultMaxLen) {
  Vocab vocab = Vocab::build(all_captions(train), min_count, max_len);
  std::vector<TokenSeq> streams;
  for (const auto& c : all_captions(train)) streams.push_back(vocab.encode(c));
  vocab.set_high_freq(high_frequency_set(vocab, streams, coverage));
  return vocab;
}

struct GenerationSettings {
  Regime method = Regime::kMNIC;
  RatioSet ratios{{0.4, 0.6, 0.8, 1.0}};
  std::size_t rounds = 1;
  LengthMode length = LengthMode::fixed_at(11);
  std::uint64_t seed = 1;
};

struct GeneratedCaption {
  std::string scene_id;
  TokenSeq ids;
  std::size_t length = 0;
  std::size_t passes = 0;
  std::optional<DecodeTrace> trace;
};

/// Length for scene `index`; depends only on the seed and the index so every
/// method sees the same lengths.
inline std::size_t scene_length(const LengthMode& mode, std::uint64_t seed,
                                std::size_t index) {
  Rng rng = make_rng(seed, 0x1e9000ULL + index);
  return choose_length(mode, rng);
}

inline GeneratedCaption generate_one(const Checkpoint& ck, const Scene& scene,
                                     std::size_t length,
                                     const GenerationSettings& s) {
  const NDArray memory = encode_features(ck.model, scene.features);
  GeneratedCaption g{scene.id, {}, length, 0, std::nullopt};
  switch (s.method) {
    case Regime::kAR: {
      DecodeResult r = decode_ar(ck.model, memory, length);
      g.ids = finalize(r.ids);
      g.passes = r.passes;
      break;
    }
    case Regime::kNA: {
      DecodeResult r = decode_na(ck.model, memory, length);
      g.ids = finalize(r.ids);
      g.passes = r.passes;
      break;
    }
    case Regime::kMNIC: {
      DecodeTrace t = decode_mnic(ck.model, memory, length, s.ratios, s.rounds,
                                  PreservationPolicy{ck.vocab.high_freq()});
      g.ids = t.final_ids;
      g.passes = t.passes;
      g.trace = std::move(t);
      break;
    }
  }
  return g;
}

inline std::vector<GeneratedCaption> generate_captions(
    const Checkpoint& ck, const std::vector<Scene>& scenes,
    const GenerationSettings& s) {
  std::vector<GeneratedCaption> out;
  out.reserve(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    out.push_back(
        generate_one(ck, scenes[i], scene_length(s.length, s.seed, i), s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trace export: one JSON object per line. Stage lines carry the input and
// output token strings, output probabilities to 4 decimals and the positions
// preserved for the next stage; a closing line per scene carries the final
// caption and the pass count.

namespace detail {
inline std::string prob4(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", p);
  return buf;
}
inline std::string quoted(const std::string& s) {
  return nlohmann::json(s).dump();
}
}  // namespace detail

inline std::vector<std::string> trace_lines(const GeneratedCaption& g,
                                            const Vocab& vocab) {
  using detail::quoted;
  std::vector<std::string> lines;
  if (g.trace) {
    for (const auto& st : g.trace->stages) {
      std::string l = "{\"scene\":" + quoted(g.scene_id) +
                      ",\"round\":" + std::to_string(st.round) +
                      ",\"stage\":" + std::to_string(st.stage) +
                      ",\"input_ratio\":" + detail::prob4(st.input_ratio) +
                      ",\"input\":" + quoted(join_words(vocab.decode(st.input))) +
                      ",\"output\":" +
                      quoted(join_words(vocab.decode(st.output))) +
                      ",\"probs\":[";
      for (std::size_t i = 0; i < st.probs.size(); ++i) {
        if (i) l += ',';
        l += detail::prob4(st.probs[i]);
      }
      l += "],\"preserved\":[";
      for (std::size_t i = 0; i < st.preserved.size(); ++i) {
        if (i) l += ',';
        l += std::to_string(st.preserved[i]);
      }
      l += "],\"fallback\":";
      l += st.fallback ? "true" : "false";
      l += '}';
      lines.push_back(std::move(l));
    }
  }
  lines.push_back("{\"scene\":" + quoted(g.scene_id) +
                  ",\"final\":" + quoted(join_words(vocab.decode(g.ids))) +
                  ",\"length\":" + std::to_string(g.length) +
                  ",\"passes\":" + std::to_string(g.passes) + "}");
  return lines;
}

// ---------------------------------------------------------------------------
// Generated-caption files: "<scene_id>\t<caption>\t<passes>" per line.

inline void write_generated(const std::filesystem::path& path,
                            const std::vector<GeneratedCaption>& caps,
                            const Vocab& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& g : caps) {
    out << g.scene_id << '\t' << join_words(vocab.decode(g.ids)) << '\t'
        << g.passes << '\n';
  }
}

struct CaptionRecord {
  std::string scene_id;
  Words words;
  std::size_t passes = 0;
};

inline std::vector<CaptionRecord> read_generated(
    const std::filesystem::path& path) {
  std::vector<CaptionRecord> out;
  std::size_t lineno = 0;
  for (const auto& [id, rest] : read_tsv(path)) {
    ++lineno;
    const auto tab = rest.rfind('\t');
    CaptionRecord r{id, {}, 0};
    if (tab == std::string::npos) {
      r.words = tokenize(rest, SIZE_MAX);
    } else {
      r.words = tokenize(rest.substr(0, tab), SIZE_MAX);
      r.passes = detail::to_size(rest.substr(tab + 1),
                                 path.string() + ":" + std::to_string(lineno));
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// Metrics of caption records against the scenes they name.
inline MetricsReport evaluate_records(const std::vector<CaptionRecord>& records,
                                      const std::vector<SceneText>& scenes,
                                      const std::vector<Words>& training_captions,
                                      const Vocab& vocab) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < scenes.size(); ++i) index[scenes[i].id] = i;
  std::vector<Words> cands;
  std::vector<std::vector<Words>> refs;
  std::vector<Words> attrs;
  double passes = 0.0;
  for (const auto& r : records) {
    auto it = index.find(r.scene_id);
    if (it == index.end()) {
      throw Error("evaluate: caption for unknown scene_id '" + r.scene_id + "'");
    }
    cands.push_back(r.words);
    refs.push_back(scenes[it->second].captions);
    attrs.push_back(scenes[it->second].attributes);
    passes += static_cast<double>(r.passes);
  }
  if (records.empty()) throw Error("evaluate: no captions");
  return evaluate(cands, refs, attrs, training_captions, vocab,
                  passes / static_cast<double>(records.size()));
}

/// Records as `read_generated` would see them after a round trip through a
/// captions file.
inline std::vector<CaptionRecord> to_records(
    const std::vector<GeneratedCaption>& caps, const Vocab& vocab) {
  std::vector<CaptionRecord> out;
  for (const auto& g : caps) {
    out.push_back(
        {g.scene_id, tokenize(join_words(vocab.decode(g.ids)), SIZE_MAX),
         g.passes});
  }
  return out;
}

struct StageMetrics {
  std::size_t round = 1;
  std::size_t stage = 1;
  double input_ratio = 1.0;
  MetricsReport report;
};

/// Metrics of every (round, stage) output across a set of traced MNIC
/// captions; each stage output is finalized before scoring and carries the
/// passes spent so far.
inline std::vector<StageMetrics> stage_metrics(
    const std::vector<GeneratedCaption>& caps,
    const std::vector<SceneText>& scenes,
    const std::vector<Words>& training_captions, const Vocab& vocab) {
  if (caps.empty() || !caps.front().trace) {
    throw Error("stage_metrics: captions carry no decoding trace");
  }
  std::vector<StageMetrics> out;
  const std::size_t count = caps.front().trace->stages.size();
  for (std::size_t k = 0; k < count; ++k) {
    std::vector<CaptionRecord> records;
    for (const auto& g : caps) {
      if (!g.trace || g.trace->stages.size() != count) {
        throw Error("stage_metrics: traces differ in stage count");
      }
      const StageRecord& st = g.trace->stages[k];
      records.push_back(
          {g.scene_id,
           tokenize(join_words(vocab.decode(finalize(st.output))), SIZE_MAX),
           k + 1});
    }
    const StageRecord& first = caps.front().trace->stages[k];
    out.push_back({first.round, first.stage, first.input_ratio,
                   evaluate_records(records, scenes, training_captions, vocab)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Latency benchmark: one caption at a time, no batching.

struct BenchMethod {
  std::string name;
  const Checkpoint* checkpoint;
  Regime kind;
  std::size_t rounds = 1;
};

struct BenchRow {
  std::string method;
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double passes = 0.0;
  double speedup = 1.0;
};

/// Wall-clock per caption covering feature encoding and every decoder pass
/// (plus preservation for MNIC). Methods are interleaved per repetition;
/// `warmup` untimed captions run per method first. Speedup is relative to
/// the method named "ar" when present, else to the first method.
inline std::vector<BenchRow> benchmark(const std::vector<BenchMethod>& methods,
                                       const std::vector<Scene>& scenes,
                                       std::size_t length,
                                       const RatioSet& ratios,
                                       std::size_t repetitions,
                                       std::size_t warmup) {
  if (methods.empty() || scenes.empty() || repetitions == 0) {
    throw Error("benchmark: need methods, scenes and repetitions >= 1");
  }
  using Clock = std::chrono::steady_clock;
  std::vector<std::vector<double>> samples(methods.size());
  std::vector<double> passes(methods.size(), 0.0);
  std::vector<std::size_t> counted(methods.size(), 0);
  auto run = [&](const BenchMethod& m, const Scene& s) {
    GenerationSettings gs;
    gs.method = m.kind;
    gs.ratios = ratios;
    gs.rounds = m.rounds;
    return generate_one(*m.checkpoint, s, length, gs);
  };
  for (std::size_t i = 0; i < methods.size(); ++i) {
    for (std::size_t w = 0; w < warmup; ++w) {
      run(methods[i], scenes[w % scenes.size()]);
    }
  }
  for (std::size_t rep = 0; rep < repetitions; ++rep) {
    for (std::size_t i = 0; i < methods.size(); ++i) {
      for (const auto& s : scenes) {
        const auto t0 = Clock::now();
        GeneratedCaption g = run(methods[i], s);
        const auto t1 = Clock::now();
        samples[i].push_back(
            std::chrono::duration<double, std::milli>(t1 - t0).count());
        passes[i] += static_cast<double>(g.passes);
        ++counted[i];
      }
    }
  }
  std::vector<BenchRow> rows;
  for (std::size_t i = 0; i < methods.size(); ++i) {
    auto v = samples[i];
    std::sort(v.begin(), v.end());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    const double median = v.size() % 2 == 1
                              ? v[v.size() / 2]
                              : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
    rows.push_back({methods[i].name, mean, median,
                    passes[i] / static_cast<double>(counted[i]), 1.0});
  }
  std::size_t base = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].method == "ar") base = i;
  }
  for (auto& r : rows) r.speedup = rows[base].mean_ms / r.mean_ms;
  return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "method,mean_ms,median_ms,passes,speedup\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.4f,%.4f,%g,%.2f\n", r.method.c_str(),
                  r.mean_ms, r.median_ms, r.passes, r.speedup);
    out += buf;
  }
  return out;
}

}  // namespace stagecap
