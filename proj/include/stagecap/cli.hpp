#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "stagecap/checkpoint.hpp"
#include "stagecap/corpus.hpp"
#include "stagecap/decoding.hpp"
#include "stagecap/error.hpp"
#include "stagecap/masking.hpp"
#include "stagecap/metrics.hpp"
#include "stagecap/model.hpp"
#include "stagecap/pipeline.hpp"
#include "stagecap/training.hpp"
#include "stagecap/vocab.hpp"

namespace stagecap::cli {

namespace fs = std::filesystem;

inline constexpr const char* kDefaultRatios = "0.4,0.6,0.8,1.0";
inline constexpr const char* kDefaultLength = "mode";

/// Seed used when --seed is absent: $STAGECAP_SEED, else 1.
inline std::uint64_t default_seed() {
  const char* env = std::getenv("STAGECAP_SEED");
  if (!env || !*env) return 1;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(env, &used);
    if (used == std::string(env).size()) return v;
  } catch (const std::exception&) {
  }
  throw Error(std::string("STAGECAP_SEED is not an unsigned integer: '") +
              env + "'");
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

/// "key=value" lines of a configuration file as "--key=value" arguments.
/// Blank lines and lines starting with '#' are skipped.
inline std::vector<std::string> config_arguments(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file " + path.string());
  std::vector<std::string> args;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw Error(path.string() + ":" + std::to_string(lineno) +
                  ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    // Echoed configs carry the command name and empty defaults; neither is a
    // setting.
    if (key == "command" || value.empty()) continue;
    args.push_back("--" + key + "=" + value);
  }
  return args;
}

/// Effective settings of a parsed subcommand, one "key=value" per line.
/// Output locations are left out so runs into different directories echo
/// identical files.
inline std::string echo_config(const CLI::App& sub) {
  std::string text = "command=" + sub.get_name() + "\n";
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string& name = opt->get_lnames().front();
    if (name == "help" || name == "config" || name == "out") continue;
    std::string value;
    if (opt->count() > 0) {
      const auto& r = opt->results();
      value = r.empty() ? "true" : r.back();
    } else {
      value = opt->get_default_str();
    }
    text += name + "=" + value + "\n";
  }
  return text;
}

inline LengthMode parse_length(const std::string& text,
                               const LengthDistribution& dist) {
  if (text == "sampled") return LengthMode::sampled(dist);
  if (text == "mode") return LengthMode::fixed_at(dist.mode());
  if (text.rfind("fixed:", 0) == 0) {
    const std::string n = text.substr(6);
    const std::size_t len = detail::to_size(n, "--length");
    if (len == 0) throw Error("--length fixed:N needs N >= 1");
    return LengthMode::fixed_at(len);
  }
  throw Error("--length must be fixed:N, mode or sampled (got '" + text + "')");
}

inline std::string csv_ratios(const RatioSet& r) {
  std::string s = r.to_string();
  std::replace(s.begin(), s.end(), ',', ' ');
  return s;
}

// ---------------------------------------------------------------------------
// Training flags shared by `train` and `sweep-ratios`.

struct TrainFlags {
  std::string data;
  std::string regime = "mnic";
  std::string ratios = kDefaultRatios;
  std::size_t epochs = 30;
  std::size_t batch = 32;
  std::size_t warmup = 400;
  bool noise = true;
  std::size_t noise_words = 1;
  bool replicate_ratios = false;
  std::size_t min_count = 5;
  double coverage = 0.2;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t slots = 8;
  double dropout = 0.1;
  std::size_t max_len = kDefaultMaxLen;
};

inline void add_model_flags(CLI::App* sub, TrainFlags& f) {
  sub->add_option("--epochs", f.epochs, "training epochs");
  sub->add_option("--batch", f.batch, "minibatch size");
  sub->add_option("--warmup", f.warmup, "learning-rate warmup steps");
  sub->add_option("--noise-words", f.noise_words,
                  "input tokens replaced per noised example");
  sub->add_option("--replicate-ratios", f.replicate_ratios,
                  "present each caption once per ratio (true/false)");
  sub->add_option("--min-count", f.min_count,
                  "words seen this often or less become [UNK]");
  sub->add_option("--coverage", f.coverage,
                  "token mass covered by the high-frequency set");
  sub->add_option("--layers", f.layers, "decoder layers");
  sub->add_option("--heads", f.heads, "attention heads");
  sub->add_option("--d-model", f.d_model, "model width");
  sub->add_option("--d-ff", f.d_ff, "feed-forward width");
  sub->add_option("--slots", f.slots, "memory slots produced by the encoder");
  sub->add_option("--dropout", f.dropout, "dropout rate");
  sub->add_option("--max-len", f.max_len, "caption length cap");
}

struct TrainedRun {
  Checkpoint checkpoint;
  std::string loss_csv;  // epoch,step,loss,lr
};

/// Trains one model on `train_text` and packages it as a checkpoint.
inline TrainedRun train_checkpoint(const TrainFlags& f,
                                   const std::vector<SceneText>& train_text,
                                   Regime regime, const RatioSet& ratios,
                                   bool noise, std::uint64_t seed,
                                   std::ostream& log) {
  if (train_text.empty()) throw Error("train: no training scenes");
  Vocab vocab =
      build_training_vocab(train_text, f.min_count, f.coverage, f.max_len);
  const std::vector<Scene> scenes = encode_scenes(train_text, vocab);
  ModelConfig mc;
  mc.layers = f.layers;
  mc.heads = f.heads;
  mc.d_model = f.d_model;
  mc.d_ff = f.d_ff;
  mc.vocab_size = vocab.size();
  mc.max_len = f.max_len;
  mc.feature_dim = train_text.front().features.size();
  mc.memory_slots = f.slots;
  mc.supervision = default_supervision(f.layers);
  mc.dropout = f.dropout;
  mc.mode = mode_for(regime);
  mc.validate();
  TrainConfig tc;
  tc.regime = regime;
  tc.ratios = ratios;
  tc.epochs = f.epochs;
  tc.batch_size = f.batch;
  tc.warmup = f.warmup;
  tc.seed = seed;
  tc.noise = noise;
  tc.noise_words = f.noise_words;
  tc.replicate_ratios = f.replicate_ratios;
  tc.normalize();
  tc.validate();
  TrainResult res = train(CaptionModel::init(mc, seed), scenes, tc, vocab,
                          [&](const LossRecord& r) {
                            char buf[96];
                            std::snprintf(buf, sizeof buf,
                                          "epoch %zu step %zu loss %.6f\n",
                                          r.epoch, r.step, r.loss);
                            log << buf << std::flush;
                          });
  Checkpoint ck{std::move(res.model), std::move(vocab),
                LengthDistribution::from_scenes(scenes, f.max_len), tc};
  std::string csv = "epoch,step,loss,lr\n";
  for (const auto& r : res.log) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.8f,%.10f\n", r.epoch, r.step,
                  r.loss, r.lr);
    csv += buf;
  }
  return {std::move(ck), std::move(csv)};
}

// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<SceneText> train;
  std::vector<SceneText> eval;
};

inline Dataset load_dataset(const std::string& dir, const std::string& split,
                            std::size_t max_len) {
  if (dir.empty()) throw Error("--data is required");
  return {load_corpus(dir, "train", max_len), load_corpus(dir, split, max_len)};
}

inline std::string metrics_csv(const MetricsReport& r) {
  return metrics_csv_header() + "\n" + metrics_csv_row(r) + "\n";
}

/// Parses "TRAIN@INFER@NOISE;..." (NOISE is 0 or 1 and defaults to 1).
struct GridRow {
  RatioSet train;
  RatioSet infer;
  bool noise;
};

inline std::vector<GridRow> parse_grid(const std::string& text) {
  std::vector<GridRow> rows;
  for (const auto& item : detail::split(text, ';')) {
    const auto parts = [&] {
      std::vector<std::string> p;
      std::string cur;
      for (char c : item) {
        if (c == '@') {
          p.push_back(cur);
          cur.clear();
        } else {
          cur += c;
        }
      }
      p.push_back(cur);
      return p;
    }();
    if (parts.size() < 2 || parts.size() > 3) {
      throw Error("--grid entry '" + item +
                  "' must look like TRAIN@INFER or TRAIN@INFER@NOISE");
    }
    bool noise = true;
    if (parts.size() == 3) {
      if (parts[2] != "0" && parts[2] != "1") {
        throw Error("--grid entry '" + item + "': noise must be 0 or 1");
      }
      noise = parts[2] == "1";
    }
    rows.push_back(
        {RatioSet::parse(parts[0]), RatioSet::parse(parts[1]), noise});
  }
  if (rows.empty()) throw Error("--grid is empty");
  return rows;
}

/// Runs the command line. Output files go under each subcommand's --out.
inline int dispatch(int argc, const char* const* argv, std::ostream& out,
                    std::ostream& err) {
  std::vector<std::string> args(argv + 1, argv + argc);

  // Pull --config out and splice its settings in right after the subcommand
  // name, so explicit flags (parsed later, last one wins) override the file.
  std::optional<std::string> config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config_path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i),
                 args.begin() + static_cast<std::ptrdiff_t>(i + 2));
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  std::uint64_t seed = 1;
  try {
    seed = default_seed();
    if (config_path) {
      const auto extra = config_arguments(*config_path);
      const std::size_t at = !args.empty() && args[0].rfind("-", 0) != 0 ? 1 : 0;
      args.insert(args.begin() + static_cast<std::ptrdiff_t>(at), extra.begin(),
                  extra.end());
    }
  } catch (const std::exception& e) {
    err << "stagecap: error: " << e.what() << "\n";
    return 1;
  }

  CLI::App app{"Masked non-autoregressive caption generation toolkit.",
               "stagecap"};
  app.option_defaults()->always_capture_default()->multi_option_policy(
      CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  std::string config_unused;
  auto add_common = [&](CLI::App* sub, std::string& out_dir, bool need_out) {
    sub->add_option("--seed", seed, "random seed (default $STAGECAP_SEED or 1)");
    sub->add_option("--config", config_unused,
                    "flat key=value file; explicit flags override it");
    auto* o = sub->add_option("--out", out_dir, "output directory");
    if (need_out) o->required();
  };
  std::function<void()> action;

  // gen-data -----------------------------------------------------------------
  struct {
    std::size_t n = 2000, n_test = 200;
    double noise = 0.1;
    std::size_t max_objects = 3;
    std::string out;
  } gd;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  gen->add_option("--n", gd.n, "training scenes");
  gen->add_option("--n-test", gd.n_test, "held-out scenes");
  gen->add_option("--noise", gd.noise, "feature noise standard deviation");
  gen->add_option("--max-objects", gd.max_objects, "objects per scene (1-3)");
  add_common(gen, gd.out, true);
  gen->callback([&] {
    action = [&] {
      if (gd.n == 0 || gd.n_test < 2) {
        throw Error("gen-data: need --n >= 1 and --n-test >= 2");
      }
      SyntheticParams p;
      p.noise_sigma = gd.noise;
      p.max_objects = gd.max_objects;
      auto scenes = generate_synthetic(gd.n + gd.n_test, seed, p);
      std::vector<SceneText> train_part(scenes.begin(),
                                        scenes.begin() + static_cast<std::ptrdiff_t>(gd.n));
      std::vector<SceneText> test_part(scenes.begin() + static_cast<std::ptrdiff_t>(gd.n),
                                       scenes.end());
      for (std::size_t i = 0; i < test_part.size(); ++i) {
        test_part[i].id = std::to_string(i);
      }
      save_corpus(gd.out, "train", train_part);
      save_corpus(gd.out, "test", test_part);
      write_text(fs::path(gd.out) / "config.txt", echo_config(*gen));
      out << "wrote " << gd.n << " training and " << gd.n_test
          << " test scenes to " << gd.out << "\n";
    };
  });

  // train --------------------------------------------------------------------
  TrainFlags tf;
  std::string train_out;
  auto* trn = app.add_subcommand("train", "train one captioning model");
  trn->add_option("--data", tf.data, "corpus directory (reads train.*)")
      ->required();
  trn->add_option("--regime", tf.regime, "ar, na or mnic");
  trn->add_option("--ratios", tf.ratios, "training masking ratio set");
  trn->add_option("--noise", tf.noise, "noise injection (true/false)");
  add_model_flags(trn, tf);
  add_common(trn, train_out, true);
  trn->callback([&] {
    action = [&] {
      const Regime regime = parse_regime(tf.regime);
      const auto text = load_corpus(tf.data, "train", tf.max_len);
      const TrainedRun run = train_checkpoint(
          tf, text, regime, RatioSet::parse(tf.ratios), tf.noise, seed, out);
      save_checkpoint(train_out, run.checkpoint);
      write_text(fs::path(train_out) / "loss.csv", run.loss_csv);
      write_text(fs::path(train_out) / "config.txt", echo_config(*trn));
      out << "saved checkpoint to " << train_out << "\n";
    };
  });

  // generate -----------------------------------------------------------------
  struct {
    std::string checkpoint, data, split = "test", method, ratios;
    std::size_t rounds = 1;
    std::string length = kDefaultLength;
    std::string trace;
    bool eval_inline = false;
    std::string out;
  } ge;
  auto* gnr = app.add_subcommand("generate", "caption held-out scenes");
  gnr->add_option("--checkpoint", ge.checkpoint, "checkpoint directory")
      ->required();
  gnr->add_option("--data", ge.data, "corpus directory")->required();
  gnr->add_option("--split", ge.split, "split to caption");
  gnr->add_option("--method", ge.method,
                  "ar, na or mnic (default: the checkpoint's regime)");
  gnr->add_option("--ratios", ge.ratios,
                  "inference ratio set (default: the training set)");
  gnr->add_option("--rounds", ge.rounds, "MNIC rounds");
  gnr->add_option("--length", ge.length, "fixed:N, mode or sampled");
  gnr->add_option("--trace", ge.trace, "write per-stage JSON lines here");
  gnr->add_flag("--eval-inline", ge.eval_inline,
                "also write metrics.txt and metrics.csv");
  add_common(gnr, ge.out, true);
  gnr->callback([&] {
    action = [&] {
      const Checkpoint ck = load_checkpoint(ge.checkpoint);
      const Dataset ds =
          load_dataset(ge.data, ge.split, ck.model.config().max_len);
      GenerationSettings gs;
      gs.method = ge.method.empty() ? ck.train.regime : parse_regime(ge.method);
      gs.ratios = ge.ratios.empty() ? ck.train.ratios : RatioSet::parse(ge.ratios);
      gs.rounds = ge.rounds;
      gs.length = parse_length(ge.length, ck.lengths);
      gs.seed = seed;
      const auto caps =
          generate_captions(ck, encode_scenes(ds.eval, ck.vocab), gs);
      fs::create_directories(ge.out);
      write_generated(fs::path(ge.out) / "captions.tsv", caps, ck.vocab);
      if (!ge.trace.empty()) {
        std::string text;
        for (const auto& g : caps) {
          for (const auto& l : trace_lines(g, ck.vocab)) text += l + "\n";
        }
        write_text(ge.trace, text);
      }
      if (ge.eval_inline) {
        const MetricsReport r = evaluate_records(
            to_records(caps, ck.vocab), ds.eval, all_captions(ds.train),
            ck.vocab);
        write_text(fs::path(ge.out) / "metrics.txt", to_key_values(r));
        write_text(fs::path(ge.out) / "metrics.csv", metrics_csv(r));
        out << to_key_values(r);
      }
      write_text(fs::path(ge.out) / "config.txt", echo_config(*gnr));
      out << "wrote " << caps.size() << " captions to " << ge.out << "\n";
    };
  });

  // eval ---------------------------------------------------------------------
  struct {
    std::string captions, data, split = "test", checkpoint, out;
  } ev;
  auto* evl = app.add_subcommand("eval", "score a captions file");
  evl->add_option("--captions", ev.captions, "captions.tsv from generate")
      ->required();
  evl->add_option("--data", ev.data, "corpus directory")->required();
  evl->add_option("--split", ev.split, "split the captions describe");
  evl->add_option("--checkpoint", ev.checkpoint,
                  "checkpoint whose vocabulary defines vocabulary usage")
      ->required();
  add_common(evl, ev.out, true);
  evl->callback([&] {
    action = [&] {
      const Checkpoint ck = load_checkpoint(ev.checkpoint);
      const Dataset ds =
          load_dataset(ev.data, ev.split, ck.model.config().max_len);
      const MetricsReport r = evaluate_records(
          read_generated(ev.captions), ds.eval, all_captions(ds.train),
          ck.vocab);
      write_text(fs::path(ev.out) / "metrics.txt", to_key_values(r));
      write_text(fs::path(ev.out) / "metrics.csv", metrics_csv(r));
      write_text(fs::path(ev.out) / "config.txt", echo_config(*evl));
      out << to_key_values(r);
    };
  });

  // bench --------------------------------------------------------------------
  struct {
    std::string checkpoint, ar_checkpoint, data, split = "test";
    std::string methods = "ar,na,mnic-1r,mnic-2r";
    std::string ratios = kDefaultRatios;
    std::size_t scenes = 20, length = 16, reps = 3, warmup = 2;
    std::string out;
  } bn;
  auto* bch = app.add_subcommand("bench", "single-caption decoding latency");
  bch->add_option("--checkpoint", bn.checkpoint, "checkpoint directory")
      ->required();
  bch->add_option("--ar-checkpoint", bn.ar_checkpoint,
                  "checkpoint for the ar method (default --checkpoint)");
  bch->add_option("--data", bn.data, "corpus directory")->required();
  bch->add_option("--split", bn.split, "split to draw scenes from");
  bch->add_option("--methods", bn.methods,
                  "comma list of ar, na and mnic-<rounds>r");
  bch->add_option("--ratios", bn.ratios, "MNIC ratio set");
  bch->add_option("--scenes", bn.scenes, "scenes per repetition");
  bch->add_option("--length", bn.length, "caption length");
  bch->add_option("--reps", bn.reps, "timed repetitions");
  bch->add_option("--warmup", bn.warmup, "untimed captions per method");
  add_common(bch, bn.out, true);
  bch->callback([&] {
    action = [&] {
      const Checkpoint ck = load_checkpoint(bn.checkpoint);
      std::optional<Checkpoint> ar_ck;
      if (!bn.ar_checkpoint.empty()) ar_ck = load_checkpoint(bn.ar_checkpoint);
      const auto text = load_corpus(bn.data, bn.split, ck.model.config().max_len);
      auto scenes = encode_scenes(text, ck.vocab);
      if (bn.scenes == 0) throw Error("bench: --scenes must be >= 1");
      if (scenes.size() > bn.scenes) scenes.resize(bn.scenes);
      std::vector<BenchMethod> methods;
      for (const auto& name : detail::split(bn.methods, ',')) {
        if (name == "ar") {
          methods.push_back({name, ar_ck ? &*ar_ck : &ck, Regime::kAR, 1});
        } else if (name == "na") {
          methods.push_back({name, &ck, Regime::kNA, 1});
        } else if (name.rfind("mnic-", 0) == 0 && name.size() > 6 &&
                   name.back() == 'r') {
          const std::size_t rounds = detail::to_size(
              name.substr(5, name.size() - 6), "--methods");
          methods.push_back({name, &ck, Regime::kMNIC, rounds});
        } else {
          throw Error("bench: unknown method '" + name + "'");
        }
      }
      const auto rows = benchmark(methods, scenes, bn.length,
                                  RatioSet::parse(bn.ratios), bn.reps,
                                  bn.warmup);
      write_text(fs::path(bn.out) / "bench.csv", bench_csv(rows));
      write_text(fs::path(bn.out) / "config.txt", echo_config(*bch));
      out << bench_csv(rows);
    };
  });

  // sweep-ratios -------------------------------------------------------------
  TrainFlags sf;
  struct {
    std::string grid, split = "test", length = kDefaultLength;
    std::size_t rounds = 1;
    std::string out;
  } sr;
  auto* swr = app.add_subcommand(
      "sweep-ratios", "train/inference ratio-set grid with and without noise");
  swr->add_option("--data", sf.data, "corpus directory")->required();
  swr->add_option("--grid", sr.grid,
                  "TRAIN@INFER@NOISE entries separated by ';'")
      ->required();
  swr->add_option("--split", sr.split, "split to evaluate");
  swr->add_option("--length", sr.length, "fixed:N, mode or sampled");
  swr->add_option("--rounds", sr.rounds, "MNIC rounds");
  add_model_flags(swr, sf);
  add_common(swr, sr.out, true);
  swr->callback([&] {
    action = [&] {
      const auto grid = parse_grid(sr.grid);
      const Dataset ds = load_dataset(sf.data, sr.split, sf.max_len);
      std::string csv = "train_ratios,infer_ratios,noise," +
                        metrics_csv_header() + "\n";
      std::map<std::string, Checkpoint> cache;
      for (const auto& row : grid) {
        const std::string key = "train-" + csv_ratios(row.train) + "-noise" +
                                (row.noise ? "1" : "0");
        std::string dir_name = key;
        std::replace(dir_name.begin(), dir_name.end(), ' ', '_');
        const fs::path dir = fs::path(sr.out) / "models" / dir_name;
        auto it = cache.find(key);
        if (it == cache.end()) {
          if (fs::exists(manifest_path(dir))) {
            out << "reusing " << dir.string() << "\n";
            it = cache.emplace(key, load_checkpoint(dir)).first;
          } else {
            out << "training " << key << "\n";
            TrainedRun run = train_checkpoint(sf, ds.train, Regime::kMNIC,
                                              row.train, row.noise, seed, out);
            save_checkpoint(dir, run.checkpoint);
            write_text(dir / "loss.csv", run.loss_csv);
            it = cache.emplace(key, std::move(run.checkpoint)).first;
          }
        }
        const Checkpoint& ck = it->second;
        GenerationSettings gs;
        gs.method = Regime::kMNIC;
        gs.ratios = row.infer;
        gs.rounds = sr.rounds;
        gs.length = parse_length(sr.length, ck.lengths);
        gs.seed = seed;
        const auto caps =
            generate_captions(ck, encode_scenes(ds.eval, ck.vocab), gs);
        const MetricsReport r = evaluate_records(
            to_records(caps, ck.vocab), ds.eval, all_captions(ds.train),
            ck.vocab);
        csv += csv_ratios(row.train) + "," + csv_ratios(row.infer) + "," +
               (row.noise ? "1" : "0") + "," + metrics_csv_row(r) + "\n";
      }
      write_text(fs::path(sr.out) / "sweep_ratios.csv", csv);
      write_text(fs::path(sr.out) / "config.txt", echo_config(*swr));
      out << csv;
    };
  });

  // sweep-stages -------------------------------------------------------------
  struct {
    std::string checkpoint, data, split = "test", ratios,
        length = kDefaultLength;
    std::size_t rounds = 2;
    std::string out;
  } ss;
  auto* sws = app.add_subcommand("sweep-stages",
                                 "metrics of every MNIC stage output");
  sws->add_option("--checkpoint", ss.checkpoint, "checkpoint directory")
      ->required();
  sws->add_option("--data", ss.data, "corpus directory")->required();
  sws->add_option("--split", ss.split, "split to evaluate");
  sws->add_option("--ratios", ss.ratios,
                  "inference ratio set (default: the training set)");
  sws->add_option("--rounds", ss.rounds, "MNIC rounds");
  sws->add_option("--length", ss.length, "fixed:N, mode or sampled");
  add_common(sws, ss.out, true);
  sws->callback([&] {
    action = [&] {
      const Checkpoint ck = load_checkpoint(ss.checkpoint);
      const Dataset ds =
          load_dataset(ss.data, ss.split, ck.model.config().max_len);
      GenerationSettings gs;
      gs.method = Regime::kMNIC;
      gs.ratios = ss.ratios.empty() ? ck.train.ratios : RatioSet::parse(ss.ratios);
      gs.rounds = ss.rounds;
      gs.length = parse_length(ss.length, ck.lengths);
      gs.seed = seed;
      const auto caps =
          generate_captions(ck, encode_scenes(ds.eval, ck.vocab), gs);
      std::string csv =
          "round,stage,input_ratio," + metrics_csv_header() + "\n";
      for (const auto& s :
           stage_metrics(caps, ds.eval, all_captions(ds.train), ck.vocab)) {
        csv += std::to_string(s.round) + "," + std::to_string(s.stage) + "," +
               detail::fixed6(s.input_ratio) + "," + metrics_csv_row(s.report) +
               "\n";
      }
      write_text(fs::path(ss.out) / "stages.csv", csv);
      write_text(fs::path(ss.out) / "config.txt", echo_config(*sws));
      out << csv;
    };
  });

  // sweep-lengths ------------------------------------------------------------
  struct {
    std::string checkpoint, ar_checkpoint, data, split = "test", ratios;
    std::size_t min_length = 9, max_length = 15, rounds = 1;
    std::string out;
  } sl;
  auto* swl = app.add_subcommand("sweep-lengths",
                                 "metrics per fixed caption length");
  swl->add_option("--checkpoint", sl.checkpoint, "MNIC checkpoint directory")
      ->required();
  swl->add_option("--ar-checkpoint", sl.ar_checkpoint,
                  "optional AR checkpoint swept alongside");
  swl->add_option("--data", sl.data, "corpus directory")->required();
  swl->add_option("--split", sl.split, "split to evaluate");
  swl->add_option("--ratios", sl.ratios,
                  "inference ratio set (default: the training set)");
  swl->add_option("--min-length", sl.min_length, "shortest fixed length");
  swl->add_option("--max-length", sl.max_length, "longest fixed length");
  swl->add_option("--rounds", sl.rounds, "MNIC rounds");
  add_common(swl, sl.out, true);
  swl->callback([&] {
    action = [&] {
      if (sl.min_length == 0 || sl.min_length > sl.max_length) {
        throw Error("sweep-lengths: need 1 <= --min-length <= --max-length");
      }
      const Checkpoint ck = load_checkpoint(sl.checkpoint);
      std::optional<Checkpoint> ar_ck;
      if (!sl.ar_checkpoint.empty()) ar_ck = load_checkpoint(sl.ar_checkpoint);
      const Dataset ds =
          load_dataset(sl.data, sl.split, ck.model.config().max_len);
      const auto train_caps = all_captions(ds.train);
      std::string csv = "method,length," + metrics_csv_header() + "\n";
      auto run = [&](const Checkpoint& c, Regime method,
                     const LengthMode& mode, const std::string& label) {
        GenerationSettings gs;
        gs.method = method;
        gs.ratios = sl.ratios.empty() ? ck.train.ratios
                                      : RatioSet::parse(sl.ratios);
        gs.rounds = method == Regime::kMNIC ? sl.rounds : 1;
        gs.length = mode;
        gs.seed = seed;
        const auto caps =
            generate_captions(c, encode_scenes(ds.eval, c.vocab), gs);
        const MetricsReport r = evaluate_records(to_records(caps, c.vocab),
                                                 ds.eval, train_caps, c.vocab);
        csv += regime_name(method) + "," + label + "," + metrics_csv_row(r) +
               "\n";
      };
      std::vector<std::pair<const Checkpoint*, Regime>> methods{
          {&ck, Regime::kMNIC}};
      if (ar_ck) methods.push_back({&*ar_ck, Regime::kAR});
      for (const auto& [c, method] : methods) {
        for (std::size_t len = sl.min_length; len <= sl.max_length; ++len) {
          run(*c, method, LengthMode::fixed_at(len), std::to_string(len));
        }
        run(*c, method, LengthMode::sampled(c->lengths), "sampled");
      }
      write_text(fs::path(sl.out) / "lengths.csv", csv);
      write_text(fs::path(sl.out) / "config.txt", echo_config(*swl));
      out << csv;
    };
  });

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    const CLI::App* sub = nullptr;
    for (const CLI::App* s : app.get_subcommands()) sub = s;
    out << (sub ? sub->help() : app.help());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    const CLI::App* sub = nullptr;
    for (const CLI::App* s : app.get_subcommands()) sub = s;
    err << "stagecap: error: " << e.what() << "\n"
        << (sub ? sub->help() : app.help());
    return 2;
  }
  try {
    if (action) action();
  } catch (const std::exception& e) {
    err << "stagecap: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace stagecap::cli
