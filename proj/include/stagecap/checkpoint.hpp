#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stagecap/corpus.hpp"
#include "stagecap/error.hpp"
#include "stagecap/masking.hpp"
#include "stagecap/model.hpp"
#include "stagecap/training.hpp"
#include "stagecap/vocab.hpp"

namespace stagecap {

/// Everything needed to decode with a trained model.
struct Checkpoint {
  CaptionModel model;
  Vocab vocab;
  LengthDistribution lengths;
  TrainConfig train;
};

// Manifest: "STAGECAP-CHECKPOINT 1", then key=value lines, then one
// "tensor <name> <shape> <byte offset> <value count>" line per parameter.
// Vocabulary tokens follow as "token=<surface>" lines in id order. The blob
// holds every tensor as little-endian float64, back to back.

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T, typename F>
std::string join(const std::vector<T>& items, F&& fmt, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += fmt(items[i]);
  }
  return out;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::stringstream in(s);
  while (std::getline(in, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::size_t to_size(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) {
    throw Error("checkpoint: bad integer for " + what + ": '" + s + "'");
  }
  return static_cast<std::size_t>(v);
}

inline double to_double(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) {
    throw Error("checkpoint: bad number for " + what + ": '" + s + "'");
  }
  return v;
}

}  // namespace detail

inline std::filesystem::path manifest_path(const std::filesystem::path& dir) {
  return dir / "checkpoint.manifest";
}
inline std::filesystem::path blob_path(const std::filesystem::path& dir) {
  return dir / "checkpoint.bin";
}

inline void save_checkpoint(const std::filesystem::path& dir,
                            const Checkpoint& ck) {
  using detail::format_double;
  using detail::join;
  std::filesystem::create_directories(dir);
  const ModelConfig& c = ck.model.config();
  std::ostringstream m;
  m << "STAGECAP-CHECKPOINT 1\n";
  m << "model.layers=" << c.layers << '\n';
  m << "model.heads=" << c.heads << '\n';
  m << "model.d_model=" << c.d_model << '\n';
  m << "model.d_ff=" << c.d_ff << '\n';
  m << "model.vocab_size=" << c.vocab_size << '\n';
  m << "model.max_len=" << c.max_len << '\n';
  m << "model.feature_dim=" << c.feature_dim << '\n';
  m << "model.memory_slots=" << c.memory_slots << '\n';
  m << "model.supervision="
    << join(c.supervision,
            [](const SupervisionTap& t) {
              return std::to_string(t.layer) + ":" + format_double(t.weight);
            })
    << '\n';
  m << "model.dropout=" << format_double(c.dropout) << '\n';
  m << "model.mode="
    << (c.mode == DecoderMode::kCausal ? "causal" : "bidirectional") << '\n';
  const TrainConfig& t = ck.train;
  m << "train.regime=" << regime_name(t.regime) << '\n';
  m << "train.ratios="
    << join(t.ratios.ascending(), [](double r) { return format_double(r); })
    << '\n';
  m << "train.epochs=" << t.epochs << '\n';
  m << "train.batch_size=" << t.batch_size << '\n';
  m << "train.warmup=" << t.warmup << '\n';
  m << "train.seed=" << t.seed << '\n';
  m << "train.noise=" << (t.noise ? 1 : 0) << '\n';
  m << "train.noise_words=" << t.noise_words << '\n';
  m << "train.replicate_ratios=" << (t.replicate_ratios ? 1 : 0) << '\n';
  m << "lengths.counts="
    << join(ck.lengths.counts(), [](std::size_t n) { return std::to_string(n); })
    << '\n';
  m << "vocab.high_freq="
    << join(std::vector<TokenId>(ck.vocab.high_freq().begin(),
                                 ck.vocab.high_freq().end()),
            [](TokenId id) { return std::to_string(id); })
    << '\n';
  for (const auto& tok : ck.vocab.content_tokens()) m << "token=" << tok << '\n';

  std::ofstream blob(blob_path(dir), std::ios::binary);
  if (!blob) throw Error("cannot write " + blob_path(dir).string());
  std::size_t offset = 0;
  const auto& params = ck.model.parameters();
  const auto& names = ck.model.names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    m << "tensor " << names[i] << ' '
      << join(params[i].shape(), [](std::size_t d) { return std::to_string(d); },
              'x')
      << ' ' << offset << ' ' << params[i].size() << '\n';
    for (double v : params[i].values()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      char bytes[8];
      for (int b = 0; b < 8; ++b) {
        bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
      }
      blob.write(bytes, 8);
    }
    offset += params[i].size() * 8;
  }
  if (!blob) throw Error("write failed: " + blob_path(dir).string());
  std::ofstream man(manifest_path(dir), std::ios::binary);
  man << m.str();
  if (!man) throw Error("write failed: " + manifest_path(dir).string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  using namespace detail;
  std::ifstream man(manifest_path(dir));
  if (!man) throw Error("cannot open " + manifest_path(dir).string());
  std::string line;
  std::getline(man, line);
  if (line != "STAGECAP-CHECKPOINT 1") {
    throw Error(manifest_path(dir).string() + ": not a checkpoint manifest");
  }
  std::map<std::string, std::string> kv;
  std::vector<std::string> tokens;
  struct TensorEntry {
    std::string name;
    Shape shape;
    std::size_t offset;
    std::size_t count;
  };
  std::vector<TensorEntry> entries;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    if (line.rfind("tensor ", 0) == 0) {
      std::istringstream in(line.substr(7));
      std::string name, shape, off, count;
      if (!(in >> name >> shape >> off >> count)) {
        throw Error("checkpoint: malformed tensor line '" + line + "'");
      }
      Shape s;
      for (const auto& d : split(shape, 'x')) s.push_back(to_size(d, name));
      entries.push_back({name, s, to_size(off, name), to_size(count, name)});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error("checkpoint: malformed line '" + line + "'");
    }
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "token") {
      tokens.push_back(value);
    } else {
      kv[key] = value;
    }
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw Error("checkpoint: missing key " + k);
    return it->second;
  };

  ModelConfig c;
  c.layers = to_size(get("model.layers"), "model.layers");
  c.heads = to_size(get("model.heads"), "model.heads");
  c.d_model = to_size(get("model.d_model"), "model.d_model");
  c.d_ff = to_size(get("model.d_ff"), "model.d_ff");
  c.vocab_size = to_size(get("model.vocab_size"), "model.vocab_size");
  c.max_len = to_size(get("model.max_len"), "model.max_len");
  c.feature_dim = to_size(get("model.feature_dim"), "model.feature_dim");
  c.memory_slots = to_size(get("model.memory_slots"), "model.memory_slots");
  c.supervision.clear();
  for (const auto& item : split(get("model.supervision"), ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw Error("checkpoint: bad supervision entry '" + item + "'");
    }
    c.supervision.push_back({to_size(item.substr(0, colon), "supervision"),
                             to_double(item.substr(colon + 1), "supervision")});
  }
  c.dropout = to_double(get("model.dropout"), "model.dropout");
  c.mode = get("model.mode") == "causal" ? DecoderMode::kCausal
                                         : DecoderMode::kBidirectional;

  TrainConfig t;
  t.regime = parse_regime(get("train.regime"));
  t.ratios = RatioSet::parse(get("train.ratios"));
  t.epochs = to_size(get("train.epochs"), "train.epochs");
  t.batch_size = to_size(get("train.batch_size"), "train.batch_size");
  t.warmup = to_size(get("train.warmup"), "train.warmup");
  t.seed = to_size(get("train.seed"), "train.seed");
  t.noise = get("train.noise") == "1";
  t.noise_words = to_size(get("train.noise_words"), "train.noise_words");
  t.replicate_ratios = get("train.replicate_ratios") == "1";

  std::vector<std::size_t> counts;
  for (const auto& n : split(get("lengths.counts"), ',')) {
    counts.push_back(to_size(n, "lengths.counts"));
  }

  Vocab vocab = Vocab::from_tokens(tokens);
  if (vocab.size() != c.vocab_size) {
    throw Error("checkpoint: vocabulary has " + std::to_string(vocab.size()) +
                " tokens but model expects " + std::to_string(c.vocab_size));
  }
  std::set<TokenId> high;
  for (const auto& n : split(get("vocab.high_freq"), ',')) {
    high.insert(static_cast<TokenId>(to_size(n, "vocab.high_freq")));
  }
  vocab.set_high_freq(std::move(high));

  std::ifstream blob(blob_path(dir), std::ios::binary);
  if (!blob) throw Error("cannot open " + blob_path(dir).string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(blob)),
                          std::istreambuf_iterator<char>());
  std::vector<std::string> names;
  std::vector<NDArray> tensors;
  for (const auto& e : entries) {
    if (shape_size(e.shape) != e.count ||
        e.offset + e.count * 8 > bytes.size()) {
      throw Error("checkpoint: tensor " + e.name +
                  " does not fit the parameter blob");
    }
    std::vector<double> values(e.count);
    for (std::size_t i = 0; i < e.count; ++i) {
      std::uint64_t bits = 0;
      for (int b = 7; b >= 0; --b) {
        bits = (bits << 8) |
               static_cast<unsigned char>(bytes[e.offset + i * 8 + b]);
      }
      values[i] = std::bit_cast<double>(bits);
    }
    names.push_back(e.name);
    tensors.emplace_back(e.shape, std::move(values));
  }
  return Checkpoint{
      CaptionModel::from_parameters(c, std::move(names), std::move(tensors)),
      std::move(vocab), LengthDistribution::from_counts(std::move(counts)), t};
}

}  // namespace stagecap
