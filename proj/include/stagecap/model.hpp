#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stagecap/error.hpp"
#include "stagecap/graph.hpp"
#include "stagecap/ndarray.hpp"
#include "stagecap/rng.hpp"
#include "stagecap/vocab.hpp"

namespace stagecap {

enum class DecoderMode { kCausal, kBidirectional };

inline Visibility visibility_for(DecoderMode mode) {
  return mode == DecoderMode::kCausal ? Visibility::kCausal : Visibility::kFull;
}

struct SupervisionTap {
  std::size_t layer;  // 1-based decoder layer
  double weight;

  friend bool operator==(const SupervisionTap&, const SupervisionTap&) = default;
};

/// Taps on every layer for shallow decoders, otherwise every second layer
/// ending at the last; weights start at 1.0 and grow by 0.1 per tap.
inline std::vector<SupervisionTap> default_supervision(std::size_t layers) {
  std::vector<std::size_t> at;
  if (layers <= 2) {
    for (std::size_t l = 1; l <= layers; ++l) at.push_back(l);
  } else {
    for (std::size_t l = layers % 2 == 0 ? 2 : 1; l <= layers; l += 2) {
      at.push_back(l);
    }
  }
  std::vector<SupervisionTap> taps;
  for (std::size_t i = 0; i < at.size(); ++i) {
    taps.push_back({at[i], 1.0 + 0.1 * static_cast<double>(i)});
  }
  return taps;
}

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 0;
  std::size_t max_len = kDefaultMaxLen;
  std::size_t feature_dim = 0;
  std::size_t memory_slots = 8;
  std::vector<SupervisionTap> supervision = default_supervision(2);
  double dropout = 0.1;
  DecoderMode mode = DecoderMode::kBidirectional;

  /// 6 layers, 8 heads, width 512, feed-forward 2048, taps on layers 2/4/6.
  static ModelConfig paper_scale(std::size_t vocab_size,
                                 std::size_t feature_dim) {
    ModelConfig c;
    c.layers = 6;
    c.heads = 8;
    c.d_model = 512;
    c.d_ff = 2048;
    c.vocab_size = vocab_size;
    c.feature_dim = feature_dim;
    c.supervision = default_supervision(6);
    return c;
  }

  void validate() const {
    auto fail = [](const std::string& what) {
      throw Error("model config: " + what);
    };
    if (layers == 0) fail("layers must be >= 1");
    if (heads == 0 || d_model % heads != 0) {
      fail("d_model (" + std::to_string(d_model) +
           ") must be divisible by heads (" + std::to_string(heads) + ")");
    }
    if (d_ff == 0) fail("d_ff must be >= 1");
    if (vocab_size <= static_cast<std::size_t>(kFirstContentId)) {
      fail("vocab_size must exceed the reserved ids");
    }
    if (max_len == 0) fail("max_len must be >= 1");
    if (feature_dim == 0) fail("feature_dim must be >= 1");
    if (memory_slots == 0) fail("memory_slots must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0,1)");
    if (supervision.empty()) fail("supervision list is empty");
    for (std::size_t i = 0; i < supervision.size(); ++i) {
      const auto& t = supervision[i];
      if (t.layer == 0 || t.layer > layers) {
        fail("supervision layer " + std::to_string(t.layer) + " outside [1," +
             std::to_string(layers) + "]");
      }
      if (!(t.weight > 0.0)) fail("supervision weights must be > 0");
      if (i > 0 && t.layer <= supervision[i - 1].layer) {
        fail("supervision layers must be strictly increasing");
      }
    }
    if (supervision.back().layer != layers) {
      fail("supervision must include the last layer");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Sinusoidal position encodings for positions 0..length-1.
inline NDArray positional_encoding(std::size_t length, std::size_t d) {
  NDArray pe(Shape{length, d});
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double expo =
          static_cast<double>(2 * (i / 2)) / static_cast<double>(d);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, expo);
      pe.at(pos, i) = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

namespace param {
inline constexpr std::size_t kEncW1 = 0;
inline constexpr std::size_t kEncB1 = 1;
inline constexpr std::size_t kEncW2 = 2;
inline constexpr std::size_t kEncB2 = 3;
inline constexpr std::size_t kEmbedding = 4;
inline constexpr std::size_t kOutW = 5;
inline constexpr std::size_t kOutB = 6;
inline constexpr std::size_t kLayerBase = 7;
inline constexpr std::size_t kPerLayer = 26;

// Offsets within a decoder layer block.
inline constexpr std::size_t kSelf = 0;    // wq,bq,wk,bk,wv,bv,wo,bo
inline constexpr std::size_t kLn1 = 8;     // gain,bias
inline constexpr std::size_t kCross = 10;  // wq,bq,wk,bk,wv,bv,wo,bo
inline constexpr std::size_t kLn2 = 18;
inline constexpr std::size_t kFf = 20;  // w1,b1,w2,b2
inline constexpr std::size_t kLn3 = 24;

inline std::size_t layer(std::size_t l, std::size_t offset) {
  return kLayerBase + l * kPerLayer + offset;
}
}  // namespace param

/// MLP feature encoder plus an attention decoder whose self-attention
/// visibility is switchable. Parameters are a flat, named list in a fixed
/// order determined by the config.
class CaptionModel {
 public:
  CaptionModel() = default;

  /// Scaled-uniform init: weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
  /// embeddings U(-1/sqrt(d), 1/sqrt(d)), biases 0, norm gains 1.
  static CaptionModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    CaptionModel m;
    m.config_ = cfg;
    Rng rng = make_rng(seed, 0x1417);
    const std::size_t d = cfg.d_model;
    auto weight = [&](std::string name, std::size_t in, std::size_t out) {
      NDArray w(Shape{in, out});
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (double& v : w.values()) v = u(rng);
      m.add(std::move(name), std::move(w));
    };
    auto vec = [&](std::string name, std::size_t n, double fill) {
      m.add(std::move(name), NDArray(Shape{n}, fill));
    };
    weight("encoder.w1", cfg.feature_dim, cfg.d_ff);
    vec("encoder.b1", cfg.d_ff, 0.0);
    weight("encoder.w2", cfg.d_ff, cfg.memory_slots * d);
    vec("encoder.b2", cfg.memory_slots * d, 0.0);
    {
      NDArray e(Shape{cfg.vocab_size, d});
      const double bound = 1.0 / std::sqrt(static_cast<double>(d));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (double& v : e.values()) v = u(rng);
      m.add("embedding", std::move(e));
    }
    weight("output.w", d, cfg.vocab_size);
    vec("output.b", cfg.vocab_size, 0.0);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      for (const char* block : {"self", "cross"}) {
        for (const char* proj : {"q", "k", "v", "o"}) {
          weight(p + block + ".w" + proj, d, d);
          vec(p + block + ".b" + proj, d, 0.0);
        }
        const std::string ln = std::string(block) == "self" ? "ln1" : "ln2";
        vec(p + ln + ".gain", d, 1.0);
        vec(p + ln + ".bias", d, 0.0);
      }
      weight(p + "ff.w1", d, cfg.d_ff);
      vec(p + "ff.b1", cfg.d_ff, 0.0);
      weight(p + "ff.w2", cfg.d_ff, d);
      vec(p + "ff.b2", d, 0.0);
      vec(p + "ln3.gain", d, 1.0);
      vec(p + "ln3.bias", d, 0.0);
    }
    m.positions_ = positional_encoding(cfg.max_len, d);
    return m;
  }

  /// Builds a model around existing tensors (checkpoint loading).
  static CaptionModel from_parameters(const ModelConfig& cfg,
                                      std::vector<std::string> names,
                                      std::vector<NDArray> tensors) {
    CaptionModel ref = init(cfg, 0);
    if (names != ref.names_ || tensors.size() != ref.params_.size()) {
      throw Error("model: parameter list does not match the config");
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].shape() != ref.params_[i].shape()) {
        throw Error("model: parameter " + names[i] + " has shape " +
                    shape_string(tensors[i].shape()) + ", expected " +
                    shape_string(ref.params_[i].shape()));
      }
      if (!tensors[i].all_finite()) {
        throw Error("model: parameter " + names[i] + " is not finite");
      }
    }
    ref.params_ = std::move(tensors);
    return ref;
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<NDArray>& parameters() const { return params_; }
  std::vector<NDArray>& parameters() { return params_; }
  const std::vector<std::string>& names() const { return names_; }

  /// Sinusoidal encodings for positions 0..max_len-1.
  const NDArray& positions() const { return positions_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  /// Closed form of parameter_count() for a config.
  static std::size_t expected_parameter_count(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    const std::size_t per_layer =
        2 * 4 * (d * d + d) + 3 * 2 * d + (d * c.d_ff + c.d_ff) + (c.d_ff * d + d);
    return (c.feature_dim * c.d_ff + c.d_ff) +
           (c.d_ff * c.memory_slots * d + c.memory_slots * d) +
           c.vocab_size * d + (d * c.vocab_size + c.vocab_size) +
           c.layers * per_layer;
  }

 private:
  void add(std::string name, NDArray value) {
    names_.push_back(std::move(name));
    params_.push_back(std::move(value));
  }

  ModelConfig config_;
  NDArray positions_;
  std::vector<std::string> names_;
  std::vector<NDArray> params_;
};

/// Parameter nodes of a model registered in one graph.
struct BoundModel {
  const CaptionModel* model;
  std::vector<NodeId> nodes;

  NodeId operator[](std::size_t i) const { return nodes[i]; }
  NodeId layer(std::size_t l, std::size_t offset) const {
    return nodes[param::layer(l, offset)];
  }
};

inline BoundModel bind(Graph& g, const CaptionModel& m) {
  BoundModel b{&m, {}};
  b.nodes.reserve(m.parameters().size());
  for (const auto& p : m.parameters()) b.nodes.push_back(g.parameter(p));
  return b;
}

/// Token rows for a batch of equal-length (padded) sequences.
struct DecoderBatch {
  std::size_t batch = 1;
  std::size_t length = 1;
  TokenSeq ids;                      // batch * length, row-major
  std::vector<std::size_t> lengths;  // valid prefix per entry, for key masks
};

/// Feature rows (batch x feature_dim) to memory rows (batch*M x d_model).
inline NodeId encode(Graph& g, const BoundModel& bm, NodeId features) {
  const ModelConfig& c = bm.model->config();
  const NDArray& fv = g.value(features);
  if (fv.rank() != 2 || fv.cols() != c.feature_dim) {
    throw Error("encode_features: expected rows of " +
                std::to_string(c.feature_dim) + " features, got " +
                shape_string(fv.shape()));
  }
  NodeId h = relu(g, linear(g, features, bm[param::kEncW1], bm[param::kEncB1]));
  NodeId m = linear(g, h, bm[param::kEncW2], bm[param::kEncB2]);
  return reshape(g, m, Shape{fv.rows() * c.memory_slots, c.d_model});
}

namespace detail {

inline NodeId attention_block(Graph& g, const BoundModel& bm, std::size_t l,
                              std::size_t base, NodeId query, NodeId source,
                              const AttentionLayout& layout) {
  NodeId q = linear(g, query, bm.layer(l, base + 0), bm.layer(l, base + 1));
  NodeId k = linear(g, source, bm.layer(l, base + 2), bm.layer(l, base + 3));
  NodeId v = linear(g, source, bm.layer(l, base + 4), bm.layer(l, base + 5));
  NodeId a = attention(g, q, k, v, layout);
  return linear(g, a, bm.layer(l, base + 6), bm.layer(l, base + 7));
}

}  // namespace detail

/// Runs the decoder stack and returns logits (batch*length x vocab) for each
/// supervision tap, or only for the last layer when final_only is set.
/// Dropout is active only when `rng` is non-null.
inline std::vector<NodeId> decode_taps(Graph& g, const BoundModel& bm,
                                       NodeId memory, const DecoderBatch& batch,
                                       Visibility visibility, Rng* rng,
                                       bool final_only = false) {
  const ModelConfig& c = bm.model->config();
  if (batch.length == 0 || batch.length > c.max_len) {
    throw Error("decode: sequence length " + std::to_string(batch.length) +
                " outside [1," + std::to_string(c.max_len) + "]");
  }
  if (batch.ids.size() != batch.batch * batch.length) {
    throw Error("decode: id count does not match batch layout");
  }
  if (g.value(memory).rows() != batch.batch * c.memory_slots) {
    throw Error("decode: memory rows do not match batch");
  }
  const double rate = rng ? c.dropout : 0.0;
  NodeId x = scale(g, embedding(g, bm[param::kEmbedding], batch.ids),
                   std::sqrt(static_cast<double>(c.d_model)));
  {
    const auto pe = bm.model->positions().values().first(batch.length *
                                                          c.d_model);
    NDArray tiled(Shape{batch.batch * batch.length, c.d_model});
    for (std::size_t b = 0; b < batch.batch; ++b) {
      std::copy(pe.begin(), pe.end(),
                tiled.values().begin() +
                    static_cast<std::ptrdiff_t>(b * pe.size()));
    }
    x = add(g, x, g.constant(std::move(tiled)));
  }
  if (rate > 0.0) x = dropout(g, x, rate, *rng);

  AttentionLayout self{batch.batch, batch.length, batch.length, c.heads,
                       visibility, batch.lengths};
  AttentionLayout cross{batch.batch, batch.length, c.memory_slots, c.heads,
                        Visibility::kFull, {}};
  std::vector<NodeId> taps;
  std::size_t next_tap = 0;
  for (std::size_t l = 0; l < c.layers; ++l) {
    NodeId s = detail::attention_block(g, bm, l, param::kSelf, x, x, self);
    if (rate > 0.0) s = dropout(g, s, rate, *rng);
    x = layer_norm(g, add(g, x, s), bm.layer(l, param::kLn1),
                   bm.layer(l, param::kLn1 + 1));
    NodeId a = detail::attention_block(g, bm, l, param::kCross, x, memory, cross);
    if (rate > 0.0) a = dropout(g, a, rate, *rng);
    x = layer_norm(g, add(g, x, a), bm.layer(l, param::kLn2),
                   bm.layer(l, param::kLn2 + 1));
    NodeId h = relu(g, linear(g, x, bm.layer(l, param::kFf),
                              bm.layer(l, param::kFf + 1)));
    if (rate > 0.0) h = dropout(g, h, rate, *rng);
    NodeId f = linear(g, h, bm.layer(l, param::kFf + 2),
                      bm.layer(l, param::kFf + 3));
    if (rate > 0.0) f = dropout(g, f, rate, *rng);
    x = layer_norm(g, add(g, x, f), bm.layer(l, param::kLn3),
                   bm.layer(l, param::kLn3 + 1));
    if (next_tap < c.supervision.size() &&
        c.supervision[next_tap].layer == l + 1) {
      if (!final_only || l + 1 == c.layers) {
        taps.push_back(linear(g, x, bm[param::kOutW], bm[param::kOutB]));
      }
      ++next_tap;
    }
  }
  return taps;
}

/// Σ w_i CE(tap_i) / Σ w_i.
inline NodeId supervised_loss(Graph& g, const std::vector<NodeId>& taps,
                              std::span<const TokenId> targets,
                              const std::vector<bool>& weight_mask,
                              const std::vector<SupervisionTap>& supervision) {
  if (taps.size() != supervision.size()) {
    throw Error("supervised_loss: " + std::to_string(taps.size()) +
                " taps but " + std::to_string(supervision.size()) +
                " supervision weights");
  }
  double total_weight = 0.0;
  for (const auto& s : supervision) total_weight += s.weight;
  NodeId loss = 0;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    NodeId ce = scale(g, cross_entropy(g, taps[i], targets, weight_mask),
                      supervision[i].weight / total_weight);
    loss = i == 0 ? ce : add(g, loss, ce);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Single-example, inference-style entry points (no gradient recording).

/// Memory slots (M x d_model) for one feature vector.
inline NDArray encode_features(const CaptionModel& model,
                               std::span<const double> features) {
  const ModelConfig& c = model.config();
  if (features.size() != c.feature_dim) {
    throw Error("encode_features: feature length " +
                std::to_string(features.size()) + " != " +
                std::to_string(c.feature_dim));
  }
  Graph g(false);
  BoundModel bm = bind(g, model);
  NodeId f = g.constant(NDArray(Shape{1, c.feature_dim},
                                std::vector<double>(features.begin(),
                                                    features.end())));
  return g.value(encode(g, bm, f));
}

inline std::vector<NDArray> decode_with_visibility(
    const CaptionModel& model, const NDArray& memory,
    std::span<const TokenId> input_ids, Visibility visibility,
    Rng* dropout_rng = nullptr, bool final_only = false) {
  const ModelConfig& c = model.config();
  for (TokenId id : input_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw Error("decode: token id " + std::to_string(id) + " out of range");
    }
  }
  Graph g(false);
  BoundModel bm = bind(g, model);
  DecoderBatch batch{1, input_ids.size(),
                     TokenSeq(input_ids.begin(), input_ids.end()),
                     {input_ids.size()}};
  NodeId mem = g.constant(memory);
  auto taps = decode_taps(g, bm, mem, batch, visibility, dropout_rng, final_only);
  std::vector<NDArray> out;
  for (NodeId t : taps) out.push_back(g.value(t));
  return out;
}

/// Per-tap logits (T x vocab) for one input sequence. `train` enables dropout
/// and then requires an rng.
inline std::vector<NDArray> decode(const CaptionModel& model,
                                   const NDArray& memory,
                                   std::span<const TokenId> input_ids,
                                   DecoderMode mode, bool train = false,
                                   Rng* rng = nullptr) {
  if (train && !rng) throw Error("decode: train mode needs an rng");
  return decode_with_visibility(model, memory, input_ids, visibility_for(mode),
                                train ? rng : nullptr);
}

/// Logits of the last layer only.
inline NDArray decode_final(const CaptionModel& model, const NDArray& memory,
                            std::span<const TokenId> input_ids,
                            DecoderMode mode) {
  return decode_with_visibility(model, memory, input_ids, visibility_for(mode),
                                nullptr, true)
      .back();
}

}  // namespace stagecap
