#pragma once

// Encoder-decoder Transformer whose source embeddings carry syntactic
// features. Each source position is
//
//   h'_m = [ sqrt(D) * e_m ; f_m ] + PE(m)
//
// where e_m is the (D - d)-wide word embedding and f_m the d-wide feature
// block: the sum of the POS, case and subword-position embeddings
// (sum_then_concat) or their concatenation (concat_all). The decoder uses
// full-width word embeddings and no features.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "synfuse/attention.hpp"
#include "synfuse/bpe.hpp"
#include "synfuse/checkpoint.hpp"
#include "synfuse/config.hpp"
#include "synfuse/error.hpp"
#include "synfuse/optim.hpp"
#include "synfuse/syntax.hpp"
#include "synfuse/tensor.hpp"

namespace synfuse {

enum class FusionMode { sum_then_concat, concat_all };

inline std::string fusion_name(FusionMode m) { return m == FusionMode::sum_then_concat ? "sum" : "concat"; }

inline FusionMode parse_fusion(const std::string& s) {
  if (s == "sum" || s == "sum_then_concat") return FusionMode::sum_then_concat;
  if (s == "concat" || s == "concat_all") return FusionMode::concat_all;
  throw UsageError("unknown fusion mode " + s);
}

/// Which syntactic features feed the source embedding. None enabled means a
/// baseline model; if feature_dim > 0 the feature block is then all zeros.
struct FeatureSet {
  bool pos = true;
  bool casing = true;
  bool subword_tags = true;

  static FeatureSet none() { return {false, false, false}; }
  bool any() const { return pos || casing || subword_tags; }

  std::string to_string() const {
    std::vector<std::string> parts;
    if (pos) parts.emplace_back("pos");
    if (casing) parts.emplace_back("case");
    if (subword_tags) parts.emplace_back("subword");
    return parts.empty() ? "none" : text::join(parts, ",");
  }

  static FeatureSet parse(const std::string& s) {
    FeatureSet f = none();
    if (s == "none" || s.empty()) return f;
    for (const auto& part : text::split(s, ',')) {
      const auto t = std::string(text::trim(part));
      if (t == "pos") {
        f.pos = true;
      } else if (t == "case") {
        f.casing = true;
      } else if (t == "subword") {
        f.subword_tags = true;
      } else if (t == "all") {
        f = FeatureSet{};
      } else {
        throw UsageError("unknown feature " + t);
      }
    }
    return f;
  }
};

struct ModelConfig {
  std::size_t d_model = 48;      // D
  std::size_t feature_dim = 4;   // d
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_width = 128;
  double dropout = 0.1;
  double label_smoothing = 0.1;
  FusionMode fusion = FusionMode::sum_then_concat;
  FeatureSet features{};
  // Per-feature widths (POS, case, subword position) for concat_all.
  std::array<std::size_t, 3> concat_dims = {2, 1, 1};
  std::size_t vocab_size = 0;  // N
  std::size_t pos_vocab = 18;
  bool positional_encoding = true;

  std::size_t word_dim() const { return d_model - feature_dim; }
  std::size_t head_dim() const { return d_model / heads; }

  /// Baseline with the whole width given to word embeddings.
  ModelConfig baseline() const {
    ModelConfig c = *this;
    c.features = FeatureSet::none();
    c.feature_dim = 0;
    return c;
  }

  void validate() const {
    if (d_model == 0 || heads == 0 || layers == 0 || ffn_width == 0) throw UsageError("model dimensions must be positive");
    if (feature_dim >= d_model) throw UsageError("feature_dim must be smaller than d_model");
    if (d_model % heads != 0) throw UsageError("d_model must be divisible by heads");
    if (features.any() && feature_dim == 0) throw UsageError("features enabled but feature_dim is 0");
    if (fusion == FusionMode::concat_all && features.any() &&
        concat_dims[0] + concat_dims[1] + concat_dims[2] != feature_dim) {
      throw UsageError("concat feature widths must sum to feature_dim");
    }
    if (vocab_size < kSpecialSymbols.size()) throw UsageError("vocab_size is too small");
    if (pos_vocab == 0) throw UsageError("pos_vocab must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw UsageError("dropout must be in [0, 1)");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw UsageError("label_smoothing must be in [0, 1)");
  }

  void write(KeyValues& kv, const std::string& prefix = "model.") const {
    kv.set_size(prefix + "d_model", d_model);
    kv.set_size(prefix + "feature_dim", feature_dim);
    kv.set_size(prefix + "layers", layers);
    kv.set_size(prefix + "heads", heads);
    kv.set_size(prefix + "ffn_width", ffn_width);
    kv.set_double(prefix + "dropout", dropout);
    kv.set_double(prefix + "label_smoothing", label_smoothing);
    kv.set_string(prefix + "fusion", fusion_name(fusion));
    kv.set_string(prefix + "features", features.to_string());
    kv.set_string(prefix + "concat_dims", std::to_string(concat_dims[0]) + "," + std::to_string(concat_dims[1]) +
                                              "," + std::to_string(concat_dims[2]));
    kv.set_size(prefix + "vocab_size", vocab_size);
    kv.set_size(prefix + "pos_vocab", pos_vocab);
    kv.set_bool(prefix + "positional_encoding", positional_encoding);
  }

  static ModelConfig read(const KeyValues& kv, const std::string& prefix = "model.") {
    ModelConfig c;
    c.d_model = kv.get_size(prefix + "d_model", c.d_model);
    c.feature_dim = kv.get_size(prefix + "feature_dim", c.feature_dim);
    c.layers = kv.get_size(prefix + "layers", c.layers);
    c.heads = kv.get_size(prefix + "heads", c.heads);
    c.ffn_width = kv.get_size(prefix + "ffn_width", c.ffn_width);
    c.dropout = kv.get_double(prefix + "dropout", c.dropout);
    c.label_smoothing = kv.get_double(prefix + "label_smoothing", c.label_smoothing);
    c.fusion = parse_fusion(kv.get(prefix + "fusion", fusion_name(c.fusion)));
    c.features = FeatureSet::parse(kv.get(prefix + "features", c.features.to_string()));
    const auto dims = kv.get_doubles(prefix + "concat_dims", {});
    if (!dims.empty()) {
      if (dims.size() != 3) throw UsageError(prefix + "concat_dims needs three widths");
      for (std::size_t i = 0; i < 3; ++i) c.concat_dims[i] = static_cast<std::size_t>(dims[i]);
    }
    c.vocab_size = kv.get_size(prefix + "vocab_size", c.vocab_size);
    c.pos_vocab = kv.get_size(prefix + "pos_vocab", c.pos_vocab);
    c.positional_encoding = kv.get_bool(prefix + "positional_encoding", c.positional_encoding);
    return c;
  }
};

/// Sinusoidal encoding: PE[p, 2i] = sin(p / 10000^(2i/D)), PE[p, 2i+1] = cos(...).
inline Tensor sinusoidal_encoding(std::size_t length, std::size_t width) {
  Tensor pe = Tensor::zeros({length, width});
  auto d = pe.mutable_data();
  for (std::size_t p = 0; p < length; ++p) {
    for (std::size_t i = 0; i < width; i += 2) {
      const double rate = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(width));
      d[p * width + i] = std::sin(static_cast<double>(p) * rate);
      if (i + 1 < width) d[p * width + i + 1] = std::cos(static_cast<double>(p) * rate);
    }
  }
  return pe;
}

class TransformerModel {
 public:
  TransformerModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    ParamFactory make(params_, seed);
    const std::size_t D = cfg_.d_model;
    src_embed = make.glorot("src.embed", {cfg_.vocab_size, cfg_.word_dim()});
    if (cfg_.features.any()) {
      const bool sum = cfg_.fusion == FusionMode::sum_then_concat;
      const auto width = [&](std::size_t k) { return sum ? cfg_.feature_dim : cfg_.concat_dims[k]; };
      if (cfg_.features.pos && width(0) > 0) feat_pos = make.glorot("src.feat.pos", {cfg_.pos_vocab, width(0)});
      if (cfg_.features.casing && width(1) > 0) feat_case = make.glorot("src.feat.case", {2, width(1)});
      if (cfg_.features.subword_tags && width(2) > 0) {
        feat_subword = make.glorot("src.feat.subword", {kNumSubwordPositions, width(2)});
      }
    }
    tgt_embed = make.glorot("tgt.embed", {cfg_.vocab_size, D});
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      encoder.push_back(make.encoder_layer("enc." + std::to_string(l), D, cfg_.heads, cfg_.ffn_width));
    }
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      decoder.push_back(make.decoder_layer("dec." + std::to_string(l), D, cfg_.heads, cfg_.ffn_width));
    }
    out_proj = make.glorot("out.proj", {D, cfg_.vocab_size});
    out_bias = make.constant("out.bias", {1, cfg_.vocab_size}, 0.0);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  /// Zero every feature table and exclude it from training.
  void zero_and_freeze_features() {
    for (Tensor* t : {&feat_pos, &feat_case, &feat_subword}) {
      if (!t->defined()) continue;
      for (auto& v : t->mutable_data()) v = 0.0;
      t->set_requires_grad(false);
    }
  }

  Tensor src_embed;     // N x (D - d)
  Tensor feat_pos;      // pos_vocab x width
  Tensor feat_case;     // 2 x width
  Tensor feat_subword;  // 4 x width
  Tensor tgt_embed;     // N x D
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  Tensor out_proj;  // D x N
  Tensor out_bias;  // 1 x N

 private:
  ModelConfig cfg_;
  ParameterStore params_;
};

namespace detail {

inline std::vector<int> feature_column(std::span<const FeatureTriple> f, int which) {
  std::vector<int> out;
  out.reserve(f.size());
  for (const auto& t : f) out.push_back(which == 0 ? t.pos_id : which == 1 ? t.case_id : t.position_id());
  return out;
}

}  // namespace detail

/// The d-wide feature block for each position.
inline Tensor feature_block(std::span<const FeatureTriple> features, const TransformerModel& model) {
  const auto& cfg = model.config();
  const std::size_t M = features.size();
  const std::array<const Tensor*, 3> tables = {&model.feat_pos, &model.feat_case, &model.feat_subword};
  if (cfg.fusion == FusionMode::sum_then_concat) {
    std::optional<Tensor> acc;
    for (int k = 0; k < 3; ++k) {
      if (!tables[k]->defined()) continue;
      Tensor e = embedding_lookup(*tables[k], detail::feature_column(features, k));
      acc = acc ? add(*acc, e) : e;
    }
    return acc ? *acc : Tensor::zeros({M, cfg.feature_dim});
  }
  std::vector<Tensor> parts;
  for (int k = 0; k < 3; ++k) {
    const std::size_t w = cfg.features.any() ? cfg.concat_dims[static_cast<std::size_t>(k)] : 0;
    if (tables[k]->defined()) {
      parts.push_back(embedding_lookup(*tables[k], detail::feature_column(features, k)));
    } else if (w > 0) {
      parts.push_back(Tensor::zeros({M, w}));
    }
  }
  if (parts.empty()) return Tensor::zeros({M, cfg.feature_dim});
  return parts.size() == 1 ? parts.front() : concat(parts, 1);
}

/// M x D source representation: scaled word block, feature block, then
/// positional encoding and dropout on the fused result.
inline Tensor embed_source(std::span<const int> ids, std::span<const FeatureTriple> features,
                           const TransformerModel& model, const ForwardContext& ctx = {}) {
  const auto& cfg = model.config();
  if (ids.size() != features.size()) {
    throw ShapeError("embed_source: " + std::to_string(ids.size()) + " subwords but " +
                     std::to_string(features.size()) + " feature triples");
  }
  Tensor h = scale(embedding_lookup(model.src_embed, ids), std::sqrt(static_cast<double>(cfg.d_model)));
  if (cfg.feature_dim > 0) h = concat(h, feature_block(features, model), 1);
  if (cfg.positional_encoding) h = add(h, sinusoidal_encoding(ids.size(), cfg.d_model));
  return ctx.drop(h);
}

/// T x D target representation: full-width word embedding, no features.
inline Tensor embed_target(std::span<const int> ids, const TransformerModel& model, const ForwardContext& ctx = {}) {
  const auto& cfg = model.config();
  Tensor h = scale(embedding_lookup(model.tgt_embed, ids), std::sqrt(static_cast<double>(cfg.d_model)));
  if (cfg.positional_encoding) h = add(h, sinusoidal_encoding(ids.size(), cfg.d_model));
  return ctx.drop(h);
}

inline Tensor encoder_forward(const Tensor& embedded, const TransformerModel& model, const ForwardContext& ctx = {}) {
  return encoder_stack(embedded, model.encoder, ctx);
}

/// T x N vocabulary logits.
inline Tensor decoder_forward(const Tensor& tgt_embedded, const Tensor& enc_out, const TransformerModel& model,
                              const ForwardContext& ctx = {}) {
  const Tensor hidden = decoder_stack(tgt_embedded, enc_out, model.decoder, ctx);
  return add(matmul(hidden, model.out_proj), model.out_bias);
}

/// One source/target pair in id space. Target ids exclude BOS/EOS.
struct TrainingPair {
  std::vector<int> source;
  std::vector<FeatureTriple> features;
  std::vector<int> target;
};

/// Teacher-forced logits: decoder input is BOS + target, gold is target + EOS.
inline Tensor forward_logits(const TrainingPair& ex, const TransformerModel& model, const ForwardContext& ctx) {
  const Tensor enc = encoder_forward(embed_source(ex.source, ex.features, model, ctx), model, ctx);
  std::vector<int> input;
  input.reserve(ex.target.size() + 1);
  input.push_back(Vocab::bos_id);
  input.insert(input.end(), ex.target.begin(), ex.target.end());
  return decoder_forward(embed_target(input, model, ctx), enc, model, ctx);
}

inline std::vector<int> gold_targets(const TrainingPair& ex) {
  std::vector<int> gold(ex.target.begin(), ex.target.end());
  gold.push_back(Vocab::eos_id);
  return gold;
}

/// Summed -log p(gold) over rows (no smoothing, no graph).
inline double token_nll(const Tensor& logits, std::span<const int> gold) {
  const std::size_t v = logits.cols();
  const auto d = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const double* x = d.data() + i * v;
    const double mx = *std::max_element(x, x + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(x[j] - mx);
    total -= x[gold[i]] - mx - std::log(z);
  }
  return total;
}

struct StepResult {
  double loss = 0.0;  // label-smoothed loss per target token
  double nll = 0.0;   // unsmoothed -log p(gold) per target token
  std::size_t tokens = 0;
  bool stepped = false;
};

/// Forward/backward over a batch with summed token losses; the accumulator
/// steps the optimizer on every `accumulation`-th call, normalizing by the
/// total token count of the accumulated batches.
inline StepResult train_step(std::span<const TrainingPair> batch, TransformerModel& model, Adam& optimizer,
                             GradAccumulator& accumulator, Rng& rng) {
  const auto& cfg = model.config();
  ForwardContext ctx{true, cfg.dropout, &rng, nullptr};
  StepResult r;
  double loss_sum = 0.0, nll_sum = 0.0;
  for (const auto& ex : batch) {
    const Tensor logits = forward_logits(ex, model, ctx);
    const auto gold = gold_targets(ex);
    const Tensor loss = cross_entropy_label_smoothed(logits, gold, cfg.label_smoothing, Vocab::pad_id, Reduction::sum);
    if (!std::isfinite(loss.item())) throw NumericError("non-finite training loss");
    backward(loss);
    loss_sum += loss.item();
    nll_sum += token_nll(logits, gold);
    r.tokens += gold.size();
  }
  r.stepped = accumulator.add_batch(model.params().tensors(), optimizer, r.tokens);
  if (r.tokens > 0) {
    r.loss = loss_sum / static_cast<double>(r.tokens);
    r.nll = nll_sum / static_cast<double>(r.tokens);
  }
  return r;
}

struct DecodeResult {
  std::vector<int> ids;  // without BOS/EOS
  std::vector<AttentionRecord> records;
};

/// BOS-seeded argmax decoding until EOS or max_len tokens. When
/// capture_attention is set, the records cover every decoded step: encoder
/// self-attention plus the decoder maps of the final (full-prefix) pass.
inline DecodeResult greedy_decode(std::span<const int> source, std::span<const FeatureTriple> features,
                                  const TransformerModel& model, std::size_t max_len, bool capture_attention = false) {
  NoGradGuard no_grad;
  DecodeResult out;
  if (max_len == 0) return out;
  ForwardContext enc_ctx;
  if (capture_attention) enc_ctx.records = &out.records;
  const Tensor enc = encoder_forward(embed_source(source, features, model), model, enc_ctx);

  std::vector<int> prefix = {Vocab::bos_id};
  const std::size_t n = model.config().vocab_size;
  for (std::size_t step = 0; step < max_len; ++step) {
    const Tensor logits = decoder_forward(embed_target(prefix, model), enc, model);
    const auto d = logits.data();
    const double* last = d.data() + (logits.rows() - 1) * n;
    const int best = static_cast<int>(std::max_element(last, last + n) - last);
    prefix.push_back(best);
    if (best == Vocab::eos_id) break;
  }
  if (capture_attention) {
    ForwardContext dec_ctx;
    dec_ctx.records = &out.records;
    const std::vector<int> input(prefix.begin(), prefix.end() - 1);
    decoder_forward(embed_target(input, model), enc, model, dec_ctx);
  }
  out.ids.assign(prefix.begin() + 1, prefix.end());
  if (!out.ids.empty() && out.ids.back() == Vocab::eos_id) out.ids.pop_back();
  return out;
}

}  // namespace synfuse
