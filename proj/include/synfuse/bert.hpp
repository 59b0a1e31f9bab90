#pragma once

// Encoder-only classifier with POS-infused input embeddings. The input
// representation of token m is
//
//   sum mode:            e_m + f_m                      (f_m is D wide)
//   concat-affine mode:  [e_m ; f_m] W + b              (W is (D+d) x D)
//
// plus learned segment and position embeddings. The final vector of the
// leading [CLS] token goes through an affine map and a softmax.

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
#include "synfuse/tensor.hpp"

namespace synfuse {

enum class BertFusion { none, sum, concat_affine };

inline std::string bert_fusion_name(BertFusion f) {
  switch (f) {
    case BertFusion::none:
      return "none";
    case BertFusion::sum:
      return "sum";
    case BertFusion::concat_affine:
      return "concat_affine";
  }
  return "?";
}

inline BertFusion parse_bert_fusion(const std::string& s) {
  if (s == "none") return BertFusion::none;
  if (s == "sum") return BertFusion::sum;
  if (s == "concat_affine" || s == "concat") return BertFusion::concat_affine;
  throw UsageError("unknown bert fusion " + s);
}

struct BertConfig {
  std::size_t layers = 2;        // l
  std::size_t d_model = 48;      // D
  std::size_t heads = 4;         // alpha
  std::size_t ffn_width = 128;
  std::size_t pos_dim = 48;      // d
  BertFusion fusion = BertFusion::sum;
  std::size_t num_classes = 2;
  std::size_t max_positions = 64;
  std::size_t vocab_size = 0;
  std::size_t pos_vocab = 18;
  double dropout = 0.1;

  /// Same encoder without POS input.
  BertConfig baseline() const {
    BertConfig c = *this;
    c.fusion = BertFusion::none;
    return c;
  }

  void validate() const {
    if (d_model == 0 || heads == 0 || layers == 0 || ffn_width == 0) throw UsageError("bert dimensions must be positive");
    if (d_model % heads != 0) throw UsageError("bert d_model must be divisible by heads");
    if (fusion == BertFusion::sum && pos_dim != d_model) throw UsageError("sum fusion requires pos_dim == d_model");
    if (fusion == BertFusion::concat_affine && pos_dim == 0) throw UsageError("concat_affine fusion requires pos_dim > 0");
    if (num_classes < 2) throw UsageError("num_classes must be at least 2");
    if (max_positions < 3) throw UsageError("max_positions must be at least 3");
    if (vocab_size < kSpecialSymbols.size()) throw UsageError("bert vocab_size is too small");
    if (dropout < 0.0 || dropout >= 1.0) throw UsageError("dropout must be in [0, 1)");
  }

  void write(KeyValues& kv, const std::string& prefix = "bert.") const {
    kv.set_size(prefix + "layers", layers);
    kv.set_size(prefix + "d_model", d_model);
    kv.set_size(prefix + "heads", heads);
    kv.set_size(prefix + "ffn_width", ffn_width);
    kv.set_size(prefix + "pos_dim", pos_dim);
    kv.set_string(prefix + "fusion", bert_fusion_name(fusion));
    kv.set_size(prefix + "num_classes", num_classes);
    kv.set_size(prefix + "max_positions", max_positions);
    kv.set_size(prefix + "vocab_size", vocab_size);
    kv.set_size(prefix + "pos_vocab", pos_vocab);
    kv.set_double(prefix + "dropout", dropout);
  }

  static BertConfig read(const KeyValues& kv, const std::string& prefix = "bert.") {
    BertConfig c;
    c.layers = kv.get_size(prefix + "layers", c.layers);
    c.d_model = kv.get_size(prefix + "d_model", c.d_model);
    c.heads = kv.get_size(prefix + "heads", c.heads);
    c.ffn_width = kv.get_size(prefix + "ffn_width", c.ffn_width);
    c.pos_dim = kv.get_size(prefix + "pos_dim", c.d_model);
    c.fusion = parse_bert_fusion(kv.get(prefix + "fusion", bert_fusion_name(c.fusion)));
    c.num_classes = kv.get_size(prefix + "num_classes", c.num_classes);
    c.max_positions = kv.get_size(prefix + "max_positions", c.max_positions);
    c.vocab_size = kv.get_size(prefix + "vocab_size", c.vocab_size);
    c.pos_vocab = kv.get_size(prefix + "pos_vocab", c.pos_vocab);
    c.dropout = kv.get_double(prefix + "dropout", c.dropout);
    return c;
  }
};

class BertModel {
 public:
  BertModel(BertConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    ParamFactory make(params_, seed);
    const std::size_t D = cfg_.d_model;
    token_embed = make.glorot("tok.embed", {cfg_.vocab_size, D});
    if (cfg_.fusion != BertFusion::none) pos_tag_embed = make.glorot("postag.embed", {cfg_.pos_vocab, cfg_.pos_dim});
    if (cfg_.fusion == BertFusion::concat_affine) {
      fuse_weight = make.glorot("fuse.w", {D + cfg_.pos_dim, D});
      fuse_bias = make.constant("fuse.b", {1, D}, 0.0);
    }
    position_embed = make.glorot("position.embed", {cfg_.max_positions, D});
    segment_embed = make.glorot("segment.embed", {2, D});
    embed_norm = make.norm("embed.norm", D);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      encoder.push_back(make.encoder_layer("enc." + std::to_string(l), D, cfg_.heads, cfg_.ffn_width));
    }
    cls_weight = make.glorot("cls.w", {D, cfg_.num_classes});
    cls_bias = make.constant("cls.b", {1, cfg_.num_classes}, 0.0);
  }

  const BertConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  void zero_and_freeze_pos() {
    if (!pos_tag_embed.defined()) return;
    for (auto& v : pos_tag_embed.mutable_data()) v = 0.0;
    pos_tag_embed.set_requires_grad(false);
  }

  Tensor token_embed;     // N x D
  Tensor pos_tag_embed;   // pos_vocab x d
  Tensor fuse_weight;     // (D + d) x D
  Tensor fuse_bias;       // 1 x D
  Tensor position_embed;  // max_positions x D
  Tensor segment_embed;   // 2 x D
  NormParams embed_norm;
  std::vector<EncoderLayerParams> encoder;
  Tensor cls_weight;  // D x C
  Tensor cls_bias;    // 1 x C

 private:
  BertConfig cfg_;
  ParameterStore params_;
};

/// Token ids with word-level POS already broadcast to subwords.
struct BertSequence {
  std::vector<int> ids;
  std::vector<int> pos_ids;
};

struct BertInput {
  std::vector<int> ids;
  std::vector<int> pos_ids;
  std::vector<int> segment_ids;

  std::size_t size() const { return ids.size(); }
};

/// [CLS] a [SEP] (b [SEP]). Specials get POS id unknown_pos. If the result
/// would exceed max_positions, tokens are dropped from the end of the longer
/// sequence (the second one on ties) until it fits.
inline BertInput build_input(BertSequence a, std::optional<BertSequence> b, std::size_t max_positions,
                             int unknown_pos = 0) {
  if (a.ids.size() != a.pos_ids.size() || (b && b->ids.size() != b->pos_ids.size())) {
    throw ShapeError("build_input: ids and pos_ids differ in length");
  }
  if (b && b->ids.empty()) b.reset();
  const std::size_t specials = b ? 3 : 2;
  if (max_positions < specials) throw UsageError("build_input: max_positions too small");
  while (a.ids.size() + (b ? b->ids.size() : 0) + specials > max_positions) {
    BertSequence& victim = (b && b->ids.size() >= a.ids.size()) ? *b : a;
    victim.ids.pop_back();
    victim.pos_ids.pop_back();
  }
  BertInput in;
  const auto push = [&](int id, int pos, int seg) {
    in.ids.push_back(id);
    in.pos_ids.push_back(pos);
    in.segment_ids.push_back(seg);
  };
  push(Vocab::cls_id, unknown_pos, 0);
  for (std::size_t i = 0; i < a.ids.size(); ++i) push(a.ids[i], a.pos_ids[i], 0);
  push(Vocab::sep_id, unknown_pos, 0);
  if (b) {
    for (std::size_t i = 0; i < b->ids.size(); ++i) push(b->ids[i], b->pos_ids[i], 1);
    push(Vocab::sep_id, unknown_pos, 1);
  }
  return in;
}

/// M x D input representation before the embedding layer norm.
inline Tensor embed_with_pos(const BertInput& in, const BertModel& model) {
  const auto& cfg = model.config();
  const std::size_t M = in.size();
  if (in.pos_ids.size() != M || in.segment_ids.size() != M) throw ShapeError("embed_with_pos: misaligned input");
  if (M > cfg.max_positions) throw ShapeError("embed_with_pos: sequence longer than max_positions");
  Tensor h = embedding_lookup(model.token_embed, in.ids);
  if (cfg.fusion == BertFusion::sum) {
    h = add(h, embedding_lookup(model.pos_tag_embed, in.pos_ids));
  } else if (cfg.fusion == BertFusion::concat_affine) {
    h = add(matmul(concat(h, embedding_lookup(model.pos_tag_embed, in.pos_ids), 1), model.fuse_weight),
            model.fuse_bias);
  }
  h = add(h, embedding_lookup(model.segment_embed, in.segment_ids));
  std::vector<int> positions(M);
  for (std::size_t i = 0; i < M; ++i) positions[i] = static_cast<int>(i);
  return add(h, embedding_lookup(model.position_embed, positions));
}

/// 1 x C logits from the [CLS] position.
inline Tensor classify_logits(const BertInput& in, const BertModel& model, const ForwardContext& ctx = {}) {
  Tensor h = layer_norm(embed_with_pos(in, model), model.embed_norm.gain, model.embed_norm.bias);
  h = ctx.drop(h);
  const Tensor enc = encoder_stack(h, model.encoder, ctx);
  return add(matmul(row(enc, 0), model.cls_weight), model.cls_bias);
}

/// Class probabilities (sum to one).
inline std::vector<double> classify(const BertInput& in, const BertModel& model) {
  NoGradGuard no_grad;
  return softmax(classify_logits(in, model), 1).to_vector();
}

struct LabeledInput {
  BertInput input;
  int label = 0;
};

/// Mean cross-entropy over the batch; one optimizer step.
inline double finetune_step(std::span<const LabeledInput> batch, BertModel& model, Adam& optimizer, Rng& rng) {
  if (batch.empty()) throw UsageError("finetune_step: empty batch");
  const auto& cfg = model.config();
  ForwardContext ctx{true, cfg.dropout, &rng, nullptr};
  double total = 0.0;
  for (const auto& ex : batch) {
    if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= cfg.num_classes) {
      throw UsageError("label " + std::to_string(ex.label) + " out of range");
    }
    const std::vector<int> gold = {ex.label};
    const Tensor loss = cross_entropy_label_smoothed(classify_logits(ex.input, model, ctx), gold, 0.0);
    if (!std::isfinite(loss.item())) throw NumericError("non-finite classification loss");
    backward(loss);
    total += loss.item();
  }
  auto& params = model.params().tensors();
  scale_grads(params, 1.0 / static_cast<double>(batch.size()));
  optimizer.step(params);
  zero_grads(params);
  return total / static_cast<double>(batch.size());
}

}  // namespace synfuse
