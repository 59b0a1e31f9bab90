#pragma once

// Scaled dot-product attention and the encoder/decoder subunits built on it.
// Sublayers use the post-norm residual arrangement:
//   x <- LayerNorm(x + Dropout(sublayer(x)))

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "synfuse/checkpoint.hpp"
#include "synfuse/optim.hpp"
#include "synfuse/rng.hpp"
#include "synfuse/tensor.hpp"

namespace synfuse {

enum class AttentionKind { encoder_self, decoder_self, cross };

inline const char* attention_kind_name(AttentionKind k) {
  switch (k) {
    case AttentionKind::encoder_self:
      return "self-enc";
    case AttentionKind::decoder_self:
      return "self-dec";
    case AttentionKind::cross:
      return "cross";
  }
  return "?";
}

/// Softmax weights of one head: rows are query positions, columns key positions.
struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  AttentionKind kind = AttentionKind::encoder_self;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> weights;

  double at(std::size_t r, std::size_t c) const { return weights[r * cols + c]; }
};

/// Key positions a query may not attend to (nonzero = blocked).
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<unsigned char> blocked;

  static AttentionMask causal(std::size_t n) {
    AttentionMask m{n, n, std::vector<unsigned char>(n * n, 0)};
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) m.blocked[i * n + j] = 1;
    }
    return m;
  }
};

/// Per-forward settings: dropout is active only when training and an rng is set.
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
  std::vector<AttentionRecord>* records = nullptr;

  Tensor drop(const Tensor& x) const {
    if (!training || rng == nullptr || dropout == 0.0) return x;
    return synfuse::dropout(x, dropout, true, *rng);
  }
};

struct HeadWeights {
  Tensor query;  // D x P
  Tensor key;    // D x P
  Tensor value;  // D x P
};

struct AttentionResult {
  Tensor output;   // rows(queries) x P
  Tensor weights;  // rows(queries) x rows(keys)
};

/// K = Hkv W_K, Q = Hq W_Q, V = Hkv W_V, A = softmax(Q K^T / sqrt(P)) V,
/// with blocked positions set to -inf before the softmax.
inline AttentionResult attention(const Tensor& query_input, const Tensor& key_input, const HeadWeights& w,
                                 const AttentionMask* mask = nullptr) {
  const Tensor k = matmul(key_input, w.key);
  const Tensor q = matmul(query_input, w.query);
  const Tensor v = matmul(key_input, w.value);
  const double p = static_cast<double>(w.key.cols());
  Tensor scores = scale(matmul_transposed(q, k), 1.0 / std::sqrt(p));
  if (mask != nullptr) {
    if (mask->rows != scores.rows() || mask->cols != scores.cols()) {
      throw ShapeError("attention: mask " + std::to_string(mask->rows) + "x" + std::to_string(mask->cols) +
                       " does not match scores " + shape_str(scores.shape()));
    }
    scores = masked_fill(scores, mask->blocked, -std::numeric_limits<double>::infinity());
  }
  Tensor weights = softmax(scores, 1);
  return {matmul(weights, v), weights};
}

/// Self-attention over H with the argument order W_K, W_Q, W_V.
inline AttentionResult attention(const Tensor& h, const Tensor& w_key, const Tensor& w_query, const Tensor& w_value,
                                 const AttentionMask* mask = nullptr) {
  return attention(h, h, HeadWeights{w_query, w_key, w_value}, mask);
}

struct MultiHeadParams {
  std::vector<HeadWeights> heads;
  Tensor output;  // D x D
};

/// Heads run independently on the same inputs; their outputs are
/// concatenated and projected by W_O.
inline Tensor multi_head(const Tensor& query_input, const Tensor& key_input, const MultiHeadParams& p,
                         const AttentionMask* mask, const ForwardContext& ctx, std::size_t layer,
                         AttentionKind kind) {
  std::vector<Tensor> outs;
  outs.reserve(p.heads.size());
  for (std::size_t h = 0; h < p.heads.size(); ++h) {
    auto r = attention(query_input, key_input, p.heads[h], mask);
    if (ctx.records != nullptr) {
      ctx.records->push_back({layer, h, kind, r.weights.rows(), r.weights.cols(), r.weights.to_vector()});
    }
    outs.push_back(std::move(r.output));
  }
  return matmul(outs.size() == 1 ? outs.front() : concat(outs, 1), p.output);
}

struct NormParams {
  Tensor gain;
  Tensor bias;
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

struct EncoderLayerParams {
  MultiHeadParams self_attn;
  NormParams norm1;
  FeedForwardParams ffn;
  NormParams norm2;
};

struct DecoderLayerParams {
  MultiHeadParams self_attn;
  NormParams norm1;
  MultiHeadParams cross_attn;
  NormParams norm2;
  FeedForwardParams ffn;
  NormParams norm3;
};

/// Creates named parameters. Each tensor is initialized from its own stream
/// derived from (seed, name), so a parameter's initial value does not depend
/// on which other parameters a model has.
class ParamFactory {
 public:
  ParamFactory(ParameterStore& store, std::uint64_t seed) : store_(store), seed_(seed) {}

  Tensor glorot(const std::string& name, Shape shape) {
    Rng rng = Rng::derive(seed_, name);
    return store_.add(name, glorot_init(shape, rng));
  }
  Tensor constant(const std::string& name, Shape shape, double v) {
    return store_.add(name, Tensor::full(std::move(shape), v, true));
  }

  MultiHeadParams multi_head(const std::string& prefix, std::size_t d_model, std::size_t heads) {
    MultiHeadParams p;
    const std::size_t width = d_model / heads;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::string hp = prefix + ".h" + std::to_string(h);
      HeadWeights w;
      w.query = glorot(hp + ".q", {d_model, width});
      w.key = glorot(hp + ".k", {d_model, width});
      w.value = glorot(hp + ".v", {d_model, width});
      p.heads.push_back(w);
    }
    p.output = glorot(prefix + ".o", {d_model, d_model});
    return p;
  }

  NormParams norm(const std::string& prefix, std::size_t d_model) {
    return {constant(prefix + ".gain", {1, d_model}, 1.0), constant(prefix + ".bias", {1, d_model}, 0.0)};
  }

  FeedForwardParams ffn(const std::string& prefix, std::size_t d_model, std::size_t width) {
    return {glorot(prefix + ".w1", {d_model, width}), constant(prefix + ".b1", {1, width}, 0.0),
            glorot(prefix + ".w2", {width, d_model}), constant(prefix + ".b2", {1, d_model}, 0.0)};
  }

  EncoderLayerParams encoder_layer(const std::string& prefix, std::size_t d_model, std::size_t heads,
                                   std::size_t ffn_width) {
    EncoderLayerParams p;
    p.self_attn = multi_head(prefix + ".self", d_model, heads);
    p.norm1 = norm(prefix + ".norm1", d_model);
    p.ffn = ffn(prefix + ".ffn", d_model, ffn_width);
    p.norm2 = norm(prefix + ".norm2", d_model);
    return p;
  }

  DecoderLayerParams decoder_layer(const std::string& prefix, std::size_t d_model, std::size_t heads,
                                   std::size_t ffn_width) {
    DecoderLayerParams p;
    p.self_attn = multi_head(prefix + ".self", d_model, heads);
    p.norm1 = norm(prefix + ".norm1", d_model);
    p.cross_attn = multi_head(prefix + ".cross", d_model, heads);
    p.norm2 = norm(prefix + ".norm2", d_model);
    p.ffn = ffn(prefix + ".ffn", d_model, ffn_width);
    p.norm3 = norm(prefix + ".norm3", d_model);
    return p;
  }

 private:
  ParameterStore& store_;
  std::uint64_t seed_;
};

inline Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  return add(matmul(relu(add(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

inline Tensor residual_norm(const Tensor& x, const Tensor& sub, const NormParams& n, const ForwardContext& ctx) {
  return layer_norm(add(x, ctx.drop(sub)), n.gain, n.bias);
}

/// Stack of self-attention + feed-forward subunits over an M x D input.
inline Tensor encoder_stack(const Tensor& embedded, std::span<const EncoderLayerParams> layers,
                            const ForwardContext& ctx) {
  Tensor x = embedded;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& p = layers[l];
    x = residual_norm(x, multi_head(x, x, p.self_attn, nullptr, ctx, l, AttentionKind::encoder_self), p.norm1, ctx);
    x = residual_norm(x, feed_forward(x, p.ffn), p.norm2, ctx);
  }
  return x;
}

/// Causal self-attention, cross-attention over the encoder output, then
/// feed-forward, per subunit. Returns T x D hidden states.
inline Tensor decoder_stack(const Tensor& embedded, const Tensor& memory, std::span<const DecoderLayerParams> layers,
                            const ForwardContext& ctx) {
  const AttentionMask causal = AttentionMask::causal(embedded.rows());
  Tensor y = embedded;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& p = layers[l];
    y = residual_norm(y, multi_head(y, y, p.self_attn, &causal, ctx, l, AttentionKind::decoder_self), p.norm1, ctx);
    y = residual_norm(y, multi_head(y, memory, p.cross_attn, nullptr, ctx, l, AttentionKind::cross), p.norm2, ctx);
    y = residual_norm(y, feed_forward(y, p.ffn), p.norm3, ctx);
  }
  return y;
}

}  // namespace synfuse
