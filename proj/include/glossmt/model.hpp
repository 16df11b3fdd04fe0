#pragma once

// Post-norm encoder-decoder transformer with greedy and beam decoding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "glossmt/batch.hpp"
#include "glossmt/error.hpp"
#include "glossmt/hyperparams.hpp"
#include "glossmt/tensor.hpp"

namespace glossmt {

// Dropout is active only when `training` is set; `rng` must then be non-null.
struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

template <class S>
struct AttentionWeights {
  BasicTensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class S>
struct LayerNormWeights {
  BasicTensor<S> gain, bias;
};

template <class S>
struct FeedForwardWeights {
  BasicTensor<S> w1, b1, w2, b2;
};

template <class S>
struct EncoderLayer {
  AttentionWeights<S> self_attn;
  LayerNormWeights<S> norm1;
  FeedForwardWeights<S> ffn;
  LayerNormWeights<S> norm2;
};

template <class S>
struct DecoderLayer {
  AttentionWeights<S> self_attn;
  LayerNormWeights<S> norm1;
  AttentionWeights<S> cross_attn;
  LayerNormWeights<S> norm2;
  FeedForwardWeights<S> ffn;
  LayerNormWeights<S> norm3;
};

inline constexpr double kLayerNormEps = 1e-6;

// Projects q/k/v inputs, runs `heads` parallel scaled dot-product attentions
// and projects the concatenated heads back to width d.
template <class S>
BasicTensor<S> multi_head_attention(const AttentionWeights<S>& w, const BasicTensor<S>& q_in,
                                    const BasicTensor<S>& k_in, const BasicTensor<S>& v_in,
                                    const AttentionMask& mask, std::size_t heads) {
  const std::size_t d = q_in.shape().back();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("multi_head_attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  auto q = linear(q_in, w.wq, w.bq);
  auto k = linear(k_in, w.wk, w.bk);
  auto v = linear(v_in, w.wv, w.bv);
  return linear(scaled_dot_attention(q, k, v, heads, mask), w.wo, w.bo);
}

// LayerNorm(x + Dropout(sublayer(x))).
template <class S, class Sublayer>
BasicTensor<S> sublayer_apply(const BasicTensor<S>& x, Sublayer&& sublayer, const LayerNormWeights<S>& norm,
                              double dropout_rate, const ForwardContext& ctx) {
  BasicTensor<S> y = sublayer(x);
  if (y.shape() != x.shape()) {
    throw ContractError("sublayer_apply: sublayer maps " + shape_string(x.shape()) + " to " +
                        shape_string(y.shape()));
  }
  if (ctx.training && dropout_rate > 0.0) {
    if (!ctx.rng) throw ContractError("sublayer_apply: training without an rng");
    y = dropout(y, dropout_rate, true, *ctx.rng);
  }
  return layer_norm(add(x, y), norm.gain, norm.bias, static_cast<S>(kLayerNormEps));
}

// Fixed sinusoidal table [length, d].
template <class S>
BasicTensor<S> positional_encoding(std::size_t length, std::size_t d) {
  Buffer<S> pe(length * d);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      pe[pos * d + i] = static_cast<S>(std::sin(angle));
      if (i + 1 < d) pe[pos * d + i + 1] = static_cast<S>(std::cos(angle));
    }
  }
  return BasicTensor<S>::constant({length, d}, std::move(pe));
}

template <class S>
class TransformerModel {
 public:
  using TensorT = BasicTensor<S>;
  using NamedParameters = std::vector<std::pair<std::string, TensorT>>;

  TransformerModel(const HyperParams& hp, std::size_t src_vocab_size, std::size_t tgt_vocab_size,
                   std::uint64_t seed)
      : hp_(hp), src_vocab_size_(src_vocab_size), tgt_vocab_size_(tgt_vocab_size) {
    hp_.validate();
    if (src_vocab_size <= kNumReserved || tgt_vocab_size <= kNumReserved) {
      throw ConfigError("model: vocabularies must contain at least one non-reserved token");
    }
    std::mt19937_64 rng(seed);
    const auto d = static_cast<std::size_t>(hp_.embed_dim);
    const auto ff = static_cast<std::size_t>(hp_.ff_dim);

    src_embedding_ = xavier("src_embedding", {src_vocab_size, d}, rng);
    tgt_embedding_ = xavier("tgt_embedding", {tgt_vocab_size, d}, rng);
    for (int l = 0; l < hp_.num_layers; ++l) {
      const std::string p = "encoder." + std::to_string(l) + ".";
      EncoderLayer<S> layer;
      layer.self_attn = attention_weights(p + "self_attn.", d, rng);
      layer.norm1 = norm_weights(p + "norm1.", d);
      layer.ffn = ffn_weights(p + "ffn.", d, ff, rng);
      layer.norm2 = norm_weights(p + "norm2.", d);
      encoder_.push_back(std::move(layer));
    }
    for (int l = 0; l < hp_.num_layers; ++l) {
      const std::string p = "decoder." + std::to_string(l) + ".";
      DecoderLayer<S> layer;
      layer.self_attn = attention_weights(p + "self_attn.", d, rng);
      layer.norm1 = norm_weights(p + "norm1.", d);
      layer.cross_attn = attention_weights(p + "cross_attn.", d, rng);
      layer.norm2 = norm_weights(p + "norm2.", d);
      layer.ffn = ffn_weights(p + "ffn.", d, ff, rng);
      layer.norm3 = norm_weights(p + "norm3.", d);
      decoder_.push_back(std::move(layer));
    }
    out_weight_ = xavier("output.weight", {d, tgt_vocab_size}, rng);
    out_bias_ = zeros("output.bias", {tgt_vocab_size});
  }

  TransformerModel(const TransformerModel&) = delete;
  TransformerModel& operator=(const TransformerModel&) = delete;
  TransformerModel(TransformerModel&&) noexcept = default;
  TransformerModel& operator=(TransformerModel&&) noexcept = default;

  const HyperParams& hyper_params() const { return hp_; }
  std::size_t src_vocab_size() const { return src_vocab_size_; }
  std::size_t tgt_vocab_size() const { return tgt_vocab_size_; }

  // Parameters in a fixed order; tensors are shared handles.
  const NamedParameters& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  static std::size_t expected_parameter_count(const HyperParams& hp, std::size_t src_vocab,
                                              std::size_t tgt_vocab) {
    const auto d = static_cast<std::size_t>(hp.embed_dim);
    const auto ff = static_cast<std::size_t>(hp.ff_dim);
    const auto n = static_cast<std::size_t>(hp.num_layers);
    const std::size_t attn = 4 * (d * d + d);
    const std::size_t norm = 2 * d;
    const std::size_t ffn = d * ff + ff + ff * d + d;
    return (src_vocab + tgt_vocab) * d + n * (attn + 2 * norm + ffn) + n * (2 * attn + 3 * norm + ffn) +
           d * tgt_vocab + tgt_vocab;
  }

  // [B, S, d] encoder states.
  TensorT encode(const SequenceBatch& batch, const ForwardContext& ctx = {}) const {
    check_ids(batch.src_ids, src_vocab_size_, "source");
    const std::size_t heads = static_cast<std::size_t>(hp_.num_heads);
    TensorT x = embed(src_embedding_, batch.src_ids, batch.batch, batch.src_len, ctx);
    AttentionMask mask{batch.src_pad, false};
    for (const auto& layer : encoder_) {
      x = sublayer_apply(
          x, [&](const TensorT& in) { return multi_head_attention(layer.self_attn, in, in, in, mask, heads); },
          layer.norm1, hp_.dropout, ctx);
      x = sublayer_apply(
          x, [&](const TensorT& in) { return feed_forward(layer.ffn, in); }, layer.norm2, hp_.dropout, ctx);
    }
    return x;
  }

  // [B, T, d] decoder states for explicit decoder inputs.
  TensorT decode_states(const std::vector<std::int32_t>& tgt_in, std::size_t batch, std::size_t tgt_len,
                        const std::vector<std::uint8_t>& tgt_pad, const TensorT& memory,
                        const std::vector<std::uint8_t>& src_pad, const ForwardContext& ctx = {}) const {
    if (memory.rank() != 3 || memory.dim(0) != batch || memory.dim(2) != static_cast<std::size_t>(hp_.embed_dim) ||
        (!src_pad.empty() && src_pad.size() != batch * memory.dim(1))) {
      throw ContractError("decode: memory " + shape_string(memory.shape()) + " does not match batch of " +
                          std::to_string(batch) + " rows");
    }
    check_ids(tgt_in, tgt_vocab_size_, "target");
    const std::size_t heads = static_cast<std::size_t>(hp_.num_heads);
    TensorT y = embed(tgt_embedding_, tgt_in, batch, tgt_len, ctx);
    AttentionMask self_mask{tgt_pad, true};
    AttentionMask cross_mask{src_pad, false};
    for (const auto& layer : decoder_) {
      y = sublayer_apply(
          y, [&](const TensorT& in) { return multi_head_attention(layer.self_attn, in, in, in, self_mask, heads); },
          layer.norm1, hp_.dropout, ctx);
      y = sublayer_apply(
          y,
          [&](const TensorT& in) {
            return multi_head_attention(layer.cross_attn, in, memory, memory, cross_mask, heads);
          },
          layer.norm2, hp_.dropout, ctx);
      y = sublayer_apply(
          y, [&](const TensorT& in) { return feed_forward(layer.ffn, in); }, layer.norm3, hp_.dropout, ctx);
    }
    return y;
  }

  // [B, T, V] logits for the batch's decoder inputs.
  TensorT decode(const SequenceBatch& batch, const TensorT& memory, const ForwardContext& ctx = {}) const {
    if (memory.rank() != 3 || memory.dim(1) != batch.src_len) {
      throw ContractError("decode: memory " + shape_string(memory.shape()) + " does not match source length " +
                          std::to_string(batch.src_len));
    }
    return project(decode_states(batch.tgt_in_ids, batch.batch, batch.tgt_len, batch.tgt_pad, memory,
                                 batch.src_pad, ctx));
  }

  TensorT project(const TensorT& states) const { return linear(states, out_weight_, out_bias_); }

  // Batched greedy decoding. Each output excludes BOS and the final EOS.
  std::vector<TokenIds> greedy_decode(const std::vector<TokenIds>& sources, std::size_t max_len) const {
    if (sources.empty()) return {};
    const SequenceBatch src = SequenceBatch::build(sources, {});
    const TensorT memory = encode(src);
    const std::size_t b = src.batch;
    std::vector<TokenIds> outputs(b);
    std::vector<bool> done(b, false);
    std::vector<std::int32_t> prefix(b, kBosId);  // row-major [b, t]
    for (std::size_t t = 1; t <= max_len; ++t) {
      const auto logp = last_log_probs(prefix, b, t, memory, src.src_pad);
      std::vector<std::int32_t> next(b);
      bool all_done = true;
      for (std::size_t r = 0; r < b; ++r) {
        if (done[r]) {
          next[r] = kEosId;
          continue;
        }
        const std::int32_t tok = argmax_token(logp, r);
        next[r] = tok;
        if (tok == kEosId) {
          done[r] = true;
        } else {
          outputs[r].push_back(tok);
          all_done = false;
        }
      }
      if (all_done) break;
      std::vector<std::int32_t> grown(b * (t + 1));
      for (std::size_t r = 0; r < b; ++r) {
        std::copy_n(prefix.begin() + static_cast<std::ptrdiff_t>(r * t), t,
                    grown.begin() + static_cast<std::ptrdiff_t>(r * (t + 1)));
        grown[r * (t + 1) + t] = next[r];
      }
      prefix = std::move(grown);
    }
    return outputs;
  }

  TokenIds greedy_decode(const TokenIds& source, std::size_t max_len) const {
    return greedy_decode(std::vector<TokenIds>{source}, max_len).front();
  }

  struct BeamResult {
    TokenIds tokens;      // without BOS/EOS
    double log_prob = 0;  // sum over generated tokens, including EOS when emitted
    bool finished = false;
  };

  // Length-normalised beam search: hypotheses are ranked by
  // log_prob / (generated length)^length_penalty. Width 1 reproduces greedy.
  BeamResult beam_search(const TokenIds& source, std::size_t beam_width, std::size_t max_len,
                         double length_penalty = 1.0) const {
    if (beam_width < 1) throw ConfigError("beam_decode: beam width must be >= 1");
    const SequenceBatch src = SequenceBatch::build({source}, {});
    const TensorT memory1 = encode(src);

    struct Hyp {
      TokenIds seq;  // includes leading BOS
      double score;
    };
    std::vector<Hyp> live{{{kBosId}, 0.0}};
    std::vector<BeamResult> finished;
    auto normalized = [&](double lp, std::size_t len) {
      return length_penalty == 0.0 ? lp : lp / std::pow(static_cast<double>(std::max<std::size_t>(len, 1)), length_penalty);
    };

    for (std::size_t t = 1; t <= max_len && !live.empty(); ++t) {
      const std::size_t k = live.size();
      std::vector<std::int32_t> prefix;
      prefix.reserve(k * t);
      for (const auto& h : live) prefix.insert(prefix.end(), h.seq.begin(), h.seq.end());
      const TensorT memory = tile(memory1, k);
      std::vector<std::uint8_t> src_pad;
      for (std::size_t i = 0; i < k; ++i) src_pad.insert(src_pad.end(), src.src_pad.begin(), src.src_pad.end());
      const auto logp = last_log_probs(prefix, k, t, memory, src_pad);

      struct Candidate {
        double score;
        std::size_t beam;
        double step_log_prob;
        std::int32_t token;
      };
      std::vector<Candidate> cands;
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t v = 0; v < tgt_vocab_size_; ++v) {
          if (!generable(static_cast<std::int32_t>(v))) continue;
          const double lp = logp[i * tgt_vocab_size_ + v];
          cands.push_back({live[i].score + lp, i, lp, static_cast<std::int32_t>(v)});
        }
      }
      std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.beam != b.beam) return a.beam < b.beam;
        if (a.step_log_prob != b.step_log_prob) return a.step_log_prob > b.step_log_prob;
        return a.token < b.token;
      });
      std::vector<Hyp> next;
      for (std::size_t c = 0; c < cands.size() && c < beam_width; ++c) {
        const auto& cand = cands[c];
        TokenIds seq = live[cand.beam].seq;
        if (cand.token == kEosId) {
          finished.push_back({TokenIds(seq.begin() + 1, seq.end()), cand.score, true});
        } else {
          seq.push_back(cand.token);
          next.push_back({std::move(seq), cand.score});
        }
      }
      live = std::move(next);
      if (finished.size() >= beam_width) break;
    }
    // Hypotheses cut off by max_len compete with finished ones.
    for (const auto& h : live) finished.push_back({TokenIds(h.seq.begin() + 1, h.seq.end()), h.score, false});
    std::size_t best = 0;
    for (std::size_t i = 1; i < finished.size(); ++i) {
      const auto len = [&](const BeamResult& r) { return r.tokens.size() + (r.finished ? 1 : 0); };
      if (normalized(finished[i].log_prob, len(finished[i])) >
          normalized(finished[best].log_prob, len(finished[best]))) {
        best = i;
      }
    }
    return finished[best];
  }

  TokenIds beam_decode(const TokenIds& source, std::size_t beam_width, std::size_t max_len,
                       double length_penalty = 1.0) const {
    return beam_search(source, beam_width, max_len, length_penalty).tokens;
  }

  // Log-probability the model assigns to emitting `tokens` then EOS (EOS
  // omitted when `with_eos` is false).
  double sequence_log_prob(const TokenIds& source, const TokenIds& tokens, bool with_eos) const {
    const SequenceBatch b = SequenceBatch::build({source}, {tokens});
    const TensorT logits = decode(b, encode(b));
    const std::size_t v = tgt_vocab_size_;
    double total = 0;
    const std::size_t steps = tokens.size() + (with_eos ? 1 : 0);
    for (std::size_t t = 0; t < steps; ++t) {
      const auto row = logits.data().subspan(t * v, v);
      const auto lp = log_softmax_row(row);
      total += lp[static_cast<std::size_t>(b.tgt_out_ids[t])];
    }
    return total;
  }

  // Tokens a decoder may emit; PAD and BOS never are.
  static bool generable(std::int32_t token) { return token != kPadId && token != kBosId; }

 private:
  TensorT embed(const TensorT& table, const std::vector<std::int32_t>& ids, std::size_t batch, std::size_t len,
                const ForwardContext& ctx) const {
    const auto d = static_cast<std::size_t>(hp_.embed_dim);
    TensorT x = embedding(table, std::span<const std::int32_t>(ids), {batch, len});
    x = scale(x, static_cast<S>(std::sqrt(static_cast<double>(d))));
    x = add_broadcast(x, positional_encoding<S>(len, d));
    if (ctx.training && hp_.dropout > 0.0) {
      if (!ctx.rng) throw ContractError("model: training without an rng");
      x = dropout(x, hp_.dropout, true, *ctx.rng);
    }
    return x;
  }

  TensorT feed_forward(const FeedForwardWeights<S>& w, const TensorT& x) const {
    return linear(relu(linear(x, w.w1, w.b1)), w.w2, w.b2);
  }

  static void check_ids(const std::vector<std::int32_t>& ids, std::size_t vocab, const char* side) {
    for (std::int32_t id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
        throw DataError(std::string("model: ") + side + " token id " + std::to_string(id) +
                        " outside vocabulary of size " + std::to_string(vocab));
      }
    }
  }

  static std::vector<double> log_softmax_row(std::span<const S> row) {
    double mx = -std::numeric_limits<double>::infinity();
    for (S x : row) mx = std::max(mx, static_cast<double>(x));
    double z = 0;
    for (S x : row) z += std::exp(static_cast<double>(x) - mx);
    const double lse = mx + std::log(z);
    std::vector<double> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = static_cast<double>(row[i]) - lse;
    return out;
  }

  // Log-probabilities at the last decoder position, [rows, V].
  std::vector<double> last_log_probs(const std::vector<std::int32_t>& prefix, std::size_t rows, std::size_t len,
                                     const TensorT& memory, const std::vector<std::uint8_t>& src_pad) const {
    const TensorT states = decode_states(prefix, rows, len, {}, memory, src_pad);
    const auto d = static_cast<std::size_t>(hp_.embed_dim);
    Buffer<S> last(rows * d);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(states.data().begin() + static_cast<std::ptrdiff_t>((r * len + len - 1) * d), d,
                  last.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    const TensorT logits = project(TensorT::constant({rows, d}, std::move(last)));
    std::vector<double> out;
    out.reserve(rows * tgt_vocab_size_);
    for (std::size_t r = 0; r < rows; ++r) {
      auto lp = log_softmax_row(logits.data().subspan(r * tgt_vocab_size_, tgt_vocab_size_));
      out.insert(out.end(), lp.begin(), lp.end());
    }
    return out;
  }

  std::int32_t argmax_token(const std::vector<double>& logp, std::size_t row) const {
    std::int32_t best = -1;
    double best_lp = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < tgt_vocab_size_; ++v) {
      if (!generable(static_cast<std::int32_t>(v))) continue;
      const double lp = logp[row * tgt_vocab_size_ + v];
      if (best < 0 || lp > best_lp) {
        best = static_cast<std::int32_t>(v);
        best_lp = lp;
      }
    }
    return best;
  }

  static TensorT tile(const TensorT& memory, std::size_t copies) {
    Buffer<S> values;
    values.reserve(memory.size() * copies);
    for (std::size_t i = 0; i < copies; ++i) values.insert(values.end(), memory.data().begin(), memory.data().end());
    return TensorT::constant({copies, memory.dim(1), memory.dim(2)}, std::move(values));
  }

  TensorT add_param(std::string name, TensorT t) {
    params_.emplace_back(std::move(name), t);
    return t;
  }

  TensorT xavier(std::string name, Shape shape, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Buffer<S> v(shape_size(shape));
    for (auto& x : v) x = static_cast<S>(dist(rng));
    return add_param(std::move(name), TensorT::parameter(std::move(shape), std::move(v)));
  }

  TensorT zeros(std::string name, Shape shape) {
    const std::size_t n = shape_size(shape);
    return add_param(std::move(name), TensorT::parameter(std::move(shape), Buffer<S>(n, S(0))));
  }

  TensorT ones(std::string name, Shape shape) {
    const std::size_t n = shape_size(shape);
    return add_param(std::move(name), TensorT::parameter(std::move(shape), Buffer<S>(n, S(1))));
  }

  AttentionWeights<S> attention_weights(const std::string& p, std::size_t d, std::mt19937_64& rng) {
    AttentionWeights<S> w;
    w.wq = xavier(p + "wq", {d, d}, rng);
    w.bq = zeros(p + "bq", {d});
    w.wk = xavier(p + "wk", {d, d}, rng);
    w.bk = zeros(p + "bk", {d});
    w.wv = xavier(p + "wv", {d, d}, rng);
    w.bv = zeros(p + "bv", {d});
    w.wo = xavier(p + "wo", {d, d}, rng);
    w.bo = zeros(p + "bo", {d});
    return w;
  }

  LayerNormWeights<S> norm_weights(const std::string& p, std::size_t d) {
    return {ones(p + "gain", {d}), zeros(p + "bias", {d})};
  }

  FeedForwardWeights<S> ffn_weights(const std::string& p, std::size_t d, std::size_t ff, std::mt19937_64& rng) {
    FeedForwardWeights<S> w;
    w.w1 = xavier(p + "w1", {d, ff}, rng);
    w.b1 = zeros(p + "b1", {ff});
    w.w2 = xavier(p + "w2", {ff, d}, rng);
    w.b2 = zeros(p + "b2", {d});
    return w;
  }

  HyperParams hp_;
  std::size_t src_vocab_size_;
  std::size_t tgt_vocab_size_;
  NamedParameters params_;
  TensorT src_embedding_, tgt_embedding_;
  std::vector<EncoderLayer<S>> encoder_;
  std::vector<DecoderLayer<S>> decoder_;
  TensorT out_weight_, out_bias_;
};

}  // namespace glossmt
