#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dualpath/autodiff.hpp"
#include "dualpath/error.hpp"
#include "dualpath/lora.hpp"
#include "dualpath/model_config.hpp"
#include "dualpath/rng.hpp"
#include "dualpath/tensor.hpp"

namespace dualpath {

// The chat model C: embedding, decoder-only feature map with causal
// grouped-query attention and SwiGLU feed-forward, learned absolute
// positions, and the linear language-modelling head. Frozen during guard
// training.
struct LayerWeights {
    Tensor w_q;        // [d x d]
    Tensor w_k;        // [d x kv_width]
    Tensor w_v;        // [d x kv_width]
    Tensor w_o;        // [d x d]
    Tensor w_gate;     // [d x d_ff]
    Tensor w_up;       // [d x d_ff]
    Tensor w_down;     // [d_ff x d]
    Tensor attn_gain;  // [d]
    Tensor ffn_gain;   // [d]
};

struct BackboneWeights {
    ModelConfig config;
    Tensor embedding;  // [vocab x d]
    Tensor pos;        // [max_seq_len x d]
    std::vector<LayerWeights> layers;
    Tensor final_gain;  // [d]
    Tensor lm_head;     // [d x vocab]
};

inline std::size_t backbone_param_count(const ModelConfig& cfg) {
    const std::size_t per_layer = cfg.d_model * cfg.d_model        // w_q
                                  + cfg.d_model * cfg.kv_width()   // w_k
                                  + cfg.d_model * cfg.kv_width()   // w_v
                                  + cfg.d_model * cfg.d_model      // w_o
                                  + 3 * cfg.d_model * cfg.d_ff     // gate, up, down
                                  + 2 * cfg.d_model;               // norm gains
    return cfg.vocab_size * cfg.d_model + cfg.max_seq_len * cfg.d_model + cfg.n_layers * per_layer + cfg.d_model +
           cfg.vocab_size * cfg.d_model;
}

// Deterministic init: every matrix is filled from one seeded stream in
// declaration order, uniform on [-1/sqrt(rows), +1/sqrt(rows)]; norm gains
// start at 1.
inline BackboneWeights init_backbone(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    BackboneWeights w;
    w.config = cfg;
    Rng rng(mix_seed(seed, 0x6261636bULL));  // "back"

    auto fill = [&rng](Tensor& t) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(t.shape[0]));
        for (double& v : t.data) v = rng.uniform(-bound, bound);
    };

    w.embedding = Tensor({cfg.vocab_size, cfg.d_model});
    fill(w.embedding);
    w.pos = Tensor({cfg.max_seq_len, cfg.d_model});
    fill(w.pos);
    w.layers.resize(cfg.n_layers);
    for (LayerWeights& layer : w.layers) {
        layer.w_q = Tensor({cfg.d_model, cfg.d_model});
        fill(layer.w_q);
        layer.w_k = Tensor({cfg.d_model, cfg.kv_width()});
        fill(layer.w_k);
        layer.w_v = Tensor({cfg.d_model, cfg.kv_width()});
        fill(layer.w_v);
        layer.w_o = Tensor({cfg.d_model, cfg.d_model});
        fill(layer.w_o);
        layer.w_gate = Tensor({cfg.d_model, cfg.d_ff});
        fill(layer.w_gate);
        layer.w_up = Tensor({cfg.d_model, cfg.d_ff});
        fill(layer.w_up);
        layer.w_down = Tensor({cfg.d_ff, cfg.d_model});
        fill(layer.w_down);
        layer.attn_gain = Tensor({cfg.d_model}, std::vector<double>(cfg.d_model, 1.0));
        layer.ffn_gain = Tensor({cfg.d_model}, std::vector<double>(cfg.d_model, 1.0));
    }
    w.final_gain = Tensor({cfg.d_model}, std::vector<double>(cfg.d_model, 1.0));
    w.lm_head = Tensor({cfg.d_model, cfg.vocab_size});
    fill(w.lm_head);
    return w;
}

// Adapter tensors bound onto a tape. Training binds them as parameters so
// backward() exposes dLoss/dA and dLoss/dB; evaluation binds constants.
struct BoundAdapter {
    Tape::NodeId a;
    Tape::NodeId b;
    double scaling;
    double dropout_p;
};

using AdapterBinding = std::map<AdapterKey, BoundAdapter>;

inline AdapterBinding bind_adapters(Tape& tape, const AdapterSet& set, bool as_parameters) {
    AdapterBinding binding;
    for (const auto& [key, ad] : set.items) {
        BoundAdapter bound;
        bound.a = as_parameters ? tape.parameter(ad.a) : tape.constant(ad.a);
        bound.b = as_parameters ? tape.parameter(ad.b) : tape.constant(ad.b);
        bound.scaling = ad.scaling();
        bound.dropout_p = ad.dropout_p;
        binding.emplace(key, bound);
    }
    return binding;
}

// One or more token sequences packed into a single row block; attention and
// position embeddings treat each segment independently. Packing several
// examples into one tape amortizes per-op overhead over the micro-batch.
struct PackedSequences {
    std::vector<std::size_t> tokens;                            // concatenated
    std::vector<std::pair<std::size_t, std::size_t>> segments;  // [begin, end) per sequence

    static PackedSequences pack(const std::vector<std::vector<std::size_t>>& sequences) {
        PackedSequences p;
        for (const auto& seq : sequences) {
            if (seq.empty()) throw data_error("pack: empty token sequence");
            const std::size_t begin = p.tokens.size();
            p.tokens.insert(p.tokens.end(), seq.begin(), seq.end());
            p.segments.emplace_back(begin, p.tokens.size());
        }
        return p;
    }

    std::vector<std::size_t> last_rows() const {
        std::vector<std::size_t> rows;
        rows.reserve(segments.size());
        for (const auto& [b, e] : segments) rows.push_back(e - 1);
        return rows;
    }
};

struct ForwardOptions {
    bool training = false;                 // enables adapter-branch dropout
    std::vector<Rng*> segment_rngs;        // one dropout stream per segment
};

namespace detail {

// Inverted-dropout mask over packed rows; each segment's rows are drawn
// from its own stream so micro-batch packing never changes an example's
// masks. Draw order within a segment is row-major.
inline Tensor segmented_dropout_mask(const std::vector<std::size_t>& shape,
                                     const std::vector<std::pair<std::size_t, std::size_t>>& segments,
                                     double p, const std::vector<Rng*>& rngs) {
    Tensor mask(shape);
    const std::size_t cols = shape[1];
    const double keep = 1.0 / (1.0 - p);
    for (std::size_t s = 0; s < segments.size(); ++s) {
        Rng& rng = *rngs[s];
        for (std::size_t r = segments[s].first; r < segments[s].second; ++r) {
            double* row = mask.data.data() + r * cols;
            for (std::size_t j = 0; j < cols; ++j) row[j] = rng.bernoulli(p) ? 0.0 : keep;
        }
    }
    return mask;
}

// x*W (+ adapter branch when bound). Dropout masks are consumed in call
// order, which forward_features keeps fixed: layer 0 query, layer 0 key,
// layer 1 query, ...
inline Tape::NodeId project(Tape& tape, Tape::NodeId x, Tape::NodeId w, const AdapterBinding* binding,
                            AdapterKey key, const ForwardOptions& opt,
                            const std::vector<std::pair<std::size_t, std::size_t>>& segments) {
    Tape::NodeId base = tape.matmul(x, w);
    if (binding == nullptr) return base;
    auto it = binding->find(key);
    if (it == binding->end()) return base;
    const BoundAdapter& ad = it->second;
    Tape::NodeId branch_in = x;
    if (opt.training && ad.dropout_p > 0.0) {
        if (opt.segment_rngs.size() != segments.size()) {
            throw contract_error("forward: training mode requires one dropout stream per segment");
        }
        branch_in = tape.apply_mask(
            x, segmented_dropout_mask(tape.value(x).shape, segments, ad.dropout_p, opt.segment_rngs));
    }
    Tape::NodeId delta = tape.scale(tape.matmul(tape.matmul(branch_in, ad.a), ad.b), ad.scaling);
    return tape.add(base, delta);
}

}  // namespace detail

// Causal grouped-query attention sublayer: q/k/v projections (query and key
// optionally adapted), per-head causal softmax attention with kv heads shared
// across query-head groups, concatenation, output projection. No residual.
inline Tape::NodeId causal_attention(Tape& tape, Tape::NodeId x, const LayerWeights& layer, const ModelConfig& cfg,
                                     std::size_t layer_idx = 0, const AdapterBinding* binding = nullptr,
                                     const ForwardOptions& opt = {},
                                     std::vector<std::pair<std::size_t, std::size_t>> segments = {}) {
    const std::size_t t_len = tape.value(x).rows();
    if (segments.empty()) segments.push_back({0, t_len});
    for (const auto& [b, e] : segments) {
        if (e - b > cfg.max_seq_len) {
            throw data_error("sequence length " + std::to_string(e - b) + " exceeds max_seq_len " +
                             std::to_string(cfg.max_seq_len));
        }
    }
    auto wq = tape.frozen(layer.w_q);
    auto wk = tape.frozen(layer.w_k);
    auto wv = tape.frozen(layer.w_v);
    auto wo = tape.frozen(layer.w_o);

    Tape::NodeId q = detail::project(tape, x, wq, binding, {layer_idx, Proj::query}, opt, segments);
    Tape::NodeId k = detail::project(tape, x, wk, binding, {layer_idx, Proj::key}, opt, segments);
    Tape::NodeId v = tape.matmul(x, wv);

    auto mixed = tape.causal_gqa_attention(q, k, v, cfg.n_heads, cfg.n_kv_heads, cfg.head_dim, std::move(segments));
    return tape.matmul(mixed, wo);
}

// f(phi(x)) when binding is null, g(phi(x)) when adapters are bound. Returns
// the feature node after the final normalization, one row per packed token.
// With pool_rows set, only those rows of the final layer's feed-forward and
// final normalization are evaluated (row-local ops), and the result holds
// one row per pooled position — the classification fast path.
inline Tape::NodeId forward_features(Tape& tape, const PackedSequences& packed, const BackboneWeights& w,
                                     const AdapterBinding* binding = nullptr, const ForwardOptions& opt = {},
                                     const std::vector<std::size_t>* pool_rows = nullptr) {
    const ModelConfig& cfg = w.config;
    if (packed.tokens.empty() || packed.segments.empty()) throw data_error("forward: empty token sequence");
    for (const auto& [b, e] : packed.segments) {
        if (e - b > cfg.max_seq_len) {
            throw data_error("sequence length " + std::to_string(e - b) + " exceeds max_seq_len " +
                             std::to_string(cfg.max_seq_len));
        }
    }
    for (std::size_t id : packed.tokens) {
        if (id >= cfg.vocab_size) throw data_error("token id " + std::to_string(id) + " out of vocabulary");
    }
    const std::size_t t_len = packed.tokens.size();

    // learned absolute positions restart at each segment; sliced outside the
    // tape (frozen)
    Tensor pos_slice({t_len, cfg.d_model});
    for (const auto& [b, e] : packed.segments) {
        std::copy(w.pos.data.begin(), w.pos.data.begin() + (e - b) * cfg.d_model,
                  pos_slice.data.begin() + b * cfg.d_model);
    }

    auto emb = tape.gather_rows(tape.frozen(w.embedding), packed.tokens);
    auto x = tape.add(emb, tape.constant(pos_slice));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& layer = w.layers[l];
        auto normed = tape.rms_norm(x, tape.frozen(layer.attn_gain), cfg.norm_eps);
        x = tape.add(x, causal_attention(tape, normed, layer, cfg, l, binding, opt, packed.segments));
        if (pool_rows != nullptr && l + 1 == cfg.n_layers) {
            x = tape.gather_rows(x, *pool_rows);
        }
        auto normed2 = tape.rms_norm(x, tape.frozen(layer.ffn_gain), cfg.norm_eps);
        auto gate = tape.silu(tape.matmul(normed2, tape.frozen(layer.w_gate)));
        auto up = tape.matmul(normed2, tape.frozen(layer.w_up));
        auto w_down = tape.frozen(layer.w_down);
        x = tape.add(x, tape.matmul(tape.mul(gate, up), w_down));
    }
    return tape.rms_norm(x, tape.frozen(w.final_gain), cfg.norm_eps);
}

// Single-sequence convenience: f(phi(x)) / g(phi(x)) for one token list.
inline Tape::NodeId forward_features(Tape& tape, const std::vector<std::size_t>& tokens, const BackboneWeights& w,
                                     const AdapterBinding* binding = nullptr, const ForwardOptions& opt = {}) {
    PackedSequences packed;
    packed.tokens = tokens;
    packed.segments = {{0, tokens.size()}};
    if (tokens.empty()) throw data_error("forward: empty token sequence");
    return forward_features(tape, packed, w, binding, opt);
}

// Next-token logits Lambda(features).
inline Tape::NodeId lm_logits(Tape& tape, Tape::NodeId features, const BackboneWeights& w) {
    if (tape.value(features).cols() != w.config.d_model) {
        throw dimension_error("lm_logits: feature width " + std::to_string(tape.value(features).cols()) +
                              " != d_model " + std::to_string(w.config.d_model));
    }
    return tape.matmul(features, tape.frozen(w.lm_head));
}

// Convenience eval-mode forward: features as a plain tensor.
inline Tensor eval_features(const std::vector<std::size_t>& tokens, const BackboneWeights& w,
                            const AdapterSet* adapters = nullptr) {
    Tape tape(false);
    if (adapters != nullptr && adapters->active && !adapters->items.empty()) {
        AdapterBinding binding = bind_adapters(tape, *adapters, false);
        return tape.value(forward_features(tape, tokens, w, &binding));
    }
    return tape.value(forward_features(tape, tokens, w));
}

}  // namespace dualpath
