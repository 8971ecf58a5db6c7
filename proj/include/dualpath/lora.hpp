#pragma once

#include <cstddef>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "dualpath/autodiff.hpp"
#include "dualpath/error.hpp"
#include "dualpath/model_config.hpp"
#include "dualpath/rng.hpp"
#include "dualpath/tensor.hpp"

namespace dualpath {

enum class Proj { query, key };

inline const char* proj_name(Proj p) { return p == Proj::query ? "q" : "k"; }

struct AdapterKey {
    std::size_t layer;
    Proj proj;
    auto operator<=>(const AdapterKey&) const = default;
};

// Low-rank perturbation of a frozen weight: W is replaced by
// W + (alpha/rank) * A * B. Fresh adapters have B == 0, so the perturbation
// starts as the exact zero matrix.
struct LoraAdapter {
    Tensor a;  // [m x r]
    Tensor b;  // [r x n]
    std::size_t rank = 0;
    double alpha = 0.0;
    double dropout_p = 0.05;
    AdapterKey target{0, Proj::query};

    double scaling() const { return alpha / static_cast<double>(rank); }
    std::size_t param_count() const { return a.numel() + b.numel(); }
};

// All adapters of one guard model, keyed by (layer, projection). When
// active == false the forward path never touches them and is bit-identical
// to the unadapted backbone.
struct AdapterSet {
    std::map<AdapterKey, LoraAdapter> items;
    bool active = true;

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& [k, ad] : items) n += ad.param_count();
        return n;
    }
};

// B starts at zero; A is Kaiming uniform on [-sqrt(6/m), +sqrt(6/m)].
inline LoraAdapter init_adapter(std::size_t m, std::size_t n, std::size_t r, double alpha, std::uint64_t seed,
                                double dropout_p = 0.05) {
    if (r == 0 || r > std::min(m, n)) {
        throw config_error("lora rank " + std::to_string(r) + " must be in [1, min(" + std::to_string(m) + ", " +
                           std::to_string(n) + ")]");
    }
    if (alpha <= 0.0) throw config_error("lora alpha must be positive");
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw config_error("lora dropout_p must be in [0, 1)");
    LoraAdapter ad;
    ad.rank = r;
    ad.alpha = alpha;
    ad.dropout_p = dropout_p;
    ad.a = Tensor({m, r});
    ad.b = Tensor({r, n});
    Rng rng(seed);
    const double bound = std::sqrt(6.0 / static_cast<double>(m));
    for (double& v : ad.a.data) v = rng.uniform(-bound, bound);
    return ad;
}

// Dropout mask with inverted scaling: entries are 0 or 1/(1-p).
inline Tensor dropout_mask(const std::vector<std::size_t>& shape, double p, Rng& rng) {
    Tensor mask(shape);
    const double keep = 1.0 / (1.0 - p);
    for (double& v : mask.data) v = rng.bernoulli(p) ? 0.0 : keep;
    return mask;
}

// x*W + (alpha/r) * (drop(x)*A) * B. Training mode applies inverted dropout
// to the adapter branch input only; the base path is never dropped.
inline Tensor adapted_projection(const Tensor& x, const Tensor& w, const LoraAdapter& ad, bool training,
                                 std::uint64_t seed) {
    Tensor base = matmul(x, w);
    Tensor branch_in = x;
    if (training && ad.dropout_p > 0.0) {
        Rng rng(seed);
        Tensor mask = dropout_mask(x.shape, ad.dropout_p, rng);
        for (std::size_t i = 0; i < branch_in.numel(); ++i) branch_in[i] *= mask[i];
    }
    Tensor delta = matmul(matmul(branch_in, ad.a), ad.b);
    const double s = ad.scaling();
    for (std::size_t i = 0; i < base.numel(); ++i) base[i] += s * delta[i];
    require_finite(base, "adapted_projection");
    return base;
}

// W + (alpha/r)*A*B. Inputs untouched; exists as a test oracle — deployment
// keeps adapters separate so they can be switched off.
inline Tensor merge_adapter(const Tensor& w, const LoraAdapter& ad) {
    if (ad.a.rows() != w.rows() || ad.b.cols() != w.cols()) {
        throw dimension_error("merge_adapter: adapter " + ad.a.shape_str() + "*" + ad.b.shape_str() +
                              " does not match weight " + w.shape_str());
    }
    Tensor delta = matmul(ad.a, ad.b);
    Tensor out = w;
    const double s = ad.scaling();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += s * delta[i];
    return out;
}

// Adapter shapes must agree with the backbone they attach to.
inline void validate_adapter_shapes(const AdapterSet& set, const ModelConfig& cfg) {
    for (const auto& [key, ad] : set.items) {
        if (key.layer >= cfg.n_layers) {
            throw config_error("adapter targets layer " + std::to_string(key.layer) + " but model has " +
                               std::to_string(cfg.n_layers) + " layers");
        }
        const std::size_t out_width = key.proj == Proj::query ? cfg.d_model : cfg.kv_width();
        if (ad.a.rows() != cfg.d_model || ad.a.cols() != ad.rank || ad.b.rows() != ad.rank ||
            ad.b.cols() != out_width) {
            throw config_error("adapter at layer " + std::to_string(key.layer) + " proj " + proj_name(key.proj) +
                               " has shapes " + ad.a.shape_str() + "*" + ad.b.shape_str() +
                               " incompatible with model (d_model " + std::to_string(cfg.d_model) + ", kv width " +
                               std::to_string(cfg.kv_width()) + ")");
        }
    }
}

// Parameters introduced by the guard model on top of the chat model:
// query adapter (d_model->d_model) + key adapter (d_model->kv_width) per
// layer, plus the bias-free guard head.
inline std::size_t count_guard_overhead(const ModelConfig& cfg, std::size_t r, std::size_t num_classes) {
    cfg.validate();
    if (r == 0) throw config_error("count_guard_overhead: rank must be positive");
    if (num_classes == 0) throw config_error("count_guard_overhead: num_classes must be positive");
    const std::size_t query_adapter = cfg.d_model * r + r * cfg.d_model;
    const std::size_t key_adapter = cfg.d_model * r + r * cfg.kv_width();
    return cfg.n_layers * (query_adapter + key_adapter) + cfg.d_model * num_classes;
}

// Three-significant-figure scientific notation, e.g. 4198400 -> "4.20e06".
inline std::string format_sci3(std::size_t count) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2e", static_cast<double>(count));
    std::string s(buf);
    // normalize exponent to two digits ("4.20e+06" -> "4.20e06")
    auto epos = s.find('e');
    std::string mant = s.substr(0, epos);
    int exp = std::stoi(s.substr(epos + 1));
    std::snprintf(buf, sizeof(buf), "%se%02d", mant.c_str(), exp);
    return std::string(buf);
}

}  // namespace dualpath
