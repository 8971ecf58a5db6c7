#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dualpath/error.hpp"

namespace dualpath {

// Architecture descriptor for a decoder-only backbone with grouped-query
// attention. n_kv_heads == n_heads degenerates to standard multi-head
// attention.
struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 0;
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::size_t n_kv_heads = 0;
    std::size_t head_dim = 0;
    std::size_t d_ff = 0;
    std::size_t max_seq_len = 0;
    double norm_eps = 1e-5;

    std::size_t kv_width() const { return n_kv_heads * head_dim; }
    std::size_t group_size() const { return n_heads / n_kv_heads; }

    void validate() const {
        auto positive = [](std::size_t v, const char* name) {
            if (v == 0) throw config_error(std::string("model config: ") + name + " must be positive");
        };
        positive(vocab_size, "vocab_size");
        positive(d_model, "d_model");
        positive(n_layers, "n_layers");
        positive(n_heads, "n_heads");
        positive(n_kv_heads, "n_kv_heads");
        positive(head_dim, "head_dim");
        positive(d_ff, "d_ff");
        positive(max_seq_len, "max_seq_len");
        if (norm_eps <= 0.0) throw config_error("model config: norm_eps must be positive");
        if (n_heads % n_kv_heads != 0) throw config_error("model config: n_kv_heads must divide n_heads");
        if (n_heads * head_dim != d_model) throw config_error("model config: n_heads*head_dim must equal d_model");
    }
};

// Shipped presets. The published shapes exist for overhead accounting only;
// their weights are never instantiated. Only `tiny` is trainable at desk
// scale.
struct ModelPreset {
    std::string name;
    ModelConfig config;
    bool descriptor_only;
};

inline const std::vector<ModelPreset>& model_presets() {
    static const std::vector<ModelPreset> presets = {
        {"tiny", {256, 64, 4, 4, 2, 16, 256, 64, 1e-5}, false},
        {"tinyllama-1.1b", {32000, 2048, 22, 32, 4, 64, 5632, 2048, 1e-5}, true},
        {"llama2-7b", {32000, 4096, 32, 32, 32, 128, 11008, 4096, 1e-5}, true},
        {"llama3-8b", {128256, 4096, 32, 32, 8, 128, 14336, 8192, 1e-5}, true},
    };
    return presets;
}

inline const ModelPreset& find_preset(const std::string& name) {
    for (const ModelPreset& p : model_presets()) {
        if (p.name == name) return p;
    }
    throw config_error("unknown model preset '" + name + "' (try: tiny, tinyllama-1.1b, llama2-7b, llama3-8b)");
}

}  // namespace dualpath
