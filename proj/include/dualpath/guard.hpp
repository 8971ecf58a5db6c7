#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "dualpath/autodiff.hpp"
#include "dualpath/backbone.hpp"
#include "dualpath/error.hpp"
#include "dualpath/lora.hpp"
#include "dualpath/tokenizer.hpp"

namespace dualpath {

// Harmfulness category set: binary (one slot) or the 8-category moderation
// taxonomy.
struct Taxonomy {
    std::vector<std::string> categories;

    std::size_t size() const { return categories.size(); }
    bool binary() const { return categories.size() == 1; }

    void validate() const {
        if (categories.empty()) throw config_error("taxonomy: no categories");
        for (std::size_t i = 0; i < categories.size(); ++i) {
            if (categories[i].empty()) throw config_error("taxonomy: empty category name");
            for (std::size_t j = i + 1; j < categories.size(); ++j) {
                if (categories[i] == categories[j]) {
                    throw config_error("taxonomy: duplicate category '" + categories[i] + "'");
                }
            }
        }
    }

    static Taxonomy binary_toxicity() { return Taxonomy{{"toxic"}}; }

    static Taxonomy moderation8() {
        return Taxonomy{{"sexual", "hate", "violence", "harassment", "self-harm", "sexual/minors", "hate/threatening",
                         "violence/graphic"}};
    }

    static Taxonomy from_name(const std::string& name) {
        if (name == "binary") return binary_toxicity();
        if (name == "moderation8") return moderation8();
        throw config_error("unknown taxonomy '" + name + "' (try: binary, moderation8)");
    }
};

// Bias-free linear map from features to taxonomy logits, Xavier uniform
// initialized: entries in [-sqrt(6/(d_model+C)), +sqrt(6/(d_model+C))].
struct GuardHead {
    Tensor weight;  // [d_model x C]

    static GuardHead init(std::size_t d_model, std::size_t num_classes, std::uint64_t seed) {
        GuardHead head;
        head.weight = Tensor({d_model, num_classes});
        const double bound = std::sqrt(6.0 / static_cast<double>(d_model + num_classes));
        Rng rng(mix_seed(seed, 0x68656164ULL));  // "head"
        for (double& v : head.weight.data) v = rng.uniform(-bound, bound);
        return head;
    }
};

// One backbone, two paths: the generative path ignores adapters and head and
// is a pure function of (backbone, input); the guarding path activates the
// adapters and classifies the last-position feature with the guard head.
struct DualPathModel {
    BackboneWeights backbone;
    AdapterSet adapters;
    GuardHead head;
    Taxonomy taxonomy;

    const ModelConfig& config() const { return backbone.config; }
};

struct GuardModelParams {
    std::size_t lora_rank = 8;
    double lora_alpha = 16.0;  // 2 * rank
    double dropout_p = 0.05;
    std::uint64_t backbone_seed = 7;
    std::uint64_t guard_seed = 1;
};

inline DualPathModel make_guard_model(const ModelConfig& cfg, const Taxonomy& taxonomy,
                                      const GuardModelParams& params) {
    cfg.validate();
    taxonomy.validate();
    DualPathModel model;
    model.backbone = init_backbone(cfg, params.backbone_seed);
    model.taxonomy = taxonomy;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (Proj proj : {Proj::query, Proj::key}) {
            const std::size_t out_width = proj == Proj::query ? cfg.d_model : cfg.kv_width();
            LoraAdapter ad = init_adapter(cfg.d_model, out_width, params.lora_rank, params.lora_alpha,
                                          mix_seed(params.guard_seed, l * 2 + (proj == Proj::key ? 1 : 0)),
                                          params.dropout_p);
            ad.target = {l, proj};
            model.adapters.items.emplace(AdapterKey{l, proj}, std::move(ad));
        }
    }
    validate_adapter_shapes(model.adapters, cfg);
    model.head = GuardHead::init(cfg.d_model, taxonomy.size(), params.guard_seed);
    return model;
}

// Guarding path: eta(g(phi(x))) on the last-position feature, sigmoid per
// category. Evaluation mode; dropout never applies at inference.
inline std::vector<double> guard_scores(const DualPathModel& model, const std::string& text) {
    if (text.empty()) throw data_error("guard_scores: empty text");
    validate_adapter_shapes(model.adapters, model.config());
    const auto tokens = ByteTokenizer::encode(text, model.config().max_seq_len);

    Tape tape(false);
    AdapterBinding binding = bind_adapters(tape, model.adapters, false);
    PackedSequences packed;
    packed.tokens = tokens;
    packed.segments = {{0, tokens.size()}};
    const std::vector<std::size_t> pool = packed.last_rows();
    auto last = forward_features(tape, packed, model.backbone, &binding, {}, &pool);
    auto logits = tape.matmul(last, tape.frozen(model.head.weight));
    const Tensor& z = tape.value(logits);
    std::vector<double> scores(z.numel());
    for (std::size_t c = 0; c < z.numel(); ++c) scores[c] = sigmoid(z[c]);
    return scores;
}

// Generative path: Lambda(f(phi(x))). Adapters are never consulted, so the
// result is bit-identical to a backbone with no adapter machinery attached.
inline Tensor generative_logits(const DualPathModel& model, const std::string& text) {
    if (text.empty()) throw data_error("generative_logits: empty text");
    const auto tokens = ByteTokenizer::encode(text, model.config().max_seq_len);
    Tape tape(false);
    auto features = forward_features(tape, tokens, model.backbone);
    auto logits = lm_logits(tape, features, model.backbone);
    return tape.value(logits);
}

// Per-category booleans at the classification threshold; score >= threshold
// counts as harmful.
inline std::vector<bool> classify(const DualPathModel& model, const std::string& text, double threshold = 0.5) {
    if (threshold <= 0.0 || threshold >= 1.0) {
        throw config_error("classify: threshold must lie strictly inside (0, 1)");
    }
    const std::vector<double> scores = guard_scores(model, text);
    std::vector<bool> labels(scores.size());
    for (std::size_t c = 0; c < scores.size(); ++c) labels[c] = scores[c] >= threshold;
    return labels;
}

// Greedy next-token continuation on the generative path. Used by the
// self-defence baseline.
inline std::string greedy_generate(const DualPathModel& model, const std::string& prompt,
                                   std::size_t max_new_tokens) {
    if (prompt.empty()) throw data_error("greedy_generate: empty prompt");
    const ModelConfig& cfg = model.config();
    std::vector<std::size_t> tokens = ByteTokenizer::encode(prompt, cfg.max_seq_len);
    std::vector<std::size_t> generated;
    for (std::size_t i = 0; i < max_new_tokens; ++i) {
        if (tokens.size() >= cfg.max_seq_len) break;
        Tape tape(false);
        auto features = forward_features(tape, tokens, model.backbone);
        auto logits = lm_logits(tape, features, model.backbone);
        const Tensor& z = tape.value(logits);
        const std::size_t last = tokens.size() - 1;
        std::size_t best = 0;
        double best_v = z.at(last, 0);
        for (std::size_t v = 1; v < cfg.vocab_size; ++v) {
            if (z.at(last, v) > best_v) {
                best_v = z.at(last, v);
                best = v;
            }
        }
        tokens.push_back(best);
        generated.push_back(best);
    }
    return ByteTokenizer::decode(generated);
}

}  // namespace dualpath
