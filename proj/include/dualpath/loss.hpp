#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dualpath/autodiff.hpp"
#include "dualpath/dataset.hpp"
#include "dualpath/error.hpp"
#include "dualpath/guard.hpp"

namespace dualpath {

// weight_c = (#present-and-false) / (#present-and-true) per category; rows
// where a category's label is absent count for neither side.
inline std::vector<double> compute_pos_weights(const std::vector<LabeledExample>& train, const Taxonomy& taxonomy) {
    if (train.empty()) throw config_error("compute_pos_weights: empty training split");
    std::vector<double> weights(taxonomy.size());
    for (std::size_t c = 0; c < taxonomy.size(); ++c) {
        std::size_t pos = 0, neg = 0;
        for (const LabeledExample& ex : train) {
            if (!ex.labels[c].has_value()) continue;
            if (*ex.labels[c]) ++pos;
            else ++neg;
        }
        if (pos == 0) {
            throw config_error("compute_pos_weights: category '" + taxonomy.categories[c] +
                               "' has no positive examples; resample or regenerate the training split");
        }
        weights[c] = static_cast<double>(neg) / static_cast<double>(pos);
    }
    return weights;
}

// -[w*y*log sigma(z) + (1-y)*log(1-sigma(z))], numerically stable at any |z|.
inline double weighted_binary_loss(double logit, bool target, double pos_weight) {
    if (!std::isfinite(logit)) throw numeric_error("weighted_binary_loss: non-finite logit");
    if (pos_weight <= 0.0) throw config_error("weighted_binary_loss: pos_weight must be positive");
    return weighted_bce_term(logit, target, pos_weight).first;
}

inline double weighted_binary_loss_grad(double logit, bool target, double pos_weight) {
    if (!std::isfinite(logit)) throw numeric_error("weighted_binary_loss: non-finite logit");
    return weighted_bce_term(logit, target, pos_weight).second;
}

// Sum of weighted binary losses over present labels only; absent labels
// contribute exactly zero loss and zero gradient. Returns nullopt when every
// slot is absent (the caller counts and skips such examples).
inline std::optional<double> masked_multilabel_loss(const std::vector<double>& logits,
                                                    const std::vector<std::optional<bool>>& labels,
                                                    const std::vector<double>& pos_weights) {
    if (logits.size() != labels.size() || logits.size() != pos_weights.size()) {
        throw contract_error("masked_multilabel_loss: slot count mismatch");
    }
    bool any = false;
    double total = 0.0;
    for (std::size_t c = 0; c < logits.size(); ++c) {
        if (!labels[c].has_value()) continue;
        any = true;
        total += weighted_binary_loss(logits[c], *labels[c], pos_weights[c]);
    }
    if (!any) return std::nullopt;
    return total;
}

}  // namespace dualpath
