#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dualpath/error.hpp"

namespace dualpath {

struct Counts {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::size_t total() const { return tp + fp + tn + fn; }
};

struct EvalResult {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double auprc = 0.0;
    Counts counts;
};

// precision = TP/(TP+FP), recall = TP/(TP+FN), F1 = 2PR/(P+R); zero
// denominators report 0 and the counts stay available for any other
// convention.
inline EvalResult prf1(const std::vector<bool>& predictions, const std::vector<bool>& labels) {
    if (predictions.size() != labels.size()) {
        throw contract_error("prf1: " + std::to_string(predictions.size()) + " predictions vs " +
                             std::to_string(labels.size()) + " labels");
    }
    if (predictions.empty()) throw contract_error("prf1: empty input");
    EvalResult r;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i] && labels[i]) ++r.counts.tp;
        else if (predictions[i] && !labels[i]) ++r.counts.fp;
        else if (!predictions[i] && labels[i]) ++r.counts.fn;
        else ++r.counts.tn;
    }
    const double tp = static_cast<double>(r.counts.tp);
    r.precision = (r.counts.tp + r.counts.fp) ? tp / static_cast<double>(r.counts.tp + r.counts.fp) : 0.0;
    r.recall = (r.counts.tp + r.counts.fn) ? tp / static_cast<double>(r.counts.tp + r.counts.fn) : 0.0;
    r.f1 = (r.precision + r.recall > 0.0) ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
}

// Step-integrated average precision with tie grouping: sort by descending
// score, advance one distinct score value at a time, accumulate
// (R_k - R_{k-1}) * P_k.
inline double auprc(const std::vector<double>& scores, const std::vector<bool>& labels) {
    if (scores.size() != labels.size()) throw contract_error("auprc: score/label length mismatch");
    if (scores.empty()) throw contract_error("auprc: empty input");
    std::size_t total_pos = 0;
    for (bool l : labels) total_pos += l ? 1 : 0;
    if (total_pos == 0) throw numeric_error("auprc: undefined without at least one positive label");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    double ap = 0.0;
    double prev_recall = 0.0;
    std::size_t tp = 0, predicted = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double threshold = scores[order[i]];
        // absorb the whole tie group at this threshold
        while (i < order.size() && scores[order[i]] == threshold) {
            tp += labels[order[i]] ? 1 : 0;
            ++predicted;
            ++i;
        }
        const double precision = static_cast<double>(tp) / static_cast<double>(predicted);
        const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return ap;
}

// Mean AUPRC across categories, each computed independently over the rows
// where that category's label is present.
inline double mean_category_auprc(const std::vector<std::vector<double>>& scores,
                                  const std::vector<std::vector<std::optional<bool>>>& labels,
                                  const std::vector<std::string>* category_names = nullptr) {
    if (scores.size() != labels.size()) throw contract_error("mean_category_auprc: row count mismatch");
    if (scores.empty()) throw contract_error("mean_category_auprc: empty input");
    const std::size_t n_cat = scores[0].size();
    double total = 0.0;
    for (std::size_t c = 0; c < n_cat; ++c) {
        std::vector<double> col_scores;
        std::vector<bool> col_labels;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (scores[i].size() != n_cat || labels[i].size() != n_cat) {
                throw contract_error("mean_category_auprc: ragged row " + std::to_string(i));
            }
            if (labels[i][c].has_value()) {
                col_scores.push_back(scores[i][c]);
                col_labels.push_back(*labels[i][c]);
            }
        }
        bool any_pos = false;
        for (bool l : col_labels) any_pos = any_pos || l;
        if (col_labels.empty() || !any_pos) {
            const std::string name =
                category_names != nullptr && c < category_names->size() ? (*category_names)[c] : std::to_string(c);
            throw numeric_error("mean_category_auprc: category '" + name + "' has no present positive labels");
        }
        total += auprc(col_scores, col_labels);
    }
    return total / static_cast<double>(n_cat);
}

struct AggregateResult {
    EvalResult median;
    EvalResult range;  // max - min per metric
    std::size_t seed_count = 0;
};

namespace detail {

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double range_of(const std::vector<double>& v) {
    auto [mn, mx] = std::minmax_element(v.begin(), v.end());
    return *mx - *mn;
}

}  // namespace detail

// Per-metric median over seeds (mid-pair mean for even counts) and
// max-minus-min range.
inline AggregateResult aggregate_runs(const std::vector<EvalResult>& per_seed) {
    if (per_seed.empty()) throw contract_error("aggregate_runs: no results");
    AggregateResult agg;
    agg.seed_count = per_seed.size();
    auto collect = [&](auto field) {
        std::vector<double> v;
        v.reserve(per_seed.size());
        for (const EvalResult& r : per_seed) v.push_back(field(r));
        return v;
    };
    const auto p = collect([](const EvalResult& r) { return r.precision; });
    const auto rc = collect([](const EvalResult& r) { return r.recall; });
    const auto f = collect([](const EvalResult& r) { return r.f1; });
    const auto a = collect([](const EvalResult& r) { return r.auprc; });
    agg.median.precision = detail::median_of(p);
    agg.median.recall = detail::median_of(rc);
    agg.median.f1 = detail::median_of(f);
    agg.median.auprc = detail::median_of(a);
    agg.range.precision = detail::range_of(p);
    agg.range.recall = detail::range_of(rc);
    agg.range.f1 = detail::range_of(f);
    agg.range.auprc = detail::range_of(a);
    return agg;
}

}  // namespace dualpath
