#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dualpath/error.hpp"
#include "dualpath/guard.hpp"
#include "dualpath/rng.hpp"

namespace dualpath {

// A moderation sample: prompt, optional model response, and per-category
// labels where absent means annotator-undecided. Binary corpora carry
// exactly one slot, always present.
struct LabeledExample {
    std::string prompt;
    std::optional<std::string> response;
    std::vector<std::optional<bool>> labels;
};

enum class FormatMode { chat, prompt_only };

inline FormatMode format_mode_from_name(const std::string& name) {
    if (name == "chat") return FormatMode::chat;
    if (name == "prompt_only") return FormatMode::prompt_only;
    throw config_error("unknown format mode '" + name + "' (try: chat, prompt_only)");
}

// "user: {prompt}\n\nagent: {response}" or "user: {prompt}", then prefix
// truncation to max_len tokens (bytes, for the byte tokenizer).
inline std::string format_example(const LabeledExample& ex, FormatMode mode, std::size_t max_len) {
    std::string out;
    if (mode == FormatMode::chat) {
        if (!ex.response.has_value()) throw contract_error("format_example: chat mode requires a response");
        out = "user: " + ex.prompt + "\n\nagent: " + *ex.response;
    } else {
        out = "user: " + ex.prompt;
    }
    if (out.size() > max_len) out.resize(max_len);
    return out;
}

// ---------------------------------------------------------------------------
// JSONL corpus: {"prompt": str, "response": str?, "labels": {category: bool}}
// ---------------------------------------------------------------------------

inline std::vector<LabeledExample> load_jsonl_dataset(const std::string& path, const Taxonomy& taxonomy) {
    taxonomy.validate();
    std::ifstream is(path);
    if (!is) throw data_error("dataset: cannot open '" + path + "'");
    std::vector<LabeledExample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw data_error("dataset: parse error at " + path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        const std::string at = path + ":" + std::to_string(line_no);
        if (!j.is_object() || !j.contains("prompt") || !j["prompt"].is_string()) {
            throw data_error("dataset: missing string field 'prompt' at " + at);
        }
        LabeledExample ex;
        ex.prompt = j["prompt"].get<std::string>();
        if (j.contains("response") && !j["response"].is_null()) {
            if (!j["response"].is_string()) throw data_error("dataset: 'response' must be a string at " + at);
            ex.response = j["response"].get<std::string>();
        }
        ex.labels.assign(taxonomy.size(), std::nullopt);
        if (j.contains("labels")) {
            if (!j["labels"].is_object()) throw data_error("dataset: 'labels' must be an object at " + at);
            for (const auto& [key, value] : j["labels"].items()) {
                auto it = std::find(taxonomy.categories.begin(), taxonomy.categories.end(), key);
                if (it == taxonomy.categories.end()) {
                    throw data_error("dataset: unknown category '" + key + "' at " + at);
                }
                if (!value.is_boolean()) {
                    throw data_error("dataset: label '" + key + "' must be a boolean at " + at);
                }
                ex.labels[static_cast<std::size_t>(it - taxonomy.categories.begin())] = value.get<bool>();
            }
        }
        if (taxonomy.binary() && !ex.labels[0].has_value()) {
            throw data_error("dataset: binary corpus requires label '" + taxonomy.categories[0] + "' at " + at);
        }
        out.push_back(std::move(ex));
    }
    return out;
}

inline void write_jsonl_dataset(const std::string& path, const std::vector<LabeledExample>& examples,
                                const Taxonomy& taxonomy) {
    std::ofstream os(path);
    if (!os) throw data_error("dataset: cannot open '" + path + "' for writing");
    for (const LabeledExample& ex : examples) {
        nlohmann::json j;
        j["prompt"] = ex.prompt;
        if (ex.response.has_value()) j["response"] = *ex.response;
        nlohmann::json labels = nlohmann::json::object();
        for (std::size_t c = 0; c < taxonomy.size(); ++c) {
            if (ex.labels[c].has_value()) labels[taxonomy.categories[c]] = *ex.labels[c];
        }
        j["labels"] = labels;
        os << j.dump() << "\n";
    }
    if (!os) throw data_error("dataset: write failed for '" + path + "'");
}

// Appendix-style fixed test indices: one decimal index per line.
inline std::vector<std::size_t> load_index_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw data_error("index file: cannot open '" + path + "'");
    std::vector<std::size_t> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        // tolerate surrounding whitespace and trailing commas
        std::string trimmed;
        for (char ch : line) {
            if (!std::isspace(static_cast<unsigned char>(ch)) && ch != ',') trimmed.push_back(ch);
        }
        if (trimmed.empty()) continue;
        try {
            out.push_back(std::stoull(trimmed));
        } catch (const std::exception&) {
            throw data_error("index file: bad index at " + path + ":" + std::to_string(line_no));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitSizes {
    std::size_t train = 0;
    std::size_t val = 0;
    std::optional<std::size_t> test;
};

struct DatasetSplit {
    std::vector<LabeledExample> train;
    std::vector<LabeledExample> val;
    std::vector<LabeledExample> test;
    std::uint64_t seed = 0;
};

// Seeded shuffled partition. When fixed_test_indices is given, the test
// split is exactly those rows (in file order) and train/val are drawn from
// the shuffled remainder.
inline DatasetSplit make_splits(const std::vector<LabeledExample>& examples, const SplitSizes& sizes,
                                std::uint64_t seed,
                                const std::vector<std::size_t>* fixed_test_indices = nullptr) {
    DatasetSplit split;
    split.seed = seed;

    std::vector<char> is_test(examples.size(), 0);
    if (fixed_test_indices != nullptr) {
        for (std::size_t idx : *fixed_test_indices) {
            if (idx >= examples.size()) {
                throw config_error("make_splits: test index " + std::to_string(idx) + " out of range (corpus has " +
                                   std::to_string(examples.size()) + " rows)");
            }
            if (is_test[idx]) throw config_error("make_splits: duplicate test index " + std::to_string(idx));
            is_test[idx] = 1;
        }
        if (sizes.test.has_value() && *sizes.test != fixed_test_indices->size()) {
            throw config_error("make_splits: requested test size " + std::to_string(*sizes.test) +
                               " != fixed index count " + std::to_string(fixed_test_indices->size()));
        }
        for (std::size_t i = 0; i < examples.size(); ++i) {
            if (is_test[i]) split.test.push_back(examples[i]);
        }
    }

    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        if (!is_test[i]) pool.push_back(i);
    }
    const std::size_t want_test = fixed_test_indices != nullptr ? 0 : sizes.test.value_or(0);
    if (sizes.train + sizes.val + want_test > pool.size()) {
        throw config_error("make_splits: requested sizes " + std::to_string(sizes.train) + "+" +
                           std::to_string(sizes.val) + "+" + std::to_string(want_test) + " exceed available " +
                           std::to_string(pool.size()) + " rows");
    }
    Rng rng(mix_seed(seed, 0x73706c69ULL));  // "spli"
    rng.shuffle(pool);
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < sizes.train; ++i) split.train.push_back(examples[pool[cursor++]]);
    for (std::size_t i = 0; i < sizes.val; ++i) split.val.push_back(examples[pool[cursor++]]);
    for (std::size_t i = 0; i < want_test; ++i) split.test.push_back(examples[pool[cursor++]]);
    return split;
}

// ---------------------------------------------------------------------------
// Cross-domain binarization
// ---------------------------------------------------------------------------

// Conservative target rule: harmful iff any label is true or any label is
// absent; safe only when every category is present and false.
inline bool binarize_targets(const std::vector<std::optional<bool>>& labels) {
    if (labels.empty()) throw contract_error("binarize_targets: no label slots");
    for (const auto& l : labels) {
        if (!l.has_value()) return true;
        if (*l) return true;
    }
    return false;
}

// Multilabel score collapse: the harmfulness score is the largest of the
// per-category output probabilities.
inline double binarize_scores(const std::vector<double>& scores) {
    if (scores.empty()) throw contract_error("binarize_scores: no scores");
    return *std::max_element(scores.begin(), scores.end());
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

// Category marker n-grams use an alphabet disjoint from the filler, so the
// easy variant is separable by construction. The hard variant plants
// byte-permuted distractors in every safe text, leaving token order as the
// main signal.
inline const std::vector<std::string>& synthetic_markers() {
    static const std::vector<std::string> markers = {"zq9vx", "wy7tu", "rp3no", "vs5pq",
                                                     "nt8yz", "ux2rs", "oz6wn", "qr4pt"};
    return markers;
}

inline std::string synthetic_distractor(std::size_t category) {
    // reversed marker: same byte multiset, disjoint ordered n-grams, and no
    // concatenation of distractors can recreate a marker
    const std::string& m = synthetic_markers()[category];
    return std::string(m.rbegin(), m.rend());
}

inline std::vector<LabeledExample> gen_synthetic(std::size_t n, const Taxonomy& taxonomy, double toxic_fraction,
                                                 std::uint64_t seed, bool hard = false) {
    taxonomy.validate();
    if (taxonomy.size() > synthetic_markers().size()) {
        throw config_error("gen_synthetic: taxonomy larger than the marker table");
    }
    if (!(toxic_fraction > 0.0 && toxic_fraction < 1.0)) {
        throw config_error("gen_synthetic: toxic_fraction must lie strictly inside (0, 1)");
    }
    const std::size_t n_pos = static_cast<std::size_t>(std::llround(static_cast<double>(n) * toxic_fraction));
    if (n_pos == 0 || n_pos >= n) {
        throw config_error("gen_synthetic: fraction " + std::to_string(toxic_fraction) + " of " + std::to_string(n) +
                           " examples leaves an empty class");
    }

    static constexpr char filler_alphabet[] = "abcdefghijklm ";
    constexpr std::size_t filler_count = sizeof(filler_alphabet) - 1;

    Rng rng(mix_seed(seed, 0x73796e74ULL));  // "synt"
    std::vector<char> harmful(n, 0);
    std::fill(harmful.begin(), harmful.begin() + n_pos, 1);
    rng.shuffle(harmful);

    std::vector<LabeledExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t len = 8 + rng.below(11);  // 8..18 filler bytes
        std::string filler(len, ' ');
        for (char& ch : filler) ch = filler_alphabet[rng.below(filler_count)];

        // markers are pinned to filler offsets and assembled afterwards, so a
        // later insertion can never split an earlier marker
        std::vector<std::pair<std::size_t, std::string>> inserts;
        std::vector<std::size_t> cats;
        if (harmful[i]) {
            const std::size_t want = taxonomy.binary() ? 1 : 1 + rng.below(2);
            while (cats.size() < want) {
                const std::size_t c = rng.below(taxonomy.size());
                if (std::find(cats.begin(), cats.end(), c) == cats.end()) cats.push_back(c);
            }
            std::sort(cats.begin(), cats.end());
            for (std::size_t c : cats) {
                const std::size_t copies = 1 + rng.below(2);
                for (std::size_t k = 0; k < copies; ++k) {
                    inserts.emplace_back(rng.below(len + 1), synthetic_markers()[c]);
                }
            }
        } else if (hard) {
            const std::size_t copies = 1 + rng.below(2);
            for (std::size_t k = 0; k < copies; ++k) {
                const std::size_t c = rng.below(taxonomy.size());
                inserts.emplace_back(rng.below(len + 1), synthetic_distractor(c));
            }
        }
        std::stable_sort(inserts.begin(), inserts.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        std::string text;
        std::size_t prev = 0;
        for (const auto& [off, s] : inserts) {
            text.append(filler, prev, off - prev);
            text += s;
            prev = off;
        }
        text.append(filler, prev, std::string::npos);

        LabeledExample ex;
        ex.prompt = std::move(text);
        ex.labels.assign(taxonomy.size(), false);
        if (harmful[i]) {
            for (std::size_t c : cats) ex.labels[c] = true;
            if (!taxonomy.binary()) {
                // drop some negative slots to exercise missing-label handling;
                // the example stays harmful either way
                for (std::size_t c = 0; c < taxonomy.size(); ++c) {
                    if (ex.labels[c] == std::optional<bool>(false) && rng.bernoulli(0.15)) ex.labels[c] = std::nullopt;
                }
            }
        }
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace dualpath
