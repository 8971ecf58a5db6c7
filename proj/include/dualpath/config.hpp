#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dualpath/dataset.hpp"
#include "dualpath/error.hpp"
#include "dualpath/train.hpp"

namespace dualpath {

// Flat `key = value` file, '#' comments. Keys mirror TrainConfig field names
// exactly, plus the run-level keys listed in run_config_from().
using KeyValues = std::map<std::string, std::string>;

inline std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline KeyValues parse_config_text(std::istream& is, const std::string& origin) {
    KeyValues kv;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw config_error("config: expected 'key = value' at " + origin + ":" + std::to_string(line_no));
        }
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (key.empty()) throw config_error("config: empty key at " + origin + ":" + std::to_string(line_no));
        kv[key] = value;
    }
    return kv;
}

inline KeyValues load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw config_error("config: cannot open '" + path + "'");
    return parse_config_text(is, path);
}

// Run-level configuration: model/taxonomy/data wiring around TrainConfig.
struct RunConfig {
    TrainConfig train;
    std::string model_preset = "tiny";
    std::uint64_t backbone_seed = 7;
    std::string taxonomy = "binary";
    std::string format_mode = "prompt_only";
    std::string data;
    std::size_t train_size = 0;
    std::size_t val_size = 0;
    std::optional<std::size_t> test_size;
    std::string test_indices;  // optional fixed-index file
    std::string out;
};

inline RunConfig run_config_from(const KeyValues& kv) {
    RunConfig rc;
    bool alpha_given = false;
    for (const auto& [key, value] : kv) {
        std::istringstream vs(value);
        auto parse_into = [&](auto& dst) {
            vs >> dst;
            if (!vs || !vs.eof()) throw config_error("config: bad value '" + value + "' for key '" + key + "'");
        };
        if (key == "learning_rate") parse_into(rc.train.learning_rate);
        else if (key == "epochs") parse_into(rc.train.epochs);
        else if (key == "logical_batch_size") parse_into(rc.train.logical_batch_size);
        else if (key == "micro_batch_size") parse_into(rc.train.micro_batch_size);
        else if (key == "lora_rank") parse_into(rc.train.lora_rank);
        else if (key == "lora_alpha") { parse_into(rc.train.lora_alpha); alpha_given = true; }
        else if (key == "dropout_p") parse_into(rc.train.dropout_p);
        else if (key == "weight_decay") parse_into(rc.train.weight_decay);
        else if (key == "seed") parse_into(rc.train.seed);
        else if (key == "threshold") parse_into(rc.train.threshold);
        else if (key == "model_preset") rc.model_preset = value;
        else if (key == "backbone_seed") parse_into(rc.backbone_seed);
        else if (key == "taxonomy") rc.taxonomy = value;
        else if (key == "format_mode") rc.format_mode = value;
        else if (key == "data") rc.data = value;
        else if (key == "train_size") parse_into(rc.train_size);
        else if (key == "val_size") parse_into(rc.val_size);
        else if (key == "test_size") { std::size_t v = 0; parse_into(v); rc.test_size = v; }
        else if (key == "test_indices") rc.test_indices = value;
        else if (key == "out") rc.out = value;
        else throw config_error("config: unknown key '" + key + "'");
    }
    if (!alpha_given) rc.train.lora_alpha = 2.0 * static_cast<double>(rc.train.lora_rank);
    rc.train.validate();
    Taxonomy::from_name(rc.taxonomy);
    format_mode_from_name(rc.format_mode);
    find_preset(rc.model_preset);
    return rc;
}

// Merged-config snapshot written into manifests, normalized so identical
// settings serialize identically.
inline KeyValues snapshot_config(const RunConfig& rc) {
    auto g17 = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    KeyValues kv;
    kv["learning_rate"] = g17(rc.train.learning_rate);
    kv["epochs"] = std::to_string(rc.train.epochs);
    kv["logical_batch_size"] = std::to_string(rc.train.logical_batch_size);
    kv["micro_batch_size"] = std::to_string(rc.train.micro_batch_size);
    kv["lora_rank"] = std::to_string(rc.train.lora_rank);
    kv["lora_alpha"] = g17(rc.train.lora_alpha);
    kv["dropout_p"] = g17(rc.train.dropout_p);
    kv["weight_decay"] = g17(rc.train.weight_decay);
    kv["seed"] = std::to_string(rc.train.seed);
    kv["threshold"] = g17(rc.train.threshold);
    kv["model_preset"] = rc.model_preset;
    kv["backbone_seed"] = std::to_string(rc.backbone_seed);
    kv["taxonomy"] = rc.taxonomy;
    kv["format_mode"] = rc.format_mode;
    kv["data"] = rc.data;
    kv["train_size"] = std::to_string(rc.train_size);
    kv["val_size"] = std::to_string(rc.val_size);
    if (rc.test_size.has_value()) kv["test_size"] = std::to_string(*rc.test_size);
    if (!rc.test_indices.empty()) kv["test_indices"] = rc.test_indices;
    kv["out"] = rc.out;
    return kv;
}

}  // namespace dualpath
