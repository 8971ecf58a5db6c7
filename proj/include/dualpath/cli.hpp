#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dualpath/baselines.hpp"
#include "dualpath/checkpoint.hpp"
#include "dualpath/config.hpp"
#include "dualpath/manifest.hpp"
#include "dualpath/report.hpp"
#include "dualpath/train.hpp"

namespace dualpath::cli {

// Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
// failure.
constexpr int exit_ok = 0;
constexpr int exit_usage = 2;
constexpr int exit_data = 3;
constexpr int exit_numeric = 4;

namespace detail {

// CLI11's vector overload expects the arguments reversed.
inline void parse_args(CLI::App& app, const std::vector<std::string>& args) {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
}

inline std::string default_out_root() {
    if (const char* env = std::getenv("DUALPATH_OUT")) {
        if (env[0] != '\0') return env;
    }
    return "out";
}

inline std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
    std::vector<std::uint64_t> seeds;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ',')) {
        const std::string t = trim(item);
        if (t.empty()) continue;
        try {
            seeds.push_back(std::stoull(t));
        } catch (const std::exception&) {
            throw config_error("bad seed '" + t + "' in --seeds");
        }
    }
    if (seeds.empty()) throw config_error("--seeds needs at least one value");
    return seeds;
}

inline void apply_overrides(KeyValues& kv, const std::vector<std::string>& sets) {
    for (const std::string& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw config_error("--set expects key=value, got '" + s + "'");
        kv[trim(s.substr(0, eq))] = trim(s.substr(eq + 1));
    }
}

inline std::string metrics_line(const EvalResult& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "auprc=%.6f precision=%.6f recall=%.6f f1=%.6f tp=%zu fp=%zu tn=%zu fn=%zu", r.auprc, r.precision,
                  r.recall, r.f1, r.counts.tp, r.counts.fp, r.counts.tn, r.counts.fn);
    return buf;
}

inline DatasetSplit build_split(const RunConfig& rc, const std::vector<LabeledExample>& corpus, std::uint64_t seed) {
    if (rc.train_size == 0 || rc.val_size == 0) {
        throw config_error("missing config key: train_size and val_size are required for training");
    }
    SplitSizes sizes{rc.train_size, rc.val_size, rc.test_size};
    if (!rc.test_indices.empty()) {
        const auto idx = load_index_file(rc.test_indices);
        return make_splits(corpus, sizes, seed, &idx);
    }
    return make_splits(corpus, sizes, seed);
}

inline std::size_t overhead_for_manifest(const RunManifest& m) {
    const KeyValues& kv = m.config;
    const ModelConfig cfg = find_preset(kv.at("model_preset")).config;
    const std::size_t classes = Taxonomy::from_name(kv.at("taxonomy")).size();
    if (m.command == "train-baseline") {
        return probe_param_count(probe_kind_from_name(kv.at("probe_kind")), cfg.d_model, classes);
    }
    return count_guard_overhead(cfg, std::stoull(kv.at("lora_rank")), classes);
}

inline void write_run_outputs(const std::string& run_dir, const std::string& command, const RunConfig& rc,
                              std::uint64_t seed, const TrainRunRecord& record, const KeyValues& extra_config) {
    save_record(run_dir + "/record.txt", record);
    if (!record.checkpoint_paths.empty()) {
        const std::string selected = run_dir + "/" + record.checkpoint_paths.at(record.selected_epoch - 1);
        std::filesystem::copy_file(selected, run_dir + "/selected.ckpt",
                                   std::filesystem::copy_options::overwrite_existing);
    }
    RunConfig per_run = rc;
    per_run.train.seed = seed;
    RunManifest manifest;
    manifest.command = command;
    manifest.config = snapshot_config(per_run);
    for (const auto& [k, v] : extra_config) manifest.config[k] = v;
    manifest.seeds = {seed};
    manifest.output_dir = run_dir;
    manifest.checksums["record.txt"] = checksum_file(run_dir + "/record.txt");
    for (const std::string& name : record.checkpoint_paths) {
        manifest.checksums[name] = checksum_file(run_dir + "/" + name);
    }
    if (!record.checkpoint_paths.empty()) {
        manifest.checksums["selected.ckpt"] = checksum_file(run_dir + "/selected.ckpt");
    }
    manifest.save(run_dir + "/manifest.json");
}

// ---- subcommands -------------------------------------------------------

inline int cmd_synth(CLI::App& app, const std::vector<std::string>& args) {
    std::size_t n = 0;
    double toxic_fraction = 0.1;
    std::uint64_t seed = 1;
    std::string taxonomy = "binary";
    bool hard = false;
    std::string out;
    app.add_option("--n", n, "number of examples")->required();
    app.add_option("--toxic-fraction", toxic_fraction, "fraction of harmful examples");
    app.add_option("--seed", seed, "generator seed");
    app.add_option("--taxonomy", taxonomy, "binary or moderation8");
    app.add_flag("--hard", hard, "add order-scrambled distractors to safe texts");
    app.add_option("--out", out, "output jsonl path");
    parse_args(app, args);

    const Taxonomy taxo = Taxonomy::from_name(taxonomy);
    if (out.empty()) {
        std::filesystem::create_directories(default_out_root());
        out = default_out_root() + "/synth.jsonl";
    }
    const auto corpus = gen_synthetic(n, taxo, toxic_fraction, seed, hard);
    write_jsonl_dataset(out, corpus, taxo);
    std::size_t harmful = 0;
    for (const auto& ex : corpus) harmful += binarize_targets(ex.labels) ? 1 : 0;
    std::cout << "wrote " << corpus.size() << " examples (" << harmful << " harmful) to " << out << "\n";
    return exit_ok;
}

inline int cmd_overhead(CLI::App& app, const std::vector<std::string>& args) {
    std::string preset;
    std::size_t rank = 8, classes = 1;
    std::string probe;
    app.add_option("--preset", preset, "model preset name")->required();
    app.add_option("--rank", rank, "adapter rank");
    app.add_option("--classes", classes, "taxonomy size");
    app.add_option("--probe", probe, "count a head-only probe instead: linear or mlp");
    parse_args(app, args);

    const ModelConfig cfg = find_preset(preset).config;
    const std::size_t count = probe.empty() ? count_guard_overhead(cfg, rank, classes)
                                            : probe_param_count(probe_kind_from_name(probe), cfg.d_model, classes);
    std::cout << count << "\n";
    return exit_ok;
}

struct CommonTrainArgs {
    std::string config_path;
    std::string seeds;
    std::string data;
    std::string out;
    std::vector<std::string> sets;
};

inline void add_train_options(CLI::App& app, CommonTrainArgs& a) {
    app.add_option("--config", a.config_path, "run config file")->required();
    app.add_option("--seeds", a.seeds, "comma-separated training seeds (default: config seed)");
    app.add_option("--data", a.data, "override the data path");
    app.add_option("--out", a.out, "override the output directory");
    app.add_option("--set", a.sets, "override a config key, key=value (repeatable)");
}

inline RunConfig resolve_run_config(const CommonTrainArgs& a) {
    KeyValues kv = load_config_file(a.config_path);
    apply_overrides(kv, a.sets);
    if (!a.data.empty()) kv["data"] = a.data;
    if (!a.out.empty()) kv["out"] = a.out;
    RunConfig rc = run_config_from(kv);
    if (rc.data.empty()) throw config_error("missing config key: data (path to a jsonl corpus)");
    if (rc.out.empty()) rc.out = default_out_root();
    const ModelPreset& preset = find_preset(rc.model_preset);
    if (preset.descriptor_only) {
        throw config_error("preset '" + rc.model_preset +
                           "' is a shape descriptor for overhead accounting; only 'tiny' trains at desk scale");
    }
    return rc;
}

inline int cmd_train(CLI::App& app, const std::vector<std::string>& args) {
    CommonTrainArgs a;
    add_train_options(app, a);
    parse_args(app, args);

    RunConfig rc = resolve_run_config(a);
    const Taxonomy taxo = Taxonomy::from_name(rc.taxonomy);
    const FormatMode fmt = format_mode_from_name(rc.format_mode);
    const auto corpus = load_jsonl_dataset(rc.data, taxo);
    const std::vector<std::uint64_t> seeds = a.seeds.empty() ? std::vector<std::uint64_t>{rc.train.seed}
                                                             : parse_seed_list(a.seeds);

    std::vector<EvalResult> selected_test;
    for (std::uint64_t seed : seeds) {
        const std::string run_dir = rc.out + "/run-seed" + std::to_string(seed);
        std::filesystem::create_directories(run_dir);

        GuardModelParams params;
        params.lora_rank = rc.train.lora_rank;
        params.lora_alpha = rc.train.lora_alpha;
        params.dropout_p = rc.train.dropout_p;
        params.backbone_seed = rc.backbone_seed;
        params.guard_seed = seed;
        DualPathModel model = make_guard_model(find_preset(rc.model_preset).config, taxo, params);

        DatasetSplit split = build_split(rc, corpus, seed);
        TrainConfig cfg = rc.train;
        cfg.seed = seed;
        TrainIO io{run_dir, rc.backbone_seed};
        TrainRunRecord record = train_guard(model, split, cfg, fmt, &io);
        write_run_outputs(run_dir, "train", rc, seed, record, {});

        const EpochMetrics& chosen = record.epochs.at(record.selected_epoch - 1);
        selected_test.push_back(chosen.test);
        std::cout << "seed " << seed << ": selected epoch " << record.selected_epoch << ", test "
                  << metrics_line(chosen.test) << "\n";
    }
    const AggregateResult agg = aggregate_runs(selected_test);
    std::cout << "median test auprc " << agg.median.auprc << " (range " << agg.range.auprc << ") over "
              << agg.seed_count << " seed(s)\n";
    return exit_ok;
}

inline int cmd_train_baseline(CLI::App& app, const std::vector<std::string>& args) {
    CommonTrainArgs a;
    std::string kind = "linear";
    add_train_options(app, a);
    app.add_option("--kind", kind, "probe kind: linear or mlp");
    parse_args(app, args);

    RunConfig rc = resolve_run_config(a);
    const ProbeKind probe_kind = probe_kind_from_name(kind);
    const Taxonomy taxo = Taxonomy::from_name(rc.taxonomy);
    const FormatMode fmt = format_mode_from_name(rc.format_mode);
    const auto corpus = load_jsonl_dataset(rc.data, taxo);
    const std::vector<std::uint64_t> seeds = a.seeds.empty() ? std::vector<std::uint64_t>{rc.train.seed}
                                                             : parse_seed_list(a.seeds);

    const BackboneWeights backbone = init_backbone(find_preset(rc.model_preset).config, rc.backbone_seed);
    std::vector<EvalResult> selected_test;
    for (std::uint64_t seed : seeds) {
        const std::string run_dir = rc.out + "/baseline-" + kind + "-seed" + std::to_string(seed);
        std::filesystem::create_directories(run_dir);

        DatasetSplit split = build_split(rc, corpus, seed);
        TrainConfig cfg = rc.train;
        cfg.seed = seed;
        TrainIO io{run_dir, rc.backbone_seed};
        HeadOnlyResult result = head_only_train(backbone, split, probe_kind, cfg, taxo, fmt, &io);
        write_run_outputs(run_dir, "train-baseline", rc, seed, result.record, {{"probe_kind", kind}});

        const EpochMetrics& chosen = result.record.epochs.at(result.record.selected_epoch - 1);
        selected_test.push_back(chosen.test);
        std::cout << "seed " << seed << ": selected epoch " << result.record.selected_epoch << ", test "
                  << metrics_line(chosen.test) << "\n";
    }
    const AggregateResult agg = aggregate_runs(selected_test);
    std::cout << "median test auprc " << agg.median.auprc << " (range " << agg.range.auprc << ") over "
              << agg.seed_count << " seed(s)\n";
    return exit_ok;
}

inline int cmd_eval(CLI::App& app, const std::vector<std::string>& args) {
    std::string checkpoint_path, data_path, indices_path, format = "prompt_only";
    double threshold = 0.5;
    app.add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    app.add_option("--data", data_path, "jsonl corpus to evaluate")->required();
    app.add_option("--indices", indices_path, "optional index file selecting rows");
    app.add_option("--threshold", threshold, "classification threshold");
    app.add_option("--format", format, "chat or prompt_only");
    parse_args(app, args);

    const Checkpoint ck = Checkpoint::load(checkpoint_path);
    const FormatMode fmt = format_mode_from_name(format);
    const std::string kind = ck.require_meta("kind");

    Taxonomy taxo;
    const std::size_t taxo_size = std::stoull(ck.require_meta("taxonomy.size"));
    for (std::size_t i = 0; i < taxo_size; ++i) taxo.categories.push_back(ck.require_meta("taxonomy." + std::to_string(i)));

    std::vector<LabeledExample> rows = load_jsonl_dataset(data_path, taxo);
    if (!indices_path.empty()) {
        const auto idx = load_index_file(indices_path);
        std::vector<LabeledExample> picked;
        for (std::size_t i : idx) {
            if (i >= rows.size()) throw data_error("eval: index " + std::to_string(i) + " out of range");
            picked.push_back(rows[i]);
        }
        rows = std::move(picked);
    }

    EvalResult result;
    if (kind == "guard") {
        const DualPathModel model = guard_from_checkpoint(ck);
        result = metric_sweep(model, rows, fmt, threshold).result;
    } else if (kind == "probe") {
        const HeadOnlyProbe probe = probe_from_checkpoint(ck);
        const ModelConfig cfg = config_from_meta(ck);
        const BackboneWeights backbone = init_backbone(cfg, std::stoull(ck.require_meta("backbone.seed")));
        const auto features = cache_pooled_features(backbone, rows, fmt);
        result = dualpath::detail::probe_sweep(probe, features, rows, taxo, threshold).result;
    } else {
        throw data_error("eval: checkpoint kind '" + kind + "' is not evaluable");
    }
    std::cout << metrics_line(result) << "\n";
    return exit_ok;
}

inline int cmd_cross_eval(CLI::App& app, const std::vector<std::string>& args) {
    std::string checkpoint_path, data_path, direction, format = "prompt_only";
    double threshold = 0.5;
    app.add_option("--checkpoint", checkpoint_path, "guard checkpoint")->required();
    app.add_option("--data", data_path, "foreign-taxonomy jsonl corpus")->required();
    app.add_option("--direction", direction, "tc-to-om or om-to-tc")->required();
    app.add_option("--threshold", threshold, "classification threshold");
    app.add_option("--format", format, "chat or prompt_only");
    parse_args(app, args);

    const Checkpoint ck = Checkpoint::load(checkpoint_path);
    if (ck.require_meta("kind") != "guard") throw data_error("cross-eval: expected a guard checkpoint");
    const DualPathModel model = guard_from_checkpoint(ck);
    const FormatMode fmt = format_mode_from_name(format);

    std::vector<double> flat;
    std::vector<bool> labels;
    if (direction == "tc-to-om") {
        if (!model.taxonomy.binary()) {
            throw config_error("cross-eval tc-to-om: checkpoint must carry the binary taxonomy, found " +
                               std::to_string(model.taxonomy.size()) + " categories");
        }
        const auto rows = load_jsonl_dataset(data_path, Taxonomy::moderation8());
        flat.resize(rows.size());
        labels.resize(rows.size());
        parallel_for(rows.size(), [&](std::size_t i) {
            flat[i] = guard_scores(model, format_example(rows[i], fmt, model.config().max_seq_len))[0];
        });
        for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = binarize_targets(rows[i].labels);
    } else if (direction == "om-to-tc") {
        if (model.taxonomy.size() != 8) {
            throw config_error("cross-eval om-to-tc: checkpoint must carry the 8-category taxonomy, found " +
                               std::to_string(model.taxonomy.size()));
        }
        const auto rows = load_jsonl_dataset(data_path, Taxonomy::binary_toxicity());
        flat.resize(rows.size());
        labels.resize(rows.size());
        parallel_for(rows.size(), [&](std::size_t i) {
            flat[i] = binarize_scores(guard_scores(model, format_example(rows[i], fmt, model.config().max_seq_len)));
        });
        for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = rows[i].labels[0].value();
    } else {
        throw config_error("cross-eval: unknown direction '" + direction + "' (use tc-to-om or om-to-tc)");
    }

    std::vector<bool> preds(flat.size());
    for (std::size_t i = 0; i < flat.size(); ++i) preds[i] = flat[i] >= threshold;
    EvalResult result = prf1(preds, labels);
    result.auprc = auprc(flat, labels);
    std::cout << metrics_line(result) << "\n";
    return exit_ok;
}

inline int cmd_report(CLI::App& app, const std::vector<std::string>& args) {
    std::string runs_arg, out_dir, label;
    app.add_option("--runs", runs_arg, "comma-separated run directories (seeds of one configuration)")->required();
    app.add_option("--out", out_dir, "directory for report.txt / report.csv");
    app.add_option("--label", label, "row label (default: derived from the config)");
    parse_args(app, args);

    std::vector<std::string> run_dirs;
    std::istringstream is(runs_arg);
    std::string item;
    while (std::getline(is, item, ',')) {
        if (!trim(item).empty()) run_dirs.push_back(trim(item));
    }
    if (run_dirs.empty()) throw config_error("report: --runs needs at least one directory");

    std::vector<EvalResult> per_seed;
    std::optional<RunManifest> reference;
    for (const std::string& dir : run_dirs) {
        RunManifest m = RunManifest::load(dir + "/manifest.json");
        TrainRunRecord record = load_record(dir + "/record.txt");
        per_seed.push_back(record.epochs.at(record.selected_epoch - 1).test);
        if (reference.has_value()) {
            KeyValues a = reference->config, b = m.config;
            a.erase("seed");
            b.erase("seed");
            a.erase("out");
            b.erase("out");
            if (a != b || reference->command != m.command) {
                throw config_error("report: run '" + dir + "' was produced with a different configuration");
            }
        } else {
            reference = m;
        }
    }

    ReportRow row;
    row.metrics = aggregate_runs(per_seed);
    row.guard_overhead = overhead_for_manifest(*reference);
    if (label.empty()) {
        row.model = reference->command == "train-baseline"
                        ? reference->config.at("model_preset") + "-head-" + reference->config.at("probe_kind")
                        : reference->config.at("model_preset") + "-lora-r" + reference->config.at("lora_rank");
        row.model += "-" + reference->config.at("taxonomy");
    } else {
        row.model = label;
    }

    const std::string text = render_report_text({row});
    const std::string csv = render_report_csv({row});
    std::cout << text;
    if (out_dir.empty()) out_dir = std::filesystem::path(run_dirs.front()).parent_path().string();
    if (out_dir.empty()) out_dir = ".";
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir + "/report.txt") << text;
    std::ofstream(out_dir + "/report.csv") << csv;
    return exit_ok;
}

}  // namespace detail

// Entry point shared by the binary and the tests. `args` excludes the
// program name.
inline int run_command(const std::vector<std::string>& args) {
    static const char* usage =
        "usage: dualpath <command> [options]\n"
        "commands:\n"
        "  synth           generate a synthetic moderation corpus\n"
        "  train           train guard adapters + head over one or more seeds\n"
        "  train-baseline  train a head-only probe (linear or mlp)\n"
        "  eval            metric sweep of a checkpoint over a jsonl split\n"
        "  cross-eval      evaluate a checkpoint across taxonomies\n"
        "  overhead        print guard or probe parameter overhead for a preset\n"
        "  report          aggregate per-seed records into a results table\n";
    if (args.empty() || args[0] == "--help" || args[0] == "-h" || args[0] == "help") {
        std::cout << usage;
        return args.empty() ? exit_usage : exit_ok;
    }
    const std::string command = args[0];
    const std::vector<std::string> rest(args.begin() + 1, args.end());

    CLI::App app{"dualpath " + command};
    try {
        if (command == "synth") return detail::cmd_synth(app, rest);
        if (command == "train") return detail::cmd_train(app, rest);
        if (command == "train-baseline") return detail::cmd_train_baseline(app, rest);
        if (command == "eval") return detail::cmd_eval(app, rest);
        if (command == "cross-eval") return detail::cmd_cross_eval(app, rest);
        if (command == "overhead") return detail::cmd_overhead(app, rest);
        if (command == "report") return detail::cmd_report(app, rest);
        std::cerr << "unknown command '" << command << "'\n" << usage;
        return exit_usage;
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return exit_usage;
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return exit_usage;
    } catch (const data_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return exit_data;
    } catch (const numeric_error& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return exit_numeric;
    } catch (const dimension_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return exit_data;
    } catch (const contract_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return exit_data;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace dualpath::cli
