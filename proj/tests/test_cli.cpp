#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "dualpath/cli.hpp"

using namespace dualpath;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const char* tag) {
        path = fs::temp_directory_path() / (std::string("dualpath_cli_") + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const char* sub = "") const { return (path / sub).string(); }
};

// capture stdout of a run_command call
int run_captured(const std::vector<std::string>& args, std::string& out) {
    std::ostringstream buffer;
    std::streambuf* old = std::cout.rdbuf(buffer.rdbuf());
    const int rc = cli::run_command(args);
    std::cout.rdbuf(old);
    out = buffer.str();
    return rc;
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream os(path);
    os << content;
}

std::string tiny_train_config(const TempDir& dir, const std::string& data, const std::string& out,
                              const std::string& extra = "") {
    const std::string cfg_path = dir.str("run.cfg");
    write_file(cfg_path,
               "model_preset = tiny\n"
               "taxonomy = binary\n"
               "format_mode = prompt_only\n"
               "epochs = 2\n"
               "logical_batch_size = 8\n"
               "micro_batch_size = 8\n"
               "lora_rank = 4\n"
               "dropout_p = 0.05\n"
               "train_size = 48\n"
               "val_size = 16\n"
               "test_size = 16\n"
               "backbone_seed = 7\n"
               "data = " + data + "\n"
               "out = " + out + "\n" + extra);
    return cfg_path;
}

}  // namespace

TEST_CASE("overhead command prints the published integers") {
    std::string out;
    CHECK(run_captured({"overhead", "--preset", "llama2-7b", "--rank", "8", "--classes", "1"}, out) == 0);
    CHECK(out == "4198400\n");
    CHECK(run_captured({"overhead", "--preset", "tinyllama-1.1b", "--rank", "32", "--classes", "1"}, out) == 0);
    CHECK(out == "4507648\n");
    CHECK(run_captured({"overhead", "--preset", "llama3-8b", "--rank", "128", "--classes", "8"}, out) == 0);
    CHECK(out == "54558720\n");
    CHECK(run_captured({"overhead", "--preset", "tinyllama-1.1b", "--probe", "linear", "--classes", "1"}, out) == 0);
    CHECK(out == "2048\n");
    CHECK(run_captured({"overhead", "--preset", "llama2-7b", "--probe", "mlp", "--classes", "8"}, out) == 0);
    CHECK(out == "5106008\n");
}

TEST_CASE("usage and error exit codes") {
    std::string out;
    CHECK(run_captured({}, out) == cli::exit_usage);
    CHECK(run_captured({"frobnicate"}, out) == cli::exit_usage);
    CHECK(run_captured({"overhead"}, out) == cli::exit_usage);                       // missing --preset
    CHECK(run_captured({"overhead", "--preset", "nope"}, out) == cli::exit_usage);   // unknown preset
    CHECK(run_captured({"eval", "--checkpoint", "/nonexistent.ckpt", "--data", "/nonexistent.jsonl"}, out) ==
          cli::exit_data);
    CHECK(run_captured({"help"}, out) == 0);
    CHECK(out.find("cross-eval") != std::string::npos);
}

TEST_CASE("synth command writes a loadable corpus") {
    TempDir dir("synth");
    const std::string path = dir.str("corpus.jsonl");
    std::string out;
    CHECK(run_captured({"synth", "--n", "60", "--toxic-fraction", "0.2", "--seed", "9", "--taxonomy", "binary",
                        "--out", path},
                       out) == 0);
    CHECK(out.find("wrote 60 examples (12 harmful)") != std::string::npos);
    auto rows = load_jsonl_dataset(path, Taxonomy::binary_toxicity());
    CHECK(rows.size() == 60);
}

TEST_CASE("train, eval, report pipeline") {
    TempDir dir("pipeline");
    const std::string data = dir.str("corpus.jsonl");
    std::string out;
    REQUIRE(run_captured({"synth", "--n", "80", "--toxic-fraction", "0.25", "--seed", "11", "--out", data}, out) == 0);

    const std::string out_a = dir.str("runs-a");
    const std::string cfg = tiny_train_config(dir, data, out_a);
    REQUIRE(run_captured({"train", "--config", cfg, "--seeds", "1,2"}, out) == 0);
    CHECK(out.find("seed 1: selected epoch") != std::string::npos);
    CHECK(out.find("median test auprc") != std::string::npos);

    SUBCASE("run directory artifacts exist and are manifest-checksummed") {
        const std::string run1 = out_a + "/run-seed1";
        CHECK(fs::exists(run1 + "/record.txt"));
        CHECK(fs::exists(run1 + "/manifest.json"));
        CHECK(fs::exists(run1 + "/epoch-001.ckpt"));
        CHECK(fs::exists(run1 + "/selected.ckpt"));
        RunManifest m = RunManifest::load(run1 + "/manifest.json");
        CHECK(m.command == "train");
        CHECK(m.checksums.at("record.txt") == checksum_file(run1 + "/record.txt"));
        CHECK(m.checksums.at("epoch-002.ckpt") == checksum_file(run1 + "/epoch-002.ckpt"));
    }

    SUBCASE("identical re-invocation reproduces every byte") {
        const std::string out_b = dir.str("runs-b");
        REQUIRE(run_captured({"train", "--config", cfg, "--seeds", "1,2", "--out", out_b}, out) == 0);
        for (const char* run : {"run-seed1", "run-seed2"}) {
            CHECK(read_file(out_a + "/" + run + "/record.txt") == read_file(out_b + "/" + run + "/record.txt"));
            CHECK(read_file(out_a + "/" + run + "/selected.ckpt") ==
                  read_file(out_b + "/" + run + "/selected.ckpt"));
        }
    }

    SUBCASE("eval command reproduces the recorded test metrics protocol") {
        const std::string run1 = out_a + "/run-seed1";
        std::string eval_out;
        CHECK(run_captured({"eval", "--checkpoint", run1 + "/selected.ckpt", "--data", data}, eval_out) == 0);
        CHECK(eval_out.find("auprc=") != std::string::npos);
        CHECK(eval_out.find("precision=") != std::string::npos);
    }

    SUBCASE("report aggregates the two seeds") {
        std::string report_out;
        CHECK(run_captured({"report", "--runs", out_a + "/run-seed1," + out_a + "/run-seed2", "--out",
                            dir.str("report")},
                           report_out) == 0);
        CHECK(report_out.find("Guard Overhead") != std::string::npos);
        CHECK(report_out.find("tiny-lora-r4-binary") != std::string::npos);
        CHECK(fs::exists(dir.str("report") + "/report.txt"));
        const std::string csv = read_file(dir.str("report") + "/report.csv");
        CHECK(csv.find("model,auprc_median") != std::string::npos);
        // overhead for tiny preset, rank 4, one class
        const std::size_t overhead = count_guard_overhead(find_preset("tiny").config, 4, 1);
        CHECK(csv.find("," + std::to_string(overhead)) != std::string::npos);
    }

    SUBCASE("report refuses runs from different configurations") {
        const std::string out_c = dir.str("runs-c");
        const std::string cfg2 = tiny_train_config(dir, data, out_c, "lora_alpha = 12\n");
        std::string ignore;
        REQUIRE(run_captured({"train", "--config", cfg2, "--seeds", "1"}, ignore) == 0);
        CHECK(run_captured({"report", "--runs", out_a + "/run-seed1," + out_c + "/run-seed1"}, ignore) ==
              cli::exit_usage);
    }
}

TEST_CASE("train-baseline pipeline") {
    TempDir dir("baseline");
    const std::string data = dir.str("corpus.jsonl");
    std::string out;
    REQUIRE(run_captured({"synth", "--n", "80", "--toxic-fraction", "0.25", "--seed", "3", "--out", data}, out) == 0);
    const std::string cfg = tiny_train_config(dir, data, dir.str("runs"));
    REQUIRE(run_captured({"train-baseline", "--config", cfg, "--kind", "linear", "--seeds", "5"}, out) == 0);
    const std::string run = dir.str("runs") + "/baseline-linear-seed5";
    CHECK(fs::exists(run + "/record.txt"));
    RunManifest m = RunManifest::load(run + "/manifest.json");
    CHECK(m.command == "train-baseline");
    CHECK(m.config.at("probe_kind") == "linear");

    std::string eval_out;
    CHECK(run_captured({"eval", "--checkpoint", run + "/selected.ckpt", "--data", data}, eval_out) == 0);
    CHECK(eval_out.find("auprc=") != std::string::npos);
}

TEST_CASE("cross-eval matches a hand-assembled pipeline on a 10-row fixture") {
    TempDir dir("crosseval");

    // hand-labeled OM-style fixture covering all-false, any-true, and
    // missing-label cases
    const std::string fixture = dir.str("om_fixture.jsonl");
    write_file(fixture, R"({"prompt":"alpha","labels":{"sexual":false,"hate":false,"violence":false,"harassment":false,"self-harm":false,"sexual/minors":false,"hate/threatening":false,"violence/graphic":false}}
{"prompt":"bravo","labels":{"sexual":true,"hate":false,"violence":false,"harassment":false,"self-harm":false,"sexual/minors":false,"hate/threatening":false,"violence/graphic":false}}
{"prompt":"charlie","labels":{"sexual":false,"hate":false,"violence":false,"harassment":false,"self-harm":false,"sexual/minors":false,"hate/threatening":false}}
{"prompt":"delta","labels":{"hate":true}}
{"prompt":"echo","labels":{}}
{"prompt":"foxtrot","labels":{"sexual":false,"hate":false,"violence":true,"harassment":false,"self-harm":false,"sexual/minors":false,"hate/threatening":false,"violence/graphic":false}}
{"prompt":"golf","labels":{"sexual":false,"hate":false,"violence":false,"harassment":false,"self-harm":false,"sexual/minors":false,"hate/threatening":false,"violence/graphic":false}}
{"prompt":"hotel","labels":{"harassment":true,"hate":true}}
{"prompt":"india","labels":{"sexual":false,"hate":false,"violence":false,"harassment":false,"self-harm":true,"sexual/minors":false,"hate/threatening":false,"violence/graphic":false}}
{"prompt":"juliet","labels":{"sexual":false,"hate":false,"violence":false,"harassment":false,"self-harm":false,"sexual/minors":false,"hate/threatening":false,"violence/graphic":false}}
)");

    // expected binarized targets, by hand:
    //   alpha F, bravo T, charlie T (one slot missing), delta T, echo T (all
    //   missing), foxtrot T, golf F, hotel T, india T, juliet F
    const std::vector<bool> hand_targets{false, true, true, true, true, true, false, true, true, false};

    // a binary guard checkpoint (fresh model is fine; scores come from it
    // either way)
    GuardModelParams params;
    params.lora_rank = 4;
    params.lora_alpha = 8.0;
    params.backbone_seed = 5;
    params.guard_seed = 21;
    DualPathModel model = make_guard_model(find_preset("tiny").config, Taxonomy::binary_toxicity(), params);
    const std::string ckpt = dir.str("tc.ckpt");
    checkpoint_from_guard(model, params.backbone_seed).save(ckpt);

    std::string out;
    REQUIRE(run_captured({"cross-eval", "--checkpoint", ckpt, "--data", fixture, "--direction", "tc-to-om"}, out) ==
            0);

    // hand-assembled pipeline: guard scores + binarize_targets + metrics
    auto rows = load_jsonl_dataset(fixture, Taxonomy::moderation8());
    REQUIRE(rows.size() == 10);
    std::vector<double> scores;
    std::vector<bool> targets;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        scores.push_back(guard_scores(model, format_example(rows[i], FormatMode::prompt_only, 64))[0]);
        targets.push_back(binarize_targets(rows[i].labels));
        CHECK(targets.back() == hand_targets[i]);
    }
    std::vector<bool> preds;
    for (double s : scores) preds.push_back(s >= 0.5);
    EvalResult expect = prf1(preds, targets);
    expect.auprc = auprc(scores, targets);

    char line[256];
    std::snprintf(line, sizeof(line), "auprc=%.6f precision=%.6f recall=%.6f f1=%.6f", expect.auprc, expect.precision,
                  expect.recall, expect.f1);
    CHECK(out.find(line) != std::string::npos);

    SUBCASE("om-to-tc direction uses max-score binarization") {
        // multilabel checkpoint + binary data
        GuardModelParams mparams;
        mparams.lora_rank = 4;
        mparams.lora_alpha = 8.0;
        mparams.backbone_seed = 5;
        mparams.guard_seed = 22;
        DualPathModel multi = make_guard_model(find_preset("tiny").config, Taxonomy::moderation8(), mparams);
        const std::string mckpt = dir.str("om.ckpt");
        checkpoint_from_guard(multi, mparams.backbone_seed).save(mckpt);

        const std::string tc_data = dir.str("tc_fixture.jsonl");
        write_file(tc_data, R"({"prompt":"one","labels":{"toxic":true}}
{"prompt":"two","labels":{"toxic":false}}
{"prompt":"three","labels":{"toxic":false}}
{"prompt":"four","labels":{"toxic":true}}
)");
        std::string out2;
        REQUIRE(run_captured({"cross-eval", "--checkpoint", mckpt, "--data", tc_data, "--direction", "om-to-tc"},
                             out2) == 0);

        auto tc_rows = load_jsonl_dataset(tc_data, Taxonomy::binary_toxicity());
        std::vector<double> mx;
        std::vector<bool> lab;
        for (const auto& r : tc_rows) {
            mx.push_back(binarize_scores(guard_scores(multi, format_example(r, FormatMode::prompt_only, 64))));
            lab.push_back(*r.labels[0]);
        }
        std::vector<bool> p2;
        for (double s : mx) p2.push_back(s >= 0.5);
        EvalResult e2 = prf1(p2, lab);
        e2.auprc = auprc(mx, lab);
        char line2[256];
        std::snprintf(line2, sizeof(line2), "auprc=%.6f precision=%.6f recall=%.6f f1=%.6f", e2.auprc, e2.precision,
                      e2.recall, e2.f1);
        CHECK(out2.find(line2) != std::string::npos);
    }

    SUBCASE("taxonomy mismatch is rejected with a one-line message") {
        std::string err_out;
        CHECK(run_captured({"cross-eval", "--checkpoint", ckpt, "--data", fixture, "--direction", "om-to-tc"},
                           err_out) == cli::exit_usage);
    }
}

TEST_CASE("config parsing") {
    SUBCASE("defaults mirror the published recipe") {
        std::istringstream empty("");
        RunConfig rc = run_config_from(parse_config_text(empty, "<mem>"));
        CHECK(rc.train.learning_rate == 3e-4);
        CHECK(rc.train.epochs == 20);
        CHECK(rc.train.lora_alpha == 16.0);  // 2 * default rank 8
        CHECK(rc.train.dropout_p == 0.05);
    }
    SUBCASE("alpha follows rank unless given") {
        std::istringstream a("lora_rank = 32\n");
        CHECK(run_config_from(parse_config_text(a, "<mem>")).train.lora_alpha == 64.0);
        std::istringstream b("lora_rank = 32\nlora_alpha = 10\n");
        CHECK(run_config_from(parse_config_text(b, "<mem>")).train.lora_alpha == 10.0);
    }
    SUBCASE("unknown keys are flagged") {
        std::istringstream s("learning_rat = 1\n");
        CHECK_THROWS_AS(run_config_from(parse_config_text(s, "<mem>")), config_error);
    }
    SUBCASE("comments and blanks are skipped") {
        std::istringstream s("# a comment\n\nepochs = 3   # trailing\n");
        CHECK(run_config_from(parse_config_text(s, "<mem>")).train.epochs == 3);
    }
    SUBCASE("descriptor presets refuse to train") {
        TempDir dir("descriptor");
        write_file(dir.str("bad.cfg"), "model_preset = llama2-7b\ndata = x.jsonl\ntrain_size = 4\nval_size = 2\n");
        std::string out;
        CHECK(run_captured({"train", "--config", dir.str("bad.cfg")}, out) == cli::exit_usage);
    }
}
