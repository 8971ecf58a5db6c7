#include <cmath>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "dualpath/baselines.hpp"
#include "dualpath/loss.hpp"
#include "dualpath/optim.hpp"
#include "dualpath/train.hpp"

using namespace dualpath;

namespace {

LabeledExample binary_example(std::string prompt, bool toxic) {
    LabeledExample ex;
    ex.prompt = std::move(prompt);
    ex.labels = {toxic};
    return ex;
}

DualPathModel small_model(std::uint64_t guard_seed = 1, std::size_t rank = 4) {
    GuardModelParams params;
    params.lora_rank = rank;
    params.lora_alpha = 2.0 * static_cast<double>(rank);
    params.backbone_seed = 7;
    params.guard_seed = guard_seed;
    return make_guard_model(find_preset("tiny").config, Taxonomy::binary_toxicity(), params);
}

TrainConfig quick_config(std::uint64_t seed = 1) {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.logical_batch_size = 8;
    cfg.micro_batch_size = 8;
    cfg.lora_rank = 4;
    cfg.lora_alpha = 8.0;
    cfg.seed = seed;
    return cfg;
}

DatasetSplit quick_split(std::size_t n_train = 64, std::size_t n_val = 24, std::size_t n_test = 24,
                         std::uint64_t seed = 500) {
    auto corpus = gen_synthetic(n_train + n_val + n_test, Taxonomy::binary_toxicity(), 0.25, seed);
    return make_splits(corpus, SplitSizes{n_train, n_val, n_test}, seed);
}

}  // namespace

TEST_CASE("compute_pos_weights") {
    Taxonomy binary = Taxonomy::binary_toxicity();
    SUBCASE("three negatives one positive") {
        std::vector<LabeledExample> train{binary_example("a", false), binary_example("b", false),
                                          binary_example("c", false), binary_example("d", true)};
        CHECK(compute_pos_weights(train, binary) == std::vector<double>{3.0});
    }
    SUBCASE("balanced split gives 1") {
        std::vector<LabeledExample> train{binary_example("a", true), binary_example("b", false)};
        CHECK(compute_pos_weights(train, binary) == std::vector<double>{1.0});
    }
    SUBCASE("zero positives is a hard error") {
        std::vector<LabeledExample> train{binary_example("a", false)};
        CHECK_THROWS_AS(compute_pos_weights(train, binary), config_error);
    }
    SUBCASE("multilabel absent rows are excluded from both counts") {
        // crafted 6-row table over 2 categories:
        //   cat 0: rows {T, F, F, absent, T, F}  -> 3 false / 2 true = 1.5
        //   cat 1: rows {absent, T, absent, F, F, absent} -> 2 false / 1 true = 2
        Taxonomy two{{"alpha", "beta"}};
        auto row = [](std::optional<bool> a, std::optional<bool> b) {
            LabeledExample ex;
            ex.prompt = "x";
            ex.labels = {a, b};
            return ex;
        };
        std::vector<LabeledExample> train{
            row(true, std::nullopt), row(false, true),         row(false, std::nullopt),
            row(std::nullopt, false), row(true, false),        row(false, std::nullopt),
        };
        const auto w = compute_pos_weights(train, two);
        REQUIRE(w.size() == 2);
        CHECK(w[0] == doctest::Approx(1.5).epsilon(1e-15));
        CHECK(w[1] == doctest::Approx(2.0).epsilon(1e-15));
    }
}

TEST_CASE("weighted_binary_loss values and gradient") {
    CHECK(weighted_binary_loss(0.0, true, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(weighted_binary_loss(0.0, true, 3.0) == doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-12));
    CHECK(std::isfinite(weighted_binary_loss(100.0, false, 1.0)));
    CHECK(std::isfinite(weighted_binary_loss(-100.0, true, 5.0)));
    CHECK_THROWS_AS(weighted_binary_loss(std::nan(""), true, 1.0), numeric_error);

    // dL/dz = (w*y + 1 - y)*sigma(z) - w*y against central differences
    Rng rng(8);
    for (int rep = 0; rep < 20; ++rep) {
        const double z = rng.uniform(-3.0, 3.0);
        const bool y = rng.bernoulli(0.5);
        const double w = rng.uniform(0.5, 4.0);
        const double h = 1e-6;
        const double fd = (weighted_binary_loss(z + h, y, w) - weighted_binary_loss(z - h, y, w)) / (2.0 * h);
        CHECK(weighted_binary_loss_grad(z, y, w) == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("masked_multilabel_loss") {
    const std::vector<double> weights(8, 1.0);
    SUBCASE("all absent contributes nothing") {
        std::vector<std::optional<bool>> labels(8, std::nullopt);
        CHECK_FALSE(masked_multilabel_loss(std::vector<double>(8, 0.3), labels, weights).has_value());
    }
    SUBCASE("single present label equals the scalar loss") {
        std::vector<std::optional<bool>> labels(8, std::nullopt);
        labels[3] = true;
        std::vector<double> logits(8, 0.0);
        logits[3] = -0.7;
        const auto loss = masked_multilabel_loss(logits, labels, weights);
        REQUIRE(loss.has_value());
        CHECK(*loss == doctest::Approx(weighted_binary_loss(-0.7, true, 1.0)).epsilon(1e-15));
    }
    SUBCASE("absent slots receive exactly zero gradient through the tape") {
        std::vector<std::optional<bool>> labels(8, std::nullopt);
        labels[0] = true;
        labels[5] = false;
        std::vector<double> targets(8, 0.0), present(8, 0.0), w(8, 2.0);
        targets[0] = 1.0;
        present[0] = 1.0;
        present[5] = 1.0;
        Tape tape;
        auto z = tape.parameter(Tensor({1, 8}, {0.3, -1.0, 0.5, 2.0, -0.2, 0.9, 1.1, -0.6}));
        auto loss = tape.weighted_bce(z, targets, w, present);
        tape.backward(loss);
        for (std::size_t c = 0; c < 8; ++c) {
            if (c == 0 || c == 5) CHECK(tape.grad(z)[c] != 0.0);
            else CHECK(tape.grad(z)[c] == 0.0);
        }
        // perturbing an absent slot leaves the loss bit-identical
        Tape tape2;
        auto z2 = tape2.parameter(Tensor({1, 8}, {0.3, -1.0, 99.0, 2.0, -0.2, 0.9, 1.1, -0.6}));
        auto loss2 = tape2.weighted_bce(z2, targets, w, present);
        CHECK(tape2.value(loss2)[0] == tape.value(loss)[0]);
    }
}

TEST_CASE("adamw closed forms") {
    SUBCASE("first step is approximately -lr*sign(g)") {
        AdamW opt(AdamWConfig{0.01, 0.9, 0.999, 1e-8, 0.0});
        Tensor p({2}, {1.0, -2.0});
        Tensor g({2}, {0.5, -0.25});
        opt.step({&p}, {g});
        CHECK(p[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
        CHECK(p[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-6));
    }
    SUBCASE("zero gradient with decay shrinks by (1 - lr*wd) per step") {
        AdamW opt(AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.5});
        Tensor p({1}, {4.0});
        Tensor g({1}, {0.0});
        double expect = 4.0;
        for (int i = 0; i < 5; ++i) {
            opt.step({&p}, {g});
            expect *= 1.0 - 0.1 * 0.5;
            CHECK(p[0] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
    SUBCASE("ten steps on a quadratic match an independent reference within 1e-10") {
        // loss = 0.5*((p0-3)^2 + 2*(p1+1)^2), grad = (p0-3, 2*(p1+1))
        const AdamWConfig cfg{0.05, 0.9, 0.999, 1e-8, 0.01};
        AdamW opt(cfg);
        Tensor p({2}, {0.0, 0.0});

        // hand-coded reference with scalar state
        double rp[2] = {0.0, 0.0}, m[2] = {0.0, 0.0}, v[2] = {0.0, 0.0};
        for (int t = 1; t <= 10; ++t) {
            Tensor g({2}, {p[0] - 3.0, 2.0 * (p[1] + 1.0)});
            opt.step({&p}, {g});

            const double rg[2] = {rp[0] - 3.0, 2.0 * (rp[1] + 1.0)};
            for (int j = 0; j < 2; ++j) {
                rp[j] -= cfg.lr * cfg.weight_decay * rp[j];
                m[j] = cfg.beta1 * m[j] + (1 - cfg.beta1) * rg[j];
                v[j] = cfg.beta2 * v[j] + (1 - cfg.beta2) * rg[j] * rg[j];
                const double mh = m[j] / (1 - std::pow(cfg.beta1, t));
                const double vh = v[j] / (1 - std::pow(cfg.beta2, t));
                rp[j] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
            }
            CHECK(std::abs(p[0] - rp[0]) < 1e-10);
            CHECK(std::abs(p[1] - rp[1]) < 1e-10);
        }
    }
}

TEST_CASE("select_checkpoint rules") {
    auto rec_with = [](std::vector<double> vals) {
        TrainRunRecord r;
        for (double v : vals) {
            EpochMetrics em;
            em.val_selection_auprc = v;
            r.epochs.push_back(em);
        }
        return r;
    };
    CHECK(select_checkpoint(rec_with({0.5, 0.9, 0.7})) == 2);
    CHECK(select_checkpoint(rec_with({0.8, 0.8})) == 1);
    CHECK_THROWS_AS(select_checkpoint(TrainRunRecord{}), contract_error);

    // multilabel: the stored selection value is the mean of per-category
    // AUPRCs; verify the argmax over a hand-computed 2-epoch, 2-category
    // record: epoch1 (1.0, 0.5) -> 0.75, epoch2 (0.6, 0.8) -> 0.7
    CHECK(select_checkpoint(rec_with({(1.0 + 0.5) / 2, (0.6 + 0.8) / 2})) == 1);
}

TEST_CASE("end-to-end gradients on a one-layer model match finite differences") {
    ModelConfig cfg{256, 64, 1, 4, 2, 16, 256, 32, 1e-5};
    cfg.validate();
    GuardModelParams params;
    params.lora_rank = 2;
    params.lora_alpha = 4.0;
    params.backbone_seed = 3;
    params.guard_seed = 9;
    DualPathModel model = make_guard_model(cfg, Taxonomy::binary_toxicity(), params);
    // give B nonzero values so its gradient path is generic
    Rng rng(17);
    for (auto& [k, ad] : model.adapters.items) {
        for (double& v : ad.b.data) v = rng.uniform(-0.1, 0.1);
    }

    const std::string text = "user: feij zq9vx maam";
    const auto tokens = ByteTokenizer::encode(text, cfg.max_seq_len);
    const std::vector<double> targets{1.0}, weights{2.5}, present{1.0};

    // analytic gradients, evaluation mode (no dropout in the checked loss)
    Tape tape;
    AdapterBinding binding = bind_adapters(tape, model.adapters, true);
    auto head_node = tape.parameter(model.head.weight);
    auto features = forward_features(tape, tokens, model.backbone, &binding);
    auto logits = tape.matmul(tape.pick_row(features, tokens.size() - 1), head_node);
    auto loss = tape.weighted_bce(logits, targets, weights, present);
    tape.backward(loss);

    auto loss_with = [&](const AdapterSet& adapters, const Tensor& head) {
        Tape t2(false);
        AdapterBinding b2 = bind_adapters(t2, adapters, false);
        auto f2 = forward_features(t2, tokens, model.backbone, &b2);
        auto z2 = t2.matmul(t2.pick_row(f2, tokens.size() - 1), t2.constant(head));
        auto l2 = t2.weighted_bce(z2, targets, weights, present);
        return t2.value(l2)[0];
    };

    const double h = 1e-4, tol = 1e-4;
    auto check_tensor = [&](const Tensor& analytic, Tensor& live) {
        for (std::size_t i = 0; i < live.numel(); ++i) {
            const double orig = live[i];
            live[i] = orig + h;
            const double up = loss_with(model.adapters, model.head.weight);
            live[i] = orig - h;
            const double down = loss_with(model.adapters, model.head.weight);
            live[i] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double denom = std::max(1.0, std::abs(fd));
            CHECK(std::abs(analytic[i] - fd) / denom < tol);
        }
    };

    for (auto& [key, ad] : model.adapters.items) {
        check_tensor(tape.grad(binding.at(key).a), ad.a);
        check_tensor(tape.grad(binding.at(key).b), ad.b);
    }
    check_tensor(tape.grad(head_node), model.head.weight);
}

TEST_CASE("train_guard determinism, frozen backbone, and loss descent") {
    DatasetSplit split = quick_split();
    TrainConfig cfg = quick_config();

    DualPathModel m1 = small_model();
    const std::string backbone_before = serialize_backbone_bytes(m1.backbone);
    TrainRunRecord r1 = train_guard(m1, split, cfg);
    CHECK(serialize_backbone_bytes(m1.backbone) == backbone_before);

    DualPathModel m2 = small_model();
    TrainRunRecord r2 = train_guard(m2, split, cfg);

    std::ostringstream s1, s2;
    write_record(s1, r1);
    write_record(s2, r2);
    CHECK(s1.str() == s2.str());
    CHECK(checkpoint_from_guard(m1, 7).to_bytes() == checkpoint_from_guard(m2, 7).to_bytes());

    // adapters and head actually moved
    DualPathModel fresh = small_model();
    CHECK(checkpoint_from_guard(m1, 7).to_bytes() != checkpoint_from_guard(fresh, 7).to_bytes());

    // a different seed diverges
    DualPathModel m3 = small_model();
    TrainConfig cfg3 = cfg;
    cfg3.seed = 2;
    TrainRunRecord r3 = train_guard(m3, split, cfg3);
    std::ostringstream s3;
    write_record(s3, r3);
    CHECK(s1.str() != s3.str());

    // training reduced the loss across two epochs on separable data
    CHECK(r1.epochs.back().mean_train_loss < r1.epochs.front().mean_train_loss);
    CHECK(r1.selected_epoch >= 1);
    CHECK(r1.selected_epoch <= cfg.epochs);
}

TEST_CASE("taxonomy mismatch is a configuration error") {
    DualPathModel model = small_model();
    auto corpus = gen_synthetic(32, Taxonomy::moderation8(), 0.25, 3);
    DatasetSplit split = make_splits(corpus, SplitSizes{16, 8, 8}, 4);
    CHECK_THROWS_AS(train_guard(model, split, quick_config()), config_error);
}

TEST_CASE("gradient accumulation equals the direct batch, step by step") {
    auto corpus = gen_synthetic(80, Taxonomy::binary_toxicity(), 0.25, 2000);
    TrainConfig direct_cfg = quick_config();
    direct_cfg.logical_batch_size = 16;
    direct_cfg.micro_batch_size = 16;
    TrainConfig accum_cfg = direct_cfg;
    accum_cfg.micro_batch_size = 4;

    DualPathModel direct_model = small_model();
    DualPathModel accum_model = small_model();
    GuardTrainer direct(direct_model, direct_cfg, FormatMode::prompt_only);
    GuardTrainer accum(accum_model, accum_cfg, FormatMode::prompt_only);
    const std::vector<double> pw{3.0};
    direct.set_pos_weights(pw);
    accum.set_pos_weights(pw);

    for (std::size_t step = 1; step <= 5; ++step) {
        std::vector<const LabeledExample*> batch;
        for (std::size_t i = 0; i < 16; ++i) batch.push_back(&corpus[(step - 1) * 16 + i]);
        const double l1 = direct.run_logical_batch(batch, 1, step);
        const double l2 = accum.run_logical_batch(batch, 1, step);
        CHECK(l1 == doctest::Approx(l2).epsilon(1e-12));
        for (std::size_t p = 0; p < direct.params().size(); ++p) {
            const Tensor& a = *direct.params()[p];
            const Tensor& b = *accum.params()[p];
            for (std::size_t j = 0; j < a.numel(); ++j) {
                CHECK(std::abs(a[j] - b[j]) < 1e-8);
            }
        }
    }
}

TEST_CASE("record files round-trip") {
    DatasetSplit split = quick_split(32, 12, 12, 900);
    TrainConfig cfg = quick_config(5);
    cfg.epochs = 2;
    DualPathModel model = small_model(5);
    TrainRunRecord r = train_guard(model, split, cfg);

    const auto path = std::string("record_roundtrip_test.txt");
    save_record(path, r);
    TrainRunRecord back = load_record(path);
    std::remove(path.c_str());

    std::ostringstream a, b;
    write_record(a, r);
    write_record(b, back);
    CHECK(a.str() == b.str());
    CHECK(back.selected_epoch == r.selected_epoch);
    CHECK(back.epochs.size() == r.epochs.size());
}

TEST_CASE("train config validation and defaults") {
    TrainConfig cfg;
    CHECK(cfg.learning_rate == 3e-4);
    CHECK(cfg.epochs == 20);
    CHECK(cfg.lora_alpha == 2.0 * static_cast<double>(cfg.lora_rank));
    CHECK(cfg.dropout_p == 0.05);
    CHECK(cfg.threshold == 0.5);
    CHECK_NOTHROW(cfg.validate());
    cfg.micro_batch_size = 5;  // does not divide 16
    CHECK_THROWS_AS(cfg.validate(), config_error);
}
