#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "dualpath/checkpoint.hpp"
#include "dualpath/dataset.hpp"
#include "dualpath/error.hpp"
#include "dualpath/guard.hpp"
#include "dualpath/loss.hpp"
#include "dualpath/metrics.hpp"
#include "dualpath/optim.hpp"
#include "dualpath/parallel.hpp"

namespace dualpath {

// Training hyperparameters. Defaults reproduce the published recipe: AdamW
// at 3e-4 for 20 epochs, alpha = 2*rank, adapter dropout 0.05, threshold 0.5.
struct TrainConfig {
    double learning_rate = 3e-4;
    std::size_t epochs = 20;
    std::size_t logical_batch_size = 16;
    std::size_t micro_batch_size = 8;
    std::size_t lora_rank = 8;
    double lora_alpha = 16.0;
    double dropout_p = 0.05;
    double weight_decay = 0.01;
    std::uint64_t seed = 1;
    double threshold = 0.5;

    void validate() const {
        if (learning_rate <= 0.0) throw config_error("train config: learning_rate must be positive");
        if (epochs == 0) throw config_error("train config: epochs must be positive");
        if (logical_batch_size == 0 || micro_batch_size == 0) {
            throw config_error("train config: batch sizes must be positive");
        }
        if (logical_batch_size % micro_batch_size != 0) {
            throw config_error("train config: micro_batch_size " + std::to_string(micro_batch_size) +
                               " must divide logical_batch_size " + std::to_string(logical_batch_size));
        }
        if (lora_rank == 0) throw config_error("train config: lora_rank must be positive");
        if (lora_alpha <= 0.0) throw config_error("train config: lora_alpha must be positive");
        if (dropout_p < 0.0 || dropout_p >= 1.0) throw config_error("train config: dropout_p must be in [0, 1)");
        if (weight_decay < 0.0) throw config_error("train config: weight_decay must be non-negative");
        if (threshold <= 0.0 || threshold >= 1.0) throw config_error("train config: threshold must be in (0, 1)");
    }
};

struct EpochMetrics {
    double mean_train_loss = 0.0;
    EvalResult train;
    EvalResult val;
    EvalResult test;
    // validation metric used for checkpoint selection: plain AUPRC for the
    // binary task, mean per-category AUPRC for multilabel
    double val_selection_auprc = 0.0;
};

struct TrainRunRecord {
    std::uint64_t seed = 0;
    std::vector<EpochMetrics> epochs;
    std::size_t selected_epoch = 0;  // 1-based epoch number
    std::size_t skipped_all_absent = 0;
    std::vector<std::string> checkpoint_paths;  // one per epoch when persisted
};

// Binary -> argmax of validation AUPRC; multilabel -> argmax of the mean
// per-category validation AUPRC. Ties resolve to the earliest epoch.
inline std::size_t select_checkpoint(const TrainRunRecord& record) {
    if (record.epochs.empty()) throw contract_error("select_checkpoint: empty record");
    std::size_t best = 0;
    for (std::size_t i = 1; i < record.epochs.size(); ++i) {
        if (record.epochs[i].val_selection_auprc > record.epochs[best].val_selection_auprc) best = i;
    }
    return best + 1;
}

// ---------------------------------------------------------------------------
// Metric sweep
// ---------------------------------------------------------------------------

struct SweepOutcome {
    EvalResult result;
    double selection_auprc = 0.0;
};

// Batched scoring on the guarding path, evaluation mode. Examples are packed
// in chunks onto one tape each; per-row arithmetic is identical to
// guard_scores on the same text.
inline std::vector<std::vector<double>> guard_scores_batch(const DualPathModel& model,
                                                           const std::vector<LabeledExample>& examples,
                                                           FormatMode fmt, std::size_t chunk_size = 16) {
    validate_adapter_shapes(model.adapters, model.config());
    const std::size_t n = examples.size();
    std::vector<std::vector<double>> scores(n);
    const std::size_t n_chunks = (n + chunk_size - 1) / chunk_size;
    parallel_for(n_chunks, [&](std::size_t c) {
        const std::size_t begin = c * chunk_size;
        const std::size_t end = std::min(n, begin + chunk_size);
        std::vector<std::vector<std::size_t>> seqs;
        seqs.reserve(end - begin);
        for (std::size_t i = begin; i < end; ++i) {
            seqs.push_back(ByteTokenizer::encode(format_example(examples[i], fmt, model.config().max_seq_len),
                                                 model.config().max_seq_len));
        }
        const PackedSequences packed = PackedSequences::pack(seqs);
        Tape tape(false);
        AdapterBinding binding = bind_adapters(tape, model.adapters, false);
        const std::vector<std::size_t> pool = packed.last_rows();
        auto last = forward_features(tape, packed, model.backbone, &binding, {}, &pool);
        auto logits = tape.matmul(last, tape.frozen(model.head.weight));
        const Tensor& z = tape.value(logits);
        for (std::size_t i = begin; i < end; ++i) {
            scores[i].resize(z.cols());
            for (std::size_t cc = 0; cc < z.cols(); ++cc) scores[i][cc] = sigmoid(z.at(i - begin, cc));
        }
    });
    return scores;
}

// Scores every example in evaluation mode and reports the paper metrics at
// the given threshold. Multilabel examples are binarized for
// precision/recall/F1/AUPRC (max score vs conservative target) and the
// selection metric is the mean per-category AUPRC over present labels.
inline SweepOutcome metric_sweep(const DualPathModel& model, const std::vector<LabeledExample>& examples,
                                 FormatMode fmt, double threshold) {
    if (examples.empty()) throw contract_error("metric_sweep: empty split");
    const std::size_t n = examples.size();
    std::vector<std::vector<double>> scores = guard_scores_batch(model, examples, fmt);

    SweepOutcome out;
    const bool binary = model.taxonomy.binary();
    std::vector<double> flat(n);
    std::vector<bool> labels(n), preds(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (binary) {
            flat[i] = scores[i][0];
            if (!examples[i].labels[0].has_value()) throw data_error("metric_sweep: binary example lacks its label");
            labels[i] = *examples[i].labels[0];
        } else {
            flat[i] = binarize_scores(scores[i]);
            labels[i] = binarize_targets(examples[i].labels);
        }
        preds[i] = flat[i] >= threshold;
    }
    out.result = prf1(preds, labels);
    out.result.auprc = auprc(flat, labels);
    if (binary) {
        out.selection_auprc = out.result.auprc;
    } else {
        std::vector<std::vector<std::optional<bool>>> label_rows(n);
        for (std::size_t i = 0; i < n; ++i) label_rows[i] = examples[i].labels;
        out.selection_auprc = mean_category_auprc(scores, label_rows, &model.taxonomy.categories);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Guard trainer
// ---------------------------------------------------------------------------

// Owns the optimizer and the fixed parameter order (adapters by (layer,
// projection) ascending, A before B, head last). Gradients accumulate per
// example in ascending slot order, so a 4x4 micro-batch schedule and a
// direct batch of 16 produce identical updates.
class GuardTrainer {
  public:
    GuardTrainer(DualPathModel& model, const TrainConfig& cfg, FormatMode fmt)
        : model_(model), cfg_(cfg), fmt_(fmt) {
        cfg_.validate();
        if (!model_.adapters.active) throw config_error("train: adapter set must be active for guard training");
        validate_adapter_shapes(model_.adapters, model_.config());
        for (auto& [key, ad] : model_.adapters.items) {
            if (ad.rank != cfg_.lora_rank) {
                throw config_error("train: model adapters have rank " + std::to_string(ad.rank) +
                                   " but the config says " + std::to_string(cfg_.lora_rank));
            }
            params_.push_back(&ad.a);
            params_.push_back(&ad.b);
        }
        params_.push_back(&model_.head.weight);
        optimizer_ = AdamW(AdamWConfig{cfg_.learning_rate, 0.9, 0.999, 1e-8, cfg_.weight_decay});
        pos_weights_.assign(model_.taxonomy.size(), 1.0);
    }

    void set_pos_weights(std::vector<double> w) { pos_weights_ = std::move(w); }
    const std::vector<Tensor*>& params() const { return params_; }
    std::size_t skipped_all_absent() const { return skipped_all_absent_; }

    // One optimizer step over a logical batch. Micro-batches are packed onto
    // one tape each and may run in parallel; their gradient sums reduce in
    // ascending micro-batch order. Returns the summed loss over the batch
    // (mean = sum / batch size).
    double run_logical_batch(const std::vector<const LabeledExample*>& batch, std::size_t epoch, std::size_t step) {
        if (batch.empty()) throw contract_error("train: empty logical batch");
        std::vector<Tensor> grad_acc;
        grad_acc.reserve(params_.size());
        for (Tensor* p : params_) grad_acc.emplace_back(p->shape);

        const std::size_t n_micro = (batch.size() + cfg_.micro_batch_size - 1) / cfg_.micro_batch_size;
        std::vector<std::vector<Tensor>> micro_grads(n_micro);
        std::vector<double> micro_loss(n_micro, 0.0);
        std::vector<std::size_t> micro_skipped(n_micro, 0);

        try {
            parallel_for(n_micro, [&](std::size_t m) {
                const std::size_t begin = m * cfg_.micro_batch_size;
                const std::size_t end = std::min(batch.size(), begin + cfg_.micro_batch_size);
                run_micro_batch(batch, begin, end, epoch, step, micro_grads[m], micro_loss[m], micro_skipped[m]);
            });
        } catch (const numeric_error& e) {
            throw numeric_error("train: " + std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                ", step " + std::to_string(step));
        }

        for (std::size_t m = 0; m < n_micro; ++m) {
            for (std::size_t p = 0; p < params_.size(); ++p) {
                Tensor& dst = grad_acc[p];
                const Tensor& src = micro_grads[m][p];
                for (std::size_t j = 0; j < dst.numel(); ++j) dst[j] += src[j];
            }
            micro_grads[m].clear();
            skipped_all_absent_ += micro_skipped[m];
        }

        const double inv = 1.0 / static_cast<double>(batch.size());
        double total_loss = 0.0;
        for (double l : micro_loss) total_loss += l;
        for (Tensor& g : grad_acc) {
            for (double& v : g.data) v *= inv;
        }
        optimizer_.step(params_, grad_acc);
        return total_loss;
    }

  private:
    void run_micro_batch(const std::vector<const LabeledExample*>& batch, std::size_t begin, std::size_t end,
                         std::size_t epoch, std::size_t step, std::vector<Tensor>& grads, double& loss,
                         std::size_t& skipped) const {
        const std::size_t count = end - begin;
        const std::size_t n_cat = model_.taxonomy.size();
        std::vector<std::vector<std::size_t>> seqs;
        seqs.reserve(count);
        std::vector<double> targets(count * n_cat, 0.0);
        std::vector<double> present(count * n_cat, 0.0);
        std::vector<double> weights(count * n_cat, 1.0);
        for (std::size_t i = 0; i < count; ++i) {
            const LabeledExample& ex = *batch[begin + i];
            seqs.push_back(ByteTokenizer::encode(format_example(ex, fmt_, model_.config().max_seq_len),
                                                 model_.config().max_seq_len));
            bool any_present = false;
            for (std::size_t c = 0; c < n_cat; ++c) {
                weights[i * n_cat + c] = pos_weights_[c];
                if (ex.labels[c].has_value()) {
                    present[i * n_cat + c] = 1.0;
                    targets[i * n_cat + c] = *ex.labels[c] ? 1.0 : 0.0;
                    any_present = true;
                }
            }
            if (!any_present) ++skipped;
        }
        const PackedSequences packed = PackedSequences::pack(seqs);

        // one dropout stream per example, keyed by its slot in the logical
        // batch so any micro-batch split sees identical masks
        std::vector<Rng> rng_storage;
        rng_storage.reserve(count);
        for (std::size_t i = 0; i < count; ++i) {
            rng_storage.push_back(make_stream({cfg_.seed, epoch, step, begin + i}));
        }
        ForwardOptions opt;
        opt.training = true;
        for (Rng& r : rng_storage) opt.segment_rngs.push_back(&r);

        Tape tape;
        AdapterBinding binding = bind_adapters(tape, model_.adapters, true);
        auto head_node = tape.parameter(model_.head.weight);
        const std::vector<std::size_t> pool = packed.last_rows();
        auto last = forward_features(tape, packed, model_.backbone, &binding, opt, &pool);
        auto logits = tape.matmul(last, head_node);
        auto loss_node = tape.weighted_bce(logits, targets, weights, present);
        tape.backward(loss_node);

        grads.clear();
        grads.reserve(params_.size());
        for (const auto& [key, bound] : binding) {
            grads.push_back(tape.grad(bound.a));
            grads.push_back(tape.grad(bound.b));
        }
        grads.push_back(tape.grad(head_node));
        loss = tape.value(loss_node)[0];
    }

    DualPathModel& model_;
    TrainConfig cfg_;
    FormatMode fmt_;
    std::vector<Tensor*> params_;
    std::vector<double> pos_weights_;
    AdamW optimizer_;
    std::size_t skipped_all_absent_ = 0;
};

struct TrainIO {
    std::string out_dir;               // empty -> keep everything in memory
    std::uint64_t backbone_seed = 0;   // recorded in per-epoch checkpoints
};

// Supervised fine-tuning of adapters + head. The backbone is never handed to
// the optimizer, so it is frozen by construction; tests assert byte
// identity on top of that.
inline TrainRunRecord train_guard(DualPathModel& model, const DatasetSplit& splits, const TrainConfig& cfg,
                                  FormatMode fmt = FormatMode::prompt_only, const TrainIO* io = nullptr) {
    cfg.validate();
    if (splits.train.empty()) throw config_error("train: empty training split");
    for (const std::vector<LabeledExample>* split : {&splits.train, &splits.val, &splits.test}) {
        for (const LabeledExample& ex : *split) {
            if (ex.labels.size() != model.taxonomy.size()) {
                throw config_error("train: example carries " + std::to_string(ex.labels.size()) +
                                   " label slots but the model taxonomy has " +
                                   std::to_string(model.taxonomy.size()));
            }
        }
    }

    GuardTrainer trainer(model, cfg, fmt);
    trainer.set_pos_weights(compute_pos_weights(splits.train, model.taxonomy));

    TrainRunRecord record;
    record.seed = cfg.seed;
    std::vector<std::size_t> order(splits.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng shuffle_rng = make_stream({cfg.seed, epoch, 0xf00dULL});
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t step = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.logical_batch_size) {
            const std::size_t end = std::min(order.size(), begin + cfg.logical_batch_size);
            std::vector<const LabeledExample*> batch;
            batch.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i) batch.push_back(&splits.train[order[i]]);
            ++step;
            loss_sum += trainer.run_logical_batch(batch, epoch, step);
        }

        EpochMetrics em;
        em.mean_train_loss = loss_sum / static_cast<double>(splits.train.size());
        SweepOutcome train_sweep = metric_sweep(model, splits.train, fmt, cfg.threshold);
        em.train = train_sweep.result;
        SweepOutcome val_sweep = metric_sweep(model, splits.val, fmt, cfg.threshold);
        em.val = val_sweep.result;
        em.val_selection_auprc = val_sweep.selection_auprc;
        if (!splits.test.empty()) {
            em.test = metric_sweep(model, splits.test, fmt, cfg.threshold).result;
        }
        record.epochs.push_back(em);

        if (io != nullptr && !io->out_dir.empty()) {
            // names are relative to out_dir so records stay byte-identical
            // across relocated output roots
            char name[32];
            std::snprintf(name, sizeof(name), "epoch-%03zu.ckpt", epoch);
            checkpoint_from_guard(model, io->backbone_seed).save(io->out_dir + "/" + name);
            record.checkpoint_paths.push_back(name);
        }
    }
    record.skipped_all_absent = trainer.skipped_all_absent();
    record.selected_epoch = select_checkpoint(record);
    return record;
}

// ---------------------------------------------------------------------------
// Record persistence (line-delimited, %.17g doubles for byte stability)
// ---------------------------------------------------------------------------

namespace detail {
inline std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}
}  // namespace detail

inline void write_record(std::ostream& os, const TrainRunRecord& record) {
    os << "seed " << record.seed << "\n";
    os << "selected_epoch " << record.selected_epoch << "\n";
    os << "skipped_all_absent " << record.skipped_all_absent << "\n";
    for (std::size_t i = 0; i < record.epochs.size(); ++i) {
        const EpochMetrics& em = record.epochs[i];
        const std::size_t n = i + 1;
        os << "epoch " << n << " loss " << detail::fmt_g(em.mean_train_loss) << "\n";
        auto line = [&](const char* split, const EvalResult& r) {
            os << "epoch " << n << " " << split << " " << detail::fmt_g(r.precision) << " " << detail::fmt_g(r.recall)
               << " " << detail::fmt_g(r.f1) << " " << detail::fmt_g(r.auprc) << "\n";
        };
        line("train", em.train);
        line("val", em.val);
        line("test", em.test);
        os << "epoch " << n << " selection " << detail::fmt_g(em.val_selection_auprc) << "\n";
    }
    for (std::size_t i = 0; i < record.checkpoint_paths.size(); ++i) {
        os << "checkpoint " << (i + 1) << " " << record.checkpoint_paths[i] << "\n";
    }
}

inline void save_record(const std::string& path, const TrainRunRecord& record) {
    std::ofstream os(path);
    if (!os) throw data_error("record: cannot open '" + path + "' for writing");
    write_record(os, record);
}

inline TrainRunRecord load_record(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw data_error("record: cannot open '" + path + "'");
    TrainRunRecord record;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string head;
        ls >> head;
        if (head == "seed") {
            ls >> record.seed;
        } else if (head == "selected_epoch") {
            ls >> record.selected_epoch;
        } else if (head == "skipped_all_absent") {
            ls >> record.skipped_all_absent;
        } else if (head == "epoch") {
            std::size_t n = 0;
            std::string kind;
            ls >> n >> kind;
            if (n == 0) throw data_error("record: bad epoch line in " + path);
            if (record.epochs.size() < n) record.epochs.resize(n);
            EpochMetrics& em = record.epochs[n - 1];
            if (kind == "loss") {
                ls >> em.mean_train_loss;
            } else if (kind == "selection") {
                ls >> em.val_selection_auprc;
            } else {
                EvalResult r;
                ls >> r.precision >> r.recall >> r.f1 >> r.auprc;
                if (kind == "train") em.train = r;
                else if (kind == "val") em.val = r;
                else if (kind == "test") em.test = r;
                else throw data_error("record: unknown split '" + kind + "' in " + path);
            }
        } else if (head == "checkpoint") {
            std::size_t n = 0;
            std::string p;
            ls >> n >> p;
            if (record.checkpoint_paths.size() < n) record.checkpoint_paths.resize(n);
            record.checkpoint_paths[n - 1] = p;
        } else {
            throw data_error("record: unknown line '" + head + "' in " + path);
        }
        if (!ls && !ls.eof()) throw data_error("record: malformed line in " + path);
    }
    return record;
}

}  // namespace dualpath
