#pragma once

// Mini-batch SGD training over the known_train split.
//
// Determinism contract: the epoch shuffle is drawn from a per-epoch seed, and
// every example gets its own substream seeded by (seed, epoch, dataset index)
// that covers its augmentation and self-supervision draws. Batches are
// processed sequentially and each example's backward pass accumulates into
// the shared parameter gradients, so a fixed config and dataset reproduce the
// exact same weights.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "cfsl/data.hpp"
#include "cfsl/losses.hpp"
#include "cfsl/model.hpp"
#include "cfsl/rng.hpp"
#include "cfsl/tensor.hpp"

namespace cfsl {

struct TrainConfig {
    double lr0 = 0.01;
    std::vector<int> milestones{25, 35};  // epochs whose start multiplies lr by lr_drop_factor
    double lr_drop_factor = 0.1;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    int epochs = 40;
    int batch_size = 64;
    uint64_t seed = 1;
    uint64_t perm_seed = 0;
    double flip_prob = 0.5;
    double brightness_delta = 0.2;

    void validate() const {
        if (!(lr0 > 0)) throw std::invalid_argument("TrainConfig: lr0 must be positive");
        if (!(lr_drop_factor > 0) || lr_drop_factor > 1)
            throw std::invalid_argument("TrainConfig: lr_drop_factor must be in (0, 1]");
        for (size_t i = 0; i < milestones.size(); ++i) {
            if (milestones[i] < 1) throw std::invalid_argument("TrainConfig: milestones must be positive epochs");
            if (i > 0 && milestones[i] <= milestones[i - 1])
                throw std::invalid_argument("TrainConfig: milestones must be strictly increasing");
        }
        if (momentum < 0 || momentum >= 1) throw std::invalid_argument("TrainConfig: momentum must be in [0, 1)");
        if (weight_decay < 0) throw std::invalid_argument("TrainConfig: weight_decay must be non-negative");
        if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be non-negative");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be positive");
        if (flip_prob < 0 || flip_prob > 1) throw std::invalid_argument("TrainConfig: flip_prob must be in [0, 1]");
        if (brightness_delta < 0) throw std::invalid_argument("TrainConfig: brightness_delta must be non-negative");
    }
};

struct EpochMetrics {
    int epoch = 0;
    double lr = 0, loss_total = 0, loss_cls = 0, loss_split = 0, loss_rot = 0, loss_er = 0, loss_sparse = 0, train_acc = 0;
};

struct TrainResult {
    ModelState model;
    std::vector<EpochMetrics> log;
};

// Random horizontal flip then a brightness shift in [-delta, +delta]. Both
// draws are always consumed so the rng stream shape does not depend on the
// parameter values; flip_prob 0 and delta 0 give the identity.
inline Image augment(const Image& x, double flip_prob, double brightness_delta, Rng& rng) {
    const bool flip = rng.uniform01() < flip_prob;
    const double delta = rng.uniform(-brightness_delta, brightness_delta);
    Image out = flip ? hflip(x) : x;
    return adjust_brightness(out, delta);
}

using EpochHook = std::function<void(const ModelState&, const EpochMetrics&)>;

inline TrainResult train(const Dataset& ds, const ModelConfig& model_cfg, const TrainConfig& cfg, const LossWeights& weights,
                         const EpochHook& on_epoch = nullptr) {
    cfg.validate();
    weights.validate();
    ds.validate();
    const Split& tr = ds.known_train;
    if (tr.images.empty()) throw DataError("train: known_train split is empty");
    {
        const auto per_class = indices_by_class(tr);
        for (int c = 0; c < tr.n_classes(); ++c)
            if (per_class[static_cast<size_t>(c)].empty())
                throw DataError("train: class '" + tr.class_names[static_cast<size_t>(c)] + "' has no training images");
    }

    ModelConfig mcfg = model_cfg;
    mcfg.n_classes = tr.n_classes();
    mcfg.in_channels = tr.images[0].ch;

    TrainResult result;
    result.model = ModelState::init(mcfg, cfg.seed);
    result.model.split_perms = generate_permutation_set(mcfg.h_splits * mcfg.v_splits, mcfg.m_s, cfg.perm_seed).perms;

    std::vector<Tensor> params = result.model.parameters();
    SgdNesterov opt(cfg.lr0, cfg.momentum, cfg.weight_decay);

    const int n = static_cast<int>(tr.images.size());
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (int ms : cfg.milestones)
            if (ms == epoch) opt.set_lr(opt.lr() * cfg.lr_drop_factor);

        std::vector<int> order(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
        Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        EpochMetrics em;
        em.epoch = epoch;
        em.lr = opt.lr();
        int correct = 0;

        for (int begin = 0; begin < n; begin += cfg.batch_size) {
            const int end = std::min(n, begin + cfg.batch_size);
            for (Tensor& p : params) p.zero_grad();
            for (int b = begin; b < end; ++b) {
                const int ix = order[static_cast<size_t>(b)];
                Rng ex_rng(derive_seed(cfg.seed, "example", static_cast<uint64_t>(epoch), static_cast<uint64_t>(ix)));
                const Image img = augment(tr.images[static_cast<size_t>(ix)], cfg.flip_prob, cfg.brightness_delta, ex_rng);
                Graph g;
                LossBreakdown bd;
                Tensor loss = total_loss(g, result.model, img, tr.labels[static_cast<size_t>(ix)], weights, ex_rng, bd);
                g.backward(loss);
                em.loss_total += bd.total;
                em.loss_cls += bd.cls;
                em.loss_split += bd.split;
                em.loss_rot += bd.rot;
                em.loss_er += bd.er;
                em.loss_sparse += bd.sparse;
                correct += bd.correct;
            }
            const double inv = 1.0 / (end - begin);
            for (Tensor& p : params)
                for (double& gv : p.grad()) gv *= inv;
            opt.step(params);
        }

        em.loss_total /= n;
        em.loss_cls /= n;
        em.loss_split /= n;
        em.loss_rot /= n;
        em.loss_er /= n;
        em.loss_sparse /= n;
        em.train_acc = static_cast<double>(correct) / n;
        result.log.push_back(em);
        if (on_epoch) on_epoch(result.model, em);
    }
    return result;
}

inline const char* kMetricsHeader = "epoch,lr,loss_total,loss_cls,loss_split,loss_rot,loss_er,loss_sparse,train_acc";

inline void append_metrics_row(std::ostream& out, const EpochMetrics& em) {
    out << em.epoch << ',' << fmt_double(em.lr) << ',' << fmt_double(em.loss_total) << ',' << fmt_double(em.loss_cls) << ','
        << fmt_double(em.loss_split) << ',' << fmt_double(em.loss_rot) << ',' << fmt_double(em.loss_er) << ','
        << fmt_double(em.loss_sparse) << ',' << fmt_double(em.train_acc) << '\n';
}

// Full training run with artifacts: metrics.csv, a checkpoint per epoch and
// checkpoint_final.ckpt inside run_dir.
inline TrainResult train_run(const Dataset& ds, const ModelConfig& model_cfg, const TrainConfig& cfg,
                             const LossWeights& weights, const std::string& run_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(run_dir);
    std::ofstream metrics(fs::path(run_dir) / "metrics.csv");
    if (!metrics) throw DataError("cannot write metrics under " + run_dir);
    metrics << kMetricsHeader << '\n';

    TrainResult result = train(ds, model_cfg, cfg, weights, [&](const ModelState& m, const EpochMetrics& em) {
        append_metrics_row(metrics, em);
        metrics.flush();
        char name[48];
        std::snprintf(name, sizeof(name), "checkpoint_epoch_%03d.ckpt", em.epoch);
        save_checkpoint(m, (fs::path(run_dir) / name).string());
    });

    save_checkpoint(result.model, (fs::path(run_dir) / "checkpoint_final.ckpt").string());
    return result;
}

}  // namespace cfsl
