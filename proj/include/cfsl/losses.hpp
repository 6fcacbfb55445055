#pragma once

// Training losses.
//
// The composite objective is
//   total = cls + alpha1 * split + alpha2 * er + sw * sparse + rw * rot
// where cls is cosine cross-entropy over known classes, split predicts which
// of a fixed set of tile orderings an image was reassembled with, er pushes
// feature channels toward or away from the channels the ground-truth class
// column weights most, sparse is the mean per-class L1 norm of the effective
// classifier weights, and rot predicts quarter-turn rotations. Terms with
// zero weight are skipped entirely, including their random draws.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "cfsl/image.hpp"
#include "cfsl/model.hpp"
#include "cfsl/rng.hpp"
#include "cfsl/tensor.hpp"

namespace cfsl {

struct LossWeights {
    double alpha1 = 0.5;            // split-order self-supervision
    double alpha2 = 0.1;            // enlarge-reduce term
    double lambda1 = 1.0;           // enlarging factor inside the er term
    double lambda2 = 0.5;           // reducing factor inside the er term
    int d_star = 5;                 // channels treated as primary per class
    double sparseness_weight = 0.1; // mean column L1 of effective weights
    double rotation_weight = 0.5;   // rotation self-supervision

    void validate() const {
        if (alpha1 < 0 || alpha2 < 0 || lambda1 < 0 || lambda2 < 0 || sparseness_weight < 0 || rotation_weight < 0)
            throw std::invalid_argument("LossWeights: weights must be non-negative");
        if (d_star < 1) throw std::invalid_argument("LossWeights: d_star must be at least 1");
    }
};

// --- permutation sets --------------------------------------------------------

struct PermutationSet {
    std::vector<std::vector<int>> perms;  // in selection order
    int min_pairwise_hamming = 0;
};

inline int hamming_distance(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("hamming_distance: length mismatch");
    int d = 0;
    for (size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
    return d;
}

// Greedy maximum-diversity selection over all orderings of n tiles: start
// from a seeded random ordering, then repeatedly add the candidate whose
// minimum Hamming distance to the chosen set is largest, scanning candidates
// in lexicographic order so ties resolve to the lexicographically first one.
inline PermutationSet generate_permutation_set(int n, int m_s, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("generate_permutation_set: n must be positive");
    if (n > 8)
        throw std::invalid_argument("generate_permutation_set: n > 8 would enumerate " + std::to_string(n) +
                                    "! orderings; refusing");
    std::vector<std::vector<int>> all;
    {
        std::vector<int> p(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
        do {
            all.push_back(p);
        } while (std::next_permutation(p.begin(), p.end()));
    }
    const int total = static_cast<int>(all.size());
    if (m_s < 1 || m_s > total)
        throw std::invalid_argument("generate_permutation_set: m_s must be in [1, " + std::to_string(total) + "]");

    Rng rng(seed);
    const int start = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(total)));

    PermutationSet out;
    std::vector<char> chosen(static_cast<size_t>(total), 0);
    std::vector<int> min_dist(static_cast<size_t>(total), 0);
    chosen[static_cast<size_t>(start)] = 1;
    out.perms.push_back(all[static_cast<size_t>(start)]);
    for (int c = 0; c < total; ++c) min_dist[static_cast<size_t>(c)] = hamming_distance(all[static_cast<size_t>(c)], all[static_cast<size_t>(start)]);

    int overall_min = 0;
    while (static_cast<int>(out.perms.size()) < m_s) {
        int best = -1, best_d = -1;
        for (int c = 0; c < total; ++c) {
            if (chosen[static_cast<size_t>(c)]) continue;
            if (min_dist[static_cast<size_t>(c)] > best_d) {
                best_d = min_dist[static_cast<size_t>(c)];
                best = c;
            }
        }
        chosen[static_cast<size_t>(best)] = 1;
        out.perms.push_back(all[static_cast<size_t>(best)]);
        overall_min = overall_min == 0 ? best_d : std::min(overall_min, best_d);
        for (int c = 0; c < total; ++c)
            if (!chosen[static_cast<size_t>(c)])
                min_dist[static_cast<size_t>(c)] =
                    std::min(min_dist[static_cast<size_t>(c)], hamming_distance(all[static_cast<size_t>(c)], all[static_cast<size_t>(best)]));
    }
    out.min_pairwise_hamming = m_s == 1 ? 0 : overall_min;
    return out;
}

// Indices of the k largest values, ties resolved toward the lower index,
// returned in ascending index order.
inline std::vector<int> top_k_indices(const std::vector<double>& values, int k) {
    const int n = static_cast<int>(values.size());
    if (k < 0 || k > n) throw std::invalid_argument("top_k_indices: k out of range");
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
        if (values[static_cast<size_t>(a)] != values[static_cast<size_t>(b)]) return values[static_cast<size_t>(a)] > values[static_cast<size_t>(b)];
        return a < b;
    });
    order.resize(static_cast<size_t>(k));
    std::sort(order.begin(), order.end());
    return order;
}

// --- individual loss terms ---------------------------------------------------

inline Tensor classification_loss(Graph& g, Tensor logits, int label) {
    return g.softmax_cross_entropy(logits, label);
}

// Cross-entropy for predicting which ordering `perm_id` the image's tiles
// were arranged by. Tiles are cut row-major from an h x v grid and each runs
// through the full backbone. The head reads unit-norm tile features, matching
// the classifier: no objective constrains raw feature magnitude, so the heads
// work on directions.
inline Tensor split_loss(Graph& g, const Image& x, const ModelState& m, int perm_id) {
    const int h = m.h_splits, v = m.v_splits;
    if (m.n_perm_classes() == 0) throw std::invalid_argument("split_loss: model carries no split orderings");
    if (perm_id < 0 || perm_id >= m.n_perm_classes())
        throw std::invalid_argument("split_loss: ordering id " + std::to_string(perm_id) + " out of range");
    if (x.h % h != 0 || x.w % v != 0)
        throw std::invalid_argument("split_loss: image sides not divisible by the split grid");
    const int th = x.h / h, tw = x.w / v;
    std::vector<Tensor> feats;
    feats.reserve(static_cast<size_t>(h) * v);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < v; ++c)
            feats.push_back(m.forward_features(g, tile(x, r * th, c * tw, th, tw)).feature_normalized);
    Tensor logits = m.predict_permutation(g, feats, m.split_perms[static_cast<size_t>(perm_id)]);
    return g.softmax_cross_entropy(logits, perm_id);
}

// Cross-entropy for predicting a quarter-turn rotation applied to x. Like the
// split head, the rotation head reads the unit-norm feature.
inline Tensor rotation_loss(Graph& g, const Image& x, const ModelState& m, int rot_id) {
    if (rot_id < 0 || rot_id > 3) throw std::invalid_argument("rotation_loss: rotation id out of range");
    if (x.h != x.w) throw std::invalid_argument("rotation_loss: image must be square");
    FeatureOutput fo = m.forward_features(g, rotate90(x, rot_id));
    return g.softmax_cross_entropy(m.predict_rotation(g, fo.feature_normalized), rot_id);
}

// Enlarge-reduce term: with T the d_star channels weighted most by the class
// column (ties toward the lower channel),
//   er = -lambda1 * sum_{j in T} f_j + lambda2 * sum_{j not in T} f_j.
// The selection itself is treated as a constant: no gradient flows through
// which channels were picked, only through the summed feature values.
inline Tensor er_loss(Graph& g, Tensor feature, const std::vector<double>& w_column, double lambda1, double lambda2,
                      int d_star) {
    if (feature.rank() != 1) throw std::invalid_argument("er_loss: feature must be rank 1");
    const int d = feature.shape()[0];
    if (static_cast<int>(w_column.size()) != d)
        throw std::invalid_argument("er_loss: weight column length does not match feature dimension");
    if (d_star < 1 || d_star > d) throw std::invalid_argument("er_loss: d_star must be in [1, feature_dim]");
    if (lambda1 < 0 || lambda2 < 0) throw std::invalid_argument("er_loss: factors must be non-negative");

    const std::vector<int> top = top_k_indices(w_column, d_star);
    g.note_discrete_indices(top);
    std::vector<char> in_top(static_cast<size_t>(d), 0);
    for (int ix : top) in_top[static_cast<size_t>(ix)] = 1;
    std::vector<int> rest;
    rest.reserve(static_cast<size_t>(d - d_star));
    for (int j = 0; j < d; ++j)
        if (!in_top[static_cast<size_t>(j)]) rest.push_back(j);

    Tensor enlarging = g.scale(g.masked_sum(feature, top), -lambda1);
    Tensor reducing = g.scale(g.masked_sum(feature, rest), lambda2);
    return g.add(enlarging, reducing);
}

// Mean L1 norm of the effective (non-negative) classifier columns:
// (1/M) * sum_i ||W_:,i||_1 = sum(|W_raw|) / M.
inline Tensor sparseness_loss(Graph& g, const ModelState& m) {
    return g.scale(g.sum(g.abs(m.classifier_w_raw)), 1.0 / m.n_classes());
}

// --- composite objective -----------------------------------------------------

struct LossBreakdown {
    double total = 0, cls = 0, split = 0, rot = 0, er = 0, sparse = 0;
    bool correct = false;
};

inline int argmax_lowest(const std::vector<double>& v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) best = i;
    return best;
}

// Builds the full training loss for one example. rng supplies the ordering id
// and the rotation id, drawn in that order; disabled terms draw nothing.
// The returned tensor is the weighted total; `bd` reports the raw
// (unweighted) value of every term.
inline Tensor total_loss(Graph& g, const ModelState& m, const Image& x, int label, const LossWeights& w, Rng& rng,
                         LossBreakdown& bd) {
    w.validate();
    FeatureOutput fo = m.forward_features(g, x);
    Tensor logits = m.classify_known(g, fo.feature_normalized);
    Tensor total = classification_loss(g, logits, label);
    bd = LossBreakdown{};
    bd.cls = total.item();
    bd.correct = argmax_lowest(logits.values()) == label;

    if (w.alpha1 > 0) {
        if (m.n_perm_classes() == 0)
            throw std::invalid_argument("total_loss: split term enabled but model carries no split orderings");
        const int perm_id = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(m.n_perm_classes())));
        Tensor ls = split_loss(g, x, m, perm_id);
        bd.split = ls.item();
        total = g.add(total, g.scale(ls, w.alpha1));
    }
    if (w.alpha2 > 0) {
        // Enlarging and reducing act on the unit-norm feature for the same
        // reason the heads read it: only the direction reaches the classifier,
        // and a raw-scale objective is unbounded under this backbone.
        Tensor ler = er_loss(g, fo.feature_normalized, m.effective_column(label), w.lambda1, w.lambda2, w.d_star);
        bd.er = ler.item();
        total = g.add(total, g.scale(ler, w.alpha2));
    }
    if (w.sparseness_weight > 0) {
        Tensor lsp = sparseness_loss(g, m);
        bd.sparse = lsp.item();
        total = g.add(total, g.scale(lsp, w.sparseness_weight));
    }
    if (w.rotation_weight > 0) {
        const int rot_id = static_cast<int>(rng.uniform_int(4));
        Tensor lr = rotation_loss(g, x, m, rot_id);
        bd.rot = lr.item();
        total = g.add(total, g.scale(lr, w.rotation_weight));
    }
    bd.total = total.item();
    return total;
}

}  // namespace cfsl
