#pragma once

// Channel-level diagnostics: per-channel influence on a cosine match, top-k
// feature and weight ablation curves, weight/activation bin profiles, spatial
// heatmaps, and the overlap between a novel sample's strongest channels and a
// known class's strongest weights.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "cfsl/data.hpp"
#include "cfsl/eval.hpp"
#include "cfsl/image.hpp"
#include "cfsl/losses.hpp"
#include "cfsl/model.hpp"
#include "cfsl/rng.hpp"
#include "cfsl/util.hpp"

namespace cfsl {

struct AblationCurve {
    std::vector<int> ks;
    std::vector<double> portions;  // Acc_k / Acc_all; NaN where k = 0 makes features unscorable
    double acc_all = 0.0;
};

struct BinProfile {
    int n_bins = 0;
    std::vector<double> w_bins;  // mean sorted-weight profile, max-normalized
    std::vector<double> f_bins;  // mean co-sorted-activation profile, max-normalized
};

// Share of the cosine match between two normalized features carried by each
// channel: influ[k] = fq[k]*fs[k] / sum_j fq[j]*fs[j]. Defined only when the
// similarity is nonzero.
inline std::vector<double> influence_scores(const std::vector<double>& fq_normalized,
                                            const std::vector<double>& fs_normalized) {
    if (fq_normalized.size() != fs_normalized.size())
        throw std::invalid_argument("influence_scores: feature dimension mismatch");
    std::vector<double> num(fq_normalized.size());
    double denom = 0.0;
    for (size_t j = 0; j < num.size(); ++j) {
        num[j] = fq_normalized[j] * fs_normalized[j];
        denom += num[j];
    }
    if (denom == 0.0) throw std::invalid_argument("influence_scores: cosine similarity is zero");
    for (double& v : num) v /= denom;
    return num;
}

inline std::vector<double> l2_normalized(const std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n == 0.0) throw std::invalid_argument("l2_normalized: zero vector");
    std::vector<double> out(v.size());
    for (size_t j = 0; j < v.size(); ++j) out[j] = v[j] / n;
    return out;
}

// Copy of a vector with only its k largest entries kept (ties to the lower
// index, matching the channel selection used in training).
inline std::vector<double> mask_top_k(const std::vector<double>& v, int k) {
    const int d = static_cast<int>(v.size());
    if (k < 0 || k > d) throw std::invalid_argument("mask_top_k: k out of range");
    std::vector<double> out(v.size(), 0.0);
    for (int j : top_k_indices(v, k)) out[static_cast<size_t>(j)] = v[static_cast<size_t>(j)];
    return out;
}

// Re-runs the episodic protocol with every cached feature truncated to its k
// strongest channels; identical episode seeds make the curves comparable.
inline AblationCurve topk_feature_ablation(const Split& novel, const std::vector<std::vector<double>>& features,
                                           const EvalParams& p, const std::vector<int>& ks) {
    const int d = features.empty() ? 0 : static_cast<int>(features[0].size());
    for (int k : ks)
        if (k < 0 || k > d) throw std::invalid_argument("topk_feature_ablation: k out of range");
    AblationCurve curve;
    curve.ks = ks;
    curve.acc_all = evaluate_features(novel, features, p).mean_accuracy;
    if (curve.acc_all == 0.0) throw std::invalid_argument("topk_feature_ablation: unablated accuracy is zero");
    for (int k : ks) {
        if (k == 0) {
            curve.portions.push_back(std::numeric_limits<double>::quiet_NaN());
            continue;
        }
        std::vector<std::vector<double>> masked(features.size());
        for (size_t i = 0; i < features.size(); ++i) masked[i] = mask_top_k(features[i], k);
        curve.portions.push_back(evaluate_features(novel, masked, p).mean_accuracy / curve.acc_all);
    }
    return curve;
}

inline AblationCurve topk_feature_ablation(const ModelState& m, const Split& novel, const EvalParams& p,
                                           const std::vector<int>& ks) {
    return topk_feature_ablation(novel, extract_features(m, novel), p, ks);
}

// Fraction of features whose best cosine match among the class weight columns
// is their own label. Zero-norm features and columns contribute similarity 0;
// argmax ties go to the lower class index.
inline double known_class_accuracy(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                                   const std::vector<std::vector<double>>& columns) {
    if (features.size() != labels.size())
        throw std::invalid_argument("known_class_accuracy: features and labels differ in length");
    if (features.empty()) throw std::invalid_argument("known_class_accuracy: no samples");
    std::vector<double> col_norm(columns.size(), 0.0);
    for (size_t c = 0; c < columns.size(); ++c) {
        double n = 0.0;
        for (double v : columns[c]) n += v * v;
        col_norm[c] = std::sqrt(n);
    }
    int correct = 0;
    for (size_t i = 0; i < features.size(); ++i) {
        const auto& f = features[i];
        double fn = 0.0;
        for (double v : f) fn += v * v;
        fn = std::sqrt(fn);
        int best = 0;
        double best_cos = -2.0;
        for (size_t c = 0; c < columns.size(); ++c) {
            double dot = 0.0;
            for (size_t j = 0; j < f.size(); ++j) dot += f[j] * columns[c][j];
            const double cos = (fn > 0.0 && col_norm[c] > 0.0) ? dot / (fn * col_norm[c]) : 0.0;
            if (cos > best_cos) {
                best_cos = cos;
                best = static_cast<int>(c);
            }
        }
        correct += best == labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(features.size());
}

// Known-class accuracy as each classifier column is truncated to its k
// largest weights.
inline AblationCurve topk_weight_ablation(const ModelState& m, const Split& heldout,
                                          const std::vector<std::vector<double>>& features,
                                          const std::vector<int>& ks) {
    const int d = m.feature_dim();
    for (int k : ks)
        if (k < 1 || k > d) throw std::invalid_argument("topk_weight_ablation: k out of range");
    std::vector<std::vector<double>> columns;
    for (int c = 0; c < m.n_classes(); ++c) columns.push_back(m.effective_column(c));
    AblationCurve curve;
    curve.ks = ks;
    curve.acc_all = known_class_accuracy(features, heldout.labels, columns);
    if (curve.acc_all == 0.0) throw std::invalid_argument("topk_weight_ablation: unablated accuracy is zero");
    for (int k : ks) {
        std::vector<std::vector<double>> masked(columns.size());
        for (size_t c = 0; c < columns.size(); ++c) masked[c] = mask_top_k(columns[c], k);
        curve.portions.push_back(known_class_accuracy(features, heldout.labels, masked) / curve.acc_all);
    }
    return curve;
}

inline AblationCurve topk_weight_ablation(const ModelState& m, const Split& heldout, const std::vector<int>& ks) {
    return topk_weight_ablation(m, heldout, extract_features(m, heldout), ks);
}

// Core of the bin profile: each sample pairs a feature with its class weight
// column; the column is sorted ascending (ties to the lower index), the
// feature is reordered by the same permutation, both are averaged over
// contiguous channel bins and over samples, and each profile is divided by
// its own maximum.
inline BinProfile bin_profile(const std::vector<const std::vector<double>*>& sample_features,
                              const std::vector<const std::vector<double>*>& sample_columns, int n_bins) {
    if (sample_features.empty() || sample_features.size() != sample_columns.size())
        throw std::invalid_argument("bin_profile: empty or mismatched sample set");
    const int d = static_cast<int>(sample_features[0]->size());
    if (n_bins < 1 || n_bins > d) throw std::invalid_argument("bin_profile: need 1 <= n_bins <= feature dim");
    const int bin_size = d / n_bins;
    BinProfile prof;
    prof.n_bins = n_bins;
    prof.w_bins.assign(static_cast<size_t>(n_bins), 0.0);
    prof.f_bins.assign(static_cast<size_t>(n_bins), 0.0);
    std::vector<int> order(static_cast<size_t>(d));
    for (size_t s = 0; s < sample_features.size(); ++s) {
        const auto& f = *sample_features[s];
        const auto& w = *sample_columns[s];
        if (static_cast<int>(f.size()) != d || static_cast<int>(w.size()) != d)
            throw std::invalid_argument("bin_profile: inconsistent feature dimensions");
        for (int j = 0; j < d; ++j) order[static_cast<size_t>(j)] = j;
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return w[static_cast<size_t>(a)] < w[static_cast<size_t>(b)]; });
        for (int b = 0; b < n_bins; ++b) {
            const int lo = b * bin_size;
            const int hi = b == n_bins - 1 ? d : lo + bin_size;
            double ws = 0.0, fs = 0.0;
            for (int j = lo; j < hi; ++j) {
                ws += w[static_cast<size_t>(order[static_cast<size_t>(j)])];
                fs += f[static_cast<size_t>(order[static_cast<size_t>(j)])];
            }
            prof.w_bins[static_cast<size_t>(b)] += ws / (hi - lo);
            prof.f_bins[static_cast<size_t>(b)] += fs / (hi - lo);
        }
    }
    const double n = static_cast<double>(sample_features.size());
    for (double& v : prof.w_bins) v /= n;
    for (double& v : prof.f_bins) v /= n;
    const auto normalize = [](std::vector<double>& bins) {
        double mx = 0.0;
        for (double v : bins) mx = std::max(mx, v);
        if (mx > 0.0)
            for (double& v : bins) v /= mx;
    };
    normalize(prof.w_bins);
    normalize(prof.f_bins);
    return prof;
}

// Bin profile over random known images (uniform over images, drawn with
// replacement) paired with their own class's weight column.
inline BinProfile weight_activation_bins(const ModelState& m, const Split& known,
                                         const std::vector<std::vector<double>>& features, int n_bins, int n_samples,
                                         uint64_t seed) {
    if (n_samples < 1) throw std::invalid_argument("weight_activation_bins: n_samples must be positive");
    if (known.images.empty()) throw std::invalid_argument("weight_activation_bins: empty sample set");
    if (features.size() != known.images.size())
        throw std::invalid_argument("weight_activation_bins: feature cache does not match the split");
    std::vector<std::vector<double>> columns;
    for (int c = 0; c < m.n_classes(); ++c) columns.push_back(m.effective_column(c));
    Rng rng(derive_seed(seed, "bins"));
    std::vector<const std::vector<double>*> fs, ws;
    for (int s = 0; s < n_samples; ++s) {
        const size_t ix = static_cast<size_t>(rng.uniform_int(known.images.size()));
        fs.push_back(&features[ix]);
        ws.push_back(&columns[static_cast<size_t>(known.labels[ix])]);
    }
    return bin_profile(fs, ws, n_bins);
}

// Weighted sum of the spatial activation map, H[p] = sum_j f[j] * A[p, j],
// min-max normalized to [0, 1]; a constant map comes back all zero.
inline Image heatmap_grid(const std::vector<double>& feature, const std::vector<double>& spatial, int h, int w) {
    const int d = static_cast<int>(feature.size());
    if (static_cast<size_t>(h) * w * d != spatial.size())
        throw std::invalid_argument("heatmap_grid: spatial map does not match feature dimension");
    Image out(h, w, 1);
    for (int p = 0; p < h * w; ++p) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += feature[static_cast<size_t>(j)] * spatial[static_cast<size_t>(p) * d + j];
        out.v[static_cast<size_t>(p)] = s;
    }
    const auto [mn_it, mx_it] = std::minmax_element(out.v.begin(), out.v.end());
    const double mn = *mn_it, mx = *mx_it;
    if (mx == mn) {
        std::fill(out.v.begin(), out.v.end(), 0.0);
        return out;
    }
    for (double& v : out.v) v = (v - mn) / (mx - mn);
    return out;
}

inline Image heatmap(const ModelState& m, const Image& x) {
    Graph g;
    const FeatureOutput fo = m.forward_features(g, x);
    const auto& shape = fo.spatial_map.shape();
    return heatmap_grid(fo.feature.values(), fo.spatial_map.values(), shape[0], shape[1]);
}

// Raw activation map of one channel, unnormalized.
inline Image heatmap_channel(const ModelState& m, const Image& x, int channel) {
    if (channel < 0 || channel >= m.feature_dim()) throw std::invalid_argument("heatmap_channel: channel out of range");
    Graph g;
    const FeatureOutput fo = m.forward_features(g, x);
    const auto& shape = fo.spatial_map.shape();
    Image out(shape[0], shape[1], 1);
    const auto& sv = fo.spatial_map.values();
    for (int p = 0; p < shape[0] * shape[1]; ++p)
        out.v[static_cast<size_t>(p)] = sv[static_cast<size_t>(p) * shape[2] + channel];
    return out;
}

inline Image upsample_nearest(const Image& x, int factor) {
    if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be positive");
    Image out(x.h * factor, x.w * factor, x.ch);
    for (int r = 0; r < out.h; ++r)
        for (int c = 0; c < out.w; ++c)
            for (int k = 0; k < x.ch; ++k) out.at(r, c, k) = x.at(r / factor, c / factor, k);
    return out;
}

// Channels that are both among the novel sample's k_f strongest activations
// and the known class's k_w strongest weights, ascending.
inline std::vector<int> primitive_overlap(const std::vector<double>& novel_feature,
                                          const std::vector<double>& class_column, int k_f, int k_w) {
    if (novel_feature.size() != class_column.size())
        throw std::invalid_argument("primitive_overlap: dimension mismatch");
    std::vector<int> tf = top_k_indices(novel_feature, k_f);
    std::vector<int> tw = top_k_indices(class_column, k_w);
    std::sort(tf.begin(), tf.end());
    std::sort(tw.begin(), tw.end());
    std::vector<int> out;
    std::set_intersection(tf.begin(), tf.end(), tw.begin(), tw.end(), std::back_inserter(out));
    return out;
}

inline std::vector<int> primitive_overlap(const ModelState& m, const std::vector<double>& novel_feature,
                                          int known_class, int k_f = 15, int k_w = 5) {
    return primitive_overlap(novel_feature, m.effective_column(known_class), k_f, k_w);
}

inline void write_ablation_csv(const AblationCurve& curve, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write ablation curve: " + path);
    out << "k,portion\n";
    for (size_t i = 0; i < curve.ks.size(); ++i)
        out << curve.ks[i] << ',' << fmt_double(curve.portions[i]) << '\n';
}

inline void write_bins_csv(const BinProfile& prof, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write bin profile: " + path);
    out << "bin,w_mean,f_mean\n";
    for (int b = 0; b < prof.n_bins; ++b)
        out << b << ',' << fmt_double(prof.w_bins[static_cast<size_t>(b)]) << ','
            << fmt_double(prof.f_bins[static_cast<size_t>(b)]) << '\n';
}

// P2 rendering (0-255, nearest upsampled) next to the raw grid values.
inline void write_heatmap(const Image& grid, int upsample_factor, const std::string& pnm_path,
                          const std::string& csv_path) {
    write_pnm(upsample_nearest(grid, upsample_factor), pnm_path);
    std::ofstream out(csv_path);
    if (!out) throw DataError("cannot write heatmap values: " + csv_path);
    out << "row,col,value\n";
    for (int r = 0; r < grid.h; ++r)
        for (int c = 0; c < grid.w; ++c) out << r << ',' << c << ',' << fmt_double(grid.at(r, c, 0)) << '\n';
}

}  // namespace cfsl
