#pragma once

// The recognition model: a four-block convolutional backbone feeding a
// bias-free cosine classifier, plus two linear self-supervision heads that
// read the pooled feature (one over concatenated tile features for
// split-order prediction, one for rotation prediction).
//
// The classifier never sees raw weights: logits use abs(W_raw), normalized
// per class column, so effective classifier weights are non-negative by
// construction.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cfsl/image.hpp"
#include "cfsl/rng.hpp"
#include "cfsl/tensor.hpp"
#include "cfsl/util.hpp"

namespace cfsl {

struct ModelConfig {
    int in_channels = 1;
    int feature_dim = 64;
    int n_classes = 0;
    int h_splits = 2;
    int v_splits = 2;
    int m_s = 24;  // number of split orderings the permutation head predicts over
    double tau = 30.0;
};

struct FeatureOutput {
    Tensor spatial_map;         // [h', w', D] activation map after the last block
    Tensor feature;             // [D] pooled feature, unnormalized
    Tensor feature_normalized;  // [D] unit-norm feature
};

struct ModelState {
    std::vector<Tensor> conv;  // four [3,3,ci,co] kernels
    Tensor classifier_w_raw;   // [D, M]
    Tensor perm_head;          // [h*v*D, m_s]
    Tensor rot_head;           // [D, 4]
    double tau = 30.0;
    int h_splits = 2, v_splits = 2;
    std::vector<std::vector<int>> split_perms;  // orderings the permutation head indexes over

    static ModelState init(const ModelConfig& cfg, uint64_t seed) {
        if (cfg.n_classes < 1) throw std::invalid_argument("ModelState::init: n_classes must be positive");
        if (cfg.in_channels < 1 || cfg.feature_dim < 1) throw std::invalid_argument("ModelState::init: bad dimensions");
        if (cfg.h_splits < 1 || cfg.v_splits < 1) throw std::invalid_argument("ModelState::init: bad split grid");
        if (cfg.m_s < 1) throw std::invalid_argument("ModelState::init: m_s must be positive");
        if (!(cfg.tau > 0.0)) throw std::invalid_argument("ModelState::init: tau must be positive");

        Rng rng(derive_seed(seed, "model-init"));
        const auto glorot = [&rng](std::vector<int> shape, int fan_in, int fan_out) {
            const double limit = std::sqrt(6.0 / (fan_in + fan_out));
            Tensor t = Tensor::zeros(std::move(shape));
            for (double& v : t.values()) v = rng.uniform(-limit, limit);
            t.set_grad_enabled(true);
            return t;
        };

        ModelState m;
        const int widths[5] = {cfg.in_channels, 16, 32, 64, cfg.feature_dim};
        for (int b = 0; b < 4; ++b)
            m.conv.push_back(glorot({3, 3, widths[b], widths[b + 1]}, 9 * widths[b], 9 * widths[b + 1]));
        m.classifier_w_raw = glorot({cfg.feature_dim, cfg.n_classes}, cfg.feature_dim, cfg.n_classes);
        const int concat_dim = cfg.h_splits * cfg.v_splits * cfg.feature_dim;
        m.perm_head = glorot({concat_dim, cfg.m_s}, concat_dim, cfg.m_s);
        m.rot_head = glorot({cfg.feature_dim, 4}, cfg.feature_dim, 4);
        m.tau = cfg.tau;
        m.h_splits = cfg.h_splits;
        m.v_splits = cfg.v_splits;
        return m;
    }

    int feature_dim() const { return classifier_w_raw.shape()[0]; }
    int n_classes() const { return classifier_w_raw.shape()[1]; }
    int in_channels() const { return conv[0].shape()[2]; }
    int n_perm_classes() const { return static_cast<int>(split_perms.size()); }

    std::vector<Tensor> parameters() {
        std::vector<Tensor> p(conv.begin(), conv.end());
        p.push_back(classifier_w_raw);
        p.push_back(perm_head);
        p.push_back(rot_head);
        return p;
    }

    // abs(W_raw), flat [D * M] row-major: the weights the classifier acts with.
    std::vector<double> effective_weights() const {
        std::vector<double> w = classifier_w_raw.values();
        for (double& x : w) x = std::fabs(x);
        return w;
    }

    // abs(W_raw) column for one class, length D.
    std::vector<double> effective_column(int cls) const {
        const int d = feature_dim(), m = n_classes();
        if (cls < 0 || cls >= m) throw std::invalid_argument("effective_column: class out of range");
        std::vector<double> col(static_cast<size_t>(d));
        for (int j = 0; j < d; ++j) col[static_cast<size_t>(j)] = std::fabs(classifier_w_raw.values()[static_cast<size_t>(j) * m + cls]);
        return col;
    }

    FeatureOutput forward_features(Graph& g, const Image& x) const {
        if (x.ch != in_channels())
            throw std::invalid_argument("forward_features: image has " + std::to_string(x.ch) + " channels, model expects " +
                                        std::to_string(in_channels()));
        if (x.h % 16 != 0 || x.w % 16 != 0 || x.h == 0 || x.w == 0)
            throw std::invalid_argument("forward_features: image sides must be positive multiples of 16");
        Tensor h = Tensor::from_values({x.h, x.w, x.ch}, x.v);
        for (const Tensor& k : conv) h = g.avg_pool2(g.relu(g.conv2d(h, k)));
        FeatureOutput out;
        out.spatial_map = h;
        out.feature = g.global_avg_pool(h);
        out.feature_normalized = g.l2_normalize(out.feature);
        return out;
    }

    // Cosine logits over known classes, scaled by tau.
    Tensor classify_known(Graph& g, Tensor feature_normalized) const {
        Tensor w_cols = g.l2_normalize(g.abs(classifier_w_raw));
        return g.scale(g.matmul(feature_normalized, w_cols), tau);
    }

    // Logits over split orderings for unit-norm tile features arranged by
    // `perm`: position i of the concatenated feature holds the feature of
    // tile perm[i].
    Tensor predict_permutation(Graph& g, const std::vector<Tensor>& tile_features, const std::vector<int>& perm) const {
        const size_t n = static_cast<size_t>(h_splits) * static_cast<size_t>(v_splits);
        if (tile_features.size() != n)
            throw std::invalid_argument("predict_permutation: expected " + std::to_string(n) + " tile features");
        if (perm.size() != n) throw std::invalid_argument("predict_permutation: ordering has wrong length");
        std::vector<char> seen(n, 0);
        for (int p : perm) {
            if (p < 0 || static_cast<size_t>(p) >= n || seen[static_cast<size_t>(p)])
                throw std::invalid_argument("predict_permutation: ordering is not a bijection");
            seen[static_cast<size_t>(p)] = 1;
        }
        std::vector<Tensor> ordered(n);
        for (size_t i = 0; i < n; ++i) ordered[i] = tile_features[static_cast<size_t>(perm[i])];
        return g.matmul(g.concat(ordered), perm_head);
    }

    // Logits over the four quarter-turns for a unit-norm feature.
    Tensor predict_rotation(Graph& g, Tensor feature) const { return g.matmul(feature, rot_head); }
};

// --- checkpoint serialization ------------------------------------------------
//
// Binary layout: the magic "CFSL1\n", then one record per tensor:
//   u32 name length, name bytes, u32 rank, rank x u64 dims,
//   prod(dims) x f64 values (row-major), all little-endian.
// The tensor list and order are fixed, so identical states produce
// byte-identical files.

namespace detail {

inline void put_u32(std::ostream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ostream& out, uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

inline uint32_t get_u32(std::istream& in, const std::string& path) {
    uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) throw DataError("truncated checkpoint: " + path);
    return v;
}

inline uint64_t get_u64(std::istream& in, const std::string& path) {
    uint64_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 8)) throw DataError("truncated checkpoint: " + path);
    return v;
}

inline void write_record(std::ostream& out, const std::string& name, const std::vector<int>& shape,
                         const std::vector<double>& values) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<uint32_t>(shape.size()));
    for (int d : shape) put_u64(out, static_cast<uint64_t>(d));
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
}

struct RawRecord {
    std::vector<int> shape;
    std::vector<double> values;
};

}  // namespace detail

inline void save_checkpoint(const ModelState& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path);
    out.write("CFSL1\n", 6);
    for (size_t b = 0; b < m.conv.size(); ++b)
        detail::write_record(out, "backbone.conv" + std::to_string(b), m.conv[b].shape(), m.conv[b].values());
    detail::write_record(out, "classifier.W_raw", m.classifier_w_raw.shape(), m.classifier_w_raw.values());
    detail::write_record(out, "classifier.tau", {}, {m.tau});
    detail::write_record(out, "split.head", m.perm_head.shape(), m.perm_head.values());
    detail::write_record(out, "rot.head", m.rot_head.shape(), m.rot_head.values());
    {
        const int n_perm = m.n_perm_classes();
        const int plen = m.h_splits * m.v_splits;
        std::vector<double> flat;
        flat.reserve(static_cast<size_t>(n_perm) * plen);
        for (const auto& p : m.split_perms) {
            if (static_cast<int>(p.size()) != plen) throw DataError("save_checkpoint: malformed split ordering");
            for (int v : p) flat.push_back(static_cast<double>(v));
        }
        if (n_perm > 0)
            detail::write_record(out, "split.perms", {n_perm, plen}, flat);
        else
            detail::write_record(out, "split.perms", {}, {0.0});
        detail::write_record(out, "split.grid", {2},
                             {static_cast<double>(m.h_splits), static_cast<double>(m.v_splits)});
    }
    if (!out) throw DataError("checkpoint write failed: " + path);
}

inline ModelState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[6];
    if (!in.read(magic, 6) || std::memcmp(magic, "CFSL1\n", 6) != 0)
        throw DataError("invalid checkpoint magic in " + path);

    std::map<std::string, detail::RawRecord> records;
    while (true) {
        in.peek();
        if (in.eof()) break;
        const uint32_t name_len = detail::get_u32(in, path);
        if (name_len > 256) throw DataError("corrupt checkpoint record name in " + path);
        std::string name(name_len, '\0');
        if (!in.read(name.data(), name_len)) throw DataError("truncated checkpoint: " + path);
        const uint32_t rank = detail::get_u32(in, path);
        if (rank > 8) throw DataError("corrupt checkpoint record rank in " + path);
        detail::RawRecord rec;
        size_t numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            const uint64_t d = detail::get_u64(in, path);
            if (d == 0 || d > (1u << 24)) throw DataError("corrupt checkpoint dimension in " + path);
            rec.shape.push_back(static_cast<int>(d));
            numel *= d;
        }
        rec.values.resize(numel);
        if (!in.read(reinterpret_cast<char*>(rec.values.data()), static_cast<std::streamsize>(numel * sizeof(double))))
            throw DataError("truncated checkpoint: " + path);
        records[name] = std::move(rec);
    }

    const auto take = [&](const std::string& name) -> detail::RawRecord& {
        auto it = records.find(name);
        if (it == records.end()) throw DataError("checkpoint missing tensor '" + name + "' in " + path);
        return it->second;
    };

    ModelState m;
    for (int b = 0; b < 4; ++b) {
        auto& r = take("backbone.conv" + std::to_string(b));
        if (r.shape.size() != 4) throw DataError("checkpoint conv kernel has wrong rank in " + path);
        m.conv.push_back(Tensor::from_values(r.shape, std::move(r.values)));
        m.conv.back().set_grad_enabled(true);
    }
    for (int b = 1; b < 4; ++b)
        if (m.conv[static_cast<size_t>(b)].shape()[2] != m.conv[static_cast<size_t>(b - 1)].shape()[3])
            throw DataError("checkpoint conv channel chain is inconsistent in " + path);

    auto& w = take("classifier.W_raw");
    if (w.shape.size() != 2 || w.shape[0] != m.conv[3].shape()[3])
        throw DataError("checkpoint classifier shape is inconsistent in " + path);
    m.classifier_w_raw = Tensor::from_values(w.shape, std::move(w.values));
    m.classifier_w_raw.set_grad_enabled(true);

    auto& tau = take("classifier.tau");
    if (tau.values.size() != 1 || !(tau.values[0] > 0.0)) throw DataError("checkpoint tau is invalid in " + path);
    m.tau = tau.values[0];

    auto& grid = take("split.grid");
    if (grid.values.size() != 2) throw DataError("checkpoint split grid is invalid in " + path);
    m.h_splits = static_cast<int>(grid.values[0]);
    m.v_splits = static_cast<int>(grid.values[1]);
    if (m.h_splits < 1 || m.v_splits < 1) throw DataError("checkpoint split grid is invalid in " + path);

    auto& perms = take("split.perms");
    if (perms.shape.size() == 2) {
        const int n = perms.shape[0], plen = perms.shape[1];
        if (plen != m.h_splits * m.v_splits) throw DataError("checkpoint split orderings disagree with grid in " + path);
        for (int i = 0; i < n; ++i) {
            std::vector<int> p(static_cast<size_t>(plen));
            for (int j = 0; j < plen; ++j)
                p[static_cast<size_t>(j)] = static_cast<int>(perms.values[static_cast<size_t>(i) * plen + j]);
            m.split_perms.push_back(std::move(p));
        }
    }

    const int d = m.feature_dim();
    auto& ph = take("split.head");
    if (ph.shape.size() != 2 || ph.shape[0] != m.h_splits * m.v_splits * d)
        throw DataError("checkpoint split head shape is inconsistent in " + path);
    m.perm_head = Tensor::from_values(ph.shape, std::move(ph.values));
    m.perm_head.set_grad_enabled(true);

    auto& rh = take("rot.head");
    if (rh.shape.size() != 2 || rh.shape[0] != d || rh.shape[1] != 4)
        throw DataError("checkpoint rotation head shape is inconsistent in " + path);
    m.rot_head = Tensor::from_values(rh.shape, std::move(rh.values));
    m.rot_head.set_grad_enabled(true);

    return m;
}

}  // namespace cfsl
