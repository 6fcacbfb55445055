#pragma once

// Episodic few-shot evaluation. Features for the whole split are extracted
// once (optionally across threads, capped by CFSL_THREADS); episodes are then
// pure arithmetic over the cache: class prototypes are means of unnormalized
// features, queries are assigned by cosine similarity, and per-episode
// accuracies are summarized as mean with a 95% normal confidence interval.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "cfsl/data.hpp"
#include "cfsl/model.hpp"
#include "cfsl/rng.hpp"
#include "cfsl/tensor.hpp"
#include "cfsl/util.hpp"

namespace cfsl {

struct EvalParams {
    int k_way = 5;
    int n_shot = 1;
    int n_query = 15;
    int n_episodes = 600;
    uint64_t seed = 7;

    void validate() const {
        if (k_way < 2) throw std::invalid_argument("EvalParams: k_way must be at least 2");
        if (n_shot < 1 || n_query < 1) throw std::invalid_argument("EvalParams: n_shot and n_query must be positive");
        if (n_episodes < 1) throw std::invalid_argument("EvalParams: n_episodes must be positive");
    }
};

struct Episode {
    std::vector<int> class_ids;              // selected split classes, in draw order
    std::vector<std::vector<int>> support;   // per way: n_shot image indices
    std::vector<std::vector<int>> query;     // per way: n_query image indices
};

struct EvalReport {
    std::vector<double> per_episode;
    double mean_accuracy = 0.0;
    double ci95 = 0.0;
};

inline int eval_threads() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("CFSL_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end && *end == '\0' && v >= 1) return static_cast<int>(std::min<long>(v, hw));
    }
    return hw;
}

// Pooled (unnormalized) backbone features for every image of a split.
inline std::vector<std::vector<double>> extract_features(const ModelState& m, const Split& s) {
    std::vector<std::vector<double>> out(s.images.size());
    const int n_threads = std::min<int>(eval_threads(), std::max<size_t>(s.images.size(), 1));
    const auto work = [&](int t) {
        for (size_t i = static_cast<size_t>(t); i < s.images.size(); i += static_cast<size_t>(n_threads)) {
            Graph g;
            out[i] = m.forward_features(g, s.images[i]).feature.values();
        }
    };
    if (n_threads <= 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(work, t);
        for (auto& th : pool) th.join();
    }
    return out;
}

// Draws k_way distinct classes, then n_shot + n_query distinct images per
// selected class. Classes without enough images are rejected by name.
inline Episode sample_episode(const Split& s, const std::vector<std::vector<int>>& per_class, const EvalParams& p,
                              Rng& rng) {
    p.validate();
    const int n_classes = s.n_classes();
    if (n_classes < p.k_way)
        throw DataError("sample_episode: split has " + std::to_string(n_classes) + " classes, episode needs " +
                        std::to_string(p.k_way));
    Episode ep;
    ep.class_ids = rng.sample_without_replacement(n_classes, p.k_way);
    for (int cid : ep.class_ids) {
        const auto& pool = per_class[static_cast<size_t>(cid)];
        const int need = p.n_shot + p.n_query;
        if (static_cast<int>(pool.size()) < need)
            throw DataError("sample_episode: class '" + s.class_names[static_cast<size_t>(cid)] + "' has " +
                            std::to_string(pool.size()) + " images, episode needs " + std::to_string(need));
        const std::vector<int> pick = rng.sample_without_replacement(static_cast<int>(pool.size()), need);
        std::vector<int> sup, qry;
        for (int i = 0; i < p.n_shot; ++i) sup.push_back(pool[static_cast<size_t>(pick[static_cast<size_t>(i)])]);
        for (int i = p.n_shot; i < need; ++i) qry.push_back(pool[static_cast<size_t>(pick[static_cast<size_t>(i)])]);
        ep.support.push_back(std::move(sup));
        ep.query.push_back(std::move(qry));
    }
    return ep;
}

// Class prototypes: per-way mean of the unnormalized support features.
inline std::vector<std::vector<double>> compute_prototypes(const Episode& ep,
                                                           const std::vector<std::vector<double>>& features) {
    std::vector<std::vector<double>> protos;
    for (const auto& sup : ep.support) {
        std::vector<double> proto(features[static_cast<size_t>(sup[0])].size(), 0.0);
        for (int ix : sup)
            for (size_t j = 0; j < proto.size(); ++j) proto[j] += features[static_cast<size_t>(ix)][j];
        for (double& v : proto) v /= static_cast<double>(sup.size());
        protos.push_back(std::move(proto));
    }
    return protos;
}

// Softmax over cosine similarities between the query feature and each
// prototype. All-zero prototypes get similarity 0; an all-zero query or an
// all-zero prototype set cannot be scored.
inline std::vector<double> classify_query(const std::vector<double>& query,
                                          const std::vector<std::vector<double>>& prototypes) {
    double qn = 0.0;
    for (double v : query) qn += v * v;
    qn = std::sqrt(qn);
    if (qn == 0.0) throw std::invalid_argument("classify_query: query feature is all zero");
    std::vector<double> cos(prototypes.size(), 0.0);
    bool any_nonzero = false;
    for (size_t k = 0; k < prototypes.size(); ++k) {
        const auto& pr = prototypes[k];
        if (pr.size() != query.size()) throw std::invalid_argument("classify_query: feature dimension mismatch");
        double pn = 0.0, dot = 0.0;
        for (size_t j = 0; j < pr.size(); ++j) {
            pn += pr[j] * pr[j];
            dot += pr[j] * query[j];
        }
        if (pn > 0.0) {
            cos[k] = dot / (qn * std::sqrt(pn));
            any_nonzero = true;
        }
    }
    if (!any_nonzero) throw std::invalid_argument("classify_query: every prototype is all zero");
    double mx = cos[0];
    for (double v : cos) mx = std::max(mx, v);
    double se = 0.0;
    for (double v : cos) se += std::exp(v - mx);
    std::vector<double> probs(cos.size());
    for (size_t k = 0; k < cos.size(); ++k) probs[k] = std::exp(cos[k] - mx) / se;
    return probs;
}

// Mean and normal-approximation 95% confidence half-width (sample stddev,
// n - 1 denominator; a single value gets a zero interval).
inline void summarize_accuracies(const std::vector<double>& accs, double& mean, double& ci95) {
    mean = 0.0;
    for (double a : accs) mean += a;
    mean /= static_cast<double>(accs.size());
    if (accs.size() < 2) {
        ci95 = 0.0;
        return;
    }
    double ss = 0.0;
    for (double a : accs) ss += (a - mean) * (a - mean);
    const double sd = std::sqrt(ss / static_cast<double>(accs.size() - 1));
    ci95 = 1.96 * sd / std::sqrt(static_cast<double>(accs.size()));
}

inline EvalReport evaluate_features(const Split& s, const std::vector<std::vector<double>>& features,
                                    const EvalParams& p) {
    p.validate();
    if (features.size() != s.images.size())
        throw std::invalid_argument("evaluate_features: feature cache does not match the split");
    const auto per_class = indices_by_class(s);
    EvalReport rep;
    for (int e = 0; e < p.n_episodes; ++e) {
        Rng rng(derive_seed(p.seed, "episode", static_cast<uint64_t>(e)));
        const Episode ep = sample_episode(s, per_class, p, rng);
        const auto protos = compute_prototypes(ep, features);
        int correct = 0, total = 0;
        for (size_t k = 0; k < ep.query.size(); ++k)
            for (int qix : ep.query[k]) {
                const auto probs = classify_query(features[static_cast<size_t>(qix)], protos);
                int best = 0;
                for (int j = 1; j < static_cast<int>(probs.size()); ++j)
                    if (probs[static_cast<size_t>(j)] > probs[static_cast<size_t>(best)]) best = j;
                correct += best == static_cast<int>(k);
                ++total;
            }
        rep.per_episode.push_back(static_cast<double>(correct) / total);
    }
    summarize_accuracies(rep.per_episode, rep.mean_accuracy, rep.ci95);
    return rep;
}

inline EvalReport evaluate(const ModelState& m, const Split& novel, const EvalParams& p) {
    return evaluate_features(novel, extract_features(m, novel), p);
}

// Per-episode accuracies followed by one summary row.
inline void write_eval_csv(const EvalReport& rep, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write eval results: " + path);
    out << "episode,accuracy\n";
    for (size_t i = 0; i < rep.per_episode.size(); ++i) out << i << ',' << fmt_double(rep.per_episode[i]) << '\n';
    out << "mean," << fmt_double(rep.mean_accuracy) << '\n';
}

}  // namespace cfsl
