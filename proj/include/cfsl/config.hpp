#pragma once

// Flat key=value run configuration covering dataset generation, model shape,
// training, evaluation, and analysis. Every key has a default; unknown keys
// are rejected; the resolved config can be echoed back out in schema order.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cfsl/data.hpp"
#include "cfsl/eval.hpp"
#include "cfsl/losses.hpp"
#include "cfsl/model.hpp"
#include "cfsl/trainer.hpp"
#include "cfsl/util.hpp"

namespace cfsl {

struct RunConfig {
    // dataset generation
    int n_parts = 12;
    int parts_per_class = 3;
    int n_known = 20;
    int n_novel = 10;
    int images_per_class = 50;
    int image_size = 32;
    double noise_std = 0.05;
    int jitter_px = 2;
    double intensity_jitter = 0.2;
    uint64_t data_seed = 1;
    // model
    int feature_dim = 64;
    double tau = 30.0;
    int splits_h = 2;
    int splits_v = 2;
    int m_s = 24;
    uint64_t perm_seed = 0;
    // training
    double lr0 = 0.01;
    double lr_drop_factor = 0.1;
    std::vector<int> milestones{25, 35};
    double momentum = 0.9;
    double weight_decay = 0.0005;
    int epochs = 40;
    int batch_size = 64;
    uint64_t seed = 1;
    double flip_prob = 0.5;
    double brightness_delta = 0.2;
    // loss weights
    double alpha1 = 0.5;
    double alpha2 = 0.1;
    double lambda1 = 1.0;
    double lambda2 = 0.5;
    int d_star = 5;
    double sparseness_weight = 0.1;
    double rotation_weight = 0.5;
    // evaluation
    int k_way = 5;
    int n_shot = 1;
    int n_query = 15;
    int n_episodes = 600;
    uint64_t eval_seed = 7;
    // analysis
    int n_bins = 32;
    int bin_samples = 1000;
    int k_f = 15;
    int k_w = 5;
    std::vector<int> ablate_ks{1, 2, 4, 8, 12, 16, 24, 32, 48, 64};
    uint64_t analysis_seed = 9;

    SynthSpec synth_spec() const {
        SynthSpec s;
        s.n_parts = n_parts;
        s.parts_per_class = parts_per_class;
        s.n_known = n_known;
        s.n_novel = n_novel;
        s.images_per_class = images_per_class;
        s.image_size = image_size;
        s.noise_std = noise_std;
        s.jitter_px = jitter_px;
        s.intensity_jitter = intensity_jitter;
        s.seed = data_seed;
        return s;
    }

    ModelConfig model_config() const {
        ModelConfig m;
        m.feature_dim = feature_dim;
        m.tau = tau;
        m.h_splits = splits_h;
        m.v_splits = splits_v;
        m.m_s = m_s;
        return m;
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.lr0 = lr0;
        t.lr_drop_factor = lr_drop_factor;
        t.milestones = milestones;
        t.momentum = momentum;
        t.weight_decay = weight_decay;
        t.epochs = epochs;
        t.batch_size = batch_size;
        t.seed = seed;
        t.perm_seed = perm_seed;
        t.flip_prob = flip_prob;
        t.brightness_delta = brightness_delta;
        return t;
    }

    LossWeights loss_weights() const {
        LossWeights w;
        w.alpha1 = alpha1;
        w.alpha2 = alpha2;
        w.lambda1 = lambda1;
        w.lambda2 = lambda2;
        w.d_star = d_star;
        w.sparseness_weight = sparseness_weight;
        w.rotation_weight = rotation_weight;
        return w;
    }

    EvalParams eval_params() const {
        EvalParams p;
        p.k_way = k_way;
        p.n_shot = n_shot;
        p.n_query = n_query;
        p.n_episodes = n_episodes;
        p.seed = eval_seed;
        return p;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline int config_int(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const int v = std::stoi(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' needs an integer, got '" + value + "'");
    }
}

inline double config_double(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' needs a number, got '" + value + "'");
    }
}

inline uint64_t config_u64(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const unsigned long long v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return static_cast<uint64_t>(v);
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' needs a non-negative integer, got '" + value + "'");
    }
}

inline std::vector<int> config_int_list(const std::string& key, const std::string& value) {
    std::vector<int> out;
    std::string tok;
    std::istringstream in(value);
    while (std::getline(in, tok, ',')) out.push_back(config_int(key, trim(tok)));
    if (out.empty()) throw ConfigError("config: key '" + key + "' needs a comma-separated integer list");
    return out;
}

inline std::string int_list_str(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

}  // namespace detail

inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    using detail::config_double;
    using detail::config_int;
    using detail::config_int_list;
    using detail::config_u64;
    if (key == "n_parts") cfg.n_parts = config_int(key, value);
    else if (key == "parts_per_class") cfg.parts_per_class = config_int(key, value);
    else if (key == "n_known") cfg.n_known = config_int(key, value);
    else if (key == "n_novel") cfg.n_novel = config_int(key, value);
    else if (key == "images_per_class") cfg.images_per_class = config_int(key, value);
    else if (key == "image_size") cfg.image_size = config_int(key, value);
    else if (key == "noise_std") cfg.noise_std = config_double(key, value);
    else if (key == "jitter_px") cfg.jitter_px = config_int(key, value);
    else if (key == "intensity_jitter") cfg.intensity_jitter = config_double(key, value);
    else if (key == "data_seed") cfg.data_seed = config_u64(key, value);
    else if (key == "feature_dim") cfg.feature_dim = config_int(key, value);
    else if (key == "tau") cfg.tau = config_double(key, value);
    else if (key == "splits_h") cfg.splits_h = config_int(key, value);
    else if (key == "splits_v") cfg.splits_v = config_int(key, value);
    else if (key == "m_s") cfg.m_s = config_int(key, value);
    else if (key == "perm_seed") cfg.perm_seed = config_u64(key, value);
    else if (key == "lr0") cfg.lr0 = config_double(key, value);
    else if (key == "lr_drop_factor") cfg.lr_drop_factor = config_double(key, value);
    else if (key == "milestones") cfg.milestones = config_int_list(key, value);
    else if (key == "momentum") cfg.momentum = config_double(key, value);
    else if (key == "weight_decay") cfg.weight_decay = config_double(key, value);
    else if (key == "epochs") cfg.epochs = config_int(key, value);
    else if (key == "batch_size") cfg.batch_size = config_int(key, value);
    else if (key == "seed") cfg.seed = config_u64(key, value);
    else if (key == "flip_prob") cfg.flip_prob = config_double(key, value);
    else if (key == "brightness_delta") cfg.brightness_delta = config_double(key, value);
    else if (key == "alpha1") cfg.alpha1 = config_double(key, value);
    else if (key == "alpha2") cfg.alpha2 = config_double(key, value);
    else if (key == "lambda1") cfg.lambda1 = config_double(key, value);
    else if (key == "lambda2") cfg.lambda2 = config_double(key, value);
    else if (key == "d_star") cfg.d_star = config_int(key, value);
    else if (key == "sparseness_weight") cfg.sparseness_weight = config_double(key, value);
    else if (key == "rotation_weight") cfg.rotation_weight = config_double(key, value);
    else if (key == "k_way") cfg.k_way = config_int(key, value);
    else if (key == "n_shot") cfg.n_shot = config_int(key, value);
    else if (key == "n_query") cfg.n_query = config_int(key, value);
    else if (key == "n_episodes") cfg.n_episodes = config_int(key, value);
    else if (key == "eval_seed") cfg.eval_seed = config_u64(key, value);
    else if (key == "n_bins") cfg.n_bins = config_int(key, value);
    else if (key == "bin_samples") cfg.bin_samples = config_int(key, value);
    else if (key == "k_f") cfg.k_f = config_int(key, value);
    else if (key == "k_w") cfg.k_w = config_int(key, value);
    else if (key == "ablate_ks") cfg.ablate_ks = config_int_list(key, value);
    else if (key == "analysis_seed") cfg.analysis_seed = config_u64(key, value);
    else throw ConfigError("config: unknown key '" + key + "'");
}

// key = value lines; '#' starts a comment, blanks are skipped.
inline void parse_config_stream(RunConfig& cfg, std::istream& in, const std::string& origin) {
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: expected key=value at " + origin + ":" + std::to_string(lineno));
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config: empty key at " + origin + ":" + std::to_string(lineno));
        apply_config_entry(cfg, key, value);
    }
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    RunConfig cfg;
    parse_config_stream(cfg, in, path);
    return cfg;
}

// Every key in schema order, suitable for reparsing.
inline std::string echo_config(const RunConfig& c) {
    std::ostringstream out;
    out << "n_parts = " << c.n_parts << '\n';
    out << "parts_per_class = " << c.parts_per_class << '\n';
    out << "n_known = " << c.n_known << '\n';
    out << "n_novel = " << c.n_novel << '\n';
    out << "images_per_class = " << c.images_per_class << '\n';
    out << "image_size = " << c.image_size << '\n';
    out << "noise_std = " << fmt_double(c.noise_std) << '\n';
    out << "jitter_px = " << c.jitter_px << '\n';
    out << "intensity_jitter = " << fmt_double(c.intensity_jitter) << '\n';
    out << "data_seed = " << c.data_seed << '\n';
    out << "feature_dim = " << c.feature_dim << '\n';
    out << "tau = " << fmt_double(c.tau) << '\n';
    out << "splits_h = " << c.splits_h << '\n';
    out << "splits_v = " << c.splits_v << '\n';
    out << "m_s = " << c.m_s << '\n';
    out << "perm_seed = " << c.perm_seed << '\n';
    out << "lr0 = " << fmt_double(c.lr0) << '\n';
    out << "lr_drop_factor = " << fmt_double(c.lr_drop_factor) << '\n';
    out << "milestones = " << detail::int_list_str(c.milestones) << '\n';
    out << "momentum = " << fmt_double(c.momentum) << '\n';
    out << "weight_decay = " << fmt_double(c.weight_decay) << '\n';
    out << "epochs = " << c.epochs << '\n';
    out << "batch_size = " << c.batch_size << '\n';
    out << "seed = " << c.seed << '\n';
    out << "flip_prob = " << fmt_double(c.flip_prob) << '\n';
    out << "brightness_delta = " << fmt_double(c.brightness_delta) << '\n';
    out << "alpha1 = " << fmt_double(c.alpha1) << '\n';
    out << "alpha2 = " << fmt_double(c.alpha2) << '\n';
    out << "lambda1 = " << fmt_double(c.lambda1) << '\n';
    out << "lambda2 = " << fmt_double(c.lambda2) << '\n';
    out << "d_star = " << c.d_star << '\n';
    out << "sparseness_weight = " << fmt_double(c.sparseness_weight) << '\n';
    out << "rotation_weight = " << fmt_double(c.rotation_weight) << '\n';
    out << "k_way = " << c.k_way << '\n';
    out << "n_shot = " << c.n_shot << '\n';
    out << "n_query = " << c.n_query << '\n';
    out << "n_episodes = " << c.n_episodes << '\n';
    out << "eval_seed = " << c.eval_seed << '\n';
    out << "n_bins = " << c.n_bins << '\n';
    out << "bin_samples = " << c.bin_samples << '\n';
    out << "k_f = " << c.k_f << '\n';
    out << "k_w = " << c.k_w << '\n';
    out << "ablate_ks = " << detail::int_list_str(c.ablate_ks) << '\n';
    out << "analysis_seed = " << c.analysis_seed << '\n';
    return out.str();
}

}  // namespace cfsl
