#pragma once

// Single-binary command line: gen-data / train / eval / analyze. Options are
// resolved as defaults, then --config FILE, then --key value overrides in
// order; exit codes are 0 success, 2 config error, 3 data error, 4 runtime.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "cfsl/analysis.hpp"
#include "cfsl/config.hpp"
#include "cfsl/data.hpp"
#include "cfsl/eval.hpp"
#include "cfsl/model.hpp"
#include "cfsl/trainer.hpp"
#include "cfsl/util.hpp"

namespace cfsl {

struct CliOptions {
    RunConfig cfg;
    std::string out, data, run, checkpoint, which, image;
    bool no_split = false, no_er = false, no_rot = false, no_sparse = false;
};

inline const char* cli_usage() {
    return "usage: cfsl <command> [options]\n"
           "\n"
           "commands:\n"
           "  gen-data --out DIR [--config FILE] [--key value ...]\n"
           "  train    --data DIR --run DIR [--config FILE] [--no-split] [--no-er]\n"
           "           [--no-rot] [--no-sparse] [--key value ...]\n"
           "  eval     --checkpoint FILE --data DIR --out DIR [--config FILE] [--key value ...]\n"
           "  analyze  --checkpoint FILE --data DIR --out DIR --which WHICH\n"
           "           [--image FILE] [--config FILE] [--key value ...]\n"
           "\n"
           "WHICH: influence | ablate-f | ablate-w | bins | heatmap | overlap\n"
           "Any config key doubles as a flag: --epochs 10 --k_way 5 ...\n"
           "CFSL_THREADS caps feature-extraction parallelism.\n";
}

inline CliOptions parse_cli_options(const std::vector<std::string>& args, size_t begin) {
    CliOptions opts;
    for (size_t i = begin; i < args.size(); ++i) {
        if (args[i] == "--config") {
            if (i + 1 >= args.size()) throw ConfigError("cli: --config needs a file argument");
            opts.cfg = load_config(args[i + 1]);
            ++i;
        }
    }
    for (size_t i = begin; i < args.size();) {
        const std::string& a = args[i];
        if (a.rfind("--", 0) != 0) throw ConfigError("cli: expected an option, got '" + a + "'");
        const std::string key = a.substr(2);
        if (key == "no-split") { opts.no_split = true; ++i; continue; }
        if (key == "no-er") { opts.no_er = true; ++i; continue; }
        if (key == "no-rot") { opts.no_rot = true; ++i; continue; }
        if (key == "no-sparse") { opts.no_sparse = true; ++i; continue; }
        if (i + 1 >= args.size()) throw ConfigError("cli: option '" + a + "' needs a value");
        const std::string& value = args[i + 1];
        if (key == "config") {}  // applied in the first pass
        else if (key == "out") opts.out = value;
        else if (key == "data") opts.data = value;
        else if (key == "run") opts.run = value;
        else if (key == "checkpoint") opts.checkpoint = value;
        else if (key == "which") opts.which = value;
        else if (key == "image") opts.image = value;
        else apply_config_entry(opts.cfg, key, value);
        i += 2;
    }
    if (opts.no_split) opts.cfg.alpha1 = 0.0;
    if (opts.no_er) opts.cfg.alpha2 = 0.0;
    if (opts.no_rot) opts.cfg.rotation_weight = 0.0;
    if (opts.no_sparse) opts.cfg.sparseness_weight = 0.0;
    return opts;
}

namespace detail {

inline void require_option(const std::string& value, const std::string& name, const std::string& command) {
    if (value.empty()) throw ConfigError("cli: " + command + " requires " + name);
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
}

}  // namespace detail

inline int cmd_gen_data(const CliOptions& opts) {
    detail::require_option(opts.out, "--out", "gen-data");
    const SynthSpec spec = opts.cfg.synth_spec();
    const Dataset ds = generate_synthetic(spec);
    export_folder(ds, opts.out, &spec);
    std::cout << "wrote " << opts.out << ": " << ds.known_train.images.size() << " known_train, "
              << ds.known_heldout.images.size() << " known_heldout, " << ds.novel.images.size() << " novel images\n";
    return 0;
}

inline int cmd_train(CliOptions opts) {
    namespace fs = std::filesystem;
    detail::require_option(opts.data, "--data", "train");
    detail::require_option(opts.run, "--run", "train");
    const Dataset ds = load_folder(opts.data);
    fs::create_directories(opts.run);
    detail::write_text(fs::path(opts.run) / "config.txt", echo_config(opts.cfg));
    const TrainResult result = train_run(ds, opts.cfg.model_config(), opts.cfg.train_config(), opts.cfg.loss_weights(),
                                         opts.run);
    for (const EpochMetrics& em : result.log)
        std::cout << "epoch " << em.epoch << ": loss " << em.loss_total << ", train acc " << em.train_acc << '\n';
    std::cout << "wrote " << (fs::path(opts.run) / "checkpoint_final.ckpt").string() << '\n';
    return 0;
}

inline int cmd_eval(const CliOptions& opts) {
    namespace fs = std::filesystem;
    detail::require_option(opts.checkpoint, "--checkpoint", "eval");
    detail::require_option(opts.data, "--data", "eval");
    detail::require_option(opts.out, "--out", "eval");
    const ModelState m = load_checkpoint(opts.checkpoint);
    const Dataset ds = load_folder(opts.data);
    const EvalParams p = opts.cfg.eval_params();
    const EvalReport rep = evaluate(m, ds.novel, p);
    fs::create_directories(opts.out);
    write_eval_csv(rep, (fs::path(opts.out) / "eval.csv").string());
    std::ostringstream summary;
    summary << "k_way = " << p.k_way << '\n';
    summary << "n_shot = " << p.n_shot << '\n';
    summary << "n_query = " << p.n_query << '\n';
    summary << "n_episodes = " << p.n_episodes << '\n';
    summary << "mean_accuracy = " << fmt_double(rep.mean_accuracy) << '\n';
    summary << "ci95 = " << fmt_double(rep.ci95) << '\n';
    summary << "checkpoint_hash = " << detail::hex64(hash_file(opts.checkpoint)) << '\n';
    detail::write_text(fs::path(opts.out) / "summary.txt", summary.str());
    std::cout << summary.str();
    return 0;
}

inline int cmd_analyze(const CliOptions& opts) {
    namespace fs = std::filesystem;
    detail::require_option(opts.checkpoint, "--checkpoint", "analyze");
    detail::require_option(opts.data, "--data", "analyze");
    detail::require_option(opts.out, "--out", "analyze");
    detail::require_option(opts.which, "--which", "analyze");
    const std::string& which = opts.which;
    if (which != "influence" && which != "ablate-f" && which != "ablate-w" && which != "bins" && which != "heatmap" &&
        which != "overlap")
        throw ConfigError("cli: unknown analysis '" + which + "'");
    const ModelState m = load_checkpoint(opts.checkpoint);
    const Dataset ds = load_folder(opts.data);
    fs::create_directories(opts.out);
    const RunConfig& cfg = opts.cfg;

    if (which == "influence") {
        const auto per_class = indices_by_class(ds.novel);
        if (per_class.empty() || per_class[0].size() < 2)
            throw DataError("analyze influence: need at least two images of the first novel class");
        Graph g;
        const auto fs_vals = m.forward_features(g, ds.novel.images[static_cast<size_t>(per_class[0][0])]).feature.values();
        const auto fq_vals = m.forward_features(g, ds.novel.images[static_cast<size_t>(per_class[0][1])]).feature.values();
        const auto infl = influence_scores(l2_normalized(fq_vals), l2_normalized(fs_vals));
        std::ostringstream csv;
        csv << "channel,influence\n";
        for (size_t j = 0; j < infl.size(); ++j) csv << j << ',' << fmt_double(infl[j]) << '\n';
        detail::write_text(fs::path(opts.out) / "influence.csv", csv.str());
    } else if (which == "ablate-f") {
        const AblationCurve curve = topk_feature_ablation(m, ds.novel, cfg.eval_params(), cfg.ablate_ks);
        write_ablation_csv(curve, (fs::path(opts.out) / "ablate_f.csv").string());
    } else if (which == "ablate-w") {
        const AblationCurve curve = topk_weight_ablation(m, ds.known_heldout, cfg.ablate_ks);
        write_ablation_csv(curve, (fs::path(opts.out) / "ablate_w.csv").string());
    } else if (which == "bins") {
        const auto feats = extract_features(m, ds.known_train);
        const BinProfile prof = weight_activation_bins(m, ds.known_train, feats, cfg.n_bins, cfg.bin_samples,
                                                       cfg.analysis_seed);
        write_bins_csv(prof, (fs::path(opts.out) / "bins.csv").string());
    } else if (which == "heatmap") {
        Image x;
        if (!opts.image.empty()) {
            x = read_pnm(opts.image);
        } else {
            if (ds.novel.images.empty()) throw DataError("analyze heatmap: novel split is empty and no --image given");
            x = ds.novel.images[0];
        }
        const Image grid = heatmap(m, x);
        write_heatmap(grid, x.h / grid.h, (fs::path(opts.out) / "heatmap.pgm").string(),
                      (fs::path(opts.out) / "heatmap.csv").string());
    } else {
        if (m.n_classes() != ds.known_train.n_classes())
            throw DataError("analyze overlap: checkpoint has " + std::to_string(m.n_classes()) +
                            " known classes, dataset has " + std::to_string(ds.known_train.n_classes()));
        const auto per_class = indices_by_class(ds.novel);
        std::ostringstream csv;
        csv << "novel_class,known_class,n_common,channels\n";
        for (int nc = 0; nc < ds.novel.n_classes(); ++nc) {
            if (per_class[static_cast<size_t>(nc)].empty()) continue;
            Graph g;
            const auto f =
                m.forward_features(g, ds.novel.images[static_cast<size_t>(per_class[static_cast<size_t>(nc)][0])])
                    .feature.values();
            for (int kc = 0; kc < m.n_classes(); ++kc) {
                const auto common = primitive_overlap(m, f, kc, cfg.k_f, cfg.k_w);
                csv << ds.novel.class_names[static_cast<size_t>(nc)] << ','
                    << ds.known_train.class_names[static_cast<size_t>(kc)] << ',' << common.size() << ',';
                for (size_t j = 0; j < common.size(); ++j) {
                    if (j) csv << ' ';
                    csv << common[j];
                }
                csv << '\n';
            }
        }
        detail::write_text(fs::path(opts.out) / "overlap.csv", csv.str());
    }

    std::ostringstream summary;
    summary << "which = " << which << '\n';
    summary << "checkpoint_hash = " << detail::hex64(hash_file(opts.checkpoint)) << '\n';
    detail::write_text(fs::path(opts.out) / "summary.txt", summary.str());
    std::cout << "wrote " << which << " outputs to " << opts.out << '\n';
    return 0;
}

inline int run_cli(const std::vector<std::string>& args) {
    try {
        if (args.empty()) {
            std::cerr << cli_usage();
            return 2;
        }
        const std::string& command = args[0];
        const CliOptions opts = parse_cli_options(args, 1);
        if (command == "gen-data") return cmd_gen_data(opts);
        if (command == "train") return cmd_train(opts);
        if (command == "eval") return cmd_eval(opts);
        if (command == "analyze") return cmd_analyze(opts);
        std::cerr << "unknown command '" << command << "'\n" << cli_usage();
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    }
}

inline int run_cli(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.push_back(argv[i]);
    return run_cli(args);
}

}  // namespace cfsl
