#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "cfsl/cli.hpp"
#include "cfsl/config.hpp"

using namespace cfsl;
namespace fs = std::filesystem;

namespace {

struct TempCliDir {
    fs::path path;
    explicit TempCliDir(const std::string& name) : path(fs::path("test_tmp") / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempCliDir() { fs::remove_all(path); }
};

int run_capture(const std::vector<std::string>& args, std::string* out = nullptr, std::string* err = nullptr) {
    std::ostringstream out_buf, err_buf;
    std::streambuf* old_out = std::cout.rdbuf(out_buf.rdbuf());
    std::streambuf* old_err = std::cerr.rdbuf(err_buf.rdbuf());
    const int code = run_cli(args);
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    if (out) *out = out_buf.str();
    if (err) *err = err_buf.str();
    return code;
}

// Relative path -> content hash for every regular file under root.
std::map<std::string, uint64_t> tree_hashes(const fs::path& root) {
    std::map<std::string, uint64_t> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = hash_file(e.path().string());
    return out;
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const std::vector<std::string> kTinyData = {"--n_parts", "6",  "--n_known",          "3", "--n_novel", "2",
                                            "--images_per_class", "4", "--data_seed", "5"};
const std::vector<std::string> kTinyTrain = {"--feature_dim", "16", "--epochs", "1", "--batch_size", "8",
                                             "--d_star", "4", "--milestones", "25,35"};

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

}  // namespace

TEST_CASE("config echo covers every key and reparses to itself") {
    const RunConfig defaults;
    const std::string echoed = echo_config(defaults);
    REQUIRE(echoed.find("epochs = 40") != std::string::npos);
    REQUIRE(echoed.find("milestones = 25,35") != std::string::npos);
    REQUIRE(echoed.find("ablate_ks = 1,2,4,8,12,16,24,32,48,64") != std::string::npos);
    REQUIRE(echoed.find("sparseness_weight = 0.1") != std::string::npos);

    RunConfig reparsed;
    std::istringstream in(echoed);
    parse_config_stream(reparsed, in, "echo");
    REQUIRE(echo_config(reparsed) == echoed);
}

TEST_CASE("config files accept comments and reject junk") {
    TempCliDir tmp("cli_config");
    const fs::path good = tmp.path / "good.cfg";
    std::ofstream(good) << "# comment\n  epochs = 3  \n\nk_way=2 # trailing\nmilestones = 1,2\n";
    const RunConfig cfg = load_config(good.string());
    REQUIRE(cfg.epochs == 3);
    REQUIRE(cfg.k_way == 2);
    REQUIRE(cfg.milestones == std::vector<int>{1, 2});

    const fs::path bad_key = tmp.path / "bad_key.cfg";
    std::ofstream(bad_key) << "not_a_key = 1\n";
    REQUIRE_THROWS_AS(load_config(bad_key.string()), ConfigError);

    const fs::path bad_val = tmp.path / "bad_val.cfg";
    std::ofstream(bad_val) << "epochs = soon\n";
    REQUIRE_THROWS_AS(load_config(bad_val.string()), ConfigError);

    const fs::path bad_line = tmp.path / "bad_line.cfg";
    std::ofstream(bad_line) << "epochs\n";
    REQUIRE_THROWS_WITH(load_config(bad_line.string()), Catch::Matchers::ContainsSubstring("key=value"));

    REQUIRE_THROWS_AS(load_config((tmp.path / "missing.cfg").string()), ConfigError);
}

TEST_CASE("bad invocations exit with the config-error code") {
    std::string err;
    REQUIRE(run_capture({}, nullptr, &err) == 2);
    REQUIRE(err.find("usage:") != std::string::npos);
    REQUIRE(run_capture({"frobnicate"}, nullptr, &err) == 2);
    REQUIRE(run_capture({"gen-data"}, nullptr, &err) == 2);
    REQUIRE(run_capture({"gen-data", "--out"}, nullptr, &err) == 2);
    REQUIRE(run_capture({"gen-data", "--out", "x", "--bogus_key", "1"}, nullptr, &err) == 2);
    REQUIRE(run_capture({"train", "--run", "x"}, nullptr, &err) == 2);
    REQUIRE(run_capture({"eval", "--data", "x", "--out", "y"}, nullptr, &err) == 2);
    REQUIRE(run_capture({"analyze", "--checkpoint", "x", "--data", "y", "--out", "z", "--which", "nope"}, nullptr,
                        &err) == 2);
    REQUIRE(err.find("unknown analysis") != std::string::npos);
}

TEST_CASE("gen-data writes a loadable dataset deterministically") {
    TempCliDir tmp("cli_gen");
    const std::string out_a = (tmp.path / "a").string();
    const std::string out_b = (tmp.path / "b").string();
    std::string out;
    REQUIRE(run_capture(concat({"gen-data", "--out", out_a}, kTinyData), &out) == 0);
    REQUIRE(out.find("novel images") != std::string::npos);
    REQUIRE(fs::exists(fs::path(out_a) / "known_train"));
    REQUIRE(fs::exists(fs::path(out_a) / "known_heldout"));
    REQUIRE(fs::exists(fs::path(out_a) / "novel"));
    REQUIRE(fs::exists(fs::path(out_a) / "manifest.txt"));
    const Dataset ds = load_folder(out_a);
    REQUIRE(ds.known_train.n_classes() == 3);
    REQUIRE(ds.novel.n_classes() == 2);

    REQUIRE(run_capture(concat({"gen-data", "--out", out_b}, kTinyData)) == 0);
    REQUIRE(tree_hashes(out_a) == tree_hashes(out_b));
}

TEST_CASE("gen-data surfaces impossible specs as data errors") {
    TempCliDir tmp("cli_gen_bad");
    std::string err;
    const int code = run_capture({"gen-data", "--out", (tmp.path / "x").string(), "--n_parts", "3",
                                  "--parts_per_class", "3", "--n_known", "5"},
                                 nullptr, &err);
    REQUIRE(code == 3);
    REQUIRE(err.find("data error") != std::string::npos);
}

TEST_CASE("train writes config echo, metrics, and reproducible checkpoints") {
    TempCliDir tmp("cli_train");
    const std::string data = (tmp.path / "data").string();
    REQUIRE(run_capture(concat({"gen-data", "--out", data}, kTinyData)) == 0);

    const std::string run_a = (tmp.path / "run_a").string();
    const std::string run_b = (tmp.path / "run_b").string();
    std::string out;
    REQUIRE(run_capture(concat({"train", "--data", data, "--run", run_a}, kTinyTrain), &out) == 0);
    REQUIRE(out.find("epoch 1:") != std::string::npos);
    REQUIRE(fs::exists(fs::path(run_a) / "config.txt"));
    REQUIRE(fs::exists(fs::path(run_a) / "metrics.csv"));
    REQUIRE(fs::exists(fs::path(run_a) / "checkpoint_epoch_001.ckpt"));
    REQUIRE(fs::exists(fs::path(run_a) / "checkpoint_final.ckpt"));

    const std::string cfg_text = read_text(fs::path(run_a) / "config.txt");
    REQUIRE(cfg_text.find("feature_dim = 16") != std::string::npos);
    REQUIRE(cfg_text.find("epochs = 1") != std::string::npos);

    std::istringstream metrics(read_text(fs::path(run_a) / "metrics.csv"));
    std::string line;
    REQUIRE(std::getline(metrics, line));
    REQUIRE(line == kMetricsHeader);
    int rows = 0;
    while (std::getline(metrics, line)) ++rows;
    REQUIRE(rows == 1);

    REQUIRE(run_capture(concat({"train", "--data", data, "--run", run_b}, kTinyTrain)) == 0);
    REQUIRE(hash_file((fs::path(run_a) / "checkpoint_final.ckpt").string()) ==
            hash_file((fs::path(run_b) / "checkpoint_final.ckpt").string()));
}

TEST_CASE("loss-disabling flags match explicit zero weights") {
    TempCliDir tmp("cli_noflags");
    const std::string data = (tmp.path / "data").string();
    REQUIRE(run_capture(concat({"gen-data", "--out", data}, kTinyData)) == 0);

    const std::string run_flags = (tmp.path / "run_flags").string();
    const std::string run_zeros = (tmp.path / "run_zeros").string();
    REQUIRE(run_capture(concat(concat({"train", "--data", data, "--run", run_flags}, kTinyTrain),
                               {"--no-split", "--no-er", "--no-rot", "--no-sparse"})) == 0);
    REQUIRE(run_capture(concat(concat({"train", "--data", data, "--run", run_zeros}, kTinyTrain),
                               {"--alpha1", "0", "--alpha2", "0", "--rotation_weight", "0", "--sparseness_weight",
                                "0"})) == 0);
    REQUIRE(hash_file((fs::path(run_flags) / "checkpoint_final.ckpt").string()) ==
            hash_file((fs::path(run_zeros) / "checkpoint_final.ckpt").string()));
    const std::string cfg_text = read_text(fs::path(run_flags) / "config.txt");
    REQUIRE(cfg_text.find("alpha1 = 0\n") != std::string::npos);
    REQUIRE(cfg_text.find("sparseness_weight = 0\n") != std::string::npos);
}

TEST_CASE("train with zero epochs emits only the initial checkpoint") {
    TempCliDir tmp("cli_epoch0");
    const std::string data = (tmp.path / "data").string();
    REQUIRE(run_capture(concat({"gen-data", "--out", data}, kTinyData)) == 0);
    const std::string run = (tmp.path / "run").string();
    REQUIRE(run_capture(concat(concat({"train", "--data", data, "--run", run}, kTinyTrain), {"--epochs", "0"})) == 0);
    REQUIRE(fs::exists(fs::path(run) / "checkpoint_final.ckpt"));
    REQUIRE(!fs::exists(fs::path(run) / "checkpoint_epoch_001.ckpt"));
    std::istringstream metrics(read_text(fs::path(run) / "metrics.csv"));
    std::string line;
    REQUIRE(std::getline(metrics, line));
    REQUIRE(!std::getline(metrics, line));
}

TEST_CASE("train rejects a missing dataset directory") {
    TempCliDir tmp("cli_nodata");
    std::string err;
    REQUIRE(run_capture({"train", "--data", (tmp.path / "absent").string(), "--run", (tmp.path / "run").string()},
                        nullptr, &err) == 3);
    REQUIRE(err.find("data error") != std::string::npos);
}

TEST_CASE("eval writes reproducible reports tied to the checkpoint") {
    TempCliDir tmp("cli_eval");
    const std::string data = (tmp.path / "data").string();
    REQUIRE(run_capture(concat({"gen-data", "--out", data}, kTinyData)) == 0);
    const std::string run = (tmp.path / "run").string();
    REQUIRE(run_capture(concat({"train", "--data", data, "--run", run}, kTinyTrain)) == 0);
    const std::string ckpt = (fs::path(run) / "checkpoint_final.ckpt").string();

    const std::vector<std::string> eval_args = {"eval",   "--checkpoint", ckpt,
                                                "--data", data,           "--out",
                                                "",       "--k_way",      "2",
                                                "--n_shot", "1",          "--n_query",
                                                "1",      "--n_episodes", "5"};
    auto with_out = [&](const std::string& out_dir) {
        std::vector<std::string> a = eval_args;
        a[6] = out_dir;
        return a;
    };
    const std::string out_a = (tmp.path / "eval_a").string();
    const std::string out_b = (tmp.path / "eval_b").string();
    std::string out;
    REQUIRE(run_capture(with_out(out_a), &out) == 0);
    REQUIRE(out.find("mean_accuracy = ") != std::string::npos);

    std::istringstream csv(read_text(fs::path(out_a) / "eval.csv"));
    std::string line;
    REQUIRE(std::getline(csv, line));
    REQUIRE(line == "episode,accuracy");
    int rows = 0;
    bool mean_row = false;
    while (std::getline(csv, line)) {
        ++rows;
        if (line.rfind("mean,", 0) == 0) mean_row = true;
    }
    REQUIRE(rows == 6);
    REQUIRE(mean_row);

    const std::string summary = read_text(fs::path(out_a) / "summary.txt");
    REQUIRE(summary.find("k_way = 2") != std::string::npos);
    REQUIRE(summary.find("n_episodes = 5") != std::string::npos);
    REQUIRE(summary.find("checkpoint_hash = ") != std::string::npos);

    REQUIRE(run_capture(with_out(out_b)) == 0);
    REQUIRE(hash_file((fs::path(out_a) / "eval.csv").string()) == hash_file((fs::path(out_b) / "eval.csv").string()));

    const std::string garbage = (tmp.path / "garbage.ckpt").string();
    std::ofstream(garbage) << "BOGUS";
    std::string err;
    REQUIRE(run_capture(with_out((tmp.path / "eval_c").string()), nullptr, &err) == 0);
    std::vector<std::string> bad = with_out((tmp.path / "eval_d").string());
    bad[2] = garbage;
    REQUIRE(run_capture(bad, nullptr, &err) == 3);
    REQUIRE(err.find("checkpoint") != std::string::npos);
}

TEST_CASE("analyze emits the documented files for every mode") {
    TempCliDir tmp("cli_analyze");
    const std::string data = (tmp.path / "data").string();
    REQUIRE(run_capture(concat({"gen-data", "--out", data}, kTinyData)) == 0);
    const std::string run = (tmp.path / "run").string();
    REQUIRE(run_capture(concat({"train", "--data", data, "--run", run}, kTinyTrain)) == 0);
    const std::string ckpt = (fs::path(run) / "checkpoint_final.ckpt").string();

    auto analyze = [&](const std::string& which, const std::string& out_dir,
                       const std::vector<std::string>& extra = {}) {
        return run_capture(concat(concat({"analyze", "--checkpoint", ckpt, "--data", data, "--out", out_dir,
                                          "--which", which},
                                         extra),
                                  {"--k_way", "2", "--n_query", "1", "--n_episodes", "4"}));
    };

    const std::string inf_dir = (tmp.path / "influence").string();
    REQUIRE(analyze("influence", inf_dir) == 0);
    std::istringstream inf(read_text(fs::path(inf_dir) / "influence.csv"));
    std::string line;
    REQUIRE(std::getline(inf, line));
    REQUIRE(line == "channel,influence");
    int rows = 0;
    while (std::getline(inf, line)) ++rows;
    REQUIRE(rows == 16);
    REQUIRE(read_text(fs::path(inf_dir) / "summary.txt").find("which = influence") != std::string::npos);

    const std::string af_dir = (tmp.path / "ablate_f").string();
    REQUIRE(analyze("ablate-f", af_dir, {"--ablate_ks", "1,4,16"}) == 0);
    std::istringstream af(read_text(fs::path(af_dir) / "ablate_f.csv"));
    REQUIRE(std::getline(af, line));
    REQUIRE(line == "k,portion");
    std::vector<std::string> af_rows;
    while (std::getline(af, line)) af_rows.push_back(line);
    REQUIRE(af_rows.size() == 3);
    REQUIRE(af_rows.back() == "16,1");

    const std::string aw_dir = (tmp.path / "ablate_w").string();
    REQUIRE(analyze("ablate-w", aw_dir, {"--ablate_ks", "1,4,16"}) == 0);
    REQUIRE(fs::exists(fs::path(aw_dir) / "ablate_w.csv"));

    const std::string bins_dir = (tmp.path / "bins").string();
    REQUIRE(analyze("bins", bins_dir, {"--n_bins", "8", "--bin_samples", "50"}) == 0);
    std::istringstream bins(read_text(fs::path(bins_dir) / "bins.csv"));
    REQUIRE(std::getline(bins, line));
    REQUIRE(line == "bin,w_mean,f_mean");
    rows = 0;
    while (std::getline(bins, line)) ++rows;
    REQUIRE(rows == 8);

    const std::string heat_dir = (tmp.path / "heatmap").string();
    REQUIRE(analyze("heatmap", heat_dir) == 0);
    REQUIRE(fs::exists(fs::path(heat_dir) / "heatmap.pgm"));
    REQUIRE(fs::exists(fs::path(heat_dir) / "heatmap.csv"));
    const Image up = read_pnm((fs::path(heat_dir) / "heatmap.pgm").string());
    REQUIRE(up.h == 32);
    REQUIRE(up.w == 32);

    const std::string heat2_dir = (tmp.path / "heatmap_img").string();
    const std::string img = (fs::path(data) / "novel").string();
    std::string some_image;
    for (const auto& e : fs::recursive_directory_iterator(img))
        if (e.is_regular_file() && e.path().extension() == ".pgm") {
            some_image = e.path().string();
            break;
        }
    REQUIRE(!some_image.empty());
    REQUIRE(analyze("heatmap", heat2_dir, {"--image", some_image}) == 0);
    REQUIRE(fs::exists(fs::path(heat2_dir) / "heatmap.pgm"));

    const std::string ov_dir = (tmp.path / "overlap").string();
    REQUIRE(analyze("overlap", ov_dir, {"--k_f", "6", "--k_w", "3"}) == 0);
    std::istringstream ov(read_text(fs::path(ov_dir) / "overlap.csv"));
    REQUIRE(std::getline(ov, line));
    REQUIRE(line == "novel_class,known_class,n_common,channels");
    rows = 0;
    while (std::getline(ov, line)) ++rows;
    REQUIRE(rows == 2 * 3);
}
