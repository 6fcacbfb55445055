#pragma once

// Dataset handling: the procedural compositional dataset generator and the
// on-disk folder layout <root>/<split>/<class>/<image files>.
//
// Every class is a combination of parts drawn from a shared pool; novel
// classes reuse only parts that also occur in some known class, so features
// learned on known classes stay meaningful on novel ones. Images are rendered
// at 8-bit precision, which makes generate -> export -> load an exact
// round trip.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cfsl/image.hpp"
#include "cfsl/rng.hpp"
#include "cfsl/util.hpp"

namespace cfsl {

struct Split {
    std::vector<Image> images;
    std::vector<int> labels;
    std::vector<std::string> class_names;

    size_t size() const { return images.size(); }
    int n_classes() const { return static_cast<int>(class_names.size()); }
};

inline std::vector<std::vector<int>> indices_by_class(const Split& s) {
    std::vector<std::vector<int>> out(static_cast<size_t>(s.n_classes()));
    for (size_t i = 0; i < s.labels.size(); ++i) out[static_cast<size_t>(s.labels[i])].push_back(static_cast<int>(i));
    return out;
}

struct Dataset {
    Split known_train, known_heldout, novel;

    void validate() const;
};

struct SynthSpec {
    int n_parts = 12;
    int parts_per_class = 3;
    int n_known = 20;
    int n_novel = 10;
    int images_per_class = 50;
    int image_size = 32;
    double noise_std = 0.05;
    int jitter_px = 2;
    double intensity_jitter = 0.2;
    uint64_t seed = 1;
};

namespace detail {

constexpr int kTemplateSize = 8;

// Part glyphs, 8x8 each. '#' marks a lit pixel.
inline const std::array<std::array<const char*, 8>, 12>& part_templates() {
    static const std::array<std::array<const char*, 8>, 12> t = {{
        {"........", ".######.", ".######.", ".######.", ".######.", ".######.", ".######.", "........"},
        {"########", "#......#", "#......#", "#......#", "#......#", "#......#", "#......#", "########"},
        {"........", "........", "........", "########", "########", "........", "........", "........"},
        {"...##...", "...##...", "...##...", "...##...", "...##...", "...##...", "...##...", "...##..."},
        {"##......", "###.....", ".###....", "..###...", "...###..", "....###.", ".....###", "......##"},
        {"......##", ".....###", "....###.", "...###..", "..###...", ".###....", "###.....", "##......"},
        {"...##...", "...##...", "...##...", "########", "########", "...##...", "...##...", "...##..."},
        {"##....##", "###..###", ".######.", "..####..", "..####..", ".######.", "###..###", "##....##"},
        {"..####..", ".######.", "########", "########", "########", "########", ".######.", "..####.."},
        {"..####..", ".#....#.", "#......#", "#......#", "#......#", "#......#", ".#....#.", "..####.."},
        {"#.......", "##......", "###.....", "####....", "#####...", "######..", "#######.", "########"},
        {"##..##..", "##..##..", "..##..##", "..##..##", "##..##..", "##..##..", "..##..##", "..##..##"},
    }};
    return t;
}

inline std::string part_combo_name(const std::vector<int>& parts) {
    std::string name = "parts";
    for (int p : parts) {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "_%02d", p);
        name += buf;
    }
    return name;
}

inline std::vector<int> parts_from_name(const std::string& name) {
    std::vector<int> parts;
    size_t pos = name.find('_');
    while (pos != std::string::npos) {
        const size_t next = name.find('_', pos + 1);
        const std::string tok = name.substr(pos + 1, next == std::string::npos ? next : next - pos - 1);
        parts.push_back(std::stoi(tok));
        pos = next;
    }
    return parts;
}

// All size-k subsets of {0..n-1} in lexicographic order.
inline std::vector<std::vector<int>> enumerate_combos(int n, int k) {
    std::vector<std::vector<int>> out;
    std::vector<int> cur(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) cur[static_cast<size_t>(i)] = i;
    while (true) {
        out.push_back(cur);
        int i = k - 1;
        while (i >= 0 && cur[static_cast<size_t>(i)] == n - k + i) --i;
        if (i < 0) break;
        ++cur[static_cast<size_t>(i)];
        for (int j = i + 1; j < k; ++j) cur[static_cast<size_t>(j)] = cur[static_cast<size_t>(j - 1)] + 1;
    }
    return out;
}

inline Image render_example(const SynthSpec& spec, const std::vector<int>& parts, uint64_t combo_id, int image_index) {
    const int S = spec.image_size;
    const int cell = S / 4;
    Image img(S, S, 1);
    Rng rng(derive_seed(spec.seed, "img", combo_id, static_cast<uint64_t>(image_index)));
    for (int p : parts) {
        const auto& tmpl = part_templates()[static_cast<size_t>(p)];
        const int base_r = (p / 4) * cell;
        const int base_c = (p % 4) * cell;
        const int dr = spec.jitter_px > 0
                           ? static_cast<int>(rng.uniform_int(static_cast<uint64_t>(2 * spec.jitter_px + 1))) - spec.jitter_px
                           : 0;
        const int dc = spec.jitter_px > 0
                           ? static_cast<int>(rng.uniform_int(static_cast<uint64_t>(2 * spec.jitter_px + 1))) - spec.jitter_px
                           : 0;
        const double intensity = 1.0 - rng.uniform(0.0, spec.intensity_jitter);
        const int r0 = std::clamp(base_r + dr, 0, S - kTemplateSize);
        const int c0 = std::clamp(base_c + dc, 0, S - kTemplateSize);
        for (int r = 0; r < kTemplateSize; ++r)
            for (int c = 0; c < kTemplateSize; ++c)
                if (tmpl[static_cast<size_t>(r)][c] == '#')
                    img.at(r0 + r, c0 + c, 0) = std::max(img.at(r0 + r, c0 + c, 0), intensity);
    }
    if (spec.noise_std > 0.0)
        for (double& v : img.v) v += spec.noise_std * rng.normal();
    for (double& v : img.v) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
    return img;
}

}  // namespace detail

inline void Dataset::validate() const {
    const auto check_split = [](const Split& s, const char* which) {
        for (int l : s.labels)
            if (l < 0 || l >= s.n_classes())
                throw DataError(std::string("dataset: label out of range in split ") + which);
        if (s.images.size() != s.labels.size())
            throw DataError(std::string("dataset: image/label count mismatch in split ") + which);
        for (size_t i = 1; i < s.images.size(); ++i)
            if (!s.images[i].same_shape(s.images[0]))
                throw DataError(std::string("dataset: inconsistent image shapes in split ") + which);
    };
    check_split(known_train, "known_train");
    check_split(known_heldout, "known_heldout");
    check_split(novel, "novel");
    if (!known_heldout.class_names.empty() && known_train.class_names != known_heldout.class_names)
        throw DataError("dataset: known_train and known_heldout class lists disagree");
    std::set<std::string> known(known_train.class_names.begin(), known_train.class_names.end());
    for (const std::string& n : novel.class_names)
        if (known.count(n)) throw DataError("dataset: class '" + n + "' appears in both known and novel splits");
    if (!known_train.images.empty() && !novel.images.empty() &&
        !known_train.images[0].same_shape(novel.images[0]))
        throw DataError("dataset: known and novel image shapes disagree");
}

inline Dataset generate_synthetic(const SynthSpec& spec) {
    if (spec.parts_per_class < 1 || spec.n_parts < spec.parts_per_class)
        throw DataError("generate_synthetic: need 1 <= parts_per_class <= n_parts");
    if (spec.n_parts > 12) throw DataError("generate_synthetic: at most 12 parts available");
    if (spec.image_size < 32 || spec.image_size % 16 != 0)
        throw DataError("generate_synthetic: image_size must be a multiple of 16 and at least 32");
    if (spec.n_known < 1 || spec.n_novel < 0 || spec.images_per_class < 2)
        throw DataError("generate_synthetic: need n_known >= 1, n_novel >= 0, images_per_class >= 2");
    if (spec.noise_std < 0.0 || spec.intensity_jitter < 0.0 || spec.intensity_jitter > 1.0 || spec.jitter_px < 0)
        throw DataError("generate_synthetic: noise/jitter parameters out of range");

    const auto combos = detail::enumerate_combos(spec.n_parts, spec.parts_per_class);
    std::vector<int> order(combos.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng combo_rng(derive_seed(spec.seed, "combos"));
    combo_rng.shuffle(order);

    if (static_cast<size_t>(spec.n_known) > combos.size())
        throw DataError("generate_synthetic: part combination space exhausted for known classes");

    std::vector<int> known_ids(order.begin(), order.begin() + spec.n_known);
    std::set<int> known_parts;
    for (int id : known_ids)
        for (int p : combos[static_cast<size_t>(id)]) known_parts.insert(p);

    std::vector<int> novel_ids;
    for (size_t i = static_cast<size_t>(spec.n_known); i < order.size() && novel_ids.size() < static_cast<size_t>(spec.n_novel);
         ++i) {
        bool covered = true;
        for (int p : combos[static_cast<size_t>(order[i])])
            if (!known_parts.count(p)) covered = false;
        if (covered) novel_ids.push_back(order[i]);
    }
    if (novel_ids.size() < static_cast<size_t>(spec.n_novel))
        throw DataError("generate_synthetic: not enough part combinations covered by known parts for novel classes");

    const auto sort_by_name = [&](std::vector<int>& ids) {
        std::sort(ids.begin(), ids.end(), [&](int a, int b) {
            return combos[static_cast<size_t>(a)] < combos[static_cast<size_t>(b)];
        });
    };
    sort_by_name(known_ids);
    sort_by_name(novel_ids);

    const int n_held = std::max(1, spec.images_per_class / 5);
    const int n_train = spec.images_per_class - n_held;
    if (n_train < 1) throw DataError("generate_synthetic: images_per_class too small to split off a held-out set");

    Dataset ds;
    for (size_t k = 0; k < known_ids.size(); ++k) {
        const auto& parts = combos[static_cast<size_t>(known_ids[k])];
        const std::string name = detail::part_combo_name(parts);
        ds.known_train.class_names.push_back(name);
        ds.known_heldout.class_names.push_back(name);
        for (int m = 0; m < spec.images_per_class; ++m) {
            Image img = detail::render_example(spec, parts, static_cast<uint64_t>(known_ids[k]), m);
            if (m < n_train) {
                ds.known_train.images.push_back(std::move(img));
                ds.known_train.labels.push_back(static_cast<int>(k));
            } else {
                ds.known_heldout.images.push_back(std::move(img));
                ds.known_heldout.labels.push_back(static_cast<int>(k));
            }
        }
    }
    for (size_t k = 0; k < novel_ids.size(); ++k) {
        const auto& parts = combos[static_cast<size_t>(novel_ids[k])];
        ds.novel.class_names.push_back(detail::part_combo_name(parts));
        for (int m = 0; m < spec.images_per_class; ++m) {
            ds.novel.images.push_back(detail::render_example(spec, parts, static_cast<uint64_t>(novel_ids[k]), m));
            ds.novel.labels.push_back(static_cast<int>(k));
        }
    }
    ds.validate();
    return ds;
}

// --- folder I/O --------------------------------------------------------------

namespace detail {

inline void export_split(const Split& s, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto per_class = indices_by_class(s);
    for (int c = 0; c < s.n_classes(); ++c) {
        const std::filesystem::path cdir = dir / s.class_names[static_cast<size_t>(c)];
        std::filesystem::create_directories(cdir);
        int seq = 0;
        for (int ix : per_class[static_cast<size_t>(c)]) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "img_%04d.%s", seq++, s.images[static_cast<size_t>(ix)].ch == 3 ? "ppm" : "pgm");
            write_pnm(s.images[static_cast<size_t>(ix)], (cdir / buf).string());
        }
    }
}

inline Split load_split(const std::filesystem::path& dir) {
    Split s;
    if (!std::filesystem::exists(dir)) return s;
    if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir.string());
    std::vector<std::string> classes;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_directory()) classes.push_back(e.path().filename().string());
    std::sort(classes.begin(), classes.end());
    for (size_t c = 0; c < classes.size(); ++c) {
        s.class_names.push_back(classes[c]);
        std::vector<std::string> files;
        for (const auto& e : std::filesystem::directory_iterator(dir / classes[c]))
            if (e.is_regular_file()) files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw DataError("empty class directory: " + (dir / classes[c]).string());
        for (const std::string& f : files) {
            s.images.push_back(read_pnm(f));
            s.labels.push_back(static_cast<int>(c));
            if (!s.images.back().same_shape(s.images[0]))
                throw DataError("inconsistent image size in " + f);
        }
    }
    return s;
}

}  // namespace detail

inline void write_manifest(const SynthSpec& spec, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest: " + path);
    out << "n_parts = " << spec.n_parts << "\n"
        << "parts_per_class = " << spec.parts_per_class << "\n"
        << "n_known = " << spec.n_known << "\n"
        << "n_novel = " << spec.n_novel << "\n"
        << "images_per_class = " << spec.images_per_class << "\n"
        << "image_size = " << spec.image_size << "\n"
        << "noise_std = " << fmt_double(spec.noise_std) << "\n"
        << "jitter_px = " << spec.jitter_px << "\n"
        << "intensity_jitter = " << fmt_double(spec.intensity_jitter) << "\n"
        << "data_seed = " << spec.seed << "\n";
}

inline void export_folder(const Dataset& ds, const std::string& root, const SynthSpec* spec = nullptr) {
    namespace fs = std::filesystem;
    ds.validate();
    fs::create_directories(root);
    detail::export_split(ds.known_train, fs::path(root) / "known_train");
    detail::export_split(ds.known_heldout, fs::path(root) / "known_heldout");
    detail::export_split(ds.novel, fs::path(root) / "novel");
    if (spec) write_manifest(*spec, (fs::path(root) / "manifest.txt").string());
}

inline Dataset load_folder(const std::string& root) {
    namespace fs = std::filesystem;
    if (!fs::exists(root) || !fs::is_directory(root)) throw DataError("dataset root not found: " + root);
    Dataset ds;
    ds.known_train = detail::load_split(fs::path(root) / "known_train");
    ds.known_heldout = detail::load_split(fs::path(root) / "known_heldout");
    ds.novel = detail::load_split(fs::path(root) / "novel");
    if (ds.known_train.images.empty()) throw DataError("dataset has no known_train images under " + root);
    ds.validate();
    return ds;
}

}  // namespace cfsl
