#pragma once

// Dense HWC images with pixel values in [0, 1], plus the PNM (ASCII P2/P3)
// reader and writer used for dataset storage and heatmap export.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cfsl/util.hpp"

namespace cfsl {

struct Image {
    int h = 0, w = 0, ch = 0;
    std::vector<double> v;  // row-major (row, col, channel)

    Image() = default;
    Image(int h_, int w_, int ch_) : h(h_), w(w_), ch(ch_), v(static_cast<size_t>(h_) * w_ * ch_, 0.0) {}

    double& at(int r, int c, int k) { return v[(static_cast<size_t>(r) * w + c) * ch + k]; }
    double at(int r, int c, int k) const { return v[(static_cast<size_t>(r) * w + c) * ch + k]; }

    bool same_shape(const Image& o) const { return h == o.h && w == o.w && ch == o.ch; }
};

// Counterclockwise rotation by quarter_turns * 90 degrees. Negative counts
// rotate clockwise.
inline Image rotate90(const Image& x, int quarter_turns) {
    int q = quarter_turns % 4;
    if (q < 0) q += 4;
    Image cur = x;
    for (int t = 0; t < q; ++t) {
        Image out(cur.w, cur.h, cur.ch);
        for (int r = 0; r < out.h; ++r)
            for (int c = 0; c < out.w; ++c)
                for (int k = 0; k < out.ch; ++k) out.at(r, c, k) = cur.at(c, cur.w - 1 - r, k);
        cur = std::move(out);
    }
    return cur;
}

inline Image hflip(const Image& x) {
    Image out(x.h, x.w, x.ch);
    for (int r = 0; r < x.h; ++r)
        for (int c = 0; c < x.w; ++c)
            for (int k = 0; k < x.ch; ++k) out.at(r, c, k) = x.at(r, x.w - 1 - c, k);
    return out;
}

inline Image adjust_brightness(const Image& x, double delta) {
    Image out = x;
    for (double& p : out.v) p = std::clamp(p + delta, 0.0, 1.0);
    return out;
}

inline Image tile(const Image& x, int r0, int c0, int th, int tw) {
    if (r0 < 0 || c0 < 0 || th <= 0 || tw <= 0 || r0 + th > x.h || c0 + tw > x.w)
        throw std::invalid_argument("tile: region out of bounds");
    Image out(th, tw, x.ch);
    for (int r = 0; r < th; ++r)
        for (int c = 0; c < tw; ++c)
            for (int k = 0; k < x.ch; ++k) out.at(r, c, k) = x.at(r0 + r, c0 + c, k);
    return out;
}

// ASCII PNM output: P2 for single-channel, P3 for three-channel images.
// Pixels are quantized to 8 bits.
inline void write_pnm(const Image& x, const std::string& path) {
    if (x.ch != 1 && x.ch != 3) throw std::invalid_argument("write_pnm: only 1- or 3-channel images supported");
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << (x.ch == 1 ? "P2" : "P3") << "\n" << x.w << " " << x.h << "\n255\n";
    for (int r = 0; r < x.h; ++r) {
        for (int c = 0; c < x.w; ++c) {
            for (int k = 0; k < x.ch; ++k) {
                const long q = std::lround(std::clamp(x.at(r, c, k), 0.0, 1.0) * 255.0);
                out << q << ((c == x.w - 1 && k == x.ch - 1) ? "" : " ");
            }
        }
        out << "\n";
    }
    if (!out) throw DataError("write failed: " + path);
}

namespace detail {

inline bool next_pnm_token(std::istream& in, std::string& tok) {
    tok.clear();
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return true;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    return !tok.empty();
}

inline long parse_pnm_int(std::istream& in, const std::string& path, const char* what) {
    std::string tok;
    if (!next_pnm_token(in, tok)) throw DataError(path + ": truncated PNM file while reading " + what);
    try {
        size_t pos = 0;
        const long v = std::stol(tok, &pos);
        if (pos != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw DataError(path + ": malformed PNM value '" + tok + "' while reading " + what);
    }
}

}  // namespace detail

inline Image read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image: " + path);
    std::string magic;
    if (!detail::next_pnm_token(in, magic)) throw DataError(path + ": empty image file");
    int ch;
    if (magic == "P2")
        ch = 1;
    else if (magic == "P3")
        ch = 3;
    else
        throw DataError(path + ": unsupported PNM magic '" + magic + "'");
    const long w = detail::parse_pnm_int(in, path, "width");
    const long h = detail::parse_pnm_int(in, path, "height");
    const long maxval = detail::parse_pnm_int(in, path, "maxval");
    if (w <= 0 || h <= 0 || w > 1 << 14 || h > 1 << 14) throw DataError(path + ": unreasonable image dimensions");
    if (maxval <= 0 || maxval > 65535) throw DataError(path + ": unsupported maxval");
    Image img(static_cast<int>(h), static_cast<int>(w), ch);
    for (size_t i = 0; i < img.v.size(); ++i) {
        const long raw = detail::parse_pnm_int(in, path, "pixel");
        if (raw < 0 || raw > maxval) throw DataError(path + ": pixel value out of range");
        img.v[i] = static_cast<double>(raw) / static_cast<double>(maxval);
    }
    return img;
}

}  // namespace cfsl
