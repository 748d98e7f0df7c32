#pragma once

#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "vsm/digest.hpp"
#include "vsm/errors.hpp"
#include "vsm/graph.hpp"
#include "vsm/rng.hpp"
#include "vsm/tensor.hpp"

namespace vsm {

// Small RGB raster, channels interleaved, values in [0,1].
struct RasterImage {
    size_t height = 0;
    size_t width = 0;
    std::vector<float> pixels;  // h*w*3

    float& at(size_t y, size_t x, size_t c) { return pixels[(y * width + x) * 3 + c]; }
    float at(size_t y, size_t x, size_t c) const { return pixels[(y * width + x) * 3 + c]; }

    static RasterImage blank(size_t h, size_t w) {
        RasterImage im;
        im.height = h;
        im.width = w;
        im.pixels.assign(h * w * 3, 0.f);
        return im;
    }

    std::vector<uint8_t> quantized() const {
        std::vector<uint8_t> q(pixels.size());
        for (size_t i = 0; i < pixels.size(); ++i) {
            float v = pixels[i];
            v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
            q[i] = uint8_t(v * 255.f + 0.5f);
        }
        return q;
    }

    // Content digest over the 8-bit representation, stable across loads.
    std::string digest() const {
        auto q = quantized();
        return hex64(fnv1a(q.data(), q.size()));
    }

    static RasterImage load_ppm(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("load_ppm: cannot open " + path);
        std::string magic;
        in >> magic;
        if (magic != "P6") throw IoError("load_ppm: " + path + " is not binary P6");
        size_t w, h, maxv;
        in >> w >> h >> maxv;
        if (maxv != 255) throw IoError("load_ppm: only maxval 255 supported in " + path);
        in.get();  // single whitespace after header
        RasterImage im = blank(h, w);
        std::vector<uint8_t> raw(w * h * 3);
        in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
        if (!in) throw IoError("load_ppm: truncated pixel data in " + path);
        for (size_t i = 0; i < raw.size(); ++i) im.pixels[i] = float(raw[i]) / 255.f;
        return im;
    }

    void save_ppm(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("save_ppm: cannot open " + path);
        out << "P6\n" << width << " " << height << "\n255\n";
        auto q = quantized();
        out.write(reinterpret_cast<const char*>(q.data()), std::streamsize(q.size()));
    }
};

// Image token sequence consumed by the cross-attention adapters.
struct ImageTokenGrid {
    TensorF tokens;  // N_img x d
    std::string source_id;

    size_t count() const { return tokens.rows(); }
    size_t dim() const { return tokens.cols(); }
};

using ImageRef = std::shared_ptr<const ImageTokenGrid>;

// Fixed 2-D sinusoidal position term: first half of the channel dim encodes
// the patch row, the second half the patch column.
inline TensorF sin_position_grid(size_t rows, size_t cols, size_t d) {
    if (d % 4 != 0) throw ShapeError("sin_position_grid: dim " + std::to_string(d) + " not divisible by 4");
    TensorF pe({rows * cols, d});
    const size_t half = d / 2;
    for (size_t r = 0; r < rows; ++r) {
        for (size_t c = 0; c < cols; ++c) {
            float* row = pe.data() + (r * cols + c) * d;
            for (size_t part = 0; part < 2; ++part) {
                const float v = float(part == 0 ? r : c);
                float* dst = row + part * half;
                for (size_t i = 0; i + 1 < half; i += 2) {
                    const float theta = v * std::pow(10000.f, -float(i) / float(half));
                    dst[i] = std::sin(theta);
                    dst[i + 1] = std::cos(theta);
                }
            }
        }
    }
    return pe;
}

// Frozen toy patch encoder: non-overlapping PxP patches, linear projection,
// plus the fixed position term. Parameters live in the model's store so the
// frozen contract is enforced the same way as for the backbone.
struct PatchEncoder {
    size_t patch = 8;
    size_t d_model = 0;
    TensorF proj;  // [3*P*P x d]
    TensorF bias;  // [d]

    static PatchEncoder init(size_t d_model, size_t patch, Rng rng) {
        PatchEncoder e;
        e.patch = patch;
        e.d_model = d_model;
        const size_t in_dim = 3 * patch * patch;
        e.proj = TensorF({in_dim, d_model});
        const float sd = 1.f / std::sqrt(float(in_dim));
        for (size_t i = 0; i < e.proj.size(); ++i) e.proj.at(i) = float(rng.normal()) * sd;
        e.bias = TensorF({d_model});
        return e;
    }

    ImageTokenGrid encode(const RasterImage& img) const {
        if (img.height % patch != 0 || img.width % patch != 0)
            throw ShapeError("encode_image: " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                             " not divisible by patch " + std::to_string(patch));
        const size_t gr = img.height / patch, gc = img.width / patch;
        const size_t in_dim = 3 * patch * patch;
        TensorF flat({gr * gc, in_dim});
        for (size_t pr = 0; pr < gr; ++pr)
            for (size_t pc = 0; pc < gc; ++pc) {
                float* dst = flat.data() + (pr * gc + pc) * in_dim;
                size_t k = 0;
                for (size_t y = 0; y < patch; ++y)
                    for (size_t x = 0; x < patch; ++x)
                        for (size_t ch = 0; ch < 3; ++ch)
                            dst[k++] = img.at(pr * patch + y, pc * patch + x, ch);
            }
        TensorF tok = matmul(flat, proj);
        for (size_t i = 0; i < tok.rows(); ++i)
            for (size_t j = 0; j < tok.cols(); ++j) tok.at(i, j) += bias.at(j);
        TensorF pe = sin_position_grid(gr, gc, d_model);
        for (size_t i = 0; i < tok.size(); ++i) tok.at(i) += pe.at(i);
        ImageTokenGrid grid;
        grid.tokens = std::move(tok);
        grid.source_id = img.digest();
        return grid;
    }
};

// Synthetic grid for latency experiments: mirrors large-encoder token counts
// without rendering anything.
inline ImageTokenGrid synthetic_grid(size_t n_tokens, size_t d, uint64_t seed) {
    Rng rng = Rng(seed).split("synthetic_grid");
    ImageTokenGrid g;
    g.tokens = TensorF({n_tokens, d});
    for (size_t i = 0; i < g.tokens.size(); ++i) g.tokens.at(i) = float(rng.normal()) * 0.5f;
    g.source_id = "synthetic-" + hex64(mix64(seed ^ n_tokens));
    return g;
}

}  // namespace vsm
