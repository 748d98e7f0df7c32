#pragma once

#include <algorithm>
#include <chrono>
#include <fstream>
#include <vector>

#include "json.hpp"
#include "vsm/infer.hpp"

namespace vsm {

// Latency-oriented defaults: closer to real model proportions than the
// training toy so the adapter overhead is measured against a realistic
// per-step cost, and enough context for a 5-minute window at 12.5 Hz.
inline ModelConfig latency_model_config() {
    ModelConfig c;
    c.d_model = 512;
    c.n_layers = 8;
    c.n_heads = 8;
    c.ffn_mult = 4;
    c.q_levels = 4;
    c.depth_layers = 1;
    c.depth_heads = 8;
    c.max_context = 4096;
    return c;
}

struct LatencyCell {
    size_t image_tokens = 0;
    size_t context_frames = 0;
    size_t steps = 0;
    double median_ms = 0;
    double p95_ms = 0;
};

struct LatencyReport {
    std::vector<LatencyCell> cells;
    std::vector<std::pair<size_t, double>> cache_build_ms;  // per image-token count
    uint64_t cache_builds = 0;

    double median_for(size_t image_tokens, size_t context_frames) const {
        for (const auto& c : cells)
            if (c.image_tokens == image_tokens && c.context_frames == context_frames) return c.median_ms;
        throw ConfigError("latency report: no such cell");
    }
};

struct LatencyBenchSpec {
    std::vector<size_t> image_tokens{0, 16, 1024};
    std::vector<size_t> context_frames{0, 750, 3750};  // 0s / 60s / 300s at 12.5 Hz
    size_t steps = 200;                                // post-warmup, per cell
    size_t warmup = 10;
    uint64_t seed = 1;
};

template <typename T>
LatencyReport latency_bench(const Model<T>& m, const LatencyBenchSpec& spec = {}) {
    using clock = std::chrono::steady_clock;
    LatencyReport rep;
    const uint64_t builds_before = m.cache_builds();
    const std::vector<int> silence(m.cfg.q_levels, 0);

    for (size_t n_img : spec.image_tokens) {
        // one cache per distinct image, shared by every context cell
        std::shared_ptr<const ImageKVCache<T>> cache;
        ImageRef grid;
        if (n_img > 0) {
            grid = std::make_shared<ImageTokenGrid>(synthetic_grid(n_img, m.cfg.d_model, spec.seed ^ n_img));
            const auto t0 = clock::now();
            cache = std::make_shared<ImageKVCache<T>>(build_image_cache(m, *grid));
            rep.cache_build_ms.emplace_back(
                n_img, std::chrono::duration<double, std::milli>(clock::now() - t0).count());
        }
        for (size_t ctx : spec.context_frames) {
            Session<T> sess(m, grid, cache);
            sess.prefill_synthetic_history(ctx, spec.seed ^ ctx);
            std::vector<double> times;
            times.reserve(spec.steps);
            for (size_t i = 0; i < spec.warmup + spec.steps; ++i) {
                const auto t0 = clock::now();
                sess.generate_step(silence);
                const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
                if (i >= spec.warmup) times.push_back(ms);
            }
            std::sort(times.begin(), times.end());
            LatencyCell cell;
            cell.image_tokens = n_img;
            cell.context_frames = ctx;
            cell.steps = times.size();
            cell.median_ms = times[times.size() / 2];
            cell.p95_ms = times[size_t(double(times.size()) * 0.95)];
            rep.cells.push_back(cell);
        }
    }
    rep.cache_builds = m.cache_builds() - builds_before;
    return rep;
}

// ---------------------------------------------------------------------------
// Optional int8 path: per-tensor symmetric quantization for the dominant
// projection matmuls, benchmarked against the f32 kernel.

struct QuantizedMatrix {
    std::vector<int8_t> data;  // row-major [rows x cols]
    float scale = 1.f;
    size_t rows = 0, cols = 0;
};

inline QuantizedMatrix quantize_per_tensor(const TensorF& w) {
    QuantizedMatrix q;
    q.rows = w.rows();
    q.cols = w.cols();
    float amax = 0.f;
    for (size_t i = 0; i < w.size(); ++i) amax = std::max(amax, std::abs(w.at(i)));
    q.scale = amax > 0.f ? amax / 127.f : 1.f;
    q.data.resize(w.size());
    for (size_t i = 0; i < w.size(); ++i)
        q.data[i] = int8_t(std::lround(w.at(i) / q.scale));
    return q;
}

// y[1 x cols] = x[1 x rows] * W, with x quantized on the fly.
inline void matvec_int8(const float* x, const QuantizedMatrix& w, float* y) {
    float xmax = 0.f;
    for (size_t i = 0; i < w.rows; ++i) xmax = std::max(xmax, std::abs(x[i]));
    const float xs = xmax > 0.f ? xmax / 127.f : 1.f;
    std::vector<int8_t> xq(w.rows);
    for (size_t i = 0; i < w.rows; ++i) xq[i] = int8_t(std::lround(x[i] / xs));
    std::vector<int32_t> acc(w.cols, 0);
    for (size_t i = 0; i < w.rows; ++i) {
        const int32_t xi = xq[i];
        const int8_t* wr = w.data.data() + i * w.cols;
        for (size_t j = 0; j < w.cols; ++j) acc[j] += xi * int32_t(wr[j]);
    }
    const float s = xs * w.scale;
    for (size_t j = 0; j < w.cols; ++j) y[j] = float(acc[j]) * s;
}

struct QuantBenchResult {
    size_t d = 0;
    double f32_ms = 0;   // per matvec
    double int8_ms = 0;
    double max_abs_err = 0;
};

inline QuantBenchResult int8_matmul_bench(size_t d, size_t reps, uint64_t seed) {
    using clock = std::chrono::steady_clock;
    Rng rng = Rng(seed).split("int8_bench");
    TensorF w({d, d});
    for (size_t i = 0; i < w.size(); ++i) w.at(i) = float(rng.normal()) * 0.05f;
    TensorF x({1, d});
    for (size_t i = 0; i < d; ++i) x.at(i) = float(rng.normal());
    auto q = quantize_per_tensor(w);

    TensorF yf({1, d}), yq({1, d});
    QuantBenchResult res;
    res.d = d;
    auto t0 = clock::now();
    for (size_t r = 0; r < reps; ++r) matmul_into(x.data(), w.data(), yf.data(), 1, d, d);
    res.f32_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count() / double(reps);
    t0 = clock::now();
    for (size_t r = 0; r < reps; ++r) matvec_int8(x.data(), q, yq.data());
    res.int8_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count() / double(reps);
    for (size_t j = 0; j < d; ++j) res.max_abs_err = std::max(res.max_abs_err, double(std::abs(yf.at(j) - yq.at(j))));
    return res;
}

inline void write_latency_csv(const LatencyReport& rep, std::ostream& out) {
    out << "# schema=vsm.latency.v1\n";
    out << "image_tokens,context_frames,steps,median_ms,p95_ms\n";
    for (const auto& c : rep.cells)
        out << c.image_tokens << "," << c.context_frames << "," << c.steps << "," << c.median_ms << ","
            << c.p95_ms << "\n";
    out << "# cache_builds=" << rep.cache_builds << "\n";
    for (const auto& [n, ms] : rep.cache_build_ms) out << "# cache_build_ms[" << n << "]=" << ms << "\n";
}

// Structural check used by tests and the CLI: header, schema tag, numeric
// rows with five fields.
inline bool latency_csv_valid(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "# schema=vsm.latency.v1") return false;
    if (!std::getline(in, line) || line != "image_tokens,context_frames,steps,median_ms,p95_ms") return false;
    size_t rows = 0;
    while (std::getline(in, line)) {
        if (line.rfind("#", 0) == 0) continue;
        size_t commas = 0;
        for (char c : line) commas += c == ',' ? 1 : 0;
        if (commas != 4) return false;
        ++rows;
    }
    return rows > 0;
}

}  // namespace vsm
