#pragma once

#include <chrono>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "vsm/backbone.hpp"
#include "vsm/model.hpp"

namespace vsm {

struct BatchSpec {
    size_t batch_size = 8;
    double p_audio = 0.25;
    double p_concat = 0.0;
    size_t concat_min_keep = 4;
    std::vector<std::pair<std::string, double>> weights;  // dataset name -> relative weight
    uint64_t seed = 1;

    void validate() const {
        if (batch_size < 1) throw ConfigError("batch_size must be positive");
        if (p_audio < 0 || p_audio > 1) throw ConfigError("p_audio outside [0,1]");
        if (p_concat < 0 || p_concat > 1) throw ConfigError("p_concat outside [0,1]");
        double total = 0;
        for (const auto& [n, w] : weights) {
            if (w < 0) throw ConfigError("negative weight for dataset " + n);
            total += w;
        }
        if (!weights.empty() && total <= 0) throw ConfigError("all dataset weights are zero");
    }
};

struct DatasetPool {
    std::string name;
    bool speech = false;
    std::vector<TrainingSample> samples;
};

namespace detail {

inline const DatasetPool* weighted_pick(const std::vector<const DatasetPool*>& pools,
                                        const std::vector<double>& w, Rng& rng) {
    double total = 0;
    for (double x : w) total += x;
    double r = rng.next_double() * total;
    for (size_t i = 0; i < pools.size(); ++i) {
        r -= w[i];
        if (r < 0) return pools[i];
    }
    return pools.back();
}

}  // namespace detail

// Deterministic quota composer: exactly round(p_audio * B) speech slots per
// batch, remainder speechless. Dataset choice per slot is a weighted draw
// from the batch's derived stream; speech samples then pass through the
// concat augmentation.
inline std::vector<TrainingSample> compose_batch(const BatchSpec& spec,
                                                 const std::vector<DatasetPool>& pools,
                                                 const std::vector<SpeechSample>& concat_pool,
                                                 size_t batch_index) {
    spec.validate();
    auto weight_of = [&](const std::string& name) {
        for (const auto& [n, w] : spec.weights) {
            if (n == name) return w;
        }
        return 1.0;  // unlisted datasets default to weight 1
    };
    std::vector<const DatasetPool*> speech_pools, text_pools;
    std::vector<double> speech_w, text_w;
    for (const auto& p : pools) {
        const double w = weight_of(p.name);
        if (w <= 0) continue;
        if (p.speech) {
            speech_pools.push_back(&p);
            speech_w.push_back(w);
        } else {
            text_pools.push_back(&p);
            text_w.push_back(w);
        }
    }

    const size_t n_speech = size_t(std::llround(spec.p_audio * double(spec.batch_size)));
    if (n_speech > 0 && speech_pools.empty())
        throw ConfigError("compose_batch: p_audio > 0 but no speech pool configured");
    if (n_speech < spec.batch_size && text_pools.empty())
        throw ConfigError("compose_batch: speechless slots requested but no text pool configured");
    for (const auto& p : pools)
        if (weight_of(p.name) > 0 && p.samples.empty())
            throw ConfigError("compose_batch: dataset '" + p.name + "' has positive weight but no samples");

    Rng rng = Rng(spec.seed).split("batch").split(batch_index);
    std::vector<TrainingSample> batch;
    batch.reserve(spec.batch_size);
    ConcatConfig ccfg{spec.p_concat, spec.concat_min_keep};
    for (size_t slot = 0; slot < spec.batch_size; ++slot) {
        const bool speech = slot < n_speech;
        const DatasetPool* pool =
            speech ? detail::weighted_pick(speech_pools, speech_w, rng)
                   : detail::weighted_pick(text_pools, text_w, rng);
        const TrainingSample& src = pool->samples[rng.next_below(pool->samples.size())];
        if (speech && spec.p_concat > 0) {
            TrainingSample out;
            out.value = concat_augment(src.speech(), concat_pool, concat_pool, ccfg, rng);
            batch.push_back(std::move(out));
        } else {
            batch.push_back(src);
        }
    }
    return batch;
}

// ---------------------------------------------------------------------------
// AdamW with linear warmup and cosine decay.

struct OptimConfig {
    double lr = 1e-3;
    size_t warmup_steps = 50;
    size_t total_steps = 500;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.01;
    double eps = 1e-8;
    LossWeights loss_weights;
};

inline double lr_at(const OptimConfig& c, size_t step) {
    if (c.warmup_steps > 0 && step <= c.warmup_steps) return c.lr * double(step) / double(c.warmup_steps);
    if (step >= c.total_steps) return 0.0;
    const double t = double(step - c.warmup_steps) / double(std::max<size_t>(1, c.total_steps - c.warmup_steps));
    return c.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

template <typename T>
struct TrainState {
    size_t step = 0;
    std::map<std::string, Tensor<T>> m1, m2;  // moments exist only for trainable params
    std::vector<double> loss_history;
};

// One optimizer step over a composed batch. A non-finite loss aborts without
// touching parameters or moments.
template <typename T>
double train_step(TrainState<T>& state, Model<T>& model, const std::vector<TrainingSample>& batch,
                  const OptimConfig& cfg) {
    Graph<T> g(&model.params);
    typename Graph<T>::Var loss;
    double loss_value = 0;
    try {
        typename Graph<T>::Var total;
        for (size_t i = 0; i < batch.size(); ++i) {
            auto l = taped_sample_loss(g, model, batch[i], cfg.loss_weights);
            total = i == 0 ? l : g.add(total, l);
        }
        loss = g.scale(total, T(1) / T(batch.size()));
        loss_value = double(g.value(loss).item());
    } catch (const NumericError& e) {
        throw DivergenceError(std::string("train_step: ") + e.what() + " at step " +
                              std::to_string(state.step + 1));
    }
    if (!std::isfinite(loss_value))
        throw DivergenceError("train_step: non-finite loss at step " + std::to_string(state.step + 1));

    g.backward(loss);
    auto grads = g.grads();

    state.step += 1;
    const double lr = lr_at(cfg, state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
    for (auto& [name, grad] : grads) {
        auto& p = model.params[name];
        if (!p.trainable) continue;
        auto [it1, fresh] = state.m1.try_emplace(name, Tensor<T>(p.value.shape()));
        auto [it2, _] = state.m2.try_emplace(name, Tensor<T>(p.value.shape()));
        Tensor<T>& m1 = it1->second;
        Tensor<T>& m2 = it2->second;
        for (size_t i = 0; i < grad.size(); ++i) {
            const double gi = double(grad.at(i));
            const double n1 = cfg.beta1 * double(m1.at(i)) + (1 - cfg.beta1) * gi;
            const double n2 = cfg.beta2 * double(m2.at(i)) + (1 - cfg.beta2) * gi * gi;
            m1.at(i) = T(n1);
            m2.at(i) = T(n2);
            const double update = (n1 / bc1) / (std::sqrt(n2 / bc2) + cfg.eps);
            p.value.at(i) = T(double(p.value.at(i)) - lr * (update + cfg.weight_decay * double(p.value.at(i))));
        }
    }
    state.loss_history.push_back(loss_value);
    return loss_value;
}

// ---------------------------------------------------------------------------
// Finite-difference verification of the whole differentiable stack.

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
};

// Central differences on a random subset of coordinates per trainable
// tensor. Relative error uses max(1, |a|, |b|) as denominator so tiny
// gradients compare on an absolute scale.
template <typename T>
GradCheckReport grad_check(Model<T>& model, const TrainingSample& sample, size_t coords_per_tensor = 64,
                           uint64_t seed = 0, double h = 1e-5, const LossWeights& w = {}) {
    auto loss_of = [&]() {
        Graph<T> g(&model.params, false);
        return double(g.value(taped_sample_loss(g, model, sample, w)).item());
    };
    Graph<T> g(&model.params);
    auto loss = taped_sample_loss(g, model, sample, w);
    g.backward(loss);
    auto grads = g.grads();

    GradCheckReport rep;
    Rng rng = Rng(seed).split("grad_check");
    for (const auto& name : model.trainable_names()) {
        auto& p = model.params[name].value;
        const Tensor<T>* analytic = nullptr;
        auto it = grads.find(name);
        if (it != grads.end()) analytic = &it->second;
        const size_t n = p.size();
        const size_t count = std::min(coords_per_tensor, n);
        for (size_t c = 0; c < count; ++c) {
            const size_t i = count == n ? c : size_t(rng.next_below(n));
            const double orig = double(p.at(i));
            p.at(i) = T(orig + h);
            const double up = loss_of();
            p.at(i) = T(orig - h);
            const double dn = loss_of();
            p.at(i) = T(orig);
            const double fd = (up - dn) / (2 * h);
            const double an = analytic ? double(analytic->at(i)) : 0.0;
            const double rel = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = name;
            }
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Full loop with a line-delimited metrics log.

struct TrainRunConfig {
    OptimConfig optim;
    BatchSpec batch;
    std::string metrics_path;  // empty disables logging
    size_t log_every = 10;
};

template <typename T>
TrainState<T> run_training(Model<T>& model, const std::vector<DatasetPool>& pools,
                           const std::vector<SpeechSample>& concat_pool, const TrainRunConfig& cfg,
                           const std::function<bool(size_t, double)>& should_stop = {}) {
    TrainState<T> state;
    std::ofstream metrics;
    if (!cfg.metrics_path.empty()) {
        metrics.open(cfg.metrics_path);
        if (!metrics) throw IoError("run_training: cannot open " + cfg.metrics_path);
    }
    const auto t0 = std::chrono::steady_clock::now();
    for (size_t step = 0; step < cfg.optim.total_steps; ++step) {
        auto batch = compose_batch(cfg.batch, pools, concat_pool, step);
        const double loss = train_step(state, model, batch, cfg.optim);
        if (metrics.is_open() && (step % cfg.log_every == 0 || step + 1 == cfg.optim.total_steps)) {
            const double ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            metrics << "{\"step\":" << state.step << ",\"loss\":" << loss
                    << ",\"lr\":" << lr_at(cfg.optim, state.step) << ",\"wall_ms\":" << ms << "}\n";
        }
        if (should_stop && should_stop(state.step, loss)) break;
    }
    return state;
}

}  // namespace vsm
