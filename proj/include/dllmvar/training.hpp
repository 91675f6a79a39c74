#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>

#include "dllmvar/checkpoint.hpp"
#include "dllmvar/masking.hpp"
#include "dllmvar/model.hpp"
#include "dllmvar/packing.hpp"

namespace dllmvar {

struct TrainConfig {
    double learning_rate = 1e-3;
    std::int64_t warmup_steps = 50;
    std::int64_t total_steps = 1000;       // ignored when epochs > 0
    std::int64_t epochs = 0;               // alternative stopping mode
    std::size_t batch_size = 16;
    std::size_t L = 256;
    std::uint64_t seed = 0;
    std::int64_t checkpoint_every = 0;     // 0 = only at the end
    LossWeighting weighting = LossWeighting::inverse_t;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (learning_rate <= 0.0) throw std::invalid_argument("train config: learning_rate must be > 0");
        if (epochs == 0 && total_steps <= 0) throw std::invalid_argument("train config: total_steps must be > 0");
        if (warmup_steps < 0) throw std::invalid_argument("train config: warmup_steps must be >= 0");
        if (batch_size == 0 || L == 0) throw std::invalid_argument("train config: zero batch_size or L");
    }
};

/// Cosine ramp over warmup_steps, constant afterwards (no decay).
inline double lr_at(const TrainConfig& cfg, std::int64_t step) {
    if (cfg.warmup_steps <= 0 || step >= cfg.warmup_steps) return cfg.learning_rate;
    return cfg.learning_rate * 0.5 *
           (1.0 - std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps)));
}

struct TrainLogRecord {
    std::int64_t step = 0;
    double loss = 0.0;
    double t_mean = 0.0;
    std::int64_t masked_tokens = 0;
    double wall_ms = 0.0;
};

inline void adam_update(std::vector<float>& params, OptimizerState& opt, const std::vector<float>& grads,
                        const TrainConfig& cfg, double lr) {
    opt.step += 1;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(opt.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double gv = grads[i];
        opt.m[i] = static_cast<float>(b1 * opt.m[i] + (1.0 - b1) * gv);
        opt.v[i] = static_cast<float>(b2 * opt.v[i] + (1.0 - b2) * gv * gv);
        const double mhat = opt.m[i] / bc1;
        const double vhat = opt.v[i] / bc2;
        params[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
}

// One optimizer step: per-row noise level, forward masking, loss/gradients,
// Adam update under the warmup-then-constant schedule. The rng stream is
// derived from (seed, step) so resumed runs replay the exact noise draws.
inline TrainLogRecord train_step(Parameters<float>& params, OptimizerState& opt,
                                 const std::vector<PackedSequence>& batch, const TrainConfig& cfg,
                                 std::int64_t step) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x57e9'0000ull + static_cast<std::uint64_t>(step)));

    NoisedBatch noised;
    double t_sum = 0.0;
    for (const PackedSequence& row : batch) {
        const double t = sample_noise_level(rng);
        t_sum += t;
        noised.rows.push_back(apply_forward_masking(row.tokens, row.roles, t, rng));
        // Fixed EOS masking: every separator position must be supervised.
        const NoisedRow& nr = noised.rows.back();
        for (std::size_t i = 0; i < row.roles.size(); ++i) {
            if (row.roles[i] == Role::eos_separator && !nr.mask[i])
                throw std::logic_error("train_step: EOS position not supervised");
            if (row.roles[i] == Role::prompt && nr.mask[i])
                throw std::logic_error("train_step: prompt position masked");
        }
    }

    LossGrad<float> lg = loss_and_gradients(noised, params, cfg.weighting);
    if (!std::isfinite(lg.loss)) {
        throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(step) +
                                 " (t_mean=" + std::to_string(t_sum / static_cast<double>(batch.size())) +
                                 ", masked=" + std::to_string(lg.masked_count) + ")");
    }
    adam_update(params.data, opt, lg.grads, cfg, lr_at(cfg, step));

    TrainLogRecord rec;
    rec.step = step;
    rec.loss = lg.loss;
    rec.t_mean = t_sum / static_cast<double>(batch.size());
    rec.masked_tokens = lg.masked_count;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

// Full training loop. Batches come from a BatchIterator over the dataset;
// stopping is by total_steps, or by epochs when cfg.epochs > 0. Resuming from
// a saved (params, optimizer) pair replays the identical loss stream because
// batch order and rng draws are pure functions of (seed, step).
class Trainer {
public:
    Trainer(Parameters<float> params, TrainConfig cfg, std::vector<DialoguePair> dataset)
        : params_(std::move(params)), cfg_(cfg), iter_(std::move(dataset), cfg.L, cfg.batch_size, cfg.seed) {
        cfg_.validate();
        opt_.m.assign(params_.data.size(), 0.0f);
        opt_.v.assign(params_.data.size(), 0.0f);
    }

    void restore(OptimizerState opt, std::int64_t start_step) {
        opt_ = std::move(opt);
        // Fast-forward the batch stream; packing is cheap at desk scale.
        for (std::int64_t s = 0; s < start_step; ++s) iter_.next_batch();
        start_step_ = start_step;
    }

    std::int64_t total_steps() const {
        if (cfg_.epochs > 0) {
            std::int64_t total = 0;
            for (std::int64_t e = 0; e < cfg_.epochs; ++e)
                total += static_cast<std::int64_t>(iter_.batches_in_epoch(static_cast<std::size_t>(e)));
            return total;
        }
        return cfg_.total_steps;
    }

    template <class LogFn>
    void run(LogFn&& log, const std::string& checkpoint_path = {}) {
        const std::int64_t total = total_steps();
        for (std::int64_t step = start_step_; step < total; ++step) {
            auto batch = iter_.next_batch();
            log(train_step(params_, opt_, batch, cfg_, step));
            if (!checkpoint_path.empty() && cfg_.checkpoint_every > 0 && (step + 1) % cfg_.checkpoint_every == 0) {
                save_checkpoint(checkpoint_path, params_, &opt_);
            }
        }
        if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, params_, &opt_);
    }

    const Parameters<float>& params() const { return params_; }
    const OptimizerState& optimizer() const { return opt_; }
    std::size_t rejected_pairs() const { return iter_.rejected(); }

private:
    Parameters<float> params_;
    TrainConfig cfg_;
    OptimizerState opt_;
    BatchIterator iter_;
    std::int64_t start_step_ = 0;
};

}  // namespace dllmvar
