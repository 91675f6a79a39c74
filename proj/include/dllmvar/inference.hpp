#pragma once

#include <chrono>
#include <optional>
#include <random>

#include "dllmvar/common.hpp"
#include "dllmvar/model.hpp"

namespace dllmvar {

struct DecodeConfig {
    int block_size = 64;
    double confidence_threshold = 0.9;
    int max_blocks = 16;
    bool greedy = true;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    bool eager_eos = false;  // ablation: stop as soon as an EOS commits mid-block
    int quota = 1024;        // fixed-engine generation budget

    void validate() const {
        if (block_size < 1) throw std::invalid_argument("decode config: block_size must be >= 1");
        if (confidence_threshold <= 0.0 || confidence_threshold > 1.0)
            throw std::invalid_argument("decode config: confidence_threshold must be in (0, 1]");
        if (max_blocks < 1) throw std::invalid_argument("decode config: max_blocks must be >= 1");
        if (temperature <= 0.0) throw std::invalid_argument("decode config: temperature must be > 0");
        if (quota < 0) throw std::invalid_argument("decode config: quota must be >= 0");
    }
};

enum class StopReason { eos, max_blocks };

inline const char* to_string(StopReason r) { return r == StopReason::eos ? "eos" : "max_blocks"; }

struct GenerationResult {
    TokenSeq tokens;  // up to and excluding the first EOS; never MASK/EOS/PAD
    StopReason stop_reason = StopReason::max_blocks;
    std::int64_t steps = 0;             // denoise steps (prompt prefill excluded)
    std::int64_t forward_calls = 0;     // includes the prompt prefill
    std::int64_t positions_computed = 0;
    double wall_ms = 0.0;
    int blocks_used = 0;
    std::int64_t dropped_after_eos = 0;  // non-EOS tokens decoded past the first EOS
    std::optional<std::size_t> eos_index;  // position of the first EOS among generated tokens
};

// Threshold rule: commit every masked position whose confidence reaches the
// threshold; if none qualify, commit the single highest-confidence position.
inline std::vector<std::size_t> select_commits(const std::vector<double>& confidences, double threshold) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < confidences.size(); ++i) {
        if (confidences[i] >= threshold) out.push_back(i);
    }
    if (out.empty() && !confidences.empty()) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < confidences.size(); ++i) {
            if (confidences[i] > confidences[best]) best = i;
        }
        out.push_back(best);
    }
    return out;
}

// Backend over model parameters. The engines are written against this small
// surface so hand-crafted oracle backends can drive them in tests and in the
// bench harness.
template <class Scalar>
class ModelBackend {
public:
    using Cache = PrefixCache<Scalar>;
    using KV = BlockKV<Scalar>;
    struct StepOut {
        Mat<Scalar> logits;
        KV kv;
    };

    explicit ModelBackend(const Parameters<Scalar>& params) : params_(&params) {}

    Cache make_cache() const { return Cache::empty(params_->config); }
    int vocab_size() const { return params_->config.vocab_size; }
    std::size_t max_positions() const { return static_cast<std::size_t>(params_->config.max_positions); }
    std::size_t cache_len(const Cache& c) const { return c.len; }

    StepOut forward(const Cache& cache, std::span<const Token> active) const {
        StepOut out;
        out.logits = dllmvar::forward(*params_, cache, active, &out.kv);
        return out;
    }

    void extend(Cache& cache, KV&& kv) const { extend_cache(cache, kv); }

    const Parameters<Scalar>& params() const { return *params_; }

private:
    const Parameters<Scalar>* params_;
};

namespace detail {

// Token choice and confidence for one masked position. MASK and PAD are never
// prediction candidates (they are never supervision targets in training).
template <class Row>
std::pair<Token, double> choose_token(const Row& logits, const DecodeConfig& cfg, std::mt19937_64& rng) {
    const Eigen::Index v = logits.size();
    Eigen::Index arg = -1;
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < v; ++j) {
        if (j == kMaskId || j == kPadId) continue;
        if (static_cast<double>(logits(j)) > best) {
            best = static_cast<double>(logits(j));
            arg = j;
        }
    }
    const double inv_temp = cfg.greedy ? 1.0 : 1.0 / cfg.temperature;
    double z = 0.0;
    std::vector<double> p(static_cast<std::size_t>(v), 0.0);
    for (Eigen::Index j = 0; j < v; ++j) {
        if (j == kMaskId || j == kPadId) continue;
        p[static_cast<std::size_t>(j)] = std::exp((static_cast<double>(logits(j)) - best) * inv_temp);
        z += p[static_cast<std::size_t>(j)];
    }
    Token chosen = static_cast<Token>(arg);
    if (!cfg.greedy) {
        double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * z;
        double acc = 0.0;
        for (Eigen::Index j = 0; j < v; ++j) {
            acc += p[static_cast<std::size_t>(j)];
            if (acc >= u) {
                chosen = static_cast<Token>(j);
                break;
            }
        }
    }
    return {chosen, p[static_cast<std::size_t>(chosen)] / z};
}

struct NullObserver {
    template <class... Args>
    void operator()(Args&&...) {}
};

}  // namespace detail

// Live decoding state for one block-diffusion session.
template <class Backend>
struct GenerationState {
    typename Backend::Cache cache;
    std::size_t prompt_len = 0;
    TokenSeq active;
    std::vector<std::uint8_t> masked;
    typename Backend::KV last_kv;  // candidate K/V from the most recent forward
    std::int64_t steps = 0;
    std::int64_t forward_calls = 0;
    std::int64_t positions_computed = 0;
    int blocks_completed = 0;
    bool terminated = false;

    std::size_t masked_count() const {
        std::size_t n = 0;
        for (auto m : masked) n += m;
        return n;
    }
};

// One denoising step over the active block: forward over the block against
// the frozen prefix, then commit all masked positions whose confidence clears
// the threshold (single best position as fallback). Committed positions stay
// frozen within the block.
template <class Backend, class Observer = detail::NullObserver>
void decode_block_step(GenerationState<Backend>& state, const Backend& backend, const DecodeConfig& cfg,
                       std::mt19937_64& rng, Observer&& observe = {}) {
    if (state.masked_count() == 0) throw std::logic_error("decode_block_step: no masked positions");
    auto out = backend.forward(state.cache, state.active);
    observe(state, out.logits);

    std::vector<std::size_t> masked_idx;
    std::vector<double> confidences;
    std::vector<Token> choices;
    for (std::size_t i = 0; i < state.active.size(); ++i) {
        if (!state.masked[i]) continue;
        auto [tok, conf] = detail::choose_token(out.logits.row(static_cast<Eigen::Index>(i)), cfg, rng);
        masked_idx.push_back(i);
        choices.push_back(tok);
        confidences.push_back(conf);
    }
    for (std::size_t sel : select_commits(confidences, cfg.confidence_threshold)) {
        state.active[masked_idx[sel]] = choices[sel];
        state.masked[masked_idx[sel]] = 0;
    }
    state.last_kv = std::move(out.kv);
    state.steps += 1;
    state.forward_calls += 1;
    state.positions_computed += static_cast<std::int64_t>(state.active.size());
}

namespace detail {

inline GenerationResult finalize_result(TokenSeq generated, StopReason reason) {
    GenerationResult res;
    res.stop_reason = reason;
    auto eos = std::find(generated.begin(), generated.end(), kEosId);
    if (eos != generated.end()) {
        res.eos_index = static_cast<std::size_t>(eos - generated.begin());
        res.stop_reason = StopReason::eos;
        for (auto it = eos + 1; it != generated.end(); ++it) {
            if (*it != kEosId && *it != kMaskId) res.dropped_after_eos += 1;
        }
        generated.erase(eos, generated.end());
    }
    res.tokens = std::move(generated);
    return res;
}

}  // namespace detail

// Variable-length block-diffusion decoding. The prompt is prefilled into the
// KV cache with prompt-only attention; MASK blocks are appended and denoised
// to completion; a block containing EOS terminates generation, otherwise its
// final-step K/V extend the cache and the next block is appended.
template <class Backend, class Observer = detail::NullObserver>
GenerationResult generate_variable(const Backend& backend, std::span<const Token> prompt, const DecodeConfig& cfg,
                                   Observer&& observe = {}) {
    cfg.validate();
    if (prompt.empty()) throw std::invalid_argument("generate_variable: empty prompt");
    if (prompt.size() + static_cast<std::size_t>(cfg.block_size) > backend.max_positions())
        throw std::invalid_argument("generate_variable: prompt too long for positions budget");
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(mix_seed(cfg.seed, 0xdec0'0000ull));

    GenerationState<Backend> state;
    state.cache = backend.make_cache();
    state.prompt_len = prompt.size();
    {
        auto prefill = backend.forward(state.cache, prompt);
        backend.extend(state.cache, std::move(prefill.kv));
        state.forward_calls += 1;
        state.positions_computed += static_cast<std::int64_t>(prompt.size());
    }

    TokenSeq generated;
    StopReason reason = StopReason::max_blocks;
    for (int b = 0; b < cfg.max_blocks; ++b) {
        if (backend.cache_len(state.cache) + static_cast<std::size_t>(cfg.block_size) > backend.max_positions()) break;
        state.active.assign(static_cast<std::size_t>(cfg.block_size), kMaskId);
        state.masked.assign(static_cast<std::size_t>(cfg.block_size), 1);
        bool eager_hit = false;
        while (state.masked_count() > 0) {
            decode_block_step(state, backend, cfg, rng, observe);
            if (cfg.eager_eos &&
                std::find(state.active.begin(), state.active.end(), kEosId) != state.active.end()) {
                eager_hit = true;
                break;
            }
        }
        state.blocks_completed += 1;
        generated.insert(generated.end(), state.active.begin(), state.active.end());
        const bool has_eos = std::find(state.active.begin(), state.active.end(), kEosId) != state.active.end();
        if (has_eos || eager_hit) {
            reason = StopReason::eos;
            break;
        }
        if (b + 1 < cfg.max_blocks) backend.extend(state.cache, std::move(state.last_kv));
    }

    GenerationResult res = detail::finalize_result(std::move(generated), reason);
    res.steps = state.steps;
    res.forward_calls = state.forward_calls;
    res.positions_computed = state.positions_computed;
    res.blocks_used = state.blocks_completed;
    res.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

// Fixed-quota pure-diffusion baseline: all Q mask positions are allocated up
// front, every step is a full forward over prompt + Q with no cache, and the
// same confidence rule drives unmasking.
template <class Backend>
GenerationResult generate_fixed(const Backend& backend, std::span<const Token> prompt, const DecodeConfig& cfg) {
    cfg.validate();
    if (prompt.empty()) throw std::invalid_argument("generate_fixed: empty prompt");
    const std::size_t quota = static_cast<std::size_t>(cfg.quota);
    if (prompt.size() + quota > backend.max_positions())
        throw std::invalid_argument("generate_fixed: prompt + quota exceeds positions budget");
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(mix_seed(cfg.seed, 0xf17e'0000ull));

    TokenSeq tokens(prompt.begin(), prompt.end());
    tokens.resize(prompt.size() + quota, kMaskId);
    std::vector<std::uint8_t> masked(quota, 1);

    GenerationResult res;
    std::size_t remaining = quota;
    while (remaining > 0) {
        auto cache = backend.make_cache();
        auto out = backend.forward(cache, tokens);
        std::vector<std::size_t> masked_idx;
        std::vector<double> confidences;
        std::vector<Token> choices;
        for (std::size_t i = 0; i < quota; ++i) {
            if (!masked[i]) continue;
            auto [tok, conf] =
                detail::choose_token(out.logits.row(static_cast<Eigen::Index>(prompt.size() + i)), cfg, rng);
            masked_idx.push_back(i);
            choices.push_back(tok);
            confidences.push_back(conf);
        }
        for (std::size_t sel : select_commits(confidences, cfg.confidence_threshold)) {
            tokens[prompt.size() + masked_idx[sel]] = choices[sel];
            masked[masked_idx[sel]] = 0;
            --remaining;
        }
        res.steps += 1;
        res.forward_calls += 1;
        res.positions_computed += static_cast<std::int64_t>(tokens.size());
    }

    TokenSeq generated(tokens.begin() + static_cast<std::ptrdiff_t>(prompt.size()), tokens.end());
    GenerationResult fin = detail::finalize_result(std::move(generated), StopReason::max_blocks);
    fin.steps = res.steps;
    fin.forward_calls = res.forward_calls;
    fin.positions_computed = res.positions_computed;
    fin.blocks_used = quota > 0 ? 1 : 0;
    fin.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return fin;
}

// Quantifies the frozen-prefix cache approximation. Runs one variable-length
// generation with the cache, recording every step's inputs and logits plus
// the token snapshot of each segment at the moment it was finalized (the
// prompt, and each block's input on its final denoising step). Every step is
// then recomputed cache-free:
//   - oracle: prefix K/V rebuilt from the finalization snapshots, segment by
//     segment (prompt attends to prompt only; block b to prompt + blocks < b
//     + itself). Must match the cached logits to ~working precision.
//   - refreshed (two conventions, reported unbounded): completed blocks use
//     their committed token values and are recomputed against the full
//     context, with the prompt either refreshed too or kept frozen.
struct ProbeReport {
    double max_oracle_divergence = 0.0;
    double max_refreshed_all = 0.0;           // prompt refreshed as well
    double max_refreshed_frozen_prompt = 0.0; // prompt K/V stay prompt-only
    int blocks = 0;
    std::int64_t steps = 0;
    GenerationResult result;
};

template <class Scalar>
ProbeReport cache_divergence_probe(const Parameters<Scalar>& params, std::span<const Token> prompt,
                                   const DecodeConfig& cfg) {
    ModelBackend<Scalar> backend(params);

    struct StepRecord {
        std::size_t segments_done = 0;  // completed blocks cached before this step
        TokenSeq active;
        Mat<Scalar> logits;
        std::size_t masked_before = 0;
    };
    std::vector<StepRecord> steps;
    std::vector<TokenSeq> block_snapshots;  // input tokens at each block's final step
    std::vector<TokenSeq> block_committed;  // committed token values per completed block

    ProbeReport report;
    report.result = generate_variable(
        backend, prompt, cfg,
        [&](const GenerationState<ModelBackend<Scalar>>& state, const Mat<Scalar>& logits) {
            StepRecord rec;
            rec.active = state.active;
            rec.logits = logits;
            rec.masked_before = state.masked_count();
            steps.push_back(std::move(rec));
        });

    // Recover the block structure: a step whose input is fully masked starts a
    // new block; the last step of a completed block is its finalization
    // snapshot. Completed (non-final) blocks contain no EOS, so their
    // committed token values are the corresponding slices of the result.
    {
        std::vector<std::vector<std::size_t>> blocks;
        for (std::size_t i = 0; i < steps.size(); ++i) {
            if (steps[i].masked_before == steps[i].active.size()) blocks.emplace_back();
            blocks.back().push_back(i);
        }
        report.blocks = static_cast<int>(blocks.size());
        report.steps = static_cast<std::int64_t>(steps.size());
        const std::size_t bs = static_cast<std::size_t>(cfg.block_size);
        for (std::size_t b = 0; b + 1 < blocks.size(); ++b) {
            block_snapshots.push_back(steps[blocks[b].back()].active);
            block_committed.emplace_back(report.result.tokens.begin() + static_cast<std::ptrdiff_t>(b * bs),
                                         report.result.tokens.begin() + static_cast<std::ptrdiff_t>((b + 1) * bs));
        }
        for (std::size_t b = 0; b < blocks.size(); ++b)
            for (std::size_t idx : blocks[b]) steps[idx].segments_done = b;
    }

    TokenSeq prompt_vec(prompt.begin(), prompt.end());
    for (const StepRecord& rec : steps) {
        // Frozen-prefix oracle, rebuilt from scratch for this step.
        PrefixCache<Scalar> ocache = PrefixCache<Scalar>::empty(params.config);
        {
            BlockKV<Scalar> kv;
            (void)forward(params, ocache, prompt_vec, &kv);
            extend_cache(ocache, kv);
        }
        for (std::size_t b = 0; b < rec.segments_done; ++b) {
            BlockKV<Scalar> kv;
            (void)forward(params, ocache, block_snapshots[b], &kv);
            extend_cache(ocache, kv);
        }
        Mat<Scalar> oracle_logits = forward(params, ocache, rec.active);
        report.max_oracle_divergence =
            std::max(report.max_oracle_divergence,
                     static_cast<double>((oracle_logits - rec.logits).cwiseAbs().maxCoeff()));

        // Refreshed recompute, committed token values for completed blocks.
        TokenSeq ctx = prompt_vec;
        for (std::size_t b = 0; b < rec.segments_done; ++b)
            ctx.insert(ctx.end(), block_committed[b].begin(), block_committed[b].end());

        {
            TokenSeq full = ctx;
            full.insert(full.end(), rec.active.begin(), rec.active.end());
            Mat<Scalar> all_logits = forward_full(std::span<const Token>(full), params)
                                         .bottomRows(static_cast<Eigen::Index>(rec.active.size()));
            report.max_refreshed_all =
                std::max(report.max_refreshed_all,
                         static_cast<double>((all_logits - rec.logits).cwiseAbs().maxCoeff()));
        }
        {
            PrefixCache<Scalar> pcache = PrefixCache<Scalar>::empty(params.config);
            BlockKV<Scalar> kv;
            (void)forward(params, pcache, prompt_vec, &kv);
            extend_cache(pcache, kv);
            TokenSeq tail(ctx.begin() + static_cast<std::ptrdiff_t>(prompt_vec.size()), ctx.end());
            tail.insert(tail.end(), rec.active.begin(), rec.active.end());
            Mat<Scalar> fp_logits = forward(params, pcache, tail)
                                        .bottomRows(static_cast<Eigen::Index>(rec.active.size()));
            report.max_refreshed_frozen_prompt =
                std::max(report.max_refreshed_frozen_prompt,
                         static_cast<double>((fp_logits - rec.logits).cwiseAbs().maxCoeff()));
        }
    }
    return report;
}

}  // namespace dllmvar
