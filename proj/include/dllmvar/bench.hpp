#pragma once

#include <algorithm>
#include <cstdlib>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "dllmvar/inference.hpp"
#include "dllmvar/synthetic.hpp"
#include "dllmvar/tokenizer.hpp"

namespace dllmvar {

struct BenchRecord {
    std::size_t task_id = 0;
    std::string engine;  // "variable" or "fixed_<Q>"
    bool correct = false;
    bool quota_failure = false;
    std::string stop_reason;
    std::int64_t emitted_len = 0;
    std::int64_t true_len = 0;
    std::int64_t eos_pos_error = -1;  // -1 when no EOS was emitted
    std::int64_t steps = 0;
    std::int64_t positions_computed = 0;
    double wall_ms = 0.0;

    nlohmann::json to_json() const {
        return {{"task_id", task_id},       {"engine", engine},
                {"correct", correct},       {"quota_failure", quota_failure},
                {"stop_reason", stop_reason}, {"emitted_len", emitted_len},
                {"true_len", true_len},     {"eos_pos_error", eos_pos_error},
                {"steps", steps},           {"positions_computed", positions_computed},
                {"wall_ms", wall_ms}};
    }
};

namespace detail {

template <class Backend>
BenchRecord score_one(const Backend& backend, const Tokenizer& tok, const TextPair& pair, std::size_t id,
                      const DecodeConfig& cfg, bool fixed_engine) {
    BenchRecord rec;
    rec.task_id = id;
    rec.engine = fixed_engine ? "fixed_" + std::to_string(cfg.quota) : "variable";
    rec.true_len = static_cast<std::int64_t>(pair.response.size());
    const TokenSeq prompt = tok.encode(pair.prompt);
    GenerationResult res =
        fixed_engine ? generate_fixed(backend, prompt, cfg) : generate_variable(backend, prompt, cfg);
    rec.stop_reason = to_string(res.stop_reason);
    rec.emitted_len = static_cast<std::int64_t>(res.tokens.size());
    rec.steps = res.steps;
    rec.positions_computed = res.positions_computed;
    rec.wall_ms = res.wall_ms;
    if (res.eos_index) rec.eos_pos_error = std::llabs(static_cast<std::int64_t>(*res.eos_index) - rec.true_len);
    std::string text;
    try {
        text = tok.decode(res.tokens);
    } catch (const std::exception&) {
        text.clear();  // out-of-range ids can only come from pathological models
    }
    rec.correct = (text == pair.response) && res.stop_reason == StopReason::eos;
    if (fixed_engine && !rec.correct && static_cast<std::int64_t>(cfg.quota) < rec.true_len + 1)
        rec.quota_failure = true;  // the budget cannot hold answer + EOS
    return rec;
}

inline nlohmann::json summarize_engine(std::span<const BenchRecord> recs) {
    double correct = 0.0, eos_err_sum = 0.0;
    std::int64_t eos_n = 0, steps = 0, positions = 0;
    double wall = 0.0;
    for (const BenchRecord& r : recs) {
        correct += r.correct ? 1.0 : 0.0;
        if (r.eos_pos_error >= 0) {
            eos_err_sum += static_cast<double>(r.eos_pos_error);
            ++eos_n;
        }
        steps += r.steps;
        positions += r.positions_computed;
        wall += r.wall_ms;
    }
    return {{"count", recs.size()},
            {"accuracy", recs.empty() ? 0.0 : correct / static_cast<double>(recs.size())},
            {"mean_eos_pos_error", eos_n ? eos_err_sum / static_cast<double>(eos_n) : -1.0},
            {"total_steps", steps},
            {"total_positions_computed", positions},
            {"total_wall_ms", wall}};
}

}  // namespace detail

struct BenchOutput {
    std::vector<BenchRecord> records;
    nlohmann::json summary;
};

// Evaluates every pair under the variable engine and under the fixed engine
// at each quota in the sweep. Speed ratios in the summary are
// fixed-at-max-quota totals divided by variable totals, recomputed from the
// per-record fields.
template <class Backend>
BenchOutput run_bench(const Backend& backend, const Tokenizer& tok, std::span<const TextPair> pairs,
                      const DecodeConfig& base_cfg, std::span<const int> quotas) {
    BenchOutput out;
    std::vector<BenchRecord> variable;
    for (std::size_t i = 0; i < pairs.size(); ++i)
        variable.push_back(detail::score_one(backend, tok, pairs[i], i, base_cfg, false));

    std::map<int, std::vector<BenchRecord>> fixed;
    for (int q : quotas) {
        DecodeConfig cfg = base_cfg;
        cfg.quota = q;
        for (std::size_t i = 0; i < pairs.size(); ++i)
            fixed[q].push_back(detail::score_one(backend, tok, pairs[i], i, cfg, true));
    }

    out.summary["variable"] = detail::summarize_engine(variable);
    for (auto& [q, recs] : fixed) out.summary["fixed_" + std::to_string(q)] = detail::summarize_engine(recs);

    if (!quotas.empty()) {
        const int max_q = *std::max_element(quotas.begin(), quotas.end());
        const auto& fx = out.summary["fixed_" + std::to_string(max_q)];
        const auto& vr = out.summary["variable"];
        auto ratio = [&](const char* key) {
            const double denom = vr[key].template get<double>();
            return denom > 0.0 ? fx[key].template get<double>() / denom : 0.0;
        };
        out.summary["speedup_vs_fixed_" + std::to_string(max_q)] = {
            {"steps_ratio", ratio("total_steps")},
            {"positions_ratio", ratio("total_positions_computed")},
            {"wall_ratio", ratio("total_wall_ms")}};
    }

    out.records = std::move(variable);
    for (auto& [q, recs] : fixed) out.records.insert(out.records.end(), recs.begin(), recs.end());
    return out;
}

struct EosDiagnostics {
    double missed_eos_rate = 0.0;     // hit max_blocks without emitting EOS
    double premature_eos_rate = 0.0;  // EOS emitted before the answer was complete
    double mean_abs_eos_error = 0.0;  // over generations that emitted EOS
    std::size_t count = 0;

    nlohmann::json to_json() const {
        return {{"missed_eos_rate", missed_eos_rate},
                {"premature_eos_rate", premature_eos_rate},
                {"mean_abs_eos_error", mean_abs_eos_error},
                {"count", count}};
    }
};

template <class Backend>
EosDiagnostics eos_diagnostics(const Backend& backend, const Tokenizer& tok, std::span<const TextPair> pairs,
                               const DecodeConfig& cfg) {
    EosDiagnostics diag;
    diag.count = pairs.size();
    if (pairs.empty()) return diag;
    double err_sum = 0.0;
    std::size_t eos_n = 0, missed = 0, premature = 0;
    for (const TextPair& pair : pairs) {
        const TokenSeq prompt = tok.encode(pair.prompt);
        GenerationResult res = generate_variable(backend, prompt, cfg);
        if (res.stop_reason == StopReason::max_blocks) {
            ++missed;
            continue;
        }
        const auto true_len = static_cast<std::int64_t>(pair.response.size());
        const auto eos_pos = static_cast<std::int64_t>(*res.eos_index);
        if (eos_pos < true_len) ++premature;
        err_sum += static_cast<double>(std::llabs(eos_pos - true_len));
        ++eos_n;
    }
    diag.missed_eos_rate = static_cast<double>(missed) / static_cast<double>(pairs.size());
    diag.premature_eos_rate = static_cast<double>(premature) / static_cast<double>(pairs.size());
    diag.mean_abs_eos_error = eos_n ? err_sum / static_cast<double>(eos_n) : 0.0;
    return diag;
}

}  // namespace dllmvar
