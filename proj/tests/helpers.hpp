#pragma once

// Hand-crafted backends driving the decoding engines in tests: a scripted
// backend with per-position logit rules, and a task oracle that always emits
// the ground-truth answer followed by EOS.

#include <algorithm>
#include <functional>

#include "dllmvar/inference.hpp"
#include "dllmvar/synthetic.hpp"
#include "dllmvar/tokenizer.hpp"

namespace dllmvar::testing {

// Logits are a pure function of the global position; the cache is a length.
struct ScriptedBackend {
    struct Cache {
        std::size_t len = 0;
    };
    struct KV {
        std::size_t n = 0;
    };
    struct StepOut {
        Mat<float> logits;
        KV kv;
    };

    int vocab = 8;
    std::size_t positions = 4096;
    std::function<void(std::size_t global_pos, Eigen::Ref<Eigen::RowVectorXf>)> fill;

    Cache make_cache() const { return {}; }
    std::size_t cache_len(const Cache& c) const { return c.len; }
    std::size_t max_positions() const { return positions; }
    int vocab_size() const { return vocab; }
    void extend(Cache& c, KV&& kv) const { c.len += kv.n; }

    StepOut forward(const Cache& c, std::span<const Token> active) const {
        StepOut out;
        out.logits = Mat<float>::Zero(static_cast<Eigen::Index>(active.size()), vocab);
        for (std::size_t i = 0; i < active.size(); ++i) {
            Eigen::RowVectorXf row = out.logits.row(static_cast<Eigen::Index>(i));
            fill(c.len + i, row);
            out.logits.row(static_cast<Eigen::Index>(i)) = row;
        }
        out.kv.n = active.size();
        return out;
    }
};

/// Always predicts EOS with confidence ~1 at every position.
inline ScriptedBackend eos_everywhere_backend(int vocab = 8) {
    ScriptedBackend b;
    b.vocab = vocab;
    b.fill = [](std::size_t, Eigen::Ref<Eigen::RowVectorXf> row) { row(kEosId) = 100.0f; };
    return b;
}

/// Never predicts EOS; emits a fixed ordinary token with confidence ~1.
inline ScriptedBackend never_eos_backend(Token emit = kNumSpecial, int vocab = 8) {
    ScriptedBackend b;
    b.vocab = vocab;
    b.fill = [emit](std::size_t, Eigen::Ref<Eigen::RowVectorXf> row) { row(emit) = 100.0f; };
    return b;
}

// Decorator that makes EOS unreachable by flooring its logit column.
template <class Inner>
struct EosSuppressedBackend {
    using Cache = typename Inner::Cache;
    using KV = typename Inner::KV;
    using StepOut = typename Inner::StepOut;

    const Inner* inner;

    Cache make_cache() const { return inner->make_cache(); }
    std::size_t cache_len(const Cache& c) const { return inner->cache_len(c); }
    std::size_t max_positions() const { return inner->max_positions(); }
    int vocab_size() const { return inner->vocab_size(); }
    void extend(Cache& c, KV&& kv) const { inner->extend(c, std::move(kv)); }

    StepOut forward(const Cache& c, std::span<const Token> active) const {
        StepOut out = inner->forward(c, active);
        out.logits.col(kEosId).setConstant(-1e4f);
        return out;
    }
};

// Ground-truth oracle over the synthetic task grammar. The prompt is captured
// on the first forward of a session (prefill, or the fixed engine's
// mask-delimited first step); every generated position then scores the
// correct answer token (or EOS past the answer) with confidence ~1.
class AnswerOracleBackend {
public:
    struct Cache {
        std::size_t len = 0;
    };
    struct KV {
        std::size_t n = 0;
    };
    struct StepOut {
        Mat<float> logits;
        KV kv;
    };

    AnswerOracleBackend(const Tokenizer& tok, std::size_t max_positions = 4096)
        : tok_(&tok), positions_(max_positions) {}

    Cache make_cache() const { return {}; }
    std::size_t cache_len(const Cache& c) const { return c.len; }
    std::size_t max_positions() const { return positions_; }
    int vocab_size() const { return tok_->vocab_size(); }
    void extend(Cache& c, KV&& kv) const { c.len += kv.n; }

    StepOut forward(const Cache& c, std::span<const Token> active) const {
        if (c.len == 0) {
            auto first_mask = std::find(active.begin(), active.end(), kMaskId);
            prompt_.assign(active.begin(), first_mask);
            answer_ = tok_->encode(expected_response(tok_->decode(prompt_)));
        }
        StepOut out;
        out.logits = Mat<float>::Constant(static_cast<Eigen::Index>(active.size()), vocab_size(), -50.0f);
        for (std::size_t i = 0; i < active.size(); ++i) {
            const std::size_t global = c.len + i;
            Token target = kEosId;
            if (global < prompt_.size()) {
                target = prompt_[global];
            } else if (global - prompt_.size() < answer_.size()) {
                target = answer_[global - prompt_.size()];
            }
            out.logits(static_cast<Eigen::Index>(i), target) = 50.0f;
        }
        out.kv.n = active.size();
        return out;
    }

private:
    const Tokenizer* tok_;
    std::size_t positions_;
    mutable TokenSeq prompt_;
    mutable TokenSeq answer_;
};

}  // namespace dllmvar::testing
