#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "dllmvar/bench.hpp"
#include "dllmvar/synthetic.hpp"
#include "helpers.hpp"

using namespace dllmvar;
using dllmvar::testing::AnswerOracleBackend;
using dllmvar::testing::eos_everywhere_backend;

TEST_CASE("task ground truths follow the grammar") {
    REQUIRE(expected_response("c:41729") == "41729");
    REQUIRE(expected_response("r:abc") == "cba");
    REQUIRE(expected_response("a:17+25") == "42");
    REQUIRE(expected_response("a:9+9") == "18");
    REQUIRE(expected_response("p:3:ab") == "ababab");
    REQUIRE_THROWS_AS(expected_response("q:zzz"), std::invalid_argument);
}

TEST_CASE("corpus generation is deterministic in the seed") {
    SyntheticTaskSpec spec;
    spec.kind = TaskKind::addition;
    spec.min_len = 1;
    spec.max_len = 2;
    spec.count = 50;
    auto a = gen_corpus(spec, 7);
    auto b = gen_corpus(spec, 7);
    auto c = gen_corpus(spec, 8);
    REQUIRE(a.size() == 50);
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].prompt == b[i].prompt);
        REQUIRE(a[i].response == expected_response(a[i].prompt));
        if (a[i].prompt != c[i].prompt) differs = true;
    }
    REQUIRE(differs);
}

TEST_CASE("corpus JSONL round-trips") {
    SyntheticTaskSpec spec;
    spec.kind = TaskKind::copy;
    spec.min_len = 1;
    spec.max_len = 6;
    spec.count = 20;
    auto pairs = gen_corpus(spec, 3);
    const std::string path = "harness_corpus.jsonl";
    write_corpus(path, pairs);
    auto loaded = read_corpus(path);
    std::remove(path.c_str());
    REQUIRE(loaded.size() == pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        REQUIRE(loaded[i].prompt == pairs[i].prompt);
        REQUIRE(loaded[i].response == pairs[i].response);
    }
}

TEST_CASE("holdout split is stable and roughly a tenth") {
    SyntheticTaskSpec spec;
    spec.kind = TaskKind::copy;
    spec.min_len = 2;
    spec.max_len = 10;
    spec.count = 2000;
    auto pairs = gen_corpus(spec, 5);
    std::size_t held = 0;
    for (const TextPair& p : pairs) {
        REQUIRE(is_holdout(p) == is_holdout(p));  // pure function of content
        if (is_holdout(p)) ++held;
    }
    const double frac = static_cast<double>(held) / static_cast<double>(pairs.size());
    REQUIRE(frac > 0.05);
    REQUIRE(frac < 0.15);
}

TEST_CASE("bench scores a perfect oracle at accuracy 1.0 with honest accounting") {
    std::vector<TextPair> pairs;
    SyntheticTaskSpec spec;
    spec.kind = TaskKind::copy;
    spec.min_len = 2;
    spec.max_len = 6;
    spec.count = 12;
    for (auto& p : gen_corpus(spec, 11)) pairs.push_back(std::move(p));

    Tokenizer tok = tokenizer_for(pairs);
    AnswerOracleBackend backend(tok);
    DecodeConfig cfg;
    cfg.block_size = 4;
    cfg.max_blocks = 4;
    std::vector<int> quotas{8};

    auto out = run_bench(backend, tok, pairs, cfg, quotas);
    REQUIRE(out.summary["variable"]["accuracy"].get<double>() == 1.0);
    REQUIRE(out.summary["fixed_8"]["accuracy"].get<double>() == 1.0);
    REQUIRE(out.summary["variable"]["mean_eos_pos_error"].get<double>() == 0.0);
    REQUIRE(out.records.size() == pairs.size() * 2);

    // Per-record totals must add up to the summary totals.
    std::int64_t vsteps = 0, vpos = 0, fsteps = 0, fpos = 0;
    for (const BenchRecord& r : out.records) {
        REQUIRE(r.correct);
        REQUIRE_FALSE(r.quota_failure);
        if (r.engine == "variable") {
            vsteps += r.steps;
            vpos += r.positions_computed;
        } else {
            REQUIRE(r.engine == "fixed_8");
            fsteps += r.steps;
            fpos += r.positions_computed;
        }
    }
    REQUIRE(out.summary["variable"]["total_steps"].get<std::int64_t>() == vsteps);
    REQUIRE(out.summary["variable"]["total_positions_computed"].get<std::int64_t>() == vpos);
    REQUIRE(out.summary["fixed_8"]["total_steps"].get<std::int64_t>() == fsteps);
    REQUIRE(out.summary["fixed_8"]["total_positions_computed"].get<std::int64_t>() == fpos);
    const double ratio = out.summary["speedup_vs_fixed_8"]["positions_ratio"].get<double>();
    REQUIRE(ratio == Catch::Approx(static_cast<double>(fpos) / static_cast<double>(vpos)));
}

TEST_CASE("undersized quota is marked as a quota failure") {
    std::vector<TextPair> pairs{{"c:abcdef", "abcdef"}};
    Tokenizer tok = tokenizer_for(pairs);
    AnswerOracleBackend backend(tok);
    DecodeConfig cfg;
    cfg.block_size = 4;
    cfg.max_blocks = 4;

    // Quota 6 holds the answer but not its EOS; quota 3 truncates the answer.
    std::vector<int> quotas{3, 6, 10};
    auto out = run_bench(backend, tok, pairs, cfg, quotas);
    for (const BenchRecord& r : out.records) {
        if (r.engine == "fixed_3" || r.engine == "fixed_6") {
            REQUIRE_FALSE(r.correct);
            REQUIRE(r.quota_failure);
        } else {
            REQUIRE(r.correct);
            REQUIRE_FALSE(r.quota_failure);
        }
    }
    REQUIRE(out.summary["fixed_3"]["accuracy"].get<double>() == 0.0);
    REQUIRE(out.summary["fixed_10"]["accuracy"].get<double>() == 1.0);
}

TEST_CASE("eos diagnostics separate missed, premature, and exact stops") {
    std::vector<TextPair> pairs{{"c:abcd", "abcd"}, {"c:xy", "xy"}};
    Tokenizer tok = tokenizer_for(pairs);
    DecodeConfig cfg;
    cfg.block_size = 4;
    cfg.max_blocks = 4;

    SECTION("oracle stops exactly at the answer length") {
        AnswerOracleBackend backend(tok);
        auto diag = eos_diagnostics(backend, tok, pairs, cfg);
        REQUIRE(diag.missed_eos_rate == 0.0);
        REQUIRE(diag.premature_eos_rate == 0.0);
        REQUIRE(diag.mean_abs_eos_error == 0.0);
        REQUIRE(diag.count == 2);
    }
    SECTION("eos-everywhere model is premature on every task") {
        auto backend = eos_everywhere_backend(tok.vocab_size());
        auto diag = eos_diagnostics(backend, tok, pairs, cfg);
        REQUIRE(diag.missed_eos_rate == 0.0);
        REQUIRE(diag.premature_eos_rate == 1.0);
        REQUIRE(diag.mean_abs_eos_error == 3.0);  // |0-4| and |0-2| averaged
    }
}
