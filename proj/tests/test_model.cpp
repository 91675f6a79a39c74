#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "dllmvar/model.hpp"

using namespace dllmvar;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 12;
    cfg.dim = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.max_positions = 64;
    cfg.seed = 123;
    return cfg;
}

TokenSeq random_tokens(std::size_t n, int vocab, std::mt19937_64& rng) {
    std::uniform_int_distribution<Token> d(0, vocab - 1);
    TokenSeq out(n);
    for (auto& t : out) t = d(rng);
    return out;
}

}  // namespace

TEST_CASE("init is deterministic for a fixed seed") {
    auto a = init_params<float>(tiny_config());
    auto b = init_params<float>(tiny_config());
    REQUIRE(a.data == b.data);
}

TEST_CASE("invalid configs are rejected") {
    ModelConfig cfg = tiny_config();
    cfg.dim = 8;
    cfg.n_heads = 3;
    REQUIRE_THROWS_AS(init_params<float>(cfg), std::invalid_argument);
    cfg = tiny_config();
    cfg.vocab_size = 2;
    REQUIRE_THROWS_AS(init_params<float>(cfg), std::invalid_argument);
}

TEST_CASE("parameters are finite and the head has shape vocab x dim") {
    ModelConfig cfg = tiny_config();
    cfg.dim = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    auto p = init_params<float>(cfg);
    for (float v : p.data) REQUIRE(std::isfinite(v));
    auto v = views(p);
    REQUIRE(v.head().rows() == cfg.vocab_size);
    REQUIRE(v.head().cols() == cfg.dim);
}

TEST_CASE("forward is deterministic and shaped (len, vocab)") {
    auto params = init_params<float>(tiny_config());
    std::mt19937_64 rng(1);
    auto tokens = random_tokens(16, params.config.vocab_size, rng);
    auto a = forward_full(std::span<const Token>(tokens), params);
    auto b = forward_full(std::span<const Token>(tokens), params);
    REQUIRE(a.rows() == 16);
    REQUIRE(a.cols() == params.config.vocab_size);
    REQUIRE(a == b);

    TokenSeq one = {3};
    auto c = forward_full(std::span<const Token>(one), params);
    REQUIRE(c.rows() == 1);
    REQUIRE(c.cols() == params.config.vocab_size);
}

TEST_CASE("attention is bidirectional: early token changes late logits") {
    auto params = init_params<float>(tiny_config());
    std::mt19937_64 rng(2);
    auto tokens = random_tokens(16, params.config.vocab_size, rng);
    auto base = forward_full(std::span<const Token>(tokens), params);
    TokenSeq flipped = tokens;
    flipped[0] = (flipped[0] + 1) % params.config.vocab_size;
    auto alt = forward_full(std::span<const Token>(flipped), params);
    REQUIRE((base.row(15) - alt.row(15)).cwiseAbs().maxCoeff() > 0.0f);

    // and the reverse direction (perturbing a late token changes early logits)
    TokenSeq flipped2 = tokens;
    flipped2[15] = (flipped2[15] + 1) % params.config.vocab_size;
    auto alt2 = forward_full(std::span<const Token>(flipped2), params);
    REQUIRE((base.row(0) - alt2.row(0)).cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("sequence length limits are enforced") {
    auto params = init_params<float>(tiny_config());
    std::mt19937_64 rng(3);
    auto tokens = random_tokens(65, params.config.vocab_size, rng);
    REQUIRE_THROWS_AS(forward_full(std::span<const Token>(tokens), params), std::invalid_argument);
}

TEST_CASE("empty cache degenerates to the full forward") {
    auto params = init_params<float>(tiny_config());
    std::mt19937_64 rng(4);
    auto tokens = random_tokens(12, params.config.vocab_size, rng);
    auto full = forward_full(std::span<const Token>(tokens), params);
    auto cache = PrefixCache<float>::empty(params.config);
    auto [cached, kv] = forward_cached(std::span<const Token>(tokens), cache, params);
    REQUIRE(full == cached);
    REQUIRE(kv.k.size() == static_cast<std::size_t>(params.config.n_layers));
    REQUIRE(kv.k[0].rows() == 12);
}

TEST_CASE("cached forward matches the frozen-prefix oracle") {
    auto params = init_params<float>(tiny_config());
    std::mt19937_64 rng(5);
    auto prefix_tokens = random_tokens(10, params.config.vocab_size, rng);
    auto block = random_tokens(8, params.config.vocab_size, rng);

    // Cached route: prefill the prefix, then run the block against it.
    auto cache = PrefixCache<float>::empty(params.config);
    {
        auto [logits, kv] = forward_cached(std::span<const Token>(prefix_tokens), cache, params);
        extend_cache(cache, kv);
    }
    REQUIRE(cache.len == 10);
    auto [cached_logits, block_kv] = forward_cached(std::span<const Token>(block), cache, params);

    // Oracle route: recompute prefix K/V cache-free (prefix attends to prefix
    // only), then let the block attend to those frozen rows plus itself.
    auto ocache = PrefixCache<float>::empty(params.config);
    BlockKV<float> okv;
    (void)forward(params, ocache, prefix_tokens, &okv);
    extend_cache(ocache, okv);
    auto oracle_logits = forward(params, ocache, block);

    REQUIRE((cached_logits - oracle_logits).cwiseAbs().maxCoeff() <= 1e-5f);
}

TEST_CASE("extend_cache appends and affects subsequent reads") {
    auto params = init_params<float>(tiny_config());
    std::mt19937_64 rng(6);
    auto prompt = random_tokens(6, params.config.vocab_size, rng);
    auto block = random_tokens(4, params.config.vocab_size, rng);
    auto probe = random_tokens(4, params.config.vocab_size, rng);

    auto cache = PrefixCache<float>::empty(params.config);
    auto [l0, kv0] = forward_cached(std::span<const Token>(prompt), cache, params);
    extend_cache(cache, kv0);
    REQUIRE(cache.len == prompt.size());

    // Snapshot of prior entries, then extend twice.
    auto k_before = cache.k[0];
    auto [l1, kv1] = forward_cached(std::span<const Token>(block), cache, params);
    auto pre_logits = forward(params, cache, probe);
    extend_cache(cache, kv1);
    REQUIRE(cache.len == prompt.size() + block.size());
    REQUIRE(cache.k[0].topRows(k_before.rows()) == k_before);

    auto post_logits = forward(params, cache, probe);
    REQUIRE((pre_logits - post_logits).cwiseAbs().maxCoeff() > 0.0f);

    auto [l2, kv2] = forward_cached(std::span<const Token>(block), cache, params);
    extend_cache(cache, kv2);
    REQUIRE(cache.len == prompt.size() + 2 * block.size());
}

TEST_CASE("cache length plus active length cannot exceed max_positions") {
    auto params = init_params<float>(tiny_config());
    std::mt19937_64 rng(7);
    auto prompt = random_tokens(60, params.config.vocab_size, rng);
    auto cache = PrefixCache<float>::empty(params.config);
    auto [l, kv] = forward_cached(std::span<const Token>(prompt), cache, params);
    extend_cache(cache, kv);
    auto block = random_tokens(8, params.config.vocab_size, rng);
    REQUIRE_THROWS_AS(forward(params, cache, block), std::invalid_argument);
}

TEST_CASE("zero masked positions give zero loss and zero gradients") {
    auto params = init_params<float>(tiny_config());
    NoisedBatch batch;
    NoisedRow row;
    row.x_0 = {3, 4, 5, 6};
    row.x_t = row.x_0;
    row.mask = {0, 0, 0, 0};
    row.t = 0.5;
    batch.rows.push_back(row);
    auto lg = loss_and_gradients(batch, params);
    REQUIRE(lg.loss == 0.0f);
    REQUIRE(lg.masked_count == 0);
    for (float g : lg.grads) REQUIRE(g == 0.0f);
}

TEST_CASE("duplicating a batch row doubles the summed loss before normalization") {
    auto params = init_params<float>(tiny_config());
    std::mt19937_64 rng(8);
    NoisedRow row;
    row.x_0 = random_tokens(8, params.config.vocab_size, rng);
    row.x_t = row.x_0;
    row.mask.assign(8, 0);
    row.mask[2] = row.mask[5] = 1;
    row.x_t[2] = row.x_t[5] = kMaskId;
    row.t = 0.5;

    NoisedBatch one, two;
    one.rows = {row};
    two.rows = {row, row};
    auto a = loss_and_gradients(one, params);
    auto b = loss_and_gradients(two, params);
    // batch loss is the row sum / row count, so the summed (pre-normalization)
    // loss is count * loss; duplication must double it.
    REQUIRE(2.0 * b.loss == Catch::Approx(2.0 * a.loss).epsilon(1e-6));
}
