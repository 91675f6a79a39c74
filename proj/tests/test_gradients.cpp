#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "dllmvar/model.hpp"

using namespace dllmvar;

namespace {

// <= 1k parameter model for finite-difference checks.
ModelConfig grad_config() {
    ModelConfig cfg;
    cfg.vocab_size = 8;
    cfg.dim = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.max_positions = 16;
    cfg.seed = 77;
    return cfg;
}

NoisedBatch random_batch(const ModelConfig& cfg, std::mt19937_64& rng) {
    std::uniform_int_distribution<Token> tok(0, cfg.vocab_size - 1);
    std::uniform_int_distribution<int> len(4, 10);
    std::uniform_real_distribution<double> unit(0.05, 0.95);
    NoisedBatch batch;
    for (int r = 0; r < 2; ++r) {
        NoisedRow row;
        const int n = len(rng);
        row.t = unit(rng);
        for (int i = 0; i < n; ++i) row.x_0.push_back(tok(rng));
        row.x_t = row.x_0;
        row.mask.assign(static_cast<std::size_t>(n), 0);
        bool any = false;
        for (int i = 0; i < n; ++i) {
            if (unit(rng) < row.t) {
                row.mask[static_cast<std::size_t>(i)] = 1;
                row.x_t[static_cast<std::size_t>(i)] = kMaskId;
                any = true;
            }
        }
        if (!any) {
            row.mask[0] = 1;
            row.x_t[0] = kMaskId;
        }
        batch.rows.push_back(std::move(row));
    }
    return batch;
}

double batch_loss(const NoisedBatch& batch, const Parameters<double>& params) {
    return loss_and_gradients(batch, params).loss;
}

}  // namespace

TEST_CASE("analytic gradients match central finite differences") {
    ModelConfig cfg = grad_config();
    REQUIRE(ParamLayout(cfg).total() <= 1000);
    std::mt19937_64 rng(2024);

    for (int trial = 0; trial < 20; ++trial) {
        cfg.seed = 1000 + static_cast<std::uint64_t>(trial);
        auto params = init_params<double>(cfg);
        auto batch = random_batch(cfg, rng);
        auto lg = loss_and_gradients(batch, params);

        double max_rel = 0.0;
        const double h = 1e-5;
        for (std::size_t i = 0; i < params.data.size(); ++i) {
            const double orig = params.data[i];
            params.data[i] = orig + h;
            const double up = batch_loss(batch, params);
            params.data[i] = orig - h;
            const double down = batch_loss(batch, params);
            params.data[i] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double ad = lg.grads[i];
            const double rel = std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-4});
            max_rel = std::max(max_rel, rel);
        }
        INFO("trial " << trial << " max relative error " << max_rel);
        REQUIRE(max_rel <= 1e-4);
    }
}
