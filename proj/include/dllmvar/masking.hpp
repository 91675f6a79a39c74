#pragma once

#include <random>
#include <span>

#include "dllmvar/common.hpp"

namespace dllmvar {

enum class Role : std::uint8_t { prompt, response, eos_separator, pad };

using RoleMap = std::vector<Role>;

/// Noise level t in [0, 1], drawn uniformly.
inline double sample_noise_level(std::mt19937_64& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

struct NoisedRow {
    TokenSeq x_t;
    TokenSeq x_0;
    std::vector<std::uint8_t> mask;  // 1 = replaced by MASK
    double t = 0.0;
};

struct NoisedBatch {
    std::vector<NoisedRow> rows;
};

// Forward noising process. Masking probability per position:
//   prompt / pad      -> 0
//   eos_separator     -> 1  (EOS is always masked so the model must predict it)
//   response (no EOS) -> t
// One uniform draw is consumed per response position, in position order.
inline NoisedRow apply_forward_masking(std::span<const Token> x_0, std::span<const Role> roles, double t,
                                       std::mt19937_64& rng) {
    if (x_0.size() != roles.size()) throw std::invalid_argument("apply_forward_masking: role/sequence length mismatch");
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("apply_forward_masking: t outside [0, 1]");
    NoisedRow row;
    row.t = t;
    row.x_0.assign(x_0.begin(), x_0.end());
    row.x_t.assign(x_0.begin(), x_0.end());
    row.mask.assign(x_0.size(), 0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t i = 0; i < x_0.size(); ++i) {
        switch (roles[i]) {
            case Role::prompt:
            case Role::pad:
                break;
            case Role::eos_separator:
                row.mask[i] = 1;
                break;
            case Role::response:
                if (unit(rng) < t) row.mask[i] = 1;
                break;
        }
        if (row.mask[i]) row.x_t[i] = kMaskId;
    }
    return row;
}

/// Inverse of the masking step; restores x_0 from (x_t, mask, x_0 targets).
inline TokenSeq unmask(std::span<const Token> x_t, std::span<const std::uint8_t> mask, std::span<const Token> x_0) {
    TokenSeq out(x_t.begin(), x_t.end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (mask[i]) out[i] = x_0[i];
    }
    return out;
}

}  // namespace dllmvar
