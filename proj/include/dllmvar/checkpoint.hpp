#pragma once

#include <array>
#include <fstream>
#include <optional>

#include "dllmvar/common.hpp"
#include "dllmvar/model.hpp"

namespace dllmvar {

// Versioned binary checkpoint, little-endian throughout:
//   magic "DLLMVAR\0" | u32 version | u32 flags (bit0 = optimizer state)
//   config: u32 vocab_size, dim, n_layers, n_heads, max_positions; u64 seed
//   u64 param_count | f32 params
//   if flags&1: u64 step | f32 adam_m | f32 adam_v  (same count as params)
inline constexpr std::array<char, 8> kCheckpointMagic = {'D', 'L', 'L', 'M', 'V', 'A', 'R', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct OptimizerState {
    std::vector<float> m, v;
    std::int64_t step = 0;
};

struct Checkpoint {
    Parameters<float> params;
    std::optional<OptimizerState> opt;
};

inline void save_checkpoint(const std::string& path, const Parameters<float>& params,
                            const OptimizerState* opt = nullptr) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    le::write<std::uint32_t>(os, kCheckpointVersion);
    le::write<std::uint32_t>(os, opt ? 1u : 0u);
    const ModelConfig& c = params.config;
    le::write<std::uint32_t>(os, static_cast<std::uint32_t>(c.vocab_size));
    le::write<std::uint32_t>(os, static_cast<std::uint32_t>(c.dim));
    le::write<std::uint32_t>(os, static_cast<std::uint32_t>(c.n_layers));
    le::write<std::uint32_t>(os, static_cast<std::uint32_t>(c.n_heads));
    le::write<std::uint32_t>(os, static_cast<std::uint32_t>(c.max_positions));
    le::write<std::uint64_t>(os, c.seed);
    le::write<std::uint64_t>(os, params.data.size());
    le::write_f32_blob(os, params.data);
    if (opt) {
        if (opt->m.size() != params.data.size() || opt->v.size() != params.data.size())
            throw std::invalid_argument("checkpoint: optimizer state size mismatch");
        le::write<std::uint64_t>(os, static_cast<std::uint64_t>(opt->step));
        le::write_f32_blob(os, opt->m);
        le::write_f32_blob(os, opt->v);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    std::array<char, 8> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kCheckpointMagic) throw std::runtime_error("checkpoint: bad magic");
    const auto version = le::read<std::uint32_t>(is);
    if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version");
    const auto flags = le::read<std::uint32_t>(is);

    Checkpoint ckpt;
    ModelConfig& c = ckpt.params.config;
    c.vocab_size = static_cast<int>(le::read<std::uint32_t>(is));
    c.dim = static_cast<int>(le::read<std::uint32_t>(is));
    c.n_layers = static_cast<int>(le::read<std::uint32_t>(is));
    c.n_heads = static_cast<int>(le::read<std::uint32_t>(is));
    c.max_positions = static_cast<int>(le::read<std::uint32_t>(is));
    c.seed = le::read<std::uint64_t>(is);
    c.validate();
    const auto count = le::read<std::uint64_t>(is);
    if (count != ParamLayout(c).total()) throw std::runtime_error("checkpoint: parameter count does not match config");
    ckpt.params.data.resize(count);
    le::read_f32_blob(is, ckpt.params.data);
    if (flags & 1u) {
        OptimizerState opt;
        opt.step = static_cast<std::int64_t>(le::read<std::uint64_t>(is));
        opt.m.resize(count);
        opt.v.resize(count);
        le::read_f32_blob(is, opt.m);
        le::read_f32_blob(is, opt.v);
        ckpt.opt = std::move(opt);
    }
    return ckpt;
}

}  // namespace dllmvar
