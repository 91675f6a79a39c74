#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dllmvar {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

// Reserved ids. Tokenizers allocate ordinary symbols starting at kNumSpecial.
inline constexpr Token kMaskId = 0;
inline constexpr Token kEosId = 1;
inline constexpr Token kPadId = 2;
inline constexpr Token kNumSpecial = 3;

// splitmix64; used to derive independent rng streams from (seed, salt) so
// per-step / per-epoch streams are reproducible without serializing rng state.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// FNV-1a, used for the seed-stable held-out split.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Explicit little-endian binary io for the checkpoint format.
namespace le {

template <class T>
void write(std::ostream& os, T v) {
    static_assert(std::is_arithmetic_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    }
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T read(std::istream& is) {
    static_assert(std::is_arithmetic_v<T>);
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: unexpected end of file");
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    }
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

inline void write_f32_blob(std::ostream& os, std::span<const float> data) {
    for (float v : data) write<float>(os, v);
}

inline void read_f32_blob(std::istream& is, std::span<float> out) {
    for (float& v : out) v = read<float>(is);
}

}  // namespace le

}  // namespace dllmvar
