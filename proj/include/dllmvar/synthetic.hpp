#pragma once

#include <fstream>
#include <random>
#include <string>

#include <nlohmann/json.hpp>

#include "dllmvar/common.hpp"
#include "dllmvar/packing.hpp"
#include "dllmvar/tokenizer.hpp"

namespace dllmvar {

enum class TaskKind { copy, reverse, addition, repeat_n };

inline TaskKind task_kind_from_string(const std::string& s) {
    if (s == "copy") return TaskKind::copy;
    if (s == "reverse") return TaskKind::reverse;
    if (s == "addition") return TaskKind::addition;
    if (s == "repeat-n") return TaskKind::repeat_n;
    throw std::invalid_argument("unknown task kind: " + s);
}

// Prompt grammar (answers have deterministic, variable-length ground truth):
//   copy      c:PAYLOAD    -> PAYLOAD
//   reverse   r:PAYLOAD    -> reversed PAYLOAD
//   addition  a:X+Y        -> decimal sum
//   repeat-n  p:N:UNIT     -> UNIT repeated N times
struct SyntheticTaskSpec {
    TaskKind kind = TaskKind::copy;
    int min_len = 5;   // payload length (copy/reverse/repeat unit), digits per operand (addition)
    int max_len = 20;
    int count = 1000;
    std::string alphabet = "0123456789";
    // Optional marker appended to every payload (e.g. "."). Gives answers a
    // content-visible end boundary so EOS placement can be learned from
    // context rather than from mask-run geometry; small models need the cue.
    std::string terminal;
};

struct TextPair {
    std::string prompt;
    std::string response;
};

/// Ground-truth answer for a synthetic prompt.
inline std::string expected_response(const std::string& prompt) {
    if (prompt.size() < 3 || prompt[1] != ':') throw std::invalid_argument("not a synthetic prompt: " + prompt);
    const std::string body = prompt.substr(2);
    switch (prompt[0]) {
        case 'c':
            return body;
        case 'r':
            return std::string(body.rbegin(), body.rend());
        case 'a': {
            auto plus = body.find('+');
            if (plus == std::string::npos) throw std::invalid_argument("bad addition prompt: " + prompt);
            return std::to_string(std::stoll(body.substr(0, plus)) + std::stoll(body.substr(plus + 1)));
        }
        case 'p': {
            auto colon = body.find(':');
            if (colon == std::string::npos) throw std::invalid_argument("bad repeat prompt: " + prompt);
            const long n = std::stol(body.substr(0, colon));
            const std::string unit = body.substr(colon + 1);
            std::string out;
            for (long i = 0; i < n; ++i) out += unit;
            return out;
        }
        default:
            throw std::invalid_argument("unknown task prefix: " + prompt);
    }
}

inline std::vector<TextPair> gen_corpus(const SyntheticTaskSpec& spec, std::uint64_t seed) {
    if (spec.alphabet.empty()) throw std::invalid_argument("gen_corpus: empty alphabet");
    if (spec.min_len < 1 || spec.max_len < spec.min_len) throw std::invalid_argument("gen_corpus: bad length range");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> len_dist(spec.min_len, spec.max_len);
    std::uniform_int_distribution<std::size_t> chr(0, spec.alphabet.size() - 1);
    auto payload = [&](int len) {
        std::string s;
        for (int i = 0; i < len; ++i) s += spec.alphabet[chr(rng)];
        return s + spec.terminal;
    };

    std::vector<TextPair> out;
    out.reserve(static_cast<std::size_t>(spec.count));
    for (int i = 0; i < spec.count; ++i) {
        TextPair pair;
        switch (spec.kind) {
            case TaskKind::copy:
                pair.prompt = "c:" + payload(len_dist(rng));
                break;
            case TaskKind::reverse:
                pair.prompt = "r:" + payload(len_dist(rng));
                break;
            case TaskKind::addition: {
                auto operand = [&](int digits) {
                    std::uniform_int_distribution<long> d(0, static_cast<long>(std::pow(10, digits)) - 1);
                    return std::to_string(d(rng));
                };
                pair.prompt = "a:" + operand(len_dist(rng)) + "+" + operand(len_dist(rng));
                break;
            }
            case TaskKind::repeat_n: {
                std::uniform_int_distribution<int> reps(2, 5);
                pair.prompt = "p:" + std::to_string(reps(rng)) + ":" + payload(len_dist(rng));
                break;
            }
        }
        pair.response = expected_response(pair.prompt);
        out.push_back(std::move(pair));
    }
    return out;
}

inline void write_corpus(const std::string& path, std::span<const TextPair> pairs) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open corpus for write: " + path);
    for (const TextPair& p : pairs) {
        nlohmann::json j;
        j["prompt"] = p.prompt;
        j["response"] = p.response;
        os << j.dump() << "\n";
    }
}

inline std::vector<TextPair> read_corpus(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open corpus: " + path);
    std::vector<TextPair> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        out.push_back({j.at("prompt").get<std::string>(), j.at("response").get<std::string>()});
    }
    return out;
}

// Seed-stable held-out split: 10% of pairs by content hash. The raw FNV value
// is passed through a finalizer because its low residues are badly skewed on
// short structured strings (mod-10 can miss entire buckets).
inline bool is_holdout(const TextPair& p) {
    return mix_seed(fnv1a(p.prompt + "\x1f" + p.response), 0x401d'0000ull) % 10 == 0;
}

inline Tokenizer tokenizer_for(std::span<const TextPair> pairs) {
    std::vector<std::string> texts;
    texts.reserve(pairs.size() * 2);
    for (const TextPair& p : pairs) {
        texts.push_back(p.prompt);
        texts.push_back(p.response);
    }
    return Tokenizer::from_corpus(texts);
}

inline std::vector<DialoguePair> encode_pairs(std::span<const TextPair> pairs, const Tokenizer& tok) {
    std::vector<DialoguePair> out;
    out.reserve(pairs.size());
    for (const TextPair& p : pairs) out.push_back({tok.encode(p.prompt), tok.encode(p.response)});
    return out;
}

}  // namespace dllmvar
