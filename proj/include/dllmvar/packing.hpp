#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <random>
#include <span>

#include "dllmvar/common.hpp"
#include "dllmvar/masking.hpp"

namespace dllmvar {

struct DialoguePair {
    TokenSeq prompt;
    TokenSeq response;
};

inline void validate_pair(const DialoguePair& pair) {
    if (pair.prompt.empty() || pair.response.empty()) throw std::invalid_argument("dialogue pair: empty side");
    auto check = [](const TokenSeq& seq) {
        for (Token t : seq) {
            if (t == kMaskId || t == kEosId || t == kPadId) throw std::invalid_argument("dialogue pair: reserved token id in text");
        }
    };
    check(pair.prompt);
    check(pair.response);
}

struct PairSpan {
    std::size_t begin = 0;           // first prompt position
    std::size_t response_begin = 0;  // first response position
    std::size_t eos = 0;             // separator position; pair occupies [begin, eos]
};

// Fixed-length training row: pair layout is prompt, response, one EOS
// separator; the remainder is PAD.
struct PackedSequence {
    TokenSeq tokens;
    RoleMap roles;
    std::vector<PairSpan> pairs;

    std::size_t occupied() const { return pairs.empty() ? 0 : pairs.back().eos + 1; }
};

struct PackResult {
    PackedSequence row;
    std::size_t consumed = 0;  // leading pairs placed into this row
};

inline std::size_t packed_len(const DialoguePair& p) { return p.prompt.size() + p.response.size() + 1; }

// Greedy in-order packing: appends pairs until the next one would overflow L.
inline PackResult pack_samples(std::span<const DialoguePair> pairs, std::size_t L) {
    PackResult out;
    out.row.tokens.assign(L, kPadId);
    out.row.roles.assign(L, Role::pad);
    std::size_t pos = 0;
    for (const DialoguePair& pair : pairs) {
        if (pos + packed_len(pair) > L) break;
        PairSpan span;
        span.begin = pos;
        for (Token t : pair.prompt) {
            out.row.tokens[pos] = t;
            out.row.roles[pos] = Role::prompt;
            ++pos;
        }
        span.response_begin = pos;
        for (Token t : pair.response) {
            out.row.tokens[pos] = t;
            out.row.roles[pos] = Role::response;
            ++pos;
        }
        span.eos = pos;
        out.row.tokens[pos] = kEosId;
        out.row.roles[pos] = Role::eos_separator;
        ++pos;
        out.row.pairs.push_back(span);
        ++out.consumed;
    }
    return out;
}

/// Extracts the original pairs back out of a packed row.
inline std::vector<DialoguePair> extract_pairs(const PackedSequence& row) {
    std::vector<DialoguePair> out;
    for (const PairSpan& span : row.pairs) {
        DialoguePair p;
        p.prompt.assign(row.tokens.begin() + static_cast<std::ptrdiff_t>(span.begin),
                        row.tokens.begin() + static_cast<std::ptrdiff_t>(span.response_begin));
        p.response.assign(row.tokens.begin() + static_cast<std::ptrdiff_t>(span.response_begin),
                          row.tokens.begin() + static_cast<std::ptrdiff_t>(span.eos));
        out.push_back(std::move(p));
    }
    return out;
}

// Epoch-deterministic batch stream. Pair order is reshuffled per epoch with
// mix_seed(seed, epoch); rows are packed greedily from the shuffled order and
// grouped into full batches (final partial batch dropped). Pairs that cannot
// fit a row on their own are skipped and counted once at construction.
class BatchIterator {
public:
    BatchIterator(std::vector<DialoguePair> dataset, std::size_t L, std::size_t batch_size, std::uint64_t seed)
        : L_(L), batch_size_(batch_size), seed_(seed) {
        if (dataset.empty()) throw std::invalid_argument("batch_iterator: empty dataset");
        for (auto& pair : dataset) {
            validate_pair(pair);
            if (packed_len(pair) > L_) {
                ++rejected_;
                continue;
            }
            pairs_.push_back(std::move(pair));
        }
        if (pairs_.empty()) throw std::invalid_argument("batch_iterator: no pair fits L");
    }

    std::size_t rejected() const { return rejected_; }
    std::size_t epoch() const { return epoch_; }

    /// Packs one full epoch of rows for the given epoch index.
    std::vector<PackedSequence> pack_epoch(std::size_t epoch) const {
        std::vector<std::size_t> order(pairs_.size());
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(mix_seed(seed_, 0x9e0c'0000ull + epoch));
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<DialoguePair> shuffled;
        shuffled.reserve(order.size());
        for (std::size_t i : order) shuffled.push_back(pairs_[i]);

        std::vector<PackedSequence> rows;
        std::size_t at = 0;
        while (at < shuffled.size()) {
            PackResult res = pack_samples(std::span(shuffled).subspan(at), L_);
            at += res.consumed;
            rows.push_back(std::move(res.row));
        }
        return rows;
    }

    std::vector<PackedSequence> next_batch() {
        while (cursor_ + batch_size_ > rows_.size()) {
            rows_ = pack_epoch(epoch_++);
            cursor_ = 0;
            if (rows_.size() < batch_size_) throw std::invalid_argument("batch_iterator: batch_size exceeds rows per epoch");
        }
        std::vector<PackedSequence> batch(rows_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                          rows_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_size_));
        cursor_ += batch_size_;
        return batch;
    }

    std::size_t batches_in_epoch(std::size_t epoch) const { return pack_epoch(epoch).size() / batch_size_; }

private:
    std::vector<DialoguePair> pairs_;
    std::size_t L_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::size_t rejected_ = 0;

    std::vector<PackedSequence> rows_;
    std::size_t cursor_ = 0;
    std::size_t epoch_ = 0;
};

}  // namespace dllmvar
