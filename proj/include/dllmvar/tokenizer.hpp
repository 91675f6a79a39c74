#pragma once

#include <algorithm>
#include <fstream>
#include <set>
#include <string>
#include <string_view>

#include "dllmvar/common.hpp"

#include <nlohmann/json.hpp>

namespace dllmvar {

// Character-level tokenizer. Ids 0..2 are MASK/EOS/PAD; printable characters
// get ids kNumSpecial + index into the sorted alphabet.
class Tokenizer {
public:
    Tokenizer() = default;

    static Tokenizer from_corpus(std::span<const std::string> texts) {
        std::set<char> chars;
        for (const auto& t : texts) {
            for (char c : t) chars.insert(c);
        }
        Tokenizer tok;
        tok.chars_.assign(chars.begin(), chars.end());
        tok.build_index();
        return tok;
    }

    static Tokenizer from_alphabet(std::string_view alphabet) {
        std::set<char> chars(alphabet.begin(), alphabet.end());
        Tokenizer tok;
        tok.chars_.assign(chars.begin(), chars.end());
        tok.build_index();
        return tok;
    }

    int vocab_size() const { return kNumSpecial + static_cast<int>(chars_.size()); }

    TokenSeq encode(std::string_view text) const {
        TokenSeq out;
        out.reserve(text.size());
        for (char c : text) {
            int id = index_[static_cast<unsigned char>(c)];
            if (id < 0) throw std::runtime_error("tokenizer: character outside vocabulary: '" + std::string(1, c) + "'");
            out.push_back(id);
        }
        return out;
    }

    std::string decode(std::span<const Token> ids) const {
        std::string out;
        out.reserve(ids.size());
        for (Token id : ids) {
            if (id < kNumSpecial || id >= vocab_size()) throw std::runtime_error("tokenizer: id out of character range");
            out.push_back(chars_[static_cast<std::size_t>(id - kNumSpecial)]);
        }
        return out;
    }

    void save(const std::string& path) const {
        nlohmann::json j;
        j["version"] = 1;
        j["chars"] = std::string(chars_.begin(), chars_.end());
        std::ofstream os(path);
        if (!os) throw std::runtime_error("tokenizer: cannot open " + path);
        os << j.dump() << "\n";
    }

    static Tokenizer load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("tokenizer: cannot open " + path);
        nlohmann::json j;
        is >> j;
        if (j.at("version").get<int>() != 1) throw std::runtime_error("tokenizer: unsupported version");
        return from_alphabet(j.at("chars").get<std::string>());
    }

    const std::vector<char>& alphabet() const { return chars_; }

private:
    void build_index() {
        index_.assign(256, -1);
        for (std::size_t i = 0; i < chars_.size(); ++i) {
            index_[static_cast<unsigned char>(chars_[i])] = kNumSpecial + static_cast<int>(i);
        }
    }

    std::vector<char> chars_;
    std::vector<int> index_ = std::vector<int>(256, -1);
};

}  // namespace dllmvar
