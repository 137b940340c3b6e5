#pragma once

// Byte-level pair-merge tokenizer with four reserved protocol tokens.
//
// Id layout: 0..3 are SEP, DST, EOS, PAD; 4..259 are the raw bytes; every
// learned merge appends one id after that. Raw text can never produce a
// special id because specials are not bytes and never appear in a merge.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mdrg {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

namespace special {
inline constexpr TokenId kSep = 0;
inline constexpr TokenId kDst = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kPad = 3;
inline constexpr TokenId kCount = 4;
}  // namespace special

inline constexpr int kAlphabetSize = 256;
inline constexpr TokenId kFirstByteId = special::kCount;
inline constexpr TokenId kFirstMergeId = kFirstByteId + kAlphabetSize;
inline constexpr int kDefaultVocabSize = 512;

inline constexpr std::array<std::string_view, 4> kSpecialNames = {"[SEP]", "[DST]", "[EOS]", "[PAD]"};

class Vocab {
public:
    Vocab() { rebuild(); }

    /// Learn merges greedily until `target_size` ids exist or no pair occurs
    /// at least twice. Ties go to the lexicographically smallest byte pair.
    template <class Range>
    static Vocab train(const Range& corpus, int target_size);

    static Vocab from_json(const nlohmann::json& j);
    static Vocab load(const std::string& path);

    nlohmann::json to_json() const;
    void save(const std::string& path) const;

    TokenSeq encode(std::string_view text) const;
    std::string decode(const TokenSeq& seq) const;

    int size() const { return static_cast<int>(entries_.size()); }
    const std::vector<std::pair<TokenId, TokenId>>& merges() const { return merges_; }
    /// Raw byte string an id stands for (specials map to their marker).
    const std::string& entry(TokenId id) const { return entries_.at(static_cast<std::size_t>(id)); }
    static bool is_special(TokenId id) { return id >= 0 && id < special::kCount; }

    friend bool operator==(const Vocab& a, const Vocab& b) { return a.merges_ == b.merges_; }

private:
    explicit Vocab(std::vector<std::pair<TokenId, TokenId>> merges) : merges_(std::move(merges)) { rebuild(); }

    void rebuild();

    std::vector<std::pair<TokenId, TokenId>> merges_;
    std::vector<std::string> entries_;
    std::map<std::pair<TokenId, TokenId>, TokenId> rank_;  // pair -> merged id
};

inline void Vocab::rebuild() {
    entries_.clear();
    rank_.clear();
    for (auto name : kSpecialNames) {
        entries_.emplace_back(name);
    }
    for (int b = 0; b < kAlphabetSize; ++b) {
        entries_.emplace_back(1, static_cast<char>(b));
    }
    for (const auto& [a, b] : merges_) {
        const auto next = static_cast<TokenId>(entries_.size());
        if (a < kFirstByteId || b < kFirstByteId || a >= next || b >= next) {
            throw std::invalid_argument("vocab: merge references invalid id");
        }
        entries_.push_back(entries_[a] + entries_[b]);
        rank_.emplace(std::make_pair(a, b), next);
    }
}

namespace detail {

inline TokenSeq bytes_to_ids(std::string_view text) {
    TokenSeq ids;
    ids.reserve(text.size());
    for (unsigned char c : text) {
        ids.push_back(kFirstByteId + static_cast<TokenId>(c));
    }
    return ids;
}

// Replace every non-overlapping occurrence of (a, b), left to right.
inline void apply_merge(TokenSeq& seq, TokenId a, TokenId b, TokenId merged) {
    std::size_t out = 0;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (i + 1 < seq.size() && seq[i] == a && seq[i + 1] == b) {
            seq[out++] = merged;
            ++i;
        } else {
            seq[out++] = seq[i];
        }
    }
    seq.resize(out);
}

}  // namespace detail

template <class Range>
Vocab Vocab::train(const Range& corpus, int target_size) {
    // Deduplicate lines with multiplicities; order of first appearance kept.
    std::vector<std::pair<TokenSeq, std::int64_t>> words;
    std::unordered_map<std::string, std::size_t> index;
    for (const auto& line : corpus) {
        std::string s(line);
        auto [it, fresh] = index.emplace(s, words.size());
        if (fresh) {
            words.emplace_back(detail::bytes_to_ids(s), 1);
        } else {
            words[it->second].second += 1;
        }
    }
    if (words.empty()) {
        throw std::invalid_argument("train_vocab: empty corpus");
    }
    if (target_size < kFirstMergeId) {
        throw std::invalid_argument("train_vocab: target_size " + std::to_string(target_size) +
                                    " is below alphabet (256) + 4 special tokens");
    }

    std::vector<std::pair<TokenId, TokenId>> merges;
    std::vector<std::string> entries;
    for (auto name : kSpecialNames) entries.emplace_back(name);
    for (int b = 0; b < kAlphabetSize; ++b) entries.emplace_back(1, static_cast<char>(b));

    while (static_cast<int>(entries.size()) < target_size) {
        std::map<std::pair<TokenId, TokenId>, std::int64_t> counts;
        for (const auto& [seq, mult] : words) {
            for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
                counts[{seq[i], seq[i + 1]}] += mult;
            }
        }
        std::int64_t best_count = 0;
        std::pair<TokenId, TokenId> best{};
        const std::string* best_a = nullptr;
        const std::string* best_b = nullptr;
        for (const auto& [pair, count] : counts) {
            if (count < 2) continue;
            const auto& sa = entries[pair.first];
            const auto& sb = entries[pair.second];
            bool better = count > best_count;
            if (!better && count == best_count) {
                better = std::tie(sa, sb) < std::tie(*best_a, *best_b);
            }
            if (better) {
                best_count = count;
                best = pair;
                best_a = &sa;
                best_b = &sb;
            }
        }
        if (best_count < 2) break;
        const auto merged = static_cast<TokenId>(entries.size());
        entries.push_back(entries[best.first] + entries[best.second]);
        merges.push_back(best);
        for (auto& [seq, mult] : words) {
            detail::apply_merge(seq, best.first, best.second, merged);
        }
    }
    return Vocab(std::move(merges));
}

inline TokenSeq Vocab::encode(std::string_view text) const {
    TokenSeq seq = detail::bytes_to_ids(text);
    // Merge the adjacent pair with the earliest training rank until none
    // remain; equivalent to replaying merges in training order.
    while (seq.size() >= 2) {
        TokenId best_id = -1;
        for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
            auto it = rank_.find({seq[i], seq[i + 1]});
            if (it != rank_.end() && (best_id < 0 || it->second < best_id)) {
                best_id = it->second;
            }
        }
        if (best_id < 0) break;
        const auto& pair = merges_[static_cast<std::size_t>(best_id - kFirstMergeId)];
        detail::apply_merge(seq, pair.first, pair.second, best_id);
    }
    return seq;
}

inline std::string Vocab::decode(const TokenSeq& seq) const {
    std::string out;
    for (TokenId id : seq) {
        if (id < 0 || id >= size()) {
            throw std::out_of_range("decode: token id " + std::to_string(id) + " outside vocab of size " +
                                    std::to_string(size()));
        }
        if (id == special::kPad) continue;
        out += entries_[static_cast<std::size_t>(id)];
    }
    return out;
}

inline nlohmann::json Vocab::to_json() const {
    nlohmann::json j;
    j["version"] = 1;
    j["specials"] = std::vector<std::string>(kSpecialNames.begin(), kSpecialNames.end());
    j["alphabet_size"] = kAlphabetSize;
    auto arr = nlohmann::json::array();
    for (const auto& [a, b] : merges_) {
        arr.push_back({a, b});
    }
    j["merges"] = std::move(arr);
    return j;
}

inline Vocab Vocab::from_json(const nlohmann::json& j) {
    if (j.value("version", 0) != 1) {
        throw std::invalid_argument("vocab: unsupported version");
    }
    if (j.at("alphabet_size").get<int>() != kAlphabetSize) {
        throw std::invalid_argument("vocab: alphabet_size must be 256");
    }
    const auto specials = j.at("specials").get<std::vector<std::string>>();
    if (specials != std::vector<std::string>(kSpecialNames.begin(), kSpecialNames.end())) {
        throw std::invalid_argument("vocab: specials must be [SEP],[DST],[EOS],[PAD] in that order");
    }
    std::vector<std::pair<TokenId, TokenId>> merges;
    for (const auto& m : j.at("merges")) {
        merges.emplace_back(m.at(0).get<TokenId>(), m.at(1).get<TokenId>());
    }
    return Vocab(std::move(merges));
}

inline void Vocab::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write vocab file " + path);
    out << to_json().dump() << '\n';
}

inline Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read vocab file " + path);
    return from_json(nlohmann::json::parse(in));
}

}  // namespace mdrg
