#pragma once

// Text-to-image translator F: one causal stream of description tokens,
// [SEP], and offset image tokens; sampling of image tokens; reranking.

#include "mdrg/image_codec.hpp"
#include "mdrg/match_scorer.hpp"
#include "mdrg/seq_core.hpp"
#include "mdrg/text_tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdrg {

inline constexpr int kMaxDescriptionLength = 32;

/// Id layout of the combined vocabulary: text ids in [0, text_vocab),
/// image tokens in [text_vocab, text_vocab + codebook_size).
struct StreamLayout {
    int text_vocab = 512;
    int codebook_size = 64;
    int image_tokens = 16;  // h * w
    int max_description = kMaxDescriptionLength;

    int vocab_size() const { return text_vocab + codebook_size; }
    int max_len() const { return max_description + 1 + image_tokens; }

    static StreamLayout from(int text_vocab, const CodecConfig& codec) {
        return {text_vocab, codec.codebook_size, codec.cells(), kMaxDescriptionLength};
    }
    /// Model config sized for this layout.
    SeqModelConfig model_config(int layers, int heads, int hidden) const {
        SeqModelConfig c;
        c.vocab_size = vocab_size();
        c.layers = layers;
        c.heads = heads;
        c.hidden = hidden;
        c.max_len = max_len();
        return c;
    }
    friend bool operator==(const StreamLayout&, const StreamLayout&) = default;
};

inline void to_json(nlohmann::json& j, const StreamLayout& l) {
    j = {{"text_vocab", l.text_vocab}, {"codebook_size", l.codebook_size}, {"image_tokens", l.image_tokens},
         {"max_description", l.max_description}};
}

inline void from_json(const nlohmann::json& j, StreamLayout& l) {
    l.text_vocab = j.at("text_vocab").get<int>();
    l.codebook_size = j.at("codebook_size").get<int>();
    l.image_tokens = j.at("image_tokens").get<int>();
    l.max_description = j.at("max_description").get<int>();
}

struct JointStream {
    TokenSeq tokens;
    std::size_t boundary = 0;  // index of the separating [SEP]
    friend bool operator==(const JointStream&, const JointStream&) = default;
};

/// Description tokens, cut to the layout's maximum description length.
inline TokenSeq description_tokens(const Vocab& v, const std::string& description, const StreamLayout& l) {
    TokenSeq c = v.encode(description);
    if (static_cast<int>(c.size()) > l.max_description) c.resize(static_cast<std::size_t>(l.max_description));
    return c;
}

inline JointStream build_stream(const StreamLayout& l, const TokenSeq& c, const ImageTokenSeq& s) {
    if (static_cast<int>(c.size()) > l.max_description) {
        throw std::invalid_argument("build_stream: description of " + std::to_string(c.size()) +
                                    " tokens exceeds maximum " + std::to_string(l.max_description));
    }
    if (static_cast<int>(s.size()) != l.image_tokens) {
        throw std::invalid_argument("build_stream: expected " + std::to_string(l.image_tokens) +
                                    " image tokens, got " + std::to_string(s.size()));
    }
    JointStream x;
    x.tokens.reserve(c.size() + 1 + s.size());
    for (auto id : c) {
        if (id < 0 || id >= l.text_vocab) throw std::out_of_range("build_stream: text id outside text vocabulary");
        x.tokens.push_back(id);
    }
    x.boundary = x.tokens.size();
    x.tokens.push_back(special::kSep);
    for (int k : s) {
        if (k < 0 || k >= l.codebook_size) throw std::out_of_range("build_stream: image token outside codebook");
        x.tokens.push_back(l.text_vocab + k);
    }
    return x;
}

inline std::pair<TokenSeq, ImageTokenSeq> unbuild(const StreamLayout& l, const JointStream& x) {
    if (x.boundary >= x.tokens.size() || x.tokens[x.boundary] != special::kSep ||
        static_cast<int>(x.tokens.size() - x.boundary - 1) != l.image_tokens) {
        throw std::invalid_argument("unbuild: malformed stream");
    }
    TokenSeq c(x.tokens.begin(), x.tokens.begin() + static_cast<std::ptrdiff_t>(x.boundary));
    ImageTokenSeq s;
    for (std::size_t i = x.boundary + 1; i < x.tokens.size(); ++i) s.push_back(x.tokens[i] - l.text_vocab);
    return {std::move(c), std::move(s)};
}

/// Every position of the stream is scored: text, [SEP] and image tokens.
inline LossExample f_example(const JointStream& x) { return LossExample::all_positions(x.tokens); }

template <class T>
double loss_F(const SeqParams<T>& f, const std::vector<JointStream>& streams, SeqParams<T>* grad = nullptr,
              T grad_scale = T(1)) {
    std::vector<LossExample> batch;
    batch.reserve(streams.size());
    for (const auto& x : streams) batch.push_back(f_example(x));
    return nll_loss_and_grad<T>(f, batch, grad, grad_scale);
}

/// n ancestral samples of h*w image tokens conditioned on c ++ [SEP].
/// Sample i draws from its own stream (seed, i), so results do not depend
/// on evaluation order. Returned ids are codebook indices.
template <class T>
std::vector<ImageTokenSeq> generate_image_tokens(const SeqParams<T>& f, const StreamLayout& l, const TokenSeq& c,
                                                 int n_samples, double temperature, std::uint64_t seed) {
    if (n_samples < 1) throw std::invalid_argument("generate_image_tokens: n_samples must be >= 1");
    if (f.config.vocab_size != l.vocab_size()) {
        throw std::invalid_argument("generate_image_tokens: model vocabulary does not match stream layout");
    }
    TokenSeq prefix = c;
    prefix.push_back(special::kSep);
    std::vector<ImageTokenSeq> out;
    out.reserve(static_cast<std::size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) {
        auto rng = make_rng(seed, {0x1A6Eull, static_cast<std::uint64_t>(i)});
        const TokenSeq ids =
            sample_tokens(f, prefix, l.image_tokens, l.text_vocab, l.vocab_size(), temperature, rng);
        ImageTokenSeq s;
        s.reserve(ids.size());
        for (auto id : ids) s.push_back(id - l.text_vocab);
        out.push_back(std::move(s));
    }
    return out;
}

template <class T>
ImageTensor tokens_to_image(const CodecParams<T>& codec, const ImageTokenSeq& s) {
    const auto& cfg = codec.config;
    return decode(codec, indices_to_codes(codec.codebook, s, cfg.grid_h, cfg.grid_w));
}

/// Candidate order by descending score; equal scores keep generation order.
inline std::vector<std::size_t> rerank(const MatchScorer& scorer, const std::string& description,
                                       const std::vector<ImageTensor>& candidates) {
    if (candidates.empty()) throw std::invalid_argument("rerank: no candidates");
    std::vector<double> scores;
    scores.reserve(candidates.size());
    for (const auto& img : candidates) scores.push_back(scorer.score(description, img));
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

}  // namespace mdrg
