#pragma once

// Textual response generator G: context flattening, the [DST] target
// protocol, its loss, and beam-search response generation.

#include "mdrg/datasets.hpp"
#include "mdrg/seq_core.hpp"
#include "mdrg/text_tokenizer.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdrg {

struct TargetSpan {
    enum class Kind { text, description };
    Kind kind = Kind::text;
    std::size_t begin = 0;
    std::size_t end = 0;  // exclusive
    friend bool operator==(const TargetSpan&, const TargetSpan&) = default;
};

/// Token target plus a segment map whose spans tile the sequence. Each
/// description span is [DST] ... [SEP]; the final EOS belongs to a text span.
struct GeneratorTarget {
    TokenSeq tokens;
    std::vector<TargetSpan> spans;
};

/// Token form of one turn: its text, or the description of its image.
inline TokenSeq encode_turn(const Utterance& u, const Vocab& v) {
    if (u.kind == Utterance::Kind::image) {
        if (u.description.empty()) throw std::invalid_argument("flatten_context: image turn without description");
        return v.encode(u.description);
    }
    return v.encode(u.text);
}

/// Turns joined by [SEP]. When the result would exceed max_len, whole turns
/// are dropped from the front; a single overlong last turn keeps its tail.
inline TokenSeq flatten_context(const DialogueContext& ctx, const Vocab& v, int max_len) {
    if (ctx.turns.empty()) throw std::invalid_argument("flatten_context: empty context");
    if (max_len < 1) throw std::invalid_argument("flatten_context: max_len must be positive");
    std::vector<TokenSeq> turns;
    turns.reserve(ctx.turns.size());
    for (const auto& u : ctx.turns) turns.push_back(encode_turn(u, v));

    const auto limit = static_cast<std::size_t>(max_len);
    std::size_t first = turns.size() - 1;
    std::size_t total = turns.back().size();
    while (first > 0 && total + 1 + turns[first - 1].size() <= limit) {
        total += 1 + turns[first - 1].size();
        --first;
    }
    TokenSeq out;
    for (std::size_t i = first; i < turns.size(); ++i) {
        if (i > first) out.push_back(special::kSep);
        out.insert(out.end(), turns[i].begin(), turns[i].end());
    }
    if (out.size() > limit) out.erase(out.begin(), out.end() - static_cast<std::ptrdiff_t>(limit));
    return out;
}

inline GeneratorTarget build_target(const MultimodalResponse& resp, const Vocab& v) {
    if (resp.segments.empty()) throw std::invalid_argument("build_target: empty response");
    GeneratorTarget g;
    using Seg = ResponseSegment::Kind;
    for (std::size_t i = 0; i < resp.segments.size(); ++i) {
        const auto& s = resp.segments[i];
        const std::size_t begin = g.tokens.size();
        if (s.kind == Seg::image) {
            if (s.text.empty()) throw std::invalid_argument("build_target: image segment without description");
            g.tokens.push_back(special::kDst);
            const auto d = v.encode(s.text);
            g.tokens.insert(g.tokens.end(), d.begin(), d.end());
            g.tokens.push_back(special::kSep);
            g.spans.push_back({TargetSpan::Kind::description, begin, g.tokens.size()});
            continue;
        }
        const auto t = v.encode(s.text);
        g.tokens.insert(g.tokens.end(), t.begin(), t.end());
        const bool more = i + 1 < resp.segments.size();
        if (more) g.tokens.push_back(special::kSep);
        else g.tokens.push_back(special::kEos);
        g.spans.push_back({TargetSpan::Kind::text, begin, g.tokens.size()});
    }
    if (resp.segments.back().kind == Seg::image) {
        g.spans.push_back({TargetSpan::Kind::text, g.tokens.size(), g.tokens.size() + 1});
        g.tokens.push_back(special::kEos);
    }
    return g;
}

/// Target for a text-only dialogue turn: encode(text) + [EOS].
inline GeneratorTarget text_target(const std::string& text, const Vocab& v) {
    return build_target({"", {{ResponseSegment::Kind::text, text, {}}}}, v);
}

struct ParsedResponse {
    std::vector<ResponseSegment> segments;  // image segments carry the description in `text`
    bool unclosed_description = false;      // DST without closing SEP
    bool degenerate = false;                // no content tokens at all

    bool has_description() const {
        return std::any_of(segments.begin(), segments.end(),
                           [](const auto& s) { return s.kind == ResponseSegment::Kind::image; });
    }
    std::string text() const {
        std::string out;
        for (const auto& s : segments) {
            if (s.kind != ResponseSegment::Kind::text) continue;
            if (!out.empty()) out += ' ';
            out += s.text;
        }
        return out;
    }
    std::string description() const {
        for (const auto& s : segments) {
            if (s.kind == ResponseSegment::Kind::image) return s.text;
        }
        return {};
    }
};

/// Splits generated tokens at DST/SEP boundaries; stops at the first EOS.
/// Never throws on special-id layout.
inline ParsedResponse parse_response_tokens(const TokenSeq& tokens, const Vocab& v) {
    ParsedResponse out;
    TokenSeq cur;
    bool in_desc = false;
    bool any_content = false;
    auto flush = [&](ResponseSegment::Kind kind) {
        if (!cur.empty()) out.segments.push_back({kind, v.decode(cur), {}});
        cur.clear();
    };
    for (auto id : tokens) {
        if (id == special::kEos) break;
        if (id == special::kPad) continue;
        if (id == special::kSep) {
            flush(in_desc ? ResponseSegment::Kind::image : ResponseSegment::Kind::text);
            in_desc = false;
        } else if (id == special::kDst) {
            if (in_desc) out.unclosed_description = true;
            flush(in_desc ? ResponseSegment::Kind::image : ResponseSegment::Kind::text);
            in_desc = true;
        } else {
            cur.push_back(id);
            any_content = true;
        }
    }
    if (in_desc) {
        out.unclosed_description = true;
        flush(ResponseSegment::Kind::image);
    } else {
        flush(ResponseSegment::Kind::text);
    }
    if (!any_content) {
        out.degenerate = true;
        out.segments = {{ResponseSegment::Kind::text, "", {}}};
    }
    return out;
}

/// ctx ++ [SEP] ++ target with only target positions scored.
inline LossExample g_example(const TokenSeq& flat_context, const TokenSeq& target, const SeqModelConfig& cfg) {
    LossExample ex;
    ex.tokens = flat_context;
    ex.tokens.push_back(special::kSep);
    ex.mask.assign(ex.tokens.size(), 0);
    ex.tokens.insert(ex.tokens.end(), target.begin(), target.end());
    ex.mask.resize(ex.tokens.size(), 1);
    if (static_cast<int>(ex.tokens.size()) > cfg.max_len) {
        throw std::invalid_argument("generator example: " + std::to_string(ex.tokens.size()) +
                                    " tokens exceed max_len " + std::to_string(cfg.max_len));
    }
    return ex;
}

/// Context truncated to whatever room the target leaves, then g_example.
inline LossExample g_example(const DialogueContext& ctx, const GeneratorTarget& target, const Vocab& v,
                             const SeqModelConfig& cfg) {
    const int room = cfg.max_len - 1 - static_cast<int>(target.tokens.size());
    if (room < 1) {
        throw std::invalid_argument("generator example: target of " + std::to_string(target.tokens.size()) +
                                    " tokens leaves no room for context within max_len " +
                                    std::to_string(cfg.max_len));
    }
    return g_example(flatten_context(ctx, v, room), target.tokens, cfg);
}

inline DialogueContext text_context(const std::vector<std::string>& turns, const std::string& speaker = "") {
    DialogueContext ctx;
    for (const auto& t : turns) ctx.turns.push_back(Utterance::say(speaker, t));
    return ctx;
}

/// Training example from a text-only dialogue (last turn is the response).
inline LossExample g_example(const TextDialogue& d, const Vocab& v, const SeqModelConfig& cfg) {
    if (d.turns.size() < 2) throw std::invalid_argument("text dialogue needs at least 2 turns");
    const std::vector<std::string> ctx(d.turns.begin(), d.turns.end() - 1);
    return g_example(text_context(ctx), text_target(d.turns.back(), v), v, cfg);
}

inline LossExample g_example(const MultimodalDialogue& d, const Vocab& v, const SeqModelConfig& cfg) {
    return g_example(d.context, build_target(d.response, v), v, cfg);
}

template <class T>
double loss_G(const SeqParams<T>& g, const std::vector<LossExample>& batch, SeqParams<T>* grad = nullptr,
              T grad_scale = T(1)) {
    return nll_loss_and_grad<T>(g, batch, grad, grad_scale);
}

struct GenerateOptions {
    int beam = 5;
    bool pure_text = false;
    int max_new = 40;
};

struct GeneratedResponse {
    TokenSeq tokens;
    ParsedResponse parsed;
    double score = 0.0;
};

/// Context budget used at inference: leaves room for max_new tokens.
inline int inference_context_budget(const SeqModelConfig& cfg, int max_new) {
    const int reserve = std::min(max_new, cfg.max_len / 2);
    return std::max(1, cfg.max_len - 1 - reserve);
}

template <class T>
GeneratedResponse generate_response(const SeqParams<T>& g, const DialogueContext& ctx, const Vocab& v,
                                    const GenerateOptions& opt = {}) {
    TokenSeq prefix = flatten_context(ctx, v, inference_context_budget(g.config, opt.max_new));
    prefix.push_back(special::kSep);
    DecodeOptions d;
    d.beam = opt.beam;
    d.max_new = opt.max_new;
    d.stop_id = special::kEos;
    d.blocked = {special::kPad};
    if (opt.pure_text) d.blocked.insert(special::kDst);
    auto r = beam_decode(g, prefix, d);
    GeneratedResponse out;
    out.tokens = std::move(r.tokens);
    out.score = r.score;
    out.parsed = parse_response_tokens(out.tokens, v);
    return out;
}

}  // namespace mdrg
