#include "mdrg/dialogue_generator.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace mdrg;

namespace {

const Vocab& vocab() {
    static const Vocab v = [] {
        SyntheticWorldConfig w;
        w.n_text_dialogues = 200;
        w.n_pairs = 100;
        w.n_multimodal = 100;
        return Vocab::train(corpus_text(generate_synthetic(w, 32)), 320);
    }();
    return v;
}

SeqModelConfig micro(int max_len = 48) {
    SeqModelConfig c;
    c.vocab_size = vocab().size();
    c.layers = 2;
    c.heads = 4;
    c.hidden = 32;
    c.max_len = max_len;
    return c;
}

TokenSeq cat(std::initializer_list<TokenSeq> parts) {
    TokenSeq out;
    for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
}

using Seg = ResponseSegment;
const std::string kDesc = "Objects in the photo: small red circle on the left";

MultimodalResponse mixed_response() {
    return {"B", {{Seg::Kind::text, "sure, here it is", {}}, {Seg::Kind::image, kDesc, {}}, {Seg::Kind::text, "enjoy", {}}}};
}

}  // namespace

TEST(DialogueGenerator, FlattenJoinsTurnsWithSep) {
    const auto& v = vocab();
    const auto flat = flatten_context(text_context({"hi", "yo"}), v, 100);
    EXPECT_EQ(flat, cat({v.encode("hi"), {special::kSep}, v.encode("yo")}));
    DialogueContext img;
    img.turns = {Utterance::photo("A", kDesc, "x.png")};
    EXPECT_EQ(flatten_context(img, v, 100), v.encode(kDesc));
}

TEST(DialogueGenerator, FlattenErrors) {
    EXPECT_THROW(flatten_context(DialogueContext{}, vocab(), 10), std::invalid_argument);
    DialogueContext img;
    img.turns = {Utterance::photo("A", "", "x.png")};
    EXPECT_THROW(flatten_context(img, vocab(), 10), std::invalid_argument);
}

TEST(DialogueGenerator, TruncationDropsExactlyTheOldestTurn) {
    const auto& v = vocab();
    const std::vector<std::string> turns = {"what is your favorite color?", "i like red the most",
                                            "do you like circles?"};
    const auto t1 = v.encode(turns[0]), t2 = v.encode(turns[1]), t3 = v.encode(turns[2]);
    const auto kept = cat({t2, {special::kSep}, t3});
    const int full = static_cast<int>(t1.size() + 1 + kept.size());
    const auto ctx = text_context(turns);
    EXPECT_EQ(static_cast<int>(flatten_context(ctx, v, full).size()), full);
    EXPECT_EQ(flatten_context(ctx, v, full - 1), kept);
    EXPECT_EQ(flatten_context(ctx, v, static_cast<int>(kept.size())), kept);
    EXPECT_EQ(flatten_context(ctx, v, static_cast<int>(kept.size()) - 1), t3);
    // A single turn longer than the budget keeps its tail.
    EXPECT_EQ(flatten_context(ctx, v, 2), TokenSeq(t3.end() - 2, t3.end()));
}

TEST(DialogueGenerator, TargetShapes) {
    const auto& v = vocab();
    const auto a = build_target({"B", {{Seg::Kind::text, "sure", {}}}}, v);
    EXPECT_EQ(a.tokens, cat({v.encode("sure"), {special::kEos}}));

    const auto b = build_target({"B", {{Seg::Kind::image, kDesc, {}}}}, v);
    EXPECT_EQ(b.tokens, cat({{special::kDst}, v.encode(kDesc), {special::kSep, special::kEos}}));

    const auto c = build_target(mixed_response(), v);
    EXPECT_EQ(c.tokens, cat({v.encode("sure, here it is"), {special::kSep, special::kDst}, v.encode(kDesc),
                             {special::kSep}, v.encode("enjoy"), {special::kEos}}));
    EXPECT_THROW(build_target({"B", {}}, v), std::invalid_argument);
}

TEST(DialogueGenerator, SpansTileAndDescriptionsAreDelimited) {
    const auto& v = vocab();
    for (const auto& resp : {mixed_response(), MultimodalResponse{"B", {{Seg::Kind::image, kDesc, {}}}},
                             MultimodalResponse{"B", {{Seg::Kind::text, "a", {}}, {Seg::Kind::text, "b", {}}}}}) {
        const auto t = build_target(resp, v);
        std::size_t at = 0;
        for (const auto& s : t.spans) {
            EXPECT_EQ(s.begin, at);
            EXPECT_LT(s.begin, s.end);
            if (s.kind == TargetSpan::Kind::description) {
                EXPECT_EQ(t.tokens[s.begin], special::kDst);
                EXPECT_EQ(t.tokens[s.end - 1], special::kSep);
            }
            at = s.end;
        }
        EXPECT_EQ(at, t.tokens.size());
        EXPECT_EQ(t.tokens.back(), special::kEos);
    }
}

TEST(DialogueGenerator, ParseInvertsBuildTarget) {
    const auto& v = vocab();
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> nseg(1, 4), len(1, 12), ch(32, 126), kind(0, 2);
    for (int trial = 0; trial < 300; ++trial) {
        MultimodalResponse r{"B", {}};
        const int n = nseg(rng);
        for (int i = 0; i < n; ++i) {
            std::string s;
            const int l = len(rng);
            for (int k = 0; k < l; ++k) s.push_back(static_cast<char>(ch(rng)));
            r.segments.push_back({kind(rng) == 0 ? Seg::Kind::image : Seg::Kind::text, s, {}});
        }
        const auto parsed = parse_response_tokens(build_target(r, v).tokens, v);
        ASSERT_EQ(parsed.segments, r.segments);
        EXPECT_FALSE(parsed.unclosed_description);
        EXPECT_FALSE(parsed.degenerate);
    }
}

TEST(DialogueGenerator, ParserNeverThrowsOnArbitraryTokens) {
    const auto& v = vocab();
    std::mt19937_64 rng(12);
    std::uniform_int_distribution<int> len(0, 30), id(0, v.size() - 1), sp(0, 3);
    for (int trial = 0; trial < 500; ++trial) {
        TokenSeq t;
        const int n = len(rng);
        for (int i = 0; i < n; ++i) t.push_back(i % 3 == 0 ? sp(rng) : id(rng));
        EXPECT_NO_THROW(parse_response_tokens(t, v));
    }
    const auto open = parse_response_tokens(cat({v.encode("hi"), {special::kSep, special::kDst}, v.encode("a cat"),
                                                 {special::kEos}}),
                                            v);
    EXPECT_TRUE(open.unclosed_description);
    ASSERT_EQ(open.segments.size(), 2u);
    EXPECT_EQ(open.segments[1].kind, Seg::Kind::image);
    EXPECT_EQ(open.segments[1].text, "a cat");
    const auto empty = parse_response_tokens({special::kEos}, v);
    EXPECT_TRUE(empty.degenerate);
    ASSERT_EQ(empty.segments.size(), 1u);
    EXPECT_EQ(empty.segments[0].text, "");
}

TEST(DialogueGenerator, LossScoresOnlyTargetPositions) {
    const auto& v = vocab();
    const auto cfg = micro();
    const auto g = SeqParams<double>::init(cfg, 3);
    const auto ctx = text_context({"can you show me a small red circle on the left?"});
    const auto target = build_target(mixed_response(), v);
    const auto ex = g_example(ctx, target, v, cfg);
    // Independent recomputation: mean of per-position NLLs over the target span.
    const auto nll = token_nlls(g, ex.tokens);
    const std::size_t start = ex.tokens.size() - target.tokens.size();
    double acc = 0.0;
    for (std::size_t t = start; t < ex.tokens.size(); ++t) acc += nll[t];
    EXPECT_NEAR(loss_G<double>(g, {ex}), acc / static_cast<double>(target.tokens.size()), 1e-12);
    for (std::size_t t = 0; t < start; ++t) EXPECT_EQ(ex.mask[t], 0);
    for (std::size_t t = start; t < ex.tokens.size(); ++t) EXPECT_EQ(ex.mask[t], 1);
}

TEST(DialogueGenerator, OverlengthTargetIsAnError) {
    const auto cfg = micro(16);
    std::string longtext(40, 'q');
    EXPECT_THROW(g_example(text_context({"hi"}), text_target(longtext, vocab()), vocab(), cfg), std::invalid_argument);
    EXPECT_THROW(g_example(TokenSeq(10, 7), TokenSeq(10, 7), cfg), std::invalid_argument);
}

TEST(DialogueGenerator, FreshModelLossNearUniform) {
    SeqModelConfig cfg = micro();
    cfg.vocab_size = 512;
    const auto g = SeqParams<float>::init(cfg, 5);
    const auto& v = vocab();
    std::vector<LossExample> batch;
    for (const auto& t : {"hi there", "i love red things", "good night"}) {
        batch.push_back(g_example(text_context({t}), text_target("hello! how are you?", v), v, cfg));
    }
    EXPECT_NEAR(loss_G<float>(g, batch), std::log(512.0), 0.2 * std::log(512.0));
}

TEST(DialogueGenerator, OverfitReproducesTargetSegmentation) {
    const auto& v = vocab();
    const auto cfg = micro(96);
    auto g = SeqParams<float>::init(cfg, 9);
    const auto ctx = text_context({"hi there", "hello! how are you?", "can you show me a small red circle on the left?"});
    const auto target = build_target(mixed_response(), v);
    const auto ex = g_example(ctx, target, v, cfg);
    AdamState<SeqParams<float>> adam(g);
    AdamConfig acfg;
    acfg.lr = 3e-3;
    double loss = 0.0;
    for (int step = 0; step < 300; ++step) {
        auto grad = zeros_like(g);
        loss = loss_G<float>(g, {ex}, &grad);
        adam_step(g, grad, adam, acfg);
    }
    EXPECT_LT(loss, 0.1);
    const auto out = generate_response(g, ctx, v, {5, false, 40});
    EXPECT_EQ(out.tokens, target.tokens);
    EXPECT_EQ(out.parsed.segments, mixed_response().segments);
    EXPECT_TRUE(out.parsed.has_description());

    const auto plain = generate_response(g, ctx, v, {5, true, 40});
    EXPECT_FALSE(plain.parsed.has_description());
    for (auto id : plain.tokens) EXPECT_NE(id, special::kDst);
}

TEST(DialogueGenerator, PureTextNeverYieldsDescriptions) {
    const auto& v = vocab();
    auto cfg = micro(32);
    cfg.layers = 1;
    cfg.hidden = 16;
    for (int seed = 0; seed < 20; ++seed) {
        auto g = SeqParams<float>::init(cfg, static_cast<std::uint64_t>(seed), 0.5f);
        // Bias toward DST so the unblocked model would often emit it.
        g.b_out(0, special::kDst) = 30.0f;
        const auto out = generate_response(g, text_context({"show me a red square"}), v, {1, true, 12});
        EXPECT_FALSE(out.parsed.has_description());
        const auto free = generate_response(g, text_context({"show me a red square"}), v, {1, false, 12});
        EXPECT_EQ(free.tokens.front(), special::kDst);
    }
}

TEST(DialogueGenerator, DegenerateDecodeIsFlaggedNotThrown) {
    auto cfg = micro(32);
    auto g = SeqParams<float>::init(cfg, 1);
    g.b_out(0, special::kEos) = 50.0f;
    const auto out = generate_response(g, text_context({"hi"}), vocab());
    EXPECT_TRUE(out.parsed.degenerate);
    EXPECT_EQ(out.parsed.text(), "");
    EXPECT_FALSE(out.parsed.has_description());
}
