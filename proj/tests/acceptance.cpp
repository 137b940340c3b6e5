// Acceptance gate. One test per criterion; a summary line per criterion is
// printed at the end of the run.

#include "mdrg/agent.hpp"

#include "codec_gradcheck.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <unistd.h>

using namespace mdrg;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<std::uint8_t> bytes_of(const std::string& prefix, const auto& params) {
    Checkpoint ck;
    ck.put(prefix, params);
    return ck.serialize();
}

fs::path temp_file(const std::string& name) {
    return fs::temp_directory_path() / ("mdrg_accept_" + name + "_" + std::to_string(::getpid()) + ".ckpt");
}

nlohmann::json reference_run() {
    std::ifstream in(fs::path(MDRG_SOURCE_DIR) / "calibration" / "reference_run.json");
    if (!in) throw std::runtime_error("calibration/reference_run.json not found");
    return nlohmann::json::parse(in);
}

// ---------------------------------------------------------------- small runs

TrainingConfig tiny_config() {
    TrainingConfig c;
    c.vocab_size = 300;
    c.codec.codebook_size = 16;
    c.codec.latent_dim = 8;
    c.codec.enc_hidden = c.codec.dec_hidden = 32;
    c.codec_train.steps = 60;
    c.classifier_train.steps = 40;
    c.scorer_train.steps = 40;
    c.g_model = {1, 2, 32, 64};
    c.f_model = {1, 2, 32, 0};
    c.pretrain_g = {30, 8, 3e-3, 10, 5, 16};
    c.pretrain_f = {30, 8, 3e-3, 10, 5, 16};
    c.finetune = {0, 8, 1e-3, 5, 5, 16};
    c.finetune_warm_steps = 12;
    c.finetune_joint_steps = 8;
    c.max_new = 24;
    return c;
}

const SyntheticCorpus& tiny_corpus() {
    static const SyntheticCorpus c = [] {
        SyntheticWorldConfig w;
        w.n_text_dialogues = 200;
        w.n_pairs = 200;
        w.n_multimodal = 100;
        return generate_synthetic(w, 32);
    }();
    return c;
}

constexpr Stage kStages[] = {Stage::pretrain_G, Stage::pretrain_V, Stage::pretrain_F, Stage::joint_finetune};

// ------------------------------------------------------------- full recipe

struct EndToEnd {
    SyntheticCorpus corpus;
    RunState st;
    std::vector<std::uint8_t> codec_before_joint, codec_after_joint;
    double train_seconds = 0.0;
    double total_seconds = 0.0;
    MetricsReport report;
};

const EndToEnd& end_to_end() {
    static const EndToEnd e = [] {
        EndToEnd r;
        const auto t0 = Clock::now();
        TrainingConfig cfg;
        r.corpus = generate_synthetic(SyntheticWorldConfig{}, cfg.codec.height);
        r.st = new_run(cfg);
        train_tokenizer(r.st, r.corpus);
        for (auto s : kStages) {
            if (s == Stage::joint_finetune) r.codec_before_joint = bytes_of("codec", *r.st.codec);
            run_stage(s, r.corpus, r.st);
            std::printf("  [%s done at %.1f s]\n", stage_name(s).c_str(), seconds_since(t0));
        }
        r.codec_after_joint = bytes_of("codec", *r.st.codec);
        r.train_seconds = seconds_since(t0);
        r.report = evaluate_run(r.st, r.corpus, r.corpus.multimodal.test, EvalOptions{}).report;
        r.total_seconds = seconds_since(t0);
        return r;
    }();
    return e;
}

// -------------------------------------------------------------- reporting

class CriterionLines : public testing::EmptyTestEventListener {
public:
    void OnTestEnd(const testing::TestInfo& info) override {
        const auto* r = info.result();
        rows_.push_back({info.name(), r->Passed() && !r->Skipped(), static_cast<double>(r->elapsed_time()) / 1000.0});
    }
    void OnTestProgramEnd(const testing::UnitTest&) override {
        std::printf("\n== acceptance criteria ==\n");
        for (const auto& r : rows_) std::printf("%s  %-28s %9.1f s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.secs);
        std::fflush(stdout);
    }

private:
    struct Row {
        std::string name;
        bool pass;
        double secs;
    };
    std::vector<Row> rows_;
};

}  // namespace

TEST(Acceptance, QuantizerOracle) {
    std::mt19937_64 rng(1001);
    const auto t0 = Clock::now();
    int agree = 0;
    for (int i = 0; i < 1000; ++i) {
        const auto inst = test_support::random_quantizer_instance(rng);
        const auto q = quantize(inst.codebook, inst.grid);
        agree += q.indices == test_support::nearest_neighbour_oracle(inst.codebook.entries, inst.grid.values) ? 1 : 0;
    }
    const double secs = seconds_since(t0);
    EXPECT_EQ(agree, 1000);
    EXPECT_LT(secs, 10.0);
}

TEST(Acceptance, IndexRoundTrip) {
    std::mt19937_64 rng(1002);
    int exact = 0;
    for (int i = 0; i < 100; ++i) {
        const auto inst = test_support::random_quantizer_instance(rng);
        const auto q = quantize(inst.codebook, inst.grid);
        exact += indices_to_codes(inst.codebook, q.indices, inst.grid.h, inst.grid.w) == q.z_q ? 1 : 0;
    }
    EXPECT_EQ(exact, 100);
}

TEST(Acceptance, GradientChecks) {
    const auto t0 = Clock::now();
    const auto codec = test_support::check_codec_gradients(0.25);
    EXPECT_LT(codec.surrogate_gap, 1e-12);
    EXPECT_LT(codec.worst, 1e-3) << codec.worst_name;

    SeqModelConfig cfg;
    cfg.vocab_size = 11;
    cfg.layers = 2;
    cfg.hidden = 16;
    cfg.heads = 4;
    cfg.max_len = 8;
    auto p = SeqParams<double>::init(cfg, 8, 0.3);
    std::mt19937_64 rng(1003);
    std::uniform_int_distribution<int> tok(0, cfg.vocab_size - 1);
    std::vector<LossExample> batch;
    TokenSeq a(8), b(6);
    for (auto& v : a) v = tok(rng);
    for (auto& v : b) v = tok(rng);
    batch.push_back(LossExample::all_positions(a));
    batch.push_back({b, {0, 1, 0, 1, 1, 0}});
    auto grad = zeros_like(p);
    nll_loss_and_grad<double>(p, batch, &grad);
    const auto fd = test_support::finite_difference(p, [&] { return nll_loss(p, batch); });
    const auto analytic = grad.tensors();
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        EXPECT_LT(test_support::relative_error(*analytic[i].tensor, fd[i]), 1e-3) << analytic[i].name;
    }
    EXPECT_LT(seconds_since(t0), 60.0);
}

TEST(Acceptance, NormalizationAndCausality) {
    SeqModelConfig cfg;
    cfg.vocab_size = 23;
    cfg.layers = 2;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.max_len = 16;
    std::mt19937_64 rng(1004);
    std::uniform_int_distribution<int> tok(0, cfg.vocab_size - 1);
    for (int trial = 0; trial < 50; ++trial) {
        const auto p = SeqParams<double>::init(cfg, 300 + trial, 0.7);
        TokenSeq toks(16);
        for (auto& v : toks) v = tok(rng);
        const Mat<double> probs = forward(p, toks);
        for (Eigen::Index r = 0; r < probs.rows(); ++r) ASSERT_NEAR(probs.row(r).sum(), 1.0, 1e-6);
        const int t = static_cast<int>(rng() % 16);
        auto changed = toks;
        for (int j = t; j < 16; ++j) changed[static_cast<std::size_t>(j)] = tok(rng);
        const Mat<double> probs2 = forward(p, changed);
        for (int r = 0; r <= t; ++r) ASSERT_EQ(probs.row(r), probs2.row(r)) << "trial " << trial << " row " << r;

        IncrementalState<double> st(cfg);
        RowVec<double> logits = step(p, st, cfg.bos_id);
        for (int j = 0; j < 15; ++j) {
            ASSERT_NEAR(softmax_rows<double>(Mat<double>(logits)).sum(), 1.0, 1e-6);
            logits = step(p, st, toks[static_cast<std::size_t>(j)]);
        }
    }
}

TEST(Acceptance, MetricIdentities) {
    std::mt19937_64 rng(1005);
    std::normal_distribution<double> normal(0.0, 1.0);
    Mat<double> a(100, 4);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = normal(rng);
    EXPECT_LT(std::abs(fid(a, a)), 1e-6);

    // Rows +-sqrt(d) on each axis: mean 0, covariance I with n-1 normalization.
    const int d = 3;
    Mat<double> base = Mat<double>::Zero(2 * d + 1, d);
    for (int k = 0; k < d; ++k) {
        base(2 * k, k) = std::sqrt(static_cast<double>(d));
        base(2 * k + 1, k) = -std::sqrt(static_cast<double>(d));
    }
    Mat<double> shifted = base;
    shifted.col(1).array() += 2.0;
    EXPECT_NEAR(fid(base, shifted), 4.0, 1e-6);

    EXPECT_NEAR(inception_score(std::vector<std::vector<double>>(40, std::vector<double>(4, 0.25))).mean, 1.0, 1e-6);
    std::vector<std::vector<double>> onehot;
    for (int i = 0; i < 40; ++i) {
        std::vector<double> p(4, 0.0);
        p[static_cast<std::size_t>(i % 4)] = 1.0;
        onehot.push_back(p);
    }
    EXPECT_NEAR(inception_score(onehot).mean, 4.0, 1e-6);

    const std::vector<std::string> corpus = {"a red circle", "show me the blue square please", "ok"};
    EXPECT_EQ(bleu(corpus, corpus, 1), 1.0);
    EXPECT_EQ(bleu(corpus, corpus, 2), 1.0);
    EXPECT_EQ(rouge_l(corpus, corpus), 1.0);
    EXPECT_EQ(token_f1(corpus, corpus), 1.0);

    SeqModelConfig cfg;
    cfg.vocab_size = 13;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.hidden = 8;
    cfg.max_len = 10;
    const auto p = SeqParams<double>::init(cfg, 4, 0.5);
    const std::vector<LossExample> batch = {{{1, 2, 3, 4}, {0, 1, 1, 1}}, {{5, 6, 7}, {1, 1, 1}}};
    EXPECT_EQ(perplexity(p, batch), std::exp(nll_loss<double>(p, batch)));

    EXPECT_EQ(bleu({"a b c"}, {"a b d"}, 1), 2.0 / 3.0);
    EXPECT_EQ(rouge_l({"a b c"}, {"a c"}), 0.8);
    EXPECT_EQ(intent_f1({true, true, true}, {true, false, true}).f1, 0.8);
}

TEST(Acceptance, LambdaRouting) {
    auto prepared = [](double lambda) {
        auto cfg = tiny_config();
        cfg.lambda = lambda;
        auto st = new_run(cfg);
        train_tokenizer(st, tiny_corpus());
        st.codec = CodecParams<float>::init(cfg.codec, 3);
        st.init_models();
        return st;
    };

    auto st = prepared(0.0);
    ImageTokenCache cache(*st.codec, tiny_corpus());
    const auto items = joint_items(tiny_corpus().multimodal.train, st, cache);
    std::vector<const JointItem*> batch;
    int with_image = 0;
    for (const auto& it : items) {
        if (batch.size() == 8) break;
        batch.push_back(&it);
        with_image += it.f ? 1 : 0;
    }
    ASSERT_GT(with_image, 0);
    const auto f0 = bytes_of("f", *st.f);
    for (int i = 0; i < 3; ++i) joint_finetune_step(st, batch, 1e-3);
    EXPECT_EQ(bytes_of("f", *st.f), f0);

    // Codec untouched across the whole joint stage of the full recipe.
    const auto& e = end_to_end();
    EXPECT_EQ(e.codec_before_joint, e.codec_after_joint);
    EXPECT_TRUE(e.st.codec_frozen);

    // dL/dtheta_F is linear in lambda on a micro model.
    auto micro = prepared(0.2);
    ImageTokenCache mcache(*micro.codec, tiny_corpus());
    const auto mitems = joint_items(tiny_corpus().multimodal.train, micro, mcache);
    std::vector<LossExample> gb;
    std::vector<JointStream> fb;
    for (const auto& it : mitems) {
        if (gb.size() == 6) break;
        gb.push_back(it.g);
        if (it.f) fb.push_back(*it.f);
    }
    ASSERT_FALSE(fb.empty());
    const auto g = SeqParams<double>::init(micro.g_config(), 11, 0.3);
    const auto f = SeqParams<double>::init(micro.f_config(), 12, 0.3);
    std::vector<SeqParams<double>> grads;
    for (double lambda : {0.0, 0.1, 0.2, 0.4}) {
        auto dg = zeros_like(g);
        auto df = zeros_like(f);
        integrated_loss_and_grad<double>(g, f, gb, fb, lambda, &dg, &df);
        grads.push_back(df);
    }
    const auto unit = grads[1].tensors();
    for (std::size_t k = 2; k < grads.size(); ++k) {
        const double ratio = k == 2 ? 2.0 : 4.0;
        const auto t = grads[k].tensors();
        for (std::size_t i = 0; i < t.size(); ++i) {
            const Mat<double> want = ratio * *unit[i].tensor;
            EXPECT_LT((*t[i].tensor - want).cwiseAbs().maxCoeff(), 1e-6 * std::max(1.0, want.cwiseAbs().maxCoeff()))
                << t[i].name;
        }
    }
    for (const auto& ref : grads[0].tensors()) EXPECT_EQ(ref.tensor->cwiseAbs().maxCoeff(), 0.0) << ref.name;
}

TEST(Acceptance, OverfitSuite) {
    const auto t0 = Clock::now();
    TrainingConfig cfg;
    const auto c = generate_synthetic(SyntheticWorldConfig{}, cfg.codec.height);
    auto st = new_run(cfg);
    train_tokenizer(st, c);

    // Codec on 8 images.
    std::vector<DescriptionImagePair> pairs(c.pairs.train.begin(), c.pairs.train.begin() + 8);
    std::vector<ImageTensor> imgs;
    for (const auto& p : pairs) imgs.push_back(corpus_image(c, p.image_path));
    const auto codec = train_codec<float>(imgs, cfg.codec, cfg.codec_train);
    const double mse = reconstruction_mse(codec, imgs);
    EXPECT_LT(mse, 1e-3);

    // F on the 8 description/image streams.
    const auto layout = st.layout();
    std::vector<JointStream> streams;
    for (std::size_t i = 0; i < 8; ++i) {
        streams.push_back(build_stream(layout, description_tokens(*st.vocab, pairs[i].description, layout),
                                       tokenize_image(codec, imgs[i])));
    }
    AdamConfig acfg;
    acfg.lr = 3e-3;
    auto f = SeqParams<float>::init(st.f_config(), 2);
    AdamState<SeqParams<float>> fadam(f);
    for (int s = 0; s < 600; ++s) {
        auto grad = zeros_like(f);
        loss_F<float>(f, streams, &grad);
        adam_step(f, grad, fadam, acfg);
    }
    const double f_loss = loss_F<float>(f, streams);
    EXPECT_LT(f_loss, 0.1);

    // G on 8 dialogues, then beam-5 decoding.
    std::vector<MultimodalDialogue> ds(c.multimodal.train.begin(), c.multimodal.train.begin() + 8);
    std::vector<GeneratorTarget> targets;
    std::vector<LossExample> gx;
    int with_image = 0;
    for (const auto& d : ds) {
        targets.push_back(build_target(d.response, *st.vocab));
        gx.push_back(g_training_example(d.context, targets.back(), *st.vocab, st.g_config(), cfg));
        with_image += intent_label(d) ? 1 : 0;
    }
    ASSERT_GT(with_image, 0);
    auto g = SeqParams<float>::init(st.g_config(), 1);
    AdamState<SeqParams<float>> gadam(g);
    for (int s = 0; s < 400; ++s) {
        auto grad = zeros_like(g);
        loss_G<float>(g, gx, &grad);
        adam_step(g, grad, gadam, acfg);
    }
    const double g_loss = loss_G<float>(g, gx);
    EXPECT_LT(g_loss, 0.1);
    int exact = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto out = generate_response(g, ds[i].context, *st.vocab, {5, false, cfg.max_new});
        bool same = out.tokens == targets[i].tokens && out.parsed.segments.size() == ds[i].response.segments.size();
        for (std::size_t k = 0; same && k < out.parsed.segments.size(); ++k) {
            same = out.parsed.segments[k].kind == ds[i].response.segments[k].kind &&
                   out.parsed.segments[k].text == ds[i].response.segments[k].text;
        }
        EXPECT_TRUE(same) << ds[i].id;
        exact += same ? 1 : 0;
    }
    const double secs = seconds_since(t0);
    std::printf("  codec mse %.2e, F loss %.4f, G loss %.4f, exact %d/8, %.1f s\n", mse, f_loss, g_loss, exact, secs);
    EXPECT_LT(secs, 600.0);
}

TEST(Acceptance, EndToEndSyntheticRun) {
    const auto ref = reference_run()["thresholds"];
    const auto& e = end_to_end();
    const auto& r = e.report;
    std::printf("  intent F1 %.4f (min %.4f), label match %.4f (min %.4f), %.1f s (max %.0f)\n", r.intent_f1,
                ref["intent_f1_min"].get<double>(), r.label_match, ref["label_match_min"].get<double>(),
                e.total_seconds, ref["wall_seconds_max"].get<double>());
    std::printf("%s", r.table().c_str());
    EXPECT_GE(r.intent_f1, ref["intent_f1_min"].get<double>());
    EXPECT_GE(r.label_match, ref["label_match_min"].get<double>());
    EXPECT_GT(r.counts.at("image"), 0u);
    EXPECT_LT(e.total_seconds, ref["wall_seconds_max"].get<double>());
}

TEST(Acceptance, PureTextMode) {
    const auto& e = end_to_end();
    std::vector<const DialogueContext*> contexts;
    for (const auto* split : {&e.corpus.multimodal.train, &e.corpus.multimodal.dev, &e.corpus.multimodal.test}) {
        for (const auto& d : *split) contexts.push_back(&d.context);
    }
    ASSERT_FALSE(contexts.empty());
    int decoded = 0, with_description = 0, unblocked_with_description = 0;
    for (int i = 0; decoded < 1000; ++i) {
        const auto& ctx = *contexts[static_cast<std::size_t>(i) % contexts.size()];
        const int beam = 1 + 2 * ((i / static_cast<int>(contexts.size())) % 3);
        const auto out = generate_response(*e.st.g, ctx, *e.st.vocab, {beam, true, e.st.config.max_new});
        ++decoded;
        with_description += out.parsed.has_description() ? 1 : 0;
        if (i < static_cast<int>(contexts.size())) {
            const auto free = generate_response(*e.st.g, ctx, *e.st.vocab, {beam, false, e.st.config.max_new});
            unblocked_with_description += free.parsed.has_description() ? 1 : 0;
        }
    }
    std::printf("  %d/%d decodes with a description (unblocked: %d)\n", with_description, decoded,
                unblocked_with_description);
    EXPECT_EQ(with_description, 0);
    EXPECT_GT(unblocked_with_description, 0);
}

TEST(Acceptance, CheckpointRoundTripAndResume) {
    const auto& e = end_to_end();
    const auto p1 = temp_file("rt1"), p2 = temp_file("rt2");
    save_checkpoint(e.st, p1.string());
    save_checkpoint(load_checkpoint(p1.string()), p2.string());
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    const std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
    EXPECT_FALSE(s1.empty());
    EXPECT_EQ(s1, s2);
    fs::remove(p1);
    fs::remove(p2);

    const auto cfg = tiny_config();
    std::vector<std::string> whole, pieces;
    auto st = new_run(cfg);
    train_tokenizer(st, tiny_corpus());
    auto reference = st;
    for (auto s : kStages) run_stage(s, tiny_corpus(), reference, [&](const nlohmann::json& j) { whole.push_back(j.dump()); });

    const auto path = temp_file("resume").string();
    const std::map<Stage, std::int64_t> cut = {{Stage::pretrain_G, 11}, {Stage::pretrain_F, 9}, {Stage::joint_finetune, 17}};
    const MetricsSink sink = [&](const nlohmann::json& j) { pieces.push_back(j.dump()); };
    for (auto s : kStages) {
        if (auto it = cut.find(s); it != cut.end()) {
            run_stage(s, tiny_corpus(), st, sink, StageLimits{it->second});
            save_checkpoint(st, path);
            st = load_checkpoint(path, &cfg);
        }
        run_stage(s, tiny_corpus(), st, sink);
        save_checkpoint(st, path);
        st = load_checkpoint(path, &cfg);
    }
    fs::remove(path);
    EXPECT_EQ(pieces, whole);
    EXPECT_EQ(to_checkpoint(st).serialize(), to_checkpoint(reference).serialize());
}

int main(int argc, char** argv) {
    testing::InitGoogleTest(&argc, argv);
    testing::UnitTest::GetInstance()->listeners().Append(new CriterionLines);
    return RUN_ALL_TESTS();
}
