#pragma once

// Staged training: tokenizer, then G on text dialogues, the codec (plus the
// evaluation classifier) on images, F (plus the rerank scorer) on
// description/image pairs, and finally joint fine-tuning of G and F on
// multimodal dialogues with the codec frozen.
//
// Every batch is drawn from a stream keyed by (seed, stage, step), so a run
// resumed from a checkpoint continues exactly as the uninterrupted run.

#include "mdrg/checkpoint.hpp"
#include "mdrg/datasets.hpp"
#include "mdrg/dialogue_generator.hpp"
#include "mdrg/evaluation.hpp"
#include "mdrg/image_codec.hpp"
#include "mdrg/match_scorer.hpp"
#include "mdrg/seq_core.hpp"
#include "mdrg/t2i_translator.hpp"
#include "mdrg/text_tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdrg {

enum class Stage { pretrain_G, pretrain_V, pretrain_F, joint_finetune };

inline std::string stage_name(Stage s) {
    switch (s) {
        case Stage::pretrain_G: return "pretrain_G";
        case Stage::pretrain_V: return "pretrain_V";
        case Stage::pretrain_F: return "pretrain_F";
        case Stage::joint_finetune: return "joint_finetune";
    }
    return "?";
}

inline Stage stage_from_name(const std::string& n) {
    for (auto s : {Stage::pretrain_G, Stage::pretrain_V, Stage::pretrain_F, Stage::joint_finetune}) {
        if (stage_name(s) == n) return s;
    }
    throw std::invalid_argument("unknown stage " + n);
}

struct ModelShape {
    int layers = 2;
    int heads = 4;
    int hidden = 64;
    int max_len = 80;  // ignored for F, whose length follows the stream layout
    friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

struct StageBudget {
    int steps = 1000;
    int batch_size = 16;
    double lr = 1e-3;
    int eval_every = 100;
    int patience = 5;
    int val_examples = 200;  // cap on validation set size
    friend bool operator==(const StageBudget&, const StageBudget&) = default;
};

struct TrainingConfig {
    std::uint64_t seed = 1;
    double lambda = 0.2;
    int vocab_size = kDefaultVocabSize;
    CodecConfig codec;
    ModelShape g_model;
    ModelShape f_model;
    CodecTrainOptions codec_train;
    ClassifierConfig classifier;
    ClassifierTrainOptions classifier_train;
    DualEncoderConfig scorer;
    ScorerTrainOptions scorer_train;
    StageBudget pretrain_g{3000, 16, 1e-3, 200, 5, 200};
    StageBudget pretrain_f{3000, 16, 1e-3, 200, 5, 200};
    StageBudget finetune{0, 16, 5e-4, 50, 5, 200};
    int finetune_warm_steps = 14400;  // F only
    int finetune_joint_steps = 600;   // G and F
    double clip_norm = 1.0;          // <= 0 disables clipping
    int max_new = 32;
    int beam = 5;
    int n_samples = 8;
    double temperature = 1.0;

    void validate() const {
        if (!(lambda >= 0.0)) throw std::invalid_argument("training config: lambda must be >= 0");
        for (const auto* b : {&pretrain_g, &pretrain_f, &finetune}) {
            if (b->steps < 0 || b->batch_size < 1 || b->eval_every < 1 || b->patience < 1) {
                throw std::invalid_argument("training config: budgets must be non-negative and batch sizes positive");
            }
        }
        if (finetune_warm_steps < 0 || finetune_joint_steps < 0 || codec_train.steps < 0) {
            throw std::invalid_argument("training config: step budgets must be >= 0");
        }
        codec.validate();
    }
};

// ---------------------------------------------------------- config JSON

inline void to_json(nlohmann::json& j, const ModelShape& m) {
    j = {{"layers", m.layers}, {"heads", m.heads}, {"hidden", m.hidden}, {"max_len", m.max_len}};
}
inline void from_json(const nlohmann::json& j, ModelShape& m) {
    ModelShape d;
    m.layers = j.value("layers", d.layers);
    m.heads = j.value("heads", d.heads);
    m.hidden = j.value("hidden", d.hidden);
    m.max_len = j.value("max_len", d.max_len);
}
inline void to_json(nlohmann::json& j, const StageBudget& b) {
    j = {{"steps", b.steps},   {"batch_size", b.batch_size}, {"lr", b.lr}, {"eval_every", b.eval_every},
         {"patience", b.patience}, {"val_examples", b.val_examples}};
}
inline void from_json(const nlohmann::json& j, StageBudget& b) {
    b.steps = j.value("steps", b.steps);
    b.batch_size = j.value("batch_size", b.batch_size);
    b.lr = j.value("lr", b.lr);
    b.eval_every = j.value("eval_every", b.eval_every);
    b.patience = j.value("patience", b.patience);
    b.val_examples = j.value("val_examples", b.val_examples);
}

inline nlohmann::json config_to_json(const TrainingConfig& c) {
    return {{"seed", c.seed},
            {"lambda", c.lambda},
            {"vocab_size", c.vocab_size},
            {"codec", c.codec},
            {"g_model", c.g_model},
            {"f_model", c.f_model},
            {"codec_train",
             {{"steps", c.codec_train.steps}, {"batch_size", c.codec_train.batch_size}, {"lr", c.codec_train.lr},
              {"beta", c.codec_train.beta}}},
            {"classifier", c.classifier},
            {"classifier_train",
             {{"steps", c.classifier_train.steps}, {"batch_size", c.classifier_train.batch_size},
              {"lr", c.classifier_train.lr}}},
            {"scorer", c.scorer},
            {"scorer_train",
             {{"steps", c.scorer_train.steps}, {"batch_size", c.scorer_train.batch_size}, {"lr", c.scorer_train.lr}}},
            {"pretrain_G", c.pretrain_g},
            {"pretrain_F", c.pretrain_f},
            {"finetune", c.finetune},
            {"finetune_warm_steps", c.finetune_warm_steps},
            {"finetune_joint_steps", c.finetune_joint_steps},
            {"clip_norm", c.clip_norm},
            {"max_new", c.max_new},
            {"beam", c.beam},
            {"n_samples", c.n_samples},
            {"temperature", c.temperature}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline TrainingConfig config_from_json(const nlohmann::json& j) {
    TrainingConfig c;
    const auto known = config_to_json(c);
    for (const auto& [k, v] : j.items()) {
        if (!known.contains(k)) throw std::invalid_argument("training config: unknown key '" + k + "'");
    }
    c.seed = j.value("seed", c.seed);
    c.lambda = j.value("lambda", c.lambda);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    if (j.contains("codec")) c.codec = j.at("codec").get<CodecConfig>();
    if (j.contains("g_model")) c.g_model = j.at("g_model").get<ModelShape>();
    if (j.contains("f_model")) c.f_model = j.at("f_model").get<ModelShape>();
    if (j.contains("codec_train")) {
        const auto& t = j.at("codec_train");
        c.codec_train.steps = t.value("steps", c.codec_train.steps);
        c.codec_train.batch_size = t.value("batch_size", c.codec_train.batch_size);
        c.codec_train.lr = t.value("lr", c.codec_train.lr);
        c.codec_train.beta = t.value("beta", c.codec_train.beta);
    }
    if (j.contains("classifier")) c.classifier = j.at("classifier").get<ClassifierConfig>();
    if (j.contains("classifier_train")) {
        const auto& t = j.at("classifier_train");
        c.classifier_train.steps = t.value("steps", c.classifier_train.steps);
        c.classifier_train.batch_size = t.value("batch_size", c.classifier_train.batch_size);
        c.classifier_train.lr = t.value("lr", c.classifier_train.lr);
    }
    if (j.contains("scorer")) c.scorer = j.at("scorer").get<DualEncoderConfig>();
    if (j.contains("scorer_train")) {
        const auto& t = j.at("scorer_train");
        c.scorer_train.steps = t.value("steps", c.scorer_train.steps);
        c.scorer_train.batch_size = t.value("batch_size", c.scorer_train.batch_size);
        c.scorer_train.lr = t.value("lr", c.scorer_train.lr);
    }
    if (j.contains("pretrain_G")) c.pretrain_g = j.at("pretrain_G").get<StageBudget>();
    if (j.contains("pretrain_F")) c.pretrain_f = j.at("pretrain_F").get<StageBudget>();
    if (j.contains("finetune")) c.finetune = j.at("finetune").get<StageBudget>();
    c.finetune_warm_steps = j.value("finetune_warm_steps", c.finetune_warm_steps);
    c.finetune_joint_steps = j.value("finetune_joint_steps", c.finetune_joint_steps);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.max_new = j.value("max_new", c.max_new);
    c.beam = j.value("beam", c.beam);
    c.n_samples = j.value("n_samples", c.n_samples);
    c.temperature = j.value("temperature", c.temperature);
    c.validate();
    return c;
}

/// The parts of a config that fix tensor shapes.
inline nlohmann::json architecture_json(const TrainingConfig& c) {
    return {{"codec", c.codec}, {"g_model", c.g_model}, {"f_model", c.f_model}, {"classifier", c.classifier},
            {"scorer_pool", c.scorer.pool}, {"scorer_hidden", c.scorer.hidden}, {"scorer_embed", c.scorer.embed},
            {"vocab_size", c.vocab_size}};
}

// ------------------------------------------------------------ run state

struct StageProgress {
    std::int64_t step = 0;
    double best_val = std::numeric_limits<double>::infinity();
    std::int64_t bad_evals = 0;
    bool done = false;
};

inline double joint_loss(double loss_g, double loss_f, double lambda) {
    if (!std::isfinite(loss_g) || !std::isfinite(loss_f) || !std::isfinite(lambda)) {
        throw std::domain_error("joint_loss: non-finite input");
    }
    return loss_g + lambda * loss_f;
}

struct RunState {
    TrainingConfig config;
    std::optional<Vocab> vocab;
    std::optional<CodecParams<float>> codec;
    std::optional<ClassifierParams<float>> classifier;
    std::optional<DualEncoderParams<float>> scorer;
    std::optional<SeqParams<float>> g, f;
    std::optional<AdamState<SeqParams<float>>> g_adam, f_adam;
    std::optional<SeqParams<float>> g_best, f_best;
    std::map<std::string, StageProgress> progress;
    bool codec_frozen = false;

    StreamLayout layout() const {
        if (!vocab) throw std::logic_error("run state has no tokenizer");
        return StreamLayout::from(vocab->size(), config.codec);
    }
    SeqModelConfig g_config() const {
        if (!vocab) throw std::logic_error("run state has no tokenizer");
        SeqModelConfig c;
        c.vocab_size = vocab->size();
        c.layers = config.g_model.layers;
        c.heads = config.g_model.heads;
        c.hidden = config.g_model.hidden;
        c.max_len = config.g_model.max_len;
        return c;
    }
    SeqModelConfig f_config() const {
        return layout().model_config(config.f_model.layers, config.f_model.heads, config.f_model.hidden);
    }
    DualEncoderConfig scorer_config() const {
        auto c = config.scorer;
        c.text_vocab = vocab->size();
        return c;
    }

    /// Fresh G and F at their initial values.
    void init_models() {
        g = SeqParams<float>::init(g_config(), config.seed * 1000 + 1);
        f = SeqParams<float>::init(f_config(), config.seed * 1000 + 2);
    }
};

inline RunState new_run(const TrainingConfig& cfg) {
    cfg.validate();
    RunState s;
    s.config = cfg;
    return s;
}

// ------------------------------------------------------------- examples

/// Context budget shared by training and inference so both see the same
/// amount of history.
inline int generator_context_budget(const SeqModelConfig& g, const TrainingConfig& cfg) {
    return inference_context_budget(g, cfg.max_new);
}

inline LossExample g_training_example(const DialogueContext& ctx, const GeneratorTarget& target, const Vocab& v,
                                      const SeqModelConfig& g, const TrainingConfig& cfg) {
    const int room = std::min(g.max_len - 1 - static_cast<int>(target.tokens.size()), generator_context_budget(g, cfg));
    if (room < 1) throw std::invalid_argument("generator example: target leaves no room for context");
    return g_example(flatten_context(ctx, v, room), target.tokens, g);
}

inline LossExample g_training_example(const TextDialogue& d, const Vocab& v, const SeqModelConfig& g,
                                      const TrainingConfig& cfg) {
    if (d.turns.size() < 2) throw std::invalid_argument("text dialogue needs at least 2 turns");
    const std::vector<std::string> ctx(d.turns.begin(), d.turns.end() - 1);
    return g_training_example(text_context(ctx), text_target(d.turns.back(), v), v, g, cfg);
}

inline LossExample g_training_example(const MultimodalDialogue& d, const Vocab& v, const SeqModelConfig& g,
                                      const TrainingConfig& cfg) {
    return g_training_example(d.context, build_target(d.response, v), v, g, cfg);
}

/// Image tokens per corpus image path, computed once with the frozen codec.
class ImageTokenCache {
public:
    ImageTokenCache(const CodecParams<float>& codec, const SyntheticCorpus& corpus) : codec_(codec), corpus_(corpus) {}
    const ImageTokenSeq& get(const std::string& path) {
        auto it = cache_.find(path);
        if (it == cache_.end()) it = cache_.emplace(path, tokenize_image(codec_, corpus_image(corpus_, path))).first;
        return it->second;
    }

private:
    const CodecParams<float>& codec_;
    const SyntheticCorpus& corpus_;
    std::map<std::string, ImageTokenSeq> cache_;
};

/// One joint fine-tuning item: every item has a G example; items whose
/// response holds an image also have an F stream.
struct JointItem {
    LossExample g;
    std::optional<JointStream> f;
};

inline std::vector<JointItem> joint_items(const std::vector<MultimodalDialogue>& ds, const RunState& st,
                                          ImageTokenCache& tokens) {
    const auto g = st.g_config();
    const auto layout = st.layout();
    std::vector<JointItem> out;
    for (const auto& d : ds) {
        JointItem it{g_training_example(d, *st.vocab, g, st.config), std::nullopt};
        for (const auto& seg : d.response.segments) {
            if (seg.kind != ResponseSegment::Kind::image || seg.image_path.empty()) continue;
            it.f = build_stream(layout, description_tokens(*st.vocab, seg.text, layout), tokens.get(seg.image_path));
            break;
        }
        out.push_back(std::move(it));
    }
    return out;
}

// ----------------------------------------------------- joint fine-tuning

struct JointStepResult {
    double loss_G = 0.0;
    std::optional<double> loss_F;  // absent when no item carried an image
    double total = 0.0;
    std::vector<bool> item_has_F;
};

/// Loss breakdown of a batch without updating anything.
inline JointStepResult joint_loss_of(const RunState& st, const std::vector<const JointItem*>& batch) {
    if (batch.empty()) throw std::invalid_argument("joint step: empty batch");
    std::vector<LossExample> gb;
    std::vector<JointStream> fb;
    JointStepResult r;
    for (const auto* it : batch) {
        gb.push_back(it->g);
        r.item_has_F.push_back(it->f.has_value());
        if (it->f) fb.push_back(*it->f);
    }
    r.loss_G = loss_G<float>(*st.g, gb);
    if (!fb.empty()) r.loss_F = loss_F<float>(*st.f, fb);
    r.total = joint_loss(r.loss_G, r.loss_F.value_or(0.0), st.config.lambda);
    return r;
}

/// Integrated loss L_G + lambda * L_F. Gradients go to theta_g from L_G
/// and to theta_phi from lambda * L_F (from L_F alone when `f_only`, in
/// which case theta_g gets nothing). L_F averages over the streams given.
template <class T>
JointStepResult integrated_loss_and_grad(const SeqParams<T>& g, const SeqParams<T>& f,
                                         const std::vector<LossExample>& gb, const std::vector<JointStream>& fb,
                                         double lambda, SeqParams<T>* grad_g, SeqParams<T>* grad_f, bool f_only = false) {
    JointStepResult r;
    r.loss_G = loss_G<T>(g, gb, f_only ? nullptr : grad_g);
    if (!fb.empty()) r.loss_F = loss_F<T>(f, fb, grad_f, f_only ? T(1) : static_cast<T>(lambda));
    r.total = joint_loss(r.loss_G, r.loss_F.value_or(0.0), lambda);
    return r;
}

/// One optimizer step on theta_g with dL_G and on theta_phi with
/// lambda * dL_F. The codec is not touched. With lambda == 0, or no image
/// item in the batch, theta_phi receives no update at all. When `update_g`
/// is false only theta_phi trains, on L_F.
inline JointStepResult joint_finetune_step(RunState& st, const std::vector<const JointItem*>& batch, double lr,
                                           bool update_g = true) {
    if (batch.empty()) throw std::invalid_argument("joint step: batch lacks any scorable item");
    if (!st.g || !st.f || !st.codec) throw std::logic_error("joint step: models not initialized");
    st.codec_frozen = true;
    std::vector<LossExample> gb;
    std::vector<JointStream> fb;
    std::vector<bool> has_f;
    for (const auto* it : batch) {
        gb.push_back(it->g);
        has_f.push_back(it->f.has_value());
        if (it->f) fb.push_back(*it->f);
    }
    if (!st.g_adam) st.g_adam.emplace(*st.g);
    if (!st.f_adam) st.f_adam.emplace(*st.f);
    AdamConfig acfg;
    acfg.lr = lr;
    auto gg = zeros_like(*st.g);
    auto gf = zeros_like(*st.f);
    auto r = integrated_loss_and_grad<float>(*st.g, *st.f, gb, fb, st.config.lambda, &gg, &gf, !update_g);
    r.item_has_F = std::move(has_f);
    if (update_g) {
        if (st.config.clip_norm > 0) clip_global_norm(gg, st.config.clip_norm);
        adam_step(*st.g, gg, *st.g_adam, acfg);
    }
    if (!fb.empty() && (!update_g || st.config.lambda != 0.0)) {
        if (st.config.clip_norm > 0) clip_global_norm(gf, st.config.clip_norm);
        adam_step(*st.f, gf, *st.f_adam, acfg);
    }
    return r;
}

// ----------------------------------------------------------------- stages

using MetricsSink = std::function<void(const nlohmann::json&)>;

struct StageLimits {
    std::int64_t stop_after = -1;  // interrupt once this stage step is reached (for resume tests)
};

namespace pipeline_detail {

// Batch streams: one per stage, plus one for the F-only warm phase.
inline constexpr std::uint64_t kWarmStream = 16;

inline std::uint64_t stream_of(Stage s) { return static_cast<std::uint64_t>(s); }

inline std::vector<std::size_t> draw_batch(std::uint64_t seed, std::uint64_t stream, std::int64_t step, std::size_t n,
                                           int batch_size) {
    auto rng = make_rng(seed, {0x57A6Eull, stream, static_cast<std::uint64_t>(step)});
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::size_t> idx(static_cast<std::size_t>(batch_size));
    for (auto& i : idx) i = pick(rng);
    return idx;
}

template <class V>
V head(const V& v, int cap) {
    if (cap < 0 || v.size() <= static_cast<std::size_t>(cap)) return v;
    return V(v.begin(), v.begin() + cap);
}

/// Early-stopping bookkeeping; returns true when the stage should stop.
template <class Snapshot>
bool note_validation(StageProgress& pr, double val, int patience, Snapshot&& snapshot) {
    if (val < pr.best_val) {
        pr.best_val = val;
        pr.bad_evals = 0;
        snapshot();
        return false;
    }
    ++pr.bad_evals;
    return pr.bad_evals >= patience;
}

inline void log_line(const MetricsSink& sink, std::int64_t step, const std::string& stage, std::optional<double> lg,
                     std::optional<double> lf, std::optional<double> total, std::optional<double> val) {
    if (!sink) return;
    auto opt = [](std::optional<double> v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    sink({{"step", step}, {"stage", stage}, {"loss_G", opt(lg)}, {"loss_F", opt(lf)}, {"loss_total", opt(total)},
          {"val_loss", opt(val)}});
}

}  // namespace pipeline_detail

inline void train_tokenizer(RunState& st, const SyntheticCorpus& c) {
    const auto lines = corpus_text(c);
    if (lines.empty()) throw std::invalid_argument("tokenizer: corpus has no text");
    st.vocab = Vocab::train(lines, st.config.vocab_size);
}

namespace pipeline_detail {

/// Generic single-model loop for the G and F pretraining stages.
template <class Example, class LossFn>
void run_single(RunState& st, Stage stage, const std::vector<Example>& train, const std::vector<Example>& dev,
                const StageBudget& b, std::optional<SeqParams<float>>& model,
                std::optional<AdamState<SeqParams<float>>>& adam, std::optional<SeqParams<float>>& best,
                LossFn loss_fn, bool is_g, const MetricsSink& sink, const StageLimits& lim) {
    auto& pr = st.progress[stage_name(stage)];
    if (pr.done) return;
    if (train.empty()) throw std::invalid_argument(stage_name(stage) + ": training corpus is empty");
    if (pr.step == 0) {
        adam.emplace(*model);
        best.reset();
        pr = StageProgress{};
    }
    AdamConfig acfg;
    acfg.lr = b.lr;
    auto validate = [&]() { return dev.empty() ? std::numeric_limits<double>::quiet_NaN() : loss_fn(*model, dev, nullptr); };
    if (pr.step == 0 && !dev.empty()) {
        const double v0 = validate();
        note_validation(pr, v0, b.patience, [&] { best = *model; });
        log_line(sink, 0, stage_name(stage), std::nullopt, std::nullopt, std::nullopt, v0);
    }
    bool stop = false;
    while (pr.step < b.steps && !stop) {
        if (lim.stop_after >= 0 && pr.step >= lim.stop_after) return;
        const auto idx = draw_batch(st.config.seed, stream_of(stage), pr.step, train.size(), b.batch_size);
        std::vector<Example> batch;
        for (auto i : idx) batch.push_back(train[i]);
        auto grad = zeros_like(*model);
        const double loss = loss_fn(*model, batch, &grad);
        if (!std::isfinite(loss)) {
            throw std::runtime_error(stage_name(stage) + ": non-finite loss at step " + std::to_string(pr.step));
        }
        if (st.config.clip_norm > 0) clip_global_norm(grad, st.config.clip_norm);
        adam_step(*model, grad, *adam, acfg);
        ++pr.step;
        std::optional<double> val;
        if (!dev.empty() && (pr.step % b.eval_every == 0 || pr.step == b.steps)) {
            val = validate();
            stop = note_validation(pr, *val, b.patience, [&] { best = *model; });
        }
        log_line(sink, pr.step, stage_name(stage), is_g ? std::optional(loss) : std::nullopt,
                 is_g ? std::nullopt : std::optional(loss), loss, val);
    }
    if (best) model = *best;
    best.reset();
    pr.done = true;
}

}  // namespace pipeline_detail

inline void run_pretrain_g(RunState& st, const SyntheticCorpus& c, const MetricsSink& sink, const StageLimits& lim) {
    if (!st.vocab) throw std::logic_error("pretrain_G: tokenizer not trained");
    if (c.text.train.empty()) throw std::invalid_argument("pretrain_G: text-only dialogue corpus is missing");
    if (!st.g) st.init_models();
    const auto gcfg = st.g_config();
    std::vector<LossExample> train, dev;
    for (const auto& d : c.text.train) train.push_back(g_training_example(d, *st.vocab, gcfg, st.config));
    for (const auto& d : pipeline_detail::head(c.text.dev, st.config.pretrain_g.val_examples)) {
        dev.push_back(g_training_example(d, *st.vocab, gcfg, st.config));
    }
    auto loss = [](const SeqParams<float>& p, const std::vector<LossExample>& b, SeqParams<float>* g) {
        return loss_G<float>(p, b, g);
    };
    pipeline_detail::run_single(st, Stage::pretrain_G, train, dev, st.config.pretrain_g, st.g, st.g_adam, st.g_best,
                                loss, true, sink, lim);
}

/// Unique training images of the pair corpus, in path order, with the
/// shape label parsed from each description.
inline std::vector<std::pair<std::string, int>> labelled_images(const std::vector<DescriptionImagePair>& pairs) {
    std::map<std::string, int> m;
    for (const auto& p : pairs) {
        const auto cls = shape_class_of(p.description);
        m.emplace(p.image_path, cls ? *cls : -1);
    }
    return {m.begin(), m.end()};
}

inline void run_pretrain_v(RunState& st, const SyntheticCorpus& c, const MetricsSink& sink) {
    auto& pr = st.progress[stage_name(Stage::pretrain_V)];
    if (pr.done) return;
    if (c.pairs.train.empty()) throw std::invalid_argument("pretrain_V: image corpus is missing");
    const auto imgs = labelled_images(c.pairs.train);
    std::vector<ImageTensor> data;
    std::vector<const ImageTensor*> ptrs;
    std::vector<int> labels;
    for (const auto& [path, label] : imgs) {
        data.push_back(corpus_image(c, path));
    }
    for (std::size_t i = 0; i < imgs.size(); ++i) {
        if (imgs[i].second < 0) continue;
        ptrs.push_back(&data[i]);
        labels.push_back(imgs[i].second);
    }
    auto opt = st.config.codec_train;
    opt.seed = st.config.seed * 1000 + 3;
    const int log_every = std::max(1, opt.steps / 20);
    st.codec = train_codec<float>(data, st.config.codec, opt, [&](int step, const CodecLoss& l) {
        if ((step + 1) % log_every == 0) {
            pipeline_detail::log_line(sink, step + 1, "pretrain_V", std::nullopt, std::nullopt, l.total, std::nullopt);
        }
    });
    if (!ptrs.empty()) {
        auto copt = st.config.classifier_train;
        copt.seed = st.config.seed * 1000 + 4;
        st.classifier = train_classifier(ptrs, labels, st.config.classifier, copt);
    }
    pr.step = opt.steps;
    pr.done = true;
}

inline void run_pretrain_f(RunState& st, const SyntheticCorpus& c, const MetricsSink& sink, const StageLimits& lim) {
    if (!st.vocab) throw std::logic_error("pretrain_F: tokenizer not trained");
    if (!st.codec) throw std::logic_error("pretrain_F: codec not trained");
    if (c.pairs.train.empty()) throw std::invalid_argument("pretrain_F: description/image corpus is missing");
    if (!st.f) st.init_models();
    const auto layout = st.layout();
    ImageTokenCache tokens(*st.codec, c);
    auto streams = [&](const std::vector<DescriptionImagePair>& ps) {
        std::vector<JointStream> out;
        for (const auto& p : ps) {
            out.push_back(build_stream(layout, description_tokens(*st.vocab, p.description, layout), tokens.get(p.image_path)));
        }
        return out;
    };
    const auto train = streams(c.pairs.train);
    const auto dev = streams(pipeline_detail::head(c.pairs.dev, st.config.pretrain_f.val_examples));
    auto loss = [](const SeqParams<float>& p, const std::vector<JointStream>& b, SeqParams<float>* g) {
        return loss_F<float>(p, b, g);
    };
    if (!st.scorer) {
        std::vector<std::pair<std::string, const ImageTensor*>> pairs;
        for (const auto& p : c.pairs.train) pairs.emplace_back(p.description, &corpus_image(c, p.image_path));
        auto sopt = st.config.scorer_train;
        sopt.seed = st.config.seed * 1000 + 5;
        st.scorer = train_dual_encoder(*st.vocab, pairs, st.scorer_config(), sopt).params();
    }
    pipeline_detail::run_single(st, Stage::pretrain_F, train, dev, st.config.pretrain_f, st.f, st.f_adam, st.f_best,
                                loss, false, sink, lim);
}

/// Validation value of the integrated loss over a dev item set.
inline double joint_validation(const RunState& st, const std::vector<JointItem>& dev) {
    std::vector<const JointItem*> ptrs;
    for (const auto& it : dev) ptrs.push_back(&it);
    return joint_loss_of(st, ptrs).total;
}

inline void run_joint_finetune(RunState& st, const SyntheticCorpus& c, const MetricsSink& sink,
                               const StageLimits& lim) {
    if (!st.vocab || !st.codec) throw std::logic_error("joint_finetune: tokenizer and codec must be trained first");
    if (c.multimodal.train.empty()) throw std::invalid_argument("joint_finetune: multimodal dialogue corpus is missing");
    if (!st.g || !st.f) st.init_models();
    ImageTokenCache tokens(*st.codec, c);
    const auto train = joint_items(c.multimodal.train, st, tokens);
    const auto dev = joint_items(pipeline_detail::head(c.multimodal.dev, st.config.finetune.val_examples), st, tokens);
    std::vector<const JointItem*> image_items;
    for (const auto& it : train) {
        if (it.f) image_items.push_back(&it);
    }
    const auto& b = st.config.finetune;

    struct Phase {
        std::string key;
        int steps;
        bool update_g;
        std::uint64_t stream;
    };
    const std::vector<Phase> phases = {
        {"joint_finetune.warm", st.config.finetune_warm_steps, false, pipeline_detail::kWarmStream},
        {"joint_finetune.joint", st.config.finetune_joint_steps, true, pipeline_detail::stream_of(Stage::joint_finetune)}};
    std::int64_t offset = 0;
    for (const auto& ph : phases) {
        auto& pr = st.progress[ph.key];
        if (pr.done) {
            offset += ph.steps;
            continue;
        }
        if (!ph.update_g && image_items.empty()) {
            pr.done = true;
            offset += ph.steps;
            continue;
        }
        if (pr.step == 0) {
            st.g_adam.emplace(*st.g);
            st.f_adam.emplace(*st.f);
            st.g_best.reset();
            st.f_best.reset();
            pr = StageProgress{};
        }
        auto snapshot = [&] {
            st.g_best = *st.g;
            st.f_best = *st.f;
        };
        if (pr.step == 0 && !dev.empty()) {
            const double v0 = joint_validation(st, dev);
            pipeline_detail::note_validation(pr, v0, b.patience, snapshot);
            pipeline_detail::log_line(sink, offset, ph.key, std::nullopt, std::nullopt, std::nullopt, v0);
        }
        bool stop = false;
        while (pr.step < ph.steps && !stop) {
            if (lim.stop_after >= 0 && offset + pr.step >= lim.stop_after) return;
            std::vector<const JointItem*> batch;
            const std::size_t n = ph.update_g ? train.size() : image_items.size();
            const auto idx = pipeline_detail::draw_batch(st.config.seed, ph.stream, pr.step, n, b.batch_size);
            for (auto i : idx) batch.push_back(ph.update_g ? &train[i] : image_items[i]);
            const auto r = joint_finetune_step(st, batch, b.lr, ph.update_g);
            ++pr.step;
            std::optional<double> val;
            if (!dev.empty() && (pr.step % b.eval_every == 0 || pr.step == ph.steps)) {
                val = joint_validation(st, dev);
                stop = pipeline_detail::note_validation(pr, *val, b.patience, snapshot);
            }
            pipeline_detail::log_line(sink, offset + pr.step, ph.key, ph.update_g ? std::optional(r.loss_G) : std::nullopt,
                                      r.loss_F, r.total, val);
        }
        if (st.g_best) st.g = *st.g_best;
        if (st.f_best) st.f = *st.f_best;
        st.g_best.reset();
        st.f_best.reset();
        pr.done = true;
        offset += ph.steps;
    }
    st.progress[stage_name(Stage::joint_finetune)].done = true;
}

/// Step position within a stage on the scale used by StageLimits.
inline std::int64_t stage_position(const RunState& st, Stage stage) {
    auto step = [&](const std::string& k) {
        auto it = st.progress.find(k);
        return it == st.progress.end() ? std::int64_t{0} : it->second.step;
    };
    auto done = [&](const std::string& k) {
        auto it = st.progress.find(k);
        return it != st.progress.end() && it->second.done;
    };
    if (stage != Stage::joint_finetune) return step(stage_name(stage));
    if (!done("joint_finetune.warm")) return step("joint_finetune.warm");
    return st.config.finetune_warm_steps + step("joint_finetune.joint");
}

inline bool stage_done(const RunState& st, Stage stage) {
    auto it = st.progress.find(stage_name(stage));
    return it != st.progress.end() && it->second.done;
}

inline void run_stage(Stage stage, const SyntheticCorpus& c, RunState& st, const MetricsSink& sink = {},
                      const StageLimits& lim = {}) {
    switch (stage) {
        case Stage::pretrain_G: run_pretrain_g(st, c, sink, lim); break;
        case Stage::pretrain_V: run_pretrain_v(st, c, sink); break;
        case Stage::pretrain_F: run_pretrain_f(st, c, sink, lim); break;
        case Stage::joint_finetune: run_joint_finetune(st, c, sink, lim); break;
    }
}

// ------------------------------------------------------------ checkpoint

namespace pipeline_detail {

template <class P>
void put_adam(Checkpoint& ck, const std::string& name, const std::optional<AdamState<P>>& a) {
    if (!a) return;
    ck.put(name + "_adam_m", a->m);
    ck.put(name + "_adam_v", a->v);
    ck.meta["adam"][name] = a->step;
}

template <class P>
void get_adam(const Checkpoint& ck, const std::string& name, const P& like, std::optional<AdamState<P>>& a) {
    if (!ck.has(name + "_adam_m")) return;
    a.emplace(like);
    ck.get(name + "_adam_m", a->m);
    ck.get(name + "_adam_v", a->v);
    a->step = ck.meta.at("adam").at(name).get<std::int64_t>();
}

}  // namespace pipeline_detail

inline Checkpoint to_checkpoint(const RunState& st) {
    Checkpoint ck;
    ck.meta["format"] = "mdrg-run";
    ck.meta["config"] = config_to_json(st.config);
    ck.meta["codec_frozen"] = st.codec_frozen;
    if (st.vocab) ck.meta["vocab"] = st.vocab->to_json();
    auto prog = nlohmann::json::object();
    for (const auto& [k, p] : st.progress) {
        prog[k] = {{"step", p.step},
                   {"best_val", std::isfinite(p.best_val) ? nlohmann::json(p.best_val) : nlohmann::json(nullptr)},
                   {"bad_evals", p.bad_evals},
                   {"done", p.done}};
    }
    ck.meta["progress"] = prog;
    ck.meta["adam"] = nlohmann::json::object();
    if (st.codec) ck.put("codec", *st.codec);
    if (st.classifier) ck.put("classifier", *st.classifier);
    if (st.scorer) ck.put("scorer", *st.scorer);
    if (st.g) ck.put("g", *st.g);
    if (st.f) ck.put("f", *st.f);
    if (st.g_best) ck.put("g_best", *st.g_best);
    if (st.f_best) ck.put("f_best", *st.f_best);
    pipeline_detail::put_adam(ck, "g", st.g_adam);
    pipeline_detail::put_adam(ck, "f", st.f_adam);
    return ck;
}

/// Rebuilds a run from a checkpoint. When `expected` is given its
/// architecture must match the stored one.
inline RunState from_checkpoint(const Checkpoint& ck, const TrainingConfig* expected = nullptr) {
    if (ck.meta.value("format", "") != "mdrg-run") throw CheckpointError("checkpoint is not a training run");
    RunState st;
    st.config = config_from_json(ck.meta.at("config"));
    if (expected != nullptr) {
        require_same_config("training run", architecture_json(st.config), architecture_json(*expected));
    }
    st.codec_frozen = ck.meta.value("codec_frozen", false);
    if (ck.meta.contains("vocab")) st.vocab = Vocab::from_json(ck.meta.at("vocab"));
    for (const auto& [k, p] : ck.meta.at("progress").items()) {
        StageProgress sp;
        sp.step = p.at("step").get<std::int64_t>();
        sp.best_val = p.at("best_val").is_null() ? std::numeric_limits<double>::infinity() : p.at("best_val").get<double>();
        sp.bad_evals = p.at("bad_evals").get<std::int64_t>();
        sp.done = p.at("done").get<bool>();
        st.progress[k] = sp;
    }
    if (ck.has("codec")) {
        st.codec = CodecParams<float>::init(st.config.codec, 0);
        ck.get("codec", *st.codec);
    }
    if (ck.has("classifier")) {
        st.classifier = ClassifierParams<float>::init(st.config.classifier, 0);
        ck.get("classifier", *st.classifier);
    }
    if (ck.has("scorer")) {
        st.scorer = DualEncoderParams<float>::init(st.scorer_config(), 0);
        ck.get("scorer", *st.scorer);
    }
    auto seq = [&](const std::string& name, const SeqModelConfig& cfg, std::optional<SeqParams<float>>& out) {
        if (!ck.has(name)) return;
        out = SeqParams<float>::init(cfg, 0);
        ck.get(name, *out);
    };
    if (st.vocab) {
        seq("g", st.g_config(), st.g);
        seq("f", st.f_config(), st.f);
        seq("g_best", st.g_config(), st.g_best);
        seq("f_best", st.f_config(), st.f_best);
        if (st.g) pipeline_detail::get_adam(ck, "g", *st.g, st.g_adam);
        if (st.f) pipeline_detail::get_adam(ck, "f", *st.f, st.f_adam);
    }
    return st;
}

inline void save_checkpoint(const RunState& st, const std::string& path) { to_checkpoint(st).save(path); }

inline RunState load_checkpoint(const std::string& path, const TrainingConfig* expected = nullptr) {
    return from_checkpoint(Checkpoint::load(path), expected);
}

}  // namespace mdrg
