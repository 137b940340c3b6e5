#pragma once

// Inference over a trained run: generate a response with G, turn every
// description segment into n sampled images with F and the codec, rerank
// them, and attach the best. Also scores predictions against gold
// dialogues and evaluates a run on a held-out split.

#include "mdrg/training_pipeline.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdrg {

/// Raised when a run lacks a component needed for inference.
class ModelUnavailable : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RespondOptions {
    bool pure_text = false;
    int beam = 5;
    int n_samples = 8;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    int max_new = 32;
};

struct ImageResult {
    std::string description;
    std::vector<ImageTensor> candidates;  // generation order
    std::vector<std::size_t> order;       // best first
    const ImageTensor& top() const { return candidates[order.front()]; }
};

struct AgentSegment {
    ResponseSegment::Kind kind = ResponseSegment::Kind::text;
    std::string text;  // text, or the description for images
    std::optional<ImageResult> image;
};

struct AgentReply {
    GeneratedResponse generated;
    std::vector<AgentSegment> segments;

    MultimodalResponse as_response(const std::string& speaker) const {
        MultimodalResponse r{speaker, {}};
        for (const auto& s : segments) r.segments.push_back({s.kind, s.text, {}});
        return r;
    }
};

class Agent {
public:
    explicit Agent(const RunState& st) {
        if (!st.vocab) throw ModelUnavailable("no tokenizer in checkpoint");
        if (!st.g) throw ModelUnavailable("no generator in checkpoint");
        if (!st.f) throw ModelUnavailable("no translator in checkpoint");
        if (!st.codec) throw ModelUnavailable("no image codec in checkpoint");
        if (!st.scorer) throw ModelUnavailable("no rerank scorer in checkpoint");
        vocab_ = *st.vocab;
        g_ = *st.g;
        f_ = *st.f;
        codec_ = *st.codec;
        layout_ = st.layout();
        scorer_.emplace(*st.vocab, *st.scorer);
        if (st.classifier) classifier_ = *st.classifier;
    }

    AgentReply respond(const DialogueContext& ctx, const RespondOptions& opt) const {
        AgentReply out;
        out.generated = generate_response(g_, ctx, vocab_, {opt.beam, opt.pure_text, opt.max_new});
        std::uint64_t k = 0;
        for (const auto& seg : out.generated.parsed.segments) {
            AgentSegment s{seg.kind, seg.text, std::nullopt};
            if (seg.kind == ResponseSegment::Kind::image) s.image = draw(seg.text, opt, k++);
            out.segments.push_back(std::move(s));
        }
        return out;
    }

    /// n images for a description, reranked.
    ImageResult draw(const std::string& description, const RespondOptions& opt, std::uint64_t index = 0) const {
        const std::uint64_t seed = make_rng(opt.seed, {0xA6E7ull, index})();
        ImageResult r;
        r.description = description;
        const auto c = description_tokens(vocab_, description, layout_);
        for (const auto& s : generate_image_tokens(f_, layout_, c, opt.n_samples, opt.temperature, seed)) {
            r.candidates.push_back(tokens_to_image(codec_, s));
        }
        r.order = rerank(*scorer_, description, r.candidates);
        return r;
    }

    const Vocab& vocab() const { return vocab_; }
    const CodecParams<float>& codec() const { return codec_; }
    const MatchScorer& scorer() const { return *scorer_; }
    const std::optional<ClassifierParams<float>>& classifier() const { return classifier_; }

private:
    Vocab vocab_;
    SeqParams<float> g_, f_;
    CodecParams<float> codec_;
    StreamLayout layout_;
    std::optional<DualEncoderScorer> scorer_;
    std::optional<ClassifierParams<float>> classifier_;
};

// ------------------------------------------------------------- scoring

inline std::string response_text(const MultimodalResponse& r) {
    std::string out;
    for (const auto& s : r.segments) {
        if (s.kind != ResponseSegment::Kind::text) continue;
        if (!out.empty()) out += ' ';
        out += s.text;
    }
    return out;
}

inline std::string response_description(const MultimodalResponse& r) {
    for (const auto& s : r.segments) {
        if (s.kind == ResponseSegment::Kind::image) return s.text;
    }
    return "";
}

/// Intent and text-overlap metrics of predictions against gold dialogues,
/// matched by id. Perplexity and image metrics need a model and are left 0.
inline MetricsReport score_predictions(const std::vector<MultimodalDialogue>& preds,
                                       const std::vector<MultimodalDialogue>& golds) {
    std::map<std::string, const MultimodalDialogue*> by_id;
    for (const auto& p : preds) {
        if (!by_id.emplace(p.id, &p).second) throw std::invalid_argument("predictions: duplicate id " + p.id);
    }
    std::vector<bool> pi, gi;
    std::vector<std::string> dh, dr, th, tr;
    for (const auto& g : golds) {
        auto it = by_id.find(g.id);
        if (it == by_id.end()) throw std::invalid_argument("predictions: no prediction for id " + g.id);
        const auto& p = *it->second;
        pi.push_back(intent_label(p));
        gi.push_back(intent_label(g));
        if (intent_label(g)) {
            dh.push_back(response_description(p.response));
            dr.push_back(response_description(g.response));
        }
        const auto ref = response_text(g.response);
        if (!words(ref).empty()) {
            th.push_back(response_text(p.response));
            tr.push_back(ref);
        }
    }
    MetricsReport r;
    const auto f = intent_f1(pi, gi);
    r.intent_precision = f.precision;
    r.intent_recall = f.recall;
    r.intent_f1 = f.f1;
    r.counts["intent"] = golds.size();
    r.counts["description"] = dh.size();
    r.counts["response"] = th.size();
    if (!dh.empty()) {
        r.description_bleu1 = bleu(dh, dr, 1);
        r.description_bleu2 = bleu(dh, dr, 2);
        r.description_rouge_l = rouge_l(dh, dr);
    }
    if (!th.empty()) {
        r.response_bleu1 = bleu(th, tr, 1);
        r.response_bleu2 = bleu(th, tr, 2);
        r.response_rouge_l = rouge_l(th, tr);
        r.response_token_f1 = token_f1(th, tr);
    }
    return r;
}

struct EvalOptions {
    RespondOptions respond;
    int limit = -1;  // cap on evaluated dialogues
};

struct EvalResult {
    MetricsReport report;
    std::vector<MultimodalDialogue> predictions;
    std::vector<ImageTensor> top_images;  // one per image-bearing prediction, in order
};

/// Generates a response for every dialogue of `split` and reports all metrics.
inline EvalResult evaluate_run(const RunState& st, const SyntheticCorpus& c, const std::vector<MultimodalDialogue>& split,
                               const EvalOptions& opt) {
    if (split.empty()) throw std::invalid_argument("evaluate: empty split");
    const Agent agent(st);
    const auto gold = pipeline_detail::head(split, opt.limit);
    EvalResult out;
    std::vector<std::vector<double>> fake_features, probs;
    std::size_t image_responses = 0, label_hits = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        auto ro = opt.respond;
        ro.seed = make_rng(opt.respond.seed, {0xE7A1ull, i})();
        const auto reply = agent.respond(gold[i].context, ro);
        MultimodalDialogue pred{gold[i].id, gold[i].context, reply.as_response(gold[i].response.speaker)};
        for (std::size_t k = 0; k < reply.segments.size(); ++k) {
            const auto& seg = reply.segments[k];
            if (!seg.image) continue;
            pred.response.segments[k].image_path = "generated/" + gold[i].id + ".png";
            const auto& top = seg.image->top();
            out.top_images.push_back(top);
            fake_features.push_back(encoder_features(*st.codec, top));
            ++image_responses;
            if (st.classifier) {
                const auto p = classify(*st.classifier, top);
                const auto cls = shape_class_of(seg.text);
                if (cls && predicted_class(p) == *cls) ++label_hits;
                probs.push_back(p);
            }
            break;
        }
        out.predictions.push_back(std::move(pred));
    }
    auto& r = out.report = score_predictions(out.predictions, gold);

    // Teacher-forced perplexities over the description and text spans of gold targets.
    const auto gcfg = st.g_config();
    std::vector<LossExample> desc_batch, text_batch;
    for (const auto& d : gold) {
        const auto target = build_target(d.response, *st.vocab);
        const auto ex = g_training_example(d.context, target, *st.vocab, gcfg, st.config);
        const std::size_t off = ex.tokens.size() - target.tokens.size();
        LossExample de{ex.tokens, std::vector<std::uint8_t>(ex.tokens.size(), 0)};
        LossExample te = de;
        for (const auto& s : target.spans) {
            auto& m = s.kind == TargetSpan::Kind::description ? de.mask : te.mask;
            for (std::size_t t = s.begin; t < s.end; ++t) m[off + t] = 1;
        }
        if (de.scored() > 0) desc_batch.push_back(std::move(de));
        if (te.scored() > 0) text_batch.push_back(std::move(te));
    }
    if (!desc_batch.empty()) r.description_ppl = perplexity(*st.g, desc_batch);
    if (!text_batch.empty()) r.response_ppl = perplexity(*st.g, text_batch);

    r.counts["image"] = image_responses;
    r.backends["fid"] = "codec-encoder-mean";
    r.backends["is"] = st.classifier ? "shape-classifier" : "none";
    r.backends["rerank"] = agent.scorer().backend();
    if (!fake_features.empty()) {
        std::vector<std::vector<double>> real;
        for (const auto& d : gold) {
            for (const auto& s : d.response.segments) {
                if (s.kind == ResponseSegment::Kind::image && !s.image_path.empty()) {
                    real.push_back(encoder_features(*st.codec, corpus_image(c, s.image_path)));
                }
            }
        }
        auto to_mat = [](const std::vector<std::vector<double>>& rows) {
            Mat<double> m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
            for (std::size_t i = 0; i < rows.size(); ++i)
                for (std::size_t j = 0; j < rows[i].size(); ++j)
                    m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
            return m;
        };
        if (!real.empty()) r.fid = fid(to_mat(real), to_mat(fake_features));
        if (!probs.empty()) {
            const auto is = inception_score(probs);
            r.is_mean = is.mean;
            r.is_std = is.std;
            r.label_match = static_cast<double>(label_hits) / static_cast<double>(image_responses);
        }
    }
    return out;
}

}  // namespace mdrg
