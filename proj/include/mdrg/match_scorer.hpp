#pragma once

// Description/image match scores used to rerank sampled images: a small
// contrastive dual encoder, and a prototype-distance scorer for tests.

#include "mdrg/datasets.hpp"
#include "mdrg/image.hpp"
#include "mdrg/layers.hpp"
#include "mdrg/tensor.hpp"
#include "mdrg/text_tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdrg {

class MatchScorer {
public:
    virtual ~MatchScorer() = default;
    /// Higher means a better match.
    virtual double score(const std::string& description, const ImageTensor& image) const = 0;
    virtual std::string backend() const = 0;
};

/// Negative MSE between the image and a prototype chosen by description.
class PrototypeScorer : public MatchScorer {
public:
    using Lookup = std::function<ImageTensor(const std::string&)>;
    explicit PrototypeScorer(Lookup lookup) : lookup_(std::move(lookup)) {}

    /// Prototypes rendered from synthetic-world descriptions.
    static PrototypeScorer synthetic(int image_size) {
        return PrototypeScorer([image_size](const std::string& d) {
            const auto spec = parse_description(d);
            if (!spec) throw std::invalid_argument("prototype scorer: not a synthetic description: " + d);
            return render_shape(*spec, image_size);
        });
    }

    double score(const std::string& description, const ImageTensor& image) const override {
        return -mean_squared_error(lookup_(description), image);
    }
    std::string backend() const override { return "prototype-mse"; }

private:
    Lookup lookup_;
};

struct DualEncoderConfig {
    int text_vocab = 512;
    int pool = 8;        // images are block-averaged to pool x pool
    int hidden = 64;
    int embed = 32;
    double scale = 10.0;  // logit scale on cosine similarities

    int image_features() const { return pool * pool * 3; }
    friend bool operator==(const DualEncoderConfig&, const DualEncoderConfig&) = default;
};

inline void to_json(nlohmann::json& j, const DualEncoderConfig& c) {
    j = {{"text_vocab", c.text_vocab}, {"pool", c.pool}, {"hidden", c.hidden}, {"embed", c.embed}, {"scale", c.scale}};
}

inline void from_json(const nlohmann::json& j, DualEncoderConfig& c) {
    c.text_vocab = j.at("text_vocab").get<int>();
    c.pool = j.at("pool").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.embed = j.at("embed").get<int>();
    c.scale = j.at("scale").get<double>();
}

template <class T>
struct DualEncoderParams {
    DualEncoderConfig config;
    Dense<T> img1, img2, text;

    static DualEncoderParams init(const DualEncoderConfig& cfg, std::uint64_t seed) {
        auto rng = make_rng(seed, {0xD0A1ull});
        DualEncoderParams p;
        p.config = cfg;
        p.img1 = Dense<T>::init(cfg.image_features(), cfg.hidden, T(1) / std::sqrt(T(cfg.image_features())), rng);
        p.img2 = Dense<T>::init(cfg.hidden, cfg.embed, T(1) / std::sqrt(T(cfg.hidden)), rng);
        p.text = Dense<T>::init(cfg.text_vocab, cfg.embed, T(1), rng);
        return p;
    }

    TensorList<T> tensors() {
        TensorList<T> out;
        img1.append_tensors("img1", out);
        img2.append_tensors("img2", out);
        text.append_tensors("text", out);
        return out;
    }
    ConstTensorList<T> tensors() const {
        ConstTensorList<T> out;
        img1.append_tensors("img1", out);
        img2.append_tensors("img2", out);
        text.append_tensors("text", out);
        return out;
    }
};

namespace scorer_detail {

template <class T>
Mat<T> normalize_rows(const Mat<T>& a, std::vector<T>* norms = nullptr) {
    Mat<T> u = a;
    if (norms != nullptr) norms->resize(static_cast<std::size_t>(a.rows()));
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        const T n = std::max(a.row(r).norm(), T(1e-12));
        u.row(r) /= n;
        if (norms != nullptr) (*norms)[static_cast<std::size_t>(r)] = n;
    }
    return u;
}

template <class T>
Mat<T> normalize_rows_backward(const Mat<T>& u, const std::vector<T>& norms, const Mat<T>& du) {
    Mat<T> da(u.rows(), u.cols());
    for (Eigen::Index r = 0; r < u.rows(); ++r) {
        const T dot = u.row(r).dot(du.row(r));
        da.row(r) = (du.row(r) - dot * u.row(r)) / norms[static_cast<std::size_t>(r)];
    }
    return da;
}

}  // namespace scorer_detail

/// Normalized bag of token ids.
template <class T>
Mat<T> text_features(const DualEncoderConfig& cfg, const std::vector<TokenSeq>& texts) {
    Mat<T> f = Mat<T>::Zero(static_cast<Eigen::Index>(texts.size()), cfg.text_vocab);
    for (std::size_t i = 0; i < texts.size(); ++i) {
        for (auto id : texts[i]) {
            if (id < 0 || id >= cfg.text_vocab) throw std::out_of_range("dual encoder: token id outside vocabulary");
            f(static_cast<Eigen::Index>(i), id) += T(1);
        }
        if (!texts[i].empty()) f.row(static_cast<Eigen::Index>(i)) /= static_cast<T>(texts[i].size());
    }
    return f;
}

template <class T>
Mat<T> image_features(const DualEncoderConfig& cfg, const std::vector<const ImageTensor*>& images) {
    Mat<T> f(static_cast<Eigen::Index>(images.size()), cfg.image_features());
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto pooled = pool_image(*images[i], cfg.pool, cfg.pool);
        for (std::size_t c = 0; c < pooled.size(); ++c) {
            f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = static_cast<T>(pooled[c]) * T(2) - T(1);
        }
    }
    return f;
}

/// Symmetric contrastive loss over a batch of matching (text, image) rows.
/// Row i of each side is the positive pair; other rows act as negatives.
template <class T>
double dual_encoder_loss_and_grad(const DualEncoderParams<T>& p, const Mat<T>& text_in, const Mat<T>& image_in,
                                  DualEncoderParams<T>* grad) {
    using namespace scorer_detail;
    const auto n = text_in.rows();
    if (n == 0 || image_in.rows() != n) throw std::invalid_argument("dual encoder loss: batch sides differ or empty");
    const T scale = static_cast<T>(p.config.scale);
    Mat<T> a = p.text.forward(text_in);
    std::vector<T> an, bn;
    Mat<T> u = normalize_rows<T>(a, &an);
    Mat<T> h = tanh_of<T>(p.img1.forward(image_in));
    Mat<T> b = p.img2.forward(h);
    Mat<T> v = normalize_rows<T>(b, &bn);
    Mat<T> s = scale * u * v.transpose();
    Mat<T> lr = log_softmax_rows<T>(s);
    Mat<T> lc = log_softmax_rows<T>(s.transpose());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) loss -= 0.5 * static_cast<double>(lr(i, i) + lc(i, i));
    loss /= static_cast<double>(n);
    if (grad == nullptr) return loss;

    const Mat<T> eye = Mat<T>::Identity(n, n);
    Mat<T> ds = ((lr.array().exp().matrix() - eye) + (lc.array().exp().matrix() - eye).transpose()) *
                (T(0.5) / static_cast<T>(n));
    Mat<T> du = scale * ds * v;
    Mat<T> dv = scale * ds.transpose() * u;
    Mat<T> da = normalize_rows_backward<T>(u, an, du);
    Mat<T> db = normalize_rows_backward<T>(v, bn, dv);
    p.text.backward(text_in, da, grad->text, nullptr);
    Mat<T> dh;
    p.img2.backward(h, db, grad->img2, &dh);
    p.img1.backward(image_in, tanh_backward<T>(h, dh), grad->img1, nullptr);
    return loss;
}

/// Contrastive dual-encoder scorer: cosine similarity of embeddings.
class DualEncoderScorer : public MatchScorer {
public:
    DualEncoderScorer(Vocab vocab, DualEncoderParams<float> params)
        : vocab_(std::move(vocab)), params_(std::move(params)) {}

    double score(const std::string& description, const ImageTensor& image) const override {
        const auto& cfg = params_.config;
        Mat<float> t = text_features<float>(cfg, {vocab_.encode(description)});
        Mat<float> u = scorer_detail::normalize_rows<float>(params_.text.forward(t));
        Mat<float> i = image_features<float>(cfg, {&image});
        Mat<float> v = scorer_detail::normalize_rows<float>(params_.img2.forward(tanh_of<float>(params_.img1.forward(i))));
        return static_cast<double>(u.row(0).dot(v.row(0)));
    }
    std::string backend() const override { return "dual-encoder"; }

    const DualEncoderParams<float>& params() const { return params_; }
    DualEncoderParams<float>& params() { return params_; }
    const Vocab& vocab() const { return vocab_; }

private:
    Vocab vocab_;
    DualEncoderParams<float> params_;
};

struct ScorerTrainOptions {
    int steps = 400;
    int batch_size = 16;
    double lr = 3e-3;
    std::uint64_t seed = 3;
};

/// Trains on (description, image) pairs. Pairs are deduplicated by
/// description so no batch holds two positives for the same text.
inline DualEncoderScorer train_dual_encoder(const Vocab& vocab,
                                            const std::vector<std::pair<std::string, const ImageTensor*>>& pairs,
                                            const DualEncoderConfig& cfg, const ScorerTrainOptions& opt) {
    std::vector<std::pair<std::string, const ImageTensor*>> unique;
    std::map<std::string, bool> seen;
    for (const auto& pr : pairs) {
        if (seen.emplace(pr.first, true).second) unique.push_back(pr);
    }
    if (unique.size() < 2) throw std::invalid_argument("train_dual_encoder: need at least 2 distinct descriptions");
    std::vector<TokenSeq> tokens;
    std::vector<const ImageTensor*> images;
    for (const auto& [d, img] : unique) {
        tokens.push_back(vocab.encode(d));
        images.push_back(img);
    }
    const Mat<float> all_text = text_features<float>(cfg, tokens);
    const Mat<float> all_images = image_features<float>(cfg, images);
    auto params = DualEncoderParams<float>::init(cfg, opt.seed);
    AdamState<DualEncoderParams<float>> adam(params);
    AdamConfig acfg;
    acfg.lr = opt.lr;
    const auto n = unique.size();
    const auto bs = std::min<std::size_t>(static_cast<std::size_t>(opt.batch_size), n);
    std::vector<Eigen::Index> order(n);
    for (int step = 0; step < opt.steps; ++step) {
        auto rng = make_rng(opt.seed, {0x5C0Eull, static_cast<std::uint64_t>(step)});
        std::iota(order.begin(), order.end(), Eigen::Index{0});
        std::shuffle(order.begin(), order.end(), rng);
        Mat<float> t(static_cast<Eigen::Index>(bs), all_text.cols());
        Mat<float> im(static_cast<Eigen::Index>(bs), all_images.cols());
        for (std::size_t b = 0; b < bs; ++b) {
            t.row(static_cast<Eigen::Index>(b)) = all_text.row(order[b]);
            im.row(static_cast<Eigen::Index>(b)) = all_images.row(order[b]);
        }
        auto grad = zeros_like(params);
        dual_encoder_loss_and_grad<float>(params, t, im, &grad);
        adam_step(params, grad, adam, acfg);
    }
    return DualEncoderScorer(vocab, std::move(params));
}

/// Fraction of descriptions whose best-scoring image (among all images of
/// the set) carries the same description.
inline double top1_retrieval_accuracy(const MatchScorer& scorer,
                                      const std::vector<std::pair<std::string, const ImageTensor*>>& pairs) {
    if (pairs.empty()) throw std::invalid_argument("retrieval accuracy: no pairs");
    std::size_t hits = 0;
    for (const auto& [desc, _] : pairs) {
        std::size_t best = 0;
        double best_s = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < pairs.size(); ++j) {
            const double s = scorer.score(desc, *pairs[j].second);
            if (s > best_s) {
                best_s = s;
                best = j;
            }
        }
        if (pairs[best].first == desc) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

}  // namespace mdrg
