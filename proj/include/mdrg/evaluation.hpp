#pragma once

// Automatic metrics: intent F1, BLEU-1/2, ROUGE-L, unigram F1, perplexity,
// Frechet distance and Inception Score, plus the small shape classifier
// that supplies class probabilities for IS and label checks.

#include "mdrg/image.hpp"
#include "mdrg/layers.hpp"
#include "mdrg/seq_core.hpp"
#include "mdrg/tensor.hpp"

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdrg {

/// Whitespace tokenization used by the text metrics.
inline std::vector<std::string> words(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> out;
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

struct BinaryScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// F1 on the positive class. With no predicted positives precision is 0.
inline BinaryScores intent_f1(const std::vector<bool>& preds, const std::vector<bool>& golds) {
    if (preds.size() != golds.size()) throw std::invalid_argument("intent_f1: prediction and gold counts differ");
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] && golds[i]) ++tp;
        else if (preds[i]) ++fp;
        else if (golds[i]) ++fn;
    }
    if (tp + fn == 0) throw std::invalid_argument("intent_f1: gold labels contain no positive");
    BinaryScores s;
    s.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    s.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    s.f1 = s.precision + s.recall == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

namespace metric_detail {

inline void check_pairs(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
    if (hyps.size() != refs.size()) throw std::invalid_argument("text metric: hypothesis and reference counts differ");
    if (hyps.empty()) throw std::invalid_argument("text metric: no pairs");
    for (const auto& r : refs) {
        if (words(r).empty()) throw std::invalid_argument("text metric: empty reference");
    }
}

inline std::map<std::vector<std::string>, int> ngrams(const std::vector<std::string>& w, int n) {
    std::map<std::vector<std::string>, int> out;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= w.size(); ++i) {
        ++out[std::vector<std::string>(w.begin() + static_cast<std::ptrdiff_t>(i),
                                       w.begin() + static_cast<std::ptrdiff_t>(i) + n)];
    }
    return out;
}

inline std::size_t lcs(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline double f_measure(double overlap, double hyp_len, double ref_len) {
    if (overlap <= 0.0 || hyp_len <= 0.0 || ref_len <= 0.0) return 0.0;
    const double p = overlap / hyp_len;
    const double r = overlap / ref_len;
    return 2.0 * p * r / (p + r);
}

}  // namespace metric_detail

inline constexpr double kBleuFloor = 1e-9;

/// Corpus BLEU up to order max_n with brevity penalty; an order with no
/// matches contributes precision kBleuFloor.
inline double bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs, int max_n) {
    metric_detail::check_pairs(hyps, refs);
    if (max_n < 1) throw std::invalid_argument("bleu: order must be >= 1");
    std::vector<double> match(static_cast<std::size_t>(max_n), 0.0), total(static_cast<std::size_t>(max_n), 0.0);
    double hyp_len = 0.0, ref_len = 0.0;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        const auto h = words(hyps[i]);
        const auto r = words(refs[i]);
        hyp_len += static_cast<double>(h.size());
        ref_len += static_cast<double>(r.size());
        for (int n = 1; n <= max_n; ++n) {
            const auto hn = metric_detail::ngrams(h, n);
            const auto rn = metric_detail::ngrams(r, n);
            for (const auto& [g, c] : hn) {
                auto it = rn.find(g);
                match[static_cast<std::size_t>(n - 1)] += it == rn.end() ? 0 : std::min(c, it->second);
                total[static_cast<std::size_t>(n - 1)] += c;
            }
        }
    }
    if (hyp_len == 0.0) return 0.0;
    double log_sum = 0.0;
    for (int n = 0; n < max_n; ++n) {
        const auto k = static_cast<std::size_t>(n);
        const double p = total[k] > 0.0 && match[k] > 0.0 ? match[k] / total[k] : kBleuFloor;
        log_sum += std::log(p);
    }
    const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
    return bp * std::exp(log_sum / max_n);
}

/// Mean per-pair ROUGE-L F-measure (beta = 1).
inline double rouge_l(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
    metric_detail::check_pairs(hyps, refs);
    double acc = 0.0;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        const auto h = words(hyps[i]);
        const auto r = words(refs[i]);
        acc += metric_detail::f_measure(static_cast<double>(metric_detail::lcs(h, r)), static_cast<double>(h.size()),
                                        static_cast<double>(r.size()));
    }
    return acc / static_cast<double>(hyps.size());
}

/// Mean per-pair unigram F1 with clipped (multiset) overlap.
inline double token_f1(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
    metric_detail::check_pairs(hyps, refs);
    double acc = 0.0;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        const auto h = words(hyps[i]);
        const auto r = words(refs[i]);
        const auto hc = metric_detail::ngrams(h, 1);
        const auto rc = metric_detail::ngrams(r, 1);
        double overlap = 0.0;
        for (const auto& [g, c] : hc) {
            auto it = rc.find(g);
            if (it != rc.end()) overlap += std::min(c, it->second);
        }
        acc += metric_detail::f_measure(overlap, static_cast<double>(h.size()), static_cast<double>(r.size()));
    }
    return acc / static_cast<double>(hyps.size());
}

/// exp of the token-mean NLL over the scored positions.
template <class T>
double perplexity(const SeqParams<T>& p, const std::vector<LossExample>& batch) {
    return std::exp(nll_loss<T>(p, batch));
}

/// Frechet distance between Gaussian fits of two feature sets (rows are
/// samples). When a set has fewer than d+1 samples, 1e-6 I is added to both
/// covariances.
inline double fid(const Mat<double>& a, const Mat<double>& b) {
    if (a.cols() != b.cols()) throw std::invalid_argument("fid: feature dimensions differ");
    if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("fid: empty feature set");
    const auto d = a.cols();
    auto moments = [](const Mat<double>& x, RowVec<double>& mu, Mat<double>& cov) {
        mu = x.colwise().mean();
        Mat<double> c = x.rowwise() - mu;
        cov = (c.transpose() * c) / static_cast<double>(std::max<Eigen::Index>(x.rows() - 1, 1));
    };
    RowVec<double> mu_a, mu_b;
    Mat<double> sa, sb;
    moments(a, mu_a, sa);
    moments(b, mu_b, sb);
    if (a.rows() < d + 1 || b.rows() < d + 1) {
        sa += 1e-6 * Mat<double>::Identity(d, d);
        sb += 1e-6 * Mat<double>::Identity(d, d);
    }
    auto psd_sqrt = [](const Mat<double>& m) {
        Eigen::SelfAdjointEigenSolver<Mat<double>> es(m);
        Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
        return Mat<double>(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
    };
    const Mat<double> ra = psd_sqrt(sa);
    Mat<double> m = ra * sb * ra;
    m = 0.5 * (m + m.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Mat<double>> es(m, Eigen::EigenvaluesOnly);
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    return (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
}

struct InceptionScore {
    double mean = 0.0;
    double std = 0.0;
};

/// exp(E_x KL(p(y|x) || p(y))) per split; mean and population std over
/// splits. Splits are contiguous and capped at the sample count.
inline InceptionScore inception_score(const std::vector<std::vector<double>>& probs, int splits = 10) {
    if (probs.empty()) throw std::invalid_argument("inception_score: no samples");
    if (splits < 1) throw std::invalid_argument("inception_score: splits must be >= 1");
    const std::size_t c = probs.front().size();
    for (const auto& p : probs) {
        if (p.size() != c) throw std::invalid_argument("inception_score: class counts differ");
        double s = 0.0;
        for (double v : p) {
            if (!(v >= 0.0)) throw std::invalid_argument("inception_score: negative probability");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-6) throw std::invalid_argument("inception_score: distribution not normalized");
    }
    const std::size_t n = probs.size();
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(splits), n);
    std::vector<double> scores;
    for (std::size_t s = 0; s < k; ++s) {
        const std::size_t lo = s * n / k, hi = (s + 1) * n / k;
        std::vector<double> marginal(c, 0.0);
        for (std::size_t i = lo; i < hi; ++i)
            for (std::size_t j = 0; j < c; ++j) marginal[j] += probs[i][j];
        for (auto& m : marginal) m /= static_cast<double>(hi - lo);
        double kl = 0.0;
        for (std::size_t i = lo; i < hi; ++i)
            for (std::size_t j = 0; j < c; ++j)
                if (probs[i][j] > 0.0) kl += probs[i][j] * (std::log(probs[i][j]) - std::log(marginal[j]));
        scores.push_back(std::exp(kl / static_cast<double>(hi - lo)));
    }
    InceptionScore out;
    for (double v : scores) out.mean += v;
    out.mean /= static_cast<double>(scores.size());
    for (double v : scores) out.std += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(out.std / static_cast<double>(scores.size()));
    return out;
}

// ------------------------------------------------------ shape classifier

struct ClassifierConfig {
    int classes = 3;
    int pool = 16;
    int hidden = 32;
    int features() const { return pool * pool * 3; }
    friend bool operator==(const ClassifierConfig&, const ClassifierConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ClassifierConfig& c) {
    j = {{"classes", c.classes}, {"pool", c.pool}, {"hidden", c.hidden}};
}

inline void from_json(const nlohmann::json& j, ClassifierConfig& c) {
    c.classes = j.at("classes").get<int>();
    c.pool = j.at("pool").get<int>();
    c.hidden = j.at("hidden").get<int>();
}

template <class T>
struct ClassifierParams {
    ClassifierConfig config;
    Dense<T> l1, l2;

    static ClassifierParams init(const ClassifierConfig& cfg, std::uint64_t seed) {
        auto rng = make_rng(seed, {0xC1A5ull});
        ClassifierParams p;
        p.config = cfg;
        p.l1 = Dense<T>::init(cfg.features(), cfg.hidden, T(1) / std::sqrt(T(cfg.features())), rng);
        p.l2 = Dense<T>::init(cfg.hidden, cfg.classes, T(1) / std::sqrt(T(cfg.hidden)), rng);
        return p;
    }
    TensorList<T> tensors() {
        TensorList<T> out;
        l1.append_tensors("l1", out);
        l2.append_tensors("l2", out);
        return out;
    }
    ConstTensorList<T> tensors() const {
        ConstTensorList<T> out;
        l1.append_tensors("l1", out);
        l2.append_tensors("l2", out);
        return out;
    }
};

template <class T>
Mat<T> classifier_inputs(const ClassifierConfig& cfg, const std::vector<const ImageTensor*>& images) {
    Mat<T> x(static_cast<Eigen::Index>(images.size()), cfg.features());
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto pooled = pool_image(*images[i], cfg.pool, cfg.pool);
        for (std::size_t c = 0; c < pooled.size(); ++c) {
            x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = static_cast<T>(pooled[c]) * T(2) - T(1);
        }
    }
    return x;
}

/// Mean cross-entropy of the classifier over a labelled batch.
template <class T>
double classifier_loss_and_grad(const ClassifierParams<T>& p, const Mat<T>& x, const std::vector<int>& labels,
                                ClassifierParams<T>* grad) {
    const auto n = x.rows();
    if (n == 0 || static_cast<std::size_t>(n) != labels.size()) throw std::invalid_argument("classifier loss: bad batch");
    Mat<T> h = tanh_of<T>(p.l1.forward(x));
    Mat<T> lp = log_softmax_rows<T>(p.l2.forward(h));
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) loss -= static_cast<double>(lp(i, labels[static_cast<std::size_t>(i)]));
    loss /= static_cast<double>(n);
    if (grad == nullptr) return loss;
    Mat<T> dl = lp.array().exp().matrix();
    for (Eigen::Index i = 0; i < n; ++i) dl(i, labels[static_cast<std::size_t>(i)]) -= T(1);
    dl /= static_cast<T>(n);
    Mat<T> dh;
    p.l2.backward(h, dl, grad->l2, &dh);
    p.l1.backward(x, tanh_backward<T>(h, dh), grad->l1, nullptr);
    return loss;
}

struct ClassifierTrainOptions {
    int steps = 300;
    int batch_size = 32;
    double lr = 3e-3;
    std::uint64_t seed = 5;
};

inline ClassifierParams<float> train_classifier(const std::vector<const ImageTensor*>& images,
                                                const std::vector<int>& labels, const ClassifierConfig& cfg,
                                                const ClassifierTrainOptions& opt) {
    if (images.empty() || images.size() != labels.size()) throw std::invalid_argument("train_classifier: bad data");
    for (int l : labels) {
        if (l < 0 || l >= cfg.classes) throw std::out_of_range("train_classifier: label outside class range");
    }
    const Mat<float> all = classifier_inputs<float>(cfg, images);
    auto params = ClassifierParams<float>::init(cfg, opt.seed);
    AdamState<ClassifierParams<float>> adam(params);
    AdamConfig acfg;
    acfg.lr = opt.lr;
    const auto bs = std::min<std::size_t>(static_cast<std::size_t>(opt.batch_size), images.size());
    for (int step = 0; step < opt.steps; ++step) {
        auto rng = make_rng(opt.seed, {0xC1A6ull, static_cast<std::uint64_t>(step)});
        std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
        Mat<float> x(static_cast<Eigen::Index>(bs), all.cols());
        std::vector<int> y(bs);
        for (std::size_t b = 0; b < bs; ++b) {
            const auto i = pick(rng);
            x.row(static_cast<Eigen::Index>(b)) = all.row(static_cast<Eigen::Index>(i));
            y[b] = labels[i];
        }
        auto grad = zeros_like(params);
        classifier_loss_and_grad<float>(params, x, y, &grad);
        adam_step(params, grad, adam, acfg);
    }
    return params;
}

inline std::vector<double> classify(const ClassifierParams<float>& p, const ImageTensor& img) {
    Mat<float> x = classifier_inputs<float>(p.config, {&img});
    Mat<float> pr = softmax_rows<float>(p.l2.forward(tanh_of<float>(p.l1.forward(x))));
    std::vector<double> out(static_cast<std::size_t>(pr.cols()));
    double s = 0.0;
    for (Eigen::Index c = 0; c < pr.cols(); ++c) s += out[static_cast<std::size_t>(c)] = static_cast<double>(pr(0, c));
    for (auto& v : out) v /= s;
    return out;
}

inline int predicted_class(const std::vector<double>& probs) {
    return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

// --------------------------------------------------------------- report

struct MetricsReport {
    double intent_precision = 0, intent_recall = 0, intent_f1 = 0;
    double description_ppl = 0, description_bleu1 = 0, description_bleu2 = 0, description_rouge_l = 0;
    double response_ppl = 0, response_bleu1 = 0, response_bleu2 = 0, response_rouge_l = 0, response_token_f1 = 0;
    double fid = 0, is_mean = 0, is_std = 0;
    double label_match = 0;  // generated image class == described class
    std::map<std::string, std::size_t> counts;
    std::map<std::string, std::string> backends;

    nlohmann::json to_json() const {
        return {{"intent", {{"precision", intent_precision}, {"recall", intent_recall}, {"f1", intent_f1}}},
                {"description",
                 {{"ppl", description_ppl}, {"bleu1", description_bleu1}, {"bleu2", description_bleu2},
                  {"rouge_l", description_rouge_l}}},
                {"image", {{"fid", fid}, {"is_mean", is_mean}, {"is_std", is_std}, {"label_match", label_match}}},
                {"response",
                 {{"ppl", response_ppl}, {"bleu1", response_bleu1}, {"bleu2", response_bleu2},
                  {"rouge_l", response_rouge_l}, {"token_f1", response_token_f1}}},
                {"counts", counts},
                {"backends", backends}};
    }

    /// Plain-text table grouped as intent | description | image | response.
    std::string table() const {
        char buf[512];
        std::string out;
        std::snprintf(buf, sizeof buf, "%-8s | %-31s | %-24s | %-38s\n", "Intent", "Image Description Generation",
                      "Image Generation", "Text Response Generation");
        out += buf;
        std::snprintf(buf, sizeof buf, "%-8s | %7s %7s %7s %7s | %7s %7s %8s | %7s %7s %7s %7s %7s\n", "F1", "PPL",
                      "B-1", "B-2", "Rouge", "FID", "IS", "IS-std", "PPL", "B-1", "B-2", "Rouge", "F1");
        out += buf;
        std::snprintf(buf, sizeof buf, "%8.4f | %7.3f %7.4f %7.4f %7.4f | %7.3f %7.3f %8.3f | %7.3f %7.4f %7.4f %7.4f %7.4f\n",
                      intent_f1, description_ppl, description_bleu1, description_bleu2, description_rouge_l, fid,
                      is_mean, is_std, response_ppl, response_bleu1, response_bleu2, response_rouge_l,
                      response_token_f1);
        out += buf;
        return out;
    }
};

}  // namespace mdrg
