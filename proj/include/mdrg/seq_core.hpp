#pragma once

// Decoder-only causal transformer shared by the dialogue generator and the
// text-to-image translator.
//
// Layout: learned token + absolute position embeddings, pre-LayerNorm blocks
// (multi-head causal self-attention, GELU MLP), final LayerNorm, untied output
// projection. Scoring a sequence x_0..x_{n-1} feeds [BOS, x_0, .., x_{n-2}] so
// that output row t is p(x_t | x_<t); BOS is the EOS id.

#include "mdrg/layers.hpp"
#include "mdrg/tensor.hpp"
#include "mdrg/text_tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdrg {

struct SeqModelConfig {
    int vocab_size = kDefaultVocabSize;
    int layers = 2;
    int heads = 4;
    int hidden = 64;
    int max_len = 64;
    TokenId bos_id = special::kEos;

    int head_dim() const { return hidden / heads; }

    void validate() const {
        if (vocab_size <= 0 || layers <= 0 || heads <= 0 || hidden <= 0 || max_len <= 0) {
            throw std::invalid_argument("seq model config: sizes must be positive");
        }
        if (hidden % heads != 0) {
            throw std::invalid_argument("seq model config: hidden (" + std::to_string(hidden) +
                                        ") must be divisible by heads (" + std::to_string(heads) + ")");
        }
        if (bos_id < 0 || bos_id >= vocab_size) {
            throw std::invalid_argument("seq model config: bos id outside vocabulary");
        }
    }

    friend bool operator==(const SeqModelConfig&, const SeqModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const SeqModelConfig& c) {
    j = {{"vocab_size", c.vocab_size}, {"layers", c.layers},   {"heads", c.heads},
         {"hidden", c.hidden},         {"max_len", c.max_len}, {"bos_id", c.bos_id}};
}

inline void from_json(const nlohmann::json& j, SeqModelConfig& c) {
    SeqModelConfig d;
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.layers = j.value("layers", d.layers);
    c.heads = j.value("heads", d.heads);
    c.hidden = j.value("hidden", d.hidden);
    c.max_len = j.value("max_len", d.max_len);
    c.bos_id = j.value("bos_id", d.bos_id);
}

template <class T>
struct BlockParams {
    Mat<T> ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o;
    Mat<T> ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
};

template <class T>
struct SeqParams {
    SeqModelConfig config;
    Mat<T> tok_emb;  // V x d
    Mat<T> pos_emb;  // max_len x d
    std::vector<BlockParams<T>> blocks;
    Mat<T> lnf_g, lnf_b;
    Mat<T> w_out;  // d x V
    Mat<T> b_out;  // 1 x V

    static SeqParams init(const SeqModelConfig& cfg, std::uint64_t seed, T stddev = T(0.02)) {
        cfg.validate();
        auto rng = make_rng(seed, {0x5E0ull});
        const int d = cfg.hidden;
        SeqParams p;
        p.config = cfg;
        p.tok_emb = random_normal<T>(cfg.vocab_size, d, stddev, rng);
        p.pos_emb = random_normal<T>(cfg.max_len, d, stddev, rng);
        const T proj_std = stddev / std::sqrt(T(2 * cfg.layers));
        for (int l = 0; l < cfg.layers; ++l) {
            BlockParams<T> b;
            b.ln1_g = Mat<T>::Ones(1, d);
            b.ln1_b = Mat<T>::Zero(1, d);
            b.w_qkv = random_normal<T>(d, 3 * d, stddev, rng);
            b.b_qkv = Mat<T>::Zero(1, 3 * d);
            b.w_o = random_normal<T>(d, d, proj_std, rng);
            b.b_o = Mat<T>::Zero(1, d);
            b.ln2_g = Mat<T>::Ones(1, d);
            b.ln2_b = Mat<T>::Zero(1, d);
            b.w_fc = random_normal<T>(d, 4 * d, stddev, rng);
            b.b_fc = Mat<T>::Zero(1, 4 * d);
            b.w_proj = random_normal<T>(4 * d, d, proj_std, rng);
            b.b_proj = Mat<T>::Zero(1, d);
            p.blocks.push_back(std::move(b));
        }
        p.lnf_g = Mat<T>::Ones(1, d);
        p.lnf_b = Mat<T>::Zero(1, d);
        p.w_out = random_normal<T>(d, cfg.vocab_size, stddev, rng);
        p.b_out = Mat<T>::Zero(1, cfg.vocab_size);
        return p;
    }

    template <class List, class Self>
    static List collect(Self& self) {
        List out;
        out.push_back({"b_out", &self.b_out});
        for (std::size_t l = 0; l < self.blocks.size(); ++l) {
            auto& b = self.blocks[l];
            const std::string pre = "blocks." + std::to_string(l) + ".";
            out.push_back({pre + "b_fc", &b.b_fc});
            out.push_back({pre + "b_o", &b.b_o});
            out.push_back({pre + "b_proj", &b.b_proj});
            out.push_back({pre + "b_qkv", &b.b_qkv});
            out.push_back({pre + "ln1_b", &b.ln1_b});
            out.push_back({pre + "ln1_g", &b.ln1_g});
            out.push_back({pre + "ln2_b", &b.ln2_b});
            out.push_back({pre + "ln2_g", &b.ln2_g});
            out.push_back({pre + "w_fc", &b.w_fc});
            out.push_back({pre + "w_o", &b.w_o});
            out.push_back({pre + "w_proj", &b.w_proj});
            out.push_back({pre + "w_qkv", &b.w_qkv});
        }
        out.push_back({"lnf_b", &self.lnf_b});
        out.push_back({"lnf_g", &self.lnf_g});
        out.push_back({"pos_emb", &self.pos_emb});
        out.push_back({"tok_emb", &self.tok_emb});
        out.push_back({"w_out", &self.w_out});
        return out;
    }

    TensorList<T> tensors() { return collect<TensorList<T>>(*this); }
    ConstTensorList<T> tensors() const { return collect<ConstTensorList<T>>(*this); }
};

namespace seq_detail {

inline constexpr double kLnEps = 1e-5;

template <class T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, Mat<T>* xhat_out, Mat<T>* rstd_out) {
    const auto n = x.rows();
    const auto d = x.cols();
    Mat<T> xhat(n, d);
    Mat<T> rstd(n, 1);
    for (Eigen::Index r = 0; r < n; ++r) {
        const T mean = x.row(r).mean();
        const T var = (x.row(r).array() - mean).square().mean();
        const T rs = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
        rstd(r, 0) = rs;
        xhat.row(r) = ((x.row(r).array() - mean) * rs).matrix();
    }
    Mat<T> y = (xhat.array().rowwise() * g.row(0).array()).matrix();
    y.rowwise() += b.row(0);
    if (xhat_out != nullptr) *xhat_out = std::move(xhat);
    if (rstd_out != nullptr) *rstd_out = std::move(rstd);
    return y;
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const Mat<T>& rstd, const Mat<T>& g, Mat<T>& dg,
                           Mat<T>& db) {
    dg.row(0) += (dy.array() * xhat.array()).matrix().colwise().sum();
    db.row(0) += dy.colwise().sum();
    Mat<T> dxhat = (dy.array().rowwise() * g.row(0).array()).matrix();
    Mat<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const T m1 = dxhat.row(r).mean();
        const T m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
        dx.row(r) = (rstd(r, 0) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2)).matrix();
    }
    return dx;
}

template <class T>
inline T gelu_c() {
    return static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
}

template <class T>
Mat<T> gelu(const Mat<T>& f) {
    const T c = gelu_c<T>();
    auto a = f.array();
    return (T(0.5) * a * (T(1) + (c * (a + T(0.044715) * a.cube())).tanh())).matrix();
}

template <class T>
Mat<T> gelu_backward(const Mat<T>& f, const Mat<T>& dg) {
    const T c = gelu_c<T>();
    auto a = f.array();
    auto t = (c * (a + T(0.044715) * a.cube())).tanh();
    auto deriv = T(0.5) * (T(1) + t) + T(0.5) * a * (T(1) - t.square()) * c * (T(1) + T(3 * 0.044715) * a.square());
    return (dg.array() * deriv).matrix();
}

template <class T>
struct BlockCache {
    Mat<T> x_in, xhat1, rstd1, h1, qkv;
    std::vector<Mat<T>> probs;  // per head, n x n
    Mat<T> att, x_mid, xhat2, rstd2, h2, f, g;
};

}  // namespace seq_detail

template <class T>
struct SeqCache {
    std::vector<TokenId> inputs;
    std::vector<seq_detail::BlockCache<T>> blocks;
    Mat<T> xhatf, rstdf, hf;
};

/// Logits for an input sequence (rows = positions). Row t depends only on
/// inputs[0..t].
template <class T>
Mat<T> run_inputs(const SeqParams<T>& p, std::span<const TokenId> inputs, SeqCache<T>* cache = nullptr) {
    using namespace seq_detail;
    const auto& cfg = p.config;
    const int n = static_cast<int>(inputs.size());
    if (n > cfg.max_len) {
        throw std::invalid_argument("seq model: sequence of " + std::to_string(n) + " positions exceeds max_len " +
                                    std::to_string(cfg.max_len));
    }
    const int d = cfg.hidden;
    const int nh = cfg.heads;
    const int hd = cfg.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    Mat<T> x(n, d);
    for (int t = 0; t < n; ++t) {
        const TokenId id = inputs[static_cast<std::size_t>(t)];
        if (id < 0 || id >= cfg.vocab_size) {
            throw std::out_of_range("seq model: token id " + std::to_string(id) + " outside vocabulary");
        }
        x.row(t) = p.tok_emb.row(id) + p.pos_emb.row(t);
    }
    if (cache != nullptr) {
        cache->inputs.assign(inputs.begin(), inputs.end());
        cache->blocks.assign(p.blocks.size(), {});
    }
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        const auto& b = p.blocks[l];
        BlockCache<T> local;
        BlockCache<T>& c = cache != nullptr ? cache->blocks[l] : local;
        c.x_in = x;
        c.h1 = layer_norm(x, b.ln1_g, b.ln1_b, &c.xhat1, &c.rstd1);
        c.qkv.noalias() = c.h1 * b.w_qkv;
        c.qkv.rowwise() += b.b_qkv.row(0);
        c.att.resize(n, d);
        c.probs.resize(static_cast<std::size_t>(nh));
        for (int h = 0; h < nh; ++h) {
            auto q = c.qkv.middleCols(h * hd, hd);
            auto k = c.qkv.middleCols(d + h * hd, hd);
            auto v = c.qkv.middleCols(2 * d + h * hd, hd);
            Mat<T> s = (q * k.transpose()) * scale;
            Mat<T>& pr = c.probs[static_cast<std::size_t>(h)];
            pr.setZero(n, n);
            for (int i = 0; i < n; ++i) {
                const T mx = s.row(i).head(i + 1).maxCoeff();
                T sum = 0;
                for (int j = 0; j <= i; ++j) {
                    const T e = std::exp(s(i, j) - mx);
                    pr(i, j) = e;
                    sum += e;
                }
                pr.row(i).head(i + 1) /= sum;
            }
            c.att.middleCols(h * hd, hd).noalias() = pr * v;
        }
        c.x_mid = c.x_in;
        c.x_mid.noalias() += c.att * b.w_o;
        c.x_mid.rowwise() += b.b_o.row(0);
        c.h2 = layer_norm(c.x_mid, b.ln2_g, b.ln2_b, &c.xhat2, &c.rstd2);
        c.f.noalias() = c.h2 * b.w_fc;
        c.f.rowwise() += b.b_fc.row(0);
        c.g = gelu<T>(c.f);
        x = c.x_mid;
        x.noalias() += c.g * b.w_proj;
        x.rowwise() += b.b_proj.row(0);
    }
    Mat<T> xhatf, rstdf;
    Mat<T> hf = layer_norm(x, p.lnf_g, p.lnf_b, &xhatf, &rstdf);
    Mat<T> logits = hf * p.w_out;
    logits.rowwise() += p.b_out.row(0);
    if (cache != nullptr) {
        cache->xhatf = std::move(xhatf);
        cache->rstdf = std::move(rstdf);
        cache->hf = std::move(hf);
    }
    return logits;
}

/// Accumulates parameter gradients for d(loss)/d(logits) = dlogits.
template <class T>
void backward_inputs(const SeqParams<T>& p, const SeqCache<T>& c, const Mat<T>& dlogits, SeqParams<T>& grad) {
    using namespace seq_detail;
    const auto& cfg = p.config;
    const int n = static_cast<int>(c.inputs.size());
    const int d = cfg.hidden;
    const int nh = cfg.heads;
    const int hd = cfg.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    grad.w_out.noalias() += c.hf.transpose() * dlogits;
    grad.b_out.row(0) += dlogits.colwise().sum();
    Mat<T> dhf = dlogits * p.w_out.transpose();
    Mat<T> dx = layer_norm_backward(dhf, c.xhatf, c.rstdf, p.lnf_g, grad.lnf_g, grad.lnf_b);

    for (int l = static_cast<int>(p.blocks.size()) - 1; l >= 0; --l) {
        const auto& b = p.blocks[static_cast<std::size_t>(l)];
        const auto& bc = c.blocks[static_cast<std::size_t>(l)];
        auto& gb = grad.blocks[static_cast<std::size_t>(l)];

        // MLP branch.
        gb.w_proj.noalias() += bc.g.transpose() * dx;
        gb.b_proj.row(0) += dx.colwise().sum();
        Mat<T> dg = dx * b.w_proj.transpose();
        Mat<T> df = gelu_backward<T>(bc.f, dg);
        gb.w_fc.noalias() += bc.h2.transpose() * df;
        gb.b_fc.row(0) += df.colwise().sum();
        Mat<T> dh2 = df * b.w_fc.transpose();
        Mat<T> dx_mid = dx + layer_norm_backward(dh2, bc.xhat2, bc.rstd2, b.ln2_g, gb.ln2_g, gb.ln2_b);

        // Attention branch.
        gb.w_o.noalias() += bc.att.transpose() * dx_mid;
        gb.b_o.row(0) += dx_mid.colwise().sum();
        Mat<T> datt = dx_mid * b.w_o.transpose();
        Mat<T> dqkv(n, 3 * d);
        for (int h = 0; h < nh; ++h) {
            const auto& pr = bc.probs[static_cast<std::size_t>(h)];
            auto q = bc.qkv.middleCols(h * hd, hd);
            auto k = bc.qkv.middleCols(d + h * hd, hd);
            auto v = bc.qkv.middleCols(2 * d + h * hd, hd);
            auto da = datt.middleCols(h * hd, hd);
            Mat<T> dp = da * v.transpose();
            dqkv.middleCols(2 * d + h * hd, hd).noalias() = pr.transpose() * da;
            Mat<T> ds(n, n);
            for (int i = 0; i < n; ++i) {
                const T dot = (dp.row(i).array() * pr.row(i).array()).sum();
                ds.row(i) = (pr.row(i).array() * (dp.row(i).array() - dot)).matrix();
            }
            ds *= scale;
            dqkv.middleCols(h * hd, hd).noalias() = ds * k;
            dqkv.middleCols(d + h * hd, hd).noalias() = ds.transpose() * q;
        }
        gb.w_qkv.noalias() += bc.h1.transpose() * dqkv;
        gb.b_qkv.row(0) += dqkv.colwise().sum();
        Mat<T> dh1 = dqkv * b.w_qkv.transpose();
        dx = dx_mid + layer_norm_backward(dh1, bc.xhat1, bc.rstd1, b.ln1_g, gb.ln1_g, gb.ln1_b);
    }
    for (int t = 0; t < n; ++t) {
        grad.tok_emb.row(c.inputs[static_cast<std::size_t>(t)]) += dx.row(t);
        grad.pos_emb.row(t) += dx.row(t);
    }
}

/// Shifted inputs for scoring `tokens`: [BOS, tokens[0..n-2]].
inline std::vector<TokenId> scoring_inputs(const SeqModelConfig& cfg, const TokenSeq& tokens) {
    std::vector<TokenId> in;
    in.reserve(tokens.size());
    if (tokens.empty()) return in;
    in.push_back(cfg.bos_id);
    in.insert(in.end(), tokens.begin(), tokens.end() - 1);
    return in;
}

/// Per-position next-token distributions; row t is p(tokens[t] | tokens[<t]).
/// Rows before `first_position` are omitted.
template <class T>
Mat<T> forward(const SeqParams<T>& p, const TokenSeq& tokens, int first_position = 0) {
    const auto in = scoring_inputs(p.config, tokens);
    Mat<T> probs = softmax_rows<T>(run_inputs<T>(p, in));
    const int keep = std::max(0, static_cast<int>(probs.rows()) - first_position);
    return probs.bottomRows(keep);
}

/// A sequence with the subset of positions that are scored.
struct LossExample {
    TokenSeq tokens;
    std::vector<std::uint8_t> mask;  // same length; 1 = scored

    std::size_t scored() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }

    static LossExample all_positions(TokenSeq t) {
        LossExample e;
        e.mask.assign(t.size(), 1);
        e.tokens = std::move(t);
        return e;
    }
};

inline void check_example(const SeqModelConfig& cfg, const LossExample& ex) {
    if (ex.mask.size() != ex.tokens.size()) {
        throw std::invalid_argument("loss example: mask length differs from token length");
    }
    if (static_cast<int>(ex.tokens.size()) > cfg.max_len) {
        throw std::invalid_argument("loss example: " + std::to_string(ex.tokens.size()) +
                                    " tokens exceed max_len " + std::to_string(cfg.max_len));
    }
}

/// -log p(tokens[t] | tokens[<t]) for every position (masked or not).
template <class T>
std::vector<double> token_nlls(const SeqParams<T>& p, const TokenSeq& tokens) {
    const auto in = scoring_inputs(p.config, tokens);
    const Mat<T> lp = log_softmax_rows<T>(run_inputs<T>(p, in));
    std::vector<double> out(tokens.size());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        out[t] = -static_cast<double>(lp(static_cast<Eigen::Index>(t), tokens[t]));
    }
    return out;
}

struct NllTotals {
    double sum = 0.0;
    std::size_t count = 0;
    double mean() const { return sum / static_cast<double>(count); }
};

/// Token-mean NLL over all scored positions of a batch. When `grad` is set,
/// gradients of that mean are accumulated into it (scaled by `grad_scale`).
template <class T>
double nll_loss_and_grad(const SeqParams<T>& p, const std::vector<LossExample>& batch, SeqParams<T>* grad,
                         T grad_scale = T(1), NllTotals* totals = nullptr) {
    std::size_t count = 0;
    for (const auto& ex : batch) {
        check_example(p.config, ex);
        count += ex.scored();
    }
    if (count == 0) throw std::invalid_argument("nll_loss: mask selects no positions");
    double sum = 0.0;
    const T inv = grad_scale / static_cast<T>(count);
    for (const auto& ex : batch) {
        if (ex.scored() == 0) continue;
        const auto in = scoring_inputs(p.config, ex.tokens);
        SeqCache<T> cache;
        const Mat<T> logits = run_inputs<T>(p, in, grad != nullptr ? &cache : nullptr);
        const Mat<T> lp = log_softmax_rows<T>(logits);
        Mat<T> dlogits;
        if (grad != nullptr) dlogits = Mat<T>::Zero(logits.rows(), logits.cols());
        for (std::size_t t = 0; t < ex.tokens.size(); ++t) {
            if (!ex.mask[t]) continue;
            const auto r = static_cast<Eigen::Index>(t);
            sum -= static_cast<double>(lp(r, ex.tokens[t]));
            if (grad != nullptr) {
                dlogits.row(r) = lp.row(r).array().exp().matrix() * inv;
                dlogits(r, ex.tokens[t]) -= inv;
            }
        }
        if (grad != nullptr) backward_inputs(p, cache, dlogits, *grad);
    }
    if (totals != nullptr) {
        totals->sum += sum;
        totals->count += count;
    }
    return sum / static_cast<double>(count);
}

template <class T>
double nll_loss(const SeqParams<T>& p, const std::vector<LossExample>& batch) {
    return nll_loss_and_grad<T>(p, batch, nullptr);
}

/// Key/value cache for incremental decoding. Copyable so beams can fork.
template <class T>
struct IncrementalState {
    std::vector<Mat<T>> keys;    // per layer, max_len x d
    std::vector<Mat<T>> values;  // per layer, max_len x d
    int length = 0;

    explicit IncrementalState(const SeqModelConfig& cfg) {
        keys.assign(static_cast<std::size_t>(cfg.layers), Mat<T>::Zero(cfg.max_len, cfg.hidden));
        values = keys;
    }
};

/// Feed one input token; returns logits for the next position.
template <class T>
RowVec<T> step(const SeqParams<T>& p, IncrementalState<T>& st, TokenId input) {
    using namespace seq_detail;
    const auto& cfg = p.config;
    if (st.length >= cfg.max_len) {
        throw std::invalid_argument("seq model: incremental decode exceeds max_len " + std::to_string(cfg.max_len));
    }
    if (input < 0 || input >= cfg.vocab_size) {
        throw std::out_of_range("seq model: token id " + std::to_string(input) + " outside vocabulary");
    }
    const int d = cfg.hidden;
    const int hd = cfg.head_dim();
    const int t = st.length;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    Mat<T> x = p.tok_emb.row(input) + p.pos_emb.row(t);
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        const auto& b = p.blocks[l];
        Mat<T> h1 = layer_norm<T>(x, b.ln1_g, b.ln1_b, nullptr, nullptr);
        Mat<T> qkv = h1 * b.w_qkv;
        qkv.row(0) += b.b_qkv.row(0);
        st.keys[l].row(t) = qkv.block(0, d, 1, d);
        st.values[l].row(t) = qkv.block(0, 2 * d, 1, d);
        Mat<T> att(1, d);
        for (int h = 0; h < cfg.heads; ++h) {
            auto q = qkv.block(0, h * hd, 1, hd);
            auto k = st.keys[l].block(0, h * hd, t + 1, hd);
            auto v = st.values[l].block(0, h * hd, t + 1, hd);
            Mat<T> s = (q * k.transpose()) * scale;
            const T mx = s.maxCoeff();
            Mat<T> e = (s.array() - mx).exp().matrix();
            e /= e.sum();
            att.block(0, h * hd, 1, hd) = e * v;
        }
        Mat<T> x_mid = x + att * b.w_o;
        x_mid.row(0) += b.b_o.row(0);
        Mat<T> h2 = layer_norm<T>(x_mid, b.ln2_g, b.ln2_b, nullptr, nullptr);
        Mat<T> f = h2 * b.w_fc;
        f.row(0) += b.b_fc.row(0);
        x = x_mid + gelu<T>(f) * b.w_proj;
        x.row(0) += b.b_proj.row(0);
    }
    Mat<T> hf = layer_norm<T>(x, p.lnf_g, p.lnf_b, nullptr, nullptr);
    RowVec<T> logits = hf.row(0) * p.w_out;
    logits += p.b_out.row(0);
    st.length += 1;
    return logits;
}

/// Feed BOS then `prefix`; returns logits for the first token after it.
template <class T>
RowVec<T> prime(const SeqParams<T>& p, IncrementalState<T>& st, const TokenSeq& prefix) {
    RowVec<T> logits = step(p, st, p.config.bos_id);
    for (TokenId id : prefix) logits = step(p, st, id);
    return logits;
}

inline std::vector<double> log_softmax_masked(const auto& logits, const std::set<TokenId>& blocked) {
    const auto n = static_cast<std::size_t>(logits.size());
    std::vector<double> lp(n);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        lp[i] = blocked.count(static_cast<TokenId>(i)) ? -std::numeric_limits<double>::infinity()
                                                       : static_cast<double>(logits(static_cast<Eigen::Index>(i)));
        mx = std::max(mx, lp[i]);
    }
    double sum = 0.0;
    for (double v : lp) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    for (auto& v : lp) v -= lse;
    return lp;
}

struct DecodeOptions {
    int beam = 5;
    TokenId stop_id = special::kEos;
    int max_new = 48;
    std::set<TokenId> blocked;
};

struct DecodeResult {
    TokenSeq tokens;      // generated tokens, including the stop id when reached
    double logprob = 0;   // sum of log-probabilities
    double score = 0;     // logprob / tokens.size()
    bool finished = false;
};

/// Length-normalized beam search. beam == 1 is greedy argmax decoding
/// (ties to the smaller id). Blocked ids get -inf before selection.
template <class T>
DecodeResult beam_decode(const SeqParams<T>& p, const TokenSeq& prefix, const DecodeOptions& opt) {
    if (opt.beam < 1) throw std::invalid_argument("beam_decode: beam must be >= 1");
    if (static_cast<int>(prefix.size()) >= p.config.max_len) {
        throw std::invalid_argument("beam_decode: prefix of " + std::to_string(prefix.size()) +
                                    " tokens leaves no room within max_len " + std::to_string(p.config.max_len));
    }
    struct Hyp {
        TokenSeq tokens;
        double logprob = 0;
        IncrementalState<T> state;
        RowVec<T> logits;
    };
    std::vector<Hyp> alive;
    {
        IncrementalState<T> st(p.config);
        RowVec<T> logits = prime(p, st, prefix);
        alive.push_back({{}, 0.0, std::move(st), std::move(logits)});
    }
    std::vector<DecodeResult> finished;
    // Inputs available: max_len - 1 - prefix; the final token needs no input.
    const int room = p.config.max_len - static_cast<int>(prefix.size());
    const int max_new = std::min(opt.max_new, room);

    for (int t = 0; t < max_new && !alive.empty(); ++t) {
        struct Cand {
            double logprob;
            std::size_t parent;
            TokenId token;
        };
        std::vector<Cand> cands;
        for (std::size_t h = 0; h < alive.size(); ++h) {
            const auto lp = log_softmax_masked(alive[h].logits, opt.blocked);
            // Only the top `beam` tokens of each parent can survive.
            std::vector<TokenId> order(lp.size());
            std::iota(order.begin(), order.end(), 0);
            const auto k = std::min<std::size_t>(static_cast<std::size_t>(opt.beam), order.size());
            std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                              [&](TokenId a, TokenId b) { return lp[a] > lp[b] || (lp[a] == lp[b] && a < b); });
            for (std::size_t i = 0; i < k; ++i) {
                const double v = lp[static_cast<std::size_t>(order[i])];
                if (!std::isfinite(v)) continue;
                cands.push_back({alive[h].logprob + v, h, order[i]});
            }
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.logprob != b.logprob) return a.logprob > b.logprob;
            if (a.parent != b.parent) return a.parent < b.parent;
            return a.token < b.token;
        });
        std::vector<Hyp> next;
        const bool last_step = t + 1 == max_new;
        int taken = 0;
        for (const auto& c : cands) {
            if (taken == opt.beam) break;
            ++taken;
            TokenSeq toks = alive[c.parent].tokens;
            toks.push_back(c.token);
            const double norm = c.logprob / static_cast<double>(toks.size());
            if (c.token == opt.stop_id) {
                finished.push_back({std::move(toks), c.logprob, norm, true});
            } else if (last_step) {
                finished.push_back({std::move(toks), c.logprob, norm, false});
            } else {
                Hyp h{std::move(toks), c.logprob, alive[c.parent].state, {}};
                h.logits = step(p, h.state, c.token);
                next.push_back(std::move(h));
            }
        }
        // Log-probs only fall, so an alive hypothesis can at best reach
        // logprob / max_new. Stop once no such bound beats the best finish.
        double best_done = -std::numeric_limits<double>::infinity();
        for (const auto& f : finished) {
            if (f.finished) best_done = std::max(best_done, f.score);
        }
        const bool hopeless = std::all_of(next.begin(), next.end(), [&](const Hyp& h) {
            return h.logprob / static_cast<double>(max_new) <= best_done;
        });
        if (hopeless) next.clear();
        alive = std::move(next);
    }
    for (const auto& h : alive) {
        if (!h.tokens.empty()) {
            finished.push_back({h.tokens, h.logprob, h.logprob / static_cast<double>(h.tokens.size()), false});
        }
    }
    if (finished.empty()) return {};
    // Prefer sequences that reached the stop id; then highest normalized score.
    const auto best = std::min_element(finished.begin(), finished.end(), [](const auto& a, const auto& b) {
        if (a.finished != b.finished) return a.finished;
        return a.score > b.score;
    });
    return *best;
}

/// Ancestral sampling of `count` tokens after `prefix`, restricted to ids in
/// [allowed_lo, allowed_hi). temperature <= 0 selects the argmax.
template <class T>
TokenSeq sample_tokens(const SeqParams<T>& p, const TokenSeq& prefix, int count, TokenId allowed_lo,
                       TokenId allowed_hi, double temperature, std::mt19937_64& rng) {
    if (static_cast<int>(prefix.size()) + count > p.config.max_len) {
        throw std::invalid_argument("sample_tokens: prefix + generated length exceeds max_len");
    }
    IncrementalState<T> st(p.config);
    RowVec<T> logits = prime(p, st, prefix);
    TokenSeq out;
    out.reserve(static_cast<std::size_t>(count));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int i = 0; i < count; ++i) {
        TokenId chosen = allowed_lo;
        if (temperature <= 0.0) {
            T best = -std::numeric_limits<T>::infinity();
            for (TokenId id = allowed_lo; id < allowed_hi; ++id) {
                if (logits(id) > best) {
                    best = logits(id);
                    chosen = id;
                }
            }
        } else {
            double mx = -std::numeric_limits<double>::infinity();
            for (TokenId id = allowed_lo; id < allowed_hi; ++id) mx = std::max(mx, static_cast<double>(logits(id)));
            std::vector<double> w(static_cast<std::size_t>(allowed_hi - allowed_lo));
            double sum = 0.0;
            for (TokenId id = allowed_lo; id < allowed_hi; ++id) {
                const double e = std::exp((static_cast<double>(logits(id)) - mx) / temperature);
                w[static_cast<std::size_t>(id - allowed_lo)] = e;
                sum += e;
            }
            double u = unif(rng) * sum;
            chosen = allowed_hi - 1;
            for (std::size_t j = 0; j < w.size(); ++j) {
                u -= w[j];
                if (u < 0.0) {
                    chosen = allowed_lo + static_cast<TokenId>(j);
                    break;
                }
            }
        }
        out.push_back(chosen);
        if (i + 1 < count) logits = step(p, st, chosen);
    }
    return out;
}

}  // namespace mdrg
