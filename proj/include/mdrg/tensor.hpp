#pragma once

// Dense numeric plumbing shared by every trainable component: row-major
// matrices, named parameter views, Adam, and seeded random streams.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mdrg {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// A non-owning (name, matrix) handle. Parameter structs expose their
/// tensors as a list of these so optimizers and checkpoints stay generic.
template <class M>
struct NamedRef {
    std::string name;
    M* tensor;
};

template <class T>
using TensorList = std::vector<NamedRef<Mat<T>>>;

template <class T>
using ConstTensorList = std::vector<NamedRef<const Mat<T>>>;

/// Deterministic 64-bit stream derived from a seed and any number of
/// integer salts (stage, step, sample index...).
inline std::mt19937_64 make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> salts = {}) {
    std::vector<std::uint32_t> words;
    words.push_back(static_cast<std::uint32_t>(seed));
    words.push_back(static_cast<std::uint32_t>(seed >> 32));
    for (auto s : salts) {
        words.push_back(static_cast<std::uint32_t>(s));
        words.push_back(static_cast<std::uint32_t>(s >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    return std::mt19937_64(seq);
}

template <class T>
Mat<T> random_normal(Eigen::Index rows, Eigen::Index cols, T stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    Mat<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<T>(dist(rng));
    }
    return m;
}

template <class T>
Mat<T> random_uniform(Eigen::Index rows, Eigen::Index cols, T lo, T hi, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    Mat<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<T>(dist(rng));
    }
    return m;
}

/// Zero every tensor of a parameter struct in place.
template <class Params>
void zero_all(Params& p) {
    for (auto& ref : p.tensors()) {
        ref.tensor->setZero();
    }
}

template <class Params>
Params zeros_like(const Params& p) {
    Params z = p;
    zero_all(z);
    return z;
}

template <class Params>
bool all_finite(const Params& p) {
    for (const auto& ref : p.tensors()) {
        if (!ref.tensor->allFinite()) {
            return false;
        }
    }
    return true;
}

/// dst += scale * src, tensor by tensor.
template <class Params, class T>
void axpy(Params& dst, const Params& src, T scale) {
    auto d = dst.tensors();
    auto s = src.tensors();
    for (std::size_t i = 0; i < d.size(); ++i) {
        *d[i].tensor += scale * *s[i].tensor;
    }
}

template <class Params>
double squared_norm(const Params& p) {
    double acc = 0.0;
    for (const auto& ref : p.tensors()) {
        acc += static_cast<double>(ref.tensor->squaredNorm());
    }
    return acc;
}

/// Scale gradients so their global L2 norm is at most max_norm. Returns the
/// norm before clipping.
template <class Params>
double clip_global_norm(Params& g, double max_norm) {
    const double norm = std::sqrt(squared_norm(g));
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (auto& ref : g.tensors()) {
            *ref.tensor *= static_cast<typename std::remove_reference_t<decltype(*ref.tensor)>::Scalar>(scale);
        }
    }
    return norm;
}

struct AdamConfig {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First and second moment estimates for one parameter struct.
template <class Params>
struct AdamState {
    Params m;
    Params v;
    std::int64_t step = 0;

    AdamState() = default;
    explicit AdamState(const Params& like) : m(zeros_like(like)), v(zeros_like(like)) {}
};

/// One bias-corrected Adam update. Throws on a non-finite gradient and
/// leaves the parameters untouched in that case.
template <class Params>
void adam_step(Params& params, const Params& grads, AdamState<Params>& state, const AdamConfig& cfg) {
    if (!all_finite(grads)) {
        throw std::runtime_error("adam_step: non-finite gradient at optimizer step " +
                                 std::to_string(state.step + 1));
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    auto p = params.tensors();
    auto g = grads.tensors();
    auto m = state.m.tensors();
    auto v = state.v.tensors();
    for (std::size_t i = 0; i < p.size(); ++i) {
        auto& pt = *p[i].tensor;
        const auto& gt = *g[i].tensor;
        auto& mt = *m[i].tensor;
        auto& vt = *v[i].tensor;
        using S = typename std::remove_reference_t<decltype(pt)>::Scalar;
        const S b1 = static_cast<S>(cfg.beta1);
        const S b2 = static_cast<S>(cfg.beta2);
        mt = b1 * mt + (S(1) - b1) * gt;
        vt = b2 * vt + (S(1) - b2) * gt.cwiseProduct(gt);
        const S step_size = static_cast<S>(cfg.lr / bc1);
        const S inv_bc2 = static_cast<S>(1.0 / std::sqrt(bc2));
        const S eps = static_cast<S>(cfg.eps);
        pt.array() -= step_size * mt.array() / ((vt.array().sqrt() * inv_bc2) + eps);
    }
}

/// Convert a parameter struct between scalar types (e.g. float <-> double)
/// by copying tensors positionally; the target must already have the shapes.
template <class Dst, class Src>
void cast_into(Dst& dst, const Src& src) {
    auto d = dst.tensors();
    auto s = src.tensors();
    if (d.size() != s.size()) {
        throw std::invalid_argument("cast_into: tensor count mismatch");
    }
    for (std::size_t i = 0; i < d.size(); ++i) {
        using S = typename std::remove_reference_t<decltype(*d[i].tensor)>::Scalar;
        *d[i].tensor = s[i].tensor->template cast<S>();
    }
}

}  // namespace mdrg
