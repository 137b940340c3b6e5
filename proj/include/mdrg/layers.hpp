#pragma once

#include "mdrg/tensor.hpp"

#include <cmath>
#include <string>

namespace mdrg {

/// Affine map y = x W + b over a batch of row vectors.
template <class T>
struct Dense {
    Mat<T> w;  // in x out
    Mat<T> b;  // 1 x out

    static Dense init(int in, int out, T stddev, std::mt19937_64& rng) {
        return {random_normal<T>(in, out, stddev, rng), Mat<T>::Zero(1, out)};
    }

    Mat<T> forward(const Mat<T>& x) const {
        Mat<T> y = x * w;
        y.rowwise() += b.row(0);
        return y;
    }

    /// Accumulates parameter gradients into `grad`; returns dL/dx when asked.
    void backward(const Mat<T>& x, const Mat<T>& dy, Dense& grad, Mat<T>* dx) const {
        grad.w.noalias() += x.transpose() * dy;
        grad.b.row(0) += dy.colwise().sum();
        if (dx != nullptr) {
            *dx = dy * w.transpose();
        }
    }

    void append_tensors(const std::string& prefix, TensorList<T>& out) {
        out.push_back({prefix + ".b", &b});
        out.push_back({prefix + ".w", &w});
    }
    void append_tensors(const std::string& prefix, ConstTensorList<T>& out) const {
        out.push_back({prefix + ".b", &b});
        out.push_back({prefix + ".w", &w});
    }
};

template <class T>
Mat<T> tanh_of(const Mat<T>& x) {
    return x.array().tanh().matrix();
}

/// Backprop through y = tanh(x) given y.
template <class T>
Mat<T> tanh_backward(const Mat<T>& y, const Mat<T>& dy) {
    return (dy.array() * (T(1) - y.array().square())).matrix();
}

/// Row-wise numerically stable softmax.
template <class T>
Mat<T> softmax_rows(const Mat<T>& logits) {
    Mat<T> p(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const T mx = logits.row(r).maxCoeff();
        p.row(r) = (logits.row(r).array() - mx).exp().matrix();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

template <class T>
Mat<T> log_softmax_rows(const Mat<T>& logits) {
    Mat<T> out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const T mx = logits.row(r).maxCoeff();
        const T lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
        out.row(r) = (logits.row(r).array() - lse).matrix();
    }
    return out;
}

}  // namespace mdrg
