#pragma once

// Discrete image auto-encoder: a patch-local encoder compresses an
// H x W x 3 image to an h x w x d_z latent grid, every cell snaps to its
// nearest codebook entry, and a decoder maps the quantized grid back to
// pixels. Each decoder output patch sees its cell and the 8 neighbours.

#include "mdrg/image.hpp"
#include "mdrg/layers.hpp"
#include "mdrg/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdrg {

struct CodecConfig {
    int height = 32;  // H
    int width = 32;   // W
    int grid_h = 4;   // h
    int grid_w = 4;   // w
    int codebook_size = 64;  // K
    int latent_dim = 16;     // d_z
    int enc_hidden = 128;
    int dec_hidden = 128;

    int patch_h() const { return height / grid_h; }
    int patch_w() const { return width / grid_w; }
    int patch_dim() const { return patch_h() * patch_w() * 3; }
    int cells() const { return grid_h * grid_w; }

    void validate() const {
        auto pow2 = [](int v) { return v > 0 && (v & (v - 1)) == 0; };
        if (height <= 0 || width <= 0 || grid_h <= 0 || grid_w <= 0 || codebook_size <= 0 || latent_dim <= 0 ||
            enc_hidden <= 0 || dec_hidden <= 0) {
            throw std::invalid_argument("codec config: all sizes must be positive");
        }
        if (height % grid_h != 0 || width % grid_w != 0) {
            throw std::invalid_argument("codec config: image size must be a multiple of the grid size");
        }
        if (!pow2(height / grid_h) || !pow2(width / grid_w)) {
            throw std::invalid_argument("codec config: downsample factor must be a power of two");
        }
    }

    friend bool operator==(const CodecConfig&, const CodecConfig&) = default;
};

inline void to_json(nlohmann::json& j, const CodecConfig& c) {
    j = {{"height", c.height},       {"width", c.width},           {"grid_h", c.grid_h},
         {"grid_w", c.grid_w},       {"codebook_size", c.codebook_size}, {"latent_dim", c.latent_dim},
         {"enc_hidden", c.enc_hidden}, {"dec_hidden", c.dec_hidden}};
}

inline void from_json(const nlohmann::json& j, CodecConfig& c) {
    CodecConfig d;
    c.height = j.value("height", d.height);
    c.width = j.value("width", d.width);
    c.grid_h = j.value("grid_h", d.grid_h);
    c.grid_w = j.value("grid_w", d.grid_w);
    c.codebook_size = j.value("codebook_size", d.codebook_size);
    c.latent_dim = j.value("latent_dim", d.latent_dim);
    c.enc_hidden = j.value("enc_hidden", d.enc_hidden);
    c.dec_hidden = j.value("dec_hidden", d.dec_hidden);
}

/// h x w cells of d_z reals; row r = i * w + j.
template <class T>
struct LatentGrid {
    int h = 0;
    int w = 0;
    Mat<T> values;

    int dim() const { return static_cast<int>(values.cols()); }
    friend bool operator==(const LatentGrid& a, const LatentGrid& b) {
        return a.h == b.h && a.w == b.w && a.values.rows() == b.values.rows() &&
               a.values.cols() == b.values.cols() && a.values == b.values;
    }
};

/// Row-major codebook indices, one per latent cell.
using ImageTokenSeq = std::vector<int>;

template <class T>
struct Codebook {
    Mat<T> entries;  // K x d_z

    int size() const { return static_cast<int>(entries.rows()); }
    int dim() const { return static_cast<int>(entries.cols()); }

    /// True if no two entries lie within `tol` (max-abs) of each other.
    bool entries_distinct(double tol = 1e-9) const {
        for (int a = 0; a < size(); ++a) {
            for (int b = a + 1; b < size(); ++b) {
                if ((entries.row(a) - entries.row(b)).cwiseAbs().maxCoeff() <= tol) return false;
            }
        }
        return true;
    }
};

template <class T>
struct Quantized {
    LatentGrid<T> z_q;
    ImageTokenSeq indices;
};

/// Nearest-entry quantization; equal distances resolve to the smallest index.
template <class T>
Quantized<T> quantize(const Codebook<T>& cb, const LatentGrid<T>& z) {
    if (cb.size() == 0) throw std::invalid_argument("quantize: empty codebook");
    if (cb.dim() != z.dim()) throw std::invalid_argument("quantize: latent dim does not match codebook");
    Quantized<T> out;
    out.z_q.h = z.h;
    out.z_q.w = z.w;
    out.z_q.values.resize(z.values.rows(), z.values.cols());
    out.indices.resize(static_cast<std::size_t>(z.values.rows()));
    for (Eigen::Index r = 0; r < z.values.rows(); ++r) {
        int best = 0;
        T best_d = std::numeric_limits<T>::infinity();
        for (int k = 0; k < cb.size(); ++k) {
            const T d = (z.values.row(r) - cb.entries.row(k)).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        out.indices[static_cast<std::size_t>(r)] = best;
        out.z_q.values.row(r) = cb.entries.row(best);
    }
    return out;
}

template <class T>
LatentGrid<T> indices_to_codes(const Codebook<T>& cb, const ImageTokenSeq& s, int h, int w) {
    if (static_cast<int>(s.size()) != h * w) {
        throw std::invalid_argument("indices_to_codes: expected " + std::to_string(h * w) + " indices, got " +
                                    std::to_string(s.size()));
    }
    LatentGrid<T> g{h, w, Mat<T>(h * w, cb.dim())};
    for (std::size_t r = 0; r < s.size(); ++r) {
        if (s[r] < 0 || s[r] >= cb.size()) {
            throw std::out_of_range("indices_to_codes: index " + std::to_string(s[r]) + " outside codebook of size " +
                                    std::to_string(cb.size()));
        }
        g.values.row(static_cast<Eigen::Index>(r)) = cb.entries.row(s[r]);
    }
    return g;
}

template <class T>
struct CodecParams {
    CodecConfig config;
    Dense<T> enc1, enc2, dec1, dec2;
    Codebook<T> codebook;

    static CodecParams init(const CodecConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        auto rng = make_rng(seed, {0xC0DECull});
        CodecParams p;
        p.config = cfg;
        const int nb = 9 * cfg.latent_dim;
        p.enc1 = Dense<T>::init(cfg.patch_dim(), cfg.enc_hidden, T(1) / std::sqrt(T(cfg.patch_dim())), rng);
        p.enc2 = Dense<T>::init(cfg.enc_hidden, cfg.latent_dim, T(0.1) / std::sqrt(T(cfg.enc_hidden)), rng);
        p.dec1 = Dense<T>::init(nb, cfg.dec_hidden, T(1) / std::sqrt(T(nb)), rng);
        p.dec2 = Dense<T>::init(cfg.dec_hidden, cfg.patch_dim(), T(1) / std::sqrt(T(cfg.dec_hidden)), rng);
        const T bound = T(1) / T(cfg.codebook_size);
        p.codebook.entries = random_uniform<T>(cfg.codebook_size, cfg.latent_dim, -bound, bound, rng);
        return p;
    }

    TensorList<T> tensors() {
        TensorList<T> out;
        out.push_back({"codebook", &codebook.entries});
        dec1.append_tensors("dec1", out);
        dec2.append_tensors("dec2", out);
        enc1.append_tensors("enc1", out);
        enc2.append_tensors("enc2", out);
        return out;
    }
    ConstTensorList<T> tensors() const {
        ConstTensorList<T> out;
        out.push_back({"codebook", &codebook.entries});
        dec1.append_tensors("dec1", out);
        dec2.append_tensors("dec2", out);
        enc1.append_tensors("enc1", out);
        enc2.append_tensors("enc2", out);
        return out;
    }
};

namespace codec_detail {

inline void check_image(const CodecConfig& cfg, const ImageTensor& img) {
    if (img.height != cfg.height || img.width != cfg.width ||
        img.values.size() != static_cast<std::size_t>(img.height) * img.width * 3) {
        throw std::invalid_argument("codec: image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                                    ", codec expects " + std::to_string(cfg.height) + "x" +
                                    std::to_string(cfg.width));
    }
}

// One row per cell holding that cell's pixels (y, x, c order) in [0,1].
template <class T>
Mat<T> patches(const CodecConfig& cfg, const ImageTensor& img) {
    check_image(cfg, img);
    const int ph = cfg.patch_h();
    const int pw = cfg.patch_w();
    Mat<T> out(cfg.cells(), cfg.patch_dim());
    for (int i = 0; i < cfg.grid_h; ++i) {
        for (int j = 0; j < cfg.grid_w; ++j) {
            const int r = i * cfg.grid_w + j;
            int c = 0;
            for (int y = 0; y < ph; ++y) {
                for (int x = 0; x < pw; ++x) {
                    for (int ch = 0; ch < 3; ++ch) {
                        out(r, c++) = static_cast<T>(img.at(i * ph + y, j * pw + x, ch));
                    }
                }
            }
        }
    }
    return out;
}

inline ImageTensor unpatch(const CodecConfig& cfg, const Mat<float>& pix) {
    ImageTensor img(cfg.height, cfg.width);
    const int ph = cfg.patch_h();
    const int pw = cfg.patch_w();
    for (int i = 0; i < cfg.grid_h; ++i) {
        for (int j = 0; j < cfg.grid_w; ++j) {
            const int r = i * cfg.grid_w + j;
            int c = 0;
            for (int y = 0; y < ph; ++y) {
                for (int x = 0; x < pw; ++x) {
                    for (int ch = 0; ch < 3; ++ch) {
                        img.at(i * ph + y, j * pw + x, ch) = std::clamp(pix(r, c++), 0.0f, 1.0f);
                    }
                }
            }
        }
    }
    return img;
}

// Rows of `grid` are cells of `n_images` stacked h x w grids. Output row r
// is the concatenation of the 3x3 neighbourhood of cell r (zeros off-grid).
template <class T>
Mat<T> gather_neighbourhood(const Mat<T>& grid, int n_images, int h, int w) {
    const auto d = grid.cols();
    Mat<T> out = Mat<T>::Zero(grid.rows(), 9 * d);
    for (int b = 0; b < n_images; ++b) {
        for (int i = 0; i < h; ++i) {
            for (int j = 0; j < w; ++j) {
                const int r = b * h * w + i * w + j;
                int slot = 0;
                for (int di = -1; di <= 1; ++di) {
                    for (int dj = -1; dj <= 1; ++dj, ++slot) {
                        const int ni = i + di;
                        const int nj = j + dj;
                        if (ni < 0 || ni >= h || nj < 0 || nj >= w) continue;
                        out.block(r, slot * d, 1, d) = grid.row(b * h * w + ni * w + nj);
                    }
                }
            }
        }
    }
    return out;
}

template <class T>
Mat<T> scatter_neighbourhood(const Mat<T>& dgathered, int n_images, int h, int w, Eigen::Index d) {
    Mat<T> out = Mat<T>::Zero(dgathered.rows(), d);
    for (int b = 0; b < n_images; ++b) {
        for (int i = 0; i < h; ++i) {
            for (int j = 0; j < w; ++j) {
                const int r = b * h * w + i * w + j;
                int slot = 0;
                for (int di = -1; di <= 1; ++di) {
                    for (int dj = -1; dj <= 1; ++dj, ++slot) {
                        const int ni = i + di;
                        const int nj = j + dj;
                        if (ni < 0 || ni >= h || nj < 0 || nj >= w) continue;
                        out.row(b * h * w + ni * w + nj) += dgathered.block(r, slot * d, 1, d);
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace codec_detail

/// Encoder over a stack of patch rows (pixels in [0,1]); hidden activations
/// are returned through `hidden` when requested.
template <class T>
Mat<T> encode_patches(const CodecParams<T>& p, const Mat<T>& pix, Mat<T>* hidden = nullptr) {
    Mat<T> x = (pix.array() * T(2) - T(1)).matrix();
    Mat<T> h1 = tanh_of<T>(p.enc1.forward(x));
    Mat<T> z = p.enc2.forward(h1);
    if (hidden != nullptr) *hidden = std::move(h1);
    return z;
}

/// Decoder over stacked grids of `n_images`, returning unclamped pixel rows.
template <class T>
Mat<T> decode_cells(const CodecParams<T>& p, const Mat<T>& zq, int n_images, Mat<T>* gathered = nullptr,
                    Mat<T>* hidden = nullptr) {
    const auto& cfg = p.config;
    Mat<T> g = codec_detail::gather_neighbourhood<T>(zq, n_images, cfg.grid_h, cfg.grid_w);
    Mat<T> h = tanh_of<T>(p.dec1.forward(g));
    Mat<T> y = p.dec2.forward(h);
    Mat<T> pix = ((y.array() + T(1)) * T(0.5)).matrix();
    if (gathered != nullptr) *gathered = std::move(g);
    if (hidden != nullptr) *hidden = std::move(h);
    return pix;
}

template <class T>
LatentGrid<T> encode(const CodecParams<T>& p, const ImageTensor& img) {
    Mat<T> pix = codec_detail::patches<T>(p.config, img);
    return {p.config.grid_h, p.config.grid_w, encode_patches(p, pix)};
}

template <class T>
ImageTensor decode(const CodecParams<T>& p, const LatentGrid<T>& zq) {
    const auto& cfg = p.config;
    if (zq.h != cfg.grid_h || zq.w != cfg.grid_w || zq.dim() != cfg.latent_dim ||
        zq.values.rows() != cfg.cells()) {
        throw std::invalid_argument("codec decode: latent grid shape does not match codec config");
    }
    Mat<float> pix = decode_cells(p, zq.values, 1).template cast<float>();
    return codec_detail::unpatch(cfg, pix);
}

/// Image -> codebook indices (encode then quantize).
template <class T>
ImageTokenSeq tokenize_image(const CodecParams<T>& p, const ImageTensor& img) {
    return quantize(p.codebook, encode(p, img)).indices;
}

/// Mean-pooled pre-quantization latents; used as the image feature space
/// for Frechet distances.
template <class T>
std::vector<double> encoder_features(const CodecParams<T>& p, const ImageTensor& img) {
    const auto z = encode(p, img);
    std::vector<double> f(static_cast<std::size_t>(z.dim()), 0.0);
    for (Eigen::Index r = 0; r < z.values.rows(); ++r) {
        for (Eigen::Index c = 0; c < z.values.cols(); ++c) {
            f[static_cast<std::size_t>(c)] += static_cast<double>(z.values(r, c));
        }
    }
    for (auto& v : f) v /= static_cast<double>(z.values.rows());
    return f;
}

struct CodecLoss {
    double total = 0.0;
    double reconstruction = 0.0;  // mean squared pixel error, unclamped
    double codebook = 0.0;        // mean ||sg(z) - z_q||^2 per element
    double commitment = 0.0;      // beta * mean ||z - sg(z_q)||^2 per element
};

/// Loss and straight-through gradients over a batch of images:
/// recon MSE + codebook MSE + beta * commitment MSE.
template <class T>
CodecLoss codec_loss_and_grad(const CodecParams<T>& p, const std::vector<const ImageTensor*>& batch, T beta,
                              CodecParams<T>* grad) {
    const auto& cfg = p.config;
    const int n = static_cast<int>(batch.size());
    if (n == 0) throw std::invalid_argument("codec loss: empty batch");
    const int cells = cfg.cells();
    Mat<T> pix(n * cells, cfg.patch_dim());
    for (int b = 0; b < n; ++b) {
        pix.middleRows(b * cells, cells) = codec_detail::patches<T>(cfg, *batch[static_cast<std::size_t>(b)]);
    }
    Mat<T> h1;
    Mat<T> z = encode_patches(p, pix, &h1);
    LatentGrid<T> zgrid{cfg.grid_h * n, cfg.grid_w, z};
    auto q = quantize(p.codebook, zgrid);
    const Mat<T>& zq = q.z_q.values;
    Mat<T> gathered, h2;
    Mat<T> out = decode_cells(p, zq, n, &gathered, &h2);

    const T n_pix = static_cast<T>(pix.size());
    const T n_lat = static_cast<T>(z.size());
    Mat<T> diff = out - pix;
    Mat<T> zdiff = z - zq;
    CodecLoss loss;
    loss.reconstruction = static_cast<double>(diff.squaredNorm() / n_pix);
    loss.codebook = static_cast<double>(zdiff.squaredNorm() / n_lat);
    loss.commitment = static_cast<double>(beta * zdiff.squaredNorm() / n_lat);
    loss.total = loss.reconstruction + loss.codebook + loss.commitment;
    if (grad == nullptr) return loss;

    // Decoder.
    Mat<T> dout = (diff * (T(2) / n_pix)).eval();
    Mat<T> dy = dout * T(0.5);
    Mat<T> dh2;
    p.dec2.backward(h2, dy, grad->dec2, &dh2);
    Mat<T> dpre2 = tanh_backward<T>(h2, dh2);
    Mat<T> dgathered;
    p.dec1.backward(gathered, dpre2, grad->dec1, &dgathered);
    Mat<T> dzq = codec_detail::scatter_neighbourhood<T>(dgathered, n, cfg.grid_h, cfg.grid_w, zq.cols());

    // Codebook term moves entries toward the (stopped) encoder outputs.
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        grad->codebook.entries.row(q.indices[static_cast<std::size_t>(r)]) -= (T(2) / n_lat) * zdiff.row(r);
    }

    // Straight-through: reconstruction gradient at z_q flows to z unchanged.
    Mat<T> dz = dzq + (T(2) * beta / n_lat) * zdiff;
    Mat<T> dh1;
    p.enc2.backward(h1, dz, grad->enc2, &dh1);
    Mat<T> dpre1 = tanh_backward<T>(h1, dh1);
    Mat<T> xin = (pix.array() * T(2) - T(1)).matrix();
    p.enc1.backward(xin, dpre1, grad->enc1, nullptr);
    return loss;
}

struct CodecTrainOptions {
    int steps = 1500;
    int batch_size = 8;
    double lr = 2e-3;
    double beta = 0.25;
    std::uint64_t seed = 1;
    int log_every = 0;
};

/// Mean clamped-reconstruction MSE over images (encode, quantize, decode).
template <class T>
double reconstruction_mse(const CodecParams<T>& p, const std::vector<ImageTensor>& images) {
    double acc = 0.0;
    for (const auto& img : images) {
        auto q = quantize(p.codebook, encode(p, img));
        acc += mean_squared_error(decode(p, q.z_q), img);
    }
    return images.empty() ? 0.0 : acc / static_cast<double>(images.size());
}

/// Train the codec from scratch. Batches are drawn with a seeded stream so
/// the run is reproducible; `on_step` receives (step, loss) when set.
template <class T>
CodecParams<T> train_codec(const std::vector<ImageTensor>& data, const CodecConfig& cfg, const CodecTrainOptions& opt,
                           const std::function<void(int, const CodecLoss&)>& on_step = {}) {
    if (data.empty()) throw std::invalid_argument("train_codec: need at least one image");
    for (const auto& img : data) codec_detail::check_image(cfg, img);
    auto params = CodecParams<T>::init(cfg, opt.seed);
    AdamState<CodecParams<T>> adam(params);
    AdamConfig acfg;
    acfg.lr = opt.lr;
    for (int step = 0; step < opt.steps; ++step) {
        auto rng = make_rng(opt.seed, {0xC0DEull, static_cast<std::uint64_t>(step)});
        std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
        std::vector<const ImageTensor*> batch;
        const int bs = std::min<int>(opt.batch_size, static_cast<int>(data.size()));
        if (bs == static_cast<int>(data.size())) {
            for (const auto& img : data) batch.push_back(&img);
        } else {
            for (int b = 0; b < bs; ++b) batch.push_back(&data[pick(rng)]);
        }
        auto grad = zeros_like(params);
        const auto loss = codec_loss_and_grad(params, batch, static_cast<T>(opt.beta), &grad);
        if (!std::isfinite(loss.total)) {
            throw std::runtime_error("train_codec: loss diverged (NaN/inf) at step " + std::to_string(step));
        }
        if (on_step) on_step(step, loss);
        adam_step(params, grad, adam, acfg);
    }
    return params;
}

}  // namespace mdrg
