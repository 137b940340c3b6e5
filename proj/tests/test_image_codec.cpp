#include "mdrg/image_codec.hpp"
#include "codec_gradcheck.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace mdrg;

using test_support::check_codec_gradients;
using test_support::random_image;

namespace {

CodecConfig micro_config() { return test_support::micro_codec_config(); }

}  // namespace

TEST(Quantize, HandExamples) {
    Codebook<double> cb;
    cb.entries.resize(2, 2);
    cb.entries << 0, 0, 1, 1;
    LatentGrid<double> z{1, 2, Mat<double>(2, 2)};
    z.values << 0.2, 0.1, 0.5, 0.5;
    auto q = quantize(cb, z);
    EXPECT_EQ(q.indices, (ImageTokenSeq{0, 0}));  // second cell: equidistant, smallest index wins

    Codebook<double> cb4;
    cb4.entries.resize(4, 2);
    cb4.entries << 0, 0, 1, 1, -1, 2, 3, -3;
    LatentGrid<double> exact{1, 1, cb4.entries.row(3)};
    auto q3 = quantize(cb4, exact);
    EXPECT_EQ(q3.indices, ImageTokenSeq{3});
    EXPECT_EQ(q3.z_q.values, cb4.entries.row(3));
}

TEST(Quantize, Errors) {
    Codebook<double> empty;
    empty.entries.resize(0, 2);
    LatentGrid<double> z{1, 1, Mat<double>::Zero(1, 2)};
    EXPECT_THROW(quantize(empty, z), std::invalid_argument);
    Codebook<double> cb{Mat<double>::Zero(3, 3)};
    EXPECT_THROW(quantize(cb, z), std::invalid_argument);
    EXPECT_THROW(indices_to_codes(cb, {0, 3}, 1, 2), std::out_of_range);
    EXPECT_THROW(indices_to_codes(cb, {0}, 1, 2), std::invalid_argument);
}

TEST(Quantize, MatchesExhaustiveOracleAndRoundTrips) {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        auto inst = test_support::random_quantizer_instance(rng);
        auto q = quantize(inst.codebook, inst.grid);
        ASSERT_EQ(q.indices, test_support::nearest_neighbour_oracle(inst.codebook.entries, inst.grid.values));
        auto back = indices_to_codes(inst.codebook, q.indices, inst.grid.h, inst.grid.w);
        ASSERT_TRUE(back == q.z_q);
        // Idempotence: re-quantizing the codes returns the same indices.
        ASSERT_EQ(quantize(inst.codebook, back).indices, q.indices);
    }
}

TEST(Quantize, ZeroIndicesRepeatFirstEntry) {
    Codebook<double> cb{Mat<double>(2, 3)};
    cb.entries << 1, 2, 3, 4, 5, 6;
    auto g = indices_to_codes(cb, {0, 0, 0, 0}, 2, 2);
    for (int r = 0; r < 4; ++r) EXPECT_EQ(g.values.row(r), cb.entries.row(0));
}

TEST(ImageCodec, ConfigValidation) {
    CodecConfig c;
    EXPECT_NO_THROW(c.validate());
    CodecConfig paper;
    paper.height = paper.width = 256;
    paper.grid_h = paper.grid_w = 16;
    paper.codebook_size = 16384;
    paper.latent_dim = 256;
    EXPECT_NO_THROW(paper.validate());
    CodecConfig bad = c;
    bad.grid_h = 5;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = c;
    bad.height = 24;
    bad.grid_h = 2;  // factor 12 is not a power of two
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(ImageCodec, EncodeShapeDeterminismAndErrors) {
    auto p = CodecParams<float>::init(CodecConfig{}, 1);
    ImageTensor zero(32, 32, 0.0f);
    auto a = encode(p, zero);
    auto b = encode(p, zero);
    EXPECT_EQ(a.h, 4);
    EXPECT_EQ(a.w, 4);
    EXPECT_EQ(a.dim(), 16);
    EXPECT_TRUE(a.values.allFinite());
    EXPECT_TRUE(a == b);
    EXPECT_THROW(encode(p, ImageTensor(16, 16)), std::invalid_argument);
    LatentGrid<float> wrong{2, 2, Mat<float>::Zero(4, 16)};
    EXPECT_THROW(decode(p, wrong), std::invalid_argument);
}

TEST(ImageCodec, OnePixelChangeOnlyTouchesItsCell) {
    auto cfg = CodecConfig{};
    auto p = CodecParams<double>::init(cfg, 2);
    std::mt19937_64 rng(9);
    auto img = random_image(32, 32, rng);
    for (auto [y, x] : {std::pair{0, 0}, std::pair{13, 21}, std::pair{31, 31}, std::pair{8, 7}}) {
        auto other = img;
        other.at(y, x, 1) = 1.0f - other.at(y, x, 1);
        auto za = encode(p, img);
        auto zb = encode(p, other);
        // Patch-local encoder: receptive field of cell (i,j) is its 8x8 patch.
        const int cell = (y / cfg.patch_h()) * cfg.grid_w + (x / cfg.patch_w());
        for (int r = 0; r < cfg.cells(); ++r) {
            if (r == cell) {
                EXPECT_NE(za.values.row(r), zb.values.row(r));
            } else {
                EXPECT_EQ(za.values.row(r), zb.values.row(r));
            }
        }
    }
}

TEST(ImageCodec, DecodeContract) {
    auto p = CodecParams<float>::init(CodecConfig{}, 4);
    std::mt19937_64 rng(1);
    p.dec2.w *= 50.0f;  // push raw outputs well outside [0,1]
    for (int i = 0; i < 5; ++i) {
        ImageTokenSeq s(16);
        for (auto& v : s) v = static_cast<int>(rng() % 64);
        auto zq = indices_to_codes(p.codebook, s, 4, 4);
        auto img = decode(p, zq);
        EXPECT_EQ(img.height, 32);
        EXPECT_EQ(img.width, 32);
        EXPECT_TRUE(img.valid());
        EXPECT_EQ(img, decode(p, zq));
    }
}

TEST(ImageCodec, GradientsMatchFiniteDifferences) {
    const auto gc = check_codec_gradients(0.25);
    EXPECT_LT(gc.surrogate_gap, 1e-12);
    EXPECT_LT(gc.worst, 1e-3) << gc.worst_name;
}

TEST(ImageCodec, ZeroBetaRemovesCommitmentTerm) {
    const auto gc = check_codec_gradients(0.0);
    EXPECT_LT(gc.worst, 1e-3) << gc.worst_name;

    // With beta = 0 the encoder-output gradient is exactly the
    // straight-through reconstruction gradient, so it does not depend on the
    // distance between z and its code.
    auto cfg = micro_config();
    auto p = CodecParams<double>::init(cfg, 5);
    std::mt19937_64 rng(2);
    auto img = random_image(8, 8, rng);
    auto g0 = zeros_like(p);
    auto g1 = zeros_like(p);
    codec_loss_and_grad(p, {&img}, 0.0, &g0);
    codec_loss_and_grad(p, {&img}, 0.5, &g1);
    EXPECT_EQ(g0.dec1.w, g1.dec1.w);
    EXPECT_EQ(g0.codebook.entries, g1.codebook.entries);
    EXPECT_NE(g0.enc2.w, g1.enc2.w);
}

TEST(ImageCodec, TrainingIsDeterministicAndOverfitsOneImage) {
    std::mt19937_64 rng(21);
    std::vector<ImageTensor> data = {test_support::blob_image(32, 32, rng)};
    CodecTrainOptions opt;
    std::vector<double> first_losses;
    auto p = train_codec<float>(data, CodecConfig{}, opt, [&](int step, const CodecLoss& l) {
        if (step == 0) first_losses.push_back(l.total);
    });
    // Step 0 loss equals the loss recomputed from the seed's initial params.
    auto init = CodecParams<float>::init(CodecConfig{}, opt.seed);
    const auto l0 = codec_loss_and_grad<float>(init, {&data[0]}, 0.25f, nullptr);
    ASSERT_EQ(first_losses.size(), 1u);
    EXPECT_EQ(first_losses[0], l0.total);
    EXPECT_LT(reconstruction_mse(p, data), 1e-3);

    auto again = train_codec<float>(data, CodecConfig{}, opt);
    EXPECT_EQ(again.codebook.entries, p.codebook.entries);
    EXPECT_EQ(again.dec2.w, p.dec2.w);
}

TEST(ImageCodec, DivergenceReportsStep) {
    std::vector<ImageTensor> data = {ImageTensor(32, 32, 0.5f)};
    CodecTrainOptions opt;
    opt.steps = 5;
    opt.lr = std::numeric_limits<double>::infinity();
    try {
        train_codec<float>(data, CodecConfig{}, opt);
        FAIL() << "expected divergence";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
    }
}

TEST(ImageCodec, ImageFileFormats) {
    std::mt19937_64 rng(4);
    auto img = test_support::blob_image(32, 32, rng);
    EXPECT_EQ(decode_png(encode_png(img)), img);
    EXPECT_EQ(decode_mdim(encode_mdim(img)), img);
    auto mdim = encode_mdim(img);
    EXPECT_EQ(std::string(mdim.begin(), mdim.begin() + 4), "MDIM");
    EXPECT_EQ(mdim.size(), 12u + 32 * 32 * 3);
    mdim[0] = 'X';
    EXPECT_THROW(decode_mdim(mdim), std::runtime_error);
}
