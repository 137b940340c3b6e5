#include "mdrg/datasets.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace mdrg;
namespace fs = std::filesystem;

namespace {

SyntheticWorldConfig small_world(std::uint64_t seed = 7) {
    SyntheticWorldConfig c;
    c.seed = seed;
    c.n_text_dialogues = 200;
    c.n_pairs = 300;
    c.n_multimodal = 120;
    return c;
}

std::string dump_all(const SyntheticCorpus& c) {
    std::string s;
    for (const auto* v : {&c.text.train, &c.text.dev, &c.text.test})
        for (const auto& d : *v) s += to_json(d).dump() + "\n";
    for (const auto* v : {&c.pairs.train, &c.pairs.dev, &c.pairs.test})
        for (const auto& d : *v) s += to_json(d).dump() + "\n";
    for (const auto* v : {&c.multimodal.train, &c.multimodal.dev, &c.multimodal.test})
        for (const auto& d : *v) s += to_json(d).dump() + "\n";
    return s;
}

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("mdrg_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Datasets, SameSeedSameCorpus) {
    const auto a = generate_synthetic(small_world(), 32);
    const auto b = generate_synthetic(small_world(), 32);
    EXPECT_EQ(dump_all(a), dump_all(b));
    EXPECT_NE(dump_all(a), dump_all(generate_synthetic(small_world(8), 32)));
}

TEST(Datasets, ImageSizeMustMatchCodec) {
    EXPECT_THROW(generate_synthetic(small_world(), 64), std::invalid_argument);
}

TEST(Datasets, SplitsAreEightyTenTenAndDisjoint) {
    const auto c = generate_synthetic(small_world(), 32);
    EXPECT_EQ(c.text.train.size(), 160u);
    EXPECT_EQ(c.text.dev.size(), 20u);
    EXPECT_EQ(c.text.test.size(), 20u);
    EXPECT_EQ(c.multimodal.train.size(), 96u);
    EXPECT_EQ(c.multimodal.dev.size(), 12u);
    EXPECT_EQ(c.multimodal.test.size(), 12u);
    std::set<std::string> ids;
    std::size_t total = 0;
    for (const auto* v : {&c.multimodal.train, &c.multimodal.dev, &c.multimodal.test}) {
        for (const auto& d : *v) {
            ids.insert(d.id);
            ++total;
        }
    }
    EXPECT_EQ(ids.size(), total);
}

TEST(Datasets, DescriptionsRenderTheirImagesExactly) {
    const auto c = generate_synthetic(small_world(), 32);
    std::size_t checked = 0;
    auto check = [&](const std::string& desc, const std::string& path) {
        const auto spec = parse_description(desc);
        ASSERT_TRUE(spec.has_value()) << desc;
        EXPECT_EQ(render_shape(*spec, 32), corpus_image(c, path)) << desc;
        ++checked;
    };
    for (const auto& p : c.pairs.train) check(p.description, p.image_path);
    for (const auto& d : c.multimodal.train) {
        for (const auto& s : d.response.segments) {
            if (s.kind != ResponseSegment::Kind::image) continue;
            check(s.text, s.image_path);
            EXPECT_EQ(s.text.rfind("Objects in the photo: ", 0), 0u);
            const auto spec = *parse_description(s.text);
            EXPECT_NE(s.text.find(kShapes[spec.shape]), std::string::npos);
            EXPECT_NE(s.text.find(kColors[spec.color]), std::string::npos);
        }
    }
    EXPECT_GT(checked, 250u);
}

TEST(Datasets, AllSceneImagesAreDistinct) {
    std::set<std::vector<float>> seen;
    for (int i = 0; i < ShapeSpec::count(); ++i) seen.insert(render_shape(ShapeSpec::from_index(i), 32).values);
    EXPECT_EQ(seen.size(), static_cast<std::size_t>(ShapeSpec::count()));
}

TEST(Datasets, ShapeClassesBalancedInPairs) {
    const auto c = generate_synthetic(small_world(), 32);
    std::map<int, int> counts;
    int n = 0;
    for (const auto* v : {&c.pairs.train, &c.pairs.dev, &c.pairs.test}) {
        for (const auto& p : *v) {
            ++counts[parse_description(p.description)->shape];
            ++n;
        }
    }
    ASSERT_EQ(counts.size(), kShapes.size());
    const double uniform = static_cast<double>(n) / kShapes.size();
    for (const auto& [cls, k] : counts) EXPECT_NEAR(k, uniform, 0.1 * uniform) << cls;
}

TEST(Datasets, IntentCountsMatchLineScan) {
    const auto c = generate_synthetic(small_world(), 32);
    const auto dir = temp_dir("intent");
    const auto path = (dir / "ds_test.jsonl").string();
    std::vector<MultimodalDialogue> all = c.multimodal.train;
    all.insert(all.end(), c.multimodal.test.begin(), c.multimodal.test.end());
    save_multimodal(path, all);
    std::ifstream in(path);
    std::size_t scanned = 0;
    for (std::string line; std::getline(in, line);) {
        const auto r = line.find("\"response\"");
        if (line.find("\"kind\":\"image\"", r) != std::string::npos) ++scanned;
    }
    std::size_t labelled = 0;
    for (const auto& d : load_photochat_format(path)) labelled += intent_label(d) ? 1 : 0;
    EXPECT_EQ(labelled, scanned);
    EXPECT_GT(labelled, 0u);
    EXPECT_LT(labelled, all.size());
    fs::remove_all(dir);
}

TEST(Datasets, IntentLabelRule) {
    MultimodalDialogue d;
    d.context.turns = {Utterance::say("A", "show me")};
    d.response.segments = {{ResponseSegment::Kind::text, "ok", {}}};
    EXPECT_FALSE(intent_label(d));
    d.response.segments.push_back({ResponseSegment::Kind::image, "Objects in the photo: x", "a.png"});
    EXPECT_TRUE(intent_label(d));
}

TEST(Datasets, JsonlRoundTripAndErrors) {
    const auto dir = temp_dir("jsonl");
    const auto c = generate_synthetic(small_world(), 32);
    const auto p1 = (dir / "ds.jsonl").string();
    save_multimodal(p1, c.multimodal.train);
    EXPECT_EQ(load_photochat_format(p1), c.multimodal.train);
    const auto p2 = (dir / "dc.jsonl").string();
    save_text_dialogues(p2, c.text.train);
    EXPECT_EQ(load_text_dialogues(p2), c.text.train);
    const auto p3 = (dir / "dp.jsonl").string();
    save_pairs(p3, c.pairs.train);
    EXPECT_EQ(load_pairs(p3), c.pairs.train);

    const auto empty = (dir / "empty.jsonl").string();
    std::ofstream(empty).close();
    EXPECT_TRUE(load_photochat_format(empty).empty());

    const auto bad = (dir / "bad.jsonl").string();
    {
        std::ofstream out(bad);
        out << to_json(c.multimodal.train[0]).dump() << "\n";
        out << R"({"id":"x","turns":[{"speaker":"A","image":{"image_path":"a.png"}}],)"
            << R"("response":{"speaker":"B","segments":[{"kind":"text","text":"hi"}]}})" << "\n";
    }
    try {
        load_photochat_format(bad);
        FAIL() << "expected a schema error";
    } catch (const SchemaError& e) {
        EXPECT_EQ(e.line(), 2u);
        EXPECT_EQ(e.field(), "turns[0].image.description");
    }
    fs::remove_all(dir);
}

TEST(Datasets, CorpusTreeIsDeterministicAndReadable) {
    const auto a = temp_dir("tree_a");
    const auto b = temp_dir("tree_b");
    const auto c = generate_synthetic(small_world(), 32);
    write_corpus(c, a);
    write_corpus(generate_synthetic(small_world(), 32), b);
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), a);
        ASSERT_TRUE(fs::exists(b / rel)) << rel;
        EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
        ++files;
    }
    EXPECT_GT(files, 70u);
    const auto back = read_corpus(a);
    EXPECT_EQ(back.multimodal.test, c.multimodal.test);
    EXPECT_EQ(back.pairs.dev, c.pairs.dev);
    for (const auto& p : back.pairs.train) EXPECT_EQ(corpus_image(back, p.image_path), corpus_image(c, p.image_path));
    fs::remove_all(a);
    fs::remove_all(b);
}
