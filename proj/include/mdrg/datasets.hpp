#pragma once

// Dialogue and image-pair data model, JSONL interchange, and the synthetic
// shapes world that stands in for the large text, image-pair and multimodal
// corpora.
//
// JSONL schemas (one object per line):
//   text dialogue:        {"id", "turns": [string, ...]}     (last turn = response)
//   description/image:    {"id", "description", "image_path"}
//   multimodal dialogue:  {"id",
//                          "turns": [{"speaker", "text"} |
//                                    {"speaker", "image": {"description", "image_path"}}],
//                          "response": {"speaker", "segments":
//                                       [{"kind":"text","text"} |
//                                        {"kind":"image","description","image_path"}]}}
// image_path is relative to the corpus root.

#include "mdrg/image.hpp"
#include "mdrg/tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mdrg {

struct Utterance {
    enum class Kind { text, image };
    std::string speaker;
    Kind kind = Kind::text;
    std::string text;         // Kind::text
    std::string description;  // Kind::image
    std::string image_path;   // Kind::image

    static Utterance say(std::string speaker, std::string text) {
        return {std::move(speaker), Kind::text, std::move(text), {}, {}};
    }
    static Utterance photo(std::string speaker, std::string description, std::string path) {
        return {std::move(speaker), Kind::image, {}, std::move(description), std::move(path)};
    }
    friend bool operator==(const Utterance&, const Utterance&) = default;
};

struct DialogueContext {
    std::vector<Utterance> turns;
    friend bool operator==(const DialogueContext&, const DialogueContext&) = default;
};

struct ResponseSegment {
    enum class Kind { text, image };
    Kind kind = Kind::text;
    std::string text;        // text, or the image description
    std::string image_path;  // image segments only; may be empty for generated output

    friend bool operator==(const ResponseSegment&, const ResponseSegment&) = default;
};

struct MultimodalResponse {
    std::string speaker;
    std::vector<ResponseSegment> segments;

    bool has_image() const {
        return std::any_of(segments.begin(), segments.end(),
                           [](const auto& s) { return s.kind == ResponseSegment::Kind::image; });
    }
    friend bool operator==(const MultimodalResponse&, const MultimodalResponse&) = default;
};

struct MultimodalDialogue {
    std::string id;
    DialogueContext context;
    MultimodalResponse response;
    friend bool operator==(const MultimodalDialogue&, const MultimodalDialogue&) = default;
};

struct TextDialogue {
    std::string id;
    std::vector<std::string> turns;
    friend bool operator==(const TextDialogue&, const TextDialogue&) = default;
};

struct DescriptionImagePair {
    std::string id;
    std::string description;
    std::string image_path;
    friend bool operator==(const DescriptionImagePair&, const DescriptionImagePair&) = default;
};

/// Gold intent: does the next turn contain an image?
inline bool intent_label(const MultimodalDialogue& d) { return d.response.has_image(); }

// ---------------------------------------------------------------- JSONL I/O

class SchemaError : public std::runtime_error {
public:
    SchemaError(std::size_t line, const std::string& field, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": field '" + field + "': " + what),
          line_(line),
          field_(field) {}
    std::size_t line() const { return line_; }
    const std::string& field() const { return field_; }

private:
    std::size_t line_;
    std::string field_;
};

namespace data_detail {

inline const nlohmann::json& require(const nlohmann::json& obj, const std::string& key, std::size_t line,
                                     const std::string& path) {
    if (!obj.is_object() || !obj.contains(key)) throw SchemaError(line, path + key, "missing");
    return obj.at(key);
}

inline std::string require_string(const nlohmann::json& obj, const std::string& key, std::size_t line,
                                  const std::string& path, bool non_empty = false) {
    const auto& v = require(obj, key, line, path);
    if (!v.is_string()) throw SchemaError(line, path + key, "must be a string");
    auto s = v.get<std::string>();
    if (non_empty && s.empty()) throw SchemaError(line, path + key, "must be non-empty");
    return s;
}

template <class F>
void for_each_line(const std::string& path, F&& f) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
        ++no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw SchemaError(no, "<line>", std::string("invalid JSON: ") + e.what());
        }
        f(j, no);
    }
}

inline void write_lines(const std::string& path, const std::vector<nlohmann::json>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const auto& r : rows) out << r.dump() << '\n';
}

}  // namespace data_detail

inline nlohmann::json to_json(const Utterance& u) {
    if (u.kind == Utterance::Kind::text) return {{"speaker", u.speaker}, {"text", u.text}};
    return {{"speaker", u.speaker}, {"image", {{"description", u.description}, {"image_path", u.image_path}}}};
}

inline nlohmann::json to_json(const ResponseSegment& s) {
    if (s.kind == ResponseSegment::Kind::text) return {{"kind", "text"}, {"text", s.text}};
    return {{"kind", "image"}, {"description", s.text}, {"image_path", s.image_path}};
}

inline nlohmann::json to_json(const MultimodalResponse& r) {
    auto segs = nlohmann::json::array();
    for (const auto& s : r.segments) segs.push_back(to_json(s));
    return {{"speaker", r.speaker}, {"segments", segs}};
}

inline nlohmann::json to_json(const MultimodalDialogue& d) {
    auto turns = nlohmann::json::array();
    for (const auto& u : d.context.turns) turns.push_back(to_json(u));
    return {{"id", d.id}, {"turns", turns}, {"response", to_json(d.response)}};
}

inline nlohmann::json to_json(const TextDialogue& d) { return {{"id", d.id}, {"turns", d.turns}}; }

inline nlohmann::json to_json(const DescriptionImagePair& p) {
    return {{"id", p.id}, {"description", p.description}, {"image_path", p.image_path}};
}

inline ResponseSegment parse_segment(const nlohmann::json& j, std::size_t line, const std::string& path) {
    const auto kind = data_detail::require_string(j, "kind", line, path);
    if (kind == "text") return {ResponseSegment::Kind::text, data_detail::require_string(j, "text", line, path), {}};
    if (kind == "image") {
        ResponseSegment s{ResponseSegment::Kind::image,
                          data_detail::require_string(j, "description", line, path, true), {}};
        if (j.contains("image_path")) s.image_path = data_detail::require_string(j, "image_path", line, path);
        return s;
    }
    throw SchemaError(line, path + "kind", "must be \"text\" or \"image\"");
}

inline MultimodalResponse parse_response(const nlohmann::json& r, std::size_t line, const std::string& path) {
    MultimodalResponse resp;
    if (r.contains("speaker")) resp.speaker = data_detail::require_string(r, "speaker", line, path);
    const auto& segs = data_detail::require(r, "segments", line, path);
    if (!segs.is_array() || segs.empty()) throw SchemaError(line, path + "segments", "must be a non-empty array");
    for (std::size_t i = 0; i < segs.size(); ++i) {
        resp.segments.push_back(parse_segment(segs[i], line, path + "segments[" + std::to_string(i) + "]."));
    }
    return resp;
}

inline DialogueContext parse_context(const nlohmann::json& j, std::size_t line) {
    DialogueContext ctx;
    const auto& turns = data_detail::require(j, "turns", line, "");
    if (!turns.is_array() || turns.empty()) throw SchemaError(line, "turns", "must be a non-empty array");
    for (std::size_t i = 0; i < turns.size(); ++i) {
        const std::string path = "turns[" + std::to_string(i) + "].";
        const auto& t = turns[i];
        const auto speaker = data_detail::require_string(t, "speaker", line, path);
        if (t.contains("text")) {
            ctx.turns.push_back(Utterance::say(speaker, data_detail::require_string(t, "text", line, path)));
        } else if (t.contains("image")) {
            const auto& img = t.at("image");
            std::string image_path;
            if (img.contains("image_path")) image_path = data_detail::require_string(img, "image_path", line, path + "image.");
            ctx.turns.push_back(Utterance::photo(
                speaker, data_detail::require_string(img, "description", line, path + "image.", true), image_path));
        } else {
            throw SchemaError(line, path + "text|image", "turn needs either text or image");
        }
    }
    return ctx;
}

inline MultimodalDialogue parse_multimodal(const nlohmann::json& j, std::size_t line) {
    MultimodalDialogue d;
    d.id = data_detail::require_string(j, "id", line, "");
    d.context = parse_context(j, line);
    d.response = parse_response(data_detail::require(j, "response", line, ""), line, "response.");
    return d;
}

/// Context-only lines ({"id"?, "turns": [...]}); a missing id becomes "line<N>".
inline std::vector<std::pair<std::string, DialogueContext>> load_contexts(const std::string& path) {
    std::vector<std::pair<std::string, DialogueContext>> out;
    data_detail::for_each_line(path, [&](const nlohmann::json& j, std::size_t no) {
        const auto id = j.contains("id") ? data_detail::require_string(j, "id", no, "") : "line" + std::to_string(no);
        out.emplace_back(id, parse_context(j, no));
    });
    return out;
}

/// PhotoChat-style multimodal dialogues. An empty file yields an empty list.
inline std::vector<MultimodalDialogue> load_photochat_format(const std::string& path) {
    std::vector<MultimodalDialogue> out;
    data_detail::for_each_line(path, [&](const nlohmann::json& j, std::size_t no) { out.push_back(parse_multimodal(j, no)); });
    return out;
}

inline void save_multimodal(const std::string& path, const std::vector<MultimodalDialogue>& ds) {
    std::vector<nlohmann::json> rows;
    for (const auto& d : ds) rows.push_back(to_json(d));
    data_detail::write_lines(path, rows);
}

inline std::vector<TextDialogue> load_text_dialogues(const std::string& path) {
    std::vector<TextDialogue> out;
    data_detail::for_each_line(path, [&](const nlohmann::json& j, std::size_t no) {
        TextDialogue d;
        d.id = data_detail::require_string(j, "id", no, "");
        const auto& turns = data_detail::require(j, "turns", no, "");
        if (!turns.is_array() || turns.size() < 2) throw SchemaError(no, "turns", "needs at least 2 turns");
        for (const auto& t : turns) {
            if (!t.is_string()) throw SchemaError(no, "turns", "turns must be strings");
            d.turns.push_back(t.get<std::string>());
        }
        out.push_back(std::move(d));
    });
    return out;
}

inline void save_text_dialogues(const std::string& path, const std::vector<TextDialogue>& ds) {
    std::vector<nlohmann::json> rows;
    for (const auto& d : ds) rows.push_back(to_json(d));
    data_detail::write_lines(path, rows);
}

inline std::vector<DescriptionImagePair> load_pairs(const std::string& path) {
    std::vector<DescriptionImagePair> out;
    data_detail::for_each_line(path, [&](const nlohmann::json& j, std::size_t no) {
        out.push_back({data_detail::require_string(j, "id", no, ""),
                       data_detail::require_string(j, "description", no, "", true),
                       data_detail::require_string(j, "image_path", no, "")});
    });
    return out;
}

inline void save_pairs(const std::string& path, const std::vector<DescriptionImagePair>& ps) {
    std::vector<nlohmann::json> rows;
    for (const auto& p : ps) rows.push_back(to_json(p));
    data_detail::write_lines(path, rows);
}

/// Loads images referenced relative to a corpus root, caching by path.
class ImageStore {
public:
    explicit ImageStore(std::filesystem::path root) : root_(std::move(root)) {}

    const ImageTensor& get(const std::string& rel) {
        auto it = cache_.find(rel);
        if (it == cache_.end()) it = cache_.emplace(rel, read_image((root_ / rel).string())).first;
        return it->second;
    }

private:
    std::filesystem::path root_;
    std::map<std::string, ImageTensor> cache_;
};

// ------------------------------------------------------- synthetic world

inline constexpr std::array<std::string_view, 3> kShapes = {"circle", "square", "triangle"};
inline constexpr std::array<std::string_view, 4> kColors = {"red", "green", "blue", "yellow"};
inline constexpr std::array<std::string_view, 2> kSizes = {"small", "large"};
inline constexpr std::array<std::string_view, 3> kPositions = {"left", "center", "right"};
inline constexpr std::string_view kDescriptionPrefix = "Objects in the photo: ";

/// Parameters that fully determine a synthetic image.
struct ShapeSpec {
    int shape = 0;
    int color = 0;
    int size = 0;
    int position = 0;

    friend bool operator==(const ShapeSpec&, const ShapeSpec&) = default;
    friend auto operator<=>(const ShapeSpec&, const ShapeSpec&) = default;

    std::string phrase() const {
        std::string where = position == 1 ? "in the center" : "on the " + std::string(kPositions[position]);
        return std::string(kSizes[size]) + " " + std::string(kColors[color]) + " " + std::string(kShapes[shape]) +
               " " + where;
    }
    std::string description() const { return std::string(kDescriptionPrefix) + phrase(); }
    std::string file_name() const {
        return std::string(kSizes[size]) + "_" + std::string(kColors[color]) + "_" + std::string(kShapes[shape]) +
               "_" + std::string(kPositions[position]) + ".png";
    }
    static int count() { return static_cast<int>(kShapes.size() * kColors.size() * kSizes.size() * kPositions.size()); }
    static ShapeSpec from_index(int i) {
        ShapeSpec s;
        s.position = i % 3;
        i /= 3;
        s.size = i % 2;
        i /= 2;
        s.color = i % 4;
        i /= 4;
        s.shape = i;
        return s;
    }
};

/// Shape class named in free text (first shape word found), if any.
inline std::optional<int> shape_class_of(std::string_view text) {
    std::optional<int> best;
    std::size_t best_pos = std::string_view::npos;
    for (std::size_t i = 0; i < kShapes.size(); ++i) {
        const auto pos = text.find(kShapes[i]);
        if (pos != std::string_view::npos && pos < best_pos) {
            best_pos = pos;
            best = static_cast<int>(i);
        }
    }
    return best;
}

/// Inverse of ShapeSpec::description(); nullopt if the text is not one.
inline std::optional<ShapeSpec> parse_description(std::string_view text) {
    for (int i = 0; i < ShapeSpec::count(); ++i) {
        const auto s = ShapeSpec::from_index(i);
        if (text == s.description()) return s;
    }
    return std::nullopt;
}

inline ImageTensor render_shape(const ShapeSpec& s, int size_px) {
    static constexpr std::array<std::array<int, 3>, 4> kRgb = {{{220, 40, 40}, {40, 170, 60}, {40, 70, 220}, {235, 200, 30}}};
    static constexpr std::array<int, 3> kBackground = {245, 245, 240};
    ImageTensor img(size_px, size_px);
    const double unit = size_px / 32.0;
    const double cx = (s.position == 0 ? 10.0 : s.position == 1 ? 16.0 : 22.0) * unit;
    const double cy = 16.0 * unit;
    const double r = (s.size == 0 ? 5.0 : 9.0) * unit;
    for (int y = 0; y < size_px; ++y) {
        for (int x = 0; x < size_px; ++x) {
            const double dx = x + 0.5 - cx;
            const double dy = y + 0.5 - cy;
            bool inside = false;
            switch (s.shape) {
                case 0: inside = dx * dx + dy * dy <= r * r; break;
                case 1: inside = std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r; break;
                default: {
                    const double t = (dy + r) / (2.0 * r);  // 0 at apex, 1 at base
                    inside = t >= 0.0 && t <= 1.0 && std::abs(dx) <= t * r;
                }
            }
            const auto& c = inside ? kRgb[static_cast<std::size_t>(s.color)] : kBackground;
            for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = static_cast<float>(c[static_cast<std::size_t>(ch)]) / 255.0f;
        }
    }
    return img;
}

struct SyntheticWorldConfig {
    std::uint64_t seed = 7;
    int n_text_dialogues = 3000;    // D_C
    int n_pairs = 1200;             // D_P
    int n_multimodal = 400;         // multimodal dialogues with descriptions
    int image_size = 32;
};

template <class Item>
struct Splits {
    std::vector<Item> train, dev, test;
};

struct SyntheticCorpus {
    Splits<TextDialogue> text;
    Splits<DescriptionImagePair> pairs;
    Splits<MultimodalDialogue> multimodal;
    std::vector<std::pair<std::string, ImageTensor>> images;  // relative path -> pixels
};

namespace synth_detail {

struct Picker {
    std::mt19937_64& rng;
    int operator()(int n) { return static_cast<int>(std::uniform_int_distribution<int>(0, n - 1)(rng)); }
    template <class C>
    std::string of(const C& c) {
        return std::string(c[static_cast<std::size_t>((*this)(static_cast<int>(c.size())))]);
    }
};

inline std::string fill(std::string tpl, const std::map<std::string, std::string>& vars) {
    for (const auto& [k, v] : vars) {
        const std::string key = "{" + k + "}";
        for (auto pos = tpl.find(key); pos != std::string::npos; pos = tpl.find(key)) tpl.replace(pos, key.size(), v);
    }
    return tpl;
}

// Text-only exchanges: (user turn, agent reply).
inline std::pair<std::string, std::string> chit_chat(Picker& pick) {
    static const std::vector<std::pair<std::string, std::string>> kTemplates = {
        {"hi there", "hello! how are you?"},
        {"how are you?", "i am fine, thanks for asking"},
        {"what is your favorite color?", "i like {color} the most"},
        {"i love {color} things", "{color} is a great color"},
        {"do you like {shape}s?", "yes, {shape}s are my favorite shape"},
        {"i drew a {color} {shape} today", "that sounds lovely"},
        {"what are you doing?", "just looking at some pictures"},
        {"good night", "good night, see you tomorrow"},
        {"tell me about {shape}s", "a {shape} is a simple shape"},
        {"i saw a {size} {color} {shape} yesterday", "wow, where did you see it?"},
        {"it is a sunny day", "let us go outside then"},
        {"i am bored", "maybe we can draw some shapes"},
    };
    const auto& t = kTemplates[static_cast<std::size_t>(pick(static_cast<int>(kTemplates.size())))];
    std::map<std::string, std::string> vars = {
        {"color", pick.of(kColors)}, {"shape", pick.of(kShapes)}, {"size", pick.of(kSizes)}};
    return {fill(t.first, vars), fill(t.second, vars)};
}

}  // namespace synth_detail

/// Deterministic synthetic corpora with an 80/10/10 split by dialogue.
inline SyntheticCorpus generate_synthetic(const SyntheticWorldConfig& cfg, int codec_image_size) {
    using namespace synth_detail;
    if (cfg.image_size != codec_image_size) {
        throw std::invalid_argument("synthetic world image size " + std::to_string(cfg.image_size) +
                                    " does not match codec image size " + std::to_string(codec_image_size));
    }
    if (cfg.image_size <= 0 || cfg.n_text_dialogues < 0 || cfg.n_pairs < 0 || cfg.n_multimodal < 0) {
        throw std::invalid_argument("synthetic world: sizes must be non-negative");
    }
    SyntheticCorpus corpus;
    for (int i = 0; i < ShapeSpec::count(); ++i) {
        const auto s = ShapeSpec::from_index(i);
        corpus.images.emplace_back("images/" + s.file_name(), render_shape(s, cfg.image_size));
    }
    auto split = [](auto& splits, auto item, int index, int total) {
        const int train_end = total * 8 / 10;
        const int dev_end = total * 9 / 10;
        if (index < train_end) splits.train.push_back(std::move(item));
        else if (index < dev_end) splits.dev.push_back(std::move(item));
        else splits.test.push_back(std::move(item));
    };
    auto rng = make_rng(cfg.seed, {0xDA7Aull});
    Picker pick{rng};
    char buf[32];

    // Text-only dialogues: 1-3 exchanges, the last reply is the response.
    for (int i = 0; i < cfg.n_text_dialogues; ++i) {
        TextDialogue d;
        std::snprintf(buf, sizeof buf, "dc-%06d", i);
        d.id = buf;
        const int exchanges = 1 + pick(3);
        for (int e = 0; e < exchanges; ++e) {
            auto [u, a] = chit_chat(pick);
            d.turns.push_back(u);
            d.turns.push_back(a);
        }
        split(corpus.text, std::move(d), i, cfg.n_text_dialogues);
    }

    // Description/image pairs; shapes cycle so classes stay balanced.
    for (int i = 0; i < cfg.n_pairs; ++i) {
        ShapeSpec s = ShapeSpec::from_index(pick(ShapeSpec::count()));
        s.shape = i % static_cast<int>(kShapes.size());
        std::snprintf(buf, sizeof buf, "dp-%06d", i);
        split(corpus.pairs, DescriptionImagePair{buf, s.description(), "images/" + s.file_name()}, i, cfg.n_pairs);
    }

    // Multimodal dialogues.
    static const std::vector<std::string> kRequests = {
        "can you show me a {obj}?", "please send me a photo of a {obj}", "i want to see a {obj}",
        "show me a {obj}", "do you have a picture of a {obj}?"};
    static const std::vector<std::string> kShareLines = {"look at my photo", "what do you think?",
                                                         "i took this picture"};
    static const std::vector<std::string> kShareReplies = {"what a nice {color} {shape}",
                                                           "i like the {size} {color} {shape}",
                                                           "cool, a {shape}!"};
    for (int i = 0; i < cfg.n_multimodal; ++i) {
        MultimodalDialogue d;
        std::snprintf(buf, sizeof buf, "ds-%06d", i);
        d.id = buf;
        d.response.speaker = "B";
        const int warmup = pick(3);
        for (int e = 0; e < warmup; ++e) {
            auto [u, a] = chit_chat(pick);
            d.context.turns.push_back(Utterance::say("A", u));
            d.context.turns.push_back(Utterance::say("B", a));
        }
        const ShapeSpec s = ShapeSpec::from_index(pick(ShapeSpec::count()));
        const std::map<std::string, std::string> vars = {{"obj", s.phrase()},
                                                         {"color", std::string(kColors[s.color])},
                                                         {"shape", std::string(kShapes[s.shape])},
                                                         {"size", std::string(kSizes[s.size])}};
        const std::string path = "images/" + s.file_name();
        const int kind = pick(10);
        using Seg = ResponseSegment;
        if (kind < 5) {
            // Request -> image response, in one of four layouts.
            d.context.turns.push_back(Utterance::say("A", fill(kRequests[static_cast<std::size_t>(pick(5))], vars)));
            const Seg img{Seg::Kind::image, s.description(), path};
            switch (pick(4)) {
                case 0: d.response.segments = {{Seg::Kind::text, "sure, here it is", {}}, img}; break;
                case 1: d.response.segments = {img, {Seg::Kind::text, "do you like it?", {}}}; break;
                case 2:
                    d.response.segments = {{Seg::Kind::text, "here you go", {}}, img, {Seg::Kind::text, "enjoy", {}}};
                    break;
                default: d.response.segments = {img}; break;
            }
        } else if (kind < 7) {
            // User shares a photo -> text reply about it.
            d.context.turns.push_back(Utterance::photo("A", s.description(), path));
            d.context.turns.push_back(Utterance::say("A", kShareLines[static_cast<std::size_t>(pick(3))]));
            d.response.segments = {{Seg::Kind::text, fill(kShareReplies[static_cast<std::size_t>(pick(3))], vars), {}}};
        } else {
            auto [u, a] = chit_chat(pick);
            d.context.turns.push_back(Utterance::say("A", u));
            d.response.segments = {{Seg::Kind::text, a, {}}};
        }
        split(corpus.multimodal, std::move(d), i, cfg.n_multimodal);
    }
    return corpus;
}

/// Every text line of a corpus (tokenizer training input).
inline std::vector<std::string> corpus_text(const SyntheticCorpus& c) {
    std::vector<std::string> lines;
    auto add_text = [&](const auto& split) {
        for (const auto& d : split) lines.insert(lines.end(), d.turns.begin(), d.turns.end());
    };
    add_text(c.text.train);
    auto add_pairs = [&](const auto& split) {
        for (const auto& p : split) lines.push_back(p.description);
    };
    add_pairs(c.pairs.train);
    for (const auto& d : c.multimodal.train) {
        for (const auto& u : d.context.turns) lines.push_back(u.kind == Utterance::Kind::text ? u.text : u.description);
        for (const auto& s : d.response.segments) lines.push_back(s.text);
    }
    return lines;
}

/// Writes the corpus tree: data/{dc,dp,ds}_{train,dev,test}.jsonl,
/// images/*.png and splits.json.
inline void write_corpus(const SyntheticCorpus& c, const std::filesystem::path& root) {
    std::filesystem::create_directories(root / "data");
    std::filesystem::create_directories(root / "images");
    for (const auto& [rel, img] : c.images) write_png((root / rel).string(), img);
    nlohmann::json manifest;
    auto ids = [](const auto& v) {
        std::vector<std::string> out;
        for (const auto& x : v) out.push_back(x.id);
        return out;
    };
    const std::array<std::string, 3> names = {"train", "dev", "test"};
    const std::array<const std::vector<TextDialogue>*, 3> dc = {&c.text.train, &c.text.dev, &c.text.test};
    const std::array<const std::vector<DescriptionImagePair>*, 3> dp = {&c.pairs.train, &c.pairs.dev, &c.pairs.test};
    const std::array<const std::vector<MultimodalDialogue>*, 3> ds = {&c.multimodal.train, &c.multimodal.dev,
                                                                      &c.multimodal.test};
    for (std::size_t i = 0; i < 3; ++i) {
        save_text_dialogues((root / "data" / ("dc_" + names[i] + ".jsonl")).string(), *dc[i]);
        save_pairs((root / "data" / ("dp_" + names[i] + ".jsonl")).string(), *dp[i]);
        save_multimodal((root / "data" / ("ds_" + names[i] + ".jsonl")).string(), *ds[i]);
        manifest["dc"][names[i]] = ids(*dc[i]);
        manifest["dp"][names[i]] = ids(*dp[i]);
        manifest["ds"][names[i]] = ids(*ds[i]);
    }
    std::ofstream((root / "splits.json").string()) << manifest.dump(1) << '\n';
}

/// Reads a corpus tree written by write_corpus (images are loaded too).
inline SyntheticCorpus read_corpus(const std::filesystem::path& root) {
    SyntheticCorpus c;
    auto p = [&](const std::string& name) { return (root / "data" / name).string(); };
    c.text = {load_text_dialogues(p("dc_train.jsonl")), load_text_dialogues(p("dc_dev.jsonl")),
              load_text_dialogues(p("dc_test.jsonl"))};
    c.pairs = {load_pairs(p("dp_train.jsonl")), load_pairs(p("dp_dev.jsonl")), load_pairs(p("dp_test.jsonl"))};
    c.multimodal = {load_photochat_format(p("ds_train.jsonl")), load_photochat_format(p("ds_dev.jsonl")),
                    load_photochat_format(p("ds_test.jsonl"))};
    std::vector<std::string> paths;
    for (const auto* split : {&c.pairs.train, &c.pairs.dev, &c.pairs.test}) {
        for (const auto& pr : *split) paths.push_back(pr.image_path);
    }
    for (const auto* split : {&c.multimodal.train, &c.multimodal.dev, &c.multimodal.test}) {
        for (const auto& d : *split) {
            for (const auto& u : d.context.turns) if (u.kind == Utterance::Kind::image) paths.push_back(u.image_path);
            for (const auto& s : d.response.segments) if (!s.image_path.empty()) paths.push_back(s.image_path);
        }
    }
    std::sort(paths.begin(), paths.end());
    paths.erase(std::unique(paths.begin(), paths.end()), paths.end());
    for (const auto& rel : paths) c.images.emplace_back(rel, read_image((root / rel).string()));
    return c;
}

/// Pixel lookup by relative path inside an in-memory corpus.
inline const ImageTensor& corpus_image(const SyntheticCorpus& c, const std::string& rel) {
    for (const auto& [path, img] : c.images) {
        if (path == rel) return img;
    }
    throw std::out_of_range("corpus has no image " + rel);
}

}  // namespace mdrg
