// mdrg: command-line entry points for data synthesis, every training stage,
// evaluation, generation and the chat service.
//
// Files live under $MDRG_HOME (default ./mdrg_home):
//   corpus/                synthetic corpus tree
//   run.ckpt               training run checkpoint
//   metrics.jsonl          appended training log
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include "mdrg/agent.hpp"
#include "mdrg/service.hpp"
#include "mdrg/training_pipeline.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

using namespace mdrg;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string home;
    std::string corpus;
    std::string checkpoint;
};

fs::path home_dir(const Common& c) {
    if (!c.home.empty()) return c.home;
    if (const char* h = std::getenv("MDRG_HOME")) return h;
    return "mdrg_home";
}

fs::path corpus_dir(const Common& c) { return c.corpus.empty() ? home_dir(c) / "corpus" : fs::path(c.corpus); }
fs::path checkpoint_path(const Common& c) { return c.checkpoint.empty() ? home_dir(c) / "run.ckpt" : fs::path(c.checkpoint); }

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw UsageError("config " + path + " is not valid JSON: " + e.what());
    }
}

/// Applies "a.b.c=value" overrides; value is parsed as JSON, else taken as a string.
void apply_overrides(nlohmann::json& j, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw UsageError("override must look like key=value: " + o);
        std::string key = o.substr(0, eq);
        const std::string raw = o.substr(eq + 1);
        nlohmann::json value;
        try {
            value = nlohmann::json::parse(raw);
        } catch (const nlohmann::json::parse_error&) {
            value = raw;
        }
        std::string ptr = "/" + key;
        for (auto& ch : ptr) if (ch == '.') ch = '/';
        j[nlohmann::json::json_pointer(ptr)] = value;
    }
}

/// Full config document: training keys plus an optional "world" section.
nlohmann::json config_document(const Common& c) {
    nlohmann::json j = c.config_path.empty() ? nlohmann::json::object() : read_json_file(c.config_path);
    if (!j.is_object()) throw UsageError("config must be a JSON object");
    apply_overrides(j, c.overrides);
    return j;
}

TrainingConfig training_config(const nlohmann::json& doc) {
    auto j = doc;
    j.erase("world");
    try {
        return config_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("bad config: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
}

SyntheticWorldConfig world_config(const nlohmann::json& doc) {
    SyntheticWorldConfig w;
    if (!doc.contains("world")) return w;
    const auto& j = doc.at("world");
    for (const auto& [k, v] : j.items()) {
        if (k != "seed" && k != "n_text_dialogues" && k != "n_pairs" && k != "n_multimodal" && k != "image_size") {
            throw UsageError("world config: unknown key '" + k + "'");
        }
    }
    w.seed = j.value("seed", w.seed);
    w.n_text_dialogues = j.value("n_text_dialogues", w.n_text_dialogues);
    w.n_pairs = j.value("n_pairs", w.n_pairs);
    w.n_multimodal = j.value("n_multimodal", w.n_multimodal);
    w.image_size = j.value("image_size", w.image_size);
    return w;
}

SyntheticCorpus load_corpus(const Common& c) {
    const auto dir = corpus_dir(c);
    if (!fs::exists(dir / "splits.json")) {
        throw std::runtime_error("no corpus at " + dir.string() + " (run synth-data first)");
    }
    return read_corpus(dir);
}

/// Loads the run checkpoint. A --config file replaces the stored config
/// and overrides apply on top of whichever is in effect; the architecture
/// must match the stored tensors.
RunState load_run(const Common& c) {
    const auto path = checkpoint_path(c);
    if (!fs::exists(path)) throw std::runtime_error("no checkpoint at " + path.string() + " (run tokenizer-train first)");
    const auto ck = Checkpoint::load(path.string());
    if (c.config_path.empty() && c.overrides.empty()) return from_checkpoint(ck);
    auto doc = c.config_path.empty() ? ck.meta.at("config") : read_json_file(c.config_path);
    apply_overrides(doc, c.overrides);
    const auto cfg = training_config(doc);
    auto st = from_checkpoint(ck, &cfg);
    st.config = cfg;
    return st;
}

MetricsSink log_sink(const Common& c, bool quiet) {
    auto path = home_dir(c) / "metrics.jsonl";
    auto out = std::make_shared<std::ofstream>(path, std::ios::app);
    return [out, quiet](const nlohmann::json& j) {
        *out << j.dump() << '\n';
        out->flush();
        if (!quiet && !j["val_loss"].is_null()) std::cerr << j.dump() << '\n';
    };
}

void train_stage(const Common& c, Stage stage, std::int64_t checkpoint_every, bool quiet) {
    auto st = load_run(c);
    const auto corpus = load_corpus(c);
    const auto sink = log_sink(c, quiet);
    const auto path = checkpoint_path(c).string();
    if (stage_done(st, stage)) {
        std::cerr << stage_name(stage) << " already complete in " << path << '\n';
        return;
    }
    while (!stage_done(st, stage)) {
        StageLimits lim;
        if (checkpoint_every > 0) lim.stop_after = stage_position(st, stage) + checkpoint_every;
        run_stage(stage, corpus, st, sink, lim);
        save_checkpoint(st, path);
    }
    std::cerr << stage_name(stage) << " complete; checkpoint " << path << '\n';
}

nlohmann::json segments_json(const AgentReply& reply, const std::string& id, const fs::path& image_dir) {
    auto segs = nlohmann::json::array();
    std::size_t k = 0;
    for (const auto& s : reply.segments) {
        if (!s.image) {
            segs.push_back({{"kind", "text"}, {"text", s.text}});
            continue;
        }
        nlohmann::json j = {{"kind", "image"}, {"description", s.text}};
        if (!image_dir.empty()) {
            fs::create_directories(image_dir);
            auto topk = nlohmann::json::array();
            for (std::size_t r = 0; r < s.image->order.size(); ++r) {
                const auto file = image_dir / (id + "_" + std::to_string(k) + "_" + std::to_string(r) + ".png");
                write_png(file.string(), s.image->candidates[s.image->order[r]]);
                topk.push_back(file.string());
            }
            j["image_path"] = topk.front();
            j["topk"] = topk;
        }
        segs.push_back(j);
        ++k;
    }
    return segs;
}

std::atomic<httplib::Server*> g_server{nullptr};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multimodal dialogue response generation: training, evaluation and chat service"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config_path, "JSON config file");
        sub->add_option("--set", common.overrides, "Override a config key, e.g. --set pretrain_G.steps=500");
        sub->add_option("--home", common.home, "Model/data root (default $MDRG_HOME or ./mdrg_home)");
        sub->add_option("--corpus", common.corpus, "Corpus directory (default <home>/corpus)");
        sub->add_option("--checkpoint", common.checkpoint, "Run checkpoint (default <home>/run.ckpt)");
    };

    std::uint64_t seed = 0;
    bool have_seed = false;
    auto* synth = app.add_subcommand("synth-data", "Generate the synthetic shapes corpus");
    add_common(synth);
    synth->add_option("--seed", seed, "World seed")->each([&](const std::string&) { have_seed = true; });

    auto* tok = app.add_subcommand("tokenizer-train", "Train the tokenizer and start a new run checkpoint");
    add_common(tok);
    bool force = false;
    tok->add_flag("--force", force, "Overwrite an existing run checkpoint");

    std::int64_t checkpoint_every = 0;
    bool quiet = false;
    std::vector<std::pair<CLI::App*, Stage>> stage_cmds;
    for (auto [name, stage, help] : {std::tuple{"codec-train", Stage::pretrain_V, "Train the image codec and classifier"},
                                     std::tuple{"pretrain-g", Stage::pretrain_G, "Pretrain the response generator"},
                                     std::tuple{"pretrain-f", Stage::pretrain_F, "Pretrain the text-to-image translator"},
                                     std::tuple{"finetune", Stage::joint_finetune, "Jointly fine-tune generator and translator"}}) {
        auto* sub = app.add_subcommand(name, help);
        add_common(sub);
        sub->add_option("--checkpoint-every", checkpoint_every, "Save the checkpoint every N steps (0 = at the end)");
        sub->add_flag("--quiet", quiet, "Do not echo validation lines");
        stage_cmds.emplace_back(sub, stage);
    }

    auto* eval = app.add_subcommand("eval", "Report metrics as JSON");
    add_common(eval);
    std::string pred_path, gold_path, split = "test", pred_out, image_dir;
    int limit = -1;
    bool table = false;
    RespondOptions ropt;
    eval->add_option("--pred", pred_path, "Predicted dialogues (JSONL); requires --gold");
    eval->add_option("--gold", gold_path, "Gold dialogues (JSONL)");
    eval->add_option("--split", split, "Corpus split for model evaluation")->check(CLI::IsMember({"dev", "test"}));
    eval->add_option("--limit", limit, "Evaluate at most N dialogues");
    eval->add_option("--write-pred", pred_out, "Write model predictions to this JSONL file");
    eval->add_flag("--table", table, "Also print the metrics table to stderr");
    eval->add_option("--seed", ropt.seed, "Sampling seed");

    auto* gen = app.add_subcommand("generate", "Respond to dialogue contexts");
    add_common(gen);
    std::string context_file;
    gen->add_option("--context-file", context_file, "JSONL of {id?, turns:[...]}")->required();
    gen->add_flag("--pure-text", ropt.pure_text, "Never produce images");
    gen->add_option("--beam", ropt.beam, "Beam size")->check(CLI::Range(1, 64));
    gen->add_option("--n-samples", ropt.n_samples, "Image samples per description")->check(CLI::Range(1, 256));
    gen->add_option("--seed", ropt.seed, "Sampling seed");
    gen->add_option("--max-new", ropt.max_new, "Maximum response tokens")->check(CLI::Range(1, 1024));
    gen->add_option("--image-dir", image_dir, "Write reranked images here");

    auto* serve = app.add_subcommand("serve", "Run the HTTP chat service");
    add_common(serve);
    int port = 8800;
    std::string host = "127.0.0.1", ui_dir;
    serve->add_option("--port", port, "Port")->check(CLI::Range(0, 65535));
    serve->add_option("--host", host, "Bind address");
    serve->add_option("--ui-dir", ui_dir, "Static UI bundle to serve at /");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (synth->parsed()) {
            auto doc = config_document(common);
            auto w = world_config(doc);
            if (have_seed) w.seed = seed;
            const auto cfg = training_config(doc);
            const auto dir = corpus_dir(common);
            fs::create_directories(dir);
            write_corpus(generate_synthetic(w, cfg.codec.height), dir);
            std::cerr << "corpus written to " << dir << '\n';
        } else if (tok->parsed()) {
            const auto path = checkpoint_path(common);
            if (fs::exists(path) && !force) throw UsageError(path.string() + " exists; pass --force to start over");
            auto st = new_run(training_config(config_document(common)));
            train_tokenizer(st, load_corpus(common));
            fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
            save_checkpoint(st, path.string());
            std::cerr << "tokenizer: " << st.vocab->size() << " ids; checkpoint " << path << '\n';
        } else if (eval->parsed()) {
            if (!pred_path.empty() || !gold_path.empty()) {
                if (pred_path.empty() || gold_path.empty()) throw UsageError("--pred and --gold go together");
                const auto r = score_predictions(load_photochat_format(pred_path), load_photochat_format(gold_path));
                std::cout << r.to_json().dump(2) << '\n';
                if (table) std::cerr << r.table();
            } else {
                const auto st = load_run(common);
                const auto corpus = load_corpus(common);
                EvalOptions eo;
                eo.respond = ropt;
                eo.respond.beam = st.config.beam;
                eo.respond.n_samples = st.config.n_samples;
                eo.respond.temperature = st.config.temperature;
                eo.respond.max_new = st.config.max_new;
                eo.limit = limit;
                const auto& ds = split == "dev" ? corpus.multimodal.dev : corpus.multimodal.test;
                const auto r = evaluate_run(st, corpus, ds, eo);
                if (!pred_out.empty()) save_multimodal(pred_out, r.predictions);
                std::cout << r.report.to_json().dump(2) << '\n';
                if (table) std::cerr << r.report.table();
            }
        } else if (gen->parsed()) {
            const auto st = load_run(common);
            const Agent agent(st);
            if (!gen->count("--max-new")) ropt.max_new = st.config.max_new;
            if (!gen->count("--n-samples")) ropt.n_samples = st.config.n_samples;
            ropt.temperature = st.config.temperature;
            for (const auto& [id, ctx] : load_contexts(context_file)) {
                const auto reply = agent.respond(ctx, ropt);
                std::cout << nlohmann::json{{"id", id}, {"segments", segments_json(reply, id, image_dir)}}.dump() << '\n';
            }
        } else if (serve->parsed()) {
            ChatService svc;
            const auto path = checkpoint_path(common);
            if (fs::exists(path)) {
                svc.load(load_run(common));
            } else {
                std::cerr << "no checkpoint at " << path << "; chat requests will return 503\n";
            }
            httplib::Server srv;
            svc.mount(srv, ui_dir);
            g_server = &srv;
            std::signal(SIGINT, [](int) {
                if (auto* s = g_server.load()) s->stop();
            });
            std::cerr << "listening on http://" << host << ":" << port << '\n';
            if (!srv.listen(host, port)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
        } else {
            for (const auto& [sub, stage] : stage_cmds) {
                if (sub->parsed()) train_stage(common, stage, checkpoint_every, quiet);
            }
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
