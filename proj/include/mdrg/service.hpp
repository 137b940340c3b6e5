#pragma once

// Local HTTP chat service.
//   POST /api/session                  -> {session_id}
//   POST /api/chat                     -> {segments: [...]}
//   GET  /api/image/{id}[?b64=1]       -> PNG bytes or {png_b64}
//   GET  /api/health                   -> {status, checkpoints_loaded}
// Sessions are independent; requests within one session run one at a time.

#include "mdrg/agent.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <atomic>
#include <cstdio>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

namespace mdrg {

struct HttpError : std::runtime_error {
    int status;
    HttpError(int s, const std::string& msg) : std::runtime_error(msg), status(s) {}
};

class ChatService {
public:
    static constexpr int kMaxSamples = 64;
    static constexpr int kMaxBeam = 16;

    ChatService() = default;
    explicit ChatService(const RunState& st) { load(st); }

    void load(const RunState& st) {
        auto a = std::make_shared<const Agent>(st);
        std::lock_guard lock(mu_);
        agent_ = std::move(a);
    }

    bool ready() const {
        std::lock_guard lock(mu_);
        return agent_ != nullptr;
    }

    nlohmann::json health() const {
        const bool ok = ready();
        return {{"status", ok ? "ok" : "no_model"}, {"checkpoints_loaded", ok}};
    }

    nlohmann::json create_session() {
        std::lock_guard lock(mu_);
        char buf[32];
        std::snprintf(buf, sizeof buf, "s%06llu", static_cast<unsigned long long>(++next_session_));
        sessions_.emplace(buf, std::make_shared<Session>());
        return {{"session_id", buf}};
    }

    /// Body: {session_id, text, image?{description}, options?{pure_text, beam, n_samples, seed}}.
    nlohmann::json chat(const nlohmann::json& body) {
        std::shared_ptr<const Agent> agent;
        std::shared_ptr<Session> session;
        {
            std::lock_guard lock(mu_);
            agent = agent_;
            if (!body.is_object() || !body.contains("session_id") || !body["session_id"].is_string()) {
                throw HttpError(400, "session_id is required");
            }
            auto it = sessions_.find(body["session_id"].get<std::string>());
            if (it == sessions_.end()) throw HttpError(404, "unknown session");
            session = it->second;
        }
        if (!agent) throw HttpError(503, "model checkpoints are not loaded");
        const auto opt = parse_options(body.value("options", nlohmann::json::object()));
        std::optional<Utterance> turn;
        if (body.contains("image")) {
            const auto& im = body["image"];
            if (!im.is_object() || !im.contains("description") || !im["description"].is_string()) {
                throw HttpError(400, "image.description is required for an image message");
            }
            turn = Utterance::photo("A", im["description"].get<std::string>(), "");
        } else if (body.contains("text") && body["text"].is_string() && !body["text"].get<std::string>().empty()) {
            turn = Utterance::say("A", body["text"].get<std::string>());
        } else {
            throw HttpError(400, "text is required");
        }

        std::lock_guard slock(session->mu);
        session->context.turns.push_back(*turn);
        auto ro = opt;
        ro.seed = make_rng(opt.seed, {0xC4A7ull, session->turns})();
        ++session->turns;
        const auto reply = agent->respond(session->context, ro);
        auto segments = nlohmann::json::array();
        for (const auto& s : reply.segments) {
            if (!s.image) {
                segments.push_back({{"kind", "text"}, {"text", s.text}});
                session->context.turns.push_back(Utterance::say("B", s.text));
                continue;
            }
            auto topk = nlohmann::json::array();
            for (auto i : s.image->order) topk.push_back(store_image(s.image->candidates[i]));
            segments.push_back({{"kind", "image"}, {"image_id", topk.front()}, {"description", s.text}, {"topk", topk}});
            session->context.turns.push_back(Utterance::photo("B", s.text, ""));
        }
        return {{"segments", segments}};
    }

    DialogueContext session_context(const std::string& id) const {
        std::shared_ptr<Session> session;
        {
            std::lock_guard lock(mu_);
            auto it = sessions_.find(id);
            if (it == sessions_.end()) throw HttpError(404, "unknown session");
            session = it->second;
        }
        std::lock_guard slock(session->mu);
        return session->context;
    }

    std::optional<std::string> image_png(const std::string& id) const {
        std::lock_guard lock(mu_);
        auto it = images_.find(id);
        if (it == images_.end()) return std::nullopt;
        return it->second;
    }

    /// Registers the API routes (and static UI files when `ui_dir` is set).
    void mount(httplib::Server& srv, const std::string& ui_dir = "") {
        auto json_reply = [](httplib::Response& res, int status, const nlohmann::json& j) {
            res.status = status;
            res.set_content(j.dump(), "application/json");
        };
        auto guarded = [json_reply](auto fn) {
            return [fn, json_reply](const httplib::Request& req, httplib::Response& res) {
                try {
                    fn(req, res);
                } catch (const HttpError& e) {
                    json_reply(res, e.status, {{"error", e.what()}});
                } catch (const nlohmann::json::exception& e) {
                    json_reply(res, 400, {{"error", std::string("bad request: ") + e.what()}});
                } catch (const std::exception& e) {
                    json_reply(res, 500, {{"error", e.what()}});
                }
            };
        };
        srv.Get("/api/health", guarded([this, json_reply](const httplib::Request&, httplib::Response& res) {
            json_reply(res, 200, health());
        }));
        srv.Post("/api/session", guarded([this, json_reply](const httplib::Request&, httplib::Response& res) {
            if (!ready()) throw HttpError(503, "model checkpoints are not loaded");
            json_reply(res, 200, create_session());
        }));
        srv.Post("/api/chat", guarded([this, json_reply](const httplib::Request& req, httplib::Response& res) {
            json_reply(res, 200, chat(nlohmann::json::parse(req.body)));
        }));
        srv.Get(R"(/api/image/([0-9a-f]+))", guarded([this, json_reply](const httplib::Request& req, httplib::Response& res) {
            const auto png = image_png(req.matches[1]);
            if (!png) throw HttpError(404, "unknown image");
            if (req.has_param("b64") && req.get_param_value("b64") == "1") {
                json_reply(res, 200, {{"png_b64", httplib::detail::base64_encode(*png)}});
            } else {
                res.set_content(*png, "image/png");
            }
        }));
        if (!ui_dir.empty() && !srv.set_mount_point("/", ui_dir)) {
            throw std::invalid_argument("ui directory not found: " + ui_dir);
        }
    }

private:
    struct Session {
        std::mutex mu;
        DialogueContext context;
        std::uint64_t turns = 0;
    };

    static RespondOptions parse_options(const nlohmann::json& o) {
        if (!o.is_object()) throw HttpError(400, "options must be an object");
        RespondOptions r;
        r.pure_text = o.value("pure_text", r.pure_text);
        r.beam = o.value("beam", r.beam);
        r.n_samples = o.value("n_samples", r.n_samples);
        r.seed = o.value("seed", r.seed);
        if (r.beam < 1 || r.beam > kMaxBeam) throw HttpError(400, "beam must be in [1, 16]");
        if (r.n_samples < 1 || r.n_samples > kMaxSamples) throw HttpError(400, "n_samples must be in [1, 64]");
        return r;
    }

    /// Content-addressed, so replayed sessions return the same ids.
    std::string store_image(const ImageTensor& img) {
        const auto bytes = encode_png(img);
        std::uint64_t h = 1469598103934665603ull;
        for (auto b : bytes) h = (h ^ b) * 1099511628211ull;
        char id[17];
        std::snprintf(id, sizeof id, "%016llx", static_cast<unsigned long long>(h));
        std::lock_guard lock(mu_);
        images_.emplace(id, std::string(bytes.begin(), bytes.end()));
        return id;
    }

    mutable std::mutex mu_;
    std::shared_ptr<const Agent> agent_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::map<std::string, std::string> images_;
    std::uint64_t next_session_ = 0;
};

}  // namespace mdrg
