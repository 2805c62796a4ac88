#pragma once

// HTTP + JSON front end for sessions. Routes and payloads are documented in
// docs/api.md.

#include <atomic>
#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <string>

#include "carmtwin/controller.hpp"
#include "carmtwin/error.hpp"
#include "carmtwin/external.hpp"
#include "carmtwin/image_io.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace carmtwin {

struct PhantomEntry {
    std::shared_ptr<const LabeledVolume> volume;
    std::shared_ptr<const PromptVocabulary> vocabulary;
};

struct ServiceContext {
    std::map<std::string, PhantomEntry> phantoms; ///< selectable by name; "default" is used when none is given
    std::string instruction;                     ///< language-model system instruction
    SessionConfig session;
    CorruptionConfig corruption;
    nlohmann::json adapter = {{"type", "fallback"}};
    nlohmann::json segmentation = {{"type", "oracle"}};
};

inline CorruptionConfig corruption_from_json(const nlohmann::json& j, CorruptionConfig base = {})
{
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "identity") return CorruptionConfig::identity();
        if (s == "stylized") return CorruptionConfig::stylized(base.seed);
        throw Error(ErrorCode::configuration, "unknown corruption preset '" + s + "'");
    }
    if (!j.is_object()) throw Error(ErrorCode::configuration, "corruption must be a preset name or an object");
    CorruptionConfig c = base;
    c.blur_sigma_px = j.value("blur_sigma_px", c.blur_sigma_px);
    c.dilate_erode_px = j.value("dilate_erode_px", c.dilate_erode_px);
    c.dropout_prob = j.value("dropout_prob", c.dropout_prob);
    c.seed = j.value("seed", c.seed);
    if (j.contains("confusion_map")) c.confusion_map = j.at("confusion_map").get<std::map<std::string, std::string>>();
    c.validate();
    return c;
}

inline nlohmann::json corruption_json(const CorruptionConfig& c)
{
    return {{"blur_sigma_px", c.blur_sigma_px},
            {"dilate_erode_px", c.dilate_erode_px},
            {"dropout_prob", c.dropout_prob},
            {"seed", c.seed},
            {"confusion_map", c.confusion_map}};
}

inline std::chrono::milliseconds timeout_from_json(const nlohmann::json& j)
{
    return std::chrono::milliseconds(static_cast<long long>(1000.0 * j.value("timeout_s", 30.0)));
}

class Service {
public:
    explicit Service(ServiceContext ctx) : ctx_(std::move(ctx))
    {
        if (!ctx_.phantoms.contains("default")) throw Error(ErrorCode::configuration, "service needs a 'default' phantom");
    }

    /// Creates a session from a JSON request (all fields optional; see docs/api.md).
    std::string create_session(const nlohmann::json& req)
    {
        const std::string phantom = req.value("phantom", std::string("default"));
        const auto ph = ctx_.phantoms.find(phantom);
        if (ph == ctx_.phantoms.end()) throw Error(ErrorCode::not_found, "unknown phantom '" + phantom + "'");

        CorruptionConfig corruption = ctx_.corruption;
        if (req.contains("seed")) corruption.seed = req.at("seed").get<std::uint64_t>();
        if (req.contains("corruption")) corruption = corruption_from_json(req.at("corruption"), corruption);

        const nlohmann::json seg = req.value("segmentation", ctx_.segmentation);
        std::shared_ptr<SegmentationModel> segmenter;
        const std::string seg_type = seg.value("type", std::string("oracle"));
        if (seg_type == "oracle") segmenter = std::make_shared<OracleSegmentation>(ph->second.volume, ph->second.vocabulary, corruption);
        else if (seg_type == "external")
            segmenter = std::make_shared<ExternalSegmentation>(seg.at("endpoint").get<std::string>(), timeout_from_json(seg));
        else throw Error(ErrorCode::configuration, "unknown segmentation type '" + seg_type + "'");

        const nlohmann::json ad = req.value("adapter", ctx_.adapter);
        LanguageAdapter adapter = RuleBasedFallback{};
        const std::string ad_type = ad.value("type", std::string("fallback"));
        if (ad_type == "llm")
            adapter = LanguageModelAdapter{
                std::make_shared<HttpLanguageModel>(ad.at("endpoint").get<std::string>(), timeout_from_json(ad)), ctx_.instruction};
        else if (ad_type != "fallback") throw Error(ErrorCode::configuration, "unknown adapter type '" + ad_type + "'");

        SessionConfig cfg = ctx_.session;
        cfg.radiation_gating = req.value("radiation_gating", cfg.radiation_gating);
        cfg.pixel_pitch_mm = req.value("pixel_pitch_mm", cfg.pixel_pitch_mm);

        auto session = std::make_shared<Session>(ph->second.volume, ph->second.vocabulary, segmenter, adapter, cfg);
        std::lock_guard lock(mutex_);
        const std::string id = "s" + std::to_string(++next_id_);
        sessions_.emplace(id, session);
        return id;
    }

    std::shared_ptr<Session> find(const std::string& id) const
    {
        std::lock_guard lock(mutex_);
        const auto it = sessions_.find(id);
        if (it == sessions_.end()) throw Error(ErrorCode::not_found, "no session '" + id + "'");
        return it->second;
    }

    void mount(httplib::Server& srv)
    {
        srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            try {
                std::rethrow_exception(ep);
            } catch (const Error& e) {
                send_error(res, e);
            } catch (const nlohmann::json::exception& e) {
                send_error(res, Error(ErrorCode::invalid_parameter, std::string("bad JSON: ") + e.what()));
            } catch (const std::exception& e) {
                res.status = 500;
                res.set_content(nlohmann::json{{"error", "internal"}, {"message", e.what()}}.dump(), "application/json");
            }
        });

        srv.Get("/health", [](const httplib::Request&, httplib::Response& res) { send_json(res, {{"status", "ok"}}); });

        srv.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
            const auto body = req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
            const std::string id = create_session(body);
            res.status = 201;
            send_json(res, {{"session_id", id}, {"state", state_json(*find(id)->state())}}, 201);
        });

        srv.Get(R"(/sessions/([^/]+)/state)", [this](const httplib::Request& req, httplib::Response& res) {
            send_json(res, state_json(*find(req.matches[1])->state()));
        });

        srv.Post(R"(/sessions/([^/]+)/utterance)", [this](const httplib::Request& req, httplib::Response& res) {
            const auto body = nlohmann::json::parse(req.body);
            const auto session = find(req.matches[1]);
            send_json(res, report_json(session->submit(body.at("text").get<std::string>())));
        });

        srv.Post(R"(/sessions/([^/]+)/action)", [this](const httplib::Request& req, httplib::Response& res) {
            const auto body = nlohmann::json::parse(req.body);
            const auto session = find(req.matches[1]);
            try {
                const Action a = parse_action(body.at("action").get<std::string>());
                send_json(res, report_json(session->execute(a)));
            } catch (const ParseError& e) {
                send_json(res, {{"error", "parse"}, {"message", e.what()}, {"token", e.token()}, {"position", e.position()}}, 400);
            }
        });

        srv.Post(R"(/sessions/([^/]+)/confirm)", [this](const httplib::Request& req, httplib::Response& res) {
            send_json(res, report_json(find(req.matches[1])->confirm()));
        });

        srv.Post(R"(/sessions/([^/]+)/cancel)", [this](const httplib::Request& req, httplib::Response& res) {
            send_json(res, report_json(find(req.matches[1])->cancel()));
        });

        srv.Get(R"(/sessions/([^/]+)/images/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            const auto state = find(req.matches[1])->state();
            const std::string which = req.matches[2];
            ImagePtr img;
            if (which == "current") img = state->current_image();
            else if (const auto n = parse_int<std::uint64_t>(which)) img = state->twin.history->find(ImageId{*n});
            if (!img) throw Error(ErrorCode::not_found, "no image '" + which + "'");
            const std::string format = req.has_param("format") ? req.get_param_value("format") : "pgm";
            if (format == "pgm") res.set_content(encode_pgm16(img->pixels), "image/x-portable-graymap");
            else if (format == "sidecar") res.set_content(encode_sidecar(*img), "text/plain");
            else throw Error(ErrorCode::invalid_parameter, "format must be pgm or sidecar");
        });

        srv.Get(R"(/sessions/([^/]+)/overlay)", [this](const httplib::Request& req, httplib::Response& res) {
            if (!req.has_param("prompt")) throw Error(ErrorCode::invalid_parameter, "missing prompt parameter");
            const auto session = find(req.matches[1]);
            const SegmentationHeatmap hm = session->overlay(req.get_param_value("prompt"));
            send_json(res, {{"prompt", hm.prompt},
                            {"image_id", hm.image_id.value},
                            {"model_tag", hm.model_tag},
                            {"threshold", 0.5},
                            {"mask", mask_runs_json(threshold_heatmap(hm.scores, 0.5f))}});
        });

        srv.Get(R"(/sessions/([^/]+)/twin)", [this](const httplib::Request& req, httplib::Response& res) {
            const auto session = find(req.matches[1]);
            const auto recon = session->last_reconstruction();
            nlohmann::json j{{"image_count", session->state()->twin.history->size()}};
            j["reconstruction"] = recon ? summary_json(*recon) : nlohmann::json(nullptr);
            if (recon && req.has_param("points")) {
                std::ostringstream os;
                write_point_cloud(*recon, os);
                j["points"] = os.str();
            }
            send_json(res, j);
        });

        srv.Get(R"(/sessions/([^/]+)/transcript)", [this](const httplib::Request& req, httplib::Response& res) {
            const auto t = find(req.matches[1])->transcript();
            nlohmann::json arr = nlohmann::json::array();
            for (std::size_t i = 0; i < t->size(); ++i) arr.push_back(transcript_entry_json((*t)[i], i));
            send_json(res, arr);
        });
    }

    static void send_json(httplib::Response& res, const nlohmann::json& j, int status = 200)
    {
        res.status = status;
        res.set_content(j.dump(), "application/json");
    }

    static int http_status(ErrorCode c)
    {
        switch (c) {
        case ErrorCode::not_found: return 404;
        case ErrorCode::unavailable: return 503;
        case ErrorCode::duplicate_id: return 409;
        default: return 400;
        }
    }

    static void send_error(httplib::Response& res, const Error& e)
    {
        send_json(res, {{"error", std::string(to_string(e.code()))}, {"message", e.what()}}, http_status(e.code()));
    }

private:
    ServiceContext ctx_;
    mutable std::mutex mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::uint64_t next_id_ = 0;
};

} // namespace carmtwin
