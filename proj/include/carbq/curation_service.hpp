#pragma once

// Local HTTP API behind the curation UI. All state lives in the manifest
// file; the server only caches it and writes through on every selection.

#include <charconv>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "carbq/dataset.hpp"
#include "carbq/error.hpp"
#include "carbq/image.hpp"
#include "carbq/masking.hpp"

namespace carbq {

inline constexpr int kDefaultPort = 8765;

/// --port wins over CARBQ_PORT, which wins over the fallback.
inline int resolve_port(std::optional<int> flag, int fallback = kDefaultPort) {
    int port = fallback;
    if (flag) {
        port = *flag;
    } else if (const char* env = std::getenv("CARBQ_PORT"); env != nullptr && *env != '\0') {
        const std::string s(env);
        int v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size()) {
            throw ConfigError("CARBQ_PORT is not an integer: \"" + s + "\"");
        }
        port = v;
    }
    if (port < 1024 || port > 65535) {
        throw ConfigError("port must be in [1024, 65535], got " + std::to_string(port));
    }
    return port;
}

class CurationServer {
public:
    explicit CurationServer(fs::path manifest_path, std::optional<fs::path> static_dir = std::nullopt)
        : manifest_path_(std::move(manifest_path)), manifest_(load_manifest(manifest_path_)) {
        routes();
        if (static_dir && !server_.set_mount_point("/", static_dir->string())) {
            throw IoError("cannot serve static files from " + static_dir->string());
        }
    }

    ~CurationServer() { stop(); }

    CurationServer(const CurationServer&) = delete;
    CurationServer& operator=(const CurationServer&) = delete;

    /// Binds host:port; port 0 picks a free port. Returns the bound port.
    int bind(const std::string& host, int port) {
        if (port == 0) {
            port_ = server_.bind_to_any_port(host);
            if (port_ < 0) {
                throw IoError("cannot bind " + host);
            }
        } else {
            if (!server_.bind_to_port(host, port)) {
                throw IoError("cannot bind " + host + ":" + std::to_string(port));
            }
            port_ = port;
        }
        return port_;
    }

    /// Serves until stop(); call after bind().
    void listen() { server_.listen_after_bind(); }

    void start_background() {
        thread_ = std::thread([this] { listen(); });
        server_.wait_until_ready();
    }

    void stop() {
        server_.stop();
        if (thread_.joinable()) {
            thread_.join();
        }
    }

    int port() const noexcept { return port_; }

private:
    static void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json; charset=utf-8");
    }

    static void send_error(httplib::Response& res, int status, const std::string& msg) {
        send_json(res, status, {{"error", msg}});
    }

    static nlohmann::json item_json(const ManifestEntry& e) {
        return {{"id", e.id},
                {"class_label", to_string(e.class_label)},
                {"curated", e.curated()},
                {"chosen_threshold", e.chosen_threshold ? nlohmann::json(*e.chosen_threshold) : nlohmann::json()}};
    }

    // Runs f on the entry under a shared lock; 404 when the id is unknown.
    template <typename F>
    void with_entry(const httplib::Request& req, httplib::Response& res, F&& f) {
        const std::string id = req.matches[1];
        std::shared_lock lock(mutex_);
        const ManifestEntry* e = manifest_.find(id);
        if (e == nullptr) {
            send_error(res, 404, "unknown image id \"" + id + "\"");
            return;
        }
        try {
            f(*e);
        } catch (const Error& err) {
            send_error(res, 500, err.what());
        }
    }

    void routes() {
        server_.Get("/api/images", [this](const httplib::Request&, httplib::Response& res) {
            std::shared_lock lock(mutex_);
            nlohmann::json items = nlohmann::json::array();
            for (const auto& e : manifest_.entries) {
                items.push_back(item_json(e));
            }
            send_json(res, 200, {{"version", manifest_.version}, {"images", items}});
        });

        server_.Get("/api/progress", [this](const httplib::Request&, httplib::Response& res) {
            std::shared_lock lock(mutex_);
            std::size_t curated = 0;
            for (const auto& e : manifest_.entries) {
                curated += e.curated() ? 1 : 0;
            }
            send_json(res, 200, {{"curated", curated}, {"total", manifest_.entries.size()}});
        });

        server_.Get("/api/thresholds", [this](const httplib::Request&, httplib::Response& res) {
            std::shared_lock lock(mutex_);
            send_json(res, 200, {{"thresholds", manifest_.default_threshold_set.to_vector()}});
        });

        server_.Get(R"(/api/images/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            with_entry(req, res, [&](const ManifestEntry& e) {
                const auto bytes = read_file_bytes(manifest_.resolve(e.image_path));
                res.set_content(reinterpret_cast<const char*>(bytes.data()), bytes.size(), "image/x-portable-graymap");
            });
        });

        server_.Get(R"(/api/images/([^/]+)/meta)", [this](const httplib::Request& req, httplib::Response& res) {
            with_entry(req, res, [&](const ManifestEntry& e) {
                const GrayImage img = load_pgm(manifest_.resolve(e.image_path));
                auto j = item_json(e);
                j["width"] = img.width();
                j["height"] = img.height();
                send_json(res, 200, j);
            });
        });

        server_.Get(R"(/api/images/([^/]+)/mask)", [this](const httplib::Request& req, httplib::Response& res) {
            with_entry(req, res, [&](const ManifestEntry& e) {
                const auto t = parse_int(req.get_param_value("t"));
                if (!t || !manifest_.default_threshold_set.contains(*t)) {
                    send_error(res, 400, "t must be one of the threshold set values");
                    return;
                }
                const auto bytes = encode_mask_pgm(curated_mask(load_pgm(manifest_.resolve(e.image_path)), *t));
                res.set_content(reinterpret_cast<const char*>(bytes.data()), bytes.size(), "image/x-portable-graymap");
            });
        });

        server_.Post(R"(/api/images/([^/]+)/selection)", [this](const httplib::Request& req, httplib::Response& res) {
            select(req, res);
        });
    }

    static std::optional<int> parse_int(const std::string& s) {
        int v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
            return std::nullopt;
        }
        return v;
    }

    // Body: {"threshold": t, "version": v}. version is optional; when given it
    // must match the manifest version the client last saw.
    void select(const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        nlohmann::json body;
        try {
            body = nlohmann::json::parse(req.body);
        } catch (const nlohmann::json::parse_error&) {
            send_error(res, 400, "body must be JSON");
            return;
        }
        if (!body.is_object() || !body.contains("threshold") || !body["threshold"].is_number_integer()) {
            send_error(res, 400, "body needs an integer \"threshold\"");
            return;
        }
        const int t = body["threshold"].get<int>();

        std::unique_lock lock(mutex_);
        if (manifest_.find(id) == nullptr) {
            send_error(res, 404, "unknown image id \"" + id + "\"");
            return;
        }
        if (!manifest_.default_threshold_set.contains(t)) {
            send_error(res, 400, "threshold " + std::to_string(t) + " is not in the threshold set");
            return;
        }
        try {
            // someone else (another server, the CLI) may have written the file
            const Manifest on_disk = load_manifest(manifest_path_);
            if (on_disk.version != manifest_.version) {
                manifest_ = on_disk;
                send_json(res, 409, {{"error", "manifest changed on disk; reload and retry"}, {"version", manifest_.version}});
                return;
            }
            if (body.contains("version") && body["version"] != manifest_.version) {
                send_json(res, 409, {{"error", "stale version; reload and retry"}, {"version", manifest_.version}});
                return;
            }
            Manifest next = record_curation(manifest_, id, t);
            save_manifest(manifest_path_, next);
            manifest_ = std::move(next);
        } catch (const Error& err) {
            send_error(res, 500, err.what());
            return;
        }
        auto j = item_json(*manifest_.find(id));
        j["version"] = manifest_.version;
        send_json(res, 200, j);
    }

    fs::path manifest_path_;
    Manifest manifest_;
    std::shared_mutex mutex_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = -1;
};

} // namespace carbq
