#pragma once

// HTTP JSON service behind the component labeling workflow.
//
//   GET  /api/classes                  -> [{class, class_name, n_components}]
//   GET  /api/classes/{k}/components   -> component cards (top 10) with asset URLs
//   POST /api/labels                   -> 204; appends one line to the JSONL log
//   GET  /api/registry/final           -> unanimous registry, also written to disk
//   GET  /assets/*                     -> static files from the assets directory
//
// Verdicts are kept latest-wins per (labeler, class, component). The log is the
// only mutable state; replaying any prefix of it gives a valid state.

// Eigen first: httplib pulls in <resolv.h>, whose _res macro breaks Eigen's parameter names.
#include <Eigen/Dense>
#include <httplib.h>

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spur/error.hpp"
#include "spur/ranking.hpp"
#include "spur/spufix.hpp"
#include "spur/tensorio.hpp"

namespace spur {

struct LabelEvent {
  std::string labeler_id;
  std::uint32_t class_index = 0;
  std::size_t component = 0;
  Verdict verdict = Verdict::kNotSpurious;
  std::string ts;
};

inline std::string utc_now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

inline nlohmann::json to_json(const LabelEvent& e) {
  return {{"labeler", e.labeler_id}, {"class", e.class_index}, {"component", e.component},
          {"verdict", to_string(e.verdict)}, {"ts", e.ts}};
}

// Throws kParse on malformed input. A missing "ts" is left empty.
inline LabelEvent label_event_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::kParse, "label event must be a JSON object");
  LabelEvent e;
  const char* labeler_key = j.contains("labeler") ? "labeler" : "labeler_id";
  if (!j.contains(labeler_key) || !j[labeler_key].is_string() || j[labeler_key].get<std::string>().empty())
    throw Error(ErrorCode::kParse, "label event: 'labeler' must be a non-empty string");
  e.labeler_id = j[labeler_key].get<std::string>();
  if (!j.contains("class") || !j["class"].is_number_unsigned())
    throw Error(ErrorCode::kParse, "label event: 'class' must be a non-negative integer");
  if (!j.contains("component") || !j["component"].is_number_unsigned())
    throw Error(ErrorCode::kParse, "label event: 'component' must be a non-negative integer");
  if (!j.contains("verdict") || !j["verdict"].is_string())
    throw Error(ErrorCode::kParse, "label event: 'verdict' must be a string");
  e.class_index = j["class"].get<std::uint32_t>();
  e.component = j["component"].get<std::size_t>();
  e.verdict = parse_verdict(j["verdict"].get<std::string>());
  if (j.contains("ts")) {
    if (!j["ts"].is_string()) throw Error(ErrorCode::kParse, "label event: 'ts' must be a string");
    e.ts = j["ts"].get<std::string>();
  }
  return e;
}

// Verdict state plus its append-only JSONL log.
class LabelStore {
 public:
  LabelStore() = default;

  // Replays an existing log (if any) and appends further events to it.
  explicit LabelStore(std::filesystem::path log_path) : log_path_(std::move(log_path)) {
    replay_file();
    log_.open(log_path_, std::ios::app | std::ios::binary);
    if (!log_) throw Error(ErrorCode::kIo, "cannot open label log '" + log_path_.string() + "'");
  }

  void record(const LabelEvent& e) {
    std::unique_lock lock(mu_);
    if (log_.is_open()) {
      log_ << to_json(e).dump() << '\n';
      log_.flush();
      if (!log_) throw Error(ErrorCode::kIo, "append to label log failed");
    }
    apply(e);
  }

  std::vector<LabelerSession> sessions() const {
    std::shared_lock lock(mu_);
    std::vector<LabelerSession> out;
    for (const auto& [id, verdicts] : state_) out.push_back({id, verdicts});
    return out;
  }

  // Labelers with at least one verdict.
  std::size_t labeler_count() const {
    std::shared_lock lock(mu_);
    return state_.size();
  }

  nlohmann::json snapshot() const {
    SpuriousRegistry r;
    r.sessions = sessions();
    return to_json(r)["sessions"];
  }

  // Sessions rebuilt from JSONL text. A trailing line without newline is an interrupted append and is ignored.
  static std::vector<LabelerSession> replay(const std::string& text) {
    LabelStore s;
    s.replay_text(text);
    return s.sessions();
  }

 private:
  void apply(const LabelEvent& e) { state_[e.labeler_id][{e.class_index, e.component}] = {e.verdict, e.ts}; }

  void replay_text(const std::string& text) {
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < text.size()) {
      const std::size_t nl = text.find('\n', pos);
      if (nl == std::string::npos) break;
      ++line_no;
      const std::string line = text.substr(pos, nl - pos);
      pos = nl + 1;
      if (line.empty()) continue;
      try {
        apply(label_event_from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorCode::kParse, "label log line " + std::to_string(line_no) + ": " + ex.what());
      }
    }
  }

  void replay_file() {
    if (!std::filesystem::exists(log_path_)) return;
    replay_text(read_file(log_path_));
  }

  std::filesystem::path log_path_;
  std::ofstream log_;
  mutable std::shared_mutex mu_;
  std::map<std::string, std::map<ComponentKey, VerdictEntry>> state_;
};

// Card files and class names on disk; re-read on every request so cards produced
// after startup become visible.
class CardCatalog {
 public:
  explicit CardCatalog(std::filesystem::path dir) : dir_(std::move(dir)) {}

  struct ClassInfo {
    std::uint32_t class_index = 0;
    std::string class_name;
    bool has_cards = false;
  };

  std::map<std::uint32_t, ClassInfo> classes() const {
    std::map<std::uint32_t, ClassInfo> out;
    const auto names = dir_ / "classes.json";
    if (std::filesystem::exists(names)) {
      const auto j = nlohmann::json::parse(read_file(names));
      for (const auto& c : j) {
        const auto k = c.at("class").get<std::uint32_t>();
        out[k] = {k, c.value("class_name", std::string()), false};
      }
    }
    static const std::regex pattern(R"(cards_k(\d+)\.json)");
    if (std::filesystem::is_directory(dir_)) {
      for (const auto& entry : std::filesystem::directory_iterator(dir_)) {
        std::smatch m;
        const std::string name = entry.path().filename().string();
        if (!std::regex_match(name, m, pattern)) continue;
        const auto k = static_cast<std::uint32_t>(std::stoul(m[1].str()));
        auto& info = out[k];
        info.class_index = k;
        info.has_cards = true;
      }
    }
    return out;
  }

  std::optional<std::vector<ComponentCard>> cards(std::uint32_t k) const {
    const auto path = dir_ / cards_filename(k);
    if (!std::filesystem::exists(path)) return std::nullopt;
    return cards_from_json(nlohmann::json::parse(read_file(path)));
  }

 private:
  std::filesystem::path dir_;
};

struct LabelServiceConfig {
  std::filesystem::path cards_dir;
  std::filesystem::path assets_dir;
  std::filesystem::path log_path;
  std::filesystem::path registry_path;  // where GET /api/registry/final writes
  std::optional<std::filesystem::path> ui_dir;
  std::string model_id;
  std::size_t max_cards = kDefaultKeep;
};

class LabelService {
 public:
  explicit LabelService(LabelServiceConfig cfg)
      : cfg_(std::move(cfg)), store_(cfg_.log_path), catalog_(cfg_.cards_dir) {
    routes();
  }

  LabelService(const LabelService&) = delete;
  LabelService& operator=(const LabelService&) = delete;

  // Blocking.
  bool listen(const std::string& host, int port) { return server_.listen(host, port); }

  // Binds to an ephemeral port; call listen_after_bind() afterwards (e.g. on a thread).
  int bind_any_port(const std::string& host) { return server_.bind_to_any_port(host); }
  bool listen_after_bind() { return server_.listen_after_bind(); }

  void stop() { server_.stop(); }
  void wait_until_ready() { server_.wait_until_ready(); }

  const LabelStore& store() const { return store_; }

 private:
  static void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& message) {
    send_json(res, status, {{"error", message}});
  }

  nlohmann::json card_view(const ComponentCard& c) const {
    nlohmann::json j = to_json(c);
    if (!c.npfv_asset.empty()) j["npfv_url"] = "/assets/" + c.npfv_asset;
    for (auto& img : j["top_images"])
      if (img.contains("asset_path")) img["url"] = "/assets/" + img["asset_path"].get<std::string>();
    if (!c.heatmaps.empty()) {
      auto urls = nlohmann::json::array();
      for (const auto& h : c.heatmaps) urls.push_back("/assets/" + h);
      j["heatmap_urls"] = std::move(urls);
    }
    return j;
  }

  void routes() {
    server_.Get("/api/classes", [this](const httplib::Request&, httplib::Response& res) {
      try {
        auto arr = nlohmann::json::array();
        for (const auto& [k, info] : catalog_.classes()) {
          std::size_t n = 0;
          if (info.has_cards) n = std::min(catalog_.cards(k)->size(), cfg_.max_cards);
          arr.push_back({{"class", k}, {"class_name", info.class_name}, {"n_components", n}});
        }
        send_json(res, 200, arr);
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      }
    });

    server_.Get(R"(/api/classes/(\d+)/components)", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        const auto k = static_cast<std::uint32_t>(std::stoul(req.matches[1].str()));
        const auto classes = catalog_.classes();
        if (!classes.count(k)) return send_error(res, 404, "unknown class " + std::to_string(k));
        auto cards = catalog_.cards(k);
        if (!cards) return send_error(res, 409, "cards for class " + std::to_string(k) + " not generated yet");
        if (cards->size() > cfg_.max_cards) cards->resize(cfg_.max_cards);
        auto arr = nlohmann::json::array();
        for (const auto& c : *cards) arr.push_back(card_view(c));
        send_json(res, 200, arr);
      } catch (const std::out_of_range&) {
        send_error(res, 404, "unknown class");
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      }
    });

    server_.Post("/api/labels", [this](const httplib::Request& req, httplib::Response& res) {
      LabelEvent e;
      try {
        e = label_event_from_json(nlohmann::json::parse(req.body));
      } catch (const std::exception& ex) {
        return send_error(res, 400, ex.what());
      }
      try {
        const auto cards = catalog_.cards(e.class_index);
        const bool known = cards && std::any_of(cards->begin(), cards->end(),
                                                [&](const ComponentCard& c) { return c.component == e.component; });
        if (!known)
          return send_error(res, 422, "unknown (class, component) = (" + std::to_string(e.class_index) + ", " +
                                          std::to_string(e.component) + ")");
        if (e.ts.empty()) e.ts = utc_now_iso8601();
        store_.record(e);
        res.status = 204;
      } catch (const std::exception& ex) {
        send_error(res, 500, ex.what());
      }
    });

    server_.Get("/api/registry/final", [this](const httplib::Request&, httplib::Response& res) {
      try {
        std::lock_guard lock(registry_mu_);
        if (store_.labeler_count() < 2)
          return send_error(res, 409, "need verdicts from at least two labelers, have " +
                                          std::to_string(store_.labeler_count()));
        const auto reg = finalize_registry(store_.sessions(), cfg_.model_id);
        if (!cfg_.registry_path.empty()) write_registry(cfg_.registry_path, reg);
        send_json(res, 200, to_json(reg));
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      }
    });

    server_.set_file_extension_and_mimetype_mapping("pgm", "image/x-portable-graymap");
    if (!cfg_.assets_dir.empty()) server_.set_mount_point("/assets", cfg_.assets_dir.string());
    if (cfg_.ui_dir) server_.set_mount_point("/", cfg_.ui_dir->string());
  }

  LabelServiceConfig cfg_;
  LabelStore store_;
  CardCatalog catalog_;
  std::mutex registry_mu_;
  httplib::Server server_;
};

}  // namespace spur
