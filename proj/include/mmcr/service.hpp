#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmcr/config.hpp"
#include "mmcr/model.hpp"
#include "mmcr/prune.hpp"

namespace mmcr {

inline constexpr std::string_view kRecognizeSchema = "mmcr.recognize.v1";

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::optional<std::filesystem::path> make_model_path;
  std::optional<std::filesystem::path> color_path;
  std::optional<std::filesystem::path> queue_path;
  std::optional<std::filesystem::path> manifest_path;  // resolves review images
  std::optional<std::filesystem::path> review_model_path;  // vocabulary for relabels
  std::optional<std::filesystem::path> static_dir;
  int lease_seconds = 300;
  int threads = 8;
  double margin_fraction = 0.10;

  /// Reads the "service" section (and preprocess.margin).
  static ServiceConfig from_settings(const Settings& settings);
};

/// Stateless recognition over read-only models.
class Recognizer {
 public:
  Recognizer(std::shared_ptr<const ClassifierModel> make_model,
             std::shared_ptr<const ClassifierModel> color_model, double margin_fraction = 0.10);

  bool ready() const { return make_model_ != nullptr; }

  /// Full-frame detection, alignment, then both networks. Throws
  /// ErrorKind::data when the bytes do not decode and ErrorKind::usage
  /// when no make/model network is loaded.
  nlohmann::json recognize(std::string_view encoded_image, std::size_t top_k) const;

 private:
  std::shared_ptr<const ClassifierModel> make_model_;
  std::shared_ptr<const ClassifierModel> color_model_;
  std::string make_model_digest_;
  std::optional<std::string> color_digest_;
  double margin_fraction_;
};

nlohmann::json review_item_json(const ReviewItem& item);

/// In-memory review queue over the append-only queue file. Leases hide
/// served items from other clients until they expire; verdicts are appended
/// durably by one writer before they become visible.
class ReviewDesk {
 public:
  using Clock = std::function<std::chrono::steady_clock::time_point()>;

  ReviewDesk(std::filesystem::path queue_path, std::optional<LabelVocabulary> vocabulary,
             std::chrono::seconds lease, Clock clock = &std::chrono::steady_clock::now);

  /// Up to count pending items, highest outlier score first, leased to client.
  std::vector<ReviewItem> next(std::size_t count, const std::string& client);

  enum class Outcome { ok, not_found, invalid, conflict };
  struct VerdictResult {
    Outcome outcome = Outcome::ok;
    ReviewItem item;  // updated item, or the existing verdict on conflict
    std::string message;
  };
  VerdictResult submit(const std::string& id, const nlohmann::json& body);

  std::vector<ReviewItem> snapshot() const;
  const std::optional<LabelVocabulary>& vocabulary() const { return vocabulary_; }

 private:
  struct Lease {
    std::string client;
    std::chrono::steady_clock::time_point expires;
  };

  std::filesystem::path path_;
  std::optional<LabelVocabulary> vocabulary_;
  std::chrono::seconds lease_;
  Clock clock_;
  mutable std::mutex mutex_;
  std::vector<ReviewItem> items_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, Lease> leases_;
};

/// HTTP front end:
///   POST /v1/recognize?top_k=N          raw image body
///   GET  /v1/review/next?count=N&client=C
///   POST /v1/review/{id}/verdict        {"status", "verdict_label"?, "annotator"}
///   GET  /v1/vocabulary
///   GET  /v1/images/{record_id}
///   GET  /healthz
class Service {
 public:
  using LogSink = std::function<void(const nlohmann::json&)>;

  struct Parts {
    std::shared_ptr<const Recognizer> recognizer;
    std::shared_ptr<ReviewDesk> desk;
    std::map<std::string, std::filesystem::path> images;  // record id -> file
    std::optional<std::filesystem::path> static_dir;
    int threads = 8;
    LogSink log;
  };

  explicit Service(Parts parts);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds the listening socket; port 0 picks a free port. Returns the port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after bind().
  void run();
  /// run() on a background thread, returning once the server accepts connections.
  void start();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Loads models, queue and manifest named by the config.
Service::Parts load_service_parts(const ServiceConfig& config, Service::LogSink log = {});

}  // namespace mmcr
