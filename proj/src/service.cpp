#include "mmcr/service.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <thread>

#include <fmt/format.h>

#include "httplib.h"
#include "mmcr/error.hpp"
#include "mmcr/image.hpp"
#include "mmcr/preprocess.hpp"

namespace mmcr {

namespace {

using nlohmann::json;

json box_json(const BoundingBox& box) {
  return {{"x_min", box.x_min}, {"y_min", box.y_min}, {"x_max", box.x_max}, {"y_max", box.y_max}};
}

std::string_view origin_name(BoxOrigin origin) {
  switch (origin) {
    case BoxOrigin::annotation: return "annotation";
    case BoxOrigin::detector: return "detector";
    case BoxOrigin::full_frame: return "full_frame";
  }
  return "unknown";
}

Prediction predict_one(const ClassifierModel& model, const Image& image) {
  return predict_batch(model, std::span<const Image>(&image, 1)).front();
}

json ranked_json(const ClassifierModel& model, const Prediction& prediction, std::size_t top_k,
                 bool color) {
  json out = json::array();
  const std::size_t n = std::min(top_k, prediction.ranked.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& scored = prediction.ranked[i];
    json entry;
    if (color) {
      entry["color"] = scored.name;
    } else {
      entry["label"] = scored.name;
      if (auto it = model.class_parts.find(scored.name); it != model.class_parts.end()) {
        if (it->second.make) entry["make"] = *it->second.make;
        if (it->second.model) entry["model"] = *it->second.model;
        if (it->second.year) entry["year"] = *it->second.year;
      }
    }
    entry["confidence"] = scored.confidence;
    out.push_back(std::move(entry));
  }
  return out;
}

std::string percent_encode(std::string_view text) {
  std::string out;
  for (unsigned char c : text) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
      out.push_back(static_cast<char>(c));
    } else {
      out += fmt::format("%{:02X}", c);
    }
  }
  return out;
}

std::string content_type(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".bmp") return "image/bmp";
  return "application/octet-stream";
}

std::optional<std::string> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

ServiceConfig ServiceConfig::from_settings(const Settings& settings) {
  ServiceConfig c;
  c.host = settings.get_string("service", "host", c.host);
  c.port = static_cast<int>(settings.get_int("service", "port", c.port));
  auto path = [&](const char* key) -> std::optional<std::filesystem::path> {
    if (auto v = settings.get_optional_string("service", key)) return std::filesystem::path(*v);
    return std::nullopt;
  };
  c.make_model_path = path("make_model_model");
  c.color_path = path("color_model");
  c.queue_path = path("queue");
  c.manifest_path = path("manifest");
  c.review_model_path = path("review_model");
  c.static_dir = path("static_dir");
  c.lease_seconds = static_cast<int>(settings.get_int("service", "lease_seconds", c.lease_seconds));
  c.threads = static_cast<int>(settings.get_int("service", "threads", c.threads));
  c.margin_fraction = settings.get_double("preprocess", "margin", c.margin_fraction);
  if (c.port < 0 || c.port > 65535) fail(ErrorKind::usage, fmt::format("invalid port {}", c.port));
  if (c.lease_seconds < 1) fail(ErrorKind::usage, "service.lease_seconds must be at least 1");
  if (c.threads < 1) fail(ErrorKind::usage, "service.threads must be at least 1");
  return c;
}

Recognizer::Recognizer(std::shared_ptr<const ClassifierModel> make_model,
                       std::shared_ptr<const ClassifierModel> color_model, double margin_fraction)
    : make_model_(std::move(make_model)),
      color_model_(std::move(color_model)),
      margin_fraction_(margin_fraction) {
  if (make_model_) make_model_digest_ = make_model_->digest();
  if (color_model_) color_digest_ = color_model_->digest();
}

json Recognizer::recognize(std::string_view encoded_image, std::size_t top_k) const {
  if (!make_model_) fail(ErrorKind::usage, "no make/model network is loaded");
  if (top_k == 0) fail(ErrorKind::usage, "top_k must be at least 1");
  const Image image = decode_image(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(encoded_image.data()), encoded_image.size()));
  const FullFrameDetector detector;

  PreprocessConfig config;
  config.margin_fraction = margin_fraction_;
  config.target_size = make_model_->input_size();
  const auto aligned = align_image(image, std::nullopt, config, detector);

  json vehicle;
  vehicle["boundingBox"] = box_json(aligned.source_box);
  vehicle["cropBox"] = box_json(aligned.crop_box);
  vehicle["origin"] = origin_name(aligned.origin);
  vehicle["makeModels"] = ranked_json(*make_model_, predict_one(*make_model_, aligned.aligned), top_k, false);
  if (color_model_) {
    PreprocessConfig color_config = config;
    color_config.target_size = color_model_->input_size();
    color_config.apply_mask = true;
    const auto masked = align_image(image, std::nullopt, color_config, detector);
    vehicle["color"] = ranked_json(*color_model_, predict_one(*color_model_, *masked.masked), top_k, true);
  } else {
    vehicle["color"] = nullptr;
  }

  json doc;
  doc["schema"] = kRecognizeSchema;
  doc["image"] = {{"width", image.width}, {"height", image.height}};
  doc["vehicles"] = json::array({std::move(vehicle)});
  doc["models"] = {{"makeModel", make_model_digest_},
                   {"color", color_digest_ ? json(*color_digest_) : json(nullptr)}};
  return doc;
}

json review_item_json(const ReviewItem& item) {
  json j;
  j["id"] = item.id;
  j["record"] = item.record_id;
  j["proposed_label"] = item.proposed_label;
  // JSON has no infinity; the flag-always sentinel travels as a string.
  if (std::isinf(item.outlier_score)) {
    j["outlier_score"] = item.outlier_score > 0 ? "inf" : "-inf";
  } else {
    j["outlier_score"] = item.outlier_score;
  }
  j["status"] = to_string(item.status);
  j["verdict_label"] = item.verdict_label ? json(*item.verdict_label) : json(nullptr);
  j["annotator"] = item.annotator ? json(*item.annotator) : json(nullptr);
  j["timestamp"] = item.timestamp ? json(*item.timestamp) : json(nullptr);
  j["image_url"] = "/v1/images/" + percent_encode(item.record_id);
  return j;
}

ReviewDesk::ReviewDesk(std::filesystem::path queue_path, std::optional<LabelVocabulary> vocabulary,
                       std::chrono::seconds lease, Clock clock)
    : path_(std::move(queue_path)), vocabulary_(std::move(vocabulary)), lease_(lease), clock_(std::move(clock)) {
  if (std::filesystem::exists(path_)) items_ = load_queue(path_);
  for (std::size_t i = 0; i < items_.size(); ++i) index_[items_[i].id] = i;
}

std::vector<ReviewItem> ReviewDesk::next(std::size_t count, const std::string& client) {
  std::lock_guard lock(mutex_);
  const auto now = clock_();
  std::vector<std::size_t> open;
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].status != ReviewStatus::pending) continue;
    auto lease = leases_.find(items_[i].id);
    const bool held_by_other = lease != leases_.end() && lease->second.expires > now &&
                               (client.empty() || lease->second.client != client);
    if (!held_by_other) open.push_back(i);
  }
  std::stable_sort(open.begin(), open.end(), [&](std::size_t a, std::size_t b) {
    if (items_[a].outlier_score != items_[b].outlier_score) {
      return items_[a].outlier_score > items_[b].outlier_score;
    }
    return items_[a].id < items_[b].id;
  });
  if (open.size() > count) open.resize(count);
  std::vector<ReviewItem> out;
  for (std::size_t i : open) {
    leases_[items_[i].id] = Lease{client, now + lease_};
    out.push_back(items_[i]);
  }
  return out;
}

ReviewDesk::VerdictResult ReviewDesk::submit(const std::string& id, const json& body) {
  VerdictResult result;
  std::lock_guard lock(mutex_);
  auto it = index_.find(id);
  if (it == index_.end()) {
    result.outcome = Outcome::not_found;
    result.message = fmt::format("no review item '{}'", id);
    return result;
  }
  ReviewItem& current = items_[it->second];
  if (current.status != ReviewStatus::pending) {
    result.outcome = Outcome::conflict;
    result.item = current;
    result.message = fmt::format("item '{}' already has a verdict", id);
    return result;
  }

  ReviewItem updated = current;
  try {
    if (!body.is_object()) fail(ErrorKind::data, "verdict body must be a JSON object");
    if (!body.contains("status") || !body["status"].is_string()) fail(ErrorKind::data, "status is required");
    updated.status = parse_review_status(body["status"].get<std::string>());
    if (updated.status == ReviewStatus::pending) fail(ErrorKind::data, "a verdict cannot set status pending");
    if (!body.contains("annotator") || !body["annotator"].is_string() ||
        body["annotator"].get<std::string>().empty()) {
      fail(ErrorKind::data, "annotator is required");
    }
    updated.annotator = body["annotator"].get<std::string>();
    updated.verdict_label.reset();
    if (body.contains("verdict_label") && !body["verdict_label"].is_null()) {
      if (!body["verdict_label"].is_string()) fail(ErrorKind::data, "verdict_label must be a string");
      updated.verdict_label = body["verdict_label"].get<std::string>();
    }
    if (updated.status == ReviewStatus::relabeled && !vocabulary_) {
      fail(ErrorKind::data, "relabeling needs a vocabulary; none is loaded");
    }
    updated.timestamp = utc_timestamp();
    validate_review_item(updated, vocabulary_ ? &*vocabulary_ : nullptr);
  } catch (const Error& e) {
    result.outcome = Outcome::invalid;
    result.message = e.what();
    return result;
  }

  append_queue_entry(updated, path_);
  current = updated;
  leases_.erase(id);
  result.item = std::move(updated);
  return result;
}

std::vector<ReviewItem> ReviewDesk::snapshot() const {
  std::lock_guard lock(mutex_);
  return items_;
}

struct Service::Impl {
  Parts parts;
  httplib::Server server;
  std::thread thread;
};

namespace {

thread_local std::chrono::steady_clock::time_point request_started;

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view code, std::string_view message) {
  send_json(res, status, {{"error", code}, {"message", message}});
}

std::optional<std::size_t> positive_param(const httplib::Request& req, const char* name,
                                          std::size_t fallback) {
  if (!req.has_param(name)) return fallback;
  const auto text = req.get_param_value(name);
  std::size_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size() || value == 0) return std::nullopt;
  return value;
}

}  // namespace

Service::Service(Parts parts) : impl_(std::make_unique<Impl>()) {
  impl_->parts = std::move(parts);
  auto& server = impl_->server;
  Impl* self = impl_.get();
  const int threads = std::max(1, self->parts.threads);
  server.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };

  server.set_pre_routing_handler([](const httplib::Request&, httplib::Response&) {
    request_started = std::chrono::steady_clock::now();
    return httplib::Server::HandlerResponse::Unhandled;
  });
  server.set_logger([self](const httplib::Request& req, const httplib::Response& res) {
    if (!self->parts.log) return;
    const auto elapsed = std::chrono::steady_clock::now() - request_started;
    self->parts.log({{"ts", utc_timestamp()},
                     {"method", req.method},
                     {"path", req.path},
                     {"status", res.status},
                     {"bytes_in", req.body.size()},
                     {"bytes_out", res.body.size()},
                     {"ms", std::chrono::duration<double, std::milli>(elapsed).count()}});
  });
  server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string message = "internal error";
    try {
      if (ep) std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      message = e.what();
    } catch (...) {
    }
    send_error(res, 500, "internal", message);
  });

  server.Get("/healthz", [self](const httplib::Request&, httplib::Response& res) {
    const bool ready = self->parts.recognizer && self->parts.recognizer->ready();
    send_json(res, 200, {{"status", "ok"}, {"recognizer", ready}, {"review", self->parts.desk != nullptr}});
  });

  server.Post("/v1/recognize", [self](const httplib::Request& req, httplib::Response& res) {
    if (!self->parts.recognizer || !self->parts.recognizer->ready()) {
      send_error(res, 503, "model_unavailable", "no make/model network is loaded");
      return;
    }
    auto top_k = positive_param(req, "top_k", 5);
    if (!top_k) {
      send_error(res, 400, "bad_request", "top_k must be a positive integer");
      return;
    }
    if (req.body.empty()) {
      send_error(res, 400, "bad_image", "request body is empty");
      return;
    }
    try {
      send_json(res, 200, self->parts.recognizer->recognize(req.body, *top_k));
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::data) {
        send_error(res, 400, "bad_image", e.what());
      } else {
        send_error(res, 500, "internal", e.what());
      }
    }
  });

  server.Get("/v1/review/next", [self](const httplib::Request& req, httplib::Response& res) {
    if (!self->parts.desk) {
      send_error(res, 503, "queue_unavailable", "no review queue is loaded");
      return;
    }
    auto count = positive_param(req, "count", 1);
    if (!count) {
      send_error(res, 400, "bad_request", "count must be a positive integer");
      return;
    }
    const std::string client = req.has_param("client") ? req.get_param_value("client") : std::string();
    json items = json::array();
    for (const auto& item : self->parts.desk->next(*count, client)) items.push_back(review_item_json(item));
    send_json(res, 200, {{"items", std::move(items)}});
  });

  server.Post("/v1/review/:id/verdict", [self](const httplib::Request& req, httplib::Response& res) {
    if (!self->parts.desk) {
      send_error(res, 503, "queue_unavailable", "no review queue is loaded");
      return;
    }
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      send_error(res, 400, "bad_request", "body is not valid JSON");
      return;
    }
    auto result = self->parts.desk->submit(req.path_params.at("id"), body);
    switch (result.outcome) {
      case ReviewDesk::Outcome::ok:
        send_json(res, 200, review_item_json(result.item));
        return;
      case ReviewDesk::Outcome::not_found:
        send_error(res, 404, "not_found", result.message);
        return;
      case ReviewDesk::Outcome::invalid:
        send_error(res, 422, "invalid_verdict", result.message);
        return;
      case ReviewDesk::Outcome::conflict:
        send_json(res, 409, {{"error", "conflict"},
                             {"message", result.message},
                             {"existing", review_item_json(result.item)}});
        return;
    }
  });

  server.Get("/v1/vocabulary", [self](const httplib::Request&, httplib::Response& res) {
    if (!self->parts.desk || !self->parts.desk->vocabulary()) {
      send_error(res, 503, "vocabulary_unavailable", "no review vocabulary is loaded");
      return;
    }
    const auto& v = *self->parts.desk->vocabulary();
    send_json(res, 200, {{"granularity", to_string(v.granularity())}, {"classes", v.classes()}, {"digest", v.digest()}});
  });

  server.Get("/v1/images/(.+)", [self](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    auto it = self->parts.images.find(id);
    if (it == self->parts.images.end()) {
      send_error(res, 404, "not_found", fmt::format("no image for record '{}'", id));
      return;
    }
    auto bytes = read_file(it->second);
    if (!bytes) {
      send_error(res, 404, "not_found", fmt::format("image file for record '{}' is missing", id));
      return;
    }
    res.set_content(std::move(*bytes), content_type(it->second));
  });

  if (self->parts.static_dir) server.set_mount_point("/", self->parts.static_dir->string());
}

Service::~Service() { stop(); }

int Service::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound <= 0) fail(ErrorKind::io, fmt::format("cannot bind {}", host));
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) fail(ErrorKind::io, fmt::format("cannot bind {}:{}", host, port));
  return port;
}

void Service::run() { impl_->server.listen_after_bind(); }

void Service::start() {
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void Service::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

Service::Parts load_service_parts(const ServiceConfig& config, Service::LogSink log) {
  Service::Parts parts;
  std::shared_ptr<const ClassifierModel> make_model;
  std::shared_ptr<const ClassifierModel> color_model;
  if (config.make_model_path) make_model = std::make_shared<ClassifierModel>(load_model(*config.make_model_path));
  if (config.color_path) color_model = std::make_shared<ClassifierModel>(load_model(*config.color_path));
  parts.recognizer = std::make_shared<Recognizer>(make_model, color_model, config.margin_fraction);

  if (config.queue_path) {
    std::optional<LabelVocabulary> vocabulary;
    if (config.review_model_path) {
      vocabulary = load_model(*config.review_model_path).vocabulary;
    } else if (make_model) {
      vocabulary = make_model->vocabulary;
    }
    parts.desk = std::make_shared<ReviewDesk>(*config.queue_path, std::move(vocabulary),
                                              std::chrono::seconds(config.lease_seconds));
  }
  if (config.manifest_path) {
    const auto base = config.manifest_path->parent_path();
    for (const auto& r : load_manifest(*config.manifest_path)) parts.images[r.id] = resolve_path(r.path, base);
  }
  parts.static_dir = config.static_dir;
  parts.threads = config.threads;
  parts.log = std::move(log);
  return parts;
}

}  // namespace mmcr
