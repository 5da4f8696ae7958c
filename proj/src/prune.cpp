#include "mmcr/prune.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

#include <fcntl.h>
#include <unistd.h>

#include <fmt/chrono.h>
#include <fmt/format.h>

#include "mmcr/digest.hpp"
#include "mmcr/error.hpp"

namespace mmcr {

namespace {

constexpr std::array<std::string_view, 8> kQueueKeys = {
    "id", "record", "proposed_label", "outlier_score", "status", "verdict_label", "annotator", "timestamp"};

double parse_score(std::string_view text) {
  const std::string s(text);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    fail(ErrorKind::data, fmt::format("invalid outlier score '{}'", text));
  }
  return v;
}

}  // namespace

std::string_view to_string(ReviewStatus status) {
  switch (status) {
    case ReviewStatus::pending: return "pending";
    case ReviewStatus::accepted: return "accepted";
    case ReviewStatus::rejected: return "rejected";
    case ReviewStatus::relabeled: return "relabeled";
  }
  return "pending";
}

ReviewStatus parse_review_status(std::string_view text) {
  for (auto s : {ReviewStatus::pending, ReviewStatus::accepted, ReviewStatus::rejected,
                 ReviewStatus::relabeled}) {
    if (to_string(s) == text) return s;
  }
  fail(ErrorKind::data, fmt::format("unknown review status '{}'", text));
}

void validate_review_item(const ReviewItem& item, const LabelVocabulary* vocabulary) {
  if (item.id.empty() || item.record_id.empty()) fail(ErrorKind::data, "review item without id or record");
  if (item.status != ReviewStatus::pending && (!item.annotator || !item.timestamp)) {
    fail(ErrorKind::data, fmt::format("item '{}' has a verdict without annotator and timestamp", item.id));
  }
  if (item.status == ReviewStatus::relabeled) {
    if (!item.verdict_label) {
      fail(ErrorKind::data, fmt::format("item '{}' is relabeled without a verdict label", item.id));
    }
    if (vocabulary && !vocabulary->index_of(*item.verdict_label)) {
      fail(ErrorKind::data, fmt::format("item '{}' relabels to '{}', which is not in the vocabulary",
                                        item.id, *item.verdict_label));
    }
  }
}

std::string review_item_id(const std::string& record_id) {
  return "ri-" + sha256_hex(record_id).substr(0, 16);
}

std::string utc_timestamp() {
  using namespace std::chrono;
  const auto now = system_clock::now();
  const auto ms = duration_cast<milliseconds>(now.time_since_epoch()).count() % 1000;
  return fmt::format("{:%Y-%m-%dT%H:%M:%S}.{:03}Z", fmt::gmtime(system_clock::to_time_t(now)), ms);
}

ClassStatistics class_statistics(const std::map<std::string, std::vector<EmbeddingVector>>& grouped) {
  ClassStatistics out;
  for (const auto& [label, members] : grouped) {
    if (members.size() < 2) {
      out.excluded.push_back(label);
      continue;
    }
    ClassStats stats;
    stats.members = members.size();
    stats.centroid.assign(members.front().size(), 0.0);
    for (const auto& m : members) {
      if (m.size() != stats.centroid.size()) {
        fail(ErrorKind::usage, fmt::format("class '{}' mixes embedding dimensions", label));
      }
      for (std::size_t i = 0; i < m.size(); ++i) stats.centroid[i] += m[i];
    }
    for (auto& c : stats.centroid) c /= static_cast<double>(members.size());
    std::vector<double> distances;
    distances.reserve(members.size());
    for (const auto& m : members) distances.push_back(pair_distance(m, stats.centroid));
    double sum = 0.0;
    for (double d : distances) sum += d;
    stats.mean_distance = sum / static_cast<double>(distances.size());
    double sq = 0.0;
    for (double d : distances) sq += (d - stats.mean_distance) * (d - stats.mean_distance);
    stats.stddev = std::sqrt(sq / static_cast<double>(distances.size()));
    out.classes.emplace(label, std::move(stats));
  }
  return out;
}

double outlier_score(const EmbeddingVector& embedding, const ClassStats& stats) {
  const double d = pair_distance(embedding, stats.centroid);
  if (stats.stddev == 0.0) {
    return d == stats.mean_distance ? 0.0 : std::numeric_limits<double>::infinity();
  }
  return (d - stats.mean_distance) / stats.stddev;
}

std::vector<ReviewItem> select_for_review(std::vector<ScoredRecord> scored, double flag_fraction) {
  if (!(flag_fraction > 0.0 && flag_fraction <= 1.0)) {
    fail(ErrorKind::usage, fmt::format("flag fraction must be in (0,1], got {}", flag_fraction));
  }
  std::sort(scored.begin(), scored.end(), [](const ScoredRecord& a, const ScoredRecord& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.record_id < b.record_id;
  });
  const double exact = flag_fraction * static_cast<double>(scored.size());
  auto count = static_cast<std::size_t>(std::ceil(exact - 1e-9));
  count = std::min(std::max<std::size_t>(count, scored.empty() ? 0 : 1), scored.size());
  std::vector<ReviewItem> items;
  items.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    ReviewItem item;
    item.id = review_item_id(scored[i].record_id);
    item.record_id = scored[i].record_id;
    item.proposed_label = scored[i].label;
    item.outlier_score = scored[i].score;
    items.push_back(std::move(item));
  }
  return items;
}

ReviewQueueBuild build_review_queue(const std::vector<ImageRecord>& records,
                                    const ClassifierModel& model, double flag_fraction,
                                    const ImageLoader& loader) {
  if (records.empty()) fail(ErrorKind::usage, "cannot build a review queue from an empty manifest");
  std::vector<std::string> ids;
  std::vector<std::pair<std::string, std::string>> labeled;  // record id, label
  for (const auto& r : records) {
    auto label = class_label(r, model.vocabulary.granularity());
    if (!label) continue;
    ids.push_back(r.id);
    labeled.emplace_back(r.id, *label);
  }
  auto embeddings = embed_ids(model, ids, loader);
  std::map<std::string, std::vector<EmbeddingVector>> grouped;
  for (const auto& [id, label] : labeled) grouped[label].push_back(embeddings.at(id));
  auto stats = class_statistics(grouped);

  std::vector<ScoredRecord> scored;
  for (const auto& [id, label] : labeled) {
    auto it = stats.classes.find(label);
    if (it == stats.classes.end()) continue;
    scored.push_back({id, label, outlier_score(embeddings.at(id), it->second)});
  }
  ReviewQueueBuild build;
  build.excluded_classes = stats.excluded;
  build.scored_records = scored.size();
  build.items = select_for_review(std::move(scored), flag_fraction);
  return build;
}

std::string format_review_line(const ReviewItem& item) {
  validate_review_item(item);
  std::string line;
  auto append = [&](std::string_view key, std::string_view value) {
    if (value.find_first_of("\t\r\n") != std::string_view::npos) {
      fail(ErrorKind::data, fmt::format("queue field '{}' contains a tab or newline", key));
    }
    if (!line.empty()) line.push_back('\t');
    line += key;
    line.push_back('=');
    line += value;
  };
  append("id", item.id);
  append("record", item.record_id);
  append("proposed_label", item.proposed_label);
  append("outlier_score", fmt::format("{}", item.outlier_score));
  append("status", to_string(item.status));
  if (item.verdict_label) append("verdict_label", *item.verdict_label);
  if (item.annotator) append("annotator", *item.annotator);
  if (item.timestamp) append("timestamp", *item.timestamp);
  return line;
}

ReviewItem parse_review_line(std::string_view line, std::size_t line_number) {
  try {
    ReviewItem item;
    std::set<std::string_view> seen;
    std::size_t next_key = 0;
    for (auto field : split_fields(line, '\t')) {
      auto eq = field.find('=');
      if (eq == std::string_view::npos) fail(ErrorKind::data, fmt::format("field without '=': '{}'", field));
      auto key = field.substr(0, eq);
      auto value = field.substr(eq + 1);
      auto pos = std::find(kQueueKeys.begin() + next_key, kQueueKeys.end(), key);
      if (pos == kQueueKeys.end()) {
        fail(ErrorKind::data, fmt::format("unknown, repeated or out-of-order key '{}'", key));
      }
      next_key = static_cast<std::size_t>(pos - kQueueKeys.begin()) + 1;
      seen.insert(key);
      if (key == "id") item.id = value;
      else if (key == "record") item.record_id = value;
      else if (key == "proposed_label") item.proposed_label = value;
      else if (key == "outlier_score") item.outlier_score = parse_score(value);
      else if (key == "status") item.status = parse_review_status(value);
      else if (key == "verdict_label") item.verdict_label = std::string(value);
      else if (key == "annotator") item.annotator = std::string(value);
      else item.timestamp = std::string(value);
    }
    for (auto required : {"id", "record", "proposed_label", "outlier_score", "status"}) {
      if (!seen.count(required)) fail(ErrorKind::data, fmt::format("missing key '{}'", required));
    }
    validate_review_item(item);
    return item;
  } catch (const Error& e) {
    fail(e.kind(), fmt::format("line {}: {}", line_number, e.what()));
  }
}

void save_queue(const std::vector<ReviewItem>& items, const std::filesystem::path& path) {
  std::string out;
  for (const auto& item : items) out += format_review_line(item) + "\n";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  file << out;
  if (!file.flush()) fail(ErrorKind::io, fmt::format("cannot write queue {}", path.string()));
}

std::vector<ReviewItem> load_queue_log(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) fail(ErrorKind::io, fmt::format("cannot open queue {}", path.string()));
  std::vector<ReviewItem> log;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(file, line)) {
    ++line_number;
    if (line.empty()) continue;
    log.push_back(parse_review_line(line, line_number));
  }
  return log;
}

std::vector<ReviewItem> fold_queue(const std::vector<ReviewItem>& log) {
  std::vector<ReviewItem> items;
  std::map<std::string, std::size_t> position;
  for (const auto& entry : log) {
    auto [it, inserted] = position.emplace(entry.id, items.size());
    if (inserted) {
      items.push_back(entry);
      continue;
    }
    ReviewItem& current = items[it->second];
    // Pending lines carry no timestamp and never override a verdict.
    if (entry.status == ReviewStatus::pending && current.status != ReviewStatus::pending) continue;
    if (!current.timestamp || (entry.timestamp && *entry.timestamp >= *current.timestamp)) {
      current = entry;
    }
  }
  return items;
}

std::vector<ReviewItem> load_queue(const std::filesystem::path& path) {
  return fold_queue(load_queue_log(path));
}

void append_queue_entry(const ReviewItem& item, const std::filesystem::path& path) {
  const std::string line = format_review_line(item) + "\n";
  const int fd = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CREAT, 0644);
  if (fd < 0) fail(ErrorKind::io, fmt::format("cannot open queue {} for append", path.string()));
  std::size_t written = 0;
  while (written < line.size()) {
    const auto n = ::write(fd, line.data() + written, line.size() - written);
    if (n <= 0) {
      ::close(fd);
      fail(ErrorKind::io, fmt::format("cannot append to queue {}", path.string()));
    }
    written += static_cast<std::size_t>(n);
  }
  const bool synced = ::fsync(fd) == 0;
  ::close(fd);
  if (!synced) fail(ErrorKind::io, fmt::format("cannot sync queue {}", path.string()));
}

std::string ApplyResult::audit_jsonl() const {
  std::string out;
  for (const auto& a : audit) {
    nlohmann::json j = {{"action", a.action}, {"record", a.record_id}, {"item", a.item_id}};
    if (a.from_label) j["from"] = *a.from_label;
    if (a.to_label) j["to"] = *a.to_label;
    if (a.annotator) j["annotator"] = *a.annotator;
    if (a.timestamp) j["timestamp"] = *a.timestamp;
    out += j.dump() + "\n";
  }
  return out;
}

ApplyResult apply_verdicts(const std::vector<ImageRecord>& records,
                           const std::vector<ReviewItem>& items, const LabelVocabulary& vocabulary,
                           const std::map<std::string, ClassParts>& parts) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < records.size(); ++i) index.emplace(records[i].id, i);

  // Validate everything first so a bad verdict leaves no partial result.
  std::map<std::string, const ReviewItem*> verdicts;
  for (const auto& item : items) {
    validate_review_item(item, &vocabulary);
    if (item.status == ReviewStatus::pending || item.status == ReviewStatus::accepted) continue;
    if (!index.count(item.record_id)) {
      fail(ErrorKind::data, fmt::format("item '{}' refers to unknown record '{}'", item.id, item.record_id));
    }
    if (item.status == ReviewStatus::relabeled && !parts.count(*item.verdict_label)) {
      fail(ErrorKind::data, fmt::format("no make/model/year/color known for class '{}'", *item.verdict_label));
    }
    verdicts[item.record_id] = &item;
  }

  ApplyResult result;
  result.records.reserve(records.size());
  for (const auto& record : records) {
    auto it = verdicts.find(record.id);
    if (it == verdicts.end()) {
      result.records.push_back(record);
      continue;
    }
    const ReviewItem& item = *it->second;
    AuditEntry entry{"", record.id, item.id, class_label(record, vocabulary.granularity()), std::nullopt,
                     item.annotator, item.timestamp};
    if (item.status == ReviewStatus::rejected) {
      entry.action = "remove";
      result.audit.push_back(std::move(entry));
      continue;
    }
    ImageRecord updated = record;
    assign_class(updated, parts.at(*item.verdict_label), vocabulary.granularity());
    validate_record(updated);
    entry.action = "relabel";
    entry.to_label = *item.verdict_label;
    result.audit.push_back(std::move(entry));
    result.records.push_back(std::move(updated));
  }
  return result;
}

}  // namespace mmcr
