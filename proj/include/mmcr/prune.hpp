#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmcr/manifest.hpp"
#include "mmcr/model.hpp"
#include "mmcr/verify.hpp"

namespace mmcr {

enum class ReviewStatus { pending, accepted, rejected, relabeled };
std::string_view to_string(ReviewStatus status);
ReviewStatus parse_review_status(std::string_view text);

struct ReviewItem {
  std::string id;
  std::string record_id;
  std::string proposed_label;
  double outlier_score = 0.0;
  ReviewStatus status = ReviewStatus::pending;
  std::optional<std::string> verdict_label;
  std::optional<std::string> annotator;
  std::optional<std::string> timestamp;  // ISO-8601 UTC

  friend bool operator==(const ReviewItem&, const ReviewItem&) = default;
};

/// Checks the status/annotator/timestamp/verdict_label invariants.
void validate_review_item(const ReviewItem& item, const LabelVocabulary* vocabulary = nullptr);

/// Stable, URL-safe id derived from the record id.
std::string review_item_id(const std::string& record_id);

/// Current UTC time as "YYYY-MM-DDTHH:MM:SS.mmmZ".
std::string utc_timestamp();

struct ClassStats {
  EmbeddingVector centroid;
  double mean_distance = 0.0;
  double stddev = 0.0;  // population
  std::size_t members = 0;
};

struct ClassStatistics {
  std::map<std::string, ClassStats> classes;
  std::vector<std::string> excluded;  // classes with fewer than two members
};

ClassStatistics class_statistics(const std::map<std::string, std::vector<EmbeddingVector>>& grouped);

/// (distance to centroid - mean distance) / stddev. A zero-spread class scores
/// 0 at the mean distance and +infinity anywhere else.
double outlier_score(const EmbeddingVector& embedding, const ClassStats& stats);

struct ScoredRecord {
  std::string record_id;
  std::string label;
  double score = 0.0;
};

/// Top ceil(fraction * n) by score, descending, ties by record id; as pending items.
std::vector<ReviewItem> select_for_review(std::vector<ScoredRecord> scored, double flag_fraction);

struct ReviewQueueBuild {
  std::vector<ReviewItem> items;
  std::vector<std::string> excluded_classes;
  std::size_t scored_records = 0;
};

/// Scores every labeled record of the manifest with the model's embeddings.
ReviewQueueBuild build_review_queue(const std::vector<ImageRecord>& records,
                                    const ClassifierModel& model, double flag_fraction,
                                    const ImageLoader& loader);

// Queue file: manifest-style key=value<TAB> lines, keys in the order
// id, record, proposed_label, outlier_score, status, verdict_label, annotator, timestamp.
// Verdicts are appended; the newest timestamp per item wins.
std::string format_review_line(const ReviewItem& item);
ReviewItem parse_review_line(std::string_view line, std::size_t line_number);

void save_queue(const std::vector<ReviewItem>& items, const std::filesystem::path& path);
/// Every line in file order (history included).
std::vector<ReviewItem> load_queue_log(const std::filesystem::path& path);
/// Latest state per item, in first-appearance order.
std::vector<ReviewItem> fold_queue(const std::vector<ReviewItem>& log);
std::vector<ReviewItem> load_queue(const std::filesystem::path& path);
/// Appends one line and flushes it to stable storage.
void append_queue_entry(const ReviewItem& item, const std::filesystem::path& path);

struct AuditEntry {
  std::string action;  // "remove" or "relabel"
  std::string record_id;
  std::string item_id;
  std::optional<std::string> from_label;
  std::optional<std::string> to_label;
  std::optional<std::string> annotator;
  std::optional<std::string> timestamp;
};

struct ApplyResult {
  std::vector<ImageRecord> records;
  std::vector<AuditEntry> audit;

  std::string audit_jsonl() const;
};

/// Produces a new manifest: rejected records removed, relabeled records take
/// the verdict label, everything else unchanged. Validates every verdict
/// before touching anything.
ApplyResult apply_verdicts(const std::vector<ImageRecord>& records,
                           const std::vector<ReviewItem>& items, const LabelVocabulary& vocabulary,
                           const std::map<std::string, ClassParts>& parts);

}  // namespace mmcr
