#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmcr/image.hpp"
#include "mmcr/model.hpp"

namespace mmcr {

enum class PairLabel { same, different };

std::string_view to_string(PairLabel label);
PairLabel parse_pair_label(std::string_view text);

struct VerificationPair {
  std::string id_a;
  std::string id_b;
  PairLabel label = PairLabel::same;
  friend bool operator==(const VerificationPair&, const VerificationPair&) = default;
};

/// "id_a<TAB>id_b<TAB>same|different", one pair per line.
std::vector<VerificationPair> load_pairs(const std::filesystem::path& path);
void save_pairs(const std::vector<VerificationPair>& pairs, const std::filesystem::path& path);

/// Euclidean distance; throws ErrorKind::usage on a dimension mismatch.
double pair_distance(std::span<const double> a, std::span<const double> b);

/// same iff distance < threshold.
PairLabel verify_pair(std::span<const double> a, std::span<const double> b, double threshold);

struct LabeledDistance {
  double distance = 0.0;
  PairLabel label = PairLabel::same;
};

struct DistanceHistogram {
  double upper = 0.0;  // bins span [0, upper]
  std::vector<std::size_t> same;
  std::vector<std::size_t> different;
};

struct ThresholdModel {
  double threshold = 0.0;
  double accuracy = 0.0;
  std::size_t same_pairs = 0;
  std::size_t different_pairs = 0;
  DistanceHistogram histogram;

  nlohmann::json to_json() const;
};

/// Fraction of pairs decided correctly by "same iff distance < threshold".
double decision_accuracy(std::span<const LabeledDistance> pairs, double threshold);

/// Candidate thresholds: 0, midpoints between consecutive distinct sorted
/// distances, and one just above the largest distance. Picks the most accurate,
/// smallest on ties. Needs both labels present.
ThresholdModel calibrate_threshold(std::span<const LabeledDistance> pairs);

/// Loads the preprocessed model-input image of a record id.
using ImageLoader = std::function<Image(const std::string& id)>;

/// Embeds every distinct id once, in batches.
std::map<std::string, EmbeddingVector> embed_ids(const ClassifierModel& model,
                                                 const std::vector<std::string>& ids,
                                                 const ImageLoader& loader);

std::vector<LabeledDistance> pair_distances(const std::vector<VerificationPair>& pairs,
                                            const std::map<std::string, EmbeddingVector>& embeddings);

struct SetAccuracy {
  std::size_t pairs = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
};

struct PathwayResult {
  std::string model_digest;
  ThresholdModel threshold;
  std::map<std::string, SetAccuracy> sets;
};

struct VerificationReport {
  PathwayResult fine_tuned;
  std::optional<PathwayResult> frozen;  // upstream model without fine-tuning

  nlohmann::json to_json() const;
};

/// Calibrates on calibration_pairs (never on the evaluated sets) and scores
/// each named set. A baseline model adds the frozen-feature pathway.
VerificationReport evaluate_verification(
    const ClassifierModel& model, const std::map<std::string, std::vector<VerificationPair>>& sets,
    const std::vector<VerificationPair>& calibration_pairs, const ImageLoader& loader,
    const ClassifierModel* frozen_model = nullptr);

/// Deterministic balanced same/different pairs drawn from labeled records.
std::vector<VerificationPair> sample_pairs(const std::vector<ImageRecord>& records,
                                           Granularity granularity, std::size_t count,
                                           std::uint64_t seed);

}  // namespace mmcr
