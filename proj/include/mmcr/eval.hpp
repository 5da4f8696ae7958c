#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmcr/model.hpp"
#include "mmcr/verify.hpp"

namespace mmcr {

/// Fraction of samples whose true class is among the k highest-ranked classes.
/// Throws ErrorKind::usage for k < 1, length mismatch, or unknown labels.
double top_k_accuracy(std::span<const Prediction> predictions,
                      std::span<const std::string> true_labels, std::size_t k);

struct ConfusionMatrix {
  std::vector<std::string> classes;
  std::vector<std::vector<std::size_t>> counts;  // [truth][top-1 prediction]

  std::size_t total() const;
  std::size_t trace() const;
  double accuracy() const;
};

ConfusionMatrix confusion_matrix(std::span<const Prediction> predictions,
                                 std::span<const std::string> true_labels,
                                 const LabelVocabulary& vocabulary);

enum class Protocol { stanford, compcars_cls, compcars_verif, generic };
Protocol parse_protocol(std::string_view text);
std::string_view to_string(Protocol protocol);

/// Published accuracies shipped for context; never recomputed.
struct ReferenceRow {
  std::string method;
  std::vector<double> accuracies;  // percent, in the protocol's column order
};
std::vector<std::string> protocol_columns(Protocol protocol);
std::vector<ReferenceRow> reference_rows(Protocol protocol);

struct BenchmarkReport {
  nlohmann::json results;  // machine-readable
  std::string table;       // human-readable
};

/// Classification protocols (stanford, compcars_cls, generic) over the
/// test split of a manifest. Throws ErrorKind::usage when the model's
/// vocabulary granularity does not fit the protocol.
BenchmarkReport benchmark_report(const ClassifierModel& model, const std::vector<ImageRecord>& records,
                                 const std::filesystem::path& base_dir, Protocol protocol);

/// Verification protocol (compcars_verif) from an evaluated report.
BenchmarkReport benchmark_report(const VerificationReport& report, std::size_t calibration_pairs);

}  // namespace mmcr
