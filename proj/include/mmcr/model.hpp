#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "mmcr/image.hpp"
#include "mmcr/manifest.hpp"
#include "mmcr/network.hpp"

namespace mmcr {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 16;
  double learning_rate = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int lr_step_epochs = 7;  // 0 disables step decay
  double lr_decay = 0.1;
  std::uint64_t seed = 1;
  bool horizontal_flip = true;
  double brightness_jitter = 0.0;  // max relative change; 0 disables
  nn::Preset preset = nn::Preset::tiny;
  int embedding_dim = 256;

  void validate() const;
  double learning_rate_at(int epoch) const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  std::string digest() const;
};

struct ClassifierModel {
  LabelVocabulary vocabulary;
  std::map<std::string, ClassParts> class_parts;
  nn::Network network;
  std::string config_digest;
  std::optional<std::string> parent_digest;

  int input_size() const { return network.architecture().input_size; }
  int embedding_dim() const { return network.architecture().embedding_dim; }
  /// SHA-256 of the serialized model.
  std::string digest() const;
};

struct ScoredClass {
  std::string name;
  std::size_t index = 0;
  double confidence = 0.0;
};

/// Full vocabulary, descending confidence, ties by vocabulary index.
struct Prediction {
  std::vector<ScoredClass> ranked;

  const ScoredClass& top() const { return ranked.front(); }
};

Prediction make_prediction(const LabelVocabulary& vocabulary, std::span<const double> probabilities);

using EmbeddingVector = std::vector<double>;

struct EpochLog {
  int epoch = 0;
  double learning_rate = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> heldout_accuracy;
};

struct TrainingLog {
  std::string mode;  // "train" or "fine_tune"
  std::optional<std::string> parent_digest;
  std::string config_digest;
  std::vector<EpochLog> epochs;

  /// One JSON object per line; doubles printed round-trip exact.
  std::string to_jsonl() const;
};

struct TrainResult {
  ClassifierModel model;
  TrainingLog log;
};

/// Images and integer labels ready for training or evaluation.
struct LabeledImages {
  std::vector<std::string> ids;
  std::vector<Image> images;
  std::vector<int> labels;

  std::size_t size() const { return images.size(); }
};

/// Loads one split of a manifest against a vocabulary. Records whose label is
/// missing or outside the vocabulary abort with ErrorKind::data naming the record.
/// With an input size, images go through load_model_input; otherwise they are
/// read as stored.
LabeledImages load_labeled(const std::vector<ImageRecord>& records, Split split,
                           const LabelVocabulary& vocabulary,
                           const std::filesystem::path& base_dir,
                           std::optional<int> input_size = std::nullopt, bool masked = false);

TrainResult train(const LabeledImages& train_set, const LabeledImages* heldout,
                  const LabelVocabulary& vocabulary, std::map<std::string, ClassParts> parts,
                  const TrainConfig& config);

/// Convenience: loads train/test splits of a manifest then trains.
TrainResult train(const std::vector<ImageRecord>& records, const std::filesystem::path& base_dir,
                  const LabelVocabulary& vocabulary, const TrainConfig& config);

/// Continues training a parent model. A changed vocabulary re-initializes the
/// output stage; feature stages are kept.
TrainResult fine_tune(const ClassifierModel& parent, const LabeledImages& train_set,
                      const LabeledImages* heldout, const LabelVocabulary& vocabulary,
                      std::map<std::string, ClassParts> parts, const TrainConfig& config);

std::vector<Prediction> predict_batch(const ClassifierModel& model, std::span<const Image> images);
/// [classes x batch] probabilities in vocabulary order.
nn::Matrix predict_probabilities(const ClassifierModel& model, std::span<const Image> images);
std::vector<EmbeddingVector> extract_features(const ClassifierModel& model,
                                              std::span<const Image> images);
/// Output stage applied to stored embeddings.
std::vector<Prediction> classify_embeddings(const ClassifierModel& model,
                                            std::span<const EmbeddingVector> embeddings);

// Model container: "MMCR" | u32 version | u32 len + vocabulary digest |
// u64 len + metadata JSON | u32 tensor count + tensors | 32-byte SHA-256 of all preceding bytes.
inline constexpr std::uint32_t kModelFormatVersion = 1;

struct ModelContainer {
  std::uint32_t version = kModelFormatVersion;
  std::string vocabulary_digest;
  nlohmann::json metadata;
  std::vector<nn::Tensor> tensors;
};

std::string serialize_container(const ModelContainer& container);
/// Throws ErrorKind::corruption on truncation, bad magic or checksum mismatch,
/// ErrorKind::schema on an unsupported version.
ModelContainer parse_container(std::string_view bytes);

std::string serialize_model(const ClassifierModel& model);
ClassifierModel deserialize_model(std::string_view bytes);
void save_model(const ClassifierModel& model, const std::filesystem::path& path);
ClassifierModel load_model(const std::filesystem::path& path);

}  // namespace mmcr
