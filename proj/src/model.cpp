#include "mmcr/model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <thread>

#include <fmt/format.h>

#include "mmcr/digest.hpp"
#include "mmcr/error.hpp"
#include "mmcr/preprocess.hpp"

namespace mmcr {

namespace {

constexpr std::size_t kStatisticsChunk = 64;
constexpr std::size_t kInferenceChunk = 16;

// Runs fn(start, count) over consecutive chunks of [0, total) on up to
// hardware_concurrency threads. Each chunk writes a disjoint output range.
template <typename Fn>
void for_each_chunk(std::size_t total, Fn&& fn) {
  const std::size_t chunks = (total + kInferenceChunk - 1) / kInferenceChunk;
  const std::size_t workers =
      std::min<std::size_t>(chunks, std::max(1U, std::thread::hardware_concurrency()));
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t c = next++; c < chunks; c = next++) {
      const std::size_t start = c * kInferenceChunk;
      fn(start, std::min(kInferenceChunk, total - start));
    }
  };
  if (workers <= 1) {
    work();
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t i = 1; i < workers; ++i) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
}

std::vector<const Image*> pointers(std::span<const Image> images) {
  std::vector<const Image*> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(&img);
  return out;
}

Image augment(const Image& src, const TrainConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool flip = config.horizontal_flip && unit(rng) < 0.5;
  const double gain =
      config.brightness_jitter > 0.0 ? 1.0 + config.brightness_jitter * (2.0 * unit(rng) - 1.0) : 1.0;
  if (!flip && gain == 1.0) return src;
  Image out(src.width, src.height);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      const int sx = flip ? src.width - 1 - x : x;
      for (int c = 0; c < Image::kChannels; ++c) {
        const double v = src.at(sx, y, c) * gain;
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

double accuracy(const nn::Network& net, const LabeledImages& data) {
  if (data.size() == 0) return 0.0;
  auto ptrs = pointers(data.images);
  std::size_t correct = 0;
  for (std::size_t start = 0; start < ptrs.size(); start += kInferenceChunk) {
    auto chunk = std::span<const Image* const>(ptrs).subspan(
        start, std::min(kInferenceChunk, ptrs.size() - start));
    nn::Matrix p = net.predict(nn::to_input(chunk));
    for (Eigen::Index b = 0; b < p.cols(); ++b) {
      Eigen::Index arg = 0;
      p.col(b).maxCoeff(&arg);
      if (arg == data.labels[start + static_cast<std::size_t>(b)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

void check_training_inputs(const LabeledImages& data, const LabelVocabulary& vocabulary,
                           int input_size) {
  if (data.size() == 0) fail(ErrorKind::usage, "training split is empty");
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] < 0 || static_cast<std::size_t>(data.labels[i]) >= vocabulary.size()) {
      fail(ErrorKind::data, fmt::format("record '{}' has a label outside the vocabulary", data.ids[i]));
    }
    if (data.images[i].width != input_size || data.images[i].height != input_size) {
      fail(ErrorKind::shape, fmt::format("record '{}' is {}x{}, expected {}x{}", data.ids[i],
                                         data.images[i].width, data.images[i].height, input_size,
                                         input_size));
    }
  }
}

TrainingLog run_training(nn::Network& net, const LabeledImages& train_set,
                         const LabeledImages* heldout, const TrainConfig& config) {
  TrainingLog log;
  log.config_digest = config.digest();
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  auto grads = net.zero_gradients();
  std::vector<nn::Matrix> velocity = net.zero_gradients();
  auto train_ptrs = pointers(train_set.images);

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.learning_rate_at(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min<std::size_t>(config.batch_size, order.size() - start);
      std::vector<Image> batch;
      std::vector<int> labels;
      batch.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = order[start + i];
        batch.push_back(augment(train_set.images[idx], config, rng));
        labels.push_back(train_set.labels[idx]);
      }
      auto trace = net.forward_train(nn::to_input(batch));
      loss_sum += nn::Network::loss(trace, labels) * static_cast<double>(n);
      for (std::size_t b = 0; b < n; ++b) {
        Eigen::Index arg = 0;
        trace.probabilities.col(static_cast<Eigen::Index>(b)).maxCoeff(&arg);
        if (arg == labels[b]) ++correct;
      }
      for (auto& g : grads) g.setZero();
      net.backward(trace, labels, grads);
      auto& tensors = net.tensors();
      for (std::size_t t = 0; t < tensors.size(); ++t) {
        if (!tensors[t].trainable) continue;
        velocity[t] = config.momentum * velocity[t] + grads[t] + config.weight_decay * tensors[t].value;
        tensors[t].value -= lr * velocity[t];
      }
    }
    net.estimate_population_statistics(train_ptrs, kStatisticsChunk);
    EpochLog entry;
    entry.epoch = epoch + 1;
    entry.learning_rate = lr;
    entry.train_loss = loss_sum / static_cast<double>(train_set.size());
    entry.train_accuracy = static_cast<double>(correct) / static_cast<double>(train_set.size());
    if (heldout && heldout->size() > 0) entry.heldout_accuracy = accuracy(net, *heldout);
    log.epochs.push_back(entry);
  }
  if (config.epochs == 0) net.estimate_population_statistics(train_ptrs, kStatisticsChunk);
  return log;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  std::string_view take(std::size_t n) {
    if (bytes_.size() - pos_ < n) fail(ErrorKind::corruption, "model file is truncated");
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint64_t uint(int width) {
    auto raw = take(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = width; i-- > 0;) v = (v << 8) | static_cast<unsigned char>(raw[i]);
    return v;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

nlohmann::json architecture_json(const nn::Architecture& a) {
  return {{"preset", nn::to_string(a.preset)},
          {"input_size", a.input_size},
          {"embedding_dim", a.embedding_dim},
          {"num_classes", a.num_classes}};
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) fail(ErrorKind::usage, "epochs must be positive");
  if (batch_size < 1) fail(ErrorKind::usage, "batch size must be positive");
  if (learning_rate < 0.0) fail(ErrorKind::usage, "learning rate must be non-negative");
  if (momentum < 0.0 || momentum >= 1.0) fail(ErrorKind::usage, "momentum must be in [0,1)");
  if (weight_decay < 0.0) fail(ErrorKind::usage, "weight decay must be non-negative");
  if (lr_step_epochs < 0) fail(ErrorKind::usage, "lr step must be non-negative");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) fail(ErrorKind::usage, "lr decay must be in (0,1]");
  if (brightness_jitter < 0.0 || brightness_jitter >= 1.0) {
    fail(ErrorKind::usage, "brightness jitter must be in [0,1)");
  }
  if (embedding_dim < 1) fail(ErrorKind::usage, "embedding dimension must be positive");
}

double TrainConfig::learning_rate_at(int epoch) const {
  if (lr_step_epochs <= 0) return learning_rate;
  return learning_rate * std::pow(lr_decay, epoch / lr_step_epochs);
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"lr_step_epochs", lr_step_epochs},
          {"lr_decay", lr_decay},
          {"seed", seed},
          {"horizontal_flip", horizontal_flip},
          {"brightness_jitter", brightness_jitter},
          {"preset", nn::to_string(preset)},
          {"embedding_dim", embedding_dim}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lr_step_epochs = j.value("lr_step_epochs", c.lr_step_epochs);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.seed = j.value("seed", c.seed);
    c.horizontal_flip = j.value("horizontal_flip", c.horizontal_flip);
    c.brightness_jitter = j.value("brightness_jitter", c.brightness_jitter);
    c.preset = nn::parse_preset(j.value("preset", std::string(nn::to_string(c.preset))));
    c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::usage, fmt::format("invalid training config: {}", e.what()));
  }
  return c;
}

std::string TrainConfig::digest() const { return sha256_hex(to_json().dump()); }

std::string ClassifierModel::digest() const { return sha256_hex(serialize_model(*this)); }

Prediction make_prediction(const LabelVocabulary& vocabulary, std::span<const double> probabilities) {
  Prediction p;
  p.ranked.reserve(probabilities.size());
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    p.ranked.push_back({vocabulary.name(i), i, probabilities[i]});
  }
  std::stable_sort(p.ranked.begin(), p.ranked.end(),
                   [](const ScoredClass& a, const ScoredClass& b) { return a.confidence > b.confidence; });
  return p;
}

std::string TrainingLog::to_jsonl() const {
  std::string out;
  nlohmann::json header = {{"mode", mode}, {"config_digest", config_digest}};
  header["parent_digest"] = parent_digest ? nlohmann::json(*parent_digest) : nlohmann::json(nullptr);
  out += header.dump() + "\n";
  for (const auto& e : epochs) {
    nlohmann::json j = {{"epoch", e.epoch},
                        {"learning_rate", e.learning_rate},
                        {"train_loss", e.train_loss},
                        {"train_accuracy", e.train_accuracy}};
    if (e.heldout_accuracy) j["heldout_accuracy"] = *e.heldout_accuracy;
    out += j.dump() + "\n";
  }
  return out;
}

LabeledImages load_labeled(const std::vector<ImageRecord>& records, Split split,
                           const LabelVocabulary& vocabulary, const std::filesystem::path& base_dir,
                           std::optional<int> input_size, bool masked) {
  LabeledImages out;
  for (const auto& r : records) {
    if (r.split != split) continue;
    auto label = class_label(r, vocabulary.granularity());
    if (!label) {
      fail(ErrorKind::data, fmt::format("record '{}' has no {} label", r.id,
                                        to_string(vocabulary.granularity())));
    }
    auto index = vocabulary.index_of(*label);
    if (!index) {
      fail(ErrorKind::data,
           fmt::format("record '{}' has label '{}' outside the vocabulary", r.id, *label));
    }
    out.ids.push_back(r.id);
    out.images.push_back(input_size ? load_model_input(r, base_dir, *input_size, masked)
                                    : read_image(resolve_path(r.path, base_dir)));
    out.labels.push_back(static_cast<int>(*index));
  }
  return out;
}

TrainResult train(const LabeledImages& train_set, const LabeledImages* heldout,
                  const LabelVocabulary& vocabulary, std::map<std::string, ClassParts> parts,
                  const TrainConfig& config) {
  config.validate();
  if (vocabulary.size() == 0) fail(ErrorKind::usage, "vocabulary is empty");
  if (train_set.size() == 0) fail(ErrorKind::usage, "training split is empty");
  const int input_size = train_set.images.front().width;
  check_training_inputs(train_set, vocabulary, input_size);
  if (heldout) check_training_inputs(*heldout, vocabulary, input_size);

  nn::Architecture arch;
  arch.preset = config.preset;
  arch.input_size = input_size;
  arch.embedding_dim = config.embedding_dim;
  arch.num_classes = static_cast<int>(vocabulary.size());

  TrainResult result;
  result.model.vocabulary = vocabulary;
  result.model.class_parts = std::move(parts);
  result.model.network = nn::Network(arch, config.seed);
  result.model.config_digest = config.digest();
  result.log = run_training(result.model.network, train_set, heldout, config);
  result.log.mode = "train";
  return result;
}

TrainResult train(const std::vector<ImageRecord>& records, const std::filesystem::path& base_dir,
                  const LabelVocabulary& vocabulary, const TrainConfig& config) {
  auto train_set = load_labeled(records, Split::train, vocabulary, base_dir);
  auto heldout = load_labeled(records, Split::test, vocabulary, base_dir);
  return train(train_set, heldout.size() ? &heldout : nullptr, vocabulary,
               class_parts(records, vocabulary.granularity()), config);
}

TrainResult fine_tune(const ClassifierModel& parent, const LabeledImages& train_set,
                      const LabeledImages* heldout, const LabelVocabulary& vocabulary,
                      std::map<std::string, ClassParts> parts, const TrainConfig& config) {
  config.validate();
  if (vocabulary.size() == 0) fail(ErrorKind::usage, "vocabulary is empty");
  check_training_inputs(train_set, vocabulary, parent.input_size());
  if (heldout) check_training_inputs(*heldout, vocabulary, parent.input_size());

  TrainResult result;
  result.model.network = parent.network;
  if (!(vocabulary == parent.vocabulary)) {
    result.model.network.reset_head(static_cast<int>(vocabulary.size()), config.seed);
  }
  result.model.vocabulary = vocabulary;
  result.model.class_parts = std::move(parts);
  result.model.config_digest = config.digest();
  result.model.parent_digest = parent.digest();
  result.log = run_training(result.model.network, train_set, heldout, config);
  result.log.mode = "fine_tune";
  result.log.parent_digest = result.model.parent_digest;
  return result;
}

nn::Matrix predict_probabilities(const ClassifierModel& model, std::span<const Image> images) {
  auto ptrs = pointers(images);
  nn::Matrix out(static_cast<Eigen::Index>(model.vocabulary.size()),
                 static_cast<Eigen::Index>(images.size()));
  for_each_chunk(ptrs.size(), [&](std::size_t start, std::size_t n) {
    auto chunk = std::span<const Image* const>(ptrs).subspan(start, n);
    out.middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) =
        model.network.predict(nn::to_input(chunk));
  });
  return out;
}

std::vector<Prediction> predict_batch(const ClassifierModel& model, std::span<const Image> images) {
  nn::Matrix p = predict_probabilities(model, images);
  std::vector<Prediction> out;
  out.reserve(images.size());
  std::vector<double> column(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index b = 0; b < p.cols(); ++b) {
    for (Eigen::Index k = 0; k < p.rows(); ++k) column[static_cast<std::size_t>(k)] = p(k, b);
    out.push_back(make_prediction(model.vocabulary, column));
  }
  return out;
}

std::vector<EmbeddingVector> extract_features(const ClassifierModel& model,
                                              std::span<const Image> images) {
  auto ptrs = pointers(images);
  std::vector<EmbeddingVector> out(images.size());
  for_each_chunk(ptrs.size(), [&](std::size_t start, std::size_t n) {
    auto chunk = std::span<const Image* const>(ptrs).subspan(start, n);
    nn::Matrix e = model.network.embed(nn::to_input(chunk));
    for (Eigen::Index b = 0; b < e.cols(); ++b) {
      auto& v = out[start + static_cast<std::size_t>(b)];
      v.resize(static_cast<std::size_t>(e.rows()));
      for (Eigen::Index k = 0; k < e.rows(); ++k) v[static_cast<std::size_t>(k)] = e(k, b);
    }
  });
  return out;
}

std::vector<Prediction> classify_embeddings(const ClassifierModel& model,
                                            std::span<const EmbeddingVector> embeddings) {
  const auto dim = static_cast<Eigen::Index>(model.embedding_dim());
  nn::Matrix e(dim, static_cast<Eigen::Index>(embeddings.size()));
  for (std::size_t b = 0; b < embeddings.size(); ++b) {
    if (static_cast<Eigen::Index>(embeddings[b].size()) != dim) {
      fail(ErrorKind::shape, fmt::format("embedding has dimension {}, model expects {}",
                                         embeddings[b].size(), dim));
    }
    for (Eigen::Index k = 0; k < dim; ++k) e(k, static_cast<Eigen::Index>(b)) = embeddings[b][static_cast<std::size_t>(k)];
  }
  nn::Matrix p = model.network.classify_embeddings(e);
  std::vector<Prediction> out;
  std::vector<double> column(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index b = 0; b < p.cols(); ++b) {
    for (Eigen::Index k = 0; k < p.rows(); ++k) column[static_cast<std::size_t>(k)] = p(k, b);
    out.push_back(make_prediction(model.vocabulary, column));
  }
  return out;
}

std::string serialize_container(const ModelContainer& c) {
  std::string out = "MMCR";
  put_u32(out, c.version);
  put_u32(out, static_cast<std::uint32_t>(c.vocabulary_digest.size()));
  out += c.vocabulary_digest;
  const std::string meta = c.metadata.dump();
  put_u64(out, meta.size());
  out += meta;
  put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    out.push_back(t.trainable ? 1 : 0);
    put_u32(out, static_cast<std::uint32_t>(t.value.rows()));
    put_u32(out, static_cast<std::uint32_t>(t.value.cols()));
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      std::uint64_t bits = 0;
      std::memcpy(&bits, t.value.data() + i, sizeof(bits));
      put_u64(out, bits);
    }
  }
  const std::string checksum = sha256_hex(out);
  out += checksum;
  return out;
}

ModelContainer parse_container(std::string_view bytes) {
  constexpr std::size_t kChecksumSize = 64;
  if (bytes.size() < 8 + kChecksumSize) fail(ErrorKind::corruption, "model file is truncated");
  if (bytes.substr(0, 4) != "MMCR") fail(ErrorKind::corruption, "model file has bad magic bytes");
  const auto body = bytes.substr(0, bytes.size() - kChecksumSize);
  if (sha256_hex(body) != bytes.substr(bytes.size() - kChecksumSize)) {
    fail(ErrorKind::corruption, "model file checksum mismatch (truncated or damaged)");
  }
  Reader in(body);
  in.take(4);
  ModelContainer c;
  c.version = static_cast<std::uint32_t>(in.uint(4));
  if (c.version != kModelFormatVersion) {
    fail(ErrorKind::schema, fmt::format("unsupported model format version {} (expected {})",
                                        c.version, kModelFormatVersion));
  }
  c.vocabulary_digest = std::string(in.take(in.uint(4)));
  try {
    c.metadata = nlohmann::json::parse(in.take(in.uint(8)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::corruption, fmt::format("model metadata is not valid JSON: {}", e.what()));
  }
  const auto count = in.uint(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    nn::Tensor t;
    t.name = std::string(in.take(in.uint(4)));
    t.trainable = in.take(1)[0] != 0;
    const auto rows = static_cast<Eigen::Index>(in.uint(4));
    const auto cols = static_cast<Eigen::Index>(in.uint(4));
    if (static_cast<std::size_t>(rows * cols) * 8 > in.remaining()) {
      fail(ErrorKind::corruption, "model file is truncated");
    }
    t.value.resize(rows, cols);
    for (Eigen::Index k = 0; k < t.value.size(); ++k) {
      const std::uint64_t bits = in.uint(8);
      std::memcpy(t.value.data() + k, &bits, sizeof(bits));
    }
    c.tensors.push_back(std::move(t));
  }
  if (in.remaining() != 0) fail(ErrorKind::corruption, "trailing bytes in model file");
  return c;
}

std::string serialize_model(const ClassifierModel& model) {
  ModelContainer c;
  c.vocabulary_digest = model.vocabulary.digest();
  nlohmann::json parts = nlohmann::json::object();
  for (const auto& [name, p] : model.class_parts) {
    nlohmann::json j = nlohmann::json::object();
    if (p.make) j["make"] = *p.make;
    if (p.model) j["model"] = *p.model;
    if (p.year) j["year"] = *p.year;
    if (p.color) j["color"] = *p.color;
    parts[name] = j;
  }
  c.metadata = {{"vocabulary",
                 {{"granularity", to_string(model.vocabulary.granularity())},
                  {"classes", model.vocabulary.classes()}}},
                {"class_parts", parts},
                {"architecture", architecture_json(model.network.architecture())},
                {"config_digest", model.config_digest}};
  c.metadata["parent_digest"] =
      model.parent_digest ? nlohmann::json(*model.parent_digest) : nlohmann::json(nullptr);
  c.tensors = model.network.tensors();
  return serialize_container(c);
}

ClassifierModel deserialize_model(std::string_view bytes) {
  ModelContainer c = parse_container(bytes);
  const auto& meta = c.metadata;
  if (!meta.is_object() || !meta.contains("vocabulary") || !meta["vocabulary"].is_object() ||
      !meta["vocabulary"].contains("classes")) {
    fail(ErrorKind::schema, fmt::format("model metadata lacks a vocabulary; not a format version {} "
                                        "classifier",
                                        kModelFormatVersion));
  }
  ClassifierModel model;
  try {
    const auto& vocab = meta.at("vocabulary");
    model.vocabulary = LabelVocabulary(vocab.at("classes").get<std::vector<std::string>>(),
                                       parse_granularity(vocab.at("granularity").get<std::string>()));
    if (model.vocabulary.digest() != c.vocabulary_digest) {
      fail(ErrorKind::corruption, "vocabulary digest mismatch");
    }
    for (const auto& [name, j] : meta.at("class_parts").items()) {
      ClassParts p;
      if (j.contains("make")) p.make = j["make"].get<std::string>();
      if (j.contains("model")) p.model = j["model"].get<std::string>();
      if (j.contains("year")) p.year = j["year"].get<int>();
      if (j.contains("color")) p.color = j["color"].get<std::string>();
      model.class_parts[name] = p;
    }
    const auto& a = meta.at("architecture");
    nn::Architecture arch;
    arch.preset = nn::parse_preset(a.at("preset").get<std::string>());
    arch.input_size = a.at("input_size").get<int>();
    arch.embedding_dim = a.at("embedding_dim").get<int>();
    arch.num_classes = a.at("num_classes").get<int>();
    if (static_cast<std::size_t>(arch.num_classes) != model.vocabulary.size()) {
      fail(ErrorKind::corruption, "output size does not match vocabulary size");
    }
    model.network = nn::Network(arch, 0);
    model.config_digest = meta.at("config_digest").get<std::string>();
    if (!meta.at("parent_digest").is_null()) {
      model.parent_digest = meta.at("parent_digest").get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, fmt::format("model metadata is incomplete: {}", e.what()));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::corruption) throw;
    fail(ErrorKind::schema, fmt::format("model metadata is invalid: {}", e.what()));
  }
  auto& tensors = model.network.tensors();
  if (tensors.size() != c.tensors.size()) fail(ErrorKind::corruption, "tensor count mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].name != c.tensors[i].name || tensors[i].value.rows() != c.tensors[i].value.rows() ||
        tensors[i].value.cols() != c.tensors[i].value.cols()) {
      fail(ErrorKind::corruption, fmt::format("tensor '{}' does not match the architecture",
                                              c.tensors[i].name));
    }
    tensors[i].value = std::move(c.tensors[i].value);
  }
  return model;
}

void save_model(const ClassifierModel& model, const std::filesystem::path& path) {
  const std::string bytes = serialize_model(model);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!file) fail(ErrorKind::io, fmt::format("cannot write model {}", path.string()));
}

ClassifierModel load_model(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) fail(ErrorKind::io, fmt::format("cannot open model {}", path.string()));
  std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace mmcr
