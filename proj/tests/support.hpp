#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <unistd.h>

#include "mmcr/image.hpp"
#include "mmcr/manifest.hpp"
#include "mmcr/model.hpp"
#include "mmcr/preprocess.hpp"
#include "mmcr/synthetic.hpp"

namespace mmcr::testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("mmcr-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
}

inline Image random_image(int w, int h, std::mt19937_64& rng) {
  Image img(w, h);
  std::uniform_int_distribution<int> px(0, 255);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(px(rng));
  return img;
}

/// Synthetic samples aligned on their annotated boxes and resized to size,
/// as the preprocess step would write them.
inline LabeledImages aligned_set(const std::vector<SyntheticSample>& samples, Split split,
                                    const LabelVocabulary& vocabulary, int size, bool masked) {
  PreprocessConfig config;
  config.target_size = size;
  config.apply_mask = masked;
  LabeledImages out;
  for (const auto& s : samples) {
    if (s.record.split != split) continue;
    auto aligned = align_image(s.image, s.record.bbox, config, FullFrameDetector{});
    out.ids.push_back(s.record.id);
    out.images.push_back(masked ? *aligned.masked : aligned.aligned);
    out.labels.push_back(static_cast<int>(
        *vocabulary.index_of(*class_label(s.record, vocabulary.granularity()))));
  }
  return out;
}

/// Tiny model trained on synthetic data; shared per process to keep suites fast.
struct TrainedFixture {
  std::vector<SyntheticSample> samples;
  LabelVocabulary vocabulary;
  ClassifierModel model;
  LabeledImages heldout;
};

inline TrainedFixture train_fixture(bool color_mode, int n_per_class, int size, int epochs,
                                    int lr_step) {
  TrainedFixture f;
  SyntheticOptions o;
  o.color_mode = color_mode;
  o.n_classes = 10;
  o.n_per_class = n_per_class;
  f.samples = render_synthetic(o);
  std::vector<ImageRecord> records;
  for (const auto& s : f.samples) records.push_back(s.record);
  const Granularity g = color_mode ? Granularity::color : Granularity::make_model;
  f.vocabulary = LabelVocabulary::from_records(records, g);
  auto train_set = aligned_set(f.samples, Split::train, f.vocabulary, size, color_mode);
  f.heldout = aligned_set(f.samples, Split::test, f.vocabulary, size, color_mode);
  TrainConfig config;
  config.epochs = epochs;
  config.lr_step_epochs = lr_step;
  config.horizontal_flip = color_mode;
  config.embedding_dim = 64;
  f.model = train(train_set, &f.heldout, f.vocabulary, class_parts(records, g), config).model;
  return f;
}

}  // namespace mmcr::testing
