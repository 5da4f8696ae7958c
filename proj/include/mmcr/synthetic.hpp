#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "mmcr/image.hpp"
#include "mmcr/manifest.hpp"

namespace mmcr {

struct SyntheticOptions {
  int n_classes = 10;
  int n_per_class = 20;
  bool color_mode = false;
  std::uint64_t seed = 7;
  int image_height = 64;  // canvas is 5:4 landscape
  int class_offset = 0;   // first shape family index (make-model mode)

  void validate() const;
};

/// Number of shape families that can be rendered without repeating.
inline constexpr int kBaseShapeFamilies = 16;

/// Binary silhouette of a shape family over normalized coordinates in [-1,1]^2.
bool shape_contains(int family, double u, double v);

struct SyntheticSample {
  ImageRecord record;
  Image image;
};

/// Deterministic in the options. Records are ordered class by class; within a
/// class the first floor(0.8 * n) instances are train, the rest test.
/// Make-model mode labels make="synthetic", model="class_<k>" (class name
/// "synthetic_class_<k>"); color mode labels only the color.
std::vector<SyntheticSample> render_synthetic(const SyntheticOptions& options);

/// Renders, writes images/<id>.png under out_dir and manifest.tsv; returns the records
/// with paths relative to out_dir.
std::vector<ImageRecord> generate_synthetic(const SyntheticOptions& options,
                                            const std::filesystem::path& out_dir);

}  // namespace mmcr
