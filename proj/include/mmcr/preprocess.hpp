#pragma once

#include <atomic>
#include <filesystem>
#include <optional>
#include <vector>

#include "mmcr/image.hpp"
#include "mmcr/manifest.hpp"

namespace mmcr {

struct Detection {
  BoundingBox box;
  double confidence = 1.0;
};

/// Vehicle detector capability: boxes inside the image with confidences in [0,1].
class Detector {
 public:
  virtual ~Detector() = default;
  virtual std::vector<Detection> detect(const Image& image) const = 0;
};

/// Returns a known box (e.g. a dataset annotation) clipped to the image.
class GroundTruthDetector final : public Detector {
 public:
  explicit GroundTruthDetector(std::vector<BoundingBox> boxes) : boxes_(std::move(boxes)) {}
  std::vector<Detection> detect(const Image& image) const override;

 private:
  std::vector<BoundingBox> boxes_;
};

/// Treats the whole frame as the vehicle.
class FullFrameDetector final : public Detector {
 public:
  std::vector<Detection> detect(const Image& image) const override;
};

enum class MaskFill { black, crop_mean };

struct PreprocessConfig {
  double margin_fraction = 0.10;
  int target_size = 224;
  MaskFill mask_fill = MaskFill::black;
  bool apply_mask = false;

  void validate() const;
};

/// Moves every side outward by margin_fraction of the box's own width
/// (left/right) or height (top/bottom), rounds to the nearest pixel and
/// clamps to the image.
BoundingBox expand_box(const BoundingBox& box, double margin_fraction, int image_width,
                       int image_height);

/// Bilinear resample of the boxed region to target_size x target_size.
/// Sample positions use pixel centers: src = box_min + (dst + 0.5) * box_extent / target - 0.5,
/// clamped to the box, so an identity-sized full-frame crop reproduces the input.
Image crop_and_resize(const Image& image, const BoundingBox& box, int target_size);

/// True when pixel (x, y) of a width x height image lies inside the inscribed ellipse,
/// judged at the pixel center.
bool inside_inscribed_ellipse(int x, int y, int width, int height);

/// Replaces pixels outside the inscribed ellipse with the fill value. crop_mean
/// uses the per-channel mean of the pixels inside the ellipse, so masking twice
/// is a no-op.
Image elliptical_mask(const Image& image, MaskFill fill);

enum class BoxOrigin { annotation, detector, full_frame };

struct AlignedImage {
  Image aligned;
  std::optional<Image> masked;
  BoundingBox source_box;    // box before margin expansion
  BoundingBox crop_box;      // box actually cropped
  BoxOrigin origin = BoxOrigin::annotation;

  bool unaligned() const { return origin == BoxOrigin::full_frame; }
};

/// Annotation box wins; otherwise the detector's most confident box; otherwise the full frame.
AlignedImage align_image(const Image& image, const std::optional<BoundingBox>& annotation,
                         const PreprocessConfig& config, const Detector& detector);

AlignedImage preprocess_record(const ImageRecord& record, const PreprocessConfig& config,
                               const Detector& detector,
                               const std::filesystem::path& base_dir = {});

}  // namespace mmcr

namespace mmcr {

/// Image of a record at a model's input size. Records already at that size
/// (preprocessed manifests) are used as-is; anything else is aligned with
/// the default margin and resized, and optionally masked.
Image load_model_input(const ImageRecord& record, const std::filesystem::path& base_dir,
                       int input_size, bool masked = false);

}  // namespace mmcr
