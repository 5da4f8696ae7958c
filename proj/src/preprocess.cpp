#include "mmcr/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "mmcr/error.hpp"

namespace mmcr {

std::vector<Detection> GroundTruthDetector::detect(const Image& image) const {
  std::vector<Detection> out;
  for (const auto& b : boxes_) {
    BoundingBox clipped{std::max(b.x_min, 0), std::max(b.y_min, 0), std::min(b.x_max, image.width),
                        std::min(b.y_max, image.height)};
    if (clipped.valid()) out.push_back({clipped, 1.0});
  }
  return out;
}

std::vector<Detection> FullFrameDetector::detect(const Image& image) const {
  if (image.empty()) return {};
  return {{BoundingBox{0, 0, image.width, image.height}, 1.0}};
}

void PreprocessConfig::validate() const {
  if (!(margin_fraction >= 0.0 && margin_fraction < 1.0)) {
    fail(ErrorKind::usage, fmt::format("margin fraction must be in [0,1), got {}", margin_fraction));
  }
  if (target_size < 8) {
    fail(ErrorKind::usage, fmt::format("target size must be >= 8, got {}", target_size));
  }
}

BoundingBox expand_box(const BoundingBox& box, double margin_fraction, int image_width,
                       int image_height) {
  if (!box.valid()) fail(ErrorKind::data, fmt::format("degenerate box {}", format_bbox(box)));
  if (!box.within(image_width, image_height)) {
    fail(ErrorKind::data, fmt::format("box {} exceeds image {}x{}", format_bbox(box), image_width,
                                      image_height));
  }
  if (!(margin_fraction >= 0.0 && margin_fraction < 1.0)) {
    fail(ErrorKind::usage, fmt::format("margin fraction must be in [0,1), got {}", margin_fraction));
  }
  const double dx = margin_fraction * box.width();
  const double dy = margin_fraction * box.height();
  // Rounding an outward shift of an integer coordinate never crosses it, so
  // the result always contains the input box.
  BoundingBox out{
      static_cast<int>(std::lround(box.x_min - dx)), static_cast<int>(std::lround(box.y_min - dy)),
      static_cast<int>(std::lround(box.x_max + dx)), static_cast<int>(std::lround(box.y_max + dy))};
  out.x_min = std::clamp(out.x_min, 0, image_width);
  out.y_min = std::clamp(out.y_min, 0, image_height);
  out.x_max = std::clamp(out.x_max, 0, image_width);
  out.y_max = std::clamp(out.y_max, 0, image_height);
  if (!out.valid()) fail(ErrorKind::data, fmt::format("degenerate expanded box {}", format_bbox(out)));
  return out;
}

Image crop_and_resize(const Image& image, const BoundingBox& box, int target_size) {
  if (target_size <= 0) fail(ErrorKind::usage, "target size must be positive");
  if (!box.within(image.width, image.height)) {
    fail(ErrorKind::data, fmt::format("crop box {} exceeds image {}x{}", format_bbox(box),
                                      image.width, image.height));
  }
  Image out(target_size, target_size);
  const double scale_x = static_cast<double>(box.width()) / target_size;
  const double scale_y = static_cast<double>(box.height()) / target_size;

  struct Tap {
    int lo, hi;
    double frac;
  };
  auto taps = [target_size](int lo_bound, int hi_bound, double scale) {
    std::vector<Tap> out(static_cast<std::size_t>(target_size));
    for (int i = 0; i < target_size; ++i) {
      double s = lo_bound + (i + 0.5) * scale - 0.5;
      s = std::clamp(s, static_cast<double>(lo_bound), static_cast<double>(hi_bound - 1));
      int s0 = static_cast<int>(std::floor(s));
      int s1 = std::min(s0 + 1, hi_bound - 1);
      out[i] = {s0, s1, s - s0};
    }
    return out;
  };
  const auto xs = taps(box.x_min, box.x_max, scale_x);
  const auto ys = taps(box.y_min, box.y_max, scale_y);

  for (int v = 0; v < target_size; ++v) {
    const Tap& ty = ys[v];
    for (int u = 0; u < target_size; ++u) {
      const Tap& tx = xs[u];
      for (int c = 0; c < Image::kChannels; ++c) {
        double top = image.at(tx.lo, ty.lo, c) * (1.0 - tx.frac) + image.at(tx.hi, ty.lo, c) * tx.frac;
        double bottom =
            image.at(tx.lo, ty.hi, c) * (1.0 - tx.frac) + image.at(tx.hi, ty.hi, c) * tx.frac;
        double value = top * (1.0 - ty.frac) + bottom * ty.frac;
        out.at(u, v, c) = static_cast<std::uint8_t>(std::clamp(std::lround(value), 0L, 255L));
      }
    }
  }
  return out;
}

bool inside_inscribed_ellipse(int x, int y, int width, int height) {
  const double a = width / 2.0;
  const double b = height / 2.0;
  const double dx = (x + 0.5 - a) / a;
  const double dy = (y + 0.5 - b) / b;
  return dx * dx + dy * dy <= 1.0;
}

Image elliptical_mask(const Image& image, MaskFill fill) {
  if (image.empty()) fail(ErrorKind::usage, "cannot mask an empty image");
  std::array<std::uint8_t, Image::kChannels> fill_value{0, 0, 0};
  if (fill == MaskFill::crop_mean) {
    std::array<double, Image::kChannels> sum{0, 0, 0};
    std::size_t count = 0;
    for (int y = 0; y < image.height; ++y) {
      for (int x = 0; x < image.width; ++x) {
        if (!inside_inscribed_ellipse(x, y, image.width, image.height)) continue;
        for (int c = 0; c < Image::kChannels; ++c) sum[c] += image.at(x, y, c);
        ++count;
      }
    }
    for (int c = 0; c < Image::kChannels; ++c) {
      fill_value[c] = static_cast<std::uint8_t>(count ? std::lround(sum[c] / count) : 0);
    }
  }
  Image out = image;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      if (inside_inscribed_ellipse(x, y, image.width, image.height)) continue;
      for (int c = 0; c < Image::kChannels; ++c) out.at(x, y, c) = fill_value[c];
    }
  }
  return out;
}

AlignedImage align_image(const Image& image, const std::optional<BoundingBox>& annotation,
                         const PreprocessConfig& config, const Detector& detector) {
  config.validate();
  if (image.empty()) fail(ErrorKind::data, "cannot align an empty image");
  AlignedImage result;
  if (annotation) {
    if (!annotation->within(image.width, image.height)) {
      fail(ErrorKind::data, fmt::format("annotated box {} exceeds image {}x{}",
                                        format_bbox(*annotation), image.width, image.height));
    }
    result.source_box = *annotation;
    result.origin = BoxOrigin::annotation;
  } else {
    auto detections = detector.detect(image);
    auto best = std::max_element(detections.begin(), detections.end(),
                                 [](const Detection& a, const Detection& b) {
                                   return a.confidence < b.confidence;
                                 });
    if (best != detections.end() && best->box.within(image.width, image.height)) {
      result.source_box = best->box;
      result.origin = BoxOrigin::detector;
    } else {
      result.source_box = BoundingBox{0, 0, image.width, image.height};
      result.origin = BoxOrigin::full_frame;
    }
  }
  result.crop_box = expand_box(result.source_box, config.margin_fraction, image.width, image.height);
  result.aligned = crop_and_resize(image, result.crop_box, config.target_size);
  if (config.apply_mask) result.masked = elliptical_mask(result.aligned, config.mask_fill);
  return result;
}

AlignedImage preprocess_record(const ImageRecord& record, const PreprocessConfig& config,
                               const Detector& detector, const std::filesystem::path& base_dir) {
  Image image = read_image(resolve_path(record.path, base_dir));
  try {
    return align_image(image, record.bbox, config, detector);
  } catch (const Error& e) {
    fail(e.kind(), fmt::format("record '{}': {}", record.id, e.what()));
  }
}

}  // namespace mmcr

namespace mmcr {

Image load_model_input(const ImageRecord& record, const std::filesystem::path& base_dir,
                       int input_size, bool masked) {
  Image image = read_image(resolve_path(record.path, base_dir));
  if (image.width == input_size && image.height == input_size) return image;
  PreprocessConfig config;
  config.target_size = input_size;
  config.apply_mask = masked;
  try {
    auto aligned = align_image(image, record.bbox, config, FullFrameDetector{});
    return masked ? std::move(*aligned.masked) : std::move(aligned.aligned);
  } catch (const Error& e) {
    fail(e.kind(), fmt::format("record '{}': {}", record.id, e.what()));
  }
}

}  // namespace mmcr
