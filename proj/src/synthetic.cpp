#include "mmcr/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include <fmt/format.h>

#include "mmcr/error.hpp"

namespace mmcr {

namespace {

using Rgb = std::array<int, 3>;

constexpr std::array<Rgb, 10> kColorValues = {{
    {30, 70, 200},    // blue
    {20, 20, 22},     // black
    {222, 200, 160},  // beige
    {200, 25, 30},    // red
    {242, 242, 238},  // white
    {240, 215, 30},   // yellow
    {245, 135, 20},   // orange
    {120, 40, 140},   // purple
    {30, 150, 50},    // green
    {128, 128, 128},  // gray
}};

std::uint8_t clamp_byte(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

bool base_shape(int family, double u, double v) {
  const double r2 = u * u + v * v;
  switch (family) {
    case 0: return r2 <= 1.0;                                      // ellipse
    case 1: return true;                                            // rectangle
    case 2: return std::abs(u) <= (v + 1.0) / 2.0;                  // triangle, apex up
    case 3: return std::abs(u) <= (1.0 - v) / 2.0;                  // triangle, apex down
    case 4: return std::abs(u) + std::abs(v) <= 1.0;                // diamond
    case 5: return std::abs(u) <= 0.35 || std::abs(v) <= 0.35;      // plus
    case 6: return std::abs(std::abs(u) - std::abs(v)) <= 0.3;      // saltire
    case 7: return r2 <= 1.0 && r2 >= 0.36;                         // ring
    case 8: return std::max(std::abs(u), std::abs(v)) >= 0.55;      // frame
    case 9: return static_cast<int>(std::floor((v + 1.0) * 2.0)) % 2 == 0;  // horizontal bands
    case 10: return static_cast<int>(std::floor((u + 1.0) * 2.0)) % 2 == 0; // vertical bands
    case 11: return u <= -0.2 || v >= 0.2;                          // L
    case 12: return v <= -0.3 || std::abs(u) <= 0.3;                // T
    case 13: return (u < 0.0) != (v < 0.0);                         // 2x2 checker
    case 14: return std::abs(u) + std::abs(v) <= 1.4;               // octagon
    default: {                                                      // five-point star
      const double theta = std::atan2(v, u);
      const double radius = 0.55 + 0.45 * std::cos(5.0 * theta);
      return std::sqrt(r2) <= radius;
    }
  }
}

}  // namespace

bool shape_contains(int family, double u, double v) {
  if (family < 0) return false;
  const bool inside = base_shape(family % kBaseShapeFamilies, u, v);
  const int generation = family / kBaseShapeFamilies;
  if (generation == 0) return inside;
  // Later generations punch a centered hole of growing size.
  const double hole = 0.15 + 0.1 * generation;
  return inside && (u * u + v * v) > hole * hole;
}

void SyntheticOptions::validate() const {
  if (n_classes < 2) fail(ErrorKind::usage, "synthetic data needs n_classes >= 2");
  if (n_per_class < 2) fail(ErrorKind::usage, "synthetic data needs n_per_class >= 2");
  if (color_mode && n_classes > static_cast<int>(kColorNames.size())) {
    fail(ErrorKind::usage, fmt::format("color mode supports at most {} classes, got {}",
                                       kColorNames.size(), n_classes));
  }
  if (image_height < 16) fail(ErrorKind::usage, "synthetic image height must be >= 16");
  if (class_offset < 0) fail(ErrorKind::usage, "class offset must be non-negative");
}

std::vector<SyntheticSample> render_synthetic(const SyntheticOptions& options) {
  options.validate();
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform_int = [&](int lo, int hi) {
    return lo + static_cast<int>(std::floor(unit(rng) * (hi - lo + 1)));
  };

  const int height = options.image_height;
  const int width = height * 5 / 4;
  const int n_train = static_cast<int>(std::floor(0.8 * options.n_per_class));

  std::vector<SyntheticSample> out;
  out.reserve(static_cast<std::size_t>(options.n_classes) * options.n_per_class);
  for (int k = 0; k < options.n_classes; ++k) {
    const int family = options.class_offset + k;
    for (int i = 0; i < options.n_per_class; ++i) {
      SyntheticSample s;
      Image& img = s.image;
      img = Image(width, height);

      // Muted noisy background.
      const Rgb bg = {uniform_int(60, 190), uniform_int(60, 190), uniform_int(60, 190)};
      for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
          const int noise = uniform_int(-20, 20);
          for (int c = 0; c < 3; ++c) img.at(x, y, c) = clamp_byte(bg[c] + noise);
        }
      }

      const int bw = uniform_int(width * 45 / 100, width * 80 / 100);
      const int bh = uniform_int(height * 45 / 100, height * 80 / 100);
      const int x0 = uniform_int(0, width - bw);
      const int y0 = uniform_int(0, height - bh);
      const BoundingBox box{x0, y0, x0 + bw, y0 + bh};

      Rgb fill;
      if (options.color_mode) {
        const Rgb& base = kColorValues[static_cast<std::size_t>(k)];
        const int shade = uniform_int(-12, 12);
        fill = {base[0] + shade, base[1] + shade, base[2] + shade};
      } else {
        fill = {uniform_int(0, 255), uniform_int(0, 255), uniform_int(0, 255)};
        // Keep the silhouette visible against the background.
        if (std::abs(fill[0] - bg[0]) + std::abs(fill[1] - bg[1]) + std::abs(fill[2] - bg[2]) < 150) {
          for (int c = 0; c < 3; ++c) fill[c] = bg[c] > 125 ? bg[c] - 110 : bg[c] + 110;
        }
      }

      for (int y = box.y_min; y < box.y_max; ++y) {
        for (int x = box.x_min; x < box.x_max; ++x) {
          const double u = 2.0 * (x + 0.5 - box.x_min) / bw - 1.0;
          const double v = 2.0 * (y + 0.5 - box.y_min) / bh - 1.0;
          // Color mode draws a rounded car-body block; make-model mode the class silhouette.
          const bool inside = options.color_mode
                                  ? std::pow(std::abs(u), 4) + std::pow(std::abs(v), 4) <= 1.0
                                  : shape_contains(family, u, v);
          if (!inside) continue;
          const int noise = uniform_int(-6, 6);
          for (int c = 0; c < 3; ++c) img.at(x, y, c) = clamp_byte(fill[c] + noise);
        }
      }

      ImageRecord& r = s.record;
      r.id = fmt::format("syn_{:03}_{:04}", family, i);
      r.path = fmt::format("images/{}.png", r.id);
      if (options.color_mode) {
        r.color = std::string(kColorNames[static_cast<std::size_t>(k)]);
      } else {
        r.make = "synthetic";
        r.model = fmt::format("class_{}", family);
      }
      r.bbox = box;
      r.split = i < n_train ? Split::train : Split::test;
      r.source = Source::synthetic;
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<ImageRecord> generate_synthetic(const SyntheticOptions& options,
                                            const std::filesystem::path& out_dir) {
  auto samples = render_synthetic(options);
  std::vector<ImageRecord> records;
  records.reserve(samples.size());
  for (auto& s : samples) {
    write_png(s.image, out_dir / s.record.path);
    records.push_back(std::move(s.record));
  }
  save_manifest(records, out_dir / "manifest.tsv");
  return records;
}

}  // namespace mmcr
