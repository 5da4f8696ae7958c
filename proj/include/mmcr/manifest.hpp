#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mmcr {

enum class Split { train, test };
enum class Source { stanford, compcars, synthetic, custom };
enum class Granularity { make, make_model, make_model_year, color };

std::string_view to_string(Split split);
std::string_view to_string(Source source);
std::string_view to_string(Granularity granularity);
Split parse_split(std::string_view text);
Source parse_source(std::string_view text);
Granularity parse_granularity(std::string_view text);

/// The fixed color label set of the color network.
inline constexpr std::array<std::string_view, 10> kColorNames = {
    "blue", "black", "beige", "red", "white", "yellow", "orange", "purple", "green", "gray"};

bool is_color_name(std::string_view name);

/// Axis-aligned pixel rectangle, x_max/y_max exclusive.
struct BoundingBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  int width() const { return x_max - x_min; }
  int height() const { return y_max - y_min; }
  bool valid() const { return x_min >= 0 && y_min >= 0 && x_min < x_max && y_min < y_max; }
  bool contains(const BoundingBox& other) const {
    return x_min <= other.x_min && y_min <= other.y_min && x_max >= other.x_max &&
           y_max >= other.y_max;
  }
  bool within(int image_width, int image_height) const {
    return valid() && x_max <= image_width && y_max <= image_height;
  }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

std::string format_bbox(const BoundingBox& box);
BoundingBox parse_bbox(std::string_view text);

struct ImageRecord {
  std::string id;
  std::string path;
  std::optional<std::string> make;
  std::optional<std::string> model;
  std::optional<int> year;
  std::optional<std::string> color;
  std::optional<BoundingBox> bbox;
  Split split = Split::train;
  Source source = Source::custom;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

/// Throws ErrorKind::data when a record breaks the field invariants.
void validate_record(const ImageRecord& record);

/// Class name of a record at the given granularity; nullopt when the record
/// lacks the fields that granularity needs. Parts are joined with '_'.
std::optional<std::string> class_label(const ImageRecord& record, Granularity granularity);

/// The make/model/year behind a class name, kept for presentation.
struct ClassParts {
  std::optional<std::string> make;
  std::optional<std::string> model;
  std::optional<int> year;
  std::optional<std::string> color;
  friend bool operator==(const ClassParts&, const ClassParts&) = default;
};

std::map<std::string, ClassParts> class_parts(const std::vector<ImageRecord>& records,
                                              Granularity granularity);

/// Apply a class's parts onto a record (used when relabeling).
void assign_class(ImageRecord& record, const ClassParts& parts, Granularity granularity);

/// Ordered class list; the position of a class is the network output index.
class LabelVocabulary {
 public:
  LabelVocabulary() = default;
  /// Sorts and de-duplicates; throws on empty names.
  LabelVocabulary(std::vector<std::string> classes, Granularity granularity);

  static LabelVocabulary from_records(const std::vector<ImageRecord>& records,
                                      Granularity granularity);

  const std::vector<std::string>& classes() const { return classes_; }
  Granularity granularity() const { return granularity_; }
  std::size_t size() const { return classes_.size(); }
  std::optional<std::size_t> index_of(std::string_view name) const;
  const std::string& name(std::size_t index) const { return classes_.at(index); }

  /// SHA-256 over granularity and the ordered class list.
  std::string digest() const;

  friend bool operator==(const LabelVocabulary&, const LabelVocabulary&) = default;

 private:
  std::vector<std::string> classes_;
  Granularity granularity_ = Granularity::make_model;
};

// Line-delimited key=value<TAB>... records; keys in fixed order, absent
// fields omitted.
std::string format_record_line(const ImageRecord& record);
ImageRecord parse_record_line(std::string_view line, std::size_t line_number);

void save_manifest(const std::vector<ImageRecord>& records, const std::filesystem::path& path);
std::vector<ImageRecord> load_manifest(const std::filesystem::path& path);

std::vector<ImageRecord> filter_split(const std::vector<ImageRecord>& records, Split split);

/// Resolves a record path against the manifest's directory when relative.
std::filesystem::path resolve_path(const std::string& record_path,
                                   const std::filesystem::path& base_dir);

/// Splits "a<TAB>b<TAB>c" style lines; shared by all line-delimited formats.
std::vector<std::string_view> split_fields(std::string_view line, char sep);

}  // namespace mmcr
