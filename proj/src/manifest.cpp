#include "mmcr/manifest.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>

#include <fmt/format.h>

#include "mmcr/digest.hpp"
#include "mmcr/error.hpp"

namespace mmcr {

namespace {

constexpr std::array<std::string_view, 9> kRecordKeys = {
    "id", "path", "make", "model", "year", "color", "bbox", "split", "source"};

int parse_int(std::string_view text, std::string_view what) {
  int value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    fail(ErrorKind::data, fmt::format("invalid integer for {}: '{}'", what, text));
  }
  return value;
}

void check_value(std::string_view key, std::string_view value) {
  if (value.find_first_of("\t\r\n") != std::string_view::npos) {
    fail(ErrorKind::data, fmt::format("field '{}' contains a tab or newline", key));
  }
}

}  // namespace

std::string_view to_string(Split split) { return split == Split::train ? "train" : "test"; }

std::string_view to_string(Source source) {
  switch (source) {
    case Source::stanford: return "stanford";
    case Source::compcars: return "compcars";
    case Source::synthetic: return "synthetic";
    case Source::custom: return "custom";
  }
  return "custom";
}

std::string_view to_string(Granularity granularity) {
  switch (granularity) {
    case Granularity::make: return "make";
    case Granularity::make_model: return "make_model";
    case Granularity::make_model_year: return "make_model_year";
    case Granularity::color: return "color";
  }
  return "make_model";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "test") return Split::test;
  fail(ErrorKind::data, fmt::format("unknown split '{}'", text));
}

Source parse_source(std::string_view text) {
  for (auto s : {Source::stanford, Source::compcars, Source::synthetic, Source::custom}) {
    if (to_string(s) == text) return s;
  }
  fail(ErrorKind::data, fmt::format("unknown source '{}'", text));
}

Granularity parse_granularity(std::string_view text) {
  for (auto g : {Granularity::make, Granularity::make_model, Granularity::make_model_year,
                 Granularity::color}) {
    if (to_string(g) == text) return g;
  }
  fail(ErrorKind::usage, fmt::format("unknown granularity '{}'", text));
}

bool is_color_name(std::string_view name) {
  return std::find(kColorNames.begin(), kColorNames.end(), name) != kColorNames.end();
}

std::string format_bbox(const BoundingBox& box) {
  return fmt::format("{},{},{},{}", box.x_min, box.y_min, box.x_max, box.y_max);
}

BoundingBox parse_bbox(std::string_view text) {
  auto parts = split_fields(text, ',');
  if (parts.size() != 4) fail(ErrorKind::data, fmt::format("bbox needs 4 values: '{}'", text));
  BoundingBox box{parse_int(parts[0], "bbox"), parse_int(parts[1], "bbox"),
                  parse_int(parts[2], "bbox"), parse_int(parts[3], "bbox")};
  if (!box.valid()) fail(ErrorKind::data, fmt::format("degenerate bbox '{}'", text));
  return box;
}

std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

void validate_record(const ImageRecord& r) {
  if (r.id.empty()) fail(ErrorKind::data, "record id is empty");
  if (r.path.empty()) fail(ErrorKind::data, fmt::format("record '{}' has an empty path", r.id));
  if (r.model && !r.make) {
    fail(ErrorKind::data, fmt::format("record '{}' has a model but no make", r.id));
  }
  if (r.color && !is_color_name(*r.color)) {
    fail(ErrorKind::data, fmt::format("record '{}' has unknown color '{}'", r.id, *r.color));
  }
  if (r.bbox && !r.bbox->valid()) {
    fail(ErrorKind::data, fmt::format("record '{}' has a degenerate bbox", r.id));
  }
}

std::optional<std::string> class_label(const ImageRecord& r, Granularity granularity) {
  switch (granularity) {
    case Granularity::make:
      return r.make;
    case Granularity::make_model:
      if (!r.make || !r.model) return std::nullopt;
      return *r.make + "_" + *r.model;
    case Granularity::make_model_year:
      if (!r.make || !r.model || !r.year) return std::nullopt;
      return fmt::format("{}_{}_{}", *r.make, *r.model, *r.year);
    case Granularity::color:
      return r.color;
  }
  return std::nullopt;
}

std::map<std::string, ClassParts> class_parts(const std::vector<ImageRecord>& records,
                                              Granularity granularity) {
  std::map<std::string, ClassParts> out;
  for (const auto& r : records) {
    auto label = class_label(r, granularity);
    if (!label) continue;
    ClassParts parts;
    switch (granularity) {
      case Granularity::make_model_year:
        parts.year = r.year;
        [[fallthrough]];
      case Granularity::make_model:
        parts.model = r.model;
        [[fallthrough]];
      case Granularity::make:
        parts.make = r.make;
        break;
      case Granularity::color:
        parts.color = r.color;
        break;
    }
    out.emplace(*label, parts);
  }
  return out;
}

void assign_class(ImageRecord& r, const ClassParts& parts, Granularity granularity) {
  switch (granularity) {
    case Granularity::make_model_year:
      r.year = parts.year;
      [[fallthrough]];
    case Granularity::make_model:
      r.model = parts.model;
      [[fallthrough]];
    case Granularity::make:
      r.make = parts.make;
      break;
    case Granularity::color:
      r.color = parts.color;
      break;
  }
}

LabelVocabulary::LabelVocabulary(std::vector<std::string> classes, Granularity granularity)
    : classes_(std::move(classes)), granularity_(granularity) {
  std::sort(classes_.begin(), classes_.end());
  classes_.erase(std::unique(classes_.begin(), classes_.end()), classes_.end());
  for (const auto& c : classes_) {
    if (c.empty()) fail(ErrorKind::data, "empty class name in vocabulary");
  }
}

LabelVocabulary LabelVocabulary::from_records(const std::vector<ImageRecord>& records,
                                              Granularity granularity) {
  std::vector<std::string> names;
  for (const auto& r : records) {
    if (auto label = class_label(r, granularity)) names.push_back(std::move(*label));
  }
  return LabelVocabulary(std::move(names), granularity);
}

std::optional<std::size_t> LabelVocabulary::index_of(std::string_view name) const {
  auto it = std::lower_bound(classes_.begin(), classes_.end(), name);
  if (it == classes_.end() || *it != name) return std::nullopt;
  return static_cast<std::size_t>(it - classes_.begin());
}

std::string LabelVocabulary::digest() const {
  std::string buffer(to_string(granularity_));
  for (const auto& c : classes_) {
    buffer.push_back('\n');
    buffer += c;
  }
  return sha256_hex(buffer);
}

std::string format_record_line(const ImageRecord& r) {
  validate_record(r);
  std::string line;
  auto append = [&](std::string_view key, std::string_view value) {
    check_value(key, value);
    if (!line.empty()) line.push_back('\t');
    line += key;
    line.push_back('=');
    line += value;
  };
  append("id", r.id);
  append("path", r.path);
  if (r.make) append("make", *r.make);
  if (r.model) append("model", *r.model);
  if (r.year) append("year", std::to_string(*r.year));
  if (r.color) append("color", *r.color);
  if (r.bbox) append("bbox", format_bbox(*r.bbox));
  append("split", to_string(r.split));
  append("source", to_string(r.source));
  return line;
}

ImageRecord parse_record_line(std::string_view line, std::size_t line_number) {
  try {
    ImageRecord r;
    bool have_id = false, have_path = false, have_split = false, have_source = false;
    std::size_t next_key = 0;
    for (auto field : split_fields(line, '\t')) {
      auto eq = field.find('=');
      if (eq == std::string_view::npos) {
        fail(ErrorKind::data, fmt::format("field without '=': '{}'", field));
      }
      auto key = field.substr(0, eq);
      auto value = field.substr(eq + 1);
      auto pos = std::find(kRecordKeys.begin() + next_key, kRecordKeys.end(), key);
      if (pos == kRecordKeys.end()) {
        fail(ErrorKind::data, fmt::format("unknown, repeated or out-of-order key '{}'", key));
      }
      next_key = static_cast<std::size_t>(pos - kRecordKeys.begin()) + 1;
      if (key == "id") {
        r.id = value;
        have_id = true;
      } else if (key == "path") {
        r.path = value;
        have_path = true;
      } else if (key == "make") {
        r.make = std::string(value);
      } else if (key == "model") {
        r.model = std::string(value);
      } else if (key == "year") {
        r.year = parse_int(value, "year");
      } else if (key == "color") {
        r.color = std::string(value);
      } else if (key == "bbox") {
        r.bbox = parse_bbox(value);
      } else if (key == "split") {
        r.split = parse_split(value);
        have_split = true;
      } else {
        r.source = parse_source(value);
        have_source = true;
      }
    }
    if (!have_id || !have_path || !have_split || !have_source) {
      fail(ErrorKind::data, "missing one of the required keys id, path, split, source");
    }
    validate_record(r);
    return r;
  } catch (const Error& e) {
    fail(e.kind(), fmt::format("line {}: {}", line_number, e.what()));
  }
}

void save_manifest(const std::vector<ImageRecord>& records, const std::filesystem::path& path) {
  std::set<std::string_view> ids;
  std::string out;
  for (const auto& r : records) {
    if (!ids.insert(r.id).second) fail(ErrorKind::data, fmt::format("duplicate id '{}'", r.id));
    out += format_record_line(r);
    out.push_back('\n');
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) fail(ErrorKind::io, fmt::format("cannot write manifest {}", path.string()));
  file << out;
  if (!file.flush()) fail(ErrorKind::io, fmt::format("cannot write manifest {}", path.string()));
}

std::vector<ImageRecord> load_manifest(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) fail(ErrorKind::io, fmt::format("cannot open manifest {}", path.string()));
  std::vector<ImageRecord> records;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(file, line)) {
    ++line_number;
    if (line.empty()) continue;
    auto record = parse_record_line(line, line_number);
    if (!ids.insert(record.id).second) {
      fail(ErrorKind::data, fmt::format("line {}: duplicate id '{}'", line_number, record.id));
    }
    records.push_back(std::move(record));
  }
  return records;
}

std::vector<ImageRecord> filter_split(const std::vector<ImageRecord>& records, Split split) {
  std::vector<ImageRecord> out;
  std::copy_if(records.begin(), records.end(), std::back_inserter(out),
               [split](const ImageRecord& r) { return r.split == split; });
  return out;
}

std::filesystem::path resolve_path(const std::string& record_path,
                                   const std::filesystem::path& base_dir) {
  std::filesystem::path p(record_path);
  if (p.is_absolute() || base_dir.empty()) return p;
  return base_dir / p;
}

}  // namespace mmcr
