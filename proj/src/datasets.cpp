#include "mmcr/datasets.hpp"

#include <array>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "mmcr/error.hpp"

namespace mmcr {

namespace {

constexpr std::array<std::string_view, 3> kMultiWordMakes = {"AM General", "Aston Martin",
                                                             "Land Rover"};

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::optional<int> to_int(std::string_view text) {
  int value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) return std::nullopt;
  return value;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream file(path);
  if (!file) fail(ErrorKind::data, fmt::format("cannot open {}", path.string()));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(file, line)) lines.push_back(trim(line));
  return lines;
}

// make/model/year/file.jpg -> parts of a CompCars record.
ImageRecord compcars_record(const std::string& rel, const std::filesystem::path& dataset_root,
                            const std::filesystem::path& images_root, Split split,
                            IngestResult& result) {
  auto parts = split_fields(rel, '/');
  if (parts.size() != 4 || parts[0].empty() || parts[1].empty()) {
    fail(ErrorKind::data, fmt::format("CompCars entry '{}' is not make/model/year/file", rel));
  }
  ImageRecord r;
  r.id = rel;
  r.path = (images_root / rel).string();
  r.make = std::string(parts[0]);
  r.model = std::string(parts[1]);
  r.year = to_int(parts[2]);
  r.split = split;
  r.source = Source::compcars;

  auto label_path = dataset_root / "label" / std::filesystem::path(rel).replace_extension(".txt");
  if (std::filesystem::exists(label_path)) {
    auto lines = read_lines(label_path);
    if (lines.size() >= 3) {
      std::istringstream in(lines[2]);
      BoundingBox box;
      if (!(in >> box.x_min >> box.y_min >> box.x_max >> box.y_max) || !box.valid()) {
        fail(ErrorKind::data, fmt::format("corrupt box in {}", label_path.string()));
      }
      r.bbox = box;
    }
  }
  if (!std::filesystem::exists(r.path)) result.unresolved.push_back(r.id);
  return r;
}

}  // namespace

ClassParts parse_stanford_class_name(const std::string& name) {
  const std::string clean = trim(name);
  const auto last_space = clean.rfind(' ');
  if (last_space == std::string::npos) {
    fail(ErrorKind::data, fmt::format("class name '{}' lacks make, model and year", name));
  }
  auto year = to_int(std::string_view(clean).substr(last_space + 1));
  if (!year) fail(ErrorKind::data, fmt::format("class name '{}' does not end in a year", name));
  const std::string head = clean.substr(0, last_space);

  ClassParts parts;
  parts.year = year;
  for (auto make : kMultiWordMakes) {
    if (head.size() > make.size() && head.compare(0, make.size(), make) == 0 &&
        head[make.size()] == ' ') {
      parts.make = std::string(make);
      parts.model = trim(std::string_view(head).substr(make.size()));
      return parts;
    }
  }
  const auto first_space = head.find(' ');
  if (first_space == std::string::npos) {
    fail(ErrorKind::data, fmt::format("class name '{}' lacks a model", name));
  }
  parts.make = head.substr(0, first_space);
  parts.model = trim(std::string_view(head).substr(first_space + 1));
  return parts;
}

IngestResult load_stanford(const std::filesystem::path& annotation_path,
                           const std::filesystem::path& images_root,
                           const std::filesystem::path& class_names_path) {
  if (!std::filesystem::exists(annotation_path)) {
    fail(ErrorKind::data, fmt::format("Stanford annotation file {} not found", annotation_path.string()));
  }
  auto lines = read_lines(annotation_path);
  IngestResult result;
  std::vector<std::pair<std::size_t, std::string>> entries;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    if (i == 0 && lines[i].rfind("relative_im_path", 0) == 0) continue;
    entries.emplace_back(i + 1, lines[i]);
  }
  if (entries.empty()) return result;

  const auto names_path = class_names_path.empty()
                              ? annotation_path.parent_path() / "class_names.txt"
                              : class_names_path;
  std::vector<ClassParts> classes;
  for (const auto& line : read_lines(names_path)) {
    if (!line.empty()) classes.push_back(parse_stanford_class_name(line));
  }

  std::set<std::string> ids;
  for (const auto& [line_number, line] : entries) {
    auto fields = split_fields(line, ',');
    auto where = [&, ln = line_number] {
      return fmt::format("{}:{}", annotation_path.string(), ln);
    };
    if (fields.size() != 7) {
      fail(ErrorKind::data, fmt::format("{}: expected 7 comma-separated fields, got {}", where(),
                                        fields.size()));
    }
    std::array<std::optional<int>, 6> nums;
    for (std::size_t k = 0; k < 6; ++k) nums[k] = to_int(trim(fields[k + 1]));
    for (const auto& n : nums) {
      if (!n) fail(ErrorKind::data, fmt::format("{}: non-integer field in '{}'", where(), line));
    }
    const int class_index = *nums[4];
    if (class_index < 1 || static_cast<std::size_t>(class_index) > classes.size()) {
      fail(ErrorKind::data, fmt::format("{}: class index {} outside 1..{}", where(), class_index,
                                        classes.size()));
    }
    if (*nums[5] != 0 && *nums[5] != 1) {
      fail(ErrorKind::data, fmt::format("{}: test flag must be 0 or 1", where()));
    }
    ImageRecord r;
    r.id = trim(fields[0]);
    if (r.id.empty()) fail(ErrorKind::data, fmt::format("{}: empty image path", where()));
    if (!ids.insert(r.id).second) fail(ErrorKind::data, fmt::format("{}: duplicate entry '{}'", where(), r.id));
    r.path = (images_root / r.id).string();
    const auto& parts = classes[static_cast<std::size_t>(class_index - 1)];
    r.make = parts.make;
    r.model = parts.model;
    r.year = parts.year;
    r.bbox = BoundingBox{*nums[0], *nums[1], *nums[2], *nums[3]};
    if (!r.bbox->valid()) fail(ErrorKind::data, fmt::format("{}: degenerate box", where()));
    r.split = *nums[5] == 1 ? Split::test : Split::train;
    r.source = Source::stanford;
    if (!std::filesystem::exists(r.path)) result.unresolved.push_back(r.id);
    result.records.push_back(std::move(r));
  }
  return result;
}

CompCarsTask parse_compcars_task(std::string_view text) {
  if (text == "classification") return CompCarsTask::classification;
  if (text == "verification") return CompCarsTask::verification;
  fail(ErrorKind::usage, fmt::format("unknown CompCars task '{}'", text));
}

IngestResult load_compcars_classification(const std::filesystem::path& dataset_root,
                                          const std::filesystem::path& images_root) {
  IngestResult result;
  const auto split_dir = dataset_root / "train_test_split" / "classification";
  std::set<std::string> ids;
  for (auto [file, split] : {std::pair{"train.txt", Split::train}, std::pair{"test.txt", Split::test}}) {
    const auto path = split_dir / file;
    if (!std::filesystem::exists(path)) {
      fail(ErrorKind::data, fmt::format("CompCars split list {} not found", path.string()));
    }
    auto lines = read_lines(path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      try {
        auto r = compcars_record(lines[i], dataset_root, images_root, split, result);
        if (!ids.insert(r.id).second) fail(ErrorKind::data, fmt::format("duplicate entry '{}'", r.id));
        result.records.push_back(std::move(r));
      } catch (const Error& e) {
        fail(e.kind(), fmt::format("{}:{}: {}", path.string(), i + 1, e.what()));
      }
    }
  }
  return result;
}

CompCarsVerification load_compcars_verification(const std::filesystem::path& dataset_root,
                                                const std::filesystem::path& images_root) {
  CompCarsVerification out;
  const auto dir = dataset_root / "train_test_split" / "verification";
  std::set<std::string> seen;
  for (std::string_view level : {"easy", "medium", "hard"}) {
    const auto path = dir / fmt::format("verification_pairs_{}.txt", level);
    if (!std::filesystem::exists(path)) {
      fail(ErrorKind::data, fmt::format("CompCars pair list {} not found", path.string()));
    }
    auto lines = read_lines(path);
    auto& pairs = out.sets[std::string(level)];
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      try {
        std::istringstream in(lines[i]);
        std::string a, b, label;
        if (!(in >> a >> b >> label)) fail(ErrorKind::data, "expected 'path_a path_b label'");
        pairs.push_back({a, b, parse_pair_label(label)});
        for (const auto& id : {a, b}) {
          if (seen.insert(id).second) {
            out.images.records.push_back(
                compcars_record(id, dataset_root, images_root, Split::test, out.images));
          }
        }
      } catch (const Error& e) {
        fail(e.kind(), fmt::format("{}:{}: {}", path.string(), i + 1, e.what()));
      }
    }
  }
  const auto train_list = dir / "verification_train.txt";
  if (std::filesystem::exists(train_list)) {
    IngestResult scratch;
    for (const auto& line : read_lines(train_list)) {
      if (line.empty()) continue;
      // Some releases append a label column; the path is the first token.
      std::istringstream in(line);
      std::string rel;
      in >> rel;
      out.train_records.push_back(compcars_record(rel, dataset_root, images_root, Split::train, scratch));
    }
  }
  return out;
}

std::vector<CountCheck> check_stanford_counts(const std::vector<ImageRecord>& records) {
  return {{"train images", kStanfordTrain, filter_split(records, Split::train).size()},
          {"test images", kStanfordTest, filter_split(records, Split::test).size()},
          {"classes", kStanfordClasses,
           LabelVocabulary::from_records(records, Granularity::make_model_year).size()}};
}

std::vector<CountCheck> check_compcars_counts(const std::vector<ImageRecord>& records) {
  return {{"train images", kCompCarsTrain, filter_split(records, Split::train).size()},
          {"test images", kCompCarsTest, filter_split(records, Split::test).size()},
          {"classes", kCompCarsClasses,
           LabelVocabulary::from_records(records, Granularity::make_model).size()}};
}

std::vector<CountCheck> check_compcars_pair_counts(const CompCarsVerification& verification) {
  std::vector<CountCheck> out;
  for (const auto& [name, pairs] : verification.sets) {
    out.push_back({name + " pairs", kCompCarsPairsPerSet, pairs.size()});
  }
  return out;
}

}  // namespace mmcr
