#include "mmcr/eval.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "mmcr/error.hpp"

namespace mmcr {

namespace {

void check_lengths(std::size_t predictions, std::size_t labels) {
  if (predictions != labels) {
    fail(ErrorKind::usage, fmt::format("{} predictions but {} labels", predictions, labels));
  }
}

std::string render_table(const std::vector<std::string>& columns,
                         const std::vector<std::pair<std::string, std::vector<std::string>>>& rows) {
  std::vector<std::size_t> widths;
  widths.push_back(std::string_view("Method").size());
  for (const auto& c : columns) widths.push_back(c.size());
  for (const auto& [name, cells] : rows) {
    widths[0] = std::max(widths[0], name.size());
    for (std::size_t i = 0; i < cells.size(); ++i) widths[i + 1] = std::max(widths[i + 1], cells[i].size());
  }
  auto line = [&](const std::string& first, const std::vector<std::string>& cells) {
    std::string out = fmt::format("| {:<{}} |", first, widths[0]);
    for (std::size_t i = 0; i < cells.size(); ++i) out += fmt::format(" {:>{}} |", cells[i], widths[i + 1]);
    return out + "\n";
  };
  std::string rule = "|";
  for (auto w : widths) rule += std::string(w + 2, '-') + "|";
  rule += "\n";
  std::string out = line("Method", columns) + rule;
  for (const auto& [name, cells] : rows) out += line(name, cells);
  return out;
}

std::string percent(double fraction) { return fmt::format("{:.2f}%", 100.0 * fraction); }

}  // namespace

double top_k_accuracy(std::span<const Prediction> predictions,
                      std::span<const std::string> true_labels, std::size_t k) {
  if (k < 1) fail(ErrorKind::usage, "k must be >= 1");
  check_lengths(predictions.size(), true_labels.size());
  if (predictions.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& ranked = predictions[i].ranked;
    auto it = std::find_if(ranked.begin(), ranked.end(),
                           [&](const ScoredClass& s) { return s.name == true_labels[i]; });
    if (it == ranked.end()) {
      fail(ErrorKind::usage, fmt::format("label '{}' is not in the vocabulary", true_labels[i]));
    }
    if (static_cast<std::size_t>(it - ranked.begin()) < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

std::size_t ConfusionMatrix::total() const {
  std::size_t n = 0;
  for (const auto& row : counts) for (auto c : row) n += c;
  return n;
}

std::size_t ConfusionMatrix::trace() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) n += counts[i][i];
  return n;
}

double ConfusionMatrix::accuracy() const {
  const auto n = total();
  return n ? static_cast<double>(trace()) / static_cast<double>(n) : 0.0;
}

ConfusionMatrix confusion_matrix(std::span<const Prediction> predictions,
                                 std::span<const std::string> true_labels,
                                 const LabelVocabulary& vocabulary) {
  check_lengths(predictions.size(), true_labels.size());
  ConfusionMatrix m;
  m.classes = vocabulary.classes();
  m.counts.assign(vocabulary.size(), std::vector<std::size_t>(vocabulary.size(), 0));
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    auto truth = vocabulary.index_of(true_labels[i]);
    if (!truth) fail(ErrorKind::usage, fmt::format("label '{}' is not in the vocabulary", true_labels[i]));
    if (predictions[i].ranked.empty()) fail(ErrorKind::usage, "empty prediction");
    auto predicted = vocabulary.index_of(predictions[i].top().name);
    if (!predicted) {
      fail(ErrorKind::usage,
           fmt::format("predicted class '{}' is not in the vocabulary", predictions[i].top().name));
    }
    ++m.counts[*truth][*predicted];
  }
  return m;
}

Protocol parse_protocol(std::string_view text) {
  if (text == "stanford") return Protocol::stanford;
  if (text == "compcars_cls") return Protocol::compcars_cls;
  if (text == "compcars_verif") return Protocol::compcars_verif;
  if (text == "generic" || text == "synthetic") return Protocol::generic;
  fail(ErrorKind::usage, fmt::format("unknown protocol '{}'", text));
}

std::string_view to_string(Protocol protocol) {
  switch (protocol) {
    case Protocol::stanford: return "stanford";
    case Protocol::compcars_cls: return "compcars_cls";
    case Protocol::compcars_verif: return "compcars_verif";
    case Protocol::generic: return "generic";
  }
  return "generic";
}

std::vector<std::string> protocol_columns(Protocol protocol) {
  switch (protocol) {
    case Protocol::stanford: return {"Accuracy (top1)"};
    case Protocol::compcars_verif: return {"Accuracy(Easy)", "Accuracy(Medium)", "Accuracy(Hard)"};
    default: return {"Accuracy (top1)", "Accuracy (top5)"};
  }
}

std::vector<ReferenceRow> reference_rows(Protocol protocol) {
  switch (protocol) {
    case Protocol::stanford:
      return {{"Published MMCR network", {93.6}}, {"Krause et al.", {92.8}}, {"Lin et al.", {91.3}},
              {"Zhang et al.", {88.4}},           {"Xie et al.", {86.3}},    {"Gosselin et al.", {82.7}}};
    case Protocol::compcars_cls:
      return {{"Published MMCR network", {95.88, 99.53}},
              {"GoogLeNet", {91.2, 98.1}},
              {"Overfeat", {87.9, 96.9}},
              {"AlexNet", {81.9, 94.0}}};
    case Protocol::compcars_verif:
      return {{"Published MMCR network (fine-tuned)", {93.00, 86.18, 80.05}},
              {"Published MMCR network (no fine-tuning)", {92.03, 86.52, 80.17}},
              {"Yang et al.", {83.3, 82.4, 76.1}},
              {"Sochor et al.", {85.0, 82.7, 76.8}}};
    case Protocol::generic:
      return {};
  }
  return {};
}

namespace {

nlohmann::json reference_json(Protocol protocol) {
  nlohmann::json rows = nlohmann::json::array();
  const auto columns = protocol_columns(protocol);
  for (const auto& row : reference_rows(protocol)) {
    nlohmann::json j = {{"method", row.method}, {"provenance", "published"}};
    for (std::size_t i = 0; i < columns.size(); ++i) j[columns[i]] = row.accuracies[i];
    rows.push_back(j);
  }
  return rows;
}

void append_reference_rows(Protocol protocol,
                           std::vector<std::pair<std::string, std::vector<std::string>>>& rows) {
  for (const auto& ref : reference_rows(protocol)) {
    std::vector<std::string> cells;
    for (double a : ref.accuracies) cells.push_back(fmt::format("{:.2f}%", a));
    rows.emplace_back(ref.method + " [published]", cells);
  }
}

}  // namespace

BenchmarkReport benchmark_report(const ClassifierModel& model, const std::vector<ImageRecord>& records,
                                 const std::filesystem::path& base_dir, Protocol protocol) {
  const Granularity g = model.vocabulary.granularity();
  if (protocol == Protocol::compcars_verif) {
    fail(ErrorKind::usage, "the verification protocol needs pair sets; use the verify evaluation");
  }
  if (protocol == Protocol::stanford && g != Granularity::make_model_year) {
    fail(ErrorKind::usage, "the stanford protocol needs a make_model_year model");
  }
  if (protocol == Protocol::compcars_cls && g != Granularity::make_model) {
    fail(ErrorKind::usage, "the compcars_cls protocol needs a make_model model");
  }
  auto test = load_labeled(records, Split::test, model.vocabulary, base_dir, model.input_size(),
                           g == Granularity::color);
  if (test.size() == 0) fail(ErrorKind::usage, "manifest has no test split");

  std::vector<std::string> truth;
  truth.reserve(test.size());
  for (int label : test.labels) truth.push_back(model.vocabulary.name(static_cast<std::size_t>(label)));
  auto predictions = predict_batch(model, test.images);
  const double top1 = top_k_accuracy(predictions, truth, 1);
  const double top5 = top_k_accuracy(predictions, truth, 5);
  auto confusion = confusion_matrix(predictions, truth, model.vocabulary);

  BenchmarkReport report;
  report.results = {
      {"protocol", to_string(protocol)},
      {"model_digest", model.digest()},
      {"dataset",
       {{"train_images", filter_split(records, Split::train).size()},
        {"test_images", test.size()},
        {"classes", model.vocabulary.size()},
        {"granularity", to_string(g)}}},
      {"results",
       {{"total", confusion.total()}, {"correct_top1", confusion.trace()}, {"top1", top1}, {"top5", top5}}},
      {"confusion_matrix", confusion.counts},
      {"reference", reference_json(protocol)}};

  std::vector<std::pair<std::string, std::vector<std::string>>> rows;
  if (protocol == Protocol::stanford) {
    rows.emplace_back("This model", std::vector<std::string>{percent(top1)});
  } else {
    rows.emplace_back("This model", std::vector<std::string>{percent(top1), percent(top5)});
  }
  append_reference_rows(protocol, rows);
  report.table = fmt::format("protocol: {}  test images: {}  classes: {}  model: {}\n",
                             to_string(protocol), test.size(), model.vocabulary.size(),
                             model.digest().substr(0, 16)) +
                 render_table(protocol_columns(protocol), rows);
  return report;
}

BenchmarkReport benchmark_report(const VerificationReport& verification, std::size_t calibration_pairs) {
  const std::vector<std::string> levels = {"easy", "medium", "hard"};
  auto cells_for = [&](const PathwayResult& r) {
    std::vector<std::string> cells;
    for (const auto& level : levels) {
      auto it = r.sets.find(level);
      cells.push_back(it == r.sets.end() ? "-" : percent(it->second.accuracy));
    }
    return cells;
  };
  std::vector<std::pair<std::string, std::vector<std::string>>> rows;
  rows.emplace_back("This model (fine-tuned)", cells_for(verification.fine_tuned));
  if (verification.frozen) rows.emplace_back("This model (frozen features)", cells_for(*verification.frozen));
  append_reference_rows(Protocol::compcars_verif, rows);

  BenchmarkReport report;
  report.results = verification.to_json();
  report.results["protocol"] = to_string(Protocol::compcars_verif);
  report.results["calibration_pairs"] = calibration_pairs;
  report.results["reference"] = reference_json(Protocol::compcars_verif);
  std::size_t total_pairs = 0;
  for (const auto& [name, acc] : verification.fine_tuned.sets) total_pairs += acc.pairs;
  report.table = fmt::format("protocol: compcars_verif  evaluated pairs: {}  threshold: {:.6g}  model: {}\n",
                             total_pairs, verification.fine_tuned.threshold.threshold,
                             verification.fine_tuned.model_digest.substr(0, 16)) +
                 render_table(protocol_columns(Protocol::compcars_verif), rows);
  return report;
}

}  // namespace mmcr
