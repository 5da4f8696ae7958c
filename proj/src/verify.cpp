#include "mmcr/verify.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include <fmt/format.h>

#include "mmcr/error.hpp"

namespace mmcr {

namespace {

constexpr std::size_t kHistogramBins = 20;
constexpr std::size_t kEmbedChunk = 256;

}  // namespace

std::string_view to_string(PairLabel label) { return label == PairLabel::same ? "same" : "different"; }

PairLabel parse_pair_label(std::string_view text) {
  if (text == "same" || text == "1") return PairLabel::same;
  if (text == "different" || text == "0") return PairLabel::different;
  fail(ErrorKind::data, fmt::format("unknown pair label '{}'", text));
}

std::vector<VerificationPair> load_pairs(const std::filesystem::path& path) {
  std::ifstream file(path);
  if (!file) fail(ErrorKind::io, fmt::format("cannot open pair list {}", path.string()));
  std::vector<VerificationPair> pairs;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(file, line)) {
    ++line_number;
    if (line.empty()) continue;
    auto fields = split_fields(line, '\t');
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty()) {
      fail(ErrorKind::data, fmt::format("{}:{}: expected 'id_a<TAB>id_b<TAB>label'",
                                        path.string(), line_number));
    }
    try {
      pairs.push_back({std::string(fields[0]), std::string(fields[1]), parse_pair_label(fields[2])});
    } catch (const Error& e) {
      fail(ErrorKind::data, fmt::format("{}:{}: {}", path.string(), line_number, e.what()));
    }
  }
  return pairs;
}

void save_pairs(const std::vector<VerificationPair>& pairs, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) fail(ErrorKind::io, fmt::format("cannot write pair list {}", path.string()));
  for (const auto& p : pairs) file << p.id_a << '\t' << p.id_b << '\t' << to_string(p.label) << '\n';
}

double pair_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    fail(ErrorKind::usage, fmt::format("embedding dimensions differ: {} vs {}", a.size(), b.size()));
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

PairLabel verify_pair(std::span<const double> a, std::span<const double> b, double threshold) {
  return pair_distance(a, b) < threshold ? PairLabel::same : PairLabel::different;
}

double decision_accuracy(std::span<const LabeledDistance> pairs, double threshold) {
  if (pairs.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& p : pairs) {
    const PairLabel decided = p.distance < threshold ? PairLabel::same : PairLabel::different;
    if (decided == p.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

ThresholdModel calibrate_threshold(std::span<const LabeledDistance> pairs) {
  ThresholdModel model;
  for (const auto& p : pairs) {
    if (!(p.distance >= 0.0) || !std::isfinite(p.distance)) {
      fail(ErrorKind::data, "pair distances must be finite and non-negative");
    }
    (p.label == PairLabel::same ? model.same_pairs : model.different_pairs)++;
  }
  if (model.same_pairs == 0 || model.different_pairs == 0) {
    fail(ErrorKind::usage, "threshold calibration needs both same and different pairs");
  }

  std::vector<LabeledDistance> sorted(pairs.begin(), pairs.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const LabeledDistance& a, const LabeledDistance& b) { return a.distance < b.distance; });
  const double max_distance = sorted.back().distance;

  // Sweep candidates ascending. Everything strictly below the candidate is
  // called "same"; `below_same` / `below_diff` count those pairs.
  std::size_t below_same = 0, below_diff = 0;
  const std::size_t n = sorted.size();
  auto correct_at = [&]() { return below_same + (model.different_pairs - below_diff); };

  double best_threshold = 0.0;
  std::size_t best_correct = correct_at();  // threshold 0: nothing is below it
  std::size_t i = 0;
  auto absorb_group = [&]() {
    const double d = sorted[i].distance;
    while (i < n && sorted[i].distance == d) {
      (sorted[i].label == PairLabel::same ? below_same : below_diff)++;
      ++i;
    }
  };
  // Distances equal to 0 are never below any non-negative candidate <= 0, so
  // threshold 0 is evaluated before absorbing any group.
  while (i < n) {
    const double lower = sorted[i].distance;
    absorb_group();
    const double candidate =
        i < n ? lower + (sorted[i].distance - lower) / 2.0
              : (max_distance > 0.0 ? max_distance * (1.0 + 1e-9) : 1e-12);
    const std::size_t correct = correct_at();
    if (correct > best_correct) {
      best_correct = correct;
      best_threshold = candidate;
    }
  }
  model.threshold = best_threshold;
  model.accuracy = static_cast<double>(best_correct) / static_cast<double>(n);

  model.histogram.upper = max_distance;
  model.histogram.same.assign(kHistogramBins, 0);
  model.histogram.different.assign(kHistogramBins, 0);
  for (const auto& p : sorted) {
    std::size_t bin = max_distance > 0.0
                          ? static_cast<std::size_t>(p.distance / max_distance * kHistogramBins)
                          : 0;
    bin = std::min(bin, kHistogramBins - 1);
    (p.label == PairLabel::same ? model.histogram.same : model.histogram.different)[bin]++;
  }
  return model;
}

nlohmann::json ThresholdModel::to_json() const {
  return {{"threshold", threshold},
          {"calibration_accuracy", accuracy},
          {"same_pairs", same_pairs},
          {"different_pairs", different_pairs},
          {"histogram",
           {{"upper", histogram.upper}, {"same", histogram.same}, {"different", histogram.different}}}};
}

std::map<std::string, EmbeddingVector> embed_ids(const ClassifierModel& model,
                                                 const std::vector<std::string>& ids,
                                                 const ImageLoader& loader) {
  std::set<std::string> unique(ids.begin(), ids.end());
  std::vector<std::string> ordered(unique.begin(), unique.end());
  std::map<std::string, EmbeddingVector> out;
  for (std::size_t start = 0; start < ordered.size(); start += kEmbedChunk) {
    const std::size_t n = std::min(kEmbedChunk, ordered.size() - start);
    std::vector<Image> batch;
    batch.reserve(n);
    for (std::size_t i = 0; i < n; ++i) batch.push_back(loader(ordered[start + i]));
    auto features = extract_features(model, batch);
    for (std::size_t i = 0; i < n; ++i) out[ordered[start + i]] = std::move(features[i]);
  }
  return out;
}

std::vector<LabeledDistance> pair_distances(const std::vector<VerificationPair>& pairs,
                                            const std::map<std::string, EmbeddingVector>& embeddings) {
  std::vector<LabeledDistance> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    auto a = embeddings.find(p.id_a);
    auto b = embeddings.find(p.id_b);
    if (a == embeddings.end() || b == embeddings.end()) {
      fail(ErrorKind::data, fmt::format("no embedding for pair ({}, {})", p.id_a, p.id_b));
    }
    out.push_back({pair_distance(a->second, b->second), p.label});
  }
  return out;
}

namespace {

PathwayResult run_pathway(const ClassifierModel& model,
                          const std::map<std::string, std::vector<VerificationPair>>& sets,
                          const std::vector<VerificationPair>& calibration_pairs,
                          const ImageLoader& loader) {
  std::vector<std::string> ids;
  auto collect = [&ids](const std::vector<VerificationPair>& pairs) {
    for (const auto& p : pairs) {
      ids.push_back(p.id_a);
      ids.push_back(p.id_b);
    }
  };
  collect(calibration_pairs);
  for (const auto& [name, pairs] : sets) collect(pairs);
  auto embeddings = embed_ids(model, ids, loader);

  PathwayResult result;
  result.model_digest = model.digest();
  auto calibration = pair_distances(calibration_pairs, embeddings);
  result.threshold = calibrate_threshold(calibration);
  for (const auto& [name, pairs] : sets) {
    auto distances = pair_distances(pairs, embeddings);
    SetAccuracy acc;
    acc.pairs = distances.size();
    for (const auto& d : distances) {
      const PairLabel decided = d.distance < result.threshold.threshold ? PairLabel::same : PairLabel::different;
      if (decided == d.label) ++acc.correct;
    }
    acc.accuracy = static_cast<double>(acc.correct) / static_cast<double>(acc.pairs);
    result.sets[name] = acc;
  }
  return result;
}

nlohmann::json pathway_json(const PathwayResult& r) {
  nlohmann::json sets = nlohmann::json::object();
  for (const auto& [name, acc] : r.sets) {
    sets[name] = {{"pairs", acc.pairs}, {"correct", acc.correct}, {"accuracy", acc.accuracy}};
  }
  return {{"model_digest", r.model_digest}, {"calibration", r.threshold.to_json()}, {"sets", sets}};
}

}  // namespace

VerificationReport evaluate_verification(
    const ClassifierModel& model, const std::map<std::string, std::vector<VerificationPair>>& sets,
    const std::vector<VerificationPair>& calibration_pairs, const ImageLoader& loader,
    const ClassifierModel* frozen_model) {
  if (sets.empty()) fail(ErrorKind::usage, "no verification sets given");
  for (const auto& [name, pairs] : sets) {
    if (pairs.empty()) fail(ErrorKind::usage, fmt::format("verification set '{}' is empty", name));
  }
  VerificationReport report;
  report.fine_tuned = run_pathway(model, sets, calibration_pairs, loader);
  if (frozen_model) report.frozen = run_pathway(*frozen_model, sets, calibration_pairs, loader);
  return report;
}

nlohmann::json VerificationReport::to_json() const {
  nlohmann::json j = {{"fine_tuned", pathway_json(fine_tuned)}};
  j["frozen"] = frozen ? pathway_json(*frozen) : nlohmann::json(nullptr);
  return j;
}

std::vector<VerificationPair> sample_pairs(const std::vector<ImageRecord>& records,
                                           Granularity granularity, std::size_t count,
                                           std::uint64_t seed) {
  std::map<std::string, std::vector<const ImageRecord*>> by_class;
  for (const auto& r : records) {
    if (auto label = class_label(r, granularity)) by_class[*label].push_back(&r);
  }
  std::vector<const std::vector<const ImageRecord*>*> multi;
  for (const auto& [name, members] : by_class) {
    if (members.size() >= 2) multi.push_back(&members);
  }
  if (multi.empty() || by_class.size() < 2) {
    fail(ErrorKind::usage, "pair sampling needs two classes and one class with two members");
  }
  std::vector<const std::vector<const ImageRecord*>*> classes;
  for (const auto& [name, members] : by_class) classes.push_back(&members);

  std::mt19937_64 rng(seed);
  auto pick = [&rng](std::size_t n) {
    return static_cast<std::size_t>(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
  };
  std::vector<VerificationPair> pairs;
  pairs.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    if (k % 2 == 0) {
      const auto& members = *multi[pick(multi.size())];
      const std::size_t a = pick(members.size());
      std::size_t b = pick(members.size() - 1);
      if (b >= a) ++b;
      pairs.push_back({members[a]->id, members[b]->id, PairLabel::same});
    } else {
      const std::size_t ca = pick(classes.size());
      std::size_t cb = pick(classes.size() - 1);
      if (cb >= ca) ++cb;
      const auto& ma = *classes[ca];
      const auto& mb = *classes[cb];
      pairs.push_back({ma[pick(ma.size())]->id, mb[pick(mb.size())]->id, PairLabel::different});
    }
  }
  return pairs;
}

}  // namespace mmcr
