#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "mmcr/error.hpp"
#include "mmcr/eval.hpp"
#include "support.hpp"

using namespace mmcr;
using mmcr::testing::TempDir;

namespace {

LabelVocabulary vocab_of(int n) {
  std::vector<std::string> names;
  for (int i = 0; i < n; ++i) names.push_back("c" + std::to_string(10 + i));
  return LabelVocabulary(names, Granularity::make_model);
}

// Random probabilities with frequent exact ties.
Prediction random_prediction(const LabelVocabulary& vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> level(1, 6);
  std::vector<double> p(vocab.size());
  for (auto& v : p) v = level(rng);
  const double sum = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& v : p) v /= sum;
  return make_prediction(vocab, p);
}

// Truth is in the top k iff fewer than k classes outrank it, where a class
// outranks another by higher probability or equal probability and lower index.
bool oracle_in_top_k(const std::vector<double>& p, std::size_t truth, std::size_t k) {
  std::size_t above = 0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] > p[truth] || (p[j] == p[truth] && j < truth)) ++above;
  }
  return above < k;
}

std::vector<double> probabilities(const Prediction& pred, std::size_t n) {
  std::vector<double> p(n);
  for (const auto& s : pred.ranked) p[s.index] = s.confidence;
  return p;
}

}  // namespace

TEST(TopK, TrivialCases) {
  auto vocab = vocab_of(6);
  std::vector<Prediction> preds;
  std::vector<std::string> first, third;
  for (std::size_t t = 0; t < 6; ++t) {
    std::vector<double> p(6, 0.01);
    p[t] = 0.5;
    p[(t + 1) % 6] = 0.3;
    p[(t + 2) % 6] = 0.16;
    preds.push_back(make_prediction(vocab, p));
    first.push_back(vocab.name(t));
    third.push_back(vocab.name((t + 2) % 6));
  }
  for (std::size_t k = 1; k <= 6; ++k) EXPECT_EQ(top_k_accuracy(preds, first, k), 1.0);
  EXPECT_EQ(top_k_accuracy(preds, third, 1), 0.0);
  EXPECT_EQ(top_k_accuracy(preds, third, 2), 0.0);
  EXPECT_EQ(top_k_accuracy(preds, third, 3), 1.0);
  EXPECT_EQ(top_k_accuracy(preds, third, 5), 1.0);
}

TEST(TopK, Errors) {
  auto vocab = vocab_of(3);
  std::vector<Prediction> preds{make_prediction(vocab, std::vector<double>{0.2, 0.3, 0.5})};
  std::vector<std::string> bad{"nope"}, good{"c10"}, two{"c10", "c11"};
  for (auto call : {std::function<void()>([&] { top_k_accuracy(preds, bad, 1); }),
                    std::function<void()>([&] { top_k_accuracy(preds, good, 0); }),
                    std::function<void()>([&] { top_k_accuracy(preds, two, 1); }),
                    std::function<void()>([&] { confusion_matrix(preds, bad, vocab); })}) {
    try {
      call();
      ADD_FAILURE() << "expected usage error";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::usage);
    }
  }
}

TEST(TopK, MatchesBruteForceOn1000RandomFixtures) {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> classes(2, 12), samples(1, 30);
  for (int fixture = 0; fixture < 1000; ++fixture) {
    auto vocab = vocab_of(classes(rng));
    const int n = samples(rng);
    std::uniform_int_distribution<std::size_t> truth_dist(0, vocab.size() - 1);
    std::vector<Prediction> preds;
    std::vector<std::size_t> truth;
    std::vector<std::string> names;
    for (int i = 0; i < n; ++i) {
      preds.push_back(random_prediction(vocab, rng));
      truth.push_back(truth_dist(rng));
      names.push_back(vocab.name(truth.back()));
    }
    double previous = 0.0;
    for (std::size_t k = 1; k <= vocab.size() + 1; ++k) {
      std::size_t hits = 0;
      for (int i = 0; i < n; ++i) hits += oracle_in_top_k(probabilities(preds[i], vocab.size()), truth[i], k);
      const double got = top_k_accuracy(preds, names, k);
      ASSERT_EQ(got, static_cast<double>(hits) / n) << "fixture " << fixture << " k " << k;
      ASSERT_GE(got, previous);
      previous = got;
    }
    EXPECT_EQ(top_k_accuracy(preds, names, vocab.size()), 1.0);
  }
}

TEST(Confusion, PerfectPredictionsAreDiagonal) {
  auto vocab = vocab_of(4);
  std::vector<Prediction> preds;
  std::vector<std::string> truth;
  for (std::size_t t = 0; t < 4; ++t) {
    for (int rep = 0; rep <= static_cast<int>(t); ++rep) {
      std::vector<double> p(4, 0.1);
      p[t] = 0.7;
      preds.push_back(make_prediction(vocab, p));
      truth.push_back(vocab.name(t));
    }
  }
  auto m = confusion_matrix(preds, truth, vocab);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(m.counts[i][j], i == j ? i + 1 : 0);
  }
  EXPECT_EQ(m.accuracy(), 1.0);
}

TEST(Confusion, HandCountedTwoClassFixture) {
  auto vocab = vocab_of(2);
  auto pred = [&](double p0) { return make_prediction(vocab, std::vector<double>{p0, 1 - p0}); };
  // truth c10: predicted c10, c11, c10; truth c11: predicted c11, c10, c11, c11; tie goes to c10.
  std::vector<Prediction> preds{pred(0.9), pred(0.2), pred(0.5), pred(0.1), pred(0.6), pred(0.3), pred(0.4)};
  std::vector<std::string> truth{"c10", "c10", "c10", "c11", "c11", "c11", "c11"};
  auto m = confusion_matrix(preds, truth, vocab);
  EXPECT_EQ(m.counts, (std::vector<std::vector<std::size_t>>{{2, 1}, {1, 3}}));
  EXPECT_EQ(m.total(), 7u);
  EXPECT_EQ(m.trace(), 5u);
}

TEST(Confusion, MatchesBruteForceOn1000RandomFixtures) {
  std::mt19937_64 rng(202);
  std::uniform_int_distribution<int> classes(2, 9), samples(1, 40);
  for (int fixture = 0; fixture < 1000; ++fixture) {
    auto vocab = vocab_of(classes(rng));
    const std::size_t c = vocab.size();
    const int n = samples(rng);
    std::uniform_int_distribution<std::size_t> truth_dist(0, c - 1);
    std::vector<Prediction> preds;
    std::vector<std::string> names;
    std::vector<std::vector<std::size_t>> oracle(c, std::vector<std::size_t>(c, 0));
    std::vector<std::size_t> per_class(c, 0);
    for (int i = 0; i < n; ++i) {
      preds.push_back(random_prediction(vocab, rng));
      const std::size_t t = truth_dist(rng);
      names.push_back(vocab.name(t));
      auto p = probabilities(preds.back(), c);
      std::size_t argmax = 0;
      for (std::size_t j = 1; j < c; ++j) {
        if (p[j] > p[argmax]) argmax = j;
      }
      ++oracle[t][argmax];
      ++per_class[t];
    }
    auto m = confusion_matrix(preds, names, vocab);
    ASSERT_EQ(m.counts, oracle) << "fixture " << fixture;
    for (std::size_t i = 0; i < c; ++i) {
      EXPECT_EQ(std::accumulate(m.counts[i].begin(), m.counts[i].end(), std::size_t{0}), per_class[i]);
    }
    EXPECT_EQ(m.accuracy(), top_k_accuracy(preds, names, 1));
  }
}

TEST(Protocol, ParseAndColumns) {
  EXPECT_EQ(parse_protocol("stanford"), Protocol::stanford);
  EXPECT_EQ(parse_protocol("compcars_cls"), Protocol::compcars_cls);
  EXPECT_EQ(parse_protocol("compcars_verif"), Protocol::compcars_verif);
  EXPECT_EQ(parse_protocol("synthetic"), Protocol::generic);
  EXPECT_THROW(parse_protocol("imagenet"), Error);
  EXPECT_EQ(protocol_columns(Protocol::stanford), std::vector<std::string>{"Accuracy (top1)"});
  EXPECT_EQ(protocol_columns(Protocol::compcars_cls),
            (std::vector<std::string>{"Accuracy (top1)", "Accuracy (top5)"}));
  EXPECT_EQ(protocol_columns(Protocol::compcars_verif),
            (std::vector<std::string>{"Accuracy(Easy)", "Accuracy(Medium)", "Accuracy(Hard)"}));
}

TEST(Protocol, PublishedReferenceRows) {
  auto find = [](Protocol p, const std::string& method) {
    for (const auto& r : reference_rows(p)) {
      if (r.method == method) return r.accuracies;
    }
    return std::vector<double>{};
  };
  EXPECT_EQ(find(Protocol::stanford, "Published MMCR network"), std::vector<double>{93.6});
  EXPECT_EQ(find(Protocol::stanford, "Krause et al."), std::vector<double>{92.8});
  EXPECT_EQ(find(Protocol::compcars_cls, "Published MMCR network"), (std::vector<double>{95.88, 99.53}));
  EXPECT_EQ(find(Protocol::compcars_cls, "GoogLeNet"), (std::vector<double>{91.2, 98.1}));
  EXPECT_EQ(find(Protocol::compcars_cls, "Overfeat"), (std::vector<double>{87.9, 96.9}));
  EXPECT_EQ(find(Protocol::compcars_cls, "AlexNet"), (std::vector<double>{81.9, 94.0}));
  EXPECT_EQ(find(Protocol::compcars_verif, "Published MMCR network (fine-tuned)"),
            (std::vector<double>{93.00, 86.18, 80.05}));
  EXPECT_EQ(find(Protocol::compcars_verif, "Published MMCR network (no fine-tuning)"),
            (std::vector<double>{92.03, 86.52, 80.17}));
  for (auto p : {Protocol::stanford, Protocol::compcars_cls, Protocol::compcars_verif}) {
    for (const auto& r : reference_rows(p)) EXPECT_EQ(r.accuracies.size(), protocol_columns(p).size());
  }
}

namespace {

// Untrained tiny model over a written synthetic manifest.
struct SmallBench {
  TempDir dir;
  std::vector<ImageRecord> records;
  ClassifierModel model;

  explicit SmallBench(Granularity g) {
    SyntheticOptions o;
    o.n_classes = 6;
    o.n_per_class = 5;
    o.color_mode = g == Granularity::color;
    records = generate_synthetic(o, dir.path());
    model.vocabulary = LabelVocabulary::from_records(records, g);
    nn::Architecture arch;
    arch.input_size = 16;
    arch.embedding_dim = 8;
    arch.num_classes = static_cast<int>(model.vocabulary.size());
    model.network = nn::Network(arch, 1);
  }
};

}  // namespace

TEST(BenchmarkReport, GenericTotalsEqualTestSplit) {
  SmallBench b(Granularity::make_model);
  auto report = benchmark_report(b.model, b.records, b.dir.path(), Protocol::generic);
  const auto test_count = filter_split(b.records, Split::test).size();
  EXPECT_EQ(report.results["results"]["total"], test_count);
  EXPECT_EQ(report.results["dataset"]["test_images"], test_count);
  EXPECT_EQ(report.results["dataset"]["train_images"], b.records.size() - test_count);
  EXPECT_EQ(report.results["dataset"]["classes"], 6);
  EXPECT_EQ(report.results["model_digest"], b.model.digest());
  EXPECT_EQ(report.results["confusion_matrix"].size(), 6u);
  EXPECT_NE(report.table.find("| Method"), std::string::npos);
  EXPECT_NE(report.table.find("Accuracy (top5)"), std::string::npos);
  EXPECT_TRUE(report.results["reference"].empty());
}

TEST(BenchmarkReport, CompcarsClassificationTableShape) {
  SmallBench b(Granularity::make_model);
  auto report = benchmark_report(b.model, b.records, b.dir.path(), Protocol::compcars_cls);
  EXPECT_NE(report.table.find("Accuracy (top1)"), std::string::npos);
  EXPECT_NE(report.table.find("Accuracy (top5)"), std::string::npos);
  EXPECT_NE(report.table.find("GoogLeNet [published]"), std::string::npos);
  EXPECT_NE(report.table.find("91.20%"), std::string::npos);
  EXPECT_EQ(report.results["reference"].size(), 4u);
  EXPECT_EQ(report.results["reference"][1]["provenance"], "published");
}

TEST(BenchmarkReport, GranularityMismatchIsUsageError) {
  SmallBench b(Granularity::make_model);
  for (auto p : {Protocol::stanford, Protocol::compcars_verif}) {
    try {
      benchmark_report(b.model, b.records, b.dir.path(), p);
      ADD_FAILURE() << to_string(p);
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::usage);
    }
  }
  SmallBench c(Granularity::color);
  try {
    benchmark_report(c.model, c.records, c.dir.path(), Protocol::compcars_cls);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::usage);
  }
  // Color models run under the generic protocol with masked inputs.
  auto report = benchmark_report(c.model, c.records, c.dir.path(), Protocol::generic);
  EXPECT_EQ(report.results["dataset"]["granularity"], "color");
}

TEST(BenchmarkReport, VerificationTableShape) {
  VerificationReport v;
  v.fine_tuned.model_digest = std::string(64, 'a');
  v.fine_tuned.threshold.threshold = 1.5;
  v.fine_tuned.sets = {{"easy", {10, 9, 0.9}}, {"medium", {10, 8, 0.8}}, {"hard", {10, 7, 0.7}}};
  v.frozen = v.fine_tuned;
  auto report = benchmark_report(v, 40);
  EXPECT_EQ(report.results["protocol"], "compcars_verif");
  EXPECT_EQ(report.results["calibration_pairs"], 40);
  EXPECT_NE(report.table.find("Accuracy(Easy)"), std::string::npos);
  EXPECT_NE(report.table.find("Accuracy(Hard)"), std::string::npos);
  EXPECT_NE(report.table.find("90.00%"), std::string::npos);
  EXPECT_NE(report.table.find("This model (frozen features)"), std::string::npos);
  EXPECT_NE(report.table.find("93.00%"), std::string::npos);
  EXPECT_NE(report.table.find("evaluated pairs: 30"), std::string::npos);
}
