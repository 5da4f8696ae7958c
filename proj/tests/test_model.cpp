#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "mmcr/error.hpp"
#include "mmcr/model.hpp"
#include "support.hpp"

using namespace mmcr;
using mmcr::testing::TempDir;

namespace {

const mmcr::testing::TrainedFixture& color_fixture() {
  static const auto f = mmcr::testing::train_fixture(true, 20, 32, 10, 7);
  return f;
}

std::vector<Image> random_images(int n, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Image> out;
  for (int i = 0; i < n; ++i) out.push_back(mmcr::testing::random_image(size, size, rng));
  return out;
}

LabeledImages random_labeled(int n, int size, int classes, std::uint64_t seed) {
  LabeledImages out;
  out.images = random_images(n, size, seed);
  for (int i = 0; i < n; ++i) {
    out.ids.push_back("r" + std::to_string(i));
    out.labels.push_back(i % classes);
  }
  return out;
}

}  // namespace

TEST(Network, GradientMatchesCentralDifferences) {
  nn::Architecture arch;
  arch.input_size = 12;
  arch.embedding_dim = 16;
  arch.num_classes = 4;
  nn::Network net(arch, 3);
  auto images = random_images(4, 12, 5);
  auto x = nn::to_input(images);
  const std::vector<int> labels{0, 1, 2, 3};
  auto grads = net.zero_gradients();
  net.backward(net.forward_train(x), labels, grads);

  // Ten parameters sampled across all trainable tensors.
  std::vector<std::pair<std::size_t, Eigen::Index>> picks;
  std::mt19937_64 rng(11);
  std::vector<std::size_t> trainable;
  for (std::size_t t = 0; t < net.tensors().size(); ++t) {
    if (net.tensors()[t].trainable) trainable.push_back(t);
  }
  while (picks.size() < 10) {
    const std::size_t t = trainable[rng() % trainable.size()];
    const Eigen::Index k = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(net.tensors()[t].value.size()));
    if (std::abs(grads[t].data()[k]) < 1e-7) continue;  // dead ReLU units give no signal
    picks.emplace_back(t, k);
  }
  for (auto [t, k] : picks) {
    double& w = net.tensors()[t].value.data()[k];
    const double original = w, h = 1e-5;
    w = original + h;
    const double plus = nn::Network::loss(net.forward_train(x), labels);
    w = original - h;
    const double minus = nn::Network::loss(net.forward_train(x), labels);
    w = original;
    const double numeric = (plus - minus) / (2 * h);
    const double analytic = grads[t].data()[k];
    const double rel = std::abs(numeric - analytic) / std::max(std::abs(numeric), std::abs(analytic));
    EXPECT_LE(rel, 1e-3) << net.tensors()[t].name << "[" << k << "]";
  }
}

TEST(Network, ParameterCountAndPresets) {
  for (auto preset : {nn::Preset::tiny, nn::Preset::small, nn::Preset::base}) {
    nn::Architecture arch;
    arch.preset = preset;
    arch.input_size = 32;
    arch.num_classes = 5;
    nn::Network net(arch, 1);
    EXPECT_GT(net.parameter_count(), 0u);
    auto p = net.predict(nn::to_input(random_images(2, 32, 1)));
    EXPECT_EQ(p.rows(), 5);
    EXPECT_EQ(p.cols(), 2);
  }
  EXPECT_THROW(nn::parse_preset("huge"), Error);
}

TEST(Prediction, SumsToOneAndIsRanked) {
  nn::Architecture arch;
  arch.input_size = 16;
  arch.num_classes = 7;
  ClassifierModel model;
  model.network = nn::Network(arch, 9);
  model.vocabulary = LabelVocabulary({"a", "b", "c", "d", "e", "f", "g"}, Granularity::make);
  for (const auto& p : predict_batch(model, random_images(50, 16, 2))) {
    ASSERT_EQ(p.ranked.size(), 7u);
    double sum = 0;
    for (std::size_t i = 0; i < p.ranked.size(); ++i) {
      sum += p.ranked[i].confidence;
      EXPECT_GE(p.ranked[i].confidence, 0.0);
      if (i) {
        EXPECT_GE(p.ranked[i - 1].confidence, p.ranked[i].confidence);
      }
      EXPECT_EQ(model.vocabulary.name(p.ranked[i].index), p.ranked[i].name);
    }
    EXPECT_NEAR(sum, 1.0, 1e-5);
  }
}

TEST(Prediction, TiesBreakByVocabularyIndex) {
  LabelVocabulary v({"a", "b", "c"}, Granularity::make);
  const std::vector<double> probs{0.25, 0.5, 0.25};
  auto p = make_prediction(v, probs);
  EXPECT_EQ(p.ranked[0].name, "b");
  EXPECT_EQ(p.ranked[1].name, "a");
  EXPECT_EQ(p.ranked[2].name, "c");
}

TEST(Inference, BatchEqualsSingletonAndDuplicatesAgree) {
  const auto& f = color_fixture();
  std::vector<Image> batch(f.heldout.images.begin(), f.heldout.images.begin() + 20);
  batch.push_back(batch[3]);
  auto together = predict_batch(f.model, batch);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto alone = predict_batch(f.model, std::span<const Image>(&batch[i], 1)).front();
    for (std::size_t k = 0; k < alone.ranked.size(); ++k) {
      EXPECT_EQ(alone.ranked[k].name, together[i].ranked[k].name);
      EXPECT_NEAR(alone.ranked[k].confidence, together[i].ranked[k].confidence, 1e-5);
    }
  }
  for (std::size_t k = 0; k < together[3].ranked.size(); ++k) {
    EXPECT_EQ(together[3].ranked[k].confidence, together.back().ranked[k].confidence);
  }
}

TEST(Inference, WrongInputSizeIsAShapeError) {
  const auto& f = color_fixture();
  auto wrong = random_images(1, 40, 3);
  try {
    predict_batch(f.model, wrong);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::shape);
    const std::string msg = e.what();
    EXPECT_NE(msg.find("32"), std::string::npos) << msg;
    EXPECT_NE(msg.find("40"), std::string::npos) << msg;
  }
  EXPECT_THROW(extract_features(f.model, wrong), Error);
}

TEST(Features, ShapeDeterminismAndHeadAgreement) {
  const auto& f = color_fixture();
  std::vector<Image> batch(f.heldout.images.begin(), f.heldout.images.begin() + 12);
  batch.push_back(batch[0]);
  auto features = extract_features(f.model, batch);
  ASSERT_EQ(features.size(), batch.size());
  for (const auto& v : features) EXPECT_EQ(v.size(), static_cast<std::size_t>(f.model.embedding_dim()));
  EXPECT_EQ(features[0], features.back());
  auto via_head = classify_embeddings(f.model, features);
  auto direct = predict_batch(f.model, batch);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (std::size_t k = 0; k < direct[i].ranked.size(); ++k) {
      EXPECT_EQ(via_head[i].ranked[k].name, direct[i].ranked[k].name);
      EXPECT_NEAR(via_head[i].ranked[k].confidence, direct[i].ranked[k].confidence, 1e-5);
    }
  }
  std::vector<EmbeddingVector> bad{EmbeddingVector(3, 0.0)};
  EXPECT_THROW(classify_embeddings(f.model, bad), Error);
}

TEST(Features, IntraClassCloserThanInterClass) {
  const auto& f = color_fixture();
  const auto& data = f.heldout;
  auto features = extract_features(f.model, data.images);
  // Two classes: the first two labels present in the held-out set.
  const int a = data.labels.front();
  int b = a;
  for (int l : data.labels) {
    if (l != a) {
      b = l;
      break;
    }
  }
  ASSERT_NE(a, b);
  auto dist = [](const EmbeddingVector& x, const EmbeddingVector& y) {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
    return std::sqrt(s);
  };
  double intra = 0, inter = 0;
  int n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    for (std::size_t j = i + 1; j < features.size(); ++j) {
      const int li = data.labels[i], lj = data.labels[j];
      if ((li != a && li != b) || (lj != a && lj != b)) continue;
      if (li == lj) {
        intra += dist(features[i], features[j]);
        ++n_intra;
      } else {
        inter += dist(features[i], features[j]);
        ++n_inter;
      }
    }
  }
  ASSERT_GT(n_intra, 0);
  ASSERT_GT(n_inter, 0);
  EXPECT_LT(intra / n_intra, inter / n_inter);
}

TEST(Training, ColorSetReachesHighHeldOutAccuracy) {
  const auto& f = color_fixture();
  auto predictions = predict_batch(f.model, f.heldout.images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    correct += predictions[i].top().index == static_cast<std::size_t>(f.heldout.labels[i]);
  }
  EXPECT_GE(static_cast<double>(correct) / predictions.size(), 0.99);
}

TEST(Training, LossDecreasesAndLogIsDeterministic) {
  auto data = random_labeled(24, 16, 3, 4);
  LabelVocabulary v({"x", "y", "z"}, Granularity::make);
  TrainConfig c;
  c.epochs = 4;
  c.batch_size = 8;
  c.embedding_dim = 16;
  auto first = train(data, &data, v, {}, c);
  auto second = train(data, &data, v, {}, c);
  ASSERT_EQ(first.log.epochs.size(), 4u);
  EXPECT_EQ(first.log.to_jsonl(), second.log.to_jsonl());
  EXPECT_EQ(serialize_model(first.model), serialize_model(second.model));
  EXPECT_LT(first.log.epochs.back().train_loss, first.log.epochs.front().train_loss);
  EXPECT_EQ(first.log.mode, "train");
}

TEST(Training, ZeroLearningRateKeepsWeights) {
  auto data = random_labeled(16, 16, 2, 6);
  LabelVocabulary v({"x", "y"}, Granularity::make);
  TrainConfig c;
  c.epochs = 1;
  c.learning_rate = 0.0;
  c.embedding_dim = 16;
  auto result = train(data, nullptr, v, {}, c);
  nn::Architecture arch = result.model.network.architecture();
  nn::Network initial(arch, c.seed);
  for (std::size_t t = 0; t < initial.tensors().size(); ++t) {
    if (!initial.tensors()[t].trainable) continue;
    EXPECT_EQ(initial.tensors()[t].value, result.model.network.tensors()[t].value)
        << initial.tensors()[t].name;
  }
}

TEST(Training, InputErrors) {
  LabelVocabulary v({"x", "y"}, Granularity::make);
  TrainConfig c;
  LabeledImages empty;
  try {
    train(empty, nullptr, v, {}, c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::usage);
  }
  auto data = random_labeled(4, 16, 2, 1);
  data.labels[2] = 5;
  try {
    train(data, nullptr, v, {}, c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("r2"), std::string::npos);
  }
  ImageRecord r;
  r.id = "needs-label";
  r.path = "x.png";
  try {
    load_labeled({r}, Split::train, v, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::data);
    EXPECT_NE(std::string(e.what()).find("needs-label"), std::string::npos);
  }
  c.epochs = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(TrainConfigJson, RoundTripAndDigest) {
  TrainConfig c;
  c.epochs = 3;
  c.preset = nn::Preset::small;
  c.brightness_jitter = 0.2;
  auto back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.digest(), c.digest());
  back.seed = 99;
  EXPECT_NE(back.digest(), c.digest());
  EXPECT_DOUBLE_EQ(c.learning_rate_at(0), c.learning_rate);
}

TEST(FineTune, ZeroLearningRateOnSameDataKeepsPredictions) {
  const auto& f = color_fixture();
  std::vector<ImageRecord> records;
  for (const auto& s : f.samples) records.push_back(s.record);
  auto train_set = mmcr::testing::aligned_set(f.samples, Split::train, f.vocabulary, 32, true);
  TrainConfig c;
  c.learning_rate = 0.0;
  c.epochs = 1;
  c.embedding_dim = 64;
  auto tuned = fine_tune(f.model, train_set, nullptr, f.vocabulary, f.model.class_parts, c);
  EXPECT_EQ(tuned.log.mode, "fine_tune");
  ASSERT_TRUE(tuned.log.parent_digest.has_value());
  EXPECT_EQ(*tuned.log.parent_digest, f.model.digest());
  auto a = predict_probabilities(f.model, f.heldout.images);
  auto b = predict_probabilities(tuned.model, f.heldout.images);
  EXPECT_EQ(a, b);
}

TEST(FineTune, DisjointVocabularyResizesTheOutputStage) {
  const auto& f = color_fixture();
  auto data = random_labeled(8, 32, 3, 2);
  LabelVocabulary v({"p", "q", "r"}, Granularity::make);
  TrainConfig c;
  c.epochs = 1;
  auto tuned = fine_tune(f.model, data, nullptr, v, {}, c);
  EXPECT_EQ(tuned.model.network.architecture().num_classes, 3);
  EXPECT_EQ(predict_batch(tuned.model, data.images).front().ranked.size(), 3u);
  EXPECT_EQ(tuned.model.embedding_dim(), f.model.embedding_dim());
}

TEST(FineTune, PretrainedParentBeatsScratchOnNewClasses) {
  // Parent: 10 shape families. Child task: 5 unseen families, small budget.
  auto parent = mmcr::testing::train_fixture(false, 30, 32, 12, 8);
  SyntheticOptions o;
  o.n_classes = 5;
  o.n_per_class = 20;
  o.class_offset = 10;
  o.seed = 21;
  auto samples = render_synthetic(o);
  std::vector<ImageRecord> records;
  for (const auto& s : samples) records.push_back(s.record);
  auto v = LabelVocabulary::from_records(records, Granularity::make_model);
  auto train_set = mmcr::testing::aligned_set(samples, Split::train, v, 32, false);
  auto heldout = mmcr::testing::aligned_set(samples, Split::test, v, 32, false);
  TrainConfig c;
  c.epochs = 3;
  c.lr_step_epochs = 0;
  c.horizontal_flip = false;
  c.embedding_dim = 64;
  auto tuned = fine_tune(parent.model, train_set, &heldout, v, class_parts(records, v.granularity()), c);
  auto scratch = train(train_set, &heldout, v, class_parts(records, v.granularity()), c);
  const double tuned_acc = *tuned.log.epochs.back().heldout_accuracy;
  const double scratch_acc = *scratch.log.epochs.back().heldout_accuracy;
  EXPECT_GT(tuned_acc, scratch_acc) << "fine-tuned " << tuned_acc << " scratch " << scratch_acc;
}

TEST(ModelFile, RoundTripProbeBatch) {
  const auto& f = color_fixture();
  TempDir dir;
  save_model(f.model, dir / "m.mmcr");
  auto loaded = load_model(dir / "m.mmcr");
  EXPECT_EQ(loaded.vocabulary, f.model.vocabulary);
  EXPECT_EQ(loaded.class_parts, f.model.class_parts);
  EXPECT_EQ(loaded.digest(), f.model.digest());
  auto a = predict_probabilities(f.model, f.heldout.images);
  auto b = predict_probabilities(loaded, f.heldout.images);
  EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-6);
  const std::string bytes = mmcr::testing::read_file(dir / "m.mmcr");
  EXPECT_EQ(bytes.substr(0, 4), "MMCR");
}

TEST(ModelFile, TruncationAndDamageAreCorruption) {
  const auto& f = color_fixture();
  const std::string bytes = serialize_model(f.model);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    try {
      deserialize_model(std::string_view(bytes).substr(0, cut));
      FAIL() << "cut " << cut;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::corruption) << "cut " << cut;
    }
  }
  std::string damaged = bytes;
  damaged[bytes.size() / 3] ^= 0x20;
  try {
    deserialize_model(damaged);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::corruption);
  }
  TempDir dir;
  mmcr::testing::write_file(dir / "half.mmcr", bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_model(dir / "half.mmcr"), Error);
}

TEST(ModelFile, SchemaAndDigestChecks) {
  const auto& f = color_fixture();
  auto container = parse_container(serialize_model(f.model));

  auto wrong_version = container;
  wrong_version.version = 99;
  try {
    parse_container(serialize_container(wrong_version));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::schema);
  }

  auto no_vocabulary = container;
  no_vocabulary.metadata.erase("vocabulary");
  try {
    deserialize_model(serialize_container(no_vocabulary));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::schema);
  }

  auto wrong_digest = container;
  wrong_digest.vocabulary_digest = std::string(64, '0');
  try {
    deserialize_model(serialize_container(wrong_digest));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::corruption);
  }
}
