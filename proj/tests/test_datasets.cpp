#include <gtest/gtest.h>

#include "mmcr/datasets.hpp"
#include "mmcr/error.hpp"
#include "support.hpp"

using namespace mmcr;
using mmcr::testing::TempDir;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = MMCR_FIXTURE_DIR;

// Copies a fixture tree and renders small images for the listed entries.
fs::path stage(const TempDir& dir, const std::string& name, const std::vector<std::string>& images,
               const fs::path& image_root_rel) {
  fs::copy(kFixtures / name, dir / name, fs::copy_options::recursive);
  for (const auto& rel : images) {
    auto path = dir.path() / name / image_root_rel / rel;
    fs::create_directories(path.parent_path());
    write_png(Image(200, 160, 90), path);
  }
  return dir.path() / name;
}

}  // namespace

TEST(Stanford, FiveEntryFixtureMatchesByteForByte) {
  TempDir dir;
  auto root = stage(dir, "stanford",
                    {"car_ims/000001.jpg", "car_ims/000002.jpg", "car_ims/000003.jpg", "car_ims/000004.jpg"}, "");
  auto result = load_stanford(root / "cars_annos.csv", root);
  ASSERT_EQ(result.records.size(), 5u);
  const std::vector<std::string> boxes = {"112,7,853,717", "48,24,441,202", "7,4,277,180", "33,50,197,150",
                                          "5,8,83,58"};
  for (std::size_t i = 0; i < 5; ++i) {
    ASSERT_TRUE(result.records[i].bbox.has_value());
    EXPECT_EQ(format_bbox(*result.records[i].bbox), boxes[i]);
    EXPECT_EQ(result.records[i].source, Source::stanford);
    EXPECT_TRUE(class_label(result.records[i], Granularity::make_model_year).has_value());
  }
  EXPECT_EQ(result.records[0].make, "AM General");
  EXPECT_EQ(result.records[0].model, "Hummer SUV");
  EXPECT_EQ(result.records[0].year, 2000);
  EXPECT_EQ(result.records[2].make, "Aston Martin");
  EXPECT_EQ(result.records[4].make, "Land Rover");
  EXPECT_EQ(result.records[4].model, "Range Rover SUV");
  EXPECT_EQ(result.records[1].split, Split::train);
  EXPECT_EQ(result.records[2].split, Split::test);
  // The fifth image was not rendered: flagged, not dropped.
  EXPECT_EQ(result.unresolved, (std::vector<std::string>{"car_ims/000005.jpg"}));
}

TEST(Stanford, EmptyAnnotationFileGivesNoRecords) {
  TempDir dir;
  mmcr::testing::write_file(dir / "annos.csv", "");
  auto result = load_stanford(dir / "annos.csv", dir.path());
  EXPECT_TRUE(result.records.empty());
  EXPECT_TRUE(result.unresolved.empty());
}

TEST(Stanford, CorruptEntryIsNamed) {
  TempDir dir;
  mmcr::testing::write_file(dir / "class_names.txt", "Acura RL Sedan 2012\n");
  mmcr::testing::write_file(dir / "annos.csv", "a.jpg,1,2,30,40,1,0\nb.jpg,1,2,x,40,1,0\n");
  try {
    load_stanford(dir / "annos.csv", dir.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::data);
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_stanford(dir / "missing.csv", dir.path()), Error);
}

TEST(Stanford, ClassNameParsing) {
  auto p = parse_stanford_class_name("BMW M3 Coupe 2012");
  EXPECT_EQ(p.make, "BMW");
  EXPECT_EQ(p.model, "M3 Coupe");
  EXPECT_EQ(p.year, 2012);
  EXPECT_THROW(parse_stanford_class_name("BMW"), Error);
  EXPECT_THROW(parse_stanford_class_name("BMW M3 Coupe"), Error);
}

TEST(CompCars, ThreeEntryTrainTreeParsesDirectories) {
  TempDir dir;
  auto root = stage(dir, "compcars",
                    {"78/1/2014/3ac218c0c6c378.jpg", "78/1/2014/a64e8d3f0e6e7a.jpg",
                     "45/298/2011/0a1b2c3d4e5f60.jpg", "78/1/2014/f0e1d2c3b4a596.jpg"},
                    "image");
  auto result = load_compcars_classification(root, root / "image");
  ASSERT_EQ(result.records.size(), 4u);
  EXPECT_EQ(filter_split(result.records, Split::train).size(), 3u);
  EXPECT_EQ(result.records[0].make, "78");
  EXPECT_EQ(result.records[0].model, "1");
  EXPECT_EQ(result.records[0].year, 2014);
  EXPECT_EQ(result.records[2].make, "45");
  EXPECT_EQ(result.records[2].model, "298");
  EXPECT_EQ(format_bbox(*result.records[0].bbox), "12,30,180,140");
  EXPECT_EQ(class_label(result.records[0], Granularity::make_model), "78_1");
  EXPECT_TRUE(result.unresolved.empty());
  EXPECT_EQ(LabelVocabulary::from_records(result.records, Granularity::make_model).size(), 2u);
}

TEST(CompCars, VerificationSetsAreTagged) {
  TempDir dir;
  auto root = stage(dir, "compcars", {}, "image");
  auto v = load_compcars_verification(root, root / "image");
  ASSERT_EQ(v.sets.size(), 3u);
  EXPECT_EQ(v.sets.at("easy").size(), 2u);
  EXPECT_EQ(v.sets.at("medium").size(), 1u);
  EXPECT_EQ(v.sets.at("hard").size(), 1u);
  EXPECT_EQ(v.sets.at("easy")[0].label, PairLabel::same);
  EXPECT_EQ(v.sets.at("easy")[1].label, PairLabel::different);
  EXPECT_EQ(v.images.records.size(), 4u);
  EXPECT_EQ(v.images.unresolved.size(), 4u);
  EXPECT_EQ(v.train_records.size(), 4u);
}

TEST(CompCars, MissingPairListAndUnknownTask) {
  TempDir dir;
  auto root = stage(dir, "compcars", {}, "image");
  fs::remove(root / "train_test_split" / "verification" / "verification_pairs_hard.txt");
  try {
    load_compcars_verification(root, root / "image");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::data);
  }
  try {
    parse_compcars_task("detection");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::usage);
  }
}

TEST(PublishedCounts, ChecksReportMismatches) {
  TempDir dir;
  auto root = stage(dir, "stanford", {}, "");
  auto result = load_stanford(root / "cars_annos.csv", root);
  auto checks = check_stanford_counts(result.records);
  ASSERT_EQ(checks.size(), 3u);
  EXPECT_EQ(checks[0].expected, 8144u);
  EXPECT_EQ(checks[1].expected, 8041u);
  EXPECT_EQ(checks[2].expected, 196u);
  EXPECT_FALSE(checks[0].ok());
  EXPECT_EQ(checks[2].actual, 4u);
}
