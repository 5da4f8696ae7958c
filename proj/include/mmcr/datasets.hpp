#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mmcr/manifest.hpp"
#include "mmcr/verify.hpp"

namespace mmcr {

/// Records plus the ids whose image file did not resolve. Unresolved records
/// stay in `records`; they are reported, not dropped.
struct IngestResult {
  std::vector<ImageRecord> records;
  std::vector<std::string> unresolved;
};

// Published benchmark sizes.
inline constexpr std::size_t kStanfordTrain = 8144;
inline constexpr std::size_t kStanfordTest = 8041;
inline constexpr std::size_t kStanfordClasses = 196;
inline constexpr std::size_t kCompCarsTrain = 36456;
inline constexpr std::size_t kCompCarsTest = 15627;
inline constexpr std::size_t kCompCarsClasses = 431;
inline constexpr std::size_t kCompCarsPairsPerSet = 20000;

/// Splits a Stanford class name "Make Model Words Year" into its parts;
/// multi-word makes ("AM General", "Aston Martin", "Land Rover") are recognized.
ClassParts parse_stanford_class_name(const std::string& name);

/// Stanford Cars, from the devkit annotation table exported as CSV:
///   relative_im_path,bbox_x1,bbox_y1,bbox_x2,bbox_y2,class,test
/// (1-based class index, test = 1 for the test split; a header row is optional)
/// and the class-name list (one per line, in class-index order). The class
/// name file defaults to class_names.txt beside the annotation file.
IngestResult load_stanford(const std::filesystem::path& annotation_path,
                           const std::filesystem::path& images_root,
                           const std::filesystem::path& class_names_path = {});

enum class CompCarsTask { classification, verification };
CompCarsTask parse_compcars_task(std::string_view text);

struct CompCarsVerification {
  IngestResult images;                                        // every image named by a pair list
  std::map<std::string, std::vector<VerificationPair>> sets;  // easy / medium / hard
  std::vector<ImageRecord> train_records;                     // verification_train.txt, if present
};

/// CompCars classification split from the release tree:
///   train_test_split/classification/{train,test}.txt  (make/model/year/file.jpg)
///   label/<same path>.txt                              (viewpoint, box count, "x1 y1 x2 y2")
/// Make and model are the release's numeric directory ids.
IngestResult load_compcars_classification(const std::filesystem::path& dataset_root,
                                          const std::filesystem::path& images_root);

/// CompCars verification: train_test_split/verification/verification_pairs_{easy,medium,hard}.txt
/// with "path_a path_b 1|0" lines.
CompCarsVerification load_compcars_verification(const std::filesystem::path& dataset_root,
                                                const std::filesystem::path& images_root);

struct CountCheck {
  std::string name;
  std::size_t expected = 0;
  std::size_t actual = 0;
  bool ok() const { return expected == actual; }
};

std::vector<CountCheck> check_stanford_counts(const std::vector<ImageRecord>& records);
std::vector<CountCheck> check_compcars_counts(const std::vector<ImageRecord>& records);
std::vector<CountCheck> check_compcars_pair_counts(const CompCarsVerification& verification);

}  // namespace mmcr
