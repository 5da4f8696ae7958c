#include "mmcr/cli.hpp"

#include <csignal>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <set>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "mmcr/config.hpp"
#include "mmcr/datasets.hpp"
#include "mmcr/digest.hpp"
#include "mmcr/error.hpp"
#include "mmcr/eval.hpp"
#include "mmcr/image.hpp"
#include "mmcr/manifest.hpp"
#include "mmcr/model.hpp"
#include "mmcr/preprocess.hpp"
#include "mmcr/prune.hpp"
#include "mmcr/service.hpp"
#include "mmcr/synthetic.hpp"
#include "mmcr/verify.hpp"

namespace mmcr {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// A command-line option that feeds one settings key when given.
struct Binding {
  std::string section;
  std::string key;
  std::function<std::optional<json>()> value;
};

class Binder {
 public:
  Binder(std::vector<Binding>& bindings, CLI::App* app, std::string section)
      : bindings_(bindings), app_(app), section_(std::move(section)) {}

  template <typename T>
  CLI::Option* option(const std::string& name, const std::string& key, const std::string& help) {
    auto slot = std::make_shared<T>();
    CLI::Option* opt = app_->add_option(name, *slot, help);
    bindings_.push_back({section_, key, [slot, opt]() -> std::optional<json> {
                           if (opt->count() == 0) return std::nullopt;
                           return json(*slot);
                         }});
    return opt;
  }

  CLI::Option* flag(const std::string& name, const std::string& key, const std::string& help) {
    auto slot = std::make_shared<bool>(false);
    CLI::Option* opt = app_->add_flag(name, *slot, help);
    bindings_.push_back({section_, key, [slot, opt]() -> std::optional<json> {
                           if (opt->count() == 0) return std::nullopt;
                           return json(*slot);
                         }});
    return opt;
  }

 private:
  std::vector<Binding>& bindings_;
  CLI::App* app_;
  std::string section_;
};

struct Context {
  Settings settings;
  std::ostream& out;
  std::ostream& err;
};

std::string required(const Settings& s, const std::string& section, const std::string& key,
                     const std::string& flag) {
  auto v = s.get_optional_string(section, key);
  if (!v || v->empty()) {
    fail(ErrorKind::usage, fmt::format("missing required option {} (or {}.{} in the config)", flag,
                                       section, key));
  }
  return *v;
}

void emit(Context& ctx, const json& summary) { ctx.out << summary.dump() << '\n'; }

void write_text(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, fmt::format("cannot write '{}'", path.string()));
  out << text;
  if (!out) fail(ErrorKind::io, fmt::format("failed writing '{}'", path.string()));
}

json count_checks_json(const std::vector<CountCheck>& checks) {
  json out = json::array();
  for (const auto& c : checks) {
    out.push_back({{"name", c.name}, {"expected", c.expected}, {"actual", c.actual}, {"ok", c.ok()}});
  }
  return out;
}

std::size_t count_split(const std::vector<ImageRecord>& records, Split split) {
  return filter_split(records, split).size();
}

// Record ids become file names; anything outside a safe set is replaced and
// a short digest keeps the name unique.
std::string file_stem(const std::string& id) {
  std::string stem;
  bool changed = false;
  for (unsigned char c : id) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.') {
      stem.push_back(static_cast<char>(c));
    } else {
      stem.push_back('_');
      changed = true;
    }
  }
  if (changed || stem.empty() || stem[0] == '.') stem += "-" + sha256_hex(id).substr(0, 8);
  return stem;
}

ImageLoader manifest_loader(const std::vector<ImageRecord>& records, const fs::path& base,
                            const ClassifierModel& model) {
  auto by_id = std::make_shared<std::map<std::string, ImageRecord>>();
  for (const auto& r : records) by_id->emplace(r.id, r);
  const int size = model.input_size();
  const bool masked = model.vocabulary.granularity() == Granularity::color;
  return [by_id, base, size, masked](const std::string& id) {
    auto it = by_id->find(id);
    if (it == by_id->end()) fail(ErrorKind::data, fmt::format("no manifest record '{}'", id));
    return load_model_input(it->second, base, size, masked);
  };
}

TrainConfig train_config(const Settings& s) {
  TrainConfig c;
  c.epochs = static_cast<int>(s.get_int("train", "epochs", c.epochs));
  c.batch_size = static_cast<int>(s.get_int("train", "batch_size", c.batch_size));
  c.learning_rate = s.get_double("train", "lr", c.learning_rate);
  c.momentum = s.get_double("train", "momentum", c.momentum);
  c.weight_decay = s.get_double("train", "weight_decay", c.weight_decay);
  c.lr_step_epochs = static_cast<int>(s.get_int("train", "lr_step", c.lr_step_epochs));
  c.lr_decay = s.get_double("train", "lr_decay", c.lr_decay);
  c.seed = static_cast<std::uint64_t>(s.get_int("train", "seed", static_cast<long long>(c.seed)));
  c.horizontal_flip = s.get_bool("train", "flip", c.horizontal_flip);
  c.brightness_jitter = s.get_double("train", "jitter", c.brightness_jitter);
  c.preset = nn::parse_preset(s.get_string("train", "preset", nn::to_string(c.preset)));
  c.embedding_dim = static_cast<int>(s.get_int("train", "embedding_dim", c.embedding_dim));
  c.validate();
  return c;
}

void add_train_options(Binder& b) {
  b.option<std::string>("--manifest", "manifest", "Training manifest (train and test splits)");
  b.option<std::string>("--model", "model", "Output model file");
  b.option<std::string>("--granularity", "granularity", "make | make_model | make_model_year | color");
  b.option<int>("--epochs", "epochs", "Training epochs");
  b.option<int>("--batch-size", "batch_size", "Mini-batch size");
  b.option<double>("--lr", "lr", "Initial learning rate");
  b.option<double>("--momentum", "momentum", "SGD momentum");
  b.option<double>("--weight-decay", "weight_decay", "L2 weight decay");
  b.option<int>("--lr-step", "lr_step", "Epochs between learning-rate decays (0 = none)");
  b.option<double>("--lr-decay", "lr_decay", "Learning-rate decay factor");
  b.option<long long>("--seed", "seed", "Random seed");
  b.option<bool>("--flip", "flip", "Random horizontal flips (true|false)");
  b.option<double>("--jitter", "jitter", "Brightness jitter amplitude");
  b.option<std::string>("--preset", "preset", "tiny | small | base");
  b.option<int>("--embedding-dim", "embedding_dim", "Embedding width");
  b.option<int>("--size", "size", "Network input size (default: size of the first training image)");
  b.option<bool>("--mask", "mask", "Mask raw images while resizing (default: color models only)");
  b.option<std::string>("--log", "log", "Training log (JSONL); default <model>.log.jsonl");
}

json train_summary(const std::string& command, const TrainResult& result, const fs::path& model_path,
                   const fs::path& log_path, std::size_t n_train, std::size_t n_heldout) {
  json s = {{"command", command},
            {"model", model_path.string()},
            {"digest", result.model.digest()},
            {"classes", result.model.vocabulary.size()},
            {"granularity", to_string(result.model.vocabulary.granularity())},
            {"train_records", n_train},
            {"heldout_records", n_heldout},
            {"log", log_path.string()}};
  if (!result.log.epochs.empty()) {
    const auto& last = result.log.epochs.back();
    s["epochs"] = result.log.epochs.size();
    s["final_loss"] = last.train_loss;
    s["train_accuracy"] = last.train_accuracy;
    s["heldout_accuracy"] = last.heldout_accuracy ? json(*last.heldout_accuracy) : json(nullptr);
  }
  if (result.model.parent_digest) s["parent_digest"] = *result.model.parent_digest;
  return s;
}

int infer_input_size(const std::vector<ImageRecord>& records, const fs::path& base) {
  for (const auto& r : records) {
    if (r.split != Split::train) continue;
    Image img = read_image(resolve_path(r.path, base));
    return img.width == img.height ? img.width : PreprocessConfig{}.target_size;
  }
  fail(ErrorKind::usage, "manifest has no training records");
}

int run_train(Context& ctx, bool fine) {
  const auto& s = ctx.settings;
  const fs::path manifest_path = required(s, "train", "manifest", "--manifest");
  const fs::path model_path = required(s, "train", "model", "--model");
  const TrainConfig config = train_config(s);
  const auto records = load_manifest(manifest_path);
  const auto base = manifest_path.parent_path();

  std::optional<ClassifierModel> parent;
  if (fine) parent = load_model(required(s, "train", "parent", "--parent"));

  const Granularity granularity = parse_granularity(s.get_string(
      "train", "granularity",
      std::string(to_string(parent ? parent->vocabulary.granularity() : Granularity::make_model))));
  const auto vocabulary = LabelVocabulary::from_records(filter_split(records, Split::train), granularity);
  const int size = parent ? parent->input_size()
                          : static_cast<int>(s.get_int("train", "size", infer_input_size(records, base)));
  if (parent && s.has("train", "size") && s.get_int("train", "size", size) != size) {
    fail(ErrorKind::usage, fmt::format("the parent model takes {}x{} inputs", size, size));
  }
  const bool masked = s.get_bool("train", "mask", granularity == Granularity::color);

  auto train_set = load_labeled(records, Split::train, vocabulary, base, size, masked);
  auto heldout = load_labeled(filter_split(records, Split::test), Split::test, vocabulary, base, size, masked);
  auto parts = class_parts(records, granularity);
  TrainResult result = fine ? fine_tune(*parent, train_set, heldout.size() ? &heldout : nullptr,
                                        vocabulary, std::move(parts), config)
                            : train(train_set, heldout.size() ? &heldout : nullptr, vocabulary,
                                    std::move(parts), config);
  save_model(result.model, model_path);
  const fs::path log_path = s.get_string("train", "log", model_path.string() + ".log.jsonl");
  write_text(log_path, result.log.to_jsonl());
  emit(ctx, train_summary(fine ? "finetune" : "train", result, model_path, log_path, train_set.size(),
                          heldout.size()));
  return kExitOk;
}

int run_ingest(Context& ctx, const std::string& dataset) {
  const auto& s = ctx.settings;
  const fs::path out = required(s, "ingest", "out", "--out");
  if (dataset == "stanford") {
    const fs::path annotations = required(s, "ingest", "annotations", "--annotations");
    const fs::path images = required(s, "ingest", "images", "--images");
    const fs::path names = s.get_string("ingest", "class_names", "");
    auto result = load_stanford(annotations, images, names);
    save_manifest(result.records, out);
    emit(ctx, {{"command", "ingest"},
               {"dataset", "stanford"},
               {"manifest", out.string()},
               {"records", result.records.size()},
               {"train", count_split(result.records, Split::train)},
               {"test", count_split(result.records, Split::test)},
               {"classes", LabelVocabulary::from_records(result.records, Granularity::make_model_year).size()},
               {"unresolved", result.unresolved},
               {"published_counts", count_checks_json(check_stanford_counts(result.records))}});
    return kExitOk;
  }
  const fs::path root = required(s, "ingest", "root", "--root");
  const fs::path images = s.get_string("ingest", "images", (root / "image").string());
  const auto task = parse_compcars_task(s.get_string("ingest", "task", "classification"));
  if (task == CompCarsTask::classification) {
    auto result = load_compcars_classification(root, images);
    save_manifest(result.records, out);
    emit(ctx, {{"command", "ingest"},
               {"dataset", "compcars"},
               {"task", "classification"},
               {"manifest", out.string()},
               {"records", result.records.size()},
               {"train", count_split(result.records, Split::train)},
               {"test", count_split(result.records, Split::test)},
               {"classes", LabelVocabulary::from_records(result.records, Granularity::make_model).size()},
               {"unresolved", result.unresolved},
               {"published_counts", count_checks_json(check_compcars_counts(result.records))}});
    return kExitOk;
  }

  auto verification = load_compcars_verification(root, images);
  fs::create_directories(out);
  std::vector<ImageRecord> records = verification.images.records;
  std::set<std::string> ids;
  for (const auto& r : records) ids.insert(r.id);
  for (const auto& r : verification.train_records) {
    if (ids.insert(r.id).second) records.push_back(r);
  }
  save_manifest(records, out / "manifest.tsv");
  json sets = json::object();
  for (const auto& [name, pairs] : verification.sets) {
    save_pairs(pairs, out / fmt::format("pairs_{}.tsv", name));
    sets[name] = pairs.size();
  }
  std::size_t calibration = 0;
  if (!verification.train_records.empty()) {
    const auto n = static_cast<std::size_t>(s.get_int("ingest", "calibration_pairs", 2000));
    const auto seed = static_cast<std::uint64_t>(s.get_int("ingest", "seed", 1));
    auto pairs = sample_pairs(verification.train_records, Granularity::make_model, n, seed);
    save_pairs(pairs, out / "calibration.tsv");
    calibration = pairs.size();
  }
  emit(ctx, {{"command", "ingest"},
             {"dataset", "compcars"},
             {"task", "verification"},
             {"out", out.string()},
             {"records", records.size()},
             {"pair_sets", sets},
             {"calibration_pairs", calibration},
             {"unresolved", verification.images.unresolved},
             {"published_counts", count_checks_json(check_compcars_pair_counts(verification))}});
  return kExitOk;
}

int run_synth(Context& ctx) {
  const auto& s = ctx.settings;
  const fs::path out = required(s, "synth", "out", "--out");
  SyntheticOptions o;
  o.n_classes = static_cast<int>(s.get_int("synth", "classes", o.n_classes));
  o.n_per_class = static_cast<int>(s.get_int("synth", "per_class", o.n_per_class));
  const auto mode = s.get_string("synth", "mode", "shape");
  if (mode != "shape" && mode != "color") fail(ErrorKind::usage, fmt::format("unknown synth mode '{}'", mode));
  o.color_mode = mode == "color";
  o.seed = static_cast<std::uint64_t>(s.get_int("synth", "seed", static_cast<long long>(o.seed)));
  o.image_height = static_cast<int>(s.get_int("synth", "height", o.image_height));
  o.class_offset = static_cast<int>(s.get_int("synth", "offset", o.class_offset));
  auto records = generate_synthetic(o, out);
  emit(ctx, {{"command", "synth"},
             {"mode", mode},
             {"manifest", (out / "manifest.tsv").string()},
             {"records", records.size()},
             {"train", count_split(records, Split::train)},
             {"test", count_split(records, Split::test)},
             {"classes", o.n_classes}});
  return kExitOk;
}

int run_preprocess(Context& ctx) {
  const auto& s = ctx.settings;
  const fs::path manifest_path = required(s, "preprocess", "manifest", "--manifest");
  const fs::path out = required(s, "preprocess", "out", "--out");
  PreprocessConfig config;
  config.margin_fraction = s.get_double("preprocess", "margin", config.margin_fraction);
  config.target_size = static_cast<int>(s.get_int("preprocess", "size", config.target_size));
  config.apply_mask = s.get_bool("preprocess", "mask", false);
  const auto fill = s.get_string("preprocess", "fill", "black");
  if (fill == "black") {
    config.mask_fill = MaskFill::black;
  } else if (fill == "mean") {
    config.mask_fill = MaskFill::crop_mean;
  } else {
    fail(ErrorKind::usage, fmt::format("unknown fill '{}' (black|mean)", fill));
  }
  config.validate();
  const auto detector_name = s.get_string("preprocess", "detector", "none");
  std::unique_ptr<Detector> detector;
  if (detector_name == "none") {
    detector = std::make_unique<GroundTruthDetector>(std::vector<BoundingBox>{});
  } else if (detector_name == "full-frame") {
    detector = std::make_unique<FullFrameDetector>();
  } else {
    fail(ErrorKind::usage, fmt::format("unknown detector '{}' (none|full-frame)", detector_name));
  }

  const auto records = load_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  fs::create_directories(out / "images");
  if (config.apply_mask) fs::create_directories(out / "masked");

  std::vector<ImageRecord> aligned_records;
  std::vector<ImageRecord> masked_records;
  std::string log;
  std::size_t unaligned = 0;
  const BoundingBox frame{0, 0, config.target_size, config.target_size};
  for (const auto& r : records) {
    auto result = preprocess_record(r, config, *detector, base);
    const std::string stem = file_stem(r.id);
    ImageRecord derived = r;
    derived.bbox = frame;
    derived.path = "images/" + stem + ".png";
    write_png(result.aligned, out / derived.path);
    aligned_records.push_back(derived);
    if (result.masked) {
      derived.path = "masked/" + stem + ".png";
      write_png(*result.masked, out / derived.path);
      masked_records.push_back(derived);
    }
    json entry = {{"id", r.id},
                  {"source_box", format_bbox(result.source_box)},
                  {"crop_box", format_bbox(result.crop_box)},
                  {"origin", result.origin == BoxOrigin::annotation ? "annotation"
                             : result.origin == BoxOrigin::detector ? "detector"
                                                                    : "full_frame"}};
    if (result.unaligned()) {
      entry["tag"] = "unaligned";
      ++unaligned;
    }
    log += entry.dump() + "\n";
  }
  save_manifest(aligned_records, out / "aligned.tsv");
  save_manifest(config.apply_mask ? masked_records : aligned_records, out / "manifest.tsv");
  write_text(out / "preprocess.log.jsonl", log);
  emit(ctx, {{"command", "preprocess"},
             {"manifest", (out / "manifest.tsv").string()},
             {"records", records.size()},
             {"unaligned", unaligned},
             {"masked", config.apply_mask},
             {"size", config.target_size},
             {"margin", config.margin_fraction}});
  return kExitOk;
}

int run_predict(Context& ctx) {
  const auto& s = ctx.settings;
  const fs::path manifest_path = required(s, "predict", "manifest", "--manifest");
  const auto model = load_model(required(s, "predict", "model", "--model"));
  const auto top_k = static_cast<std::size_t>(s.get_int("predict", "top_k", 5));
  if (top_k == 0) fail(ErrorKind::usage, "--top-k must be at least 1");
  const auto split = s.get_string("predict", "split", "all");
  auto records = load_manifest(manifest_path);
  if (split != "all") records = filter_split(records, parse_split(split));
  const auto base = manifest_path.parent_path();
  const bool masked = model.vocabulary.granularity() == Granularity::color;

  std::vector<Image> images;
  images.reserve(records.size());
  for (const auto& r : records) images.push_back(load_model_input(r, base, model.input_size(), masked));
  const auto predictions = predict_batch(model, images);

  std::string lines;
  for (std::size_t i = 0; i < records.size(); ++i) {
    json ranked = json::array();
    for (std::size_t k = 0; k < std::min(top_k, predictions[i].ranked.size()); ++k) {
      ranked.push_back({{"label", predictions[i].ranked[k].name},
                        {"confidence", predictions[i].ranked[k].confidence}});
    }
    json line = {{"id", records[i].id}, {"predictions", ranked}};
    if (auto truth = class_label(records[i], model.vocabulary.granularity())) line["truth"] = *truth;
    lines += line.dump() + "\n";
  }
  auto out_path = s.get_optional_string("predict", "out");
  if (out_path) {
    write_text(*out_path, lines);
  } else {
    ctx.out << lines;
  }
  emit(ctx, {{"command", "predict"},
             {"records", records.size()},
             {"model_digest", model.digest()},
             {"out", out_path ? json(*out_path) : json(nullptr)}});
  return kExitOk;
}

std::map<std::string, std::vector<VerificationPair>> load_pair_sets(const std::vector<std::string>& files) {
  std::map<std::string, std::vector<VerificationPair>> sets;
  for (const auto& f : files) {
    std::string name = fs::path(f).stem().string();
    if (name.rfind("pairs_", 0) == 0) name = name.substr(6);
    if (!sets.emplace(name, load_pairs(f)).second) {
      fail(ErrorKind::usage, fmt::format("pair set '{}' given twice", name));
    }
  }
  return sets;
}

void write_report(const fs::path& out, const BenchmarkReport& report) {
  write_text(out, report.results.dump(2) + "\n");
  auto table_path = out;
  table_path.replace_extension(".txt");
  if (table_path == out) table_path += ".txt";
  write_text(table_path, report.table);
}

VerificationReport verification_report(const Settings& s, const std::string& section,
                                       const ClassifierModel& model,
                                       const std::map<std::string, std::vector<VerificationPair>>& sets,
                                       const fs::path& calibration_path, const fs::path& manifest_path) {
  const auto records = load_manifest(manifest_path);
  const auto loader = manifest_loader(records, manifest_path.parent_path(), model);
  std::optional<ClassifierModel> frozen;
  if (auto f = s.get_optional_string(section, "frozen")) frozen = load_model(*f);
  if (frozen && frozen->input_size() != model.input_size()) {
    fail(ErrorKind::usage, "the frozen model takes a different input size");
  }
  return evaluate_verification(model, sets, load_pairs(calibration_path), loader,
                               frozen ? &*frozen : nullptr);
}

json verification_summary(const VerificationReport& report) {
  json sets = json::object();
  for (const auto& [name, acc] : report.fine_tuned.sets) sets[name] = acc.accuracy;
  return {{"threshold", report.fine_tuned.threshold.threshold},
          {"calibration_accuracy", report.fine_tuned.threshold.accuracy},
          {"accuracy", sets}};
}

int run_eval(Context& ctx) {
  const auto& s = ctx.settings;
  const auto model = load_model(required(s, "eval", "model", "--model"));
  const fs::path manifest_path = required(s, "eval", "manifest", "--manifest");
  const fs::path out = required(s, "eval", "out", "--out");
  const auto protocol = parse_protocol(s.get_string("eval", "protocol", "generic"));
  if (protocol == Protocol::compcars_verif) {
    const fs::path dir = required(s, "eval", "pairs_dir", "--pairs-dir");
    std::vector<std::string> files;
    for (const char* level : {"easy", "medium", "hard"}) {
      files.push_back((dir / fmt::format("pairs_{}.tsv", level)).string());
    }
    const auto sets = load_pair_sets(files);
    const fs::path calibration = dir / "calibration.tsv";
    auto report = verification_report(s, "eval", model, sets, calibration, manifest_path);
    write_report(out, benchmark_report(report, load_pairs(calibration).size()));
    json summary = {{"command", "eval"}, {"protocol", to_string(protocol)}, {"report", out.string()}};
    summary.update(verification_summary(report));
    emit(ctx, summary);
    return kExitOk;
  }
  const auto records = load_manifest(manifest_path);
  auto report = benchmark_report(model, records, manifest_path.parent_path(), protocol);
  write_report(out, report);
  const auto& r = report.results["results"];
  emit(ctx, {{"command", "eval"},
             {"protocol", to_string(protocol)},
             {"report", out.string()},
             {"records", r["total"]},
             {"top1", r["top1"]},
             {"top5", r["top5"]}});
  return kExitOk;
}

int run_verify(Context& ctx, const std::string& action) {
  const auto& s = ctx.settings;
  const auto model = load_model(required(s, "verify", "model", "--model"));
  const fs::path manifest_path = required(s, "verify", "manifest", "--manifest");
  const auto pair_files = s.get_optional_string("verify", "pairs");
  if (!pair_files || pair_files->empty()) {
    fail(ErrorKind::usage, "missing required option --pairs (or verify.pairs in the config)");
  }
  std::vector<std::string> files;
  for (auto part : split_fields(*pair_files, ',')) {
    if (!part.empty()) files.emplace_back(part);
  }

  if (action == "calibrate") {
    if (files.size() != 1) fail(ErrorKind::usage, "calibrate takes exactly one pair file");
    const auto pairs = load_pairs(files.front());
    const auto records = load_manifest(manifest_path);
    const auto loader = manifest_loader(records, manifest_path.parent_path(), model);
    std::vector<std::string> ids;
    for (const auto& p : pairs) {
      ids.push_back(p.id_a);
      ids.push_back(p.id_b);
    }
    const auto distances = pair_distances(pairs, embed_ids(model, ids, loader));
    const auto threshold = calibrate_threshold(distances);
    if (auto out = s.get_optional_string("verify", "out")) write_text(*out, threshold.to_json().dump(2) + "\n");
    emit(ctx, {{"command", "verify calibrate"},
               {"pairs", pairs.size()},
               {"threshold", threshold.threshold},
               {"accuracy", threshold.accuracy},
               {"model_digest", model.digest()}});
    return kExitOk;
  }

  const fs::path calibration = required(s, "verify", "calibration", "--calibration");
  const auto sets = load_pair_sets(files);
  auto report = verification_report(s, "verify", model, sets, calibration, manifest_path);
  if (auto out = s.get_optional_string("verify", "out")) {
    write_report(*out, benchmark_report(report, load_pairs(calibration).size()));
  }
  json summary = {{"command", "verify evaluate"}, {"model_digest", model.digest()}};
  summary.update(verification_summary(report));
  emit(ctx, summary);
  return kExitOk;
}

int run_prune(Context& ctx, const std::string& action) {
  const auto& s = ctx.settings;
  const fs::path manifest_path = required(s, "prune", "manifest", "--manifest");
  const auto model = load_model(required(s, "prune", "model", "--model"));
  const fs::path queue = required(s, "prune", "queue", "--queue");
  const auto records = load_manifest(manifest_path);

  if (action == "build") {
    const double fraction = s.get_double("prune", "fraction", 0.05);
    const auto loader = manifest_loader(records, manifest_path.parent_path(), model);
    auto built = build_review_queue(records, model, fraction, loader);
    save_queue(built.items, queue);
    emit(ctx, {{"command", "prune build"},
               {"queue", queue.string()},
               {"items", built.items.size()},
               {"scored_records", built.scored_records},
               {"excluded_classes", built.excluded_classes},
               {"fraction", fraction}});
    return kExitOk;
  }

  const fs::path out = required(s, "prune", "out", "--out");
  if (fs::exists(out) && fs::equivalent(out, manifest_path)) {
    fail(ErrorKind::usage, "--out must differ from --manifest; the input manifest is never rewritten");
  }
  const auto items = load_queue(queue);
  auto applied = apply_verdicts(records, items, model.vocabulary, model.class_parts);
  // Output paths stay valid relative to the new manifest's directory.
  const auto in_base = fs::absolute(manifest_path).parent_path();
  const auto out_base = fs::absolute(out).parent_path();
  if (in_base != out_base) {
    for (auto& r : applied.records) {
      if (fs::path(r.path).is_relative()) r.path = (in_base / r.path).lexically_normal().string();
    }
  }
  save_manifest(applied.records, out);
  const fs::path audit = s.get_string("prune", "audit", out.string() + ".audit.jsonl");
  write_text(audit, applied.audit_jsonl());
  std::size_t removed = 0;
  std::size_t relabeled = 0;
  for (const auto& a : applied.audit) (a.action == "remove" ? removed : relabeled) += 1;
  emit(ctx, {{"command", "prune apply"},
             {"manifest", out.string()},
             {"audit", audit.string()},
             {"records_in", records.size()},
             {"records_out", applied.records.size()},
             {"removed", removed},
             {"relabeled", relabeled}});
  return kExitOk;
}

int run_serve(Context& ctx) {
  const auto config = ServiceConfig::from_settings(ctx.settings);
  auto log_mutex = std::make_shared<std::mutex>();
  std::ostream& err = ctx.err;
  auto parts = load_service_parts(config, [log_mutex, &err](const json& entry) {
    std::lock_guard lock(*log_mutex);
    err << entry.dump() << '\n' << std::flush;
  });
  Service service(std::move(parts));

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  const int port = service.bind(config.host, config.port);
  service.start();
  emit(ctx, {{"command", "serve"}, {"listening", fmt::format("{}:{}", config.host, port)}});
  ctx.out.flush();
  int received = 0;
  sigwait(&signals, &received);
  service.stop();
  return kExitOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Vehicle make, model and color recognition toolkit", "mmcr"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  app.add_option("--config", config_path, "JSON settings file (flags > MMCR_* environment > file)");

  std::vector<Binding> bindings;
  std::map<CLI::App*, std::function<int(Context&)>> handlers;

  auto* ingest = app.add_subcommand("ingest", "Import a public benchmark into a manifest");
  ingest->require_subcommand(1);
  for (const char* dataset : {"stanford", "compcars"}) {
    auto* sub = ingest->add_subcommand(dataset, fmt::format("Ingest {}", dataset));
    Binder b(bindings, sub, "ingest");
    b.option<std::string>("--out", "out", "Output manifest (compcars verification: output directory)");
    if (std::string(dataset) == "stanford") {
      b.option<std::string>("--annotations", "annotations", "Annotation CSV");
      b.option<std::string>("--images", "images", "Image root");
      b.option<std::string>("--class-names", "class_names", "Class name list");
    } else {
      b.option<std::string>("--root", "root", "Dataset root");
      b.option<std::string>("--images", "images", "Image root (default <root>/image)");
      b.option<std::string>("--task", "task", "classification | verification");
      b.option<int>("--calibration-pairs", "calibration_pairs", "Calibration pairs sampled from the training list");
      b.option<long long>("--seed", "seed", "Calibration sampling seed");
    }
    std::string name = dataset;
    handlers[sub] = [name](Context& ctx) { return run_ingest(ctx, name); };
  }

  {
    auto* sub = app.add_subcommand("synth", "Render a synthetic dataset");
    Binder b(bindings, sub, "synth");
    b.option<std::string>("--out", "out", "Output directory");
    b.option<int>("--classes", "classes", "Number of classes");
    b.option<int>("--per-class", "per_class", "Images per class");
    b.option<std::string>("--mode", "mode", "shape | color");
    b.option<long long>("--seed", "seed", "Random seed");
    b.option<int>("--height", "height", "Image height in pixels");
    b.option<int>("--offset", "offset", "First shape family");
    handlers[sub] = run_synth;
  }
  {
    auto* sub = app.add_subcommand("preprocess", "Align, resize and optionally mask a manifest");
    Binder b(bindings, sub, "preprocess");
    b.option<std::string>("--manifest", "manifest", "Input manifest");
    b.option<std::string>("--out", "out", "Output directory");
    b.option<double>("--margin", "margin", "Per-side margin fraction");
    b.option<int>("--size", "size", "Output square size");
    b.flag("--mask", "mask", "Write elliptically masked images and point the manifest at them");
    b.option<std::string>("--fill", "fill", "Mask fill: black | mean");
    b.option<std::string>("--detector", "detector", "Box source for records without bbox: none | full-frame");
    handlers[sub] = run_preprocess;
  }
  {
    auto* sub = app.add_subcommand("train", "Train a classifier from scratch");
    Binder b(bindings, sub, "train");
    add_train_options(b);
    handlers[sub] = [](Context& ctx) { return run_train(ctx, false); };
  }
  {
    auto* sub = app.add_subcommand("finetune", "Continue training a parent model");
    Binder b(bindings, sub, "train");
    add_train_options(b);
    b.option<std::string>("--parent", "parent", "Parent model");
    handlers[sub] = [](Context& ctx) { return run_train(ctx, true); };
  }
  {
    auto* sub = app.add_subcommand("predict", "Rank classes for every record of a manifest");
    Binder b(bindings, sub, "predict");
    b.option<std::string>("--manifest", "manifest", "Manifest");
    b.option<std::string>("--model", "model", "Model file");
    b.option<int>("--top-k", "top_k", "Entries per prediction");
    b.option<std::string>("--split", "split", "train | test | all");
    b.option<std::string>("--out", "out", "Write predictions (JSONL) here instead of stdout");
    handlers[sub] = run_predict;
  }
  {
    auto* sub = app.add_subcommand("eval", "Benchmark report for a protocol");
    Binder b(bindings, sub, "eval");
    b.option<std::string>("--model", "model", "Model file");
    b.option<std::string>("--manifest", "manifest", "Manifest whose test split is evaluated");
    b.option<std::string>("--protocol", "protocol", "stanford | compcars_cls | compcars_verif | generic");
    b.option<std::string>("--out", "out", "Report path (JSON; table beside it as .txt)");
    b.option<std::string>("--pairs-dir", "pairs_dir", "compcars_verif: directory with pairs_*.tsv and calibration.tsv");
    b.option<std::string>("--frozen", "frozen", "compcars_verif: model for the frozen-feature pathway");
    handlers[sub] = run_eval;
  }
  auto* verify = app.add_subcommand("verify", "Pair verification by embedding distance");
  verify->require_subcommand(1);
  for (const char* action : {"calibrate", "evaluate"}) {
    auto* sub = verify->add_subcommand(action, std::string(action) == "calibrate"
                                                   ? "Fit the distance threshold on labeled pairs"
                                                   : "Score pair sets with a threshold fit on calibration pairs");
    Binder b(bindings, sub, "verify");
    b.option<std::string>("--model", "model", "Model file");
    b.option<std::string>("--manifest", "manifest", "Manifest resolving pair ids to images");
    b.option<std::string>("--pairs", "pairs", "Pair file(s), comma separated");
    b.option<std::string>("--out", "out", "Write the threshold / report here");
    if (std::string(action) == "evaluate") {
      b.option<std::string>("--calibration", "calibration", "Calibration pair file");
      b.option<std::string>("--frozen", "frozen", "Model for the frozen-feature pathway");
    }
    std::string name = action;
    handlers[sub] = [name](Context& ctx) { return run_verify(ctx, name); };
  }
  auto* prune = app.add_subcommand("prune", "Outlier review queue");
  prune->require_subcommand(1);
  for (const char* action : {"build", "apply"}) {
    auto* sub = prune->add_subcommand(action, std::string(action) == "build"
                                                  ? "Flag the most atypical records for review"
                                                  : "Apply review verdicts to a manifest copy");
    Binder b(bindings, sub, "prune");
    b.option<std::string>("--manifest", "manifest", "Manifest");
    b.option<std::string>("--model", "model", "Model file");
    b.option<std::string>("--queue", "queue", "Queue file");
    if (std::string(action) == "build") {
      b.option<double>("--fraction", "fraction", "Fraction of records to flag");
    } else {
      b.option<std::string>("--out", "out", "Output manifest");
      b.option<std::string>("--audit", "audit", "Audit log (JSONL)");
    }
    std::string name = action;
    handlers[sub] = [name](Context& ctx) { return run_prune(ctx, name); };
  }
  {
    auto* sub = app.add_subcommand("serve", "Run the HTTP service");
    Binder b(bindings, sub, "service");
    b.option<std::string>("--host", "host", "Listen address");
    b.option<int>("--port", "port", "Listen port (0 picks one)");
    b.option<std::string>("--make-model-model", "make_model_model", "Make/model network");
    b.option<std::string>("--color-model", "color_model", "Color network");
    b.option<std::string>("--queue", "queue", "Review queue file");
    b.option<std::string>("--manifest", "manifest", "Manifest for review images");
    b.option<std::string>("--review-model", "review_model", "Model whose vocabulary constrains relabels");
    b.option<std::string>("--static-dir", "static_dir", "Static assets served at /");
    b.option<int>("--lease-seconds", "lease_seconds", "Review lease period");
    b.option<int>("--threads", "threads", "Worker threads");
    handlers[sub] = run_serve;
  }

  std::vector<const char*> argv;
  argv.push_back("mmcr");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    Context ctx{Settings{}, out, err};
    if (config_path.empty()) {
      if (const char* env = std::getenv("MMCR_CONFIG")) config_path = env;
    }
    if (!config_path.empty()) ctx.settings = Settings::from_file(config_path);
    ctx.settings.load_environment();
    for (const auto& b : bindings) {
      if (auto v = b.value()) ctx.settings.set_flag(b.section, b.key, std::move(*v));
    }
    for (auto& [sub, handler] : handlers) {
      if (sub->parsed()) return handler(ctx);
    }
    err << app.help();
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.kind() == ErrorKind::usage ? kExitUsage : kExitData;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

}  // namespace mmcr
