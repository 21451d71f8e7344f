#pragma once

// The vitforge command line: split, train, eval, predict, import-weights.
//
// Exit codes: 0 success, 1 usage/config error, 2 data/format error,
// 3 numerical error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vitforge/checkpoint.hpp"
#include "vitforge/image_io.hpp"
#include "vitforge/metrics.hpp"
#include "vitforge/preprocess.hpp"
#include "vitforge/train.hpp"
#include "vitforge/vit.hpp"

namespace vitforge::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

inline int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::kUsage: return kUsage;
    case ErrorKind::kData: return kData;
    case ErrorKind::kNumerical: return kNumerical;
  }
  return kData;
}

inline json vit_config_json(const ViTConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"dim", c.dim},
          {"depth", c.depth},           {"heads", c.heads},           {"mlp_dim", c.mlp_dim},
          {"num_classes", c.num_classes}};
}

inline ViTConfig vit_config_from_json(const json& j) {
  ViTConfig c;
  try {
    c.image_size = j.at("image_size").get<std::size_t>();
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.dim = j.at("dim").get<std::size_t>();
    c.depth = j.at("depth").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.mlp_dim = j.at("mlp_dim").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("model config in checkpoint metadata is incomplete: ") + e.what());
  }
  c.validate();
  return c;
}

// Model and training settings from a JSON config file plus flag overrides.
struct RunConfig {
  ViTConfig vit = ViTConfig::base_16_224(2);
  bool num_classes_given = false;
  TrainConfig train;
  double split_ratio = 0.85;

  void validate() const {
    if (!(split_ratio > 0.0 && split_ratio < 1.0))
      throw ConfigError("split_ratio must lie strictly between 0 and 1");
    train.validate();
    ViTConfig probe = vit;
    probe.validate();
  }
};

// Values that may come from a config file and/or flags; flags win.
struct ConfigOverrides {
  std::optional<std::string> preset;
  std::optional<std::size_t> image_size, patch_size, dim, depth, heads, mlp_dim, num_classes;
  std::optional<double> lr;
  std::optional<std::size_t> epochs, batch_size, patience;
  std::optional<std::uint64_t> seed;
  std::optional<double> split_ratio;

  void add_to(CLI::App& app) {
    app.add_option("--preset", preset, "Model geometry preset: vit-base-16-224 or tiny");
    app.add_option("--image-size", image_size);
    app.add_option("--patch-size", patch_size);
    app.add_option("--dim", dim);
    app.add_option("--depth", depth);
    app.add_option("--heads", heads);
    app.add_option("--mlp-dim", mlp_dim);
    app.add_option("--num-classes", num_classes);
    app.add_option("--lr", lr);
    app.add_option("--epochs", epochs);
    app.add_option("--batch-size", batch_size);
    app.add_option("--patience", patience);
    app.add_option("--seed", seed);
    app.add_option("--split-ratio", split_ratio);
  }
};

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "preset", "image_size", "patch_size", "dim",        "depth", "heads",      "mlp_dim",
      "num_classes", "lr",    "epochs",     "batch_size", "patience", "seed", "split_ratio"};
  return keys;
}

inline RunConfig build_run_config(const std::optional<std::string>& config_path,
                                  const ConfigOverrides& flags) {
  json file = json::object();
  if (config_path) {
    std::ifstream in(*config_path);
    if (!in) throw ConfigError("cannot open config " + *config_path);
    try {
      file = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config " + *config_path + " is not valid JSON: " + e.what());
    }
    if (!file.is_object()) throw ConfigError("config must be a JSON object");
    for (const auto& [k, v] : file.items()) {
      if (std::find(config_keys().begin(), config_keys().end(), k) == config_keys().end())
        throw ConfigError("unknown config key '" + k + "'");
    }
  }
  auto pick = [&]<typename V>(const char* key, const std::optional<V>& flag) -> std::optional<V> {
    if (flag) return flag;
    if (file.contains(key)) {
      try {
        return file[key].template get<V>();
      } catch (const json::exception&) {
        throw ConfigError(std::string("config key '") + key + "' has the wrong type");
      }
    }
    return std::nullopt;
  };
  RunConfig rc;
  if (auto p = pick("preset", flags.preset)) {
    if (*p == "vit-base-16-224") rc.vit = ViTConfig::base_16_224(2);
    else if (*p == "tiny") rc.vit = ViTConfig::tiny(2);
    else throw ConfigError("unknown preset '" + *p + "'");
  }
  auto set = [&]<typename V>(const char* key, const std::optional<V>& flag, V& target) {
    if (auto v = pick(key, flag)) target = *v;
  };
  set("image_size", flags.image_size, rc.vit.image_size);
  set("patch_size", flags.patch_size, rc.vit.patch_size);
  set("dim", flags.dim, rc.vit.dim);
  set("depth", flags.depth, rc.vit.depth);
  set("heads", flags.heads, rc.vit.heads);
  set("mlp_dim", flags.mlp_dim, rc.vit.mlp_dim);
  if (auto n = pick("num_classes", flags.num_classes)) {
    rc.vit.num_classes = *n;
    rc.num_classes_given = true;
  }
  set("lr", flags.lr, rc.train.learning_rate);
  set("epochs", flags.epochs, rc.train.epochs);
  set("batch_size", flags.batch_size, rc.train.batch_size);
  set("patience", flags.patience, rc.train.patience);
  set("seed", flags.seed, rc.train.seed);
  set("split_ratio", flags.split_ratio, rc.split_ratio);
  rc.validate();
  return rc;
}

struct ModelBundle {
  ViTConfig config;
  std::vector<std::string> class_names;
  ViTParams<float> params;
};

inline json model_metadata(const ViTConfig& cfg, const std::vector<std::string>& class_names) {
  return {{"format", "vitforge-model"},
          {"config", vit_config_json(cfg)},
          {"class_names", class_names}};
}

inline ModelBundle load_model(const fs::path& path) {
  auto ck = checkpoint::load(path);
  if (!ck.metadata.contains("config"))
    throw FormatError(path.string() + ": checkpoint metadata carries no model config");
  ModelBundle m;
  m.config = vit_config_from_json(ck.metadata["config"]);
  if (ck.metadata.contains("class_names")) {
    m.class_names = ck.metadata["class_names"].get<std::vector<std::string>>();
  } else {
    for (std::size_t c = 0; c < m.config.num_classes; ++c)
      m.class_names.push_back("class" + std::to_string(c));
  }
  if (m.class_names.size() != m.config.num_classes)
    throw FormatError(path.string() + ": class_names does not match num_classes");
  m.params = checkpoint::params_from_tensors<float>(ck.tensors, m.config);
  return m;
}

inline void save_model(const fs::path& path, const ViTConfig& cfg,
                       const std::vector<std::string>& class_names,
                       const ViTParams<float>& params, json extra = json::object()) {
  json meta = model_metadata(cfg, class_names);
  for (auto& [k, v] : extra.items()) meta[k] = v;
  checkpoint::save(path, checkpoint::params_to_tensors(params), meta);
}

inline std::string relative_to(const fs::path& target, const fs::path& base) {
  return fs::relative(fs::absolute(target), fs::absolute(base)).generic_string();
}

// --- split -----------------------------------------------------------------

inline int cmd_split(const fs::path& data, double ratio, std::uint64_t seed,
                     std::optional<fs::path> out_dir) {
  if (!(ratio > 0.0 && ratio < 1.0))
    throw UsageError("--ratio must lie strictly between 0 and 1");
  const fs::path csv = data / "labels.csv";
  if (!fs::is_directory(data) || !fs::exists(csv))
    throw UsageError("missing labels.csv in " + data.string());
  const auto rows = io::read_manifest(csv);
  const auto names = io::class_names_of(rows);
  std::vector<std::int64_t> labels;
  for (const auto& r : rows)
    labels.push_back(std::find(names.begin(), names.end(), r.label) - names.begin());
  const auto split = stratified_split_indices(labels, names, ratio, seed);
  const fs::path out = out_dir.value_or(data);
  fs::create_directories(out);
  auto emit = [&](const std::vector<std::size_t>& idx, const char* file) {
    std::vector<io::ManifestRow> sel;
    for (auto i : idx) sel.push_back({relative_to(data / rows[i].path, out), rows[i].label});
    io::write_manifest(out / file, sel);
  };
  emit(split.train, "train.csv");
  emit(split.test, "test.csv");
  std::cout << "wrote " << split.train.size() << " train and " << split.test.size()
            << " test rows to " << out.string() << "\n";
  return kOk;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::optional<std::string> config;
  fs::path data;
  fs::path out;
  std::optional<fs::path> train_manifest, test_manifest;
  std::optional<fs::path> init_weights;
  bool reinit_head = false;
  ConfigOverrides overrides;
};

inline int cmd_train(const TrainArgs& args) {
  RunConfig rc = build_run_config(args.config, args.overrides);

  // Class names come from the full label list when present so that ids stay
  // stable across train/test manifests.
  std::vector<std::string> class_names;
  if (fs::is_directory(args.data) && fs::exists(args.data / "labels.csv"))
    class_names = io::class_names_of(io::read_manifest(args.data / "labels.csv"));

  LabeledDataset train, test;
  const bool has_manifests = fs::is_directory(args.data) &&
                             fs::exists(args.data / "train.csv") &&
                             fs::exists(args.data / "test.csv");
  std::optional<fs::path> train_csv = args.train_manifest, test_csv = args.test_manifest;
  if (!train_csv && !test_csv && has_manifests) {
    train_csv = args.data / "train.csv";
    test_csv = args.data / "test.csv";
  }
  if (train_csv || test_csv) {
    if (!train_csv || !test_csv) throw UsageError("--train and --test must be given together");
    if (class_names.empty()) {
      auto rows = io::read_manifest(*train_csv);
      auto more = io::read_manifest(*test_csv);
      rows.insert(rows.end(), more.begin(), more.end());
      class_names = io::class_names_of(rows);
    }
    train = io::load_manifest(*train_csv, class_names);
    test = io::load_manifest(*test_csv, class_names);
  } else {
    auto all = io::load_dataset(args.data, class_names);
    auto split = stratified_split(all, rc.split_ratio, rc.train.seed);
    train = std::move(split.train);
    test = std::move(split.test);
  }
  if (train.empty() || test.empty()) throw ConfigError("train and test sets must be non-empty");
  if (rc.num_classes_given && rc.vit.num_classes != train.num_classes)
    throw ConfigError("config num_classes " + std::to_string(rc.vit.num_classes) +
                      " does not match the " + std::to_string(train.num_classes) +
                      " classes in the data");
  rc.vit.num_classes = train.num_classes;
  rc.vit.validate();

  ViTParams<float> params;
  if (args.init_weights) {
    auto ck = checkpoint::load(*args.init_weights);
    params = checkpoint::params_from_tensors<float>(ck.tensors, rc.vit, args.reinit_head);
    if (args.reinit_head) reinit_head(params, rc.vit, rc.train.seed);
  } else {
    if (args.reinit_head) throw UsageError("--reinit-head requires --init-weights");
    params = init_params<float>(rc.vit, rc.train.seed);
  }

  fs::create_directories(args.out);
  std::ofstream log(args.out / "log.jsonl", std::ios::trunc);
  std::ofstream timing(args.out / "timing.jsonl", std::ios::trunc);
  if (!log || !timing) throw IoError("cannot write logs in " + args.out.string());
  const json train_meta = {{"lr", rc.train.learning_rate},   {"epochs", rc.train.epochs},
                           {"batch_size", rc.train.batch_size}, {"patience", rc.train.patience},
                           {"seed", rc.train.seed},           {"split_ratio", rc.split_ratio}};
  auto observer = [&](const EpochLog& e, const ViTParams<float>& p, bool improved) {
    log << to_json(e).dump() << '\n' << std::flush;
    timing << json{{"epoch", e.epoch}, {"wall_time_s", e.wall_time_s}}.dump() << '\n' << std::flush;
    if (!log || !timing) throw IoError("failed writing logs in " + args.out.string());
    json extra = {{"epoch", e.epoch},
                  {"train", train_meta},
                  {"metrics", {{"test_loss", e.test_loss}, {"test_accuracy", e.test_accuracy}}}};
    save_model(args.out / "last.ckpt", rc.vit, train.class_names, p, extra);
    if (improved) save_model(args.out / "best.ckpt", rc.vit, train.class_names, p, extra);
    std::cout << "epoch " << e.epoch << " train_loss " << e.train_loss << " train_acc "
              << e.train_accuracy << " test_loss " << e.test_loss << " test_acc "
              << e.test_accuracy << (improved ? " *" : "") << "\n";
  };
  auto result = fit(rc.vit, std::move(params), train, test, rc.train, observer);
  std::cout << "best epoch " << result.best_epoch << " of " << result.logs.size()
            << (result.stopped_early ? " (early stop)" : "") << "\n";
  return kOk;
}

// --- eval ------------------------------------------------------------------

inline std::size_t resolve_positive(const std::vector<std::string>& names,
                                    const std::optional<std::string>& positive) {
  if (names.size() != 2) return 0;
  if (!positive) {
    // Malignant/cancer class is positive when named; otherwise class 1.
    for (std::size_t c = 0; c < 2; ++c) {
      std::string lower = names[c];
      std::transform(lower.begin(), lower.end(), lower.begin(), ::tolower);
      if (lower == "malignant" || lower == "cancer") return c;
    }
    return 1;
  }
  for (std::size_t c = 0; c < names.size(); ++c)
    if (names[c] == *positive) return c;
  try {
    std::size_t pos = 0;
    const unsigned long v = std::stoul(*positive, &pos);
    if (pos == positive->size() && v < names.size()) return v;
  } catch (...) {
  }
  throw UsageError("unknown positive class '" + *positive + "'");
}

inline int cmd_eval(const fs::path& ckpt, const fs::path& data, std::size_t batch_size,
                    const std::optional<std::string>& positive, std::ostream& out) {
  if (batch_size == 0) throw UsageError("--batch-size must be at least 1");
  auto model = load_model(ckpt);
  auto ds = io::load_dataset(data, model.class_names);
  if (ds.num_classes != model.config.num_classes)
    throw LabelError("dataset classes do not match the checkpoint");
  const std::size_t pos = resolve_positive(model.class_names, positive);
  auto ev = evaluate(model.config, model.params, ds, batch_size, pos);
  json report = metrics::to_json(ev.report);
  report["loss"] = ev.loss;
  report["num_samples"] = ds.size();
  report["class_names"] = model.class_names;
  if (model.config.num_classes == 2) report["positive_class"] = model.class_names[pos];
  out << report.dump(2) << "\n";
  return kOk;
}

// --- predict ---------------------------------------------------------------

inline int cmd_predict(const fs::path& ckpt, const fs::path& image, std::ostream& out) {
  auto model = load_model(ckpt);
  const RgbImage raw = io::read_image(image);
  Tensor<float> batch({1, 3, model.config.image_size, model.config.image_size},
                      prepare_image<float>(raw, model.config.image_size).vec());
  Tensor<float> logits = forward(model.config, model.params, batch);
  if (!kernels::all_finite(logits)) throw NumericalError("non-finite logits");
  Tensor<float> probs = kernels::softmax(logits, 1);
  const auto label = predict(logits)[0];
  std::vector<double> p(probs.data().begin(), probs.data().end());
  out << json{{"label", label},
              {"className", model.class_names[static_cast<std::size_t>(label)]},
              {"probabilities", p}}
             .dump()
      << "\n";
  return kOk;
}

// --- import-weights --------------------------------------------------------

struct ImportArgs {
  fs::path in;
  std::optional<std::string> config;
  fs::path out;
  bool reinit_head = false;
  std::optional<std::size_t> num_classes;
  std::uint64_t seed = 0;
  std::vector<std::string> class_names;
  ConfigOverrides overrides;
};

inline int cmd_import_weights(const ImportArgs& args) {
  ConfigOverrides ov = args.overrides;
  if (args.num_classes) ov.num_classes = args.num_classes;
  RunConfig rc = build_run_config(args.config, ov);
  auto ck = checkpoint::load(args.in);
  auto params = checkpoint::params_from_tensors<float>(ck.tensors, rc.vit, args.reinit_head);
  if (args.reinit_head) reinit_head(params, rc.vit, args.seed);
  std::vector<std::string> names = args.class_names;
  if (names.empty())
    for (std::size_t c = 0; c < rc.vit.num_classes; ++c) names.push_back("class" + std::to_string(c));
  if (names.size() != rc.vit.num_classes)
    throw UsageError("--class-names needs exactly num_classes entries");
  json extra = {{"source", ck.metadata}, {"head_reinitialized", args.reinit_head}};
  if (args.reinit_head) extra["head_seed"] = args.seed;
  save_model(args.out, rc.vit, names, params, extra);
  std::cout << "wrote " << args.out.string() << " (" << param_count(params) << " parameters)\n";
  return kOk;
}

// --- entry point -----------------------------------------------------------

inline int run(int argc, char** argv) {
  CLI::App app{"vitforge: Vision Transformer training and evaluation"};
  app.require_subcommand(1);

  fs::path split_data;
  double split_ratio = 0.85;
  std::uint64_t split_seed = 0;
  std::optional<fs::path> split_out;
  auto* split = app.add_subcommand("split", "Write stratified train.csv / test.csv manifests");
  split->add_option("--data", split_data, "Dataset root containing labels.csv")->required();
  split->add_option("--ratio", split_ratio, "Train fraction, strictly between 0 and 1");
  split->add_option("--seed", split_seed);
  split->add_option("--out", split_out, "Output directory (default: dataset root)");

  TrainArgs targs;
  auto* train = app.add_subcommand("train", "Train a model and write a run directory");
  train->add_option("--config", targs.config, "JSON config file");
  train->add_option("--data", targs.data, "Dataset root, manifest .csv or packed fixture")->required();
  train->add_option("--out", targs.out, "Run directory")->required();
  train->add_option("--train", targs.train_manifest, "Explicit train manifest");
  train->add_option("--test", targs.test_manifest, "Explicit test manifest");
  train->add_option("--init-weights", targs.init_weights, "Checkpoint to start from");
  train->add_flag("--reinit-head", targs.reinit_head, "Reinitialize head.* from the seed");
  targs.overrides.add_to(*train);

  fs::path eval_ckpt, eval_data;
  std::size_t eval_batch = 32;
  std::optional<std::string> eval_positive;
  auto* eval = app.add_subcommand("eval", "Print a metrics report as JSON");
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--data", eval_data)->required();
  eval->add_option("--batch-size", eval_batch);
  eval->add_option("--positive-class", eval_positive, "Positive class name or index (binary)");

  fs::path pred_ckpt, pred_image;
  auto* pred = app.add_subcommand("predict", "Classify one image");
  pred->add_option("--checkpoint", pred_ckpt)->required();
  pred->add_option("--image", pred_image)->required();

  ImportArgs iargs;
  auto* imp = app.add_subcommand("import-weights", "Validate and adapt a pre-trained checkpoint");
  imp->add_option("--in", iargs.in)->required();
  imp->add_option("--config", iargs.config);
  imp->add_option("--out", iargs.out)->required();
  imp->add_flag("--reinit-head", iargs.reinit_head);
  imp->add_option("--seed", iargs.seed);
  imp->add_option("--class-names", iargs.class_names);
  iargs.overrides.preset.reset();
  imp->add_option("--preset", iargs.overrides.preset);
  imp->add_option("--num-classes", iargs.num_classes);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*split) return cmd_split(split_data, split_ratio, split_seed, split_out);
    if (*train) return cmd_train(targs);
    if (*eval) return cmd_eval(eval_ckpt, eval_data, eval_batch, eval_positive, std::cout);
    if (*pred) return cmd_predict(pred_ckpt, pred_image, std::cout);
    if (*imp) return cmd_import_weights(iargs);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace vitforge::cli
