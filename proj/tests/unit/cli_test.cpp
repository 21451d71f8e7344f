#include <sstream>

#include <gtest/gtest.h>

#include "support.hpp"
#include "vitforge/cli.hpp"

using namespace vitforge;
using vitforge::testing::TempDir;
using vitforge::testing::read_file;
using vitforge::testing::write_file;
namespace fs = std::filesystem;

namespace {

// labels.csv only; split never decodes images.
void write_labels(const fs::path& root, std::size_t a, std::size_t b) {
  fs::create_directories(root);
  std::vector<io::ManifestRow> rows;
  for (std::size_t i = 0; i < a + b; ++i)
    rows.push_back({"images/" + std::to_string(i) + ".png", i < a ? "benign" : "malignant"});
  io::write_manifest(root / "labels.csv", rows);
}

std::size_t line_count(const fs::path& p) {
  std::istringstream in(read_file(p));
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) ++n;
  return n;
}

cli::ImportArgs import_args(const fs::path& in, const fs::path& out) {
  cli::ImportArgs a;
  a.in = in;
  a.out = out;
  a.overrides.preset = "tiny";
  return a;
}

}  // namespace

TEST(Config, Defaults) {
  auto rc = cli::build_run_config(std::nullopt, {});
  EXPECT_EQ(rc.vit.image_size, 224u);
  EXPECT_EQ(rc.vit.patch_size, 16u);
  EXPECT_EQ(rc.train.epochs, 50u);
  EXPECT_EQ(rc.train.batch_size, 32u);
  EXPECT_EQ(rc.train.patience, 10u);
  EXPECT_EQ(rc.split_ratio, 0.85);
}

TEST(Config, FlagsOverrideFile) {
  TempDir dir;
  write_file(dir / "c.json", R"({"preset": "tiny", "lr": 0.5, "epochs": 7, "seed": 9})");
  cli::ConfigOverrides flags;
  flags.epochs = 3;
  auto rc = cli::build_run_config((dir / "c.json").string(), flags);
  EXPECT_EQ(rc.vit.image_size, 8u);
  EXPECT_EQ(rc.train.learning_rate, 0.5);
  EXPECT_EQ(rc.train.epochs, 3u);
  EXPECT_EQ(rc.train.seed, 9u);
  EXPECT_FALSE(rc.num_classes_given);
}

TEST(Config, Rejections) {
  TempDir dir;
  write_file(dir / "unknown.json", R"({"learning_rate": 0.1})");
  write_file(dir / "type.json", R"({"epochs": "many"})");
  write_file(dir / "broken.json", "{");
  write_file(dir / "geom.json", R"({"image_size": 10, "patch_size": 4})");
  for (const char* f : {"unknown.json", "type.json", "broken.json", "geom.json"})
    EXPECT_THROW(cli::build_run_config((dir / f).string(), {}), ConfigError) << f;
  EXPECT_THROW(cli::build_run_config((dir / "absent.json").string(), {}), ConfigError);
  cli::ConfigOverrides bad;
  bad.split_ratio = 1.0;
  EXPECT_THROW(cli::build_run_config(std::nullopt, bad), ConfigError);
}

TEST(ExitCodes, ByErrorKind) {
  EXPECT_EQ(cli::exit_code_for(UsageError("x")), 1);
  EXPECT_EQ(cli::exit_code_for(ConfigError("x")), 1);
  EXPECT_EQ(cli::exit_code_for(FormatError("x")), 2);
  EXPECT_EQ(cli::exit_code_for(ManifestError("x")), 2);
  EXPECT_EQ(cli::exit_code_for(NumericalError("x")), 3);
}

TEST(PositiveClass, Resolution) {
  EXPECT_EQ(cli::resolve_positive({"malignant", "normal"}, std::nullopt), 0u);
  EXPECT_EQ(cli::resolve_positive({"benign", "Cancer"}, std::nullopt), 1u);
  EXPECT_EQ(cli::resolve_positive({"a", "b"}, std::nullopt), 1u);
  EXPECT_EQ(cli::resolve_positive({"a", "b"}, std::string("a")), 0u);
  EXPECT_EQ(cli::resolve_positive({"a", "b"}, std::string("1")), 1u);
  EXPECT_THROW(cli::resolve_positive({"a", "b"}, std::string("c")), UsageError);
}

TEST(Split, HundredSamplesGiveEightyFiveFifteen) {
  TempDir dir;
  write_labels(dir / "d", 60, 40);
  cli::cmd_split(dir / "d", 0.85, 7, dir / "m1");
  EXPECT_EQ(line_count(dir / "m1" / "train.csv"), 86u);  // header included
  EXPECT_EQ(line_count(dir / "m1" / "test.csv"), 16u);
  cli::cmd_split(dir / "d", 0.85, 7, dir / "m2");
  EXPECT_EQ(read_file(dir / "m1" / "train.csv"), read_file(dir / "m2" / "train.csv"));
  EXPECT_EQ(read_file(dir / "m1" / "test.csv"), read_file(dir / "m2" / "test.csv"));
  // Paths resolve relative to the manifest directory.
  auto rows = io::read_manifest(dir / "m1" / "test.csv");
  EXPECT_EQ(rows[0].path.rfind("../d/images/", 0), 0u) << rows[0].path;
}

TEST(Split, Errors) {
  TempDir dir;
  write_labels(dir / "d", 10, 10);
  EXPECT_THROW(cli::cmd_split(dir / "d", 1.0, 0, std::nullopt), UsageError);
  EXPECT_THROW(cli::cmd_split(dir / "d", 0.0, 0, std::nullopt), UsageError);
  EXPECT_THROW(cli::cmd_split(dir / "none", 0.85, 0, std::nullopt), UsageError);
  const auto before = read_file(dir / "d" / "labels.csv");
  cli::cmd_split(dir / "d", 0.85, 0, std::nullopt);
  EXPECT_EQ(read_file(dir / "d" / "labels.csv"), before);
}

TEST(ImportWeights, ReinitHeadIsSeededAndValid) {
  TempDir dir;
  auto src = ViTConfig::tiny(1000);
  checkpoint::save(dir / "up.ckpt", checkpoint::params_to_tensors(init_params<float>(src, 1)),
                   {{"upstream", "fixture"}});
  auto a = import_args(dir / "up.ckpt", dir / "a.ckpt");
  a.reinit_head = true;
  a.num_classes = 2;
  a.seed = 4;
  auto b = a;
  b.out = dir / "b.ckpt";
  cli::cmd_import_weights(a);
  cli::cmd_import_weights(b);
  auto ma = cli::load_model(dir / "a.ckpt"), mb = cli::load_model(dir / "b.ckpt");
  EXPECT_EQ(ma.config.num_classes, 2u);
  EXPECT_EQ(ma.params.head_weight, mb.params.head_weight);
  EXPECT_EQ(ma.params.head_bias, mb.params.head_bias);
  const float bound = 1.0f / 4.0f;  // 1/sqrt(16)
  for (float v : ma.params.head_weight.data()) EXPECT_LE(std::abs(v), bound);
  // Body tensors are carried over untouched.
  EXPECT_EQ(ma.params.pos_embed, init_params<float>(src, 1).pos_embed);
  EXPECT_NO_THROW(checkpoint::validate_against_config(checkpoint::load(dir / "a.ckpt").tensors,
                                                      ma.config));
  EXPECT_EQ(checkpoint::load(dir / "a.ckpt").metadata["source"]["upstream"], "fixture");

  b.seed = 5;
  b.out = dir / "c.ckpt";
  cli::cmd_import_weights(b);
  EXPECT_NE(cli::load_model(dir / "c.ckpt").params.head_weight, ma.params.head_weight);
}

TEST(ImportWeights, MissingTensorNamed) {
  TempDir dir;
  auto tensors = checkpoint::params_to_tensors(init_params<float>(ViTConfig::tiny(2), 1));
  std::erase_if(tensors, [](const checkpoint::NamedTensor& t) { return t.name == "layers.1.fc1.bias"; });
  checkpoint::save(dir / "up.ckpt", tensors);
  auto a = import_args(dir / "up.ckpt", dir / "out.ckpt");
  a.num_classes = 2;
  try {
    cli::cmd_import_weights(a);
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_NE(std::string(e.what()).find("layers.1.fc1.bias"), std::string::npos) << e.what();
    EXPECT_EQ(cli::exit_code_for(e), 2);
  }
  EXPECT_FALSE(fs::exists(dir / "out.ckpt"));
}

TEST(ImportWeights, ThousandClassHeadNeedsReinit) {
  TempDir dir;
  checkpoint::save(dir / "up.ckpt",
                   checkpoint::params_to_tensors(init_params<float>(ViTConfig::tiny(1000), 1)));
  auto a = import_args(dir / "up.ckpt", dir / "out.ckpt");
  a.num_classes = 2;
  EXPECT_THROW(cli::cmd_import_weights(a), ManifestError);
  a.class_names = {"x", "y", "z"};
  a.reinit_head = true;
  EXPECT_THROW(cli::cmd_import_weights(a), UsageError);
}

TEST(Eval, ReportIsDeterministic) {
  TempDir dir;
  vitforge::testing::write_png_dataset(dir / "d", 6, {"a", "b"}, 8, 3);
  cli::save_model(dir / "m.ckpt", ViTConfig::tiny(2), {"a", "b"},
                  init_params<float>(ViTConfig::tiny(2), 2));
  std::ostringstream one, two, other_batch;
  cli::cmd_eval(dir / "m.ckpt", dir / "d", 5, std::nullopt, one);
  cli::cmd_eval(dir / "m.ckpt", dir / "d", 5, std::nullopt, two);
  cli::cmd_eval(dir / "m.ckpt", dir / "d", 3, std::nullopt, other_batch);
  EXPECT_EQ(one.str(), two.str());
  auto j = nlohmann::json::parse(one.str());
  auto k = nlohmann::json::parse(other_batch.str());
  EXPECT_NEAR(j["loss"].get<double>(), k["loss"].get<double>(), 1e-6);
  EXPECT_EQ(j["confusion"], k["confusion"]);
  EXPECT_EQ(j["num_samples"], 12);
  EXPECT_EQ(j["positive_class"], "b");
  EXPECT_GE(j["accuracy"].get<double>(), 0.0);
  EXPECT_LE(j["accuracy"].get<double>(), 100.0);
}

TEST(Predict, ProbabilitiesAndArgmax) {
  TempDir dir;
  vitforge::testing::write_png_dataset(dir / "d", 1, {"a", "b"}, 8, 3);
  cli::save_model(dir / "m.ckpt", ViTConfig::tiny(2), {"a", "b"},
                  init_params<float>(ViTConfig::tiny(2), 2));
  std::ostringstream out;
  cli::cmd_predict(dir / "m.ckpt", dir / "d" / "images" / "img0.png", out);
  auto j = nlohmann::json::parse(out.str());
  auto p = j["probabilities"].get<std::vector<double>>();
  ASSERT_EQ(p.size(), 2u);
  EXPECT_NEAR(p[0] + p[1], 1.0, 1e-4);
  EXPECT_EQ(j["label"], p[1] > p[0] ? 1 : 0);
  EXPECT_EQ(j["className"], p[1] > p[0] ? "b" : "a");
  write_file(dir / "junk.png", "not an image");
  EXPECT_THROW(cli::cmd_predict(dir / "m.ckpt", dir / "junk.png", out), Error);
}
