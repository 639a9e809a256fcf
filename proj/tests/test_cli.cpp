#include <gtest/gtest.h>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "suitein/cli.hpp"
#include "support/tempdir.hpp"

namespace cli = suitein::cli;
namespace data = suitein::data;
namespace eval = suitein::eval;
namespace fs = std::filesystem;
namespace train = suitein::train;
using suitein::testing::TempDir;

namespace {

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "suitein");
  args.insert(args.begin() + 1, "--quiet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write(const fs::path& p, const std::string& text) { data::write_text_file(p, text); }

// Three short sequences, one per split.
fs::path small_sim_config(const TempDir& dir) {
  const auto path = dir / "sim.json";
  write(path, R"({"num_sequences": 3, "split": {"train": 1, "val": 1, "test": 1},
                  "scenarios": ["normal", "remove_device:watch"], "base": {"duration_s": 30}})");
  return path;
}

fs::path small_train_config(const TempDir& dir, double lr = 1e-3) {
  const auto path = dir / "train.json";
  nlohmann::json j = {{"epochs", 2},
                      {"batch_size", 16},
                      {"learning_rate", lr},
                      {"model",
                       {{"shallow_width", 4},
                        {"mlp_hidden", 8},
                        {"conv_channels", {4, 4}},
                        {"feature_dim", 8},
                        {"regressor_hidden", 8}}}};
  write(path, j.dump());
  return path;
}

// Every regular file under `root` except run manifests, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().filename() == cli::kRunManifestFile) continue;
    out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

struct SmallDataset {
  TempDir dir{"suitein_cli"};
  fs::path data = dir / "data";
  SmallDataset() { EXPECT_EQ(run({"simulate", "--config", small_sim_config(dir).string(), "--out", data.string()}), 0); }
};

}  // namespace

TEST(CliSimulate, DefaultConfigWritesTwelveSequences) {
  TempDir dir;
  ASSERT_EQ(run({"simulate", "--out", (dir / "d").string()}), 0);
  const auto split = data::read_split(dir / "d" / data::kSplitFile);
  EXPECT_EQ(split.train.size(), 8u);
  EXPECT_EQ(split.val.size(), 2u);
  EXPECT_EQ(split.test.size(), 2u);
  std::size_t manifests = 0;
  for (const auto& e : fs::directory_iterator(dir / "d"))
    if (e.is_directory() && fs::exists(e.path() / data::kManifestFile)) ++manifests;
  EXPECT_EQ(manifests, 12u);
  const auto rm = nlohmann::json::parse(slurp(dir / "d" / cli::kRunManifestFile));
  EXPECT_EQ(rm["command"], "simulate");
  EXPECT_EQ(rm["outputs"].size(), 14u);
  EXPECT_TRUE(rm.contains("tool_version"));
}

TEST(CliSimulate, SameSeedSameDirectory) {
  TempDir dir;
  const auto cfg = small_sim_config(dir);
  ASSERT_EQ(run({"simulate", "--config", cfg.string(), "--out", (dir / "a").string(), "--seed", "7"}), 0);
  ASSERT_EQ(run({"simulate", "--config", cfg.string(), "--out", (dir / "b").string(), "--seed", "7"}), 0);
  ASSERT_EQ(run({"simulate", "--config", cfg.string(), "--out", (dir / "c").string(), "--seed", "8"}), 0);
  EXPECT_EQ(tree(dir / "a"), tree(dir / "b"));
  EXPECT_NE(tree(dir / "a"), tree(dir / "c"));
}

TEST(CliSimulate, SeedFromEnvironment) {
  TempDir dir;
  const auto cfg = small_sim_config(dir);
  ::setenv("SUITEIN_SEED", "7", 1);
  const int code = run({"simulate", "--config", cfg.string(), "--out", (dir / "env").string()});
  ::unsetenv("SUITEIN_SEED");
  ASSERT_EQ(code, 0);
  ASSERT_EQ(run({"simulate", "--config", cfg.string(), "--out", (dir / "flag").string(), "--seed", "7"}), 0);
  EXPECT_EQ(tree(dir / "env"), tree(dir / "flag"));
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "env" / cli::kRunManifestFile))["seed"], 7);
}

TEST(CliSimulate, MalformedJsonExitsTwoWithLocation) {
  TempDir dir;
  write(dir / "bad.json", "{\n  \"num_sequences\": 3,\n  \"split\": \n}\n");
  testing::internal::CaptureStderr();
  const int code = run({"simulate", "--config", (dir / "bad.json").string(), "--out", (dir / "d").string()});
  const auto err = testing::internal::GetCapturedStderr();
  EXPECT_EQ(code, 2);
  EXPECT_NE(err.find("line 4"), std::string::npos) << err;
}

TEST(CliSimulate, UnwritableOutputExitsThree) {
  TempDir dir;
  write(dir / "file", "x");
  testing::internal::CaptureStderr();
  EXPECT_EQ(run({"simulate", "--config", small_sim_config(dir).string(), "--out", (dir / "file" / "d").string()}), 3);
  testing::internal::GetCapturedStderr();
}

TEST(CliArgs, UnknownFlagExitsTwo) {
  testing::internal::CaptureStderr();
  EXPECT_EQ(run({"train", "--bogus"}), 2);
  testing::internal::GetCapturedStderr();
}

TEST(CliTrain, WritesCheckpointLogAndManifest) {
  SmallDataset ds;
  const auto model = ds.dir / "out" / "model.json";
  ASSERT_EQ(run({"train", "--data", ds.data.string(), "--config", small_train_config(ds.dir).string(), "--out",
                 model.string(), "--seed", "3"}),
            0);
  const auto ck = train::load_checkpoint(model);
  EXPECT_EQ(ck.config.device_ids, (std::vector<std::string>{"phone", "watch", "earbuds"}));
  EXPECT_TRUE(ck.params.contains("private.j1.conv1.w"));
  const auto log = slurp(ds.dir / "out" / "model.train_log.csv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 3);
  EXPECT_TRUE(fs::exists(ds.dir / "out" / "model.run_manifest.json"));
}

TEST(CliTrain, AblationFlags) {
  SmallDataset ds;
  const auto cfg = small_train_config(ds.dir).string();
  const auto plain = ds.dir / "plain.json";
  ASSERT_EQ(run({"train", "--data", ds.data.string(), "--config", cfg, "--out", plain.string(), "--no-contrastive"}),
            0);
  for (const auto& name : train::load_checkpoint(plain).params.names()) EXPECT_NE(name.rfind("private.", 0), 0u);

  const auto watch = ds.dir / "watch.json";
  ASSERT_EQ(run({"train", "--data", ds.data.string(), "--config", cfg, "--out", watch.string(), "--device-subset",
                 "watch"}),
            0);
  EXPECT_EQ(train::load_checkpoint(watch).config.devices, 1u);

  const auto pair = ds.dir / "pair.json";
  ASSERT_EQ(run({"train", "--data", ds.data.string(), "--config", cfg, "--out", pair.string(), "--device-subset",
                 "watch,phone"}),
            0);
  EXPECT_EQ(train::load_checkpoint(pair).config.device_ids, (std::vector<std::string>{"watch", "phone"}));

  const auto single = ds.dir / "single.json";
  ASSERT_EQ(run({"train", "--data", ds.data.string(), "--config", cfg, "--out", single.string(), "--no-aggregation",
                 "--no-contrastive", "--baseline-device", "earbuds"}),
            0);
  EXPECT_EQ(train::load_checkpoint(single).config.device_ids, (std::vector<std::string>{"earbuds"}));

  testing::internal::CaptureStderr();
  EXPECT_EQ(run({"train", "--data", ds.data.string(), "--config", cfg, "--out", (ds.dir / "x.json").string(),
                 "--device-subset", "ring"}),
            2);
  testing::internal::GetCapturedStderr();
}

TEST(CliTrain, SameSeedBitIdenticalCheckpoint) {
  SmallDataset ds;
  const auto cfg = small_train_config(ds.dir).string();
  for (const char* name : {"a.json", "b.json"})
    ASSERT_EQ(run({"train", "--data", ds.data.string(), "--config", cfg, "--out", (ds.dir / name).string(), "--seed",
                   "5"}),
              0);
  EXPECT_EQ(slurp(ds.dir / "a.json"), slurp(ds.dir / "b.json"));
}

TEST(CliTrain, DivergenceExitsFour) {
  SmallDataset ds;
  testing::internal::CaptureStderr();
  const int code = run({"train", "--data", ds.data.string(), "--config", small_train_config(ds.dir, 1e38).string(),
                        "--out", (ds.dir / "m.json").string()});
  const auto err = testing::internal::GetCapturedStderr();
  EXPECT_EQ(code, 4);
  EXPECT_NE(err.find("batch"), std::string::npos) << err;
  EXPECT_FALSE(fs::exists(ds.dir / "m.json"));
}

TEST(CliEval, SplitsOracleAndMismatch) {
  SmallDataset ds;
  const auto model = ds.dir / "m.json";
  ASSERT_EQ(run({"train", "--data", ds.data.string(), "--config", small_train_config(ds.dir).string(), "--out",
                 model.string()}),
            0);
  const auto out = ds.dir / "reports";
  for (const char* split : {"train", "test"}) {
    ASSERT_EQ(run({"eval", "--data", ds.data.string(), "--model", model.string(), "--split", split, "--out",
                   out.string(), "--jobs", "2"}),
              0);
    const auto csv = slurp(out / split / "aggregate.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2) << csv;
  }
  const auto test_id = data::read_split(ds.data / data::kSplitFile).test.front();
  const auto report = nlohmann::json::parse(slurp(out / "test" / (test_id + ".json")));
  EXPECT_EQ(report["interval_s"], 10.0);
  EXPECT_EQ(report["split"], "test");
  EXPECT_TRUE(fs::exists(out / "test" / (test_id + "_traj.csv")));

  ASSERT_EQ(run({"eval", "--data", ds.data.string(), "--model", model.string(), "--split", "train", "--out",
                 (ds.dir / "oracle").string(), "--oracle-velocities"}),
            0);
  std::istringstream rows(slurp(ds.dir / "oracle" / "train" / "aggregate.csv"));
  std::string line;
  std::getline(rows, line);
  while (std::getline(rows, line)) {
    const auto first = line.find(','), second = line.find(',', first + 1);
    EXPECT_LT(std::stod(line.substr(first + 1, second - first - 1)), 1e-3) << line;
  }

  auto c = suitein::net::ModelConfig{};
  c.device_ids = {"ring"};
  c.devices = 1;
  train::save_checkpoint(ds.dir / "ring.json", suitein::net::init_params(c, 1), c);
  testing::internal::CaptureStderr();
  EXPECT_EQ(run({"eval", "--data", ds.data.string(), "--model", (ds.dir / "ring.json").string()}), 2);
  EXPECT_EQ(run({"eval", "--data", ds.data.string(), "--model", model.string(), "--split", "dev"}), 2);
  testing::internal::GetCapturedStderr();
}

namespace {

std::size_t count_elements(const boost::property_tree::ptree& node, const std::string& name) {
  std::size_t n = 0;
  for (const auto& [key, child] : node) n += (key == name) + count_elements(child, name);
  return n;
}

std::string caption_of(const fs::path& svg) {
  boost::property_tree::ptree doc;
  boost::property_tree::read_xml(svg.string(), doc);
  for (const auto& [key, child] : doc.get_child("svg"))
    if (key == "text" && child.get<std::string>("<xmlattr>.id", "") == "caption") return child.data();
  return {};
}

}  // namespace

TEST(CliPlot, IdenticalTrajectoriesAndWellFormedXml) {
  TempDir dir;
  std::vector<double> t;
  std::vector<data::Vec2> p;
  for (int i = 0; i <= 200; ++i) {
    t.push_back(0.1 * i);
    p.push_back({std::sin(0.05 * i) * 5, 0.02 * i});
  }
  data::write_positions_csv(dir / "gt.csv", t, p);
  ASSERT_EQ(run({"plot", "--pred", (dir / "gt.csv").string(), "--gt", (dir / "gt.csv").string(), "--out",
                 (dir / "fig.svg").string()}),
            0);
  boost::property_tree::ptree doc;
  ASSERT_NO_THROW(boost::property_tree::read_xml((dir / "fig.svg").string(), doc));
  EXPECT_EQ(count_elements(doc, "polyline"), 2u);
  EXPECT_EQ(count_elements(doc, "circle"), 1u);
  EXPECT_EQ(count_elements(doc, "line"), 1u);
  const auto caption = caption_of(dir / "fig.svg");
  EXPECT_EQ(caption.rfind("ATE 0.000 m", 0), 0u) << caption;
  EXPECT_NE(caption.find("RTE 0.000 m"), std::string::npos) << caption;
}

TEST(CliPlot, CaptionMatchesEvaluator) {
  TempDir dir;
  std::vector<double> t;
  std::vector<data::Vec2> gt, pred;
  for (int i = 0; i <= 300; ++i) {
    t.push_back(0.1 * i);
    gt.push_back({0.1 * i, 0.0});
    pred.push_back({0.1 * i + 0.3, 0.4 + 0.001 * i * i / 100});
  }
  data::write_positions_csv(dir / "gt.csv", t, gt);
  data::write_positions_csv(dir / "pred.csv", t, pred);
  ASSERT_EQ(run({"plot", "--pred", (dir / "pred.csv").string(), "--gt", (dir / "gt.csv").string(), "--out",
                 (dir / "fig.svg").string()}),
            0);
  const double ate = eval::ate(eval::read_trajectory_csv(dir / "pred.csv"), eval::read_trajectory_csv(dir / "gt.csv"));
  const auto caption = caption_of(dir / "fig.svg");
  EXPECT_EQ(caption.rfind("ATE " + cli::format_fixed(ate, 3) + " m", 0), 0u) << caption;
  EXPECT_GT(ate, 0.4);
}

TEST(CliPlot, MissingInputExitsThree) {
  TempDir dir;
  testing::internal::CaptureStderr();
  EXPECT_EQ(run({"plot", "--pred", (dir / "none.csv").string(), "--gt", (dir / "none.csv").string(), "--out",
                 (dir / "f.svg").string()}),
            3);
  testing::internal::GetCapturedStderr();
}
