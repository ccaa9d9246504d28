#include <gtest/gtest.h>

#include <sstream>

#include "../tools/commands.hpp"

using namespace zipcount;
using namespace zipcount::cli;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("zipcount_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

CommonOptions common_at(const fs::path& out) {
  CommonOptions c;
  c.out = out;
  c.workers = 2;
  return c;
}

json read_json(const fs::path& p) { return json::parse(read_file(p)); }

}  // namespace

TEST(GtMap, EmptyDirectoryIsAnError) {
  const auto dir = fresh_dir("gt_empty");
  std::ostringstream out, err;
  EXPECT_EQ(cmd_gt_map({dir / "ann"}, common_at(dir / "out"), out, err), 1);
  EXPECT_NE(err.str().find("no annotations found"), std::string::npos);
}

TEST(GtMap, WritesOneMapPerFileAndManifest) {
  const auto dir = fresh_dir("gt_three");
  fs::create_directories(dir / "ann");
  write_annotation(dir / "ann" / "a.json", {64, 64, {{1, 1}, {40, 50}}});
  write_annotation(dir / "ann" / "b.json", {32, 48, {}});
  write_annotation(dir / "ann" / "c.json", {100, 100, {{99, 99}, {0, 0}, {50, 50}}});
  std::ostringstream out, err;
  ASSERT_EQ(cmd_gt_map({dir / "ann", 16, 1.0}, common_at(dir / "out"), out, err), 0) << err.str();
  for (const char* n : {"a.bcm", "b.bcm", "c.bcm"}) EXPECT_TRUE(fs::exists(dir / "out" / n)) << n;
  const auto c = read_bcm(dir / "out" / "c.bcm");
  EXPECT_EQ(c.height(), 7u);
  double total = 0;
  for (float v : c.values()) total += v;
  EXPECT_EQ(total, 3.0);

  const auto m = read_json(dir / "out" / "manifest.json");
  EXPECT_EQ(m.at("command"), "gt-map");
  EXPECT_EQ(m.at("inputs").size(), 3u);
  EXPECT_EQ(m.at("outputs").size(), 3u);
  EXPECT_TRUE(m.contains("config_hash"));
  EXPECT_NE(out.str().find("file=c.json total=3"), std::string::npos);
}

TEST(GtMap, ReportsOutOfBoundsIndices) {
  const auto dir = fresh_dir("gt_oob");
  fs::create_directories(dir / "ann");
  write_annotation(dir / "ann" / "good.json", {32, 32, {{1, 1}}});
  write_annotation(dir / "ann" / "bad.json", {32, 32, {{1, 1}, {40, 2}}});
  std::ostringstream out, err;
  EXPECT_EQ(cmd_gt_map({dir / "ann", 8, 1.0}, common_at(dir / "out"), out, err), 1);
  EXPECT_NE(err.str().find("bad.json"), std::string::npos);
  EXPECT_NE(err.str().find("1"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "out" / "good.bcm"));
  EXPECT_FALSE(fs::exists(dir / "out" / "bad.bcm"));
}

TEST(Stats, GroupsByGridAndCountsBins) {
  const auto dir = fresh_dir("stats");
  fs::create_directories(dir / "maps");
  CountMap a(make_grid(16, 16, 8));
  a(0, 0) = 2;
  a(1, 1) = 7;
  CountMap b(make_grid(24, 8, 8));
  write_bcm(dir / "maps" / "a.bcm", to_float_map(a));
  write_bcm(dir / "maps" / "b.bcm", to_float_map(b));
  auto opt = common_at(dir / "out");
  opt.block = 8;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_stats({dir / "maps"}, opt, out, err), 0) << err.str();
  EXPECT_NE(out.str().find("grid=2x2 maps=1 blocks=4 zero_blocks=2 zero_fraction=0.5"), std::string::npos);
  EXPECT_NE(out.str().find("grid=3x1 maps=1 blocks=3 zero_blocks=3 zero_fraction=1"), std::string::npos);
  const auto st = read_json(dir / "out" / "stats.json").at("groups");
  ASSERT_EQ(st.size(), 2u);
  EXPECT_EQ(st[0].at("bin_occupancy"), (std::vector<int>{2, 0, 1, 0, 1}));
}

TEST(GradCheck, DefaultPasses) {
  const auto dir = fresh_dir("gc");
  std::ostringstream out, err;
  EXPECT_EQ(cmd_grad_check({60, ""}, common_at(dir), out, err), 0) << out.str() << err.str();
  for (const char* t : {"block", "ce", "nll", "count", "composite"}) {
    EXPECT_NE(out.str().find(std::string("term=") + t + " status=pass"), std::string::npos) << t;
  }
  EXPECT_TRUE(read_json(dir / "grad_check.json").at("passed").get<bool>());
}

TEST(GradCheck, InjectedFaultIsNamed) {
  const auto dir = fresh_dir("gc_fault");
  std::ostringstream out, err;
  EXPECT_EQ(cmd_grad_check({30, "nll"}, common_at(dir), out, err), 1);
  EXPECT_NE(out.str().find("term=nll status=fail"), std::string::npos);
  EXPECT_NE(err.str().find("fail term=nll"), std::string::npos);
  EXPECT_NE(out.str().find("term=ce status=pass"), std::string::npos);
}

TEST(GradCheck, ZeroTrialsIsAnError) {
  std::ostringstream out, err;
  EXPECT_EQ(cmd_grad_check({0, ""}, common_at(fresh_dir("gc_zero")), out, err), 1);
  EXPECT_NE(err.str().find("trials must be >= 1"), std::string::npos);
}

namespace {
fs::path small_demo_config(const fs::path& dir, double lr) {
  const json j = {{"steps", 40},
                  {"batch_size", 4},
                  {"lr", lr},
                  {"train_scenes", 6},
                  {"test_scenes", 3},
                  {"scene", {{"image_height", 96}, {"image_width", 96}, {"mean_heads", 12}}}};
  write_file_atomic(dir / "cfg.json", j.dump());
  return dir / "cfg.json";
}
}  // namespace

TEST(TrainDemo, SameSeedGivesIdenticalOutputs) {
  const auto dir = fresh_dir("demo_det");
  const auto cfg = small_demo_config(dir, 0.02);
  std::ostringstream out, err;
  auto a = common_at(dir / "a");
  a.workers = 1;
  auto b = common_at(dir / "b");
  b.workers = 4;
  ASSERT_EQ(cmd_train_demo({cfg}, a, out, err), 0) << err.str();
  ASSERT_EQ(cmd_train_demo({cfg}, b, out, err), 0) << err.str();
  for (const char* f : {"loss_curve.csv", "checkpoint_zip.zck", "predictions_zip.csv", "report.json"}) {
    EXPECT_EQ(read_file(dir / "a" / f), read_file(dir / "b" / f)) << f;
  }
  const auto m = read_json(dir / "a" / "manifest.json");
  EXPECT_EQ(m.at("command"), "train-demo");
  EXPECT_EQ(m.at("config_hash"), read_json(dir / "b" / "manifest.json").at("config_hash"));
}

TEST(TrainDemo, ZeroLearningRateGivesFlatCurve) {
  const auto dir = fresh_dir("demo_flat");
  std::ostringstream out, err;
  ASSERT_EQ(cmd_train_demo({small_demo_config(dir, 0.0)}, common_at(dir / "out"), out, err), 0) << err.str();
  std::istringstream csv(read_file(dir / "out" / "loss_curve.csv"));
  std::string line;
  std::getline(csv, line);
  std::map<std::string, std::vector<double>> totals;
  while (std::getline(csv, line)) {
    std::istringstream row(line);
    std::string model, epoch, total;
    std::getline(row, model, ',');
    std::getline(row, epoch, ',');
    std::getline(row, total, ',');
    totals[model].push_back(std::stod(total));
  }
  ASSERT_EQ(totals.size(), 2u);
  for (const auto& [model, v] : totals) {
    ASSERT_FALSE(v.empty());
    for (double t : v) EXPECT_NEAR(t, v.front(), 1e-9 * v.front()) << model;
  }
}

TEST(TrainDemo, BadConfigIsAnError) {
  const auto dir = fresh_dir("demo_bad");
  write_file_atomic(dir / "cfg.json", R"({"batch_size": 0})");
  std::ostringstream out, err;
  EXPECT_EQ(cmd_train_demo({dir / "cfg.json"}, common_at(dir / "out"), out, err), 1);
  EXPECT_NE(err.str().find("error"), std::string::npos);
}

TEST(Eval, ScoresDemoPredictionsAgainstWrittenScenes) {
  const auto dir = fresh_dir("eval");
  std::ostringstream out, err;
  ASSERT_EQ(cmd_train_demo({small_demo_config(dir, 0.02)}, common_at(dir / "demo"), out, err), 0);
  const auto report = read_json(dir / "demo" / "report.json");
  std::ostringstream eout, eerr;
  ASSERT_EQ(cmd_eval({dir / "demo" / "predictions_zip.csv", dir / "demo" / "test_scenes"},
                     common_at(dir / "eval"), eout, eerr),
            0)
      << eerr.str();
  const auto metrics = read_json(dir / "eval" / "eval.json");
  EXPECT_NEAR(metrics.at("mae").get<double>(), report.at("test_mae_zip").get<double>(), 1e-9);
  EXPECT_NE(eout.str().find("images=3"), std::string::npos);
}

TEST(Eval, MissingPredictionIsAnError) {
  const auto dir = fresh_dir("eval_missing");
  fs::create_directories(dir / "ann");
  write_annotation(dir / "ann" / "x.json", {8, 8, {{1, 1}}});
  write_annotation(dir / "ann" / "y.json", {8, 8, {}});
  write_file_atomic(dir / "p.csv", "image_id,count\nx,1\n");
  std::ostringstream out, err;
  EXPECT_EQ(cmd_eval({dir / "p.csv", dir / "ann"}, common_at(dir / "out"), out, err), 1);
  EXPECT_NE(err.str().find("image_id=y"), std::string::npos);
}

TEST(Workers, EnvironmentFallback) {
  ::setenv("ZIPCOUNT_WORKERS", "3", 1);
  EXPECT_EQ(resolve_workers(0), 3u);
  EXPECT_EQ(resolve_workers(5), 5u);
  ::unsetenv("ZIPCOUNT_WORKERS");
  EXPECT_GE(resolve_workers(0), 1u);
}

TEST(ConfigHash, StableAndSensitive) {
  const json a = {{"lr", 0.02}, {"steps", 10}};
  EXPECT_EQ(config_hash(a), config_hash(json::parse(a.dump())));
  EXPECT_NE(config_hash(a), config_hash(json{{"lr", 0.03}, {"steps", 10}}));
  EXPECT_EQ(config_hash(a).size(), 16u);
}
