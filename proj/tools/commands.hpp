#pragma once

// Implementations of the zipcount subcommands. Each returns a process exit
// code (0 ok, 1 validation/check failure) and writes manifest.json into its
// output directory.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "zipcount/zipcount.hpp"

namespace zipcount::cli {

inline constexpr const char* kToolVersion = "0.1.0";

struct CommonOptions {
  fs::path out = "zipcount_out";
  std::size_t workers = 0;  // 0: resolve from ZIPCOUNT_WORKERS, then hardware
  std::uint64_t seed = 0;
  std::optional<std::int64_t> block;
  std::optional<fs::path> bins;
  double omega = 1.0;
};

inline std::size_t resolve_workers(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("ZIPCOUNT_WORKERS")) {
    try {
      const auto n = std::stoul(env);
      if (n > 0) return n;
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Calls fn(i) for i in [0, n) on up to `workers` threads.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::min(std::max<std::size_t>(workers, 1), std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) fn(i);
    });
  }
}

/// FNV-1a 64-bit, hex encoded.
inline std::string config_hash(const json& config) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

/// Record of one command invocation, written as <out>/manifest.json.
class RunManifest {
 public:
  RunManifest(std::string command, json config, std::uint64_t seed)
      : command_(std::move(command)), config_(std::move(config)), seed_(seed),
        start_(std::chrono::steady_clock::now()) {}

  void input(const fs::path& p) { inputs_.push_back(p.string()); }
  void output(const fs::path& p) { outputs_.push_back(p.string()); }

  void write(const fs::path& dir) const {
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json j = {{"command", command_},     {"config", config_},   {"config_hash", config_hash(config_)},
              {"seed", seed_},           {"inputs", inputs_},   {"outputs", outputs_},
              {"tool_version", kToolVersion}, {"wall_time_s", wall}};
    fs::create_directories(dir);
    write_file_atomic(dir / "manifest.json", j.dump(2) + "\n");
  }

 private:
  std::string command_;
  json config_;
  std::uint64_t seed_;
  std::vector<std::string> inputs_, outputs_;
  std::chrono::steady_clock::time_point start_;
};

inline std::vector<fs::path> list_files(const fs::path& dir, const std::string& ext) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline BinScheme resolve_bins(const CommonOptions& opt, std::int64_t block) {
  if (opt.bins) return bins_from_json(json::parse(read_file(*opt.bins)));
  return default_bins(block);
}

// ---------------------------------------------------------------------------

struct GtMapOptions {
  fs::path ann_dir;
  std::int64_t block = 16;
  double scale = 1.0;
};

inline int cmd_gt_map(const GtMapOptions& g, const CommonOptions& opt, std::ostream& out,
                      std::ostream& err) {
  const auto files = list_files(g.ann_dir, ".json");
  if (files.empty()) {
    err << "error: no annotations found in " << g.ann_dir.string() << "\n";
    return 1;
  }
  if (g.block <= 0) {
    err << "error: block size must be positive\n";
    return 1;
  }
  fs::create_directories(opt.out);
  RunManifest manifest("gt-map", {{"block", g.block}, {"scale", g.scale}}, opt.seed);

  struct Result {
    std::optional<std::int64_t> total;
    std::string error;
  };
  std::vector<Result> results(files.size());
  parallel_for(files.size(), resolve_workers(opt.workers), [&](std::size_t i) {
    try {
      auto ann = read_annotation(files[i]);
      if (g.scale != 1.0) ann = scale_annotations(ann, g.scale);
      const auto grid = make_grid(std::int64_t(ann.image_h), std::int64_t(ann.image_w), g.block);
      const auto map = points_to_count_map(ann, grid);
      write_bcm(opt.out / (files[i].stem().string() + ".bcm"), to_float_map(map));
      results[i].total = map.total();
    } catch (const std::exception& e) {
      results[i].error = e.what();
    }
  });

  int failures = 0;
  for (std::size_t i = 0; i < files.size(); ++i) {
    manifest.input(files[i]);
    if (results[i].total) {
      out << "file=" << files[i].filename().string() << " total=" << *results[i].total << "\n";
      manifest.output(opt.out / (files[i].stem().string() + ".bcm"));
    } else {
      ++failures;
      err << "error file=" << files[i].filename().string() << " " << results[i].error << "\n";
    }
  }
  out << "files=" << files.size() << " written=" << files.size() - failures << " failed=" << failures << "\n";
  manifest.write(opt.out);
  return failures ? 1 : 0;
}

// ---------------------------------------------------------------------------

struct StatsOptions {
  fs::path map_dir;
};

inline int cmd_stats(const StatsOptions& s, const CommonOptions& opt, std::ostream& out, std::ostream& err) {
  const auto files = list_files(s.map_dir, ".bcm");
  if (files.empty()) {
    err << "error: no .bcm maps found in " << s.map_dir.string() << "\n";
    return 1;
  }
  RunManifest manifest("stats", {{"block", opt.block ? json(*opt.block) : json(nullptr)},
                                 {"bins", opt.bins ? json(opt.bins->string()) : json(nullptr)}},
                       opt.seed);
  std::map<std::pair<std::size_t, std::size_t>, std::vector<CountMap>> groups;
  int failures = 0;
  for (const auto& f : files) {
    manifest.input(f);
    try {
      const auto t = read_bcm(f);
      if (t.channels() != 1) throw FormatError("expected a single-channel count map");
      CountMap m(GridSpec{0, 0, 0, t.height(), t.width()});
      for (std::size_t b = 0; b < t.plane(); ++b) {
        const float v = t.at(0, b);
        if (!(v >= 0) || std::floor(v) != v) throw FormatError("block values must be non-negative integers");
        m.counts.at(0, b) = static_cast<std::int64_t>(v);
      }
      groups[{t.height(), t.width()}].push_back(std::move(m));
    } catch (const std::exception& e) {
      ++failures;
      err << "error file=" << f.filename().string() << " " << e.what() << "\n";
    }
  }
  std::optional<BinScheme> bins;
  if (opt.bins || opt.block) bins = resolve_bins(opt, opt.block.value_or(16));

  json report = json::array();
  for (const auto& [dims, maps] : groups) {
    const auto st = sparsity_stats(maps);
    const std::string grid = std::to_string(dims.first) + "x" + std::to_string(dims.second);
    out << "grid=" << grid << " maps=" << maps.size() << " blocks=" << st.total_blocks
        << " zero_blocks=" << st.zero_blocks << " zero_fraction=" << fmt_double(st.zero_fraction()) << "\n";
    for (std::size_t v = 0; v < st.histogram.size(); ++v) {
      if (st.histogram[v]) out << "grid=" << grid << " count=" << v << " blocks=" << st.histogram[v] << "\n";
    }
    json g = {{"grid_h", dims.first},       {"grid_w", dims.second},
              {"maps", maps.size()},        {"blocks", st.total_blocks},
              {"zero_blocks", st.zero_blocks}, {"zero_fraction", st.zero_fraction()},
              {"histogram", st.histogram}};
    if (bins) {
      std::vector<std::uint64_t> occupancy(bins->size(), 0);
      for (std::size_t v = 0; v < st.histogram.size(); ++v) occupancy[count_to_bin(std::int64_t(v), *bins)] += st.histogram[v];
      for (std::size_t k = 0; k < occupancy.size(); ++k) {
        out << "grid=" << grid << " bin=" << k << " blocks=" << occupancy[k] << "\n";
      }
      g["bin_occupancy"] = occupancy;
      g["bin_scheme"] = bins_to_json(*bins);
    }
    report.push_back(std::move(g));
  }
  fs::create_directories(opt.out);
  write_file_atomic(opt.out / "stats.json", json{{"groups", report}}.dump(2) + "\n");
  manifest.output(opt.out / "stats.json");
  manifest.write(opt.out);
  return failures ? 1 : 0;
}

// ---------------------------------------------------------------------------

struct GradCheckCmdOptions {
  std::size_t trials = 200;
  std::string inject_fault;
};

inline int cmd_grad_check(const GradCheckCmdOptions& g, const CommonOptions& opt, std::ostream& out,
                          std::ostream& err) {
  if (g.trials < 1) {
    err << "error: trials must be >= 1\n";
    return 1;
  }
  GradCheckOptions go;
  go.seed = opt.seed;
  go.trials = g.trials;
  go.inject_fault = g.inject_fault;
  RunManifest manifest("grad-check", {{"trials", g.trials}, {"inject_fault", g.inject_fault}}, opt.seed);
  const auto rep = run_grad_check(go);
  json j = json::array();
  for (const auto& t : rep.terms) {
    out << "term=" << t.term << " status=" << (t.passed() ? "pass" : "fail") << " checked=" << t.checked
        << " max_rel_error=" << fmt_double(t.max_rel_error) << " tolerance=" << t.tolerance << "\n";
    if (!t.passed()) err << "fail term=" << t.term << " worst: " << t.worst << "\n";
    j.push_back({{"term", t.term}, {"passed", t.passed()}, {"checked", t.checked},
                 {"max_rel_error", t.max_rel_error}, {"tolerance", t.tolerance}, {"worst", t.worst}});
  }
  out << "status=" << (rep.passed() ? "pass" : "fail") << "\n";
  fs::create_directories(opt.out);
  write_file_atomic(opt.out / "grad_check.json", json{{"terms", j}, {"passed", rep.passed()}}.dump(2) + "\n");
  manifest.output(opt.out / "grad_check.json");
  manifest.write(opt.out);
  return rep.passed() ? 0 : 1;
}

// ---------------------------------------------------------------------------

struct DemoConfig {
  SceneConfig scene;
  TrainConfig train;
  std::size_t train_scenes = 20;
  std::size_t test_scenes = 10;
};

/// Top-level training keys ({seed, lr, warmup_steps, steps, batch_size,
/// omega, weight_decay}) plus optional "train_scenes", "test_scenes" and a
/// "scene" object overriding the synthetic generator.
inline DemoConfig demo_config_from_json(const json& j) {
  DemoConfig c;
  c.train = train_config_from_json(j, c.train);
  c.train_scenes = j.value("train_scenes", c.train_scenes);
  c.test_scenes = j.value("test_scenes", c.test_scenes);
  if (j.contains("scene")) {
    const auto& s = j.at("scene");
    const auto h = s.value("image_height", std::int64_t(c.scene.grid.image_h));
    const auto w = s.value("image_width", std::int64_t(c.scene.grid.image_w));
    const auto r = s.value("block", std::int64_t(c.scene.grid.block));
    c.scene.grid = make_grid(h, w, r);
    c.scene.structural_fraction = s.value("structural_fraction", c.scene.structural_fraction);
    c.scene.mean_heads = s.value("mean_heads", c.scene.mean_heads);
    c.scene.jitter_sigma = s.value("jitter_sigma", c.scene.jitter_sigma);
    c.scene.feature_channels = s.value("feature_channels", c.scene.feature_channels);
    c.scene.separation = s.value("separation", c.scene.separation);
    c.scene.count_shift = s.value("count_shift", c.scene.count_shift);
  }
  if (c.train_scenes == 0 || c.test_scenes == 0) throw std::invalid_argument("scene counts must be >= 1");
  return c;
}

inline json demo_config_to_json(const DemoConfig& c) {
  auto j = train_config_to_json(c.train);
  j["train_scenes"] = c.train_scenes;
  j["test_scenes"] = c.test_scenes;
  j["scene"] = {{"image_height", c.scene.grid.image_h}, {"image_width", c.scene.grid.image_w},
                {"block", c.scene.grid.block},         {"structural_fraction", c.scene.structural_fraction},
                {"mean_heads", c.scene.mean_heads},    {"jitter_sigma", c.scene.jitter_sigma},
                {"feature_channels", c.scene.feature_channels}, {"separation", c.scene.separation},
                {"count_shift", c.scene.count_shift}};
  return j;
}

struct DemoOutcome {
  TrainResult zip;
  TrainResult poisson;
  double heldout_nll_zip = 0;
  double heldout_nll_poisson = 0;
  EvalSummary eval_zip;
  EvalSummary eval_poisson;
  std::optional<double> auc;
  std::vector<EvalPair> predictions_zip;
  BinScheme bins = default_bins(8);
};

/// Synthetic corpus -> paired ZIP / pi-frozen training -> held-out evaluation.
/// Train scenes use indices [0, train_scenes), test scenes the next test_scenes.
inline DemoOutcome run_demo(const DemoConfig& c, const std::vector<SceneTruth>& train_set,
                            const std::vector<SceneTruth>& test_set) {
  DemoOutcome o;
  const auto train_ex = to_examples(train_set);
  const auto test_ex = to_examples(test_set);
  std::vector<CountMap> train_maps;
  for (const auto& s : train_set) train_maps.push_back(s.count_map);
  o.bins = fit_open_center(default_bins(std::int64_t(c.scene.grid.block)), train_maps);

  auto zip_cfg = c.train;
  zip_cfg.zero_inflation = true;
  auto poisson_cfg = c.train;
  poisson_cfg.zero_inflation = false;
  o.zip = train(train_ex, o.bins, zip_cfg);
  o.poisson = train(train_ex, o.bins, poisson_cfg);
  o.heldout_nll_zip = mean_nll(test_ex, o.zip.params, o.bins, true);
  o.heldout_nll_poisson = mean_nll(test_ex, o.poisson.params, o.bins, false);

  std::vector<EvalPair> pairs_poisson;
  std::vector<double> pi_scores;
  std::vector<std::uint8_t> labels;
  for (std::size_t k = 0; k < test_set.size(); ++k) {
    const auto id = "test_" + std::to_string(k);
    const double truth = double(test_set[k].count_map.total());
    const auto out_zip = forward(test_set[k].features, o.zip.params, o.bins, true);
    const auto out_poisson = forward(test_set[k].features, o.poisson.params, o.bins, false);
    o.predictions_zip.push_back({id, truth, predict_count(out_zip)});
    pairs_poisson.push_back({id, truth, predict_count(out_poisson)});
    pi_scores.insert(pi_scores.end(), out_zip.pi().values().begin(), out_zip.pi().values().end());
    labels.insert(labels.end(), test_set[k].structural_mask.values().begin(),
                  test_set[k].structural_mask.values().end());
  }
  o.eval_zip = evaluate(o.predictions_zip);
  o.eval_poisson = evaluate(pairs_poisson);
  o.auc = ranking_auc(pi_scores, labels);
  return o;
}

struct TrainDemoOptions {
  std::optional<fs::path> config;
  bool seed_set = false;
  bool omega_set = false;
};

inline int cmd_train_demo(const TrainDemoOptions& t, const CommonOptions& opt, std::ostream& out,
                          std::ostream& err) {
  DemoConfig c;
  try {
    c = demo_config_from_json(t.config ? json::parse(read_file(*t.config)) : json::object());
    if (t.seed_set) c.train.seed = opt.seed;
    if (t.omega_set) c.train.omega = opt.omega;
    if (opt.block) c.scene.grid = make_grid(std::int64_t(c.scene.grid.image_h), std::int64_t(c.scene.grid.image_w), *opt.block);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  c.scene.seed = c.train.seed;
  const auto cfg_json = demo_config_to_json(c);
  RunManifest manifest("train-demo", cfg_json, c.train.seed);
  if (t.config) manifest.input(*t.config);

  DemoOutcome o;
  std::vector<SceneTruth> test_set;
  try {
    const auto train_set = generate_corpus(c.scene, c.train_scenes, 0);
    test_set = generate_corpus(c.scene, c.test_scenes, c.train_scenes);
    o = run_demo(c, train_set, test_set);
  } catch (const TrainingError& e) {
    err << "error: training aborted: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  fs::create_directories(opt.out / "test_scenes");
  std::ostringstream curve;
  curve.precision(17);
  curve << "model,epoch,total,ce,nll,count\n";
  for (const auto* run : {&o.zip, &o.poisson}) {
    const char* name = run == &o.zip ? "zip" : "poisson";
    for (const auto& e : run->epochs) {
      curve << name << ',' << e.epoch << ',' << e.total << ',' << e.ce << ',' << e.nll << ',' << e.count << '\n';
    }
  }
  write_file_atomic(opt.out / "loss_curve.csv", curve.str());
  write_checkpoint(opt.out / "checkpoint_zip.zck", {o.bins, o.zip.params, c.train.seed, c.train.steps, true});
  write_checkpoint(opt.out / "checkpoint_poisson.zck", {o.bins, o.poisson.params, c.train.seed, c.train.steps, false});
  for (std::size_t k = 0; k < test_set.size(); ++k) write_scene(opt.out / "test_scenes", "test_" + std::to_string(k), test_set[k]);
  write_file_atomic(opt.out / "predictions_zip.csv", format_prediction_csv(o.predictions_zip));

  auto nae = [](const EvalSummary& s) { return s.nae ? json(*s.nae) : json(nullptr); };
  json report = {{"auc", o.auc ? json(*o.auc) : json(nullptr)},
                 {"heldout_nll_zip", o.heldout_nll_zip},
                 {"heldout_nll_poisson", o.heldout_nll_poisson},
                 {"test_mae_zip", o.eval_zip.mae},
                 {"test_rmse_zip", o.eval_zip.rmse},
                 {"test_nae_zip", nae(o.eval_zip)},
                 {"test_mae_poisson", o.eval_poisson.mae},
                 {"test_rmse_poisson", o.eval_poisson.rmse},
                 {"test_nae_poisson", nae(o.eval_poisson)},
                 {"lambda_range_zip", {o.zip.min_lambda, o.zip.max_lambda}},
                 {"open_bin_center", o.bins.open_center()},
                 {"zip_beats_poisson", o.heldout_nll_zip < o.heldout_nll_poisson && o.eval_zip.mae < o.eval_poisson.mae}};
  write_file_atomic(opt.out / "report.json", report.dump(2) + "\n");

  out << "auc=" << (o.auc ? fmt_double(*o.auc) : "undefined") << "\n"
      << "heldout_nll_zip=" << fmt_double(o.heldout_nll_zip) << "\n"
      << "heldout_nll_poisson=" << fmt_double(o.heldout_nll_poisson) << "\n"
      << "test_mae_zip=" << fmt_double(o.eval_zip.mae) << "\n"
      << "test_mae_poisson=" << fmt_double(o.eval_poisson.mae) << "\n"
      << "lambda_min=" << fmt_double(o.zip.min_lambda) << " lambda_max=" << fmt_double(o.zip.max_lambda) << "\n";

  for (const char* f : {"loss_curve.csv", "checkpoint_zip.zck", "checkpoint_poisson.zck", "predictions_zip.csv",
                        "report.json", "test_scenes"}) {
    manifest.output(opt.out / f);
  }
  manifest.write(opt.out);
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalOptions {
  fs::path pred_csv;
  fs::path ann_dir;
};

inline int cmd_eval(const EvalOptions& e, const CommonOptions& opt, std::ostream& out, std::ostream& err) {
  RunManifest manifest("eval", {{"pred", e.pred_csv.string()}, {"ann_dir", e.ann_dir.string()}}, opt.seed);
  std::map<std::string, double> preds;
  try {
    preds = read_prediction_csv(e.pred_csv);
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return 1;
  }
  manifest.input(e.pred_csv);
  const auto files = list_files(e.ann_dir, ".json");
  if (files.empty()) {
    err << "error: no annotations found in " << e.ann_dir.string() << "\n";
    return 1;
  }
  std::vector<std::optional<double>> truths(files.size());
  std::vector<std::string> errors(files.size());
  parallel_for(files.size(), resolve_workers(opt.workers), [&](std::size_t i) {
    try {
      truths[i] = double(read_annotation(files[i]).points.size());
    } catch (const std::exception& ex) {
      errors[i] = ex.what();
    }
  });
  std::vector<EvalPair> pairs;
  int failures = 0;
  for (std::size_t i = 0; i < files.size(); ++i) {
    manifest.input(files[i]);
    const auto id = files[i].stem().string();
    if (!truths[i]) {
      ++failures;
      err << "error file=" << files[i].filename().string() << " " << errors[i] << "\n";
      continue;
    }
    const auto it = preds.find(id);
    if (it == preds.end()) {
      ++failures;
      err << "error: no prediction for image_id=" << id << "\n";
      continue;
    }
    if (it->second < 0) err << "warning: negative prediction for image_id=" << id << "\n";
    pairs.push_back({id, *truths[i], it->second});
  }
  if (failures || pairs.empty()) return 1;
  const auto s = evaluate(pairs);
  out << "images=" << s.images << "\n"
      << "positive_images=" << s.positive_images << "\n"
      << "mae=" << fmt_double(s.mae) << "\n"
      << "rmse=" << fmt_double(s.rmse) << "\n"
      << "nae=" << (s.nae ? fmt_double(*s.nae) : "undefined") << "\n"
      << "nae_percent=" << (s.nae ? fmt_double(*s.nae * 100.0) : "undefined") << "\n";
  json j = {{"images", s.images}, {"positive_images", s.positive_images}, {"mae", s.mae}, {"rmse", s.rmse},
            {"nae", s.nae ? json(*s.nae) : json(nullptr)},
            {"nae_percent", s.nae ? json(*s.nae * 100.0) : json(nullptr)}};
  fs::create_directories(opt.out);
  write_file_atomic(opt.out / "eval.json", j.dump(2) + "\n");
  manifest.output(opt.out / "eval.json");
  manifest.write(opt.out);
  return 0;
}

}  // namespace zipcount::cli
