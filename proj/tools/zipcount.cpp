#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"

using namespace zipcount;
using namespace zipcount::cli;

int main(int argc, char** argv) {
  CLI::App app{"zipcount: blockwise zero-inflated Poisson counting toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  CommonOptions common;
  std::int64_t block = 0;
  std::string bins_path;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out", common.out, "Output directory")->capture_default_str();
    sub->add_option("--workers", common.workers, "Worker threads (default: $ZIPCOUNT_WORKERS or all cores)");
    sub->add_option("--seed", common.seed, "Random seed");
    sub->add_option("--block", block, "Block size in pixels");
    sub->add_option("--bins", bins_path, "Bin scheme JSON config")->check(CLI::ExistingFile);
    sub->add_option("--omega", common.omega, "Weight of the cross-entropy term")->capture_default_str();
  };

  GtMapOptions gt;
  auto* gt_cmd = app.add_subcommand("gt-map", "Annotation JSON directory -> .bcm count maps");
  gt_cmd->add_option("--ann-dir", gt.ann_dir, "Directory of annotation JSON files")->required();
  gt_cmd->add_option("--scale", gt.scale, "Rescale annotations by this factor")->capture_default_str();
  add_common(gt_cmd);

  StatsOptions st;
  auto* stats_cmd = app.add_subcommand("stats", "Blockwise count histograms and zero fractions");
  stats_cmd->add_option("--map-dir", st.map_dir, "Directory of .bcm count maps")->required();
  add_common(stats_cmd);

  GradCheckCmdOptions gc;
  auto* gc_cmd = app.add_subcommand("grad-check", "Finite-difference check of all loss gradients");
  gc_cmd->add_option("--trials", gc.trials, "Randomized instances")->capture_default_str();
  gc_cmd->add_option("--inject-fault", gc.inject_fault, "Negate one term's gradient (self-test)")
      ->group("")
      ->check(CLI::IsMember({"block", "ce", "nll", "count", "composite"}));
  add_common(gc_cmd);

  TrainDemoOptions td;
  std::string config_path;
  auto* td_cmd = app.add_subcommand("train-demo", "Synthetic ZIP vs Poisson training demo");
  td_cmd->add_option("--config", config_path, "Training config JSON")->check(CLI::ExistingFile);
  add_common(td_cmd);

  EvalOptions ev;
  auto* ev_cmd = app.add_subcommand("eval", "MAE / RMSE / NAE of a prediction CSV");
  ev_cmd->add_option("--pred", ev.pred_csv, "CSV with header image_id,count")->required()->check(CLI::ExistingFile);
  ev_cmd->add_option("--ann-dir", ev.ann_dir, "Directory of annotation JSON files")->required();
  add_common(ev_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  auto* sub = app.get_subcommands().front();
  if (sub->count("--block")) {
    common.block = block;
    gt.block = block;
  }
  if (!bins_path.empty()) common.bins = bins_path;
  if (!config_path.empty()) td.config = config_path;
  td.seed_set = sub->count("--seed") > 0;
  td.omega_set = sub->count("--omega") > 0;

  try {
    if (sub == gt_cmd) return cmd_gt_map(gt, common, std::cout, std::cerr);
    if (sub == stats_cmd) return cmd_stats(st, common, std::cout, std::cerr);
    if (sub == gc_cmd) return cmd_grad_check(gc, common, std::cout, std::cerr);
    if (sub == td_cmd) return cmd_train_demo(td, common, std::cout, std::cerr);
    if (sub == ev_cmd) return cmd_eval(ev, common, std::cout, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
