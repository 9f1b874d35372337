#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "stuq/stuq.hpp"

namespace {

struct CliArgs {
  std::string config_path;
  std::string out_dir = "stuq_out";
  std::string mode;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* cmd, CliArgs& args) {
  cmd->add_option("-c,--config", args.config_path, "run configuration file")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", args.out_dir, "output directory (default stuq_out)");
  cmd->add_option("-s,--seed", args.seed, "override the configured seed")
      ->each([&](const std::string&) { args.seed_set = true; });
}

int dispatch(const std::string& stage, const CliArgs& args) {
  stuq::RunConfig cfg = stuq::load_config(args.config_path);
  if (args.seed_set) cfg.seed = args.seed;
  stuq::StagePaths paths(args.out_dir, cfg);
  std::filesystem::create_directories(paths.out);

  if (stage == "synth") {
    stuq::run_synth(cfg, paths);
    std::printf("wrote %s and %s\n", paths.series.string().c_str(),
                paths.truth().string().c_str());
  } else if (stage == "train") {
    stuq::PretrainResult r = stuq::run_train(cfg, paths);
    std::printf("pretrained %zu epochs (best validation epoch %zu), checkpoint %s\n",
                r.history.train_loss.size(), r.history.best_epoch,
                paths.pretrain_ckpt().string().c_str());
  } else if (stage == "retrain-awa") {
    stuq::AwaResult r = stuq::run_awa(cfg, paths);
    std::printf("averaged %zu snapshots over %zu epochs, checkpoint %s\n", r.n_models,
                cfg.awa_epochs, paths.awa_ckpt().string().c_str());
  } else if (stage == "calibrate") {
    stuq::CalibrationResult r = stuq::run_calibrate(cfg, paths);
    std::printf("temperature %.6f (power %d) from %zu validation points -> %s\n",
                static_cast<double>(r.temp.t), r.temp.variance_power, r.n,
                paths.calibration().string().c_str());
  } else if (stage == "evaluate") {
    stuq::ordered_json rep = stuq::run_evaluate(cfg, paths);
    std::printf("evaluation -> %s\n", paths.evaluation().string().c_str());
    std::printf("%s\n", rep["metrics"].dump(2).c_str());
  } else if (stage == "predict") {
    stuq::run_predict(cfg, paths);
    std::printf("predictions -> %s\n", paths.predictions().string().c_str());
  } else if (stage == "baseline") {
    stuq::ordered_json rep = stuq::run_baseline(cfg, paths, args.mode);
    std::printf("baseline %s -> %s\n", args.mode.c_str(),
                (paths.out / ("baseline_" + args.mode) / "evaluation.json").string().c_str());
    std::printf("%s\n", rep["metrics"].dump(2).c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stuq: spatio-temporal forecasting with uncertainty quantification"};
  app.require_subcommand(1);
  CliArgs args;

  const char* stages[] = {"synth",    "train",   "retrain-awa", "calibrate",
                          "evaluate", "predict", "baseline"};
  const char* help[] = {"generate a synthetic dataset with known noise field",
                        "pretrain the forecaster",
                        "weight-averaging re-training from the pretrain checkpoint",
                        "fit the variance temperature on the validation split",
                        "compute point and interval metrics on the test split",
                        "dump per-node forecasts for the first test window as csv",
                        "train and evaluate an uncertainty baseline"};
  for (std::size_t i = 0; i < 7; ++i) {
    CLI::App* cmd = app.add_subcommand(stages[i], help[i]);
    add_common(cmd, args);
    if (std::string(stages[i]) == "baseline")
      cmd->add_option("-m,--mode", args.mode,
                      "one of point|quantile|mve|mcdo|combined|ts|conformal")
          ->required();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    return dispatch(app.get_subcommands().front()->get_name(), args);
  } catch (const stuq::ConfigError& e) {
    std::fprintf(stderr, "stuq: config error: %s\n", e.what());
    return 2;
  } catch (const stuq::DataError& e) {
    std::fprintf(stderr, "stuq: data error: %s\n", e.what());
    return 3;
  } catch (const stuq::TrainingError& e) {
    std::fprintf(stderr, "stuq: training diverged: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "stuq: error: %s\n", e.what());
    return 1;
  }
}
