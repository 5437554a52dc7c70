#include <fmt/format.h>

#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "commands.hpp"
#include "nac/binary_io.hpp"

using namespace nac;
using namespace nac::cli;

namespace {

struct Common {
  std::uint64_t seed = 0;
  std::string task = "heldout";
  std::string out;
};

void add_common(CLI::App* sub, Common& c, const std::string& default_task) {
  c.task = default_task;
  sub->add_option("--seed", c.seed, "seed for task generation, training and subsampling");
  sub->add_option("--task", c.task, "synthetic task")->check(CLI::IsMember({"heldout", "shift"}));
  sub->add_option("--out", c.out, "output directory")->required();
}

TaskOptions task_of(const Common& c) { return {c.seed, parse_task(c.task)}; }

struct NacFlags {
  std::vector<std::string> layers;
  std::vector<double> alpha;
  std::size_t bins = 50;
  std::uint64_t fill = 50;
  std::string bin_scale = "log";
  std::vector<double> weights;
  double subset_frac = 1.0;
  bool correct_only = false;
};

void add_nac(CLI::App* sub, NacFlags& f) {
  sub->add_option("--layers", f.layers, "tapped layers, deepest first by default")->delimiter(',');
  sub->add_option("--alpha", f.alpha, "state scale; one value, or repeat once per layer");
  sub->add_option("--bins", f.bins, "histogram bins M");
  sub->add_option("--fill", f.fill, "fill threshold O*");
  sub->add_option("--bin-scale", f.bin_scale, "histogram edge spacing")->check(CLI::IsMember({"log", "uniform"}));
  sub->add_option("--weights", f.weights, "layer fusion weights")->delimiter(',');
  sub->add_option("--subset-frac", f.subset_frac, "share of InD training data used for fitting");
  sub->add_flag("--correct-only,!--no-correct-only", f.correct_only,
                "fit on correctly classified samples only");
}

NacSettings settings_of(const NacFlags& f) {
  NacSettings s;
  s.layers = f.layers;
  if (!f.alpha.empty()) s.alpha = f.alpha;
  s.bins = f.bins;
  s.fill = f.fill;
  s.bin_scale = parse_bin_scale(f.bin_scale);
  s.weights = f.weights;
  s.subset_frac = f.subset_frac;
  s.correct_only = f.correct_only;
  return s;
}

void print_file(const std::filesystem::path& p) {
  auto bytes = io::read_file(p);
  std::cout.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neuron activation coverage: fit, score and evaluate"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  // train
  Common train_c;
  TrainOptions train_o;
  double train_lr = 0.0;
  std::size_t train_steps = 0;
  std::string entropy = "none";
  auto* train_cmd = app.add_subcommand("train", "train a small classifier on a synthetic task");
  add_common(train_cmd, train_c, "heldout");
  auto* lr_opt = train_cmd->add_option("--lr", train_lr, "learning rate (task default if unset)");
  auto* steps_opt = train_cmd->add_option("--steps", train_steps, "SGD steps (task default if unset)");
  train_cmd->add_option("--batch", train_o.batch_size, "minibatch size");
  train_cmd->add_option("--checkpoint-every", train_o.checkpoint_every, "steps between checkpoints");
  train_cmd->add_option("--hidden", train_o.hidden, "hidden widths")->delimiter(',');
  train_cmd->add_option("--entropy", entropy)->check(
      CLI::IsMember({"none", "maximize", "minimize"}));
  train_cmd->add_option("--entropy-coef", train_o.entropy_coef, "NAC entropy coefficient");
  train_cmd->add_option("--entropy-refresh", train_o.entropy_refresh, "steps between histogram refits");

  // fit-nac
  Common fit_c;
  NacFlags fit_f;
  std::string fit_ckpt;
  std::vector<std::string> fit_dumps;
  auto* fit_cmd = app.add_subcommand("fit-nac", "fit coverage models on InD training data");
  add_common(fit_cmd, fit_c, "heldout");
  add_nac(fit_cmd, fit_f);
  fit_cmd->add_option("--checkpoint", fit_ckpt, "NACW checkpoint to capture states from");
  fit_cmd->add_option("--dumps", fit_dumps, "NACT files from an external model");

  // eval-detect
  Common det_c;
  NacFlags det_f;
  std::string det_ckpt, det_nac;
  std::vector<std::string> det_ind, det_ood;
  double det_tpr = 0.95;
  auto* det_cmd = app.add_subcommand("eval-detect", "NAC-UE, MSP and energy detection metrics");
  add_common(det_cmd, det_c, "heldout");
  add_nac(det_cmd, det_f);
  det_cmd->add_option("--checkpoint", det_ckpt, "NACW checkpoint to score");
  det_cmd->add_option("--nac-dir", det_nac, "directory of fitted .nacm models");
  det_cmd->add_option("--ind-dumps", det_ind, "NACT files of InD test samples");
  det_cmd->add_option("--ood-dumps", det_ood, "NACT files of OOD test samples");
  det_cmd->add_option("--tpr", det_tpr, "InD true positive rate for the FPR column");

  // eval-me
  Common me_c;
  EvalMeOptions me_o;
  std::string me_run, me_scale = "log";
  bool me_correct = true;
  auto* me_cmd = app.add_subcommand("eval-me", "rank a run's checkpoints by NAC-ME");
  add_common(me_cmd, me_c, "shift");
  me_cmd->add_option("--run", me_run, "output directory of train")->required();
  me_cmd->add_option("--layers", me_o.layer, "layer to score (deepest tap by default)");
  me_cmd->add_option("--alpha", me_o.alphas, "alpha grid")->delimiter(',');
  me_cmd->add_option("--bins", me_o.bins, "M grid")->delimiter(',');
  me_cmd->add_option("--fill", me_o.fills, "O* grid")->delimiter(',');
  me_cmd->add_option("--bin-scale", me_scale, "histogram edge spacing")->check(CLI::IsMember({"log", "uniform"}));
  me_cmd->add_flag("--correct-only,!--no-correct-only", me_correct,
                  "fit on correctly classified samples only (on by default)");

  // sweep
  Common sw_c;
  SweepOptions sw_o;
  std::string sw_ckpt, sw_scale = "log";
  std::vector<std::string> sw_sets;
  auto* sw_cmd = app.add_subcommand("sweep", "hyperparameter grid with validation selection");
  add_common(sw_cmd, sw_c, "heldout");
  sw_cmd->add_option("--checkpoint", sw_ckpt, "NACW checkpoint")->required();
  sw_cmd->add_option("--alpha", sw_o.alphas, "alpha grid")->delimiter(',');
  sw_cmd->add_option("--bins", sw_o.bins, "M grid")->delimiter(',');
  sw_cmd->add_option("--fill", sw_o.fills, "O* grid")->delimiter(',');
  sw_cmd->add_option("--layers", sw_sets, "layer set such as layer2,layer1; repeat for more sets");
  sw_cmd->add_flag("--weights", sw_o.search_weights, "search fusion weights in {0.2,...,1.0}");
  sw_cmd->add_option("--bin-scale", sw_scale, "histogram edge spacing")->check(CLI::IsMember({"log", "uniform"}));
  sw_cmd->add_option("--subset-frac", sw_o.subset_frac, "share of InD training data used for fitting");
  sw_cmd->add_flag("--correct-only,!--no-correct-only", sw_o.correct_only,
                  "fit on correctly classified samples only");
  sw_cmd->add_option("--tpr", sw_o.tpr, "InD true positive rate for the FPR column");

  // plot
  Common pl_c;
  NacFlags pl_f;
  PlotOptions pl_o;
  std::string pl_ckpt;
  auto* pl_cmd = app.add_subcommand("plot", "state and score histograms as CSV and SVG");
  add_common(pl_cmd, pl_c, "heldout");
  add_nac(pl_cmd, pl_f);
  pl_cmd->add_option("--checkpoint", pl_ckpt, "NACW checkpoint")->required();
  pl_cmd->add_option("--layer", pl_o.layer, "layer whose neuron is plotted");
  pl_cmd->add_option("--neuron", pl_o.neuron, "neuron index within the layer");
  pl_cmd->add_option("--hist-bins", pl_o.hist_bins, "histogram bars over [0,1]");

  // replay
  std::string rp_manifest, rp_out;
  auto* rp_cmd = app.add_subcommand("replay", "re-run the command recorded in a manifest");
  rp_cmd->add_option("manifest", rp_manifest, "manifest.json or its directory")->required();
  rp_cmd->add_option("--out", rp_out, "write into another directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) {
      train_o.task = task_of(train_c);
      train_o.out = train_c.out;
      if (*lr_opt) train_o.learning_rate = train_lr;
      if (*steps_opt) train_o.steps = train_steps;
      train_o.entropy = entropy == "maximize"   ? EntropyMode::maximize
                        : entropy == "minimize" ? EntropyMode::minimize
                                                : EntropyMode::none;
      auto r = cmd_train(train_o);
      std::cout << fmt::format("{} checkpoints, InD test accuracy {:.4f}", r.checkpoint_steps.size(),
                               r.ind_test_acc);
      if (train_o.task.task == TaskKind::covariate_shift) {
        std::cout << fmt::format(", OOD test accuracy {:.4f}", r.ood_test_acc);
      }
      std::cout << "\n";
    } else if (*fit_cmd) {
      FitOptions o{task_of(fit_c), {}, {}, settings_of(fit_f), fit_c.out};
      if (!fit_ckpt.empty()) o.checkpoint = fit_ckpt;
      for (const auto& d : fit_dumps) o.dumps.emplace_back(d);
      auto r = cmd_fit_nac(o);
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
      print_file(o.out / "fit.csv");
    } else if (*det_cmd) {
      DetectOptions o;
      o.task = task_of(det_c);
      if (!det_ckpt.empty()) o.checkpoint = det_ckpt;
      if (!det_nac.empty()) o.nac_dir = det_nac;
      for (const auto& d : det_ind) o.ind_dumps.emplace_back(d);
      for (const auto& d : det_ood) o.ood_dumps.emplace_back(d);
      o.nac = settings_of(det_f);
      o.tpr = det_tpr;
      o.out = det_c.out;
      cmd_eval_detect(o);
      print_file(o.out / "summary.txt");
    } else if (*me_cmd) {
      me_o.task = task_of(me_c);
      me_o.run_dir = me_run;
      // A run directory remembers its own task and seed.
      if (std::filesystem::exists(me_o.run_dir / "manifest.json")) {
        auto m = read_manifest(me_o.run_dir);
        const auto& opts = m.at("options");
        if (me_cmd->count("--seed") == 0) me_o.task.seed = opts.at("seed").get<std::uint64_t>();
        if (me_cmd->count("--task") == 0) me_o.task.task = parse_task(opts.at("task").get<std::string>());
      }
      me_o.bin_scale = parse_bin_scale(me_scale);
      me_o.correct_only = me_correct;
      me_o.out = me_c.out;
      cmd_eval_me(me_o);
      print_file(me_o.out / "summary.txt");
    } else if (*sw_cmd) {
      sw_o.task = task_of(sw_c);
      sw_o.checkpoint = sw_ckpt;
      for (const auto& s : sw_sets) sw_o.layer_sets.push_back(split_commas(s));
      sw_o.bin_scale = parse_bin_scale(sw_scale);
      sw_o.out = sw_c.out;
      cmd_sweep(sw_o);
      print_file(sw_o.out / "summary.txt");
    } else if (*pl_cmd) {
      pl_o.task = task_of(pl_c);
      pl_o.checkpoint = pl_ckpt;
      pl_o.nac = settings_of(pl_f);
      pl_o.out = pl_c.out;
      cmd_plot(pl_o);
      print_file(pl_o.out / "forms.csv");
    } else if (*rp_cmd) {
      std::filesystem::path m = rp_manifest;
      if (std::filesystem::is_directory(m)) m /= "manifest.json";
      std::optional<std::filesystem::path> out;
      if (!rp_out.empty()) out = rp_out;
      std::cout << "replayed " << cmd_replay(m, out) << "\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
