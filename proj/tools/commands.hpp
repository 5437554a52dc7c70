#pragma once
// Commands behind the `nac` executable. Each one takes resolved options,
// writes its artifacts and a manifest.json under `out`, and returns what it
// wrote so callers (tests, the acceptance runner) can inspect the numbers.
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "nac/coverage.hpp"
#include "nac/data.hpp"
#include "nac/metrics.hpp"
#include "nac/netlab.hpp"

namespace nac::cli {

inline constexpr const char* kToolVersion = "0.3.0";

// Bad flag values or combinations; main maps this to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Path = std::filesystem::path;

struct TaskOptions {
  std::uint64_t seed = 0;
  TaskKind task = TaskKind::heldout_class;
};

// Coverage hyperparameters shared by fit-nac, eval-detect and plot.
struct NacSettings {
  std::vector<std::string> layers;    // empty: every tap, deepest first
  std::vector<double> alpha{100.0};   // one value for all layers, or one per layer
  std::size_t bins = 50;
  std::uint64_t fill = 50;
  BinScale bin_scale = BinScale::log;
  std::vector<double> weights;        // empty: all 1
  double subset_frac = 1.0;
  bool correct_only = false;
};

// ---- train
struct TrainOptions {
  TaskOptions task;
  std::optional<double> learning_rate;  // task default when unset
  std::optional<std::size_t> steps;     // task default when unset
  std::size_t batch_size = 32;
  std::size_t checkpoint_every = 300;
  std::vector<std::size_t> hidden{32, 32};
  EntropyMode entropy = EntropyMode::none;
  double entropy_coef = 0.1;
  std::size_t entropy_refresh = 100;
  Path out;
};

struct TrainDefaults {
  double learning_rate;
  std::size_t steps;
};
TrainDefaults train_defaults(TaskKind kind);

struct TrainOutcome {
  DenseNet net;
  std::vector<std::size_t> checkpoint_steps;
  double ind_test_acc = 0.0;
  double ood_test_acc = 0.0;
};
TrainOutcome cmd_train(const TrainOptions& opt);

// Where train puts things inside its output directory.
Path checkpoint_path(const Path& run_dir, std::size_t step);
Path final_checkpoint(const Path& run_dir);

// ---- fit-nac
struct FitOptions {
  TaskOptions task;
  std::optional<Path> checkpoint;
  std::vector<Path> dumps;  // NACT files; used instead of a checkpoint
  NacSettings nac;
  Path out;
};
struct FitOutcome {
  std::vector<CoverageModel> models;
  std::vector<std::string> warnings;
};
FitOutcome cmd_fit_nac(const FitOptions& opt);

// ---- eval-detect
struct DetectOptions {
  TaskOptions task;
  std::optional<Path> checkpoint;
  std::optional<Path> nac_dir;       // prefit models; fit on InD train otherwise
  std::vector<Path> ind_dumps;       // external path: one NACT per layer
  std::vector<Path> ood_dumps;
  NacSettings nac;
  double tpr = 0.95;
  Path out;
};
struct DetectRow {
  std::string method;
  std::string layers;
  std::string weights;
  double auroc = 0.0;
  double fpr = 0.0;
  double threshold = 0.0;
  double mean_ind = 0.0;
  double mean_ood = 0.0;
};
struct DetectOutcome {
  std::vector<DetectRow> rows;  // NAC-UE rows for each layer prefix, then MSP and energy
  const DetectRow& row(const std::string& method, const std::string& layers = {}) const;
};
DetectOutcome cmd_eval_detect(const DetectOptions& opt);

// ---- eval-me
struct EvalMeOptions {
  TaskOptions task{0, TaskKind::covariate_shift};
  Path run_dir;                      // output directory of `train`
  std::string layer;                 // empty: deepest tap
  std::vector<double> alphas{0.1, 1.0, 10.0};
  std::vector<std::size_t> bins{50, 1000};
  std::vector<std::uint64_t> fills{1, 10, 50};
  BinScale bin_scale = BinScale::log;
  bool correct_only = true;
  Path out;
};
struct MeCell {
  double alpha = 0.0;
  std::size_t bins = 0;
  std::uint64_t fill = 0;
  std::vector<double> nac_me;  // one per checkpoint
};
struct EvalMeOutcome {
  std::vector<std::size_t> steps;
  std::vector<double> val_acc;
  std::vector<double> ood_acc;
  std::vector<MeCell> cells;
  std::size_t selected = 0;
  RankEval nac_me;
  RankEval val;
};
EvalMeOutcome cmd_eval_me(const EvalMeOptions& opt);

// Picks the grid cell whose NAC-ME series ranks checkpoints most like the
// InD validation accuracy. Ties keep the earliest cell.
std::size_t select_me_cell(std::span<const MeCell> cells, std::span<const double> val_acc);

// ---- sweep
struct SweepOptions {
  TaskOptions task;
  Path checkpoint;
  std::vector<double> alphas{1.0, 100.0, 1000.0};
  std::vector<std::size_t> bins{10, 50, 500};
  std::vector<std::uint64_t> fills{1, 50, 500};
  std::vector<std::vector<std::string>> layer_sets;  // empty: one set with every tap
  bool search_weights = false;
  BinScale bin_scale = BinScale::log;
  double subset_frac = 1.0;
  bool correct_only = false;
  double tpr = 0.95;
  Path out;
};
struct ValidationResult {
  double auroc = 0.0;
  double fpr = 0.0;
};
struct SweepCell {
  double alpha = 0.0;
  std::size_t bins = 0;
  std::uint64_t fill = 0;
  std::vector<std::string> layers;
  std::vector<double> weights;
  ValidationResult val;
  double test_auroc = 0.0;
  double test_fpr = 0.0;
  bool selected = false;
};
struct SweepOutcome {
  std::vector<SweepCell> cells;
  std::size_t selected = 0;
};
SweepOutcome cmd_sweep(const SweepOptions& opt);

// Highest validation AUROC, then lowest validation FPR, then earliest.
std::size_t select_sweep_cell(std::span<const ValidationResult> val);

// ---- plot
struct PlotOptions {
  TaskOptions task;
  Path checkpoint;
  std::string layer;       // empty: deepest tap
  std::size_t neuron = 0;
  std::size_t hist_bins = 40;
  NacSettings nac;
  Path out;
};
struct FormSeparation {
  StateForm form;
  double auroc = 0.0;
};
struct PlotOutcome {
  std::vector<FormSeparation> forms;
  std::vector<Path> files;
};
PlotOutcome cmd_plot(const PlotOptions& opt);

// ---- replay
// Re-runs the command recorded in a manifest, optionally into another
// directory. Returns the command name.
std::string cmd_replay(const Path& manifest, const std::optional<Path>& out);

// Helpers shared with main and the tests.
TaskKind parse_task(const std::string& s);
std::string task_name(TaskKind kind);
BinScale parse_bin_scale(const std::string& s);
std::string form_name(StateForm form);
std::string format_number(double v);
nlohmann::json read_manifest(const Path& dir);

}  // namespace nac::cli
