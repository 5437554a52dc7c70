#include "commands.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <regex>
#include <set>

#include "nac/binary_io.hpp"
#include "nac/state.hpp"
#include "report.hpp"

namespace nac::cli {

using nlohmann::json;

// ---------------------------------------------------------------- helpers

TaskKind parse_task(const std::string& s) {
  if (s == "heldout") return TaskKind::heldout_class;
  if (s == "shift") return TaskKind::covariate_shift;
  throw UsageError("unknown task '" + s + "' (expected heldout or shift)");
}

std::string task_name(TaskKind kind) {
  return kind == TaskKind::heldout_class ? "heldout" : "shift";
}

BinScale parse_bin_scale(const std::string& s) {
  if (s == "log") return BinScale::log;
  if (s == "uniform") return BinScale::uniform;
  throw UsageError("unknown bin scale '" + s + "' (expected log or uniform)");
}

namespace {

std::string scale_name(BinScale s) { return s == BinScale::log ? "log" : "uniform"; }

EntropyMode parse_entropy(const std::string& s) {
  if (s == "none") return EntropyMode::none;
  if (s == "maximize") return EntropyMode::maximize;
  if (s == "minimize") return EntropyMode::minimize;
  throw UsageError("unknown entropy mode '" + s + "'");
}

std::string entropy_name(EntropyMode m) {
  switch (m) {
    case EntropyMode::maximize: return "maximize";
    case EntropyMode::minimize: return "minimize";
    default: return "none";
  }
}

}  // namespace

std::string form_name(StateForm form) {
  switch (form) {
    case StateForm::activation: return "activation";
    case StateForm::gradient: return "gradient";
    default: return "product";
  }
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  return fmt::format("{}", v);
}

json read_manifest(const Path& dir) {
  auto bytes = io::read_file(dir / "manifest.json");
  return json::parse(bytes.begin(), bytes.end());
}

namespace {

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

std::string join_numbers(std::span<const double> v, const std::string& sep) {
  std::vector<std::string> parts;
  for (double x : v) parts.push_back(format_number(x));
  return join(parts, sep);
}

std::string abs_string(const Path& p) { return std::filesystem::absolute(p).lexically_normal().string(); }

// Layer ids may come from external exporters and contain path separators.
std::string file_stem_for(const std::string& layer) {
  std::string out;
  for (char c : layer) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
    out += ok ? c : '_';
  }
  return out.empty() ? "_" : out;
}

void require_out(const Path& out) {
  if (out.empty()) throw UsageError("--out is required");
  std::filesystem::create_directories(out);
}

void write_text(const Path& path, const std::string& text, std::vector<std::string>& written) {
  io::write_text_atomic(path, text);
  written.push_back(path.filename().string());
}

void write_manifest(const Path& out, const std::string& command, const json& options,
                    std::vector<std::string> inputs, std::vector<std::string> outputs) {
  std::sort(outputs.begin(), outputs.end());
  json m;
  m["tool"] = "nac";
  m["version"] = kToolVersion;
  m["command"] = command;
  m["seed"] = options.value("seed", json());
  m["options"] = options;
  m["inputs"] = inputs;
  m["outputs"] = outputs;
  io::write_text_atomic(out / "manifest.json", m.dump(2) + "\n");
}

SyntheticTask build_task(const TaskOptions& t) { return make_task(task_preset(t.task, t.seed)); }

DenseNet load_net(const Path& p) {
  if (!std::filesystem::exists(p)) throw UsageError("checkpoint " + p.string() + " does not exist");
  return load_checkpoint(p);
}

std::vector<std::string> resolve_layers(const DenseNet& net, const std::vector<std::string>& req) {
  if (req.empty()) {
    std::vector<std::string> out;
    for (auto it = net.taps().rbegin(); it != net.taps().rend(); ++it) {
      out.push_back(DenseNet::tap_name(*it));
    }
    if (out.empty()) throw UsageError("checkpoint has no tapped layers");
    return out;
  }
  std::set<std::string> seen;
  for (const auto& name : req) {
    try {
      net.tap_index(name);
    } catch (const std::exception&) {
      throw UsageError("layer '" + name + "' is not a tap of this network");
    }
    if (!seen.insert(name).second) throw UsageError("layer '" + name + "' listed twice");
  }
  return req;
}

std::vector<std::size_t> tap_indices(const DenseNet& net, const std::vector<std::string>& layers) {
  std::vector<std::size_t> taps;
  for (const auto& l : layers) taps.push_back(net.tap_index(l));
  std::sort(taps.begin(), taps.end());
  taps.erase(std::unique(taps.begin(), taps.end()), taps.end());
  return taps;
}

std::vector<double> per_layer(const std::vector<double>& v, std::size_t n, const char* flag,
                              double fallback) {
  if (v.empty()) return std::vector<double>(n, fallback);
  if (v.size() == 1) return std::vector<double>(n, v[0]);
  if (v.size() == n) return v;
  throw UsageError(fmt::format("{} takes one value or one per layer ({} layers, {} values)", flag, n,
                               v.size()));
}

CoverageConfig coverage_config(std::size_t bins, std::uint64_t fill, BinScale scale,
                               bool correct_only) {
  CoverageConfig cfg;
  cfg.bins = bins;
  cfg.fill_threshold = fill;
  cfg.bin_scale = scale;
  cfg.correct_only = correct_only;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

CoverageConfig coverage_config(const NacSettings& s) {
  return coverage_config(s.bins, s.fill, s.bin_scale, s.correct_only);
}

void check_alphas(std::span<const double> alphas) {
  for (double a : alphas) {
    if (!(a > 0.0) || !std::isfinite(a)) throw UsageError("--alpha values must be positive");
  }
}

LabeledSet keep_correct(const DenseNet& net, const LabeledSet& set) {
  auto pred = predict(net, set.inputs);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == set.labels[i]) keep.push_back(i);
  }
  LabeledSet out{select_rows(set.inputs, keep), {}};
  for (auto i : keep) out.labels.push_back(set.labels[i]);
  return out;
}

LabeledSet fitting_set(const SyntheticTask& task, const DenseNet& net, double frac, bool correct,
                       std::uint64_t seed) {
  if (!(frac > 0.0 && frac <= 1.0)) throw UsageError("--subset-frac must lie in (0, 1]");
  auto set = subsample(task.ind_train, frac, seed);
  return correct ? keep_correct(net, set) : set;
}

CoverageModel fit_layer(const RawLayerBatch& batch, const CoverageConfig& cfg, double alpha) {
  std::vector<NeuronStateMatrix> states{neuron_states(batch, alpha)};
  return fit(batch.layer_id, batch.z.cols(), states, cfg, alpha);
}

std::map<std::string, double> weight_map(const std::vector<std::string>& layers,
                                         std::span<const double> weights) {
  std::map<std::string, double> w;
  for (std::size_t i = 0; i < layers.size(); ++i) w[layers[i]] = weights[i];
  return w;
}

// Per-layer NAC-UE for one split.
using LayerScores = std::map<std::string, std::vector<double>>;

LayerScores layer_scores(const std::vector<const CoverageModel*>& models,
                         const std::map<std::string, RawLayerBatch>& batches) {
  LayerScores out;
  for (const auto* m : models) {
    const auto& batch = batches.at(m->layer_id());
    out[m->layer_id()] = nac_ue(*m, neuron_states(batch, m->alpha()));
  }
  return out;
}

std::vector<double> fused(const LayerScores& scores, const std::vector<std::string>& layers,
                          std::span<const double> weights) {
  LayerScores subset;
  for (const auto& l : layers) subset[l] = scores.at(l);
  return fuse_layers(subset, weight_map(layers, weights)).fused;
}

double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<double> logit_scores(const Matrix<float>& logits,
                                 const std::function<double(const LogitBundle&)>& score) {
  std::vector<double> out;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    std::vector<double> l(row.begin(), row.end());
    out.push_back(score(LogitBundle::from_logits(l)));
  }
  return out;
}

// ---- option (de)serialization for manifests

json task_json(const TaskOptions& t) { return {{"seed", t.seed}, {"task", task_name(t.task)}}; }

TaskOptions task_from(const json& j) {
  return {j.at("seed").get<std::uint64_t>(), parse_task(j.at("task").get<std::string>())};
}

json nac_json(const NacSettings& s) {
  return {{"layers", s.layers},       {"alpha", s.alpha},
          {"bins", s.bins},           {"fill", s.fill},
          {"bin_scale", scale_name(s.bin_scale)},
          {"weights", s.weights},     {"subset_frac", s.subset_frac},
          {"correct_only", s.correct_only}};
}

NacSettings nac_from(const json& j) {
  NacSettings s;
  s.layers = j.at("layers").get<std::vector<std::string>>();
  s.alpha = j.at("alpha").get<std::vector<double>>();
  s.bins = j.at("bins").get<std::size_t>();
  s.fill = j.at("fill").get<std::uint64_t>();
  s.bin_scale = parse_bin_scale(j.at("bin_scale").get<std::string>());
  s.weights = j.at("weights").get<std::vector<double>>();
  s.subset_frac = j.at("subset_frac").get<double>();
  s.correct_only = j.at("correct_only").get<bool>();
  return s;
}

std::vector<std::string> path_strings(const std::vector<Path>& paths) {
  std::vector<std::string> out;
  for (const auto& p : paths) out.push_back(abs_string(p));
  return out;
}

std::vector<Path> paths_from(const json& j) {
  std::vector<Path> out;
  for (const auto& s : j) out.emplace_back(s.get<std::string>());
  return out;
}

std::optional<Path> optional_path(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return Path(j.at(key).get<std::string>());
}

json optional_json(const std::optional<Path>& p) {
  return p ? json(abs_string(*p)) : json();
}

}  // namespace

// ---------------------------------------------------------------- train

TrainDefaults train_defaults(TaskKind kind) {
  if (kind == TaskKind::covariate_shift) return {0.0003, 5000};
  return {0.05, 3000};
}

Path checkpoint_path(const Path& run_dir, std::size_t step) {
  return run_dir / "checkpoints" / fmt::format("step_{:06d}.nacw", step);
}

Path final_checkpoint(const Path& run_dir) { return run_dir / "final.nacw"; }

namespace {

json train_json(const TrainOptions& o) {
  const auto d = train_defaults(o.task.task);
  json j = task_json(o.task);
  j["learning_rate"] = o.learning_rate.value_or(d.learning_rate);
  j["steps"] = o.steps.value_or(d.steps);
  j["batch_size"] = o.batch_size;
  j["checkpoint_every"] = o.checkpoint_every;
  j["hidden"] = o.hidden;
  j["entropy"] = entropy_name(o.entropy);
  j["entropy_coef"] = o.entropy_coef;
  j["entropy_refresh"] = o.entropy_refresh;
  j["out"] = abs_string(o.out);
  return j;
}

TrainOptions train_from(const json& j) {
  TrainOptions o;
  o.task = task_from(j);
  o.learning_rate = j.at("learning_rate").get<double>();
  o.steps = j.at("steps").get<std::size_t>();
  o.batch_size = j.at("batch_size").get<std::size_t>();
  o.checkpoint_every = j.at("checkpoint_every").get<std::size_t>();
  o.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  o.entropy = parse_entropy(j.at("entropy").get<std::string>());
  o.entropy_coef = j.at("entropy_coef").get<double>();
  o.entropy_refresh = j.at("entropy_refresh").get<std::size_t>();
  o.out = j.at("out").get<std::string>();
  return o;
}

}  // namespace

TrainOutcome cmd_train(const TrainOptions& opt) {
  const auto d = train_defaults(opt.task.task);
  TrainConfig cfg;
  cfg.learning_rate = opt.learning_rate.value_or(d.learning_rate);
  cfg.steps = opt.steps.value_or(d.steps);
  cfg.batch_size = opt.batch_size;
  cfg.seed = opt.task.seed;
  cfg.checkpoint_interval = opt.checkpoint_every;
  cfg.entropy.mode = opt.entropy;
  cfg.entropy.coefficient = opt.entropy == EntropyMode::none ? 0.0 : opt.entropy_coef;
  cfg.entropy.refresh_interval = opt.entropy_refresh;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (opt.hidden.empty()) throw UsageError("at least one hidden layer is required");
  for (auto w : opt.hidden) {
    if (w == 0) throw UsageError("hidden widths must be positive");
  }
  require_out(opt.out);

  auto task = build_task(opt.task);
  std::vector<std::size_t> widths{task.spec.dims};
  widths.insert(widths.end(), opt.hidden.begin(), opt.hidden.end());
  widths.push_back(task.spec.classes);
  std::vector<std::size_t> taps(opt.hidden.size());
  std::iota(taps.begin(), taps.end(), 0);
  auto net = DenseNet::random(widths, taps, opt.task.seed);

  std::vector<std::string> written;
  std::vector<std::size_t> steps;
  const auto ckpt_dir = opt.out / "checkpoints";
  std::filesystem::create_directories(ckpt_dir);
  // Checkpoints left by an earlier run in the same directory would be
  // picked up by eval-me.
  for (const auto& entry : std::filesystem::directory_iterator(ckpt_dir)) {
    const auto name = entry.path().filename().string();
    if (name.starts_with("step_") && entry.path().extension() == ".nacw") {
      std::filesystem::remove(entry.path());
    }
  }
  auto result = train(std::move(net), task.ind_train, cfg, nullptr,
                      [&](std::size_t step, const DenseNet& n) {
                        auto p = checkpoint_path(opt.out, step);
                        save_checkpoint(n, p);
                        written.push_back("checkpoints/" + p.filename().string());
                        steps.push_back(step);
                      });
  save_checkpoint(result.net, final_checkpoint(opt.out));
  written.push_back("final.nacw");

  const bool regularized = !result.entropy_trace.empty();
  CsvTable loss(regularized ? std::vector<std::string>{"step", "loss", "nac_entropy"}
                            : std::vector<std::string>{"step", "loss"});
  for (std::size_t i = 0; i < result.loss_trace.size(); ++i) {
    std::vector<std::string> row{std::to_string(i + 1), format_number(result.loss_trace[i])};
    if (regularized) row.push_back(format_number(result.entropy_trace[i]));
    loss.add(std::move(row));
  }
  write_text(opt.out / "loss.csv", loss.str(), written);

  TrainOutcome outcome{result.net, steps, 0.0, 0.0};
  outcome.ind_test_acc = accuracy(result.net, task.ind_test.inputs, task.ind_test.labels);
  outcome.ood_test_acc = accuracy(result.net, task.ood_test.inputs, task.ood_test.labels);
  CsvTable acc({"split", "accuracy"});
  acc.add({"ind_train", format_number(accuracy(result.net, task.ind_train.inputs,
                                               task.ind_train.labels))});
  acc.add({"ind_val", format_number(accuracy(result.net, task.ind_val.inputs, task.ind_val.labels))});
  acc.add({"ind_test", format_number(outcome.ind_test_acc)});
  if (task.spec.kind == TaskKind::covariate_shift) {
    acc.add({"ood_test", format_number(outcome.ood_test_acc)});
  }
  write_text(opt.out / "accuracy.csv", acc.str(), written);

  write_manifest(opt.out, "train", train_json(opt), {}, written);
  return outcome;
}

// ---------------------------------------------------------------- fit-nac

namespace {

json fit_json(const FitOptions& o) {
  json j = task_json(o.task);
  j["checkpoint"] = optional_json(o.checkpoint);
  j["dumps"] = path_strings(o.dumps);
  j["nac"] = nac_json(o.nac);
  j["out"] = abs_string(o.out);
  return j;
}

FitOptions fit_from(const json& j) {
  FitOptions o;
  o.task = task_from(j);
  o.checkpoint = optional_path(j, "checkpoint");
  o.dumps = paths_from(j.at("dumps"));
  o.nac = nac_from(j.at("nac"));
  o.out = j.at("out").get<std::string>();
  return o;
}

// Rows of a dump kept for fitting: the subset draw, then correct-only.
RawLayerBatch dump_rows(const ActivationDump& d, double frac, bool correct, std::uint64_t seed) {
  auto idx = subsample_indices(d.samples(), frac, seed);
  if (correct) {
    std::vector<std::size_t> keep;
    for (auto i : idx) {
      if (d.labels[i] == ActivationDump::kUnlabeled) continue;
      auto row = d.logits.row(i);
      auto best = static_cast<std::uint32_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == d.labels[i]) keep.push_back(i);
    }
    idx = std::move(keep);
  }
  return {d.layer_id, select_rows(d.z, idx), select_rows(d.grad, idx)};
}

}  // namespace

FitOutcome cmd_fit_nac(const FitOptions& opt) {
  if (opt.checkpoint && !opt.dumps.empty()) {
    throw UsageError("give either --checkpoint or --dumps, not both");
  }
  if (!opt.checkpoint && opt.dumps.empty()) throw UsageError("fit-nac needs --checkpoint or --dumps");
  if (!(opt.nac.subset_frac > 0.0 && opt.nac.subset_frac <= 1.0)) {
    throw UsageError("--subset-frac must lie in (0, 1]");
  }
  const auto cfg = coverage_config(opt.nac);
  check_alphas(opt.nac.alpha);
  require_out(opt.out);

  // Per-layer batches to fit, in output order.
  std::vector<std::string> layers;
  std::map<std::string, std::vector<RawLayerBatch>> batches;
  std::vector<std::string> inputs;

  if (opt.checkpoint) {
    auto net = load_net(*opt.checkpoint);
    inputs.push_back(abs_string(*opt.checkpoint));
    layers = resolve_layers(net, opt.nac.layers);
    auto task = build_task(opt.task);
    auto set = fitting_set(task, net, opt.nac.subset_frac, opt.nac.correct_only, opt.task.seed);
    auto cap = capture_layers(net, set.inputs, tap_indices(net, layers));
    for (const auto& l : layers) batches[l].push_back(std::move(cap.layers.at(l)));
  } else {
    for (const auto& p : opt.dumps) {
      auto d = read_nact(p);
      inputs.push_back(abs_string(p));
      if (!opt.nac.layers.empty() &&
          std::find(opt.nac.layers.begin(), opt.nac.layers.end(), d.layer_id) ==
              opt.nac.layers.end()) {
        continue;
      }
      if (!batches.count(d.layer_id)) layers.push_back(d.layer_id);
      batches[d.layer_id].push_back(
          dump_rows(d, opt.nac.subset_frac, opt.nac.correct_only, opt.task.seed));
    }
    for (const auto& l : opt.nac.layers) {
      if (!batches.count(l)) throw UsageError("no dump carries layer '" + l + "'");
    }
    for (const auto& [l, bs] : batches) {
      for (const auto& b : bs) {
        if (b.z.cols() != bs.front().z.cols()) {
          throw std::invalid_argument("dumps for layer '" + l + "' disagree on the neuron count");
        }
      }
    }
  }

  const auto alphas = per_layer(opt.nac.alpha, layers.size(), "--alpha", 100.0);
  FitOutcome outcome;
  std::vector<std::string> written;
  CsvTable table({"layer", "file", "neurons", "samples", "alpha", "bins", "fill", "bin_scale",
                  "correct_only", "nac_me"});
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    std::vector<NeuronStateMatrix> states;
    for (const auto& b : batches.at(l)) states.push_back(neuron_states(b, alphas[i]));
    auto model = fit(l, batches.at(l).front().z.cols(), states, cfg, alphas[i]);
    if (model.total() < cfg.fill_threshold) {
      outcome.warnings.push_back(fmt::format(
          "O* = {} exceeds the {} fitting samples for {}; every coverage value stays below 1",
          cfg.fill_threshold, model.total(), l));
    }
    const auto file = file_stem_for(l) + ".nacm";
    save_coverage(model, opt.out / file);
    written.push_back(file);
    table.add({l, file, std::to_string(model.neurons()), std::to_string(model.total()),
               format_number(alphas[i]), std::to_string(cfg.bins),
               std::to_string(cfg.fill_threshold), scale_name(cfg.bin_scale),
               cfg.correct_only ? "1" : "0", format_number(nac_me(model))});
    outcome.models.push_back(std::move(model));
  }
  write_text(opt.out / "fit.csv", table.str(), written);
  write_manifest(opt.out, "fit-nac", fit_json(opt), inputs, written);
  return outcome;
}

// ---------------------------------------------------------------- eval-detect

const DetectRow& DetectOutcome::row(const std::string& method, const std::string& layers) const {
  // Without a layer filter NAC-UE means the row that fuses every layer.
  const DetectRow* found = nullptr;
  for (const auto& r : rows) {
    if (r.method == method && (layers.empty() || r.layers == layers)) found = &r;
  }
  if (!found) throw std::out_of_range("no detection row for " + method + " " + layers);
  return *found;
}

namespace {

json detect_json(const DetectOptions& o) {
  json j = task_json(o.task);
  j["checkpoint"] = optional_json(o.checkpoint);
  j["nac_dir"] = optional_json(o.nac_dir);
  j["ind_dumps"] = path_strings(o.ind_dumps);
  j["ood_dumps"] = path_strings(o.ood_dumps);
  j["nac"] = nac_json(o.nac);
  j["tpr"] = o.tpr;
  j["out"] = abs_string(o.out);
  return j;
}

DetectOptions detect_from(const json& j) {
  DetectOptions o;
  o.task = task_from(j);
  o.checkpoint = optional_path(j, "checkpoint");
  o.nac_dir = optional_path(j, "nac_dir");
  o.ind_dumps = paths_from(j.at("ind_dumps"));
  o.ood_dumps = paths_from(j.at("ood_dumps"));
  o.nac = nac_from(j.at("nac"));
  o.tpr = j.at("tpr").get<double>();
  o.out = j.at("out").get<std::string>();
  return o;
}

CoverageModel load_model(const Path& dir, const std::string& layer) {
  auto p = dir / (file_stem_for(layer) + ".nacm");
  if (!std::filesystem::exists(p)) {
    throw UsageError("no coverage model for layer '" + layer + "' in " + dir.string());
  }
  auto m = load_coverage(p);
  if (m.layer_id() != layer) {
    throw std::invalid_argument(p.string() + " holds layer '" + m.layer_id() + "'");
  }
  return m;
}

struct SplitInputs {
  std::map<std::string, RawLayerBatch> batches;
  Matrix<float> logits;
};

SplitInputs split_from_dumps(const std::vector<Path>& paths, const char* which) {
  SplitInputs s;
  for (const auto& p : paths) {
    auto d = read_nact(p);
    if (d.samples() == 0) throw std::runtime_error(std::string(which) + " dump " + p.string() + " holds no samples");
    if (s.batches.count(d.layer_id)) {
      throw UsageError(std::string(which) + " dumps repeat layer '" + d.layer_id + "'");
    }
    if (!s.batches.empty() && d.logits.rows() != s.logits.rows()) {
      throw std::invalid_argument(std::string(which) + " dumps disagree on the sample count");
    }
    s.logits = d.logits;
    s.batches.emplace(d.layer_id, d.raw_batch());
  }
  return s;
}

}  // namespace

DetectOutcome cmd_eval_detect(const DetectOptions& opt) {
  if (!(opt.tpr > 0.0 && opt.tpr <= 1.0)) throw UsageError("--tpr must lie in (0, 1]");
  const bool external = !opt.ind_dumps.empty() || !opt.ood_dumps.empty();
  if (external && (opt.ind_dumps.empty() || opt.ood_dumps.empty())) {
    throw UsageError("--ind-dumps and --ood-dumps go together");
  }
  if (external && opt.checkpoint) throw UsageError("give either --checkpoint or dumps, not both");
  if (external && !opt.nac_dir) throw UsageError("scoring dumps needs --nac-dir");
  if (!external && !opt.checkpoint) throw UsageError("eval-detect needs --checkpoint or dumps");
  require_out(opt.out);

  std::vector<std::string> layers;
  std::vector<CoverageModel> models;
  SplitInputs ind, ood;
  std::vector<std::string> inputs;

  if (external) {
    ind = split_from_dumps(opt.ind_dumps, "InD");
    ood = split_from_dumps(opt.ood_dumps, "OOD");
    inputs = path_strings(opt.ind_dumps);
    auto more = path_strings(opt.ood_dumps);
    inputs.insert(inputs.end(), more.begin(), more.end());
    if (!opt.nac.layers.empty()) {
      layers = opt.nac.layers;
    } else {
      for (const auto& p : opt.ind_dumps) layers.push_back(read_nact(p).layer_id);
    }
    for (const auto& l : layers) {
      if (!ind.batches.count(l) || !ood.batches.count(l)) {
        throw UsageError("layer '" + l + "' is missing from the InD or OOD dumps");
      }
      models.push_back(load_model(*opt.nac_dir, l));
    }
  } else {
    auto net = load_net(*opt.checkpoint);
    inputs.push_back(abs_string(*opt.checkpoint));
    layers = resolve_layers(net, opt.nac.layers);
    auto task = build_task(opt.task);
    const auto taps = tap_indices(net, layers);
    if (opt.nac_dir) {
      for (const auto& l : layers) models.push_back(load_model(*opt.nac_dir, l));
    } else {
      check_alphas(opt.nac.alpha);
      const auto cfg = coverage_config(opt.nac);
      const auto alphas = per_layer(opt.nac.alpha, layers.size(), "--alpha", 100.0);
      auto set = fitting_set(task, net, opt.nac.subset_frac, opt.nac.correct_only, opt.task.seed);
      auto cap = capture_layers(net, set.inputs, taps);
      for (std::size_t i = 0; i < layers.size(); ++i) {
        models.push_back(fit_layer(cap.layers.at(layers[i]), cfg, alphas[i]));
      }
    }
    auto ci = capture_layers(net, task.ind_test.inputs, taps);
    auto co = capture_layers(net, task.ood_test.inputs, taps);
    ind = {std::move(ci.layers), std::move(ci.logits)};
    ood = {std::move(co.layers), std::move(co.logits)};
    if (ood.logits.rows() == 0) throw std::runtime_error("OOD test split holds no samples");
  }

  const auto weights = per_layer(opt.nac.weights, layers.size(), "--weights", 1.0);
  std::vector<const CoverageModel*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  auto ind_scores = layer_scores(ptrs, ind.batches);
  auto ood_scores = layer_scores(ptrs, ood.batches);

  DetectOutcome outcome;
  auto add_row = [&](std::string method, std::string layer_text, std::string weight_text,
                     std::vector<double> a, std::vector<double> b) {
    const double mi = mean(a), mo = mean(b);
    auto e = evaluate_detection(std::move(a), std::move(b), opt.tpr);
    outcome.rows.push_back({std::move(method), std::move(layer_text), std::move(weight_text),
                            e.auroc, e.fpr95, e.threshold_at_tpr95, mi, mo});
  };
  std::vector<double> full_ind, full_ood;
  for (std::size_t k = 1; k <= layers.size(); ++k) {
    std::vector<std::string> prefix(layers.begin(), layers.begin() + static_cast<long>(k));
    std::vector<double> w(weights.begin(), weights.begin() + static_cast<long>(k));
    auto a = fused(ind_scores, prefix, w);
    auto b = fused(ood_scores, prefix, w);
    if (k == layers.size()) {
      full_ind = a;
      full_ood = b;
    }
    add_row("NAC-UE", join(prefix, "+"), join_numbers(w, "+"), std::move(a), std::move(b));
  }
  auto msp_i = logit_scores(ind.logits, msp_score), msp_o = logit_scores(ood.logits, msp_score);
  auto en_i = logit_scores(ind.logits, energy_score);
  auto en_o = logit_scores(ood.logits, energy_score);
  add_row("MSP", "", "", msp_i, msp_o);
  add_row("Energy", "", "", en_i, en_o);

  std::vector<std::string> written;
  CsvTable table({"method", "layers", "weights", "auroc", "fpr", "tpr", "threshold", "mean_ind",
                  "mean_ood"});
  for (const auto& r : outcome.rows) {
    table.add({r.method, r.layers, r.weights, format_number(r.auroc), format_number(r.fpr),
               format_number(opt.tpr), format_number(r.threshold), format_number(r.mean_ind),
               format_number(r.mean_ood)});
  }
  write_text(opt.out / "detect.csv", table.str(), written);

  CsvTable scores({"split", "index", "nac_ue", "msp", "energy"});
  auto dump_split = [&](const char* name, const std::vector<double>& f, const std::vector<double>& m,
                        const std::vector<double>& e) {
    for (std::size_t i = 0; i < f.size(); ++i) {
      scores.add({name, std::to_string(i), format_number(f[i]), format_number(m[i]),
                  format_number(e[i])});
    }
  };
  dump_split("ind", full_ind, msp_i, en_i);
  dump_split("ood", full_ood, msp_o, en_o);
  write_text(opt.out / "scores.csv", scores.str(), written);

  std::string text = fmt::format("{:<8} {:<24} {:<16} {:>8} {:>8}\n", "method", "layers", "weights",
                                 "AUROC", fmt::format("FPR@{}", format_number(opt.tpr)));
  for (const auto& r : outcome.rows) {
    text += fmt::format("{:<8} {:<24} {:<16} {:>8.4f} {:>8.4f}\n", r.method,
                        r.layers.empty() ? "-" : r.layers, r.weights.empty() ? "-" : r.weights,
                        r.auroc, r.fpr);
  }
  write_text(opt.out / "summary.txt", text, written);
  write_manifest(opt.out, "eval-detect", detect_json(opt), inputs, written);
  return outcome;
}

// ---------------------------------------------------------------- eval-me

std::size_t select_me_cell(std::span<const MeCell> cells, std::span<const double> val_acc) {
  std::size_t best = 0;
  double best_rc = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    double rc = -std::numeric_limits<double>::infinity();
    if (cells[i].nac_me.size() >= 2) {
      try {
        rc = spearman_rc(cells[i].nac_me, val_acc);
      } catch (const std::invalid_argument&) {
      }
    }
    if (rc > best_rc) {
      best_rc = rc;
      best = i;
    }
  }
  return best;
}

namespace {

json me_json(const EvalMeOptions& o) {
  json j = task_json(o.task);
  j["run_dir"] = abs_string(o.run_dir);
  j["layer"] = o.layer;
  j["alphas"] = o.alphas;
  j["bins"] = o.bins;
  j["fills"] = o.fills;
  j["bin_scale"] = scale_name(o.bin_scale);
  j["correct_only"] = o.correct_only;
  j["out"] = abs_string(o.out);
  return j;
}

EvalMeOptions me_from(const json& j) {
  EvalMeOptions o;
  o.task = task_from(j);
  o.run_dir = j.at("run_dir").get<std::string>();
  o.layer = j.at("layer").get<std::string>();
  o.alphas = j.at("alphas").get<std::vector<double>>();
  o.bins = j.at("bins").get<std::vector<std::size_t>>();
  o.fills = j.at("fills").get<std::vector<std::uint64_t>>();
  o.bin_scale = parse_bin_scale(j.at("bin_scale").get<std::string>());
  o.correct_only = j.at("correct_only").get<bool>();
  o.out = j.at("out").get<std::string>();
  return o;
}

std::vector<std::pair<std::size_t, Path>> list_checkpoints(const Path& run_dir) {
  const auto dir = run_dir / "checkpoints";
  if (!std::filesystem::is_directory(dir)) {
    throw UsageError("run directory " + run_dir.string() + " has no checkpoints/ folder");
  }
  static const std::regex name(R"(step_(\d+)\.nacw)");
  std::vector<std::pair<std::size_t, Path>> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const auto file = entry.path().filename().string();
    if (std::regex_match(file, m, name)) out.emplace_back(std::stoull(m[1].str()), entry.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw UsageError("no checkpoints found in " + dir.string());
  return out;
}

std::string rc_text(const RankEval& r) { return r.rc ? format_number(*r.rc) : ""; }

}  // namespace

EvalMeOutcome cmd_eval_me(const EvalMeOptions& opt) {
  if (opt.alphas.empty() || opt.bins.empty() || opt.fills.empty()) {
    throw UsageError("eval-me grids need at least one value each");
  }
  check_alphas(opt.alphas);
  for (auto m : opt.bins) coverage_config(m, opt.fills.front(), opt.bin_scale, opt.correct_only);
  for (auto f : opt.fills) coverage_config(opt.bins.front(), f, opt.bin_scale, opt.correct_only);
  const auto checkpoints = list_checkpoints(opt.run_dir);
  require_out(opt.out);
  auto task = build_task(opt.task);

  EvalMeOutcome outcome;
  for (double a : opt.alphas) {
    for (auto m : opt.bins) {
      for (auto f : opt.fills) outcome.cells.push_back({a, m, f, {}});
    }
  }
  std::string layer = opt.layer;
  std::vector<std::string> inputs;
  for (const auto& [step, path] : checkpoints) {
    auto net = load_checkpoint(path);
    inputs.push_back(abs_string(path));
    if (layer.empty()) layer = resolve_layers(net, {}).front();
    const auto layers = resolve_layers(net, {layer});
    auto set = opt.correct_only ? keep_correct(net, task.ind_train) : task.ind_train;
    auto cap = capture_layers(net, set.inputs, tap_indices(net, layers));
    const auto& batch = cap.layers.at(layer);

    std::size_t c = 0;
    for (double a : opt.alphas) {
      std::vector<NeuronStateMatrix> states{neuron_states(batch, a)};
      for (auto m : opt.bins) {
        for (auto f : opt.fills) {
          auto cfg = coverage_config(m, f, opt.bin_scale, opt.correct_only);
          outcome.cells[c++].nac_me.push_back(nac_me(fit(layer, batch.z.cols(), states, cfg, a)));
        }
      }
    }
    outcome.steps.push_back(step);
    outcome.val_acc.push_back(accuracy(net, task.ind_val.inputs, task.ind_val.labels));
    outcome.ood_acc.push_back(accuracy(net, task.ood_test.inputs, task.ood_test.labels));
  }

  outcome.selected = select_me_cell(outcome.cells, outcome.val_acc);
  outcome.nac_me = evaluate_ranking(outcome.cells[outcome.selected].nac_me, outcome.ood_acc);
  outcome.val = evaluate_ranking(outcome.val_acc, outcome.ood_acc);

  std::vector<std::string> written;
  const auto& sel = outcome.cells[outcome.selected];
  CsvTable per_ckpt({"step", "nac_me", "val_acc", "ood_acc"});
  for (std::size_t i = 0; i < outcome.steps.size(); ++i) {
    per_ckpt.add({std::to_string(outcome.steps[i]), format_number(sel.nac_me[i]),
                  format_number(outcome.val_acc[i]), format_number(outcome.ood_acc[i])});
  }
  write_text(opt.out / "checkpoints.csv", per_ckpt.str(), written);

  CsvTable grid({"alpha", "bins", "fill", "rc_val_acc", "selected"});
  for (std::size_t i = 0; i < outcome.cells.size(); ++i) {
    const auto& cell = outcome.cells[i];
    std::string rc;
    if (cell.nac_me.size() >= 2) {
      try {
        rc = format_number(spearman_rc(cell.nac_me, outcome.val_acc));
      } catch (const std::invalid_argument&) {
      }
    }
    grid.add({format_number(cell.alpha), std::to_string(cell.bins), std::to_string(cell.fill), rc,
              i == outcome.selected ? "1" : "0"});
  }
  write_text(opt.out / "grid.csv", grid.str(), written);

  CsvTable ranking({"criterion", "rc", "best_step", "best_ood_acc", "note"});
  auto add = [&](const char* name, const RankEval& r) {
    ranking.add({name, rc_text(r), std::to_string(outcome.steps[r.best_index]),
                 format_number(r.best_acc), r.rc_note});
  };
  add("nac_me", outcome.nac_me);
  add("val_acc", outcome.val);
  write_text(opt.out / "ranking.csv", ranking.str(), written);

  std::string text = fmt::format(
      "layer {}, {} checkpoints, NAC-ME cell alpha={} M={} O*={} (selected on InD validation "
      "accuracy)\n",
      layer, outcome.steps.size(), format_number(sel.alpha), sel.bins, sel.fill);
  const std::pair<const char*, const RankEval*> criteria[] = {{"NAC-ME", &outcome.nac_me},
                                                              {"val acc", &outcome.val}};
  for (const auto& [name, r] : criteria) {
    text += fmt::format("{:<8} RC {:>8}  best step {:>6}  OOD acc {:.4f}{}\n", name,
                        r->rc ? fmt::format("{:.4f}", *r->rc) : "n/a",
                        outcome.steps[r->best_index], r->best_acc,
                        r->rc_note.empty() ? "" : "  (" + r->rc_note + ")");
  }
  write_text(opt.out / "summary.txt", text, written);

  auto options = me_json(opt);
  options["resolved_layer"] = layer;
  write_manifest(opt.out, "eval-me", options, inputs, written);
  return outcome;
}

// ---------------------------------------------------------------- sweep

std::size_t select_sweep_cell(std::span<const ValidationResult> val) {
  if (val.empty()) throw std::invalid_argument("nothing to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < val.size(); ++i) {
    if (val[i].auroc > val[best].auroc ||
        (val[i].auroc == val[best].auroc && val[i].fpr < val[best].fpr)) {
      best = i;
    }
  }
  return best;
}

namespace {

json sweep_json(const SweepOptions& o) {
  json j = task_json(o.task);
  j["checkpoint"] = abs_string(o.checkpoint);
  j["alphas"] = o.alphas;
  j["bins"] = o.bins;
  j["fills"] = o.fills;
  j["layer_sets"] = o.layer_sets;
  j["search_weights"] = o.search_weights;
  j["bin_scale"] = scale_name(o.bin_scale);
  j["subset_frac"] = o.subset_frac;
  j["correct_only"] = o.correct_only;
  j["tpr"] = o.tpr;
  j["out"] = abs_string(o.out);
  return j;
}

SweepOptions sweep_from(const json& j) {
  SweepOptions o;
  o.task = task_from(j);
  o.checkpoint = j.at("checkpoint").get<std::string>();
  o.alphas = j.at("alphas").get<std::vector<double>>();
  o.bins = j.at("bins").get<std::vector<std::size_t>>();
  o.fills = j.at("fills").get<std::vector<std::uint64_t>>();
  o.layer_sets = j.at("layer_sets").get<std::vector<std::vector<std::string>>>();
  o.search_weights = j.at("search_weights").get<bool>();
  o.bin_scale = parse_bin_scale(j.at("bin_scale").get<std::string>());
  o.subset_frac = j.at("subset_frac").get<double>();
  o.correct_only = j.at("correct_only").get<bool>();
  o.tpr = j.at("tpr").get<double>();
  o.out = j.at("out").get<std::string>();
  return o;
}

constexpr double kWeightGrid[] = {0.2, 0.4, 0.6, 0.8, 1.0};

// Every weight vector over the grid for n layers, first layer varying slowest.
std::vector<std::vector<double>> weight_candidates(std::size_t n) {
  std::vector<std::vector<double>> out{{}};
  for (std::size_t l = 0; l < n; ++l) {
    std::vector<std::vector<double>> next;
    for (const auto& prefix : out) {
      for (double w : kWeightGrid) {
        auto v = prefix;
        v.push_back(w);
        next.push_back(std::move(v));
      }
    }
    out = std::move(next);
  }
  return out;
}

struct SplitBatches {
  std::map<std::string, RawLayerBatch> ind, ood;
};

ValidationResult validate_scores(const std::vector<double>& ind, const std::vector<double>& ood,
                                 double tpr) {
  return {auroc(ind, ood), fpr_at_tpr(ind, ood, tpr).fpr};
}

}  // namespace

SweepOutcome cmd_sweep(const SweepOptions& opt) {
  if (opt.alphas.empty() || opt.bins.empty() || opt.fills.empty()) {
    throw UsageError("sweep grids need at least one value each");
  }
  if (!(opt.tpr > 0.0 && opt.tpr <= 1.0)) throw UsageError("--tpr must lie in (0, 1]");
  check_alphas(opt.alphas);
  for (auto m : opt.bins) coverage_config(m, opt.fills.front(), opt.bin_scale, opt.correct_only);
  for (auto f : opt.fills) coverage_config(opt.bins.front(), f, opt.bin_scale, opt.correct_only);
  auto net = load_net(opt.checkpoint);
  std::vector<std::vector<std::string>> sets;
  if (opt.layer_sets.empty()) {
    sets.push_back(resolve_layers(net, {}));
  } else {
    for (const auto& s : opt.layer_sets) {
      if (s.empty()) throw UsageError("empty layer set");
      sets.push_back(resolve_layers(net, s));
    }
  }
  require_out(opt.out);

  std::vector<std::string> all_layers;
  for (const auto& s : sets) all_layers.insert(all_layers.end(), s.begin(), s.end());
  const auto taps = tap_indices(net, all_layers);
  auto task = build_task(opt.task);
  auto fit_set = fitting_set(task, net, opt.subset_frac, opt.correct_only, opt.task.seed);
  auto train_cap = capture_layers(net, fit_set.inputs, taps);
  SplitBatches val{capture_layers(net, task.ind_val.inputs, taps).layers,
                   capture_layers(net, task.ood_val.inputs, taps).layers};

  // Selection only ever sees the validation captures; test captures are
  // taken after a cell has been chosen.
  struct CellModels {
    std::vector<CoverageModel> models;
  };
  SweepOutcome outcome;
  std::vector<CellModels> cell_models;
  std::vector<ValidationResult> val_results;
  for (double a : opt.alphas) {
    std::map<std::string, std::vector<NeuronStateMatrix>> states;
    for (const auto& [layer, batch] : train_cap.layers) states[layer].push_back(neuron_states(batch, a));
    for (auto m : opt.bins) {
      for (auto f : opt.fills) {
        const auto cfg = coverage_config(m, f, opt.bin_scale, opt.correct_only);
        std::map<std::string, CoverageModel> fitted;
        for (const auto& [layer, st] : states) {
          fitted.emplace(layer, fit(layer, st.front().neurons(), st, cfg, a));
        }
        for (const auto& set : sets) {
          CellModels cm;
          std::vector<const CoverageModel*> ptrs;
          for (const auto& l : set) cm.models.push_back(fitted.at(l));
          for (const auto& mdl : cm.models) ptrs.push_back(&mdl);
          auto si = layer_scores(ptrs, val.ind);
          auto so = layer_scores(ptrs, val.ood);
          auto candidates = opt.search_weights ? weight_candidates(set.size())
                                               : std::vector<std::vector<double>>{
                                                     std::vector<double>(set.size(), 1.0)};
          std::vector<ValidationResult> tried;
          for (const auto& w : candidates) {
            tried.push_back(validate_scores(fused(si, set, w), fused(so, set, w), opt.tpr));
          }
          const auto pick = select_sweep_cell(tried);
          SweepCell cell;
          cell.alpha = a;
          cell.bins = m;
          cell.fill = f;
          cell.layers = set;
          cell.weights = candidates[pick];
          cell.val = tried[pick];
          outcome.cells.push_back(std::move(cell));
          val_results.push_back(tried[pick]);
          cell_models.push_back(std::move(cm));
        }
      }
    }
  }
  outcome.selected = select_sweep_cell(val_results);
  outcome.cells[outcome.selected].selected = true;

  SplitBatches test{capture_layers(net, task.ind_test.inputs, taps).layers,
                    capture_layers(net, task.ood_test.inputs, taps).layers};
  for (std::size_t i = 0; i < outcome.cells.size(); ++i) {
    auto& cell = outcome.cells[i];
    std::vector<const CoverageModel*> ptrs;
    for (const auto& mdl : cell_models[i].models) ptrs.push_back(&mdl);
    auto a = fused(layer_scores(ptrs, test.ind), cell.layers, cell.weights);
    auto b = fused(layer_scores(ptrs, test.ood), cell.layers, cell.weights);
    cell.test_auroc = auroc(a, b);
    cell.test_fpr = fpr_at_tpr(a, b, opt.tpr).fpr;
  }

  std::vector<std::string> written;
  CsvTable table({"alpha", "bins", "fill", "layers", "weights", "val_auroc", "val_fpr",
                  "test_auroc", "test_fpr", "selected"});
  for (const auto& c : outcome.cells) {
    table.add({format_number(c.alpha), std::to_string(c.bins), std::to_string(c.fill),
               join(c.layers, "+"), join_numbers(c.weights, "+"), format_number(c.val.auroc),
               format_number(c.val.fpr), format_number(c.test_auroc), format_number(c.test_fpr),
               c.selected ? "1" : "0"});
  }
  write_text(opt.out / "sweep.csv", table.str(), written);

  std::size_t test_best = 0;
  for (std::size_t i = 1; i < outcome.cells.size(); ++i) {
    if (outcome.cells[i].test_auroc > outcome.cells[test_best].test_auroc) test_best = i;
  }
  auto describe = [](const SweepCell& c) {
    return fmt::format("alpha={} M={} O*={} layers={} weights={}: val AUROC {:.4f}, test AUROC "
                       "{:.4f}, test FPR {:.4f}",
                       format_number(c.alpha), c.bins, c.fill, join(c.layers, "+"),
                       join_numbers(c.weights, "+"), c.val.auroc, c.test_auroc, c.test_fpr);
  };
  std::string text = fmt::format("{} cells\nselected  {}\ntest best {}\n", outcome.cells.size(),
                                 describe(outcome.cells[outcome.selected]),
                                 describe(outcome.cells[test_best]));
  if (test_best != outcome.selected &&
      outcome.cells[test_best].test_auroc != outcome.cells[outcome.selected].test_auroc) {
    text += "the validation-selected cell is not the test-best cell\n";
  }
  write_text(opt.out / "summary.txt", text, written);
  write_manifest(opt.out, "sweep", sweep_json(opt), {abs_string(opt.checkpoint)}, written);
  return outcome;
}

// ---------------------------------------------------------------- plot

namespace {

json plot_json(const PlotOptions& o) {
  json j = task_json(o.task);
  j["checkpoint"] = abs_string(o.checkpoint);
  j["layer"] = o.layer;
  j["neuron"] = o.neuron;
  j["hist_bins"] = o.hist_bins;
  j["nac"] = nac_json(o.nac);
  j["out"] = abs_string(o.out);
  return j;
}

PlotOptions plot_from(const json& j) {
  PlotOptions o;
  o.task = task_from(j);
  o.checkpoint = j.at("checkpoint").get<std::string>();
  o.layer = j.at("layer").get<std::string>();
  o.neuron = j.at("neuron").get<std::size_t>();
  o.hist_bins = j.at("hist_bins").get<std::size_t>();
  o.nac = nac_from(j.at("nac"));
  o.out = j.at("out").get<std::string>();
  return o;
}

std::vector<double> uniform_edges(double lo, double hi, std::size_t bins) {
  if (!(hi > lo)) hi = lo + 1.0;
  std::vector<double> e(bins + 1);
  for (std::size_t k = 0; k <= bins; ++k) {
    e[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(bins);
  }
  e[bins] = hi;
  return e;
}

std::vector<double> column(const NeuronStateMatrix& s, std::size_t neuron) {
  std::vector<double> v;
  for (std::size_t r = 0; r < s.samples(); ++r) v.push_back(s(r, neuron));
  return v;
}

CsvTable histogram_table(std::span<const double> edges, std::span<const double> ind,
                         std::span<const double> ood) {
  auto ci = histogram_counts(ind, edges);
  auto co = histogram_counts(ood, edges);
  CsvTable t({"bin_lo", "bin_hi", "ind_count", "ood_count"});
  for (std::size_t k = 0; k + 1 < edges.size(); ++k) {
    t.add({format_number(edges[k]), format_number(edges[k + 1]), std::to_string(ci[k]),
           std::to_string(co[k])});
  }
  return t;
}

}  // namespace

PlotOutcome cmd_plot(const PlotOptions& opt) {
  if (opt.hist_bins == 0) throw UsageError("histogram needs at least one bin");
  auto net = load_net(opt.checkpoint);
  const auto layers = resolve_layers(net, opt.nac.layers);
  const std::string layer = opt.layer.empty() ? layers.front() : resolve_layers(net, {opt.layer}).front();
  const auto width = net.tap_width(net.tap_index(layer));
  if (opt.neuron >= width) {
    throw UsageError(fmt::format("neuron {} is out of range for {} ({} neurons)", opt.neuron, layer,
                                 width));
  }
  check_alphas(opt.nac.alpha);
  const auto cfg = coverage_config(opt.nac);
  const auto alphas = per_layer(opt.nac.alpha, layers.size(), "--alpha", 100.0);
  const auto weights = per_layer(opt.nac.weights, layers.size(), "--weights", 1.0);
  auto pos = std::find(layers.begin(), layers.end(), layer);
  const double alpha = pos == layers.end() ? alphas.front() : alphas[pos - layers.begin()];
  require_out(opt.out);

  auto all = layers;
  all.push_back(layer);
  const auto taps = tap_indices(net, all);
  auto task = build_task(opt.task);
  auto set = fitting_set(task, net, opt.nac.subset_frac, opt.nac.correct_only, opt.task.seed);
  auto train_cap = capture_layers(net, set.inputs, taps);
  auto ind_cap = capture_layers(net, task.ind_test.inputs, taps);
  auto ood_cap = capture_layers(net, task.ood_test.inputs, taps);

  PlotOutcome outcome;
  std::vector<std::string> written;
  CsvTable forms({"form", "alpha", "auroc", "fpr", "mean_ind", "mean_ood"});
  const auto edges = uniform_edges(0.0, 1.0, opt.hist_bins);
  for (auto form : {StateForm::activation, StateForm::gradient, StateForm::product}) {
    auto tr = form_states(train_cap.layers.at(layer), alpha, form);
    auto si = form_states(ind_cap.layers.at(layer), alpha, form);
    auto so = form_states(ood_cap.layers.at(layer), alpha, form);
    auto ci = column(si, opt.neuron), co = column(so, opt.neuron);
    const auto stem = "states_" + form_name(form);
    write_text(opt.out / (stem + ".csv"), histogram_table(edges, ci, co).str(), written);
    std::vector<HistSeries> series{{"InD", "#1f77b4", ci}, {"OOD", "#d62728", co}};
    write_text(opt.out / (stem + ".svg"),
               histogram_svg(fmt::format("{} neuron {} ({} state)", layer, opt.neuron,
                                         form_name(form)),
                             "sigmoid-normalized value", edges, series),
               written);

    std::vector<NeuronStateMatrix> fit_states{tr};
    auto model = fit(layer, width, fit_states, cfg, alpha);
    auto a = nac_ue(model, si), b = nac_ue(model, so);
    const double ma = mean(a), mb = mean(b);
    auto e = evaluate_detection(std::move(a), std::move(b), 0.95);
    outcome.forms.push_back({form, e.auroc});
    forms.add({form_name(form), format_number(alpha), format_number(e.auroc),
               format_number(e.fpr95), format_number(ma), format_number(mb)});
  }
  write_text(opt.out / "forms.csv", forms.str(), written);

  std::vector<CoverageModel> models;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    models.push_back(fit_layer(train_cap.layers.at(layers[i]), cfg, alphas[i]));
  }
  std::vector<const CoverageModel*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  auto fi = fused(layer_scores(ptrs, ind_cap.layers), layers, weights);
  auto fo = fused(layer_scores(ptrs, ood_cap.layers), layers, weights);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* v : {&fi, &fo}) {
    for (double x : *v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  const auto score_edges = uniform_edges(lo, hi, opt.hist_bins);
  write_text(opt.out / "scores.csv", histogram_table(score_edges, fi, fo).str(), written);
  std::vector<HistSeries> series{{"InD", "#1f77b4", fi}, {"OOD", "#d62728", fo}};
  write_text(opt.out / "scores.svg",
             histogram_svg("fused NAC-UE over " + join(layers, "+"), "coverage score", score_edges,
                           series),
             written);

  for (const auto& w : written) outcome.files.push_back(opt.out / w);
  write_manifest(opt.out, "plot", plot_json(opt), {abs_string(opt.checkpoint)}, written);
  return outcome;
}

// ---------------------------------------------------------------- replay

std::string cmd_replay(const Path& manifest, const std::optional<Path>& out) {
  auto bytes = io::read_file(manifest);
  json m;
  try {
    m = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw UsageError(manifest.string() + " is not valid JSON: " + e.what());
  }
  if (!m.contains("command") || !m.contains("options")) {
    throw UsageError(manifest.string() + " is not a run manifest");
  }
  const auto command = m.at("command").get<std::string>();
  auto options = m.at("options");
  if (out) options["out"] = abs_string(*out);
  if (command == "train") {
    cmd_train(train_from(options));
  } else if (command == "fit-nac") {
    cmd_fit_nac(fit_from(options));
  } else if (command == "eval-detect") {
    cmd_eval_detect(detect_from(options));
  } else if (command == "eval-me") {
    cmd_eval_me(me_from(options));
  } else if (command == "sweep") {
    cmd_sweep(sweep_from(options));
  } else if (command == "plot") {
    cmd_plot(plot_from(options));
  } else {
    throw UsageError("manifest names unknown command '" + command + "'");
  }
  return command;
}

}  // namespace nac::cli
