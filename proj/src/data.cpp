#include "nac/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "nac/binary_io.hpp"
#include "nac/error.hpp"

namespace nac {
namespace {

constexpr double kPi = 3.14159265358979323846;

// Draws `count` samples around `center`; when `shifted`, applies the
// class-conditional affine map of the covariate-shift task.
void draw(LabeledSet& set, std::mt19937_64& rng, const TaskSpec& spec,
          const std::vector<double>& center, std::uint32_t label, std::size_t count,
          bool shifted) {
  std::normal_distribution<double> noise(0.0, spec.spread);
  std::vector<float> row(spec.dims);
  const double c = std::cos(spec.shift_angle), s = std::sin(spec.shift_angle);
  for (std::size_t n = 0; n < count; ++n) {
    std::vector<double> x(spec.dims);
    for (std::size_t d = 0; d < spec.dims; ++d) x[d] = center[d] + noise(rng);
    if (shifted) {
      for (std::size_t d = 0; d < spec.dims; ++d) {
        x[d] = center[d] + spec.shift_dilation * (x[d] - center[d]);
      }
      const double x0 = x[0], x1 = x[1];
      x[0] = c * x0 - s * x1 + spec.shift_offset;
      x[1] = s * x0 + c * x1;
    }
    for (std::size_t d = 0; d < spec.dims; ++d) row[d] = static_cast<float>(x[d]);
    set.inputs.append_row(std::span<const float>(row));
    set.labels.push_back(label);
  }
}

LabeledSet empty_set(std::size_t dims) { return {Matrix<float>(0, dims), {}}; }

}  // namespace

void TaskSpec::validate() const {
  if (classes < 2) throw std::invalid_argument("task needs at least 2 in-distribution classes");
  if (dims < 2) throw std::invalid_argument("task needs at least 2 input dimensions");
  if (kind == TaskKind::heldout_class && heldout_classes < 1) {
    throw std::invalid_argument("heldout_class task must reserve at least one blob");
  }
  if (!(separation > 0.0) || !(spread > 0.0)) {
    throw std::invalid_argument("separation and spread must be positive");
  }
  if (train_per_class == 0) throw std::invalid_argument("empty training split");
}

TaskSpec task_preset(TaskKind kind, std::uint64_t seed) {
  TaskSpec spec;
  spec.kind = kind;
  spec.seed = seed;
  if (kind == TaskKind::covariate_shift) spec.separation = 2.5;
  return spec;
}

SyntheticTask make_task(const TaskSpec& spec) {
  spec.validate();
  SyntheticTask task;
  task.spec = spec;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * kPi);
  const double rotation = phase(rng);
  const std::size_t blobs =
      spec.classes + (spec.kind == TaskKind::heldout_class ? spec.heldout_classes : 0);
  for (std::size_t k = 0; k < blobs; ++k) {
    std::vector<double> center(spec.dims, 0.0);
    const double a = rotation + 2.0 * kPi * static_cast<double>(k) / static_cast<double>(blobs);
    center[0] = spec.separation * std::cos(a);
    center[1] = spec.separation * std::sin(a);
    task.centers.push_back(std::move(center));
  }

  task.ind_train = empty_set(spec.dims);
  task.ind_val = empty_set(spec.dims);
  task.ind_test = empty_set(spec.dims);
  task.ood_val = empty_set(spec.dims);
  task.ood_test = empty_set(spec.dims);

  for (std::size_t k = 0; k < spec.classes; ++k) {
    const auto label = static_cast<std::uint32_t>(k);
    draw(task.ind_train, rng, spec, task.centers[k], label, spec.train_per_class, false);
    draw(task.ind_val, rng, spec, task.centers[k], label, spec.val_per_class, false);
    draw(task.ind_test, rng, spec, task.centers[k], label, spec.test_per_class, false);
  }
  if (spec.kind == TaskKind::heldout_class) {
    // Held-out blobs get the InD per-class budget split across them.
    for (std::size_t h = 0; h < spec.heldout_classes; ++h) {
      const auto label = static_cast<std::uint32_t>(spec.classes + h);
      const auto& center = task.centers[spec.classes + h];
      const std::size_t per = spec.classes / spec.heldout_classes;
      draw(task.ood_val, rng, spec, center, label, spec.val_per_class * std::max<std::size_t>(per, 1), false);
      draw(task.ood_test, rng, spec, center, label, spec.test_per_class * std::max<std::size_t>(per, 1), false);
    }
  } else {
    for (std::size_t k = 0; k < spec.classes; ++k) {
      const auto label = static_cast<std::uint32_t>(k);
      draw(task.ood_val, rng, spec, task.centers[k], label, spec.val_per_class, true);
      draw(task.ood_test, rng, spec, task.centers[k], label, spec.test_per_class, true);
    }
  }
  return task;
}

std::vector<std::size_t> subsample_indices(std::size_t rows, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("subset fraction must lie in (0, 1]");
  }
  std::vector<std::size_t> idx(rows);
  std::iota(idx.begin(), idx.end(), 0);
  if (fraction == 1.0) return idx;
  const auto keep = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(rows))));
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(keep, idx.size()));
  std::sort(idx.begin(), idx.end());
  return idx;
}

LabeledSet subsample(const LabeledSet& set, double fraction, std::uint64_t seed) {
  auto idx = subsample_indices(set.size(), fraction, seed);
  if (idx.size() == set.size()) return set;
  LabeledSet out{select_rows(set.inputs, idx), {}};
  for (auto i : idx) out.labels.push_back(set.labels[i]);
  return out;
}

void ActivationDump::validate() const {
  const std::size_t b = labels.size();
  if (z.rows() != b || grad.rows() != b || logits.rows() != b) {
    throw std::invalid_argument("dump arrays disagree on the sample count");
  }
  if (z.cols() != neurons || grad.cols() != neurons) {
    throw std::invalid_argument("dump z/grad width does not match N");
  }
  if (logits.cols() != classes) throw std::invalid_argument("dump logit width does not match C");
  auto finite = [](const Matrix<float>& m) {
    return std::all_of(m.data().begin(), m.data().end(), [](float v) { return std::isfinite(v); });
  };
  if (!finite(z) || !finite(grad) || !finite(logits)) {
    throw std::invalid_argument("dump contains non-finite values");
  }
}

RawLayerBatch ActivationDump::raw_batch() const { return {layer_id, z, grad}; }

LogitBundle ActivationDump::bundle(std::size_t row) const {
  auto r = logits.row(row);
  std::vector<double> l(r.begin(), r.end());
  return LogitBundle::from_logits(l);
}

ActivationDump make_dump(const LayerCapture& capture, const std::string& layer_id,
                         std::span<const std::uint32_t> labels) {
  const auto& batch = capture.layers.at(layer_id);
  ActivationDump d;
  d.layer_id = layer_id;
  d.neurons = batch.z.cols();
  d.classes = capture.logits.cols();
  d.z = batch.z;
  d.grad = batch.grad;
  d.logits = capture.logits;
  if (labels.empty()) {
    d.labels.assign(batch.z.rows(), ActivationDump::kUnlabeled);
  } else {
    d.labels.assign(labels.begin(), labels.end());
  }
  d.validate();
  return d;
}

std::vector<std::uint8_t> encode_nact(const ActivationDump& dump) {
  dump.validate();
  io::ByteWriter w;
  w.put_magic("NACT");
  w.put<std::uint32_t>(1);
  w.put_short_string(dump.layer_id);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dump.neurons));
  w.put<std::uint64_t>(dump.samples());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dump.classes));
  w.put_array<float>(dump.z.data());
  w.put_array<float>(dump.grad.data());
  w.put_array<std::uint32_t>(dump.labels);
  w.put_array<float>(dump.logits.data());
  return w.bytes();
}

ActivationDump decode_nact(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("NACT");
  const auto version_at = r.offset();
  if (auto v = r.get<std::uint32_t>("version"); v != 1) {
    throw FormatError("unsupported NACT version " + std::to_string(v), version_at);
  }
  ActivationDump d;
  d.layer_id = r.get_short_string("layer id");
  d.neurons = r.get<std::uint32_t>("N");
  const auto samples = r.get<std::uint64_t>("B");
  d.classes = r.get<std::uint32_t>("C");
  // Check the whole payload length up front so truncation reports the
  // expected size rather than failing midway.
  const long double need = static_cast<long double>(samples) *
                           (8.0L * static_cast<long double>(d.neurons) + 4.0L +
                            4.0L * static_cast<long double>(d.classes));
  if (need > static_cast<long double>(r.remaining())) {
    throw FormatError("truncated NACT payload: expected " +
                          std::to_string(static_cast<unsigned long long>(need + r.offset())) +
                          " bytes, file has " + std::to_string(bytes.size()),
                      r.offset());
  }
  d.z = Matrix<float>(samples, d.neurons, r.get_array<float>(samples * d.neurons, "z"));
  d.grad = Matrix<float>(samples, d.neurons, r.get_array<float>(samples * d.neurons, "grad"));
  d.labels = r.get_array<std::uint32_t>(samples, "labels");
  d.logits = Matrix<float>(samples, d.classes, r.get_array<float>(samples * d.classes, "logits"));
  r.expect_end();
  try {
    d.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("invalid NACT payload: ") + e.what(), r.offset());
  }
  return d;
}

void write_nact(const ActivationDump& dump, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_nact(dump));
}

ActivationDump read_nact(const std::filesystem::path& path) {
  return decode_nact(io::read_file(path));
}

}  // namespace nac
