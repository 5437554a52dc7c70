#pragma once

// Synthetic in-distribution / out-of-distribution tasks, and the NACT
// activation-dump format shared with external exporters.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nac/matrix.hpp"
#include "nac/netlab.hpp"
#include "nac/state.hpp"

namespace nac {

enum class TaskKind : std::uint8_t { heldout_class, covariate_shift };

struct TaskSpec {
  TaskKind kind = TaskKind::heldout_class;
  std::size_t dims = 2;
  std::size_t classes = 3;          // in-distribution classes
  std::size_t heldout_classes = 1;  // extra blobs reserved as OOD (heldout_class only)
  double separation = 4.0;          // blob-center radius
  double spread = 1.0;              // per-coordinate std of each blob
  std::size_t train_per_class = 2000;
  std::size_t val_per_class = 300;
  std::size_t test_per_class = 300;
  double shift_angle = 0.0;         // radians (covariate_shift only)
  double shift_offset = 0.0;        // translation along the first axis (covariate_shift only)
  double shift_dilation = 2.0;      // spread multiplier about each blob center (covariate_shift only)
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticTask {
  TaskSpec spec;
  std::vector<std::vector<double>> centers;  // one per blob, InD blobs first
  LabeledSet ind_train;
  LabeledSet ind_val;
  LabeledSet ind_test;
  LabeledSet ood_val;
  LabeledSet ood_test;
};

// Desk-scale settings for each task kind: heldout_class uses 4 well
// separated blobs with one held out; covariate_shift uses 3 overlapping
// blobs whose OOD copies have twice the spread.
TaskSpec task_preset(TaskKind kind, std::uint64_t seed);

// Gaussian blobs on a circle of radius `separation` in the first two
// coordinates (remaining coordinates are pure noise). heldout_class keeps
// the last `heldout_classes` blobs out of training and labels them
// C, C+1, ...; covariate_shift maps fresh InD-class samples through
// x -> R(angle) (c + dilation (x - c)) + offset e_0, with c the class center,
// and keeps their labels.
SyntheticTask make_task(const TaskSpec& spec);

// Uniform subset of rows (without replacement), order preserved.
std::vector<std::size_t> subsample_indices(std::size_t rows, double fraction, std::uint64_t seed);
LabeledSet subsample(const LabeledSet& set, double fraction, std::uint64_t seed);

struct ActivationDump {
  static constexpr std::uint32_t kUnlabeled = 0xFFFFFFFFu;

  std::string layer_id;
  std::size_t neurons = 0;
  std::size_t classes = 0;
  Matrix<float> z;       // B x N
  Matrix<float> grad;    // B x N
  std::vector<std::uint32_t> labels;  // B
  Matrix<float> logits;  // B x C

  std::size_t samples() const { return labels.size(); }
  void validate() const;
  RawLayerBatch raw_batch() const;
  LogitBundle bundle(std::size_t row) const;
  bool operator==(const ActivationDump&) const = default;
};

ActivationDump make_dump(const LayerCapture& capture, const std::string& layer_id,
                         std::span<const std::uint32_t> labels);

// "NACT", u32 version = 1, u16 layer-id length + UTF-8 bytes, u32 N, u64 B,
// u32 C, then z, grad (f32, B x N), labels (u32, B), logits (f32, B x C).
// Little-endian, row-major.
std::vector<std::uint8_t> encode_nact(const ActivationDump& dump);
ActivationDump decode_nact(std::span<const std::uint8_t> bytes);
void write_nact(const ActivationDump& dump, const std::filesystem::path& path);
ActivationDump read_nact(const std::filesystem::path& path);

}  // namespace nac
