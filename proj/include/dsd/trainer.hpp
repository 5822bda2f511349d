#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsd/attention.hpp"
#include "dsd/checkpoint.hpp"
#include "dsd/cost_model.hpp"
#include "dsd/losses.hpp"
#include "dsd/metrics.hpp"
#include "dsd/segnet.hpp"
#include "dsd/synth.hpp"

namespace dsd {

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::uint64_t iteration, const std::string& what)
      : std::runtime_error(what), iteration_(iteration) {}
  std::uint64_t iteration() const { return iteration_; }

 private:
  std::uint64_t iteration_;
};

// Which distillation term is added to the cross-entropy task loss.
enum class DistillMethod {
  kNone,      // cross-entropy only
  kDsd,       // alpha * PSD + beta * CSD
  kPsd,       // alpha * PSD
  kCsd,       // beta * CSD
  kKd,        // gamma * KD
  kAt,        // gamma * AT
  kFitnet,    // gamma * FitNet on the head tap
  kAffinity,  // gamma * Affinity on the head tap
};

DistillMethod parse_method(const std::string& name);
std::string to_string(DistillMethod method);
// Default weight for the comparison losses (ignored by PSD/CSD/DSD).
double default_gamma(DistillMethod method);

struct TrainConfig {
  std::size_t batch_size = 8;
  std::uint64_t iterations = 2000;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double poly_power = 0.9;
  LossWeights weights;
  DistillMethod method = DistillMethod::kDsd;
  std::optional<double> gamma;  // comparison-loss weight, per-method default
  PairPolicy pairs = PairPolicy::kAdjacent;
  std::vector<NamedPair> explicit_pairs;
  std::uint64_t seed = 1;
  bool flip = true;
  bool scale_jitter = false;
  std::uint64_t log_interval = 50;
  // Stop after this many iterations while keeping the schedule of the full
  // run; the checkpoint can then be resumed. Zero runs to the end.
  std::uint64_t stop_at = 0;

  void validate() const;
  double effective_gamma() const { return gamma.value_or(default_gamma(method)); }
};

// Compact JSON echo of every hyperparameter in the config.
std::string config_to_json(const TrainConfig& c);

struct TraceRow {
  std::uint64_t iteration = 0;
  double lr = 0.0;
  double ce = 0.0;
  double psd = 0.0;
  double csd = 0.0;
  double aux = 0.0;  // comparison loss (KD/AT/FitNet/Affinity)
  double total = 0.0;
};

struct EvalResult {
  ConfusionMatrix confusion;
  double miou = 0.0;
  double pixel_acc = 0.0;
  std::vector<std::optional<double>> class_iou;
};

EvalResult evaluate(const SegNet& net, const std::vector<SynthSample>& samples,
                    std::size_t batch_size = 16);
// {"miou", "pixel_acc", "class_iou"} with null for classes absent from both
// prediction and ground truth.
std::string metrics_json(const EvalResult& r);

// Everything needed to reproduce and inspect one training run.
struct DistillReport {
  std::string role;  // "teacher" or "student"
  TrainConfig config;
  SegNetSpec spec;
  std::optional<std::uint64_t> teacher_digest;
  DatasetManifest train_data;
  DatasetManifest val_data;
  std::vector<TraceRow> trace;
  double ema_early = 0.0;  // EMA (window 50) of total loss at 10% of training
  double ema_final = 0.0;
  EvalResult val;
  std::optional<EvalResult> train_eval;  // teacher runs only
  FlopsReport flops;
  double wall_time_s = 0.0;

  std::string to_json(bool include_wall_time = true) const;
  std::string trace_csv() const;
};

struct TrainResult {
  Checkpoint checkpoint;
  DistillReport report;
};

struct TrainData {
  Dataset train;
  Dataset val;
};

// Cross-entropy training. With `resume`, continues from the checkpoint's
// iteration up to config.iterations.
TrainResult train_supervised(const SegNetSpec& spec, const TrainData& data,
                             const TrainConfig& config,
                             const std::optional<Checkpoint>& resume = std::nullopt);

// Same as train_supervised with the teacher role recorded in the report.
TrainResult train_teacher(const SegNetSpec& spec, const TrainData& data,
                          const TrainConfig& config,
                          const std::optional<Checkpoint>& resume = std::nullopt);

// Distils a frozen teacher into a student. `student_init` overrides the
// seeded initialization of the student parameters; `resume` continues an
// interrupted run from its checkpoint.
TrainResult distill_student(const Checkpoint& teacher, const SegNetSpec& student,
                            const TrainData& data, const TrainConfig& config,
                            const std::optional<Checkpoint>& student_init = std::nullopt,
                            const std::optional<Checkpoint>& resume = std::nullopt);

// Geometry of the student's knowledge-extraction stages for a given input size.
LayerGeometry student_geometry(const SegNetSpec& spec, std::size_t height,
                               std::size_t width);

// Builds a TapSet from one batch entry of the network outputs.
TapSet tap_set(const NetOutputs& out, std::size_t index, PairPolicy policy,
               const std::vector<NamedPair>& explicit_pairs = {});

}  // namespace dsd
