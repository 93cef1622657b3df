#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "equiada/adapter.hpp"
#include "equiada/diffusion.hpp"
#include "equiada/simdata.hpp"

namespace equiada {

/// Flat key = value run configuration. Defaults are the full-scale settings;
/// desk-scale runs override them from a config file. Unknown keys are errors.
struct RunConfig {
  std::string task = "uncond";  // "uncond" | "cond"
  std::uint64_t seed = 0;

  // simulate
  int sim_particles = 5;
  int sim_frames = 35;
  double sim_dt = 1e-3;
  int sim_substeps = 100;
  double sim_coupling = 1.0;
  double sim_softening = 0.1;
  double sim_box = 1.0;
  double sim_vel_sigma = 0.5;
  int sim_train = 3000;
  int sim_val = 2000;
  int sim_test = 2000;

  // model
  int n_layer = 6;
  int hidden = 128;
  int time_emb_dim = 32;

  // schedule
  int diffusion_steps = 1000;
  double beta_start = 0.02;
  double beta_end = 0.0001;
  bool schedule_increasing = false;

  // training
  int batch_size = 128;
  int steps = 2000;
  double learning_rate = 0.0001;
  int val_every = 100;

  // task shape
  int cond_frames = 10;
  int pred_frames = 20;

  // adapter
  int adapter_blocks = 3;
  std::string adapter_strategy = "strided";
  std::string control_variant = "frame";
  std::string ablation = "standard";

  // evaluation
  int eval_samples = 5;

  static RunConfig from_file(const std::string& path);
  static RunConfig from_text(const std::string& text, const std::string& origin);
  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> echo() const;

  SimParams sim_params() const;
  SimConfig sim_config() const;
  NoiseSchedule schedule() const;
};

/// Manifest plus parameter tensors. The blob hash pins the parameter values;
/// an adapter checkpoint additionally records the hash of the base it was
/// trained against.
struct Checkpoint {
  std::map<std::string, std::string> manifest;
  ParamSet params;
};

std::string sha256_hex(const void* data, std::size_t size);
/// Concatenated f64 little-endian tensor values in name order.
std::string param_blob(const ParamSet& params);
std::string param_hash(const ParamSet& params);

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

/// Loads the three split files "<stem>.train" / ".val" / ".test". A path that
/// is itself a readable dataset file is used for every split.
DatasetSplits load_splits(const std::string& stem);
void write_splits(const std::string& stem, const DatasetSplits& splits);

/// Frames [start, start + count) of a record as a trajectory.
GeometricTrajectory slice_frames(const TrajectoryRecord& record, int start, int count);
/// Coordinates of frames [start, start + count), node-major.
Mat slice_coords(const TrajectoryRecord& record, int start, int count);

/// Average displacement error over frames and nodes of one sample.
double ade(const Mat& pred, const Mat& truth, int nodes, int frames);
/// Final-frame displacement error of one sample.
double fde(const Mat& pred, const Mat& truth, int nodes, int frames);
/// Mean over the K samples of the per-sample metric.
double ade_over_samples(const std::vector<Mat>& preds, const Mat& truth, int nodes,
                        int frames);
double fde_over_samples(const std::vector<Mat>& preds, const Mat& truth, int nodes,
                        int frames);

/// Per-timestep empirical densities of the pooled coordinate values over
/// shared bin edges, compared by mean absolute error and averaged over
/// timesteps. Zero when both sets coincide.
double marginal_score(const std::vector<Mat>& samples, const std::vector<Mat>& reference,
                      int frames, int bins = 50);

/// Denoiser parameters plus the naming scheme, rebuilt from a checkpoint.
struct LoadedModel {
  DenoiserModel model;
  ParamSet params;
  RunConfig config;
};
LoadedModel load_base(const Checkpoint& ckpt);

/// Trains the base denoiser. Writes the last validated parameters to
/// abort_path and throws if the loss turns non-finite.
Checkpoint pretrain(const RunConfig& config, const DatasetSplits& data,
                    const std::string& abort_path = {});

/// Trains an adapter stack against a frozen base checkpoint.
Checkpoint finetune(const Checkpoint& base_ckpt, const RunConfig& config,
                    const DatasetSplits& data);

/// Rebuilds the adapter stack from its checkpoint (parameters trainable).
AdapterStack load_adapter(const Checkpoint& adapter_ckpt, const DenoiserModel& base);

/// Extracts the control for a record per the configured variant.
Control control_from_record(const TrajectoryRecord& record, const RunConfig& config,
                            ControlVariant variant);

struct MetricsReport {
  std::vector<std::pair<std::string, double>> lines;
  double at(const std::string& name) const;
  std::string to_text() const;
};

/// Runs the samplers K times per test record and reports pretrain-task
/// metrics for the base, fine-tune-task metrics for the fused model and the
/// zero-shot base, and pretrain-task metrics with the adapter detached.
/// Sample k draws with seed index sample_offset + k, so a K-sample report is
/// the mean of K single-sample reports at offsets 0..K-1.
MetricsReport evaluate(const Checkpoint& base_ckpt, const Checkpoint* adapter_ckpt,
                       const DatasetSplits& data, int eval_samples = 5,
                       std::uint64_t eval_seed = 0, int sample_offset = 0);

/// One trajectory draw for the checkpoint's task. The prototype record
/// supplies node identities and, for conditional sampling, the condition
/// frames. Fills condition_out (node-major (N*Tc) x 3) when the draw was
/// conditioned; returns the sampled frames.
struct SampleResult {
  Mat coords;     // (N * frames) x 3
  int frames = 0;
  Mat condition;  // empty when unconditional
  int condition_frames = 0;
};
SampleResult sample_trajectory(const Checkpoint& base_ckpt,
                               const Checkpoint* adapter_ckpt,
                               const TrajectoryRecord& record, std::uint64_t seed);

}  // namespace equiada
