#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <variant>
#include <vector>

#include "equiada/backbone.hpp"
#include "equiada/geometry.hpp"
#include "equiada/nn.hpp"

namespace equiada {

/// Global signal lifted into node features through an encoder MLP.
struct GlobalControl {
  Eigen::VectorXd signal;
};

/// Fixed context graph merged into the input as a supergraph. cross_edges
/// pair (input node, control node); when empty, every control node connects
/// to every input node in both directions.
struct SubgraphControl {
  GeometricGraph graph;
  std::vector<std::pair<int, int>> cross_edges;
};

/// Additional observed frames concatenated along the frame axis.
struct FrameControl {
  Mat coords;  // (N * frame_count) x 3, node-major
  int frame_count = 0;
  bool prefix = true;
};

using Control = std::variant<GlobalControl, SubgraphControl, FrameControl>;

const char* control_name(const Control& control);

/// Moves the control's geometric content by g; global signals are untouched.
Control transform_control(const Control& control, const RigidMotion& g);

/// Index bookkeeping shared by the raw and on-tape coupling paths, built once
/// per (input shape, control).
struct CouplingPlan {
  int in_nodes = 0, in_frames = 0;
  int out_nodes = 0, out_frames = 0;
  std::vector<Edge> out_edges;
  bool identity_coords = true;   // global control leaves geometry untouched
  std::vector<int> coord_perm;   // coupled row -> row of [input; extra] stack
  Mat extra_coords;              // constant rows appended below the input rows
  Mat extra_feats;               // control node features (subgraph only)
  std::vector<int> keep_coord_rows;  // decoupling: original (node, frame) rows
  std::vector<int> keep_node_rows;   // decoupling: original node rows
};

CouplingPlan make_coupling_plan(int nodes, int frames, const std::vector<Edge>& edges,
                                int feature_dim, const Control& control);

/// What decouple() needs from the matching couple() call.
struct CouplingRecord {
  int out_nodes = 0, out_frames = 0;
  std::vector<int> keep_coord_rows;
  std::vector<int> keep_node_rows;
};

struct CoupledTrajectory {
  GeometricTrajectory traj;
  CouplingRecord record;
};

/// Coupling operator f: injects the control into the graph. Global controls
/// need the encoder (sigma) parameters; the other variants ignore them.
CoupledTrajectory couple(const GeometricTrajectory& traj, const Control& control,
                         const ParamSet* encoder_params = nullptr,
                         const Mlp* encoder = nullptr);

/// Decoupling operator g: restricts a denoiser output on the coupled graph to
/// the original nodes and frames.
std::pair<Mat, Mat> decouple(const Mat& coords_out, const Mat& feats_out,
                             const CouplingRecord& record);

struct AuditReport {
  int trials = 0;
  double max_deviation = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::uint64_t worst_seed = 0;
};

/// Denoiser under audit: trajectory at step tau -> (noise prediction, features).
using DenoiserFn =
    std::function<std::pair<Mat, Mat>(const GeometricTrajectory&, int tau)>;

/// Randomized check that g .. denoiser .. f commutes with rigid motions: the
/// motion is applied to the trajectory and the control's geometry, and the
/// composed score must move with it (features must be invariant).
AuditReport audit_proposition1(const DenoiserFn& denoiser,
                               const GeometricTrajectory& probe, const Control& control,
                               int tau, int trials, double tol, std::uint64_t seed,
                               const ParamSet* encoder_params = nullptr,
                               const Mlp* encoder = nullptr);

/// Equivariance audit of a bare denoiser over random (rigid motion, step)
/// trials on the probe trajectory.
AuditReport audit_equivariance(const DenoiserFn& denoiser,
                               const GeometricTrajectory& probe, int max_tau, int trials,
                               double tol, std::uint64_t seed);

}  // namespace equiada
