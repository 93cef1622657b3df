#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "equiada/geometry.hpp"
#include "equiada/nn.hpp"
#include "equiada/tensor.hpp"

namespace equiada {

/// Sinusoidal features at geometrically spaced frequencies covering
/// [1/max_step, 1], 1 x dim. dim must be even.
Mat time_embed(int step, int dim, int max_step = 10000);

/// Directed message-passing indices for a trajectory graph, precomputed per
/// (edges, N, T). Message k = e*T + t flows from edge e's second node to its
/// first node at frame t.
struct GraphTopology {
  int nodes = 0;
  int frames = 1;
  std::vector<Edge> edges;

  std::vector<int> recv_rows;   // coordinate row of the receiver, per message
  std::vector<int> send_rows;   // coordinate row of the sender, per message
  std::vector<int> recv_node;   // receiver node id, per message
  std::vector<int> send_node;   // sender node id, per message
  Eigen::VectorXd coord_inv_deg;  // 1/max(1, in-degree), per coordinate row
  Eigen::VectorXd node_inv_msgs;  // 1/max(1, in-degree * T), per node

  static GraphTopology build(int nodes, int frames, const std::vector<Edge>& edges);
  int messages() const { return static_cast<int>(recv_rows.size()); }
};

struct DenoiserConfig {
  int layers = 6;
  int hidden = 128;
  int time_dim = 32;
  int feature_dim = 2;   // raw node feature width H
  int max_step = 1000;   // diffusion step count the model was built for
  bool subspace = true;  // post-compose coordinate output with the CoM projection
};

/// The equivariant denoiser: an input feature embedding plus a stack of
/// message-passing layers. Holds only the parameter naming scheme; values
/// live in a ParamSet so the same description can evaluate a frozen base or
/// a trainable copy.
struct DenoiserModel {
  DenoiserConfig cfg;
  std::string prefix = "base";

  Mlp embed() const;
  Mlp message_net(int layer) const;
  Mlp coord_net(int layer) const;
  Mlp feature_net(int layer) const;
  Mlp frame_mix_net(int layer) const;

  void init_params(ParamSet& params, std::uint64_t seed) const;
};

struct LayerOut {
  Value feats;  // N x hidden
  Value delta;  // (N*T) x 3 displacement
};

/// One equivariant layer: messages from invariant scalars, coordinate update
/// from relative vectors (mean-aggregated), residual feature update, then a
/// learned per-frame attention mix of the frame displacements.
LayerOut layer_forward(Bound& bound, const DenoiserModel& model, int layer,
                       Value feats_hidden, Value coords, const GraphTopology& topo,
                       Value t_emb);

struct DenoiserOut {
  Value eps;    // (N*T) x 3 predicted noise
  Value feats;  // N x hidden auxiliary features
};

/// Full stack on tape values. feats_raw is N x feature_dim, coords (N*T) x 3.
DenoiserOut denoiser_forward(Bound& bound, const DenoiserModel& model, Value feats_raw,
                             Value coords, const GraphTopology& topo, int step);

/// Convenience overload over a trajectory (inputs become tape constants).
DenoiserOut denoiser_forward(Bound& bound, const DenoiserModel& model,
                             const GeometricTrajectory& traj, int step);

/// Conditional form: prepends the clean condition frames ((N*Tc) x 3) along
/// the frame axis, runs the stack, and returns scores for the noised frames
/// only. Never projects onto the CoM-free subspace.
DenoiserOut denoiser_forward_cond(Bound& bound, const DenoiserModel& model,
                                  Value feats_raw, Value coords, const Mat& cond_coords,
                                  int cond_frames, int frames,
                                  const std::vector<Edge>& edges, int step);

}  // namespace equiada
