#include "equiada/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace equiada {

namespace {

constexpr int kFramePairDim = 2;
constexpr int kFrameMixHidden = 16;

/// Constant (T*T) x 2 matrix of normalized frame-index pairs; the
/// frame-attention logits are a learned function of it, so the parameter
/// count stays independent of T.
Mat frame_pair_embeddings(int frames) {
  Mat pairs(frames * frames, kFramePairDim);
  for (int t = 0; t < frames; ++t) {
    for (int s = 0; s < frames; ++s) {
      pairs(t * frames + s, 0) = (t + 1.0) / frames;
      pairs(t * frames + s, 1) = (s + 1.0) / frames;
    }
  }
  return pairs;
}

}  // namespace

Mat time_embed(int step, int dim, int max_step) {
  if (dim <= 0 || dim % 2 != 0) {
    throw std::invalid_argument("time_embed: dim must be positive and even");
  }
  if (max_step < 2) throw std::invalid_argument("time_embed: max_step must be >= 2");
  Mat out(1, dim);
  const int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(static_cast<double>(max_step)) *
                                 static_cast<double>(k) / static_cast<double>(half));
    out(0, 2 * k) = std::sin(step * freq);
    out(0, 2 * k + 1) = std::cos(step * freq);
  }
  return out;
}

GraphTopology GraphTopology::build(int nodes, int frames, const std::vector<Edge>& edges) {
  GraphTopology topo;
  topo.nodes = nodes;
  topo.frames = frames;
  topo.edges = edges;

  Eigen::VectorXi deg = Eigen::VectorXi::Zero(nodes);
  for (const Edge& e : edges) {
    if (e.first < 0 || e.first >= nodes || e.second < 0 || e.second >= nodes) {
      throw std::invalid_argument("GraphTopology: edge index out of range");
    }
    deg(e.first) += 1;
  }

  const int msgs = static_cast<int>(edges.size()) * frames;
  topo.recv_rows.reserve(msgs);
  topo.send_rows.reserve(msgs);
  topo.recv_node.reserve(msgs);
  topo.send_node.reserve(msgs);
  for (const Edge& e : edges) {
    for (int t = 0; t < frames; ++t) {
      topo.recv_rows.push_back(e.first * frames + t);
      topo.send_rows.push_back(e.second * frames + t);
      topo.recv_node.push_back(e.first);
      topo.send_node.push_back(e.second);
    }
  }

  topo.coord_inv_deg.resize(nodes * frames);
  topo.node_inv_msgs.resize(nodes);
  for (int n = 0; n < nodes; ++n) {
    const double d = std::max(1, deg(n));
    topo.node_inv_msgs(n) = 1.0 / (d * frames);
    for (int t = 0; t < frames; ++t) topo.coord_inv_deg(n * frames + t) = 1.0 / d;
  }
  return topo;
}

Mlp DenoiserModel::embed() const {
  return Mlp{prefix + ".embed", {cfg.feature_dim, cfg.hidden}};
}

Mlp DenoiserModel::message_net(int layer) const {
  return Mlp{prefix + ".layer" + std::to_string(layer) + ".msg",
             {2 * cfg.hidden + 1 + cfg.time_dim, cfg.hidden, cfg.hidden},
             Activation::kSilu,
             /*activate_output=*/true};
}

Mlp DenoiserModel::coord_net(int layer) const {
  return Mlp{prefix + ".layer" + std::to_string(layer) + ".coord",
             {cfg.hidden, cfg.hidden, 1}};
}

Mlp DenoiserModel::feature_net(int layer) const {
  return Mlp{prefix + ".layer" + std::to_string(layer) + ".feat",
             {2 * cfg.hidden, cfg.hidden, cfg.hidden}};
}

Mlp DenoiserModel::frame_mix_net(int layer) const {
  return Mlp{prefix + ".layer" + std::to_string(layer) + ".tmix",
             {kFramePairDim, kFrameMixHidden, 1}};
}

void DenoiserModel::init_params(ParamSet& params, std::uint64_t seed) const {
  Rng rng(seed);
  embed().init(params, rng);
  for (int l = 0; l < cfg.layers; ++l) {
    message_net(l).init(params, rng);
    coord_net(l).init(params, rng, /*out_scale=*/0.1);
    feature_net(l).init(params, rng);
    frame_mix_net(l).init(params, rng);
  }
}

LayerOut layer_forward(Bound& bound, const DenoiserModel& model, int layer,
                       Value feats_hidden, Value coords, const GraphTopology& topo,
                       Value t_emb) {
  Tape& tape = bound.tape();
  const int rows = static_cast<int>(tape.value(coords).rows());
  if (rows != topo.nodes * topo.frames) {
    throw std::invalid_argument("layer_forward: coords rows do not match topology");
  }

  Value delta_raw;
  Value msg_agg;
  if (topo.messages() > 0) {
    Value rel = gather_rows(coords, topo.recv_rows) - gather_rows(coords, topo.send_rows);
    Value d2 = row_sum_sq(rel);
    Value hi = gather_rows(feats_hidden, topo.recv_node);
    Value hj = gather_rows(feats_hidden, topo.send_node);
    Value te = repeat_row(t_emb, topo.messages());
    Value m = model.message_net(layer)(bound, concat_cols({hi, hj, d2, te}));
    Value w = model.coord_net(layer)(bound, m);
    Value weighted = cmul_col(rel, w);
    delta_raw = row_scale(scatter_rows(weighted, topo.recv_rows, rows), topo.coord_inv_deg);
    msg_agg = row_scale(scatter_rows(m, topo.recv_node, topo.nodes), topo.node_inv_msgs);
  } else {
    delta_raw = tape.constant(Mat::Zero(rows, 3));
    msg_agg = tape.constant(Mat::Zero(topo.nodes, model.cfg.hidden));
  }

  // Frame attention: invariant T x T weights mixing the per-frame displacements.
  Value logits = model.frame_mix_net(layer)(
      bound, bound.tape().constant(frame_pair_embeddings(topo.frames)));
  Value attn = softmax_rows(reshape_rowmajor(logits, topo.frames, topo.frames));
  Value delta = delta_raw + block_matmul(attn, delta_raw, topo.frames);

  Value feats =
      feats_hidden + model.feature_net(layer)(bound, concat_cols({feats_hidden, msg_agg}));
  return LayerOut{feats, delta};
}

DenoiserOut denoiser_forward(Bound& bound, const DenoiserModel& model, Value feats_raw,
                             Value coords, const GraphTopology& topo, int step) {
  if (step < 0 || step > model.cfg.max_step) {
    throw std::invalid_argument("denoiser_forward: diffusion step out of range");
  }
  Tape& tape = bound.tape();
  Value t_emb =
      tape.constant(time_embed(step, model.cfg.time_dim, std::max(2, model.cfg.max_step)));
  Value h = model.embed()(bound, feats_raw);
  Value x = coords;
  for (int l = 0; l < model.cfg.layers; ++l) {
    LayerOut out = layer_forward(bound, model, l, h, x, topo, t_emb);
    h = out.feats;
    x = x + out.delta;
  }
  Value eps = x - coords;
  if (model.cfg.subspace) eps = center_rows(eps);
  return DenoiserOut{eps, h};
}

DenoiserOut denoiser_forward(Bound& bound, const DenoiserModel& model,
                             const GeometricTrajectory& traj, int step) {
  Tape& tape = bound.tape();
  GraphTopology topo = GraphTopology::build(traj.nodes(), traj.frames, traj.edges);
  return denoiser_forward(bound, model, tape.constant(traj.node_features),
                          tape.constant(traj.coords), topo, step);
}

DenoiserOut denoiser_forward_cond(Bound& bound, const DenoiserModel& model,
                                  Value feats_raw, Value coords, const Mat& cond_coords,
                                  int cond_frames, int frames,
                                  const std::vector<Edge>& edges, int step) {
  Tape& tape = bound.tape();
  const int nodes = static_cast<int>(tape.value(feats_raw).rows());
  if (cond_frames < 1) {
    throw std::invalid_argument("denoiser_forward_cond: no condition frames");
  }
  if (cond_coords.rows() != static_cast<long>(nodes) * cond_frames) {
    throw std::invalid_argument("denoiser_forward_cond: condition shape mismatch");
  }

  const int total = cond_frames + frames;
  // Interleave [condition | noised] per node into the node-major layout.
  std::vector<int> perm(nodes * total);
  std::vector<int> keep(nodes * frames);
  for (int n = 0; n < nodes; ++n) {
    for (int t = 0; t < total; ++t) {
      const int src = (t < cond_frames) ? (nodes * frames + n * cond_frames + t)
                                        : (n * frames + (t - cond_frames));
      perm[n * total + t] = src;
      if (t >= cond_frames) keep[n * frames + (t - cond_frames)] = n * total + t;
    }
  }
  Value stacked = concat_rows(coords, tape.constant(cond_coords));
  Value coupled = gather_rows(stacked, perm);

  GraphTopology topo = GraphTopology::build(nodes, total, edges);
  DenoiserModel flat = model;
  flat.cfg.subspace = false;
  DenoiserOut out = denoiser_forward(bound, flat, feats_raw, coupled, topo, step);
  return DenoiserOut{gather_rows(out.eps, keep), out.feats};
}

}  // namespace equiada
