#include "equiada/controls.hpp"

#include <cmath>
#include <stdexcept>

#include "equiada/rng.hpp"

namespace equiada {

const char* control_name(const Control& control) {
  if (std::holds_alternative<GlobalControl>(control)) return "global";
  if (std::holds_alternative<SubgraphControl>(control)) return "subgraph";
  return "frame";
}

Control transform_control(const Control& control, const RigidMotion& g) {
  if (const auto* sub = std::get_if<SubgraphControl>(&control)) {
    SubgraphControl moved = *sub;
    moved.graph.coords = apply_rigid_motion(sub->graph.coords, g);
    return moved;
  }
  if (const auto* frame = std::get_if<FrameControl>(&control)) {
    FrameControl moved = *frame;
    moved.coords = apply_rigid_motion(frame->coords, g);
    return moved;
  }
  return control;
}

CouplingPlan make_coupling_plan(int nodes, int frames, const std::vector<Edge>& edges,
                                int feature_dim, const Control& control) {
  CouplingPlan plan;
  plan.in_nodes = nodes;
  plan.in_frames = frames;

  if (std::holds_alternative<GlobalControl>(control)) {
    plan.out_nodes = nodes;
    plan.out_frames = frames;
    plan.out_edges = edges;
    plan.identity_coords = true;
    plan.keep_coord_rows.resize(nodes * frames);
    plan.keep_node_rows.resize(nodes);
    for (int i = 0; i < nodes * frames; ++i) plan.keep_coord_rows[i] = i;
    for (int n = 0; n < nodes; ++n) plan.keep_node_rows[n] = n;
    return plan;
  }

  if (const auto* sub = std::get_if<SubgraphControl>(&control)) {
    const GeometricGraph& ctrl = sub->graph;
    if (ctrl.feature_dim() != feature_dim) {
      throw std::invalid_argument(
          "subgraph control: feature dimension mismatch (control " +
          std::to_string(ctrl.feature_dim()) + ", input " + std::to_string(feature_dim) +
          ")");
    }
    const int cn = ctrl.nodes();
    plan.out_nodes = nodes + cn;
    plan.out_frames = frames;
    plan.identity_coords = false;

    plan.out_edges = edges;
    for (const Edge& e : ctrl.edges) {
      plan.out_edges.emplace_back(nodes + e.first, nodes + e.second);
    }
    if (sub->cross_edges.empty()) {
      for (int c = 0; c < cn; ++c) {
        for (int i = 0; i < nodes; ++i) {
          plan.out_edges.emplace_back(i, nodes + c);
          plan.out_edges.emplace_back(nodes + c, i);
        }
      }
    } else {
      for (const auto& [i, c] : sub->cross_edges) {
        if (i < 0 || i >= nodes || c < 0 || c >= cn) {
          throw std::invalid_argument("subgraph control: cross-edge index out of range");
        }
        plan.out_edges.emplace_back(i, nodes + c);
        plan.out_edges.emplace_back(nodes + c, i);
      }
    }

    // Control nodes are a static context: their coordinates repeat per frame.
    plan.extra_coords.resize(cn * frames, 3);
    for (int c = 0; c < cn; ++c) {
      for (int t = 0; t < frames; ++t) {
        plan.extra_coords.row(c * frames + t) = ctrl.coords.row(c);
      }
    }
    plan.extra_feats = ctrl.node_features;

    plan.coord_perm.resize(plan.out_nodes * frames);
    for (int i = 0; i < plan.out_nodes * frames; ++i) plan.coord_perm[i] = i;
    plan.keep_coord_rows.resize(nodes * frames);
    for (int i = 0; i < nodes * frames; ++i) plan.keep_coord_rows[i] = i;
    plan.keep_node_rows.resize(nodes);
    for (int n = 0; n < nodes; ++n) plan.keep_node_rows[n] = n;
    return plan;
  }

  const auto& fc = std::get<FrameControl>(control);
  if (fc.frame_count < 1) {
    throw std::invalid_argument("frame control: frame count must be >= 1");
  }
  if (fc.coords.rows() != static_cast<long>(nodes) * fc.frame_count ||
      fc.coords.cols() != 3) {
    throw std::invalid_argument("frame control: node count mismatch with input trajectory");
  }
  const int ct = fc.frame_count;
  const int total = frames + ct;
  plan.out_nodes = nodes;
  plan.out_frames = total;
  plan.out_edges = edges;
  plan.identity_coords = false;
  plan.extra_coords = fc.coords;

  plan.coord_perm.resize(nodes * total);
  plan.keep_coord_rows.resize(nodes * frames);
  for (int n = 0; n < nodes; ++n) {
    for (int t = 0; t < total; ++t) {
      const bool is_ctrl = fc.prefix ? (t < ct) : (t >= frames);
      const int local = fc.prefix ? (is_ctrl ? t : t - ct) : (is_ctrl ? t - frames : t);
      plan.coord_perm[n * total + t] =
          is_ctrl ? (nodes * frames + n * ct + local) : (n * frames + local);
      if (!is_ctrl) plan.keep_coord_rows[n * frames + local] = n * total + t;
    }
  }
  plan.keep_node_rows.resize(nodes);
  for (int n = 0; n < nodes; ++n) plan.keep_node_rows[n] = n;
  return plan;
}

CoupledTrajectory couple(const GeometricTrajectory& traj, const Control& control,
                         const ParamSet* encoder_params, const Mlp* encoder) {
  CouplingPlan plan = make_coupling_plan(traj.nodes(), traj.frames, traj.edges,
                                         traj.feature_dim(), control);

  Mat coords;
  if (plan.identity_coords) {
    coords = traj.coords;
  } else {
    Mat stacked(traj.coords.rows() + plan.extra_coords.rows(), 3);
    stacked << traj.coords, plan.extra_coords;
    coords.resize(static_cast<long>(plan.out_nodes) * plan.out_frames, 3);
    for (std::size_t i = 0; i < plan.coord_perm.size(); ++i) {
      coords.row(i) = stacked.row(plan.coord_perm[i]);
    }
  }

  Mat feats;
  if (const auto* global = std::get_if<GlobalControl>(&control)) {
    if (encoder_params == nullptr || encoder == nullptr) {
      throw std::invalid_argument("global control: coupling requires an encoder");
    }
    Mat lifted = encoder->eval(*encoder_params, global->signal.transpose());
    if (lifted.cols() != traj.feature_dim()) {
      throw std::invalid_argument("global control: encoder output dim must equal H");
    }
    feats = traj.node_features.rowwise() + lifted.row(0);
  } else if (plan.extra_feats.size() > 0) {
    feats.resize(traj.nodes() + plan.extra_feats.rows(), traj.feature_dim());
    feats << traj.node_features, plan.extra_feats;
  } else {
    feats = traj.node_features;
  }

  CoupledTrajectory out;
  out.traj = GeometricTrajectory(std::move(feats), std::move(coords), plan.out_frames,
                                 plan.out_edges);
  out.record = CouplingRecord{plan.out_nodes, plan.out_frames, plan.keep_coord_rows,
                              plan.keep_node_rows};
  return out;
}

std::pair<Mat, Mat> decouple(const Mat& coords_out, const Mat& feats_out,
                             const CouplingRecord& record) {
  if (coords_out.rows() != static_cast<long>(record.out_nodes) * record.out_frames) {
    throw std::invalid_argument("decouple: coordinate rows do not match the record");
  }
  if (feats_out.rows() != record.out_nodes) {
    throw std::invalid_argument("decouple: feature rows do not match the record");
  }
  Mat coords(record.keep_coord_rows.size(), coords_out.cols());
  for (std::size_t i = 0; i < record.keep_coord_rows.size(); ++i) {
    coords.row(i) = coords_out.row(record.keep_coord_rows[i]);
  }
  Mat feats(record.keep_node_rows.size(), feats_out.cols());
  for (std::size_t i = 0; i < record.keep_node_rows.size(); ++i) {
    feats.row(i) = feats_out.row(record.keep_node_rows[i]);
  }
  return {coords, feats};
}

AuditReport audit_proposition1(const DenoiserFn& denoiser,
                               const GeometricTrajectory& probe, const Control& control,
                               int tau, int trials, double tol, std::uint64_t seed,
                               const ParamSet* encoder_params, const Mlp* encoder) {
  auto compose = [&](const GeometricTrajectory& traj, const Control& c) {
    CoupledTrajectory coupled = couple(traj, c, encoder_params, encoder);
    auto [eps, feats] = denoiser(coupled.traj, tau);
    return decouple(eps, feats, coupled.record);
  };

  auto [base_eps, base_feats] = compose(probe, control);

  AuditReport report;
  report.trials = trials;
  report.tolerance = tol;
  for (int k = 0; k < trials; ++k) {
    const std::uint64_t trial_seed = mix_seed(seed, 0x70726f70ULL, k);
    Eigen::Matrix3d r = random_rotation(trial_seed);
    Rng rng(mix_seed(trial_seed, 1));
    Eigen::Vector3d d(rng.normal(), rng.normal(), rng.normal());
    RigidMotion g(r, d);

    GeometricTrajectory moved = apply_rigid_motion(probe, g);
    auto [eps, feats] = compose(moved, transform_control(control, g));

    // Scores rotate; features are invariant.
    Mat expected = apply_rotation(base_eps, r);
    const double ref = std::max({expected.cwiseAbs().maxCoeff(),
                                 base_feats.cwiseAbs().maxCoeff(), 1e-9});
    const double dev = std::max((eps - expected).cwiseAbs().maxCoeff(),
                                (feats - base_feats).cwiseAbs().maxCoeff()) /
                       ref;
    if (dev > report.max_deviation) {
      report.max_deviation = dev;
      report.worst_seed = trial_seed;
    }
  }
  report.passed = report.max_deviation <= tol;
  return report;
}

AuditReport audit_equivariance(const DenoiserFn& denoiser,
                               const GeometricTrajectory& probe, int max_tau, int trials,
                               double tol, std::uint64_t seed) {
  AuditReport report;
  report.trials = trials;
  report.tolerance = tol;
  for (int k = 0; k < trials; ++k) {
    const std::uint64_t trial_seed = mix_seed(seed, 0x65717576ULL, k);
    Eigen::Matrix3d r = random_rotation(trial_seed);
    Rng rng(mix_seed(trial_seed, 1));
    Eigen::Vector3d d(rng.normal(), rng.normal(), rng.normal());
    RigidMotion g(r, d);
    const int tau = 1 + static_cast<int>(mix_seed(trial_seed, 2) %
                                         static_cast<std::uint64_t>(max_tau));

    auto [base_eps, base_feats] = denoiser(probe, tau);
    auto [eps, feats] = denoiser(apply_rigid_motion(probe, g), tau);

    Mat expected = apply_rotation(base_eps, r);
    const double ref = std::max({expected.cwiseAbs().maxCoeff(),
                                 base_feats.cwiseAbs().maxCoeff(), 1e-9});
    const double dev = std::max((eps - expected).cwiseAbs().maxCoeff(),
                                (feats - base_feats).cwiseAbs().maxCoeff()) /
                       ref;
    if (dev > report.max_deviation) {
      report.max_deviation = dev;
      report.worst_seed = trial_seed;
    }
  }
  report.passed = report.max_deviation <= tol;
  return report;
}

}  // namespace equiada
