#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "equiada/backbone.hpp"
#include "equiada/geometry.hpp"
#include "equiada/rng.hpp"

using namespace equiada;

namespace {

DenoiserModel small_model(int layers = 2, int hidden = 16, bool subspace = true) {
  DenoiserModel m;
  m.prefix = "base";
  m.cfg.layers = layers;
  m.cfg.hidden = hidden;
  m.cfg.time_dim = 8;
  m.cfg.feature_dim = 2;
  m.cfg.max_step = 100;
  m.cfg.subspace = subspace;
  return m;
}

GeometricTrajectory random_traj(int nodes, int frames, std::uint64_t seed) {
  Rng rng(seed);
  Mat feats = Mat::Zero(nodes, 2);
  for (int n = 0; n < nodes; ++n) feats(n, rng.uniform() < 0.5 ? 0 : 1) = 1.0;
  std::vector<Edge> edges;
  for (int i = 0; i < nodes; ++i) {
    for (int j = 0; j < nodes; ++j) {
      if (i != j) edges.emplace_back(i, j);
    }
  }
  return GeometricTrajectory(feats, rng.normal_mat(nodes * frames, 3), frames, edges);
}

std::pair<Mat, Mat> run_denoiser(const DenoiserModel& model, const ParamSet& params,
                                 const GeometricTrajectory& traj, int tau) {
  Tape tape;
  Bound bound(tape, params);
  DenoiserOut out = denoiser_forward(bound, model, traj, tau);
  return {tape.value(out.eps), tape.value(out.feats)};
}

}  // namespace

TEST_CASE("time_embed: step 0 gives sines 0 and cosines 1") {
  Mat e = time_embed(0, 8);
  for (int k = 0; k < 4; ++k) {
    CHECK(e(0, 2 * k) == 0.0);
    CHECK(e(0, 2 * k + 1) == 1.0);
  }
}

TEST_CASE("time_embed: deterministic and distinct across steps") {
  Mat a = time_embed(500, 32);
  Mat b = time_embed(500, 32);
  CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * 32) == 0);

  Mat e1 = time_embed(1, 32), e500 = time_embed(500, 32), e1000 = time_embed(1000, 32);
  CHECK((e1 - e500).norm() > 0.01);
  CHECK((e1 - e1000).norm() > 0.01);
  CHECK((e500 - e1000).norm() > 0.01);
}

TEST_CASE("time_embed: odd dimension is rejected") {
  CHECK_THROWS_AS(time_embed(1, 7), std::invalid_argument);
}

TEST_CASE("layer_forward: zero message and coordinate nets give zero displacement") {
  DenoiserModel model = small_model(1);
  ParamSet params;
  model.init_params(params, 3);
  for (const Mlp& net : {model.message_net(0), model.coord_net(0)}) {
    for (int l = 0; l < net.layers(); ++l) {
      params.mutable_at(net.weight_name(l)).setZero();
      params.mutable_at(net.bias_name(l)).setZero();
    }
  }
  GeometricTrajectory traj = random_traj(4, 3, 5);
  GraphTopology topo = GraphTopology::build(4, 3, traj.edges);

  Tape tape;
  Bound bound(tape, params);
  Value temb = tape.constant(time_embed(7, model.cfg.time_dim));
  Value h = model.embed()(bound, tape.constant(traj.node_features));
  LayerOut out = layer_forward(bound, model, 0, h, tape.constant(traj.coords), topo, temb);
  CHECK(tape.value(out.delta).cwiseAbs().maxCoeff() == 0.0);
  // Features still pass through the update net on the zero aggregated message.
  CHECK(tape.value(out.feats).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("layer_forward: single node without edges gives zero displacement") {
  DenoiserModel model = small_model(1);
  ParamSet params;
  model.init_params(params, 4);
  GeometricTrajectory traj(Mat::Ones(1, 2), Rng(6).normal_mat(3, 3), 3, {});
  GraphTopology topo = GraphTopology::build(1, 3, {});

  Tape tape;
  Bound bound(tape, params);
  Value temb = tape.constant(time_embed(1, model.cfg.time_dim));
  Value h = model.embed()(bound, tape.constant(traj.node_features));
  LayerOut out = layer_forward(bound, model, 0, h, tape.constant(traj.coords), topo, temb);
  CHECK(tape.value(out.delta).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("layer_forward: displacements are rotation-equivariant") {
  DenoiserModel model = small_model(1);
  ParamSet params;
  model.init_params(params, 8);
  GeometricTrajectory traj = random_traj(5, 2, 9);
  GraphTopology topo = GraphTopology::build(5, 2, traj.edges);

  auto eval_delta = [&](const Mat& coords) {
    Tape tape;
    Bound bound(tape, params);
    Value temb = tape.constant(time_embed(3, model.cfg.time_dim));
    Value h = model.embed()(bound, tape.constant(traj.node_features));
    LayerOut out = layer_forward(bound, model, 0, h, tape.constant(coords), topo, temb);
    return tape.value(out.delta);
  };

  Eigen::Matrix3d r = random_rotation(77);
  Mat base = eval_delta(traj.coords);
  Mat rotated = eval_delta(apply_rotation(traj.coords, r));
  CHECK((rotated - apply_rotation(base, r)).cwiseAbs().maxCoeff() /
            base.cwiseAbs().maxCoeff() <=
        1e-8);
}

TEST_CASE("denoiser_forward: rotation equivariance and translation invariance") {
  DenoiserModel model = small_model();
  ParamSet params;
  model.init_params(params, 21);
  GeometricTrajectory traj = random_traj(4, 3, 22);

  auto [base_eps, base_feats] = run_denoiser(model, params, traj, 17);
  const double scale = std::max(base_eps.cwiseAbs().maxCoeff(), 1.0);

  for (int k = 0; k < 5; ++k) {
    RigidMotion g(random_rotation(mix_seed(23, k)),
                  Eigen::Vector3d(0.5 * k, -1.0, 2.0 - k));
    auto [eps, feats] = run_denoiser(model, params, apply_rigid_motion(traj, g), 17);
    CHECK((eps - apply_rotation(base_eps, g.rotation)).cwiseAbs().maxCoeff() / scale <=
          1e-8);
    CHECK((feats - base_feats).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("denoiser_forward: subspace mode output is CoM-free") {
  DenoiserModel model = small_model();
  ParamSet params;
  model.init_params(params, 31);
  GeometricTrajectory traj = random_traj(5, 4, 32);
  auto [eps, feats] = run_denoiser(model, params, traj, 9);
  CHECK(eps.colwise().mean().cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("denoiser_forward: permutation equivariance") {
  DenoiserModel model = small_model();
  ParamSet params;
  model.init_params(params, 41);
  const int nodes = 4, frames = 2;
  GeometricTrajectory traj = random_traj(nodes, frames, 42);

  const std::vector<int> perm{2, 0, 3, 1};  // new index of each old node
  Mat pf(nodes, 2);
  Mat pc(nodes * frames, 3);
  for (int n = 0; n < nodes; ++n) {
    pf.row(perm[n]) = traj.node_features.row(n);
    for (int t = 0; t < frames; ++t) {
      pc.row(perm[n] * frames + t) = traj.coords.row(n * frames + t);
    }
  }
  std::vector<Edge> pe;
  for (const Edge& e : traj.edges) pe.emplace_back(perm[e.first], perm[e.second]);
  GeometricTrajectory permuted(pf, pc, frames, pe);

  auto [eps, feats] = run_denoiser(model, params, traj, 5);
  auto [peps, pfeats] = run_denoiser(model, params, permuted, 5);
  for (int n = 0; n < nodes; ++n) {
    CHECK((pfeats.row(perm[n]) - feats.row(n)).cwiseAbs().maxCoeff() <= 1e-12);
    for (int t = 0; t < frames; ++t) {
      CHECK((peps.row(perm[n] * frames + t) - eps.row(n * frames + t))
                .cwiseAbs()
                .maxCoeff() <= 1e-12);
    }
  }
}

TEST_CASE("denoiser_forward: evaluation never mutates parameters") {
  DenoiserModel model = small_model();
  ParamSet params;
  model.init_params(params, 51);
  ParamSet before = params;
  GeometricTrajectory traj = random_traj(3, 2, 52);
  for (int i = 0; i < 3; ++i) run_denoiser(model, params, traj, 1 + i);
  for (const std::string& name : params.names()) {
    const Mat& a = before.at(name);
    const Mat& b = params.at(name);
    CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
  }
}

TEST_CASE("denoiser_forward: step out of range is rejected") {
  DenoiserModel model = small_model();
  ParamSet params;
  model.init_params(params, 61);
  GeometricTrajectory traj = random_traj(3, 2, 62);
  CHECK_THROWS_AS(run_denoiser(model, params, traj, 101), std::invalid_argument);
  CHECK_THROWS_AS(run_denoiser(model, params, traj, -1), std::invalid_argument);
}

TEST_CASE("denoiser_forward_cond: conditional scores are translation-invariant") {
  DenoiserModel model = small_model(2, 16, /*subspace=*/false);
  ParamSet params;
  model.init_params(params, 71);
  GeometricTrajectory traj = random_traj(3, 4, 72);
  Mat cond = Rng(73).normal_mat(3 * 2, 3);

  auto eval = [&](const Mat& coords, const Mat& cond_coords) {
    Tape tape;
    Bound bound(tape, params);
    DenoiserOut out = denoiser_forward_cond(bound, model,
                                            tape.constant(traj.node_features),
                                            tape.constant(coords), cond_coords, 2,
                                            traj.frames, traj.edges, 7);
    return tape.value(out.eps);
  };

  Mat base = eval(traj.coords, cond);
  CHECK(base.rows() == traj.coords.rows());

  RigidMotion g(random_rotation(74), Eigen::Vector3d(1.0, -2.0, 0.5));
  Mat moved = eval(apply_rigid_motion(traj.coords, g), apply_rigid_motion(cond, g));
  CHECK((moved - apply_rotation(base, g.rotation)).cwiseAbs().maxCoeff() /
            std::max(1.0, base.cwiseAbs().maxCoeff()) <=
        1e-8);
}
