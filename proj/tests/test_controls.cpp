#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "equiada/backbone.hpp"
#include "equiada/controls.hpp"
#include "equiada/rng.hpp"

using namespace equiada;

namespace {

GeometricTrajectory probe_traj(int nodes, int frames, std::uint64_t seed) {
  Rng rng(seed);
  Mat feats = Mat::Zero(nodes, 2);
  for (int n = 0; n < nodes; ++n) feats(n, n % 2) = 1.0;
  std::vector<Edge> edges;
  for (int i = 0; i < nodes; ++i) {
    for (int j = 0; j < nodes; ++j) {
      if (i != j) edges.emplace_back(i, j);
    }
  }
  return GeometricTrajectory(feats, rng.normal_mat(nodes * frames, 3), frames, edges);
}

struct EquivariantFixture {
  DenoiserModel model;
  ParamSet params;

  explicit EquivariantFixture(std::uint64_t seed, bool subspace = false) {
    model.prefix = "base";
    model.cfg.layers = 2;
    model.cfg.hidden = 12;
    model.cfg.time_dim = 8;
    model.cfg.feature_dim = 2;
    model.cfg.max_step = 10;
    model.cfg.subspace = subspace;
    model.init_params(params, seed);
  }

  DenoiserFn fn() const {
    return [this](const GeometricTrajectory& traj, int tau) {
      Tape tape;
      Bound bound(tape, params);
      DenoiserOut out = denoiser_forward(bound, model, traj, tau);
      return std::make_pair(tape.value(out.eps), tape.value(out.feats));
    };
  }

  /// Breaks equivariance by leaking absolute coordinates into the score.
  DenoiserFn broken_fn() const {
    return [this](const GeometricTrajectory& traj, int tau) {
      Tape tape;
      Bound bound(tape, params);
      DenoiserOut out = denoiser_forward(bound, model, traj, tau);
      Mat eps = tape.value(out.eps) + traj.coords;
      return std::make_pair(eps, Mat(tape.value(out.feats)));
    };
  }
};

Mlp test_encoder() { return Mlp{"enc", {3, 8, 2}}; }

ParamSet encoder_params(std::uint64_t seed, bool zero = false) {
  ParamSet params;
  Rng rng(seed);
  test_encoder().init(params, rng);
  if (zero) {
    for (const std::string& name : params.names()) params.mutable_at(name).setZero();
  }
  return params;
}

}  // namespace

TEST_CASE("couple global: zero-initialized encoder is the identity") {
  GeometricTrajectory traj = probe_traj(4, 3, 1);
  ParamSet enc = encoder_params(2, /*zero=*/true);
  Mlp mlp = test_encoder();
  Control control = GlobalControl{Eigen::Vector3d(1.0, 0.0, 0.0)};
  CoupledTrajectory out = couple(traj, control, &enc, &mlp);
  CHECK((out.traj.node_features - traj.node_features).cwiseAbs().maxCoeff() == 0.0);
  CHECK((out.traj.coords - traj.coords).cwiseAbs().maxCoeff() == 0.0);
  CHECK(out.traj.edges.size() == traj.edges.size());
}

TEST_CASE("couple global: features shift by the lifted control") {
  GeometricTrajectory traj = probe_traj(3, 2, 3);
  ParamSet enc = encoder_params(4);
  Mlp mlp = test_encoder();
  Eigen::VectorXd c(3);
  c << 0.2, -1.0, 0.5;
  CoupledTrajectory out = couple(traj, GlobalControl{c}, &enc, &mlp);
  Mat lifted = mlp.eval(enc, c.transpose());
  for (int n = 0; n < 3; ++n) {
    CHECK((out.traj.node_features.row(n) - traj.node_features.row(n) - lifted.row(0))
              .cwiseAbs()
              .maxCoeff() <= 1e-15);
  }

  // Global decoupling is the identity.
  auto [coords, feats] = decouple(out.traj.coords, out.traj.node_features, out.record);
  CHECK((coords - out.traj.coords).cwiseAbs().maxCoeff() == 0.0);
  CHECK((feats - out.traj.node_features).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("couple global: missing encoder is an error") {
  GeometricTrajectory traj = probe_traj(2, 2, 5);
  CHECK_THROWS_AS(couple(traj, GlobalControl{Eigen::Vector3d::Ones()}, nullptr, nullptr),
                  std::invalid_argument);
}

TEST_CASE("couple subgraph: empty control is the identity with an all-node record") {
  GeometricTrajectory traj = probe_traj(3, 2, 6);
  GeometricGraph empty(Mat(0, 2), Mat(0, 3), {});
  CoupledTrajectory out = couple(traj, SubgraphControl{empty, {}});
  CHECK(out.traj.nodes() == 3);
  CHECK((out.traj.coords - traj.coords).cwiseAbs().maxCoeff() == 0.0);
  CHECK(out.record.keep_node_rows.size() == 3);
}

TEST_CASE("couple subgraph: supergraph union with default cross-edges") {
  GeometricTrajectory traj = probe_traj(3, 2, 7);
  Rng rng(8);
  GeometricGraph ctrl(Mat::Ones(2, 2), rng.normal_mat(2, 3), {{0, 1}, {1, 0}});
  CoupledTrajectory out = couple(traj, SubgraphControl{ctrl, {}});

  CHECK(out.traj.nodes() == 5);
  CHECK(out.traj.frames == 2);
  // input edges + control edges (offset) + full bipartite cross edges x2
  CHECK(out.traj.edges.size() == traj.edges.size() + 2 + 2 * 2 * 3);
  // control coordinates replicate across frames
  for (int c = 0; c < 2; ++c) {
    for (int t = 0; t < 2; ++t) {
      CHECK((out.traj.coords.row((3 + c) * 2 + t) - ctrl.coords.row(c))
                .cwiseAbs()
                .maxCoeff() == 0.0);
    }
  }

  // Decoupling selects the original node rows, in order.
  Rng rng2(9);
  Mat fake_coords = rng2.normal_mat(10, 3);
  Mat fake_feats = rng2.normal_mat(5, 4);
  auto [coords, feats] = decouple(fake_coords, fake_feats, out.record);
  CHECK(coords.rows() == 6);
  CHECK((coords - fake_coords.topRows(6)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((feats - fake_feats.topRows(3)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("couple subgraph: declared cross-edges are honored both ways") {
  GeometricTrajectory traj = probe_traj(3, 1, 10);
  GeometricGraph ctrl(Mat::Ones(2, 2), Rng(11).normal_mat(2, 3), {});
  CoupledTrajectory out = couple(traj, SubgraphControl{ctrl, {{1, 0}}});
  CHECK(out.traj.edges.size() == traj.edges.size() + 2);
  CHECK(out.traj.edges[traj.edges.size()] == Edge{1, 3});
  CHECK(out.traj.edges[traj.edges.size() + 1] == Edge{3, 1});
}

TEST_CASE("couple subgraph: feature dimension mismatch names the variant") {
  GeometricTrajectory traj = probe_traj(2, 1, 12);
  GeometricGraph ctrl(Mat::Ones(1, 5), Mat::Zero(1, 3), {});
  CHECK_THROWS_WITH_AS(couple(traj, SubgraphControl{ctrl, {}}),
                       doctest::Contains("subgraph"), std::invalid_argument);
}

TEST_CASE("couple frame: prefix concatenation and bitwise round trip") {
  GeometricTrajectory traj = probe_traj(3, 2, 13);  // T = 2
  Mat ctrl_frames = Rng(14).normal_mat(3 * 3, 3);   // T~ = 3
  CoupledTrajectory out = couple(traj, FrameControl{ctrl_frames, 3, /*prefix=*/true});
  CHECK(out.traj.frames == 5);
  CHECK(out.traj.nodes() == 3);
  for (int n = 0; n < 3; ++n) {
    for (int t = 0; t < 3; ++t) {
      CHECK((out.traj.coords.row(n * 5 + t) - ctrl_frames.row(n * 3 + t))
                .cwiseAbs()
                .maxCoeff() == 0.0);
    }
    for (int t = 0; t < 2; ++t) {
      CHECK((out.traj.coords.row(n * 5 + 3 + t) - traj.coords.row(n * 2 + t))
                .cwiseAbs()
                .maxCoeff() == 0.0);
    }
  }

  // decouple(couple(x)) returns exactly the original frames, bitwise.
  auto [coords, feats] = decouple(out.traj.coords, out.traj.node_features, out.record);
  CHECK((coords - traj.coords).cwiseAbs().maxCoeff() == 0.0);
  CHECK((feats - traj.node_features).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("couple frame: suffix placement keeps original frames first") {
  GeometricTrajectory traj = probe_traj(2, 2, 15);
  Mat ctrl_frames = Rng(16).normal_mat(2 * 1, 3);
  CoupledTrajectory out = couple(traj, FrameControl{ctrl_frames, 1, /*prefix=*/false});
  CHECK(out.traj.frames == 3);
  for (int n = 0; n < 2; ++n) {
    CHECK((out.traj.coords.row(n * 3 + 2) - ctrl_frames.row(n)).cwiseAbs().maxCoeff() ==
          0.0);
  }
  auto [coords, feats] = decouple(out.traj.coords, out.traj.node_features, out.record);
  CHECK((coords - traj.coords).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("couple frame: node-count mismatch is an error") {
  GeometricTrajectory traj = probe_traj(3, 2, 17);
  Mat wrong = Rng(18).normal_mat(2 * 2, 3);  // 2 nodes, input has 3
  CHECK_THROWS_WITH_AS(couple(traj, FrameControl{wrong, 2}),
                       doctest::Contains("frame control"), std::invalid_argument);
}

TEST_CASE("decouple: record/output shape mismatch is an error") {
  GeometricTrajectory traj = probe_traj(2, 2, 19);
  CoupledTrajectory out = couple(traj, FrameControl{Rng(20).normal_mat(2, 3), 1});
  Mat bad = Mat::Zero(3, 3);
  CHECK_THROWS_AS(decouple(bad, traj.node_features, out.record), std::invalid_argument);
}

TEST_CASE("round trip: decoupled output has the denoiser-on-input shape (all variants)") {
  GeometricTrajectory traj = probe_traj(3, 2, 21);
  ParamSet enc = encoder_params(22);
  Mlp mlp = test_encoder();
  GeometricGraph ctrl(Mat::Ones(2, 2), Rng(23).normal_mat(2, 3), {{0, 1}, {1, 0}});

  std::vector<Control> controls;
  controls.push_back(GlobalControl{Eigen::Vector3d(0.0, 1.0, 0.0)});
  controls.push_back(SubgraphControl{ctrl, {}});
  controls.push_back(FrameControl{Rng(24).normal_mat(3 * 2, 3), 2});

  EquivariantFixture fx(25);
  for (const Control& control : controls) {
    CoupledTrajectory coupled = couple(traj, control, &enc, &mlp);
    auto [eps, feats] = fx.fn()(coupled.traj, 3);
    auto [dc, df] = decouple(eps, feats, coupled.record);
    CHECK(dc.rows() == traj.coords.rows());
    CHECK(dc.cols() == 3);
    CHECK(df.rows() == traj.nodes());
  }
}

TEST_CASE("audit_proposition1: equivariant denoiser passes for every variant") {
  GeometricTrajectory traj = probe_traj(3, 2, 31);
  EquivariantFixture fx(32);
  ParamSet enc = encoder_params(33);
  Mlp mlp = test_encoder();

  AuditReport g = audit_proposition1(fx.fn(), traj,
                                     GlobalControl{Eigen::Vector3d(1.0, 0.5, -0.5)}, 2,
                                     20, 1e-8, 34, &enc, &mlp);
  CHECK(g.passed);
  CHECK(g.max_deviation <= 1e-8);

  GeometricGraph ctrl(Mat::Ones(2, 2), Rng(35).normal_mat(2, 3), {{0, 1}, {1, 0}});
  AuditReport s = audit_proposition1(fx.fn(), traj, SubgraphControl{ctrl, {}}, 2, 20,
                                     1e-8, 36);
  CHECK(s.passed);

  AuditReport f = audit_proposition1(fx.fn(), traj,
                                     FrameControl{Rng(37).normal_mat(3 * 2, 3), 2}, 2, 20,
                                     1e-8, 38);
  CHECK(f.passed);
}

TEST_CASE("audit_proposition1: identity motion gives zero deviation") {
  GeometricTrajectory traj = probe_traj(2, 2, 41);
  EquivariantFixture fx(42);
  // A single trial whose rigid motion is forced to the identity via the
  // composition check on the unmoved input: run the audit machinery manually.
  Control control = FrameControl{Rng(43).normal_mat(2 * 2, 3), 2};
  CoupledTrajectory coupled = couple(traj, control);
  auto [eps, feats] = fx.fn()(coupled.traj, 1);
  auto [a, af] = decouple(eps, feats, coupled.record);
  auto [eps2, feats2] = fx.fn()(coupled.traj, 1);
  auto [b, bf] = decouple(eps2, feats2, coupled.record);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  CHECK((af - bf).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("audit_proposition1: broken denoiser fails the audit") {
  GeometricTrajectory traj = probe_traj(3, 2, 51);
  EquivariantFixture fx(52);
  AuditReport report = audit_proposition1(
      fx.broken_fn(), traj, FrameControl{Rng(53).normal_mat(3 * 2, 3), 2}, 2, 20, 1e-8,
      54);
  CHECK_FALSE(report.passed);
  CHECK(report.max_deviation > 1e-8);
  CHECK(report.worst_seed != 0);
}

TEST_CASE("audit_equivariance: passes for the base, fails for the broken fixture") {
  GeometricTrajectory traj = probe_traj(3, 2, 61);
  EquivariantFixture fx(62, /*subspace=*/true);
  AuditReport ok = audit_equivariance(fx.fn(), traj, 10, 20, 1e-8, 63);
  CHECK(ok.passed);
  AuditReport bad = audit_equivariance(fx.broken_fn(), traj, 10, 20, 1e-8, 64);
  CHECK_FALSE(bad.passed);
}

TEST_CASE("transform_control: moves subgraph and frame geometry, not global signals") {
  RigidMotion g(random_rotation(71), Eigen::Vector3d(1.0, 2.0, 3.0));

  GlobalControl gc{Eigen::Vector3d(1.0, 0.0, 0.0)};
  Control moved = transform_control(gc, g);
  CHECK((std::get<GlobalControl>(moved).signal - gc.signal).cwiseAbs().maxCoeff() == 0.0);

  Mat frames = Rng(72).normal_mat(4, 3);
  Control fmoved = transform_control(FrameControl{frames, 2}, g);
  CHECK((std::get<FrameControl>(fmoved).coords - apply_rigid_motion(frames, g))
            .cwiseAbs()
            .maxCoeff() == 0.0);
}
