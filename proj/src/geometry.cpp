#include "equiada/geometry.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "equiada/rng.hpp"

namespace equiada {

namespace {

void check_edges(const std::vector<Edge>& edges, int nodes) {
  for (const Edge& e : edges) {
    if (e.first < 0 || e.first >= nodes || e.second < 0 || e.second >= nodes) {
      std::ostringstream os;
      os << "edge (" << e.first << ", " << e.second << ") out of range for " << nodes
         << " nodes";
      throw std::invalid_argument(os.str());
    }
    if (e.first == e.second) {
      throw std::invalid_argument("self-loop edge (" + std::to_string(e.first) + ")");
    }
  }
}

void check_finite(const Mat& m, const char* what) {
  if (!m.allFinite()) {
    throw std::invalid_argument(std::string(what) + ": non-finite values");
  }
}

}  // namespace

GeometricGraph::GeometricGraph(Mat features, Mat coordinates, std::vector<Edge> edge_list)
    : node_features(std::move(features)),
      coords(std::move(coordinates)),
      edges(std::move(edge_list)) {
  if (node_features.cols() < 1) throw std::invalid_argument("graph: feature dim must be > 0");
  if (coords.rows() != node_features.rows() || coords.cols() != 3) {
    throw std::invalid_argument("graph: coords must be N x 3");
  }
  check_finite(node_features, "graph features");
  check_finite(coords, "graph coords");
  check_edges(edges, nodes());
}

GeometricTrajectory::GeometricTrajectory(Mat features, Mat coordinates, int frame_count,
                                         std::vector<Edge> edge_list)
    : node_features(std::move(features)),
      coords(std::move(coordinates)),
      frames(frame_count),
      edges(std::move(edge_list)) {
  if (frames < 1) throw std::invalid_argument("trajectory: frame count must be >= 1");
  if (node_features.cols() < 1) {
    throw std::invalid_argument("trajectory: feature dim must be > 0");
  }
  if (coords.cols() != 3 ||
      coords.rows() != static_cast<long>(node_features.rows()) * frames) {
    throw std::invalid_argument("trajectory: coords must be (N*T) x 3");
  }
  check_finite(node_features, "trajectory features");
  check_finite(coords, "trajectory coords");
  check_edges(edges, nodes());
}

GeometricTrajectory GeometricTrajectory::from_graph(const GeometricGraph& g) {
  return GeometricTrajectory(g.node_features, g.coords, 1, g.edges);
}

Mat GeometricTrajectory::frame(int t) const {
  if (t < 0 || t >= frames) throw std::invalid_argument("trajectory: frame out of range");
  Mat f(nodes(), 3);
  for (int n = 0; n < nodes(); ++n) f.row(n) = coords.row(coord_row(n, t));
  return f;
}

RigidMotion::RigidMotion(const Eigen::Matrix3d& r, const Eigen::Vector3d& d)
    : rotation(r), translation(d) {
  const double ortho = (r.transpose() * r - Eigen::Matrix3d::Identity())
                           .cwiseAbs()
                           .maxCoeff();
  if (ortho > 1e-10) {
    throw std::invalid_argument("RigidMotion: rotation is not orthogonal");
  }
  if (std::abs(r.determinant() - 1.0) > 1e-10) {
    throw std::invalid_argument("RigidMotion: rotation determinant is not +1");
  }
}

RigidMotion RigidMotion::identity() {
  return RigidMotion(Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero());
}

RigidMotion RigidMotion::after(const RigidMotion& first) const {
  return RigidMotion(rotation * first.rotation,
                     rotation * first.translation + translation);
}

Eigen::Vector3d RigidMotion::apply(const Eigen::Vector3d& x) const {
  return rotation * x + translation;
}

Mat apply_rigid_motion(const Mat& coords, const RigidMotion& g) {
  Mat out = coords * g.rotation.transpose();
  out.rowwise() += g.translation.transpose();
  return out;
}

GeometricTrajectory apply_rigid_motion(const GeometricTrajectory& traj,
                                       const RigidMotion& g) {
  GeometricTrajectory out = traj;
  out.coords = apply_rigid_motion(traj.coords, g);
  return out;
}

Mat apply_rotation(const Mat& coords, const Eigen::Matrix3d& r) {
  return coords * r.transpose();
}

Eigen::Matrix3d random_rotation(std::uint64_t seed) {
  Rng rng(seed);
  Eigen::Matrix3d a = rng.normal_mat(3, 3);
  Eigen::HouseholderQR<Eigen::Matrix3d> qr(a);
  Eigen::Matrix3d q = qr.householderQ();
  Eigen::Matrix3d r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int i = 0; i < 3; ++i) {
    if (r(i, i) < 0.0) q.col(i) = -q.col(i);
  }
  if (q.determinant() < 0.0) q.col(2) = -q.col(2);
  return q;
}

Eigen::Vector3d center_of_mass(const Mat& coords) {
  if (coords.rows() == 0) throw std::invalid_argument("center_of_mass: empty node set");
  if (coords.cols() != 3) throw std::invalid_argument("center_of_mass: expected 3 columns");
  return coords.colwise().mean().transpose();
}

Mat com_project(const Mat& coords) {
  if (coords.rows() == 0) throw std::invalid_argument("com_project: empty input");
  Mat out = coords;
  out.rowwise() -= coords.colwise().mean();
  return out;
}

Eigen::VectorXd pairwise_sq_dist(const Mat& coords_frame, const std::vector<Edge>& edges) {
  check_edges(edges, static_cast<int>(coords_frame.rows()));
  Eigen::VectorXd out(edges.size());
  for (std::size_t k = 0; k < edges.size(); ++k) {
    out(k) = (coords_frame.row(edges[k].first) - coords_frame.row(edges[k].second))
                 .squaredNorm();
  }
  return out;
}

}  // namespace equiada
