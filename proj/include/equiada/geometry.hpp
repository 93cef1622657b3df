#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "equiada/tensor.hpp"

namespace equiada {

using Edge = std::pair<int, int>;

/// Static geometric graph: per-node features (N x H), coordinates (N x 3) and
/// a directed edge list. Undirected graphs store both directions.
struct GeometricGraph {
  Mat node_features;
  Mat coords;
  std::vector<Edge> edges;

  GeometricGraph() = default;
  GeometricGraph(Mat features, Mat coordinates, std::vector<Edge> edge_list);

  int nodes() const { return static_cast<int>(node_features.rows()); }
  int feature_dim() const { return static_cast<int>(node_features.cols()); }
};

/// Trajectory over T frames. Coordinates are stored node-major as an
/// (N*T) x 3 matrix: row n*T + t holds node n at frame t. A GeometricGraph
/// is the T = 1 special case.
struct GeometricTrajectory {
  Mat node_features;
  Mat coords;
  int frames = 1;
  std::vector<Edge> edges;

  GeometricTrajectory() = default;
  GeometricTrajectory(Mat features, Mat coordinates, int frame_count,
                      std::vector<Edge> edge_list);
  static GeometricTrajectory from_graph(const GeometricGraph& g);

  int nodes() const { return static_cast<int>(node_features.rows()); }
  int feature_dim() const { return static_cast<int>(node_features.cols()); }
  int coord_row(int node, int frame) const { return node * frames + frame; }
  /// Coordinates of one frame as an N x 3 matrix.
  Mat frame(int t) const;
};

/// Rotation + translation with det(R) = +1. Validated at construction.
struct RigidMotion {
  Eigen::Matrix3d rotation;
  Eigen::Vector3d translation;

  RigidMotion(const Eigen::Matrix3d& r, const Eigen::Vector3d& d);
  static RigidMotion identity();
  /// Motion equal to applying `first`, then `*this`.
  RigidMotion after(const RigidMotion& first) const;
  Eigen::Vector3d apply(const Eigen::Vector3d& x) const;
};

/// Maps every coordinate row x -> R x + d. Features and edges untouched.
Mat apply_rigid_motion(const Mat& coords, const RigidMotion& g);
GeometricTrajectory apply_rigid_motion(const GeometricTrajectory& traj,
                                       const RigidMotion& g);
/// Rotation only, for vector-valued (displacement) rows.
Mat apply_rotation(const Mat& coords, const Eigen::Matrix3d& r);

/// Haar-uniform rotation from the QR decomposition of a Gaussian 3x3 matrix
/// with sign-fixed diagonal; determinant forced to +1 by negating a column.
Eigen::Matrix3d random_rotation(std::uint64_t seed);

/// Arithmetic mean of the rows. Throws on an empty input.
Eigen::Vector3d center_of_mass(const Mat& coords);

/// Removes the joint mean over all (node, frame) rows; the image of the
/// translation-invariant projection P.
Mat com_project(const Mat& coords);

/// Per-edge squared distances within one frame (N x 3 coordinates).
Eigen::VectorXd pairwise_sq_dist(const Mat& coords_frame, const std::vector<Edge>& edges);

}  // namespace equiada
