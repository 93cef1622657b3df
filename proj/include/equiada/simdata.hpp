#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "equiada/geometry.hpp"

namespace equiada {

/// Point charges under softened Coulomb forces, integrated with leapfrog.
struct ParticleSystem {
  Eigen::VectorXd charges;  // entries in {-1, +1}
  Mat positions;            // N x 3
  Mat velocities;           // N x 3
  double coupling = 1.0;    // kappa
  double softening = 0.1;
  double dt = 1e-3;
};

/// F_i = sum_j kappa q_i q_j (x_i - x_j) / (|x_i - x_j|^2 + softening)^(3/2)
Mat coulomb_forces(const ParticleSystem& ps);
/// One kick-drift-kick step.
void leapfrog_step(ParticleSystem& ps);
Eigen::Vector3d total_momentum(const ParticleSystem& ps);
double total_energy(const ParticleSystem& ps);

struct SimParams {
  int particles = 5;
  int frames = 35;
  double dt = 1e-3;
  int substeps = 100;  // integrator steps per saved frame
  double coupling = 1.0;
  double softening = 0.1;
  double box = 1.0;        // positions uniform in [-box, box]^3
  double vel_sigma = 0.5;
  double escape_radius = 8.0;
  int max_retries = 16;
};

/// One trajectory of a charged-particle dataset record.
struct TrajectoryRecord {
  Mat node_features;  // one-hot charge, N x 2
  Mat coords;         // (N * frames) x 3, node-major
  int frames = 0;
  std::vector<Edge> edges;  // fully connected, both directions
  std::string split;        // not serialized

  GeometricTrajectory trajectory() const;
};

/// Simulates one record. Runs that send a particle past the escape radius are
/// resampled with a derived seed; after max_retries the call fails.
TrajectoryRecord simulate_charged(const SimParams& params, std::uint64_t seed);

/// Deterministic initial conditions for a seed (exposed for oracles).
ParticleSystem init_particle_system(const SimParams& params, std::uint64_t seed);

struct SimConfig {
  SimParams params;
  int train = 3000;
  int val = 2000;
  int test = 2000;
  std::uint64_t seed = 0;
};

struct DatasetSplits {
  std::vector<TrajectoryRecord> train, val, test;
};

/// Split seeds are derived from disjoint streams of the base seed.
std::uint64_t record_seed(std::uint64_t base, int split, int index);
DatasetSplits make_dataset(const SimConfig& config);

/// Binary dataset file: magic "GADA", u32 version, u32 record count, then per
/// record N, T, H (u32), features (N*H f64), coords (N*T*3 f64), edge count
/// (u32) and edge pairs (2 x u32). Everything little-endian.
void write_dataset(const std::string& path, const std::vector<TrajectoryRecord>& records);
std::vector<TrajectoryRecord> read_dataset(const std::string& path);

}  // namespace equiada
