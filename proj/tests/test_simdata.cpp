#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

#include "equiada/rng.hpp"
#include "equiada/simdata.hpp"

using namespace equiada;

namespace {

ParticleSystem two_particles(double q0, double q1, double separation) {
  ParticleSystem ps;
  ps.charges.resize(2);
  ps.charges << q0, q1;
  ps.positions = Mat::Zero(2, 3);
  ps.positions(0, 0) = -separation / 2;
  ps.positions(1, 0) = separation / 2;
  ps.velocities = Mat::Zero(2, 3);
  return ps;
}

std::string temp_path(const char* name) {
  return std::string("/tmp/equiada_test_") + name;
}

}  // namespace

TEST_CASE("coulomb_forces: opposite charges attract, like charges repel") {
  ParticleSystem attract = two_particles(+1.0, -1.0, 1.0);
  double d0 = (attract.positions.row(0) - attract.positions.row(1)).norm();
  for (int s = 0; s < 50; ++s) leapfrog_step(attract);
  double d1 = (attract.positions.row(0) - attract.positions.row(1)).norm();
  CHECK(d1 < d0);

  ParticleSystem repel = two_particles(+1.0, +1.0, 1.0);
  for (int s = 0; s < 50; ++s) leapfrog_step(repel);
  double d2 = (repel.positions.row(0) - repel.positions.row(1)).norm();
  CHECK(d2 > d0);
}

TEST_CASE("leapfrog: momentum is conserved to roundoff") {
  SimParams params;
  params.frames = 5;
  ParticleSystem ps = init_particle_system(params, 7);
  Eigen::Vector3d p0 = total_momentum(ps);
  for (int s = 0; s < 500; ++s) leapfrog_step(ps);
  CHECK((total_momentum(ps) - p0).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("leapfrog: energy drift below 1% over the simulated horizon") {
  SimParams params;
  ParticleSystem ps = init_particle_system(params, 11);
  const double e0 = total_energy(ps);
  double worst = 0.0;
  for (int s = 0; s < params.frames * params.substeps; ++s) {
    leapfrog_step(ps);
    worst = std::max(worst, std::abs(total_energy(ps) - e0));
  }
  CHECK(worst <= 0.01 * std::abs(e0));
}

TEST_CASE("simulate_charged: rotated initial conditions rotate the trajectory") {
  SimParams params;
  params.frames = 8;
  Eigen::Matrix3d r = random_rotation(13);

  ParticleSystem a = init_particle_system(params, 17);
  ParticleSystem b = a;
  b.positions = a.positions * r.transpose();
  b.velocities = a.velocities * r.transpose();

  for (int s = 0; s < 800; ++s) {
    leapfrog_step(a);
    leapfrog_step(b);
  }
  CHECK((b.positions - a.positions * r.transpose()).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("simulate_charged: record shape, one-hot charges, full edges") {
  SimParams params;
  params.particles = 4;
  params.frames = 6;
  TrajectoryRecord rec = simulate_charged(params, 19);
  CHECK(rec.frames == 6);
  CHECK(rec.node_features.rows() == 4);
  CHECK(rec.node_features.cols() == 2);
  for (int n = 0; n < 4; ++n) {
    CHECK(rec.node_features.row(n).sum() == 1.0);
  }
  CHECK(rec.coords.rows() == 24);
  CHECK(rec.edges.size() == 12);
  CHECK_THROWS_AS(simulate_charged(SimParams{1}, 3), std::invalid_argument);
}

TEST_CASE("simulate_charged: escape resampling is bounded") {
  SimParams params;
  params.frames = 4;
  params.escape_radius = 0.05;  // initial box positions already escape
  params.max_retries = 3;
  CHECK_THROWS_WITH_AS(simulate_charged(params, 43), doctest::Contains("escaped"),
                       std::runtime_error);
}

TEST_CASE("simulate_charged: deterministic for a fixed seed") {
  SimParams params;
  params.frames = 4;
  TrajectoryRecord a = simulate_charged(params, 23);
  TrajectoryRecord b = simulate_charged(params, 23);
  CHECK(std::memcmp(a.coords.data(), b.coords.data(), sizeof(double) * a.coords.size()) ==
        0);
}

TEST_CASE("make_dataset: full-scale defaults, toy sizes, disjoint seeds") {
  SimConfig defaults;
  CHECK(defaults.train == 3000);
  CHECK(defaults.val == 2000);
  CHECK(defaults.test == 2000);

  SimConfig toy;
  toy.params.frames = 3;
  toy.train = toy.val = toy.test = 1;
  toy.seed = 5;
  DatasetSplits splits = make_dataset(toy);
  CHECK(splits.train.size() == 1);
  CHECK(splits.val.size() == 1);
  CHECK(splits.test.size() == 1);
  CHECK(splits.train[0].split == "train");

  // Seed-set oracle: no record seed is reused across splits.
  std::set<std::uint64_t> seen;
  for (int split = 0; split < 3; ++split) {
    for (int i = 0; i < 500; ++i) {
      CHECK(seen.insert(record_seed(toy.seed, split, i)).second);
    }
  }
}

TEST_CASE("dataset io: write-then-read round trip is bitwise identical") {
  SimParams params;
  params.particles = 3;
  params.frames = 4;
  std::vector<TrajectoryRecord> records;
  records.push_back(simulate_charged(params, 29));
  records.push_back(simulate_charged(params, 31));

  const std::string path = temp_path("roundtrip.gada");
  write_dataset(path, records);
  std::vector<TrajectoryRecord> back = read_dataset(path);
  REQUIRE(back.size() == 2);
  for (int k = 0; k < 2; ++k) {
    CHECK(back[k].frames == records[k].frames);
    CHECK(std::memcmp(back[k].coords.data(), records[k].coords.data(),
                      sizeof(double) * records[k].coords.size()) == 0);
    CHECK(std::memcmp(back[k].node_features.data(), records[k].node_features.data(),
                      sizeof(double) * records[k].node_features.size()) == 0);
    CHECK(back[k].edges == records[k].edges);
  }
  std::remove(path.c_str());
}

TEST_CASE("dataset io: identical config writes bitwise-identical files") {
  SimConfig toy;
  toy.params.particles = 3;
  toy.params.frames = 3;
  toy.train = toy.val = toy.test = 2;
  toy.seed = 77;
  const std::string a = temp_path("det_a.gada");
  const std::string b = temp_path("det_b.gada");
  write_dataset(a, make_dataset(toy).train);
  write_dataset(b, make_dataset(toy).train);
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);
  std::remove(a.c_str());
  std::remove(b.c_str());
}

TEST_CASE("dataset io: truncation reports expected vs actual byte counts") {
  SimParams params;
  params.particles = 2;
  params.frames = 3;
  const std::string path = temp_path("trunc.gada");
  write_dataset(path, {simulate_charged(params, 37)});

  std::ifstream in(path, std::ios::binary);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(data.data(), static_cast<std::streamsize>(data.size() / 2));
  out.close();

  CHECK_THROWS_WITH_AS(read_dataset(path), doctest::Contains("truncated"),
                       std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("dataset io: corrupted magic bytes are a format error") {
  SimParams params;
  params.particles = 2;
  params.frames = 3;
  const std::string path = temp_path("magic.gada");
  write_dataset(path, {simulate_charged(params, 41)});
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(0);
    f.write("NOPE", 4);
  }
  CHECK_THROWS_WITH_AS(read_dataset(path), doctest::Contains("magic"),
                       std::runtime_error);
  std::remove(path.c_str());
}
