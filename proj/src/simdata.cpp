#include "equiada/simdata.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "equiada/rng.hpp"

namespace equiada {

Mat coulomb_forces(const ParticleSystem& ps) {
  const int n = static_cast<int>(ps.positions.rows());
  Mat f = Mat::Zero(n, 3);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      Eigen::RowVector3d rel = ps.positions.row(i) - ps.positions.row(j);
      const double d2 = rel.squaredNorm() + ps.softening;
      Eigen::RowVector3d fij =
          ps.coupling * ps.charges(i) * ps.charges(j) * rel / std::pow(d2, 1.5);
      f.row(i) += fij;
      f.row(j) -= fij;
    }
  }
  return f;
}

void leapfrog_step(ParticleSystem& ps) {
  Mat f = coulomb_forces(ps);
  ps.velocities += 0.5 * ps.dt * f;
  ps.positions += ps.dt * ps.velocities;
  f = coulomb_forces(ps);
  ps.velocities += 0.5 * ps.dt * f;
}

Eigen::Vector3d total_momentum(const ParticleSystem& ps) {
  return ps.velocities.colwise().sum().transpose();
}

double total_energy(const ParticleSystem& ps) {
  double e = 0.5 * ps.velocities.squaredNorm();
  const int n = static_cast<int>(ps.positions.rows());
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double d2 =
          (ps.positions.row(i) - ps.positions.row(j)).squaredNorm() + ps.softening;
      e += ps.coupling * ps.charges(i) * ps.charges(j) / std::sqrt(d2);
    }
  }
  return e;
}

ParticleSystem init_particle_system(const SimParams& params, std::uint64_t seed) {
  Rng rng(seed);
  ParticleSystem ps;
  ps.coupling = params.coupling;
  ps.softening = params.softening;
  ps.dt = params.dt;
  ps.charges.resize(params.particles);
  for (int i = 0; i < params.particles; ++i) {
    ps.charges(i) = rng.uniform() < 0.5 ? -1.0 : 1.0;
  }
  ps.positions.resize(params.particles, 3);
  for (int i = 0; i < params.particles; ++i) {
    for (int c = 0; c < 3; ++c) ps.positions(i, c) = params.box * (2.0 * rng.uniform() - 1.0);
  }
  ps.velocities = rng.normal_mat(params.particles, 3, params.vel_sigma);
  return ps;
}

namespace {

std::vector<Edge> fully_connected(int n) {
  std::vector<Edge> edges;
  edges.reserve(static_cast<std::size_t>(n) * (n - 1));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i != j) edges.emplace_back(i, j);
    }
  }
  return edges;
}

bool run_simulation(const SimParams& params, std::uint64_t seed, TrajectoryRecord& out) {
  ParticleSystem ps = init_particle_system(params, seed);
  const int n = params.particles;

  Mat coords(n * params.frames, 3);
  for (int t = 0; t < params.frames; ++t) {
    if (t > 0) {
      for (int s = 0; s < params.substeps; ++s) leapfrog_step(ps);
    }
    if (ps.positions.cwiseAbs().maxCoeff() > params.escape_radius) return false;
    for (int i = 0; i < n; ++i) coords.row(i * params.frames + t) = ps.positions.row(i);
  }

  Mat features = Mat::Zero(n, 2);
  for (int i = 0; i < n; ++i) features(i, ps.charges(i) > 0 ? 0 : 1) = 1.0;

  out.node_features = std::move(features);
  out.coords = std::move(coords);
  out.frames = params.frames;
  out.edges = fully_connected(n);
  return true;
}

}  // namespace

GeometricTrajectory TrajectoryRecord::trajectory() const {
  return GeometricTrajectory(node_features, coords, frames, edges);
}

TrajectoryRecord simulate_charged(const SimParams& params, std::uint64_t seed) {
  if (params.particles < 2) {
    throw std::invalid_argument("simulate_charged: need at least two particles");
  }
  TrajectoryRecord record;
  for (int attempt = 0; attempt <= params.max_retries; ++attempt) {
    const std::uint64_t s = attempt == 0 ? seed : mix_seed(seed, 0x72657472ULL, attempt);
    if (run_simulation(params, s, record)) return record;
  }
  throw std::runtime_error("simulate_charged: particle escaped in every retry for seed " +
                           std::to_string(seed));
}

std::uint64_t record_seed(std::uint64_t base, int split, int index) {
  return mix_seed(base, 0x73706c30ULL + static_cast<std::uint64_t>(split), index);
}

DatasetSplits make_dataset(const SimConfig& config) {
  if (config.train < 1 || config.val < 1 || config.test < 1) {
    throw std::invalid_argument("make_dataset: split sizes must be >= 1");
  }
  DatasetSplits out;
  auto fill = [&](std::vector<TrajectoryRecord>& dst, int split, int count,
                  const char* tag) {
    dst.reserve(count);
    for (int i = 0; i < count; ++i) {
      TrajectoryRecord r = simulate_charged(config.params, record_seed(config.seed, split, i));
      r.split = tag;
      dst.push_back(std::move(r));
    }
  };
  fill(out.train, 0, config.train, "train");
  fill(out.val, 1, config.val, "val");
  fill(out.test, 2, config.test, "test");
  return out;
}

namespace {

constexpr char kMagic[4] = {'G', 'A', 'D', 'A'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& data, const std::string& path) : data_(data), path_(path) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i]))
              << (8 * i);
    }
    pos_ += 8;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  void raw(char* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }

  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) {
    if (pos_ + n > data_.size()) {
      std::ostringstream os;
      os << path_ << ": truncated dataset file (expected at least " << (pos_ + n)
         << " bytes, got " << data_.size() << ")";
      throw std::runtime_error(os.str());
    }
  }

  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_dataset(const std::string& path, const std::vector<TrajectoryRecord>& records) {
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(records.size()));
  for (const TrajectoryRecord& r : records) {
    const std::uint32_t n = static_cast<std::uint32_t>(r.node_features.rows());
    const std::uint32_t t = static_cast<std::uint32_t>(r.frames);
    const std::uint32_t h = static_cast<std::uint32_t>(r.node_features.cols());
    put_u32(buf, n);
    put_u32(buf, t);
    put_u32(buf, h);
    for (std::uint32_t i = 0; i < n; ++i) {
      for (std::uint32_t c = 0; c < h; ++c) put_f64(buf, r.node_features(i, c));
    }
    for (long i = 0; i < r.coords.rows(); ++i) {
      for (int c = 0; c < 3; ++c) put_f64(buf, r.coords(i, c));
    }
    put_u32(buf, static_cast<std::uint32_t>(r.edges.size()));
    for (const Edge& e : r.edges) {
      put_u32(buf, static_cast<std::uint32_t>(e.first));
      put_u32(buf, static_cast<std::uint32_t>(e.second));
    }
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw std::runtime_error("write_dataset: cannot open " + path);
  file.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!file) throw std::runtime_error("write_dataset: write failed for " + path);
}

std::vector<TrajectoryRecord> read_dataset(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("read_dataset: cannot open " + path);
  std::ostringstream ss;
  ss << file.rdbuf();
  const std::string data = ss.str();

  Reader in(data, path);
  char magic[4];
  in.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error(path + ": bad magic bytes, not a GADA dataset");
  }
  const std::uint32_t version = in.u32();
  if (version != kVersion) {
    throw std::runtime_error(path + ": unsupported dataset version " +
                             std::to_string(version));
  }
  const std::uint32_t count = in.u32();
  std::vector<TrajectoryRecord> records;
  records.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    TrajectoryRecord r;
    const std::uint32_t n = in.u32();
    const std::uint32_t t = in.u32();
    const std::uint32_t h = in.u32();
    r.frames = static_cast<int>(t);
    r.node_features.resize(n, h);
    for (std::uint32_t i = 0; i < n; ++i) {
      for (std::uint32_t c = 0; c < h; ++c) r.node_features(i, c) = in.f64();
    }
    r.coords.resize(static_cast<long>(n) * t, 3);
    for (long i = 0; i < r.coords.rows(); ++i) {
      for (int c = 0; c < 3; ++c) r.coords(i, c) = in.f64();
    }
    const std::uint32_t edge_count = in.u32();
    r.edges.reserve(edge_count);
    for (std::uint32_t e = 0; e < edge_count; ++e) {
      const int a = static_cast<int>(in.u32());
      const int b = static_cast<int>(in.u32());
      r.edges.emplace_back(a, b);
    }
    if (!r.node_features.allFinite() || !r.coords.allFinite()) {
      throw std::runtime_error(path + ": non-finite values in record " + std::to_string(k));
    }
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace equiada
