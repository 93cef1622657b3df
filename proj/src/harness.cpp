#include "equiada/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace equiada {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: boolean expected for " + key + ", got " + v);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream ss;
  ss << file.rdbuf();
  return from_text(ss.str(), path);
}

RunConfig RunConfig::from_text(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                  ": expected key = value");
    }
    cfg.set(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
  }
  return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto as_int = [&]() { return std::stoi(value); };
  auto as_u64 = [&]() { return static_cast<std::uint64_t>(std::stoull(value)); };
  auto as_double = [&]() { return std::stod(value); };

  if (key == "task") {
    if (value != "uncond" && value != "cond") {
      throw std::invalid_argument("config: task must be uncond or cond");
    }
    task = value;
  } else if (key == "seed") seed = as_u64();
  else if (key == "sim_particles") sim_particles = as_int();
  else if (key == "sim_frames") sim_frames = as_int();
  else if (key == "sim_dt") sim_dt = as_double();
  else if (key == "sim_substeps") sim_substeps = as_int();
  else if (key == "sim_coupling") sim_coupling = as_double();
  else if (key == "sim_softening") sim_softening = as_double();
  else if (key == "sim_box") sim_box = as_double();
  else if (key == "sim_vel_sigma") sim_vel_sigma = as_double();
  else if (key == "sim_train") sim_train = as_int();
  else if (key == "sim_val") sim_val = as_int();
  else if (key == "sim_test") sim_test = as_int();
  else if (key == "n_layer") n_layer = as_int();
  else if (key == "hidden") hidden = as_int();
  else if (key == "time_emb_dim") time_emb_dim = as_int();
  else if (key == "diffusion_steps") diffusion_steps = as_int();
  else if (key == "beta_start") beta_start = as_double();
  else if (key == "beta_end") beta_end = as_double();
  else if (key == "schedule_increasing") schedule_increasing = parse_bool(value, key);
  else if (key == "batch_size") batch_size = as_int();
  else if (key == "steps") steps = as_int();
  else if (key == "learning_rate") learning_rate = as_double();
  else if (key == "val_every") val_every = as_int();
  else if (key == "cond_frames") cond_frames = as_int();
  else if (key == "pred_frames") pred_frames = as_int();
  else if (key == "adapter_blocks") adapter_blocks = as_int();
  else if (key == "adapter_strategy") adapter_strategy = value;
  else if (key == "control_variant") control_variant = value;
  else if (key == "ablation") ablation = value;
  else if (key == "eval_samples") eval_samples = as_int();
  else throw std::invalid_argument("config: unknown key " + key);
}

std::map<std::string, std::string> RunConfig::echo() const {
  std::map<std::string, std::string> m;
  m["task"] = task;
  m["seed"] = std::to_string(seed);
  m["sim_particles"] = std::to_string(sim_particles);
  m["sim_frames"] = std::to_string(sim_frames);
  m["sim_dt"] = fmt(sim_dt);
  m["sim_substeps"] = std::to_string(sim_substeps);
  m["sim_coupling"] = fmt(sim_coupling);
  m["sim_softening"] = fmt(sim_softening);
  m["sim_box"] = fmt(sim_box);
  m["sim_vel_sigma"] = fmt(sim_vel_sigma);
  m["sim_train"] = std::to_string(sim_train);
  m["sim_val"] = std::to_string(sim_val);
  m["sim_test"] = std::to_string(sim_test);
  m["n_layer"] = std::to_string(n_layer);
  m["hidden"] = std::to_string(hidden);
  m["time_emb_dim"] = std::to_string(time_emb_dim);
  m["diffusion_steps"] = std::to_string(diffusion_steps);
  m["beta_start"] = fmt(beta_start);
  m["beta_end"] = fmt(beta_end);
  m["schedule_increasing"] = schedule_increasing ? "true" : "false";
  m["batch_size"] = std::to_string(batch_size);
  m["steps"] = std::to_string(steps);
  m["learning_rate"] = fmt(learning_rate);
  m["val_every"] = std::to_string(val_every);
  m["cond_frames"] = std::to_string(cond_frames);
  m["pred_frames"] = std::to_string(pred_frames);
  m["adapter_blocks"] = std::to_string(adapter_blocks);
  m["adapter_strategy"] = adapter_strategy;
  m["control_variant"] = control_variant;
  m["ablation"] = ablation;
  m["eval_samples"] = std::to_string(eval_samples);
  return m;
}

SimParams RunConfig::sim_params() const {
  SimParams p;
  p.particles = sim_particles;
  p.frames = sim_frames;
  p.dt = sim_dt;
  p.substeps = sim_substeps;
  p.coupling = sim_coupling;
  p.softening = sim_softening;
  p.box = sim_box;
  p.vel_sigma = sim_vel_sigma;
  return p;
}

SimConfig RunConfig::sim_config() const {
  SimConfig c;
  c.params = sim_params();
  c.train = sim_train;
  c.val = sim_val;
  c.test = sim_test;
  c.seed = seed;
  return c;
}

NoiseSchedule RunConfig::schedule() const {
  double b0 = beta_start, b1 = beta_end;
  if (schedule_increasing && b0 > b1) std::swap(b0, b1);
  return build_linear_schedule(diffusion_steps, b0, b1);
}

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256: digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

std::string param_blob(const ParamSet& params) {
  std::string blob;
  for (const auto& [name, entry] : params.entries()) {
    const Mat& m = entry.value;
    for (long r = 0; r < m.rows(); ++r) {
      for (long c = 0; c < m.cols(); ++c) {
        const double v = m(r, c);
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        for (int i = 0; i < 8; ++i) {
          blob.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
        }
      }
    }
  }
  return blob;
}

std::string param_hash(const ParamSet& params) {
  const std::string blob = param_blob(params);
  return sha256_hex(blob.data(), blob.size());
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string blob = param_blob(ckpt.params);
  std::ostringstream head;
  head << "EQUIADA-CKPT 1\n";
  std::map<std::string, std::string> manifest = ckpt.manifest;
  manifest["blob_sha256"] = sha256_hex(blob.data(), blob.size());
  for (const auto& [k, v] : manifest) head << k << '\t' << v << '\n';
  head << "tensors\t" << ckpt.params.count() << '\n';
  for (const auto& [name, entry] : ckpt.params.entries()) {
    head << "tensor\t" << name << '\t' << entry.value.rows() << '\t' << entry.value.cols()
         << '\t' << (entry.trainable ? 1 : 0) << '\n';
  }
  head << "blob_bytes\t" << blob.size() << '\n';

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw std::runtime_error("write_checkpoint: cannot open " + path);
  const std::string h = head.str();
  file.write(h.data(), static_cast<std::streamsize>(h.size()));
  file.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!file) throw std::runtime_error("write_checkpoint: write failed for " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("read_checkpoint: cannot open " + path);

  std::string line;
  if (!std::getline(file, line) || trim(line) != "EQUIADA-CKPT 1") {
    throw std::runtime_error(path + ": not an equiada checkpoint");
  }
  Checkpoint ckpt;
  struct TensorDir {
    std::string name;
    long rows, cols;
    bool trainable;
  };
  std::vector<TensorDir> dir;
  std::size_t blob_bytes = 0;
  while (std::getline(file, line)) {
    std::istringstream ls(line);
    std::string key;
    std::getline(ls, key, '\t');
    if (key == "tensor") {
      TensorDir t;
      std::string rows, cols, trainable;
      std::getline(ls, t.name, '\t');
      std::getline(ls, rows, '\t');
      std::getline(ls, cols, '\t');
      std::getline(ls, trainable, '\t');
      t.rows = std::stol(rows);
      t.cols = std::stol(cols);
      t.trainable = trainable == "1";
      dir.push_back(t);
    } else if (key == "tensors") {
      continue;
    } else if (key == "blob_bytes") {
      std::string n;
      std::getline(ls, n, '\t');
      blob_bytes = std::stoul(n);
      break;
    } else {
      std::string value;
      std::getline(ls, value);
      ckpt.manifest[key] = value;
    }
  }

  std::string blob(blob_bytes, '\0');
  file.read(blob.data(), static_cast<std::streamsize>(blob_bytes));
  if (file.gcount() != static_cast<std::streamsize>(blob_bytes)) {
    throw std::runtime_error(path + ": truncated checkpoint blob");
  }
  const std::string hash = sha256_hex(blob.data(), blob.size());
  auto it = ckpt.manifest.find("blob_sha256");
  if (it == ckpt.manifest.end() || it->second != hash) {
    throw std::runtime_error(path + ": parameter blob hash mismatch");
  }

  std::size_t off = 0;
  for (const TensorDir& t : dir) {
    Mat m(t.rows, t.cols);
    for (long r = 0; r < t.rows; ++r) {
      for (long c = 0; c < t.cols; ++c) {
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) {
          bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[off + i]))
                  << (8 * i);
        }
        off += 8;
        double v;
        std::memcpy(&v, &bits, 8);
        m(r, c) = v;
      }
    }
    ckpt.params.add(t.name, std::move(m), t.trainable);
  }
  return ckpt;
}

DatasetSplits load_splits(const std::string& stem) {
  namespace fs = std::filesystem;
  DatasetSplits out;
  if (fs::exists(stem) && fs::is_regular_file(stem)) {
    out.train = read_dataset(stem);
    out.val = out.train;
    out.test = out.train;
    return out;
  }
  out.train = read_dataset(stem + ".train");
  out.val = read_dataset(stem + ".val");
  out.test = read_dataset(stem + ".test");
  for (auto& r : out.train) r.split = "train";
  for (auto& r : out.val) r.split = "val";
  for (auto& r : out.test) r.split = "test";
  return out;
}

void write_splits(const std::string& stem, const DatasetSplits& splits) {
  write_dataset(stem + ".train", splits.train);
  write_dataset(stem + ".val", splits.val);
  write_dataset(stem + ".test", splits.test);
}

Mat slice_coords(const TrajectoryRecord& record, int start, int count) {
  const int nodes = static_cast<int>(record.node_features.rows());
  if (start < 0 || count < 1 || start + count > record.frames) {
    throw std::invalid_argument("slice_coords: frame range out of bounds");
  }
  Mat out(static_cast<long>(nodes) * count, 3);
  for (int n = 0; n < nodes; ++n) {
    out.middleRows(static_cast<long>(n) * count, count) =
        record.coords.middleRows(static_cast<long>(n) * record.frames + start, count);
  }
  return out;
}

GeometricTrajectory slice_frames(const TrajectoryRecord& record, int start, int count) {
  return GeometricTrajectory(record.node_features, slice_coords(record, start, count),
                             count, record.edges);
}

double ade(const Mat& pred, const Mat& truth, int nodes, int frames) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols() ||
      pred.rows() != static_cast<long>(nodes) * frames) {
    throw std::invalid_argument("ade: shape mismatch");
  }
  double sum = 0.0;
  for (long r = 0; r < pred.rows(); ++r) sum += (pred.row(r) - truth.row(r)).norm();
  return sum / static_cast<double>(nodes * frames);
}

double fde(const Mat& pred, const Mat& truth, int nodes, int frames) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols() ||
      pred.rows() != static_cast<long>(nodes) * frames) {
    throw std::invalid_argument("fde: shape mismatch");
  }
  double sum = 0.0;
  for (int n = 0; n < nodes; ++n) {
    const long r = static_cast<long>(n) * frames + frames - 1;
    sum += (pred.row(r) - truth.row(r)).norm();
  }
  return sum / static_cast<double>(nodes);
}

double ade_over_samples(const std::vector<Mat>& preds, const Mat& truth, int nodes,
                        int frames) {
  if (preds.empty()) throw std::invalid_argument("ade_over_samples: no samples");
  double sum = 0.0;
  for (const Mat& p : preds) sum += ade(p, truth, nodes, frames);
  return sum / static_cast<double>(preds.size());
}

double fde_over_samples(const std::vector<Mat>& preds, const Mat& truth, int nodes,
                        int frames) {
  if (preds.empty()) throw std::invalid_argument("fde_over_samples: no samples");
  double sum = 0.0;
  for (const Mat& p : preds) sum += fde(p, truth, nodes, frames);
  return sum / static_cast<double>(preds.size());
}

double marginal_score(const std::vector<Mat>& samples, const std::vector<Mat>& reference,
                      int frames, int bins) {
  if (samples.empty() || reference.empty()) {
    throw std::invalid_argument("marginal_score: both sets must be non-empty");
  }
  if (bins < 2) throw std::invalid_argument("marginal_score: bins must be >= 2");

  auto collect = [&](const std::vector<Mat>& set, int t) {
    std::vector<double> vals;
    for (const Mat& m : set) {
      if (m.rows() % frames != 0) {
        throw std::invalid_argument("marginal_score: rows not divisible by frames");
      }
      const int nodes = static_cast<int>(m.rows()) / frames;
      for (int n = 0; n < nodes; ++n) {
        for (int c = 0; c < 3; ++c) vals.push_back(m(n * frames + t, c));
      }
    }
    return vals;
  };

  double total = 0.0;
  for (int t = 0; t < frames; ++t) {
    std::vector<double> a = collect(samples, t);
    std::vector<double> b = collect(reference, t);
    double lo = std::min(*std::min_element(a.begin(), a.end()),
                         *std::min_element(b.begin(), b.end()));
    double hi = std::max(*std::max_element(a.begin(), a.end()),
                         *std::max_element(b.begin(), b.end()));
    if (hi <= lo) {
      std::cerr << "marginal_score: degenerate value range at timestep " << t
                << ", scoring 0\n";
      continue;
    }
    auto histogram = [&](const std::vector<double>& vals) {
      Eigen::VectorXd h = Eigen::VectorXd::Zero(bins);
      for (double v : vals) {
        int idx = static_cast<int>((v - lo) / (hi - lo) * bins);
        idx = std::min(std::max(idx, 0), bins - 1);
        h(idx) += 1.0;
      }
      return Eigen::VectorXd(h / static_cast<double>(vals.size()));
    };
    total += (histogram(a) - histogram(b)).cwiseAbs().mean();
  }
  return total / static_cast<double>(frames);
}

namespace {

// ---------------------------------------------------------------------------
// Training plumbing
// ---------------------------------------------------------------------------

struct TaskItem {
  GeometricTrajectory target;
  Mat cond_coords;  // (N*Tc) x 3, empty when the task has no condition frames
  Control control;  // adapter control; monostate-free, unused for pretraining
  bool has_control = false;
};

/// Translates a record so the joint CoM of frames [0, frames) sits at the
/// origin; conditional tasks are learned and evaluated in this frame.
TrajectoryRecord center_by_leading_frames(const TrajectoryRecord& record, int frames) {
  TrajectoryRecord out = record;
  Eigen::RowVector3d shift = center_of_mass(slice_coords(record, 0, frames)).transpose();
  out.coords.rowwise() -= shift;
  return out;
}

Eigen::VectorXd global_signal_for(const TrajectoryRecord& record) {
  // One-hot of the positive-charge count; length N + 1.
  const int nodes = static_cast<int>(record.node_features.rows());
  int positives = 0;
  for (int n = 0; n < nodes; ++n) {
    if (record.node_features(n, 0) > 0.5) ++positives;
  }
  Eigen::VectorXd sig = Eigen::VectorXd::Zero(nodes + 1);
  sig(positives) = 1.0;
  return sig;
}

TaskItem make_uncond_item(const TrajectoryRecord& record, int pred_frames) {
  TaskItem item;
  item.target = slice_frames(record, 0, pred_frames);
  return item;
}

TaskItem make_cond_item(const TrajectoryRecord& record, int cond_frames, int pred_frames) {
  TrajectoryRecord centered = center_by_leading_frames(record, cond_frames);
  TaskItem item;
  item.cond_coords = slice_coords(centered, 0, cond_frames);
  item.target = slice_frames(centered, cond_frames, pred_frames);
  item.control = FrameControl{item.cond_coords, cond_frames, /*prefix=*/true};
  item.has_control = true;
  return item;
}

TaskItem make_adapter_item(const TrajectoryRecord& record, const RunConfig& cfg,
                           ControlVariant variant) {
  switch (variant) {
    case ControlVariant::kFrame:
      return make_cond_item(record, cfg.cond_frames, cfg.pred_frames);
    case ControlVariant::kGlobal: {
      TaskItem item = make_uncond_item(record, cfg.pred_frames);
      item.control = GlobalControl{global_signal_for(record)};
      item.has_control = true;
      return item;
    }
    case ControlVariant::kSubgraph: {
      TrajectoryRecord centered = center_by_leading_frames(record, 1);
      TaskItem item;
      item.target = slice_frames(centered, 0, cfg.pred_frames);
      GeometricGraph context(centered.node_features, slice_coords(centered, 0, 1),
                             centered.edges);
      item.control = SubgraphControl{std::move(context), {}};
      item.has_control = true;
      return item;
    }
  }
  throw std::logic_error("make_adapter_item: unreachable");
}

std::vector<int> batch_indices(std::uint64_t seed, int step, int batch, int pool) {
  Rng rng(mix_seed(seed, 0x62617463ULL, step));
  std::vector<int> idx(batch);
  for (int i = 0; i < batch; ++i) idx[i] = rng.uniform_int(0, pool - 1);
  return idx;
}

std::string loss_tail_string(const std::vector<double>& history) {
  std::ostringstream os;
  os.precision(17);
  const std::size_t start = history.size() > 20 ? history.size() - 20 : 0;
  for (std::size_t i = start; i < history.size(); ++i) {
    if (i > start) os << ',';
    os << history[i];
  }
  return os.str();
}

}  // namespace

LoadedModel load_base(const Checkpoint& ckpt) {
  LoadedModel out;
  auto get = [&](const std::string& key) {
    auto it = ckpt.manifest.find(key);
    if (it == ckpt.manifest.end()) {
      throw std::runtime_error("checkpoint manifest missing key " + key);
    }
    return it->second;
  };
  RunConfig cfg;
  for (const auto& [key, value] : ckpt.manifest) {
    if (key.rfind("cfg.", 0) == 0) cfg.set(key.substr(4), value);
  }
  out.config = cfg;
  out.model.prefix = "base";
  out.model.cfg.layers = cfg.n_layer;
  out.model.cfg.hidden = cfg.hidden;
  out.model.cfg.time_dim = cfg.time_emb_dim;
  out.model.cfg.feature_dim = std::stoi(get("feature_dim"));
  out.model.cfg.max_step = cfg.diffusion_steps;
  out.model.cfg.subspace = cfg.task == "uncond";
  out.params = ckpt.params;
  return out;
}

Checkpoint pretrain(const RunConfig& config, const DatasetSplits& data,
                    const std::string& abort_path) {
  if (data.train.empty() || data.val.empty()) {
    throw std::invalid_argument("pretrain: train and val splits must be non-empty");
  }
  const bool uncond = config.task == "uncond";
  const int feature_dim = static_cast<int>(data.train.front().node_features.cols());

  DenoiserModel model;
  model.prefix = "base";
  model.cfg.layers = config.n_layer;
  model.cfg.hidden = config.hidden;
  model.cfg.time_dim = config.time_emb_dim;
  model.cfg.feature_dim = feature_dim;
  model.cfg.max_step = config.diffusion_steps;
  model.cfg.subspace = uncond;

  ParamSet params;
  model.init_params(params, mix_seed(config.seed, 0x70726d73ULL));
  AnchorNets anchor;
  anchor.prefix = "base.anchor";
  anchor.feature_dim = feature_dim;
  anchor.pred_frames = config.pred_frames;
  if (!uncond) anchor.init_params(params, mix_seed(config.seed, 0x616e6368ULL));

  NoiseSchedule sched = config.schedule();

  auto make_item = [&](const TrajectoryRecord& r) {
    return uncond ? make_uncond_item(r, config.pred_frames)
                  : make_cond_item(r, config.cond_frames, config.pred_frames);
  };
  std::vector<TaskItem> train_items, val_items;
  train_items.reserve(data.train.size());
  for (const auto& r : data.train) train_items.push_back(make_item(r));
  val_items.reserve(data.val.size());
  for (const auto& r : data.val) val_items.push_back(make_item(r));

  auto item_loss = [&](Bound& bound, const TaskItem& item, std::uint64_t seed) {
    if (uncond) return loss_uncond(bound, model, item.target, sched, seed);
    return loss_cond(bound, model, anchor, item.target, item.cond_coords,
                     config.cond_frames, sched, seed);
  };

  auto validation_loss = [&]() {
    double total = 0.0;
    for (std::size_t i = 0; i < val_items.size(); ++i) {
      Tape tape;
      Bound bound(tape, params);
      Value l = item_loss(bound, val_items[i], mix_seed(config.seed, 0x76616c69ULL, i));
      total += tape.value(l)(0, 0);
    }
    return total / static_cast<double>(val_items.size());
  };

  AdamState opt(AdamConfig{config.learning_rate});
  std::vector<double> history;
  const double val_initial = validation_loss();
  double val_best = val_initial;
  double val_final = val_initial;
  ParamSet best_params = params;
  ParamSet last_good = params;

  for (int step = 0; step < config.steps; ++step) {
    const std::vector<int> idx =
        batch_indices(config.seed, step, config.batch_size,
                      static_cast<int>(train_items.size()));
    Tape tape;
    Bound bound(tape, params);
    Value total;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Value li = item_loss(bound, train_items[idx[i]],
                           mix_seed(mix_seed(config.seed, 0x6c6f7373ULL, step), i));
      total = (i == 0) ? li : (total + li);
    }
    Value loss = scale(total, 1.0 / static_cast<double>(idx.size()));
    const double loss_value = tape.value(loss)(0, 0);
    if (!std::isfinite(loss_value)) {
      if (!abort_path.empty()) {
        Checkpoint last;
        last.params = last_good;
        last.manifest["kind"] = "base";
        last.manifest["aborted_at_step"] = std::to_string(step);
        write_checkpoint(abort_path, last);
      }
      throw std::runtime_error("pretrain: non-finite loss at step " + std::to_string(step) +
                               (abort_path.empty()
                                    ? std::string()
                                    : "; last good checkpoint written to " + abort_path));
    }
    tape.backward(loss);
    adam_step(params, collect_gradients(bound), opt);
    history.push_back(loss_value);

    if ((step + 1) % config.val_every == 0 || step + 1 == config.steps) {
      val_final = validation_loss();
      last_good = params;
      if (val_final < val_best) {
        val_best = val_final;
        best_params = params;
      }
    }
  }

  Checkpoint ckpt;
  ckpt.params = config.steps > 0 ? best_params : params;
  ckpt.manifest["kind"] = "base";
  ckpt.manifest["blob_sha256"] = param_hash(ckpt.params);
  ckpt.manifest["feature_dim"] = std::to_string(feature_dim);
  ckpt.manifest["steps_run"] = std::to_string(config.steps);
  ckpt.manifest["val_loss_initial"] = fmt(val_initial);
  ckpt.manifest["val_loss_best"] = fmt(val_best);
  ckpt.manifest["val_loss_final"] = fmt(val_final);
  ckpt.manifest["loss_tail"] = loss_tail_string(history);
  for (const auto& [k, v] : config.echo()) ckpt.manifest["cfg." + k] = v;
  return ckpt;
}

Checkpoint finetune(const Checkpoint& base_ckpt, const RunConfig& config,
                    const DatasetSplits& data) {
  if (data.train.empty() || data.val.empty()) {
    throw std::invalid_argument("finetune: train and val splits must be non-empty");
  }
  LoadedModel base = load_base(base_ckpt);
  base.params.freeze_all();
  const std::string base_hash = param_hash(base.params);
  auto it = base_ckpt.manifest.find("blob_sha256");
  if (it == base_ckpt.manifest.end() || it->second != base_hash) {
    throw std::runtime_error("finetune: base checkpoint hash mismatch, refusing to run");
  }

  const ControlVariant variant = variant_from_string(config.control_variant);
  AdapterConfig acfg;
  acfg.blocks = config.adapter_blocks;
  acfg.strategy = copy_strategy_from_string(config.adapter_strategy);
  acfg.variant = variant;
  acfg.ablation = ablation_from_string(config.ablation);
  acfg.global_dim = variant == ControlVariant::kGlobal
                        ? static_cast<int>(data.train.front().node_features.rows()) + 1
                        : 0;
  acfg.owns_anchor = variant == ControlVariant::kFrame && base.model.cfg.subspace;
  acfg.pred_frames = config.pred_frames;

  AdapterStack stack =
      make_adapter(base.model, base.params, acfg, mix_seed(config.seed, 0x66746e65ULL));

  FinetuneSetup setup;
  if (!base.model.cfg.subspace) {
    if (variant != ControlVariant::kFrame) {
      throw std::invalid_argument(
          "finetune: a conditional base supports only the frame variant");
    }
    setup.process = FinetuneProcess::kBaseAnchor;
    setup.base_cond_frames = base.config.cond_frames;
    if (setup.base_cond_frames > config.cond_frames) {
      throw std::invalid_argument(
          "finetune: downstream condition shorter than the base's native condition");
    }
  } else {
    setup.process = variant == ControlVariant::kFrame ? FinetuneProcess::kAdapterAnchor
                                                      : FinetuneProcess::kSubspace;
  }

  NoiseSchedule sched = config.schedule();
  auto to_ft = [&](const TrajectoryRecord& r) {
    TaskItem t = make_adapter_item(r, config, variant);
    return FinetuneItem{std::move(t.target), std::move(t.control)};
  };
  std::vector<FinetuneItem> train_items, val_items;
  for (const auto& r : data.train) train_items.push_back(to_ft(r));
  for (const auto& r : data.val) val_items.push_back(to_ft(r));

  auto validation_loss = [&]() {
    double total = 0.0;
    for (std::size_t i = 0; i < val_items.size(); ++i) {
      Tape tape;
      Bound bb(tape, base.params);
      Bound ab(tape, stack.params);
      Value l = finetune_loss(bb, ab, base.model, stack, val_items[i], setup, sched,
                              mix_seed(config.seed, 0x7661ULL, i));
      total += tape.value(l)(0, 0);
    }
    return total / static_cast<double>(val_items.size());
  };

  AdamState opt(AdamConfig{config.learning_rate});
  std::vector<double> history;
  const double val_initial = validation_loss();
  double val_best = val_initial;
  double val_final = val_initial;
  ParamSet best_params = stack.params;

  for (int step = 0; step < config.steps; ++step) {
    const std::vector<int> idx =
        batch_indices(mix_seed(config.seed, 0x6674ULL), step, config.batch_size,
                      static_cast<int>(train_items.size()));
    std::vector<FinetuneItem> batch;
    batch.reserve(idx.size());
    for (int i : idx) batch.push_back(train_items[i]);
    const double loss = finetune_step(base.model, base.params, stack, batch, setup, sched,
                                      opt, mix_seed(config.seed, 0x73746570ULL, step));
    history.push_back(loss);
    if ((step + 1) % config.val_every == 0 || step + 1 == config.steps) {
      val_final = validation_loss();
      if (val_final < val_best) {
        val_best = val_final;
        best_params = stack.params;
      }
    }
  }

  Checkpoint ckpt;
  ckpt.params = config.steps > 0 ? best_params : stack.params;
  ckpt.manifest["kind"] = "adapter";
  ckpt.manifest["blob_sha256"] = param_hash(ckpt.params);
  ckpt.manifest["base_blob_sha256"] = base_hash;
  ckpt.manifest["feature_dim"] = std::to_string(base.model.cfg.feature_dim);
  ckpt.manifest["global_dim"] = std::to_string(acfg.global_dim);
  ckpt.manifest["owns_anchor"] = acfg.owns_anchor ? "true" : "false";
  ckpt.manifest["base_cond_frames"] = std::to_string(setup.base_cond_frames);
  {
    std::ostringstream os;
    for (std::size_t i = 0; i < stack.source_layers.size(); ++i) {
      if (i > 0) os << ',';
      os << stack.source_layers[i];
    }
    ckpt.manifest["source_layers"] = os.str();
  }
  ckpt.manifest["steps_run"] = std::to_string(config.steps);
  ckpt.manifest["val_loss_initial"] = fmt(val_initial);
  ckpt.manifest["val_loss_best"] = fmt(val_best);
  ckpt.manifest["val_loss_final"] = fmt(val_final);
  ckpt.manifest["loss_tail"] = loss_tail_string(history);
  for (const auto& [k, v] : config.echo()) ckpt.manifest["cfg." + k] = v;
  return ckpt;
}

AdapterStack load_adapter(const Checkpoint& adapter_ckpt, const DenoiserModel& base) {
  auto get = [&](const std::string& key) {
    auto it = adapter_ckpt.manifest.find(key);
    if (it == adapter_ckpt.manifest.end()) {
      throw std::runtime_error("adapter manifest missing key " + key);
    }
    return it->second;
  };
  RunConfig cfg;
  for (const auto& [key, value] : adapter_ckpt.manifest) {
    if (key.rfind("cfg.", 0) == 0) cfg.set(key.substr(4), value);
  }
  AdapterStack stack;
  stack.base_cfg = base.cfg;
  stack.cfg.blocks = cfg.adapter_blocks;
  stack.cfg.strategy = copy_strategy_from_string(cfg.adapter_strategy);
  stack.cfg.variant = variant_from_string(cfg.control_variant);
  stack.cfg.ablation = ablation_from_string(cfg.ablation);
  stack.cfg.global_dim = std::stoi(get("global_dim"));
  stack.cfg.owns_anchor = get("owns_anchor") == "true";
  stack.cfg.pred_frames = cfg.pred_frames;
  {
    std::istringstream ss(get("source_layers"));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (!tok.empty()) stack.source_layers.push_back(std::stoi(tok));
    }
  }
  stack.params = adapter_ckpt.params;
  return stack;
}

Control control_from_record(const TrajectoryRecord& record, const RunConfig& config,
                            ControlVariant variant) {
  return make_adapter_item(record, config, variant).control;
}

double MetricsReport::at(const std::string& name) const {
  for (const auto& [k, v] : lines) {
    if (k == name) return v;
  }
  throw std::invalid_argument("report: no metric named " + name);
}

std::string MetricsReport::to_text() const {
  std::ostringstream os;
  os.precision(17);
  for (const auto& [k, v] : lines) os << k << '\t' << v << '\n';
  return os.str();
}

namespace {

ScoreFn make_base_score(const DenoiserModel* model, const ParamSet* params,
                        std::shared_ptr<Mat> feats, std::shared_ptr<GraphTopology> topo) {
  return [=](const Mat& coords, int tau) {
    Tape tape;
    Bound bound(tape, *params);
    DenoiserOut out = denoiser_forward(bound, *model, tape.constant(*feats),
                                       tape.constant(coords), *topo, tau);
    return tape.value(out.eps);
  };
}

ScoreFn make_base_cond_score(const DenoiserModel* model, const ParamSet* params,
                             std::shared_ptr<Mat> feats, std::shared_ptr<Mat> cond,
                             int cond_frames, int frames,
                             std::shared_ptr<std::vector<Edge>> edges) {
  return [=](const Mat& coords, int tau) {
    Tape tape;
    Bound bound(tape, *params);
    DenoiserOut out =
        denoiser_forward_cond(bound, *model, tape.constant(*feats), tape.constant(coords),
                              *cond, cond_frames, frames, *edges, tau);
    return tape.value(out.eps);
  };
}

ScoreFn make_fused_score(const DenoiserModel* model, const ParamSet* base_params,
                         const AdapterStack* stack, std::shared_ptr<Mat> feats,
                         std::shared_ptr<GraphTopology> topo, std::shared_ptr<Control> control,
                         std::shared_ptr<Mat> base_cond, int base_cond_frames) {
  return [=](const Mat& coords, int tau) {
    Tape tape;
    Bound bb(tape, *base_params);
    Bound ab(tape, stack->params);
    Value c = tape.constant(coords);
    Value f = tape.constant(*feats);
    Value base_eps;
    if (base_cond && base_cond_frames > 0) {
      DenoiserOut out = denoiser_forward_cond(bb, *model, f, c, *base_cond,
                                              base_cond_frames, topo->frames, topo->edges,
                                              tau);
      base_eps = out.eps;
    } else {
      DenoiserOut out = denoiser_forward(bb, *model, f, c, *topo, tau);
      base_eps = out.eps;
    }
    AdapterOut s = adapter_forward(ab, *stack, c, f, *topo, tau, *control);
    return tape.value(base_eps + s.coords);
  };
}

}  // namespace

MetricsReport evaluate(const Checkpoint& base_ckpt, const Checkpoint* adapter_ckpt,
                       const DatasetSplits& data, int eval_samples,
                       std::uint64_t eval_seed, int sample_offset) {
  if (data.test.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (eval_samples < 1) throw std::invalid_argument("evaluate: eval_samples must be >= 1");

  LoadedModel base = load_base(base_ckpt);
  base.params.freeze_all();
  NoiseSchedule sched = base.config.schedule();
  const bool uncond = base.config.task == "uncond";
  const int pred = base.config.pred_frames;
  const int cond_frames = base.config.cond_frames;

  AnchorNets base_anchor;
  base_anchor.prefix = "base.anchor";
  base_anchor.feature_dim = base.model.cfg.feature_dim;
  base_anchor.pred_frames = pred;

  auto sample_seed = [&](int k, int rec) {
    return mix_seed(mix_seed(eval_seed, 0x6576616cULL, sample_offset + k), rec);
  };

  MetricsReport report;

  // Pretrain-task metrics for the base model alone (also the detached run).
  auto pretrain_metrics = [&](const std::string& prefix) {
    if (uncond) {
      std::vector<Mat> reference;
      for (const auto& r : data.test) {
        reference.push_back(com_project(slice_coords(r, 0, pred)));
      }
      double total = 0.0;
      for (int k = 0; k < eval_samples; ++k) {
        std::vector<Mat> samples;
        for (std::size_t i = 0; i < data.test.size(); ++i) {
          const TrajectoryRecord& r = data.test[i];
          auto feats = std::make_shared<Mat>(r.node_features);
          auto topo = std::make_shared<GraphTopology>(GraphTopology::build(
              static_cast<int>(r.node_features.rows()), pred, r.edges));
          ScoreFn fn = make_base_score(&base.model, &base.params, feats, topo);
          samples.push_back(sample_uncond(fn, topo->nodes, pred, sched,
                                          sample_seed(k, static_cast<int>(i))));
        }
        total += marginal_score(samples, reference, pred);
      }
      report.lines.emplace_back(prefix + "_marginal",
                                total / static_cast<double>(eval_samples));
    } else {
      double ade_total = 0.0, fde_total = 0.0;
      for (int k = 0; k < eval_samples; ++k) {
        double ade_k = 0.0, fde_k = 0.0;
        for (std::size_t i = 0; i < data.test.size(); ++i) {
          TaskItem item = make_cond_item(data.test[i], cond_frames, pred);
          const int nodes = item.target.nodes();
          auto feats = std::make_shared<Mat>(item.target.node_features);
          auto cond = std::make_shared<Mat>(item.cond_coords);
          auto edges = std::make_shared<std::vector<Edge>>(item.target.edges);
          Mat x_r = anchor_mean_value(base.params, base_anchor, item.cond_coords,
                                      cond_frames, item.target.node_features);
          ScoreFn fn = make_base_cond_score(&base.model, &base.params, feats, cond,
                                            cond_frames, pred, edges);
          Mat sample =
              sample_cond(fn, x_r, sched, sample_seed(k, static_cast<int>(i)));
          ade_k += ade(sample, item.target.coords, nodes, pred);
          fde_k += fde(sample, item.target.coords, nodes, pred);
        }
        ade_total += ade_k / static_cast<double>(data.test.size());
        fde_total += fde_k / static_cast<double>(data.test.size());
      }
      report.lines.emplace_back(prefix + "_ade", ade_total / eval_samples);
      report.lines.emplace_back(prefix + "_fde", fde_total / eval_samples);
    }
  };

  pretrain_metrics("base_pretrain");
  if (adapter_ckpt == nullptr) return report;

  // Adapter attached: verify it references this base.
  const std::string base_hash = param_hash(base.params);
  auto ref = adapter_ckpt->manifest.find("base_blob_sha256");
  if (ref == adapter_ckpt->manifest.end() || ref->second != base_hash) {
    throw std::runtime_error("evaluate: adapter references a different base checkpoint");
  }

  AdapterStack stack = load_adapter(*adapter_ckpt, base.model);
  RunConfig ft_cfg;
  for (const auto& [key, value] : adapter_ckpt->manifest) {
    if (key.rfind("cfg.", 0) == 0) ft_cfg.set(key.substr(4), value);
  }
  const ControlVariant variant = variant_from_string(ft_cfg.control_variant);
  const int ft_pred = ft_cfg.pred_frames;
  const int base_cond_frames =
      std::stoi(adapter_ckpt->manifest.count("base_cond_frames")
                    ? adapter_ckpt->manifest.at("base_cond_frames")
                    : "0");

  double fused_ade = 0.0, fused_fde = 0.0, zero_ade = 0.0, zero_fde = 0.0;
  for (int k = 0; k < eval_samples; ++k) {
    double fa = 0.0, ff = 0.0, za = 0.0, zf = 0.0;
    for (std::size_t i = 0; i < data.test.size(); ++i) {
      TaskItem item = make_adapter_item(data.test[i], ft_cfg, variant);
      const int nodes = item.target.nodes();
      auto feats = std::make_shared<Mat>(item.target.node_features);
      auto topo = std::make_shared<GraphTopology>(
          GraphTopology::build(nodes, ft_pred, item.target.edges));
      auto control = std::make_shared<Control>(item.control);
      const std::uint64_t seed = sample_seed(k, static_cast<int>(i));

      Mat fused_sample, zero_sample;
      if (variant == ControlVariant::kFrame && stack.cfg.owns_anchor) {
        const auto& fc = std::get<FrameControl>(item.control);
        Mat x_r = anchor_mean_value(stack.params, stack.anchor(), fc.coords,
                                    fc.frame_count, item.target.node_features);
        ScoreFn fn = make_fused_score(&base.model, &base.params, &stack, feats, topo,
                                      control, nullptr, 0);
        fused_sample = sample_cond(fn, x_r, sched, seed);
        ScoreFn zfn = make_base_score(&base.model, &base.params, feats, topo);
        zero_sample = sample_uncond(zfn, nodes, ft_pred, sched, seed);
      } else if (variant == ControlVariant::kFrame && !base.model.cfg.subspace) {
        const auto& fc = std::get<FrameControl>(item.control);
        Mat base_cond(static_cast<long>(nodes) * base_cond_frames, 3);
        for (int n = 0; n < nodes; ++n) {
          base_cond.middleRows(static_cast<long>(n) * base_cond_frames, base_cond_frames) =
              fc.coords.middleRows(static_cast<long>(n) * fc.frame_count,
                                   base_cond_frames);
        }
        AnchorNets nets = base_anchor;
        nets.pred_frames = ft_pred;
        Mat x_r = anchor_mean_value(base.params, nets, base_cond, base_cond_frames,
                                    item.target.node_features);
        auto bc = std::make_shared<Mat>(base_cond);
        ScoreFn fn = make_fused_score(&base.model, &base.params, &stack, feats, topo,
                                      control, bc, base_cond_frames);
        fused_sample = sample_cond(fn, x_r, sched, seed);
        auto edges = std::make_shared<std::vector<Edge>>(item.target.edges);
        ScoreFn zfn = make_base_cond_score(&base.model, &base.params, feats, bc,
                                           base_cond_frames, ft_pred, edges);
        zero_sample = sample_cond(zfn, x_r, sched, seed);
      } else {
        ScoreFn fn = make_fused_score(&base.model, &base.params, &stack, feats, topo,
                                      control, nullptr, 0);
        fused_sample = sample_uncond(fn, nodes, ft_pred, sched, seed);
        ScoreFn zfn = make_base_score(&base.model, &base.params, feats, topo);
        zero_sample = sample_uncond(zfn, nodes, ft_pred, sched, seed);
      }
      fa += ade(fused_sample, item.target.coords, nodes, ft_pred);
      ff += fde(fused_sample, item.target.coords, nodes, ft_pred);
      za += ade(zero_sample, item.target.coords, nodes, ft_pred);
      zf += fde(zero_sample, item.target.coords, nodes, ft_pred);
    }
    const double n = static_cast<double>(data.test.size());
    fused_ade += fa / n;
    fused_fde += ff / n;
    zero_ade += za / n;
    zero_fde += zf / n;
  }
  report.lines.emplace_back("fused_finetune_ade", fused_ade / eval_samples);
  report.lines.emplace_back("fused_finetune_fde", fused_fde / eval_samples);
  report.lines.emplace_back("base_finetune_ade", zero_ade / eval_samples);
  report.lines.emplace_back("base_finetune_fde", zero_fde / eval_samples);

  // The adapter detaches cleanly: the base alone reproduces its pretrain-task
  // metrics with the same seeds.
  pretrain_metrics("detached_pretrain");
  return report;
}

SampleResult sample_trajectory(const Checkpoint& base_ckpt,
                               const Checkpoint* adapter_ckpt,
                               const TrajectoryRecord& record, std::uint64_t seed) {
  LoadedModel base = load_base(base_ckpt);
  base.params.freeze_all();
  NoiseSchedule sched = base.config.schedule();

  AnchorNets base_anchor;
  base_anchor.prefix = "base.anchor";
  base_anchor.feature_dim = base.model.cfg.feature_dim;

  SampleResult result;
  if (adapter_ckpt == nullptr) {
    const int pred = base.config.pred_frames;
    result.frames = pred;
    if (base.config.task == "uncond") {
      TaskItem item = make_uncond_item(record, pred);
      auto feats = std::make_shared<Mat>(item.target.node_features);
      auto topo = std::make_shared<GraphTopology>(
          GraphTopology::build(item.target.nodes(), pred, item.target.edges));
      ScoreFn fn = make_base_score(&base.model, &base.params, feats, topo);
      result.coords = sample_uncond(fn, topo->nodes, pred, sched, seed);
    } else {
      const int tc = base.config.cond_frames;
      TaskItem item = make_cond_item(record, tc, pred);
      base_anchor.pred_frames = pred;
      Mat x_r = anchor_mean_value(base.params, base_anchor, item.cond_coords, tc,
                                  item.target.node_features);
      auto feats = std::make_shared<Mat>(item.target.node_features);
      auto cond = std::make_shared<Mat>(item.cond_coords);
      auto edges = std::make_shared<std::vector<Edge>>(item.target.edges);
      ScoreFn fn = make_base_cond_score(&base.model, &base.params, feats, cond, tc, pred,
                                        edges);
      result.coords = sample_cond(fn, x_r, sched, seed);
      result.condition = item.cond_coords;
      result.condition_frames = tc;
    }
    return result;
  }

  const std::string base_hash = param_hash(base.params);
  auto ref = adapter_ckpt->manifest.find("base_blob_sha256");
  if (ref == adapter_ckpt->manifest.end() || ref->second != base_hash) {
    throw std::runtime_error("sample: adapter references a different base checkpoint");
  }
  AdapterStack stack = load_adapter(*adapter_ckpt, base.model);
  RunConfig ft_cfg;
  for (const auto& [key, value] : adapter_ckpt->manifest) {
    if (key.rfind("cfg.", 0) == 0) ft_cfg.set(key.substr(4), value);
  }
  const ControlVariant variant = variant_from_string(ft_cfg.control_variant);
  const int pred = ft_cfg.pred_frames;
  TaskItem item = make_adapter_item(record, ft_cfg, variant);
  const int nodes = item.target.nodes();
  auto feats = std::make_shared<Mat>(item.target.node_features);
  auto topo = std::make_shared<GraphTopology>(
      GraphTopology::build(nodes, pred, item.target.edges));
  auto control = std::make_shared<Control>(item.control);
  result.frames = pred;

  if (variant == ControlVariant::kFrame && stack.cfg.owns_anchor) {
    const auto& fc = std::get<FrameControl>(item.control);
    Mat x_r = anchor_mean_value(stack.params, stack.anchor(), fc.coords, fc.frame_count,
                                item.target.node_features);
    ScoreFn fn = make_fused_score(&base.model, &base.params, &stack, feats, topo, control,
                                  nullptr, 0);
    result.coords = sample_cond(fn, x_r, sched, seed);
    result.condition = fc.coords;
    result.condition_frames = fc.frame_count;
  } else if (variant == ControlVariant::kFrame && !base.model.cfg.subspace) {
    const int bc = std::stoi(adapter_ckpt->manifest.at("base_cond_frames"));
    const auto& fc = std::get<FrameControl>(item.control);
    Mat base_cond(static_cast<long>(nodes) * bc, 3);
    for (int n = 0; n < nodes; ++n) {
      base_cond.middleRows(static_cast<long>(n) * bc, bc) =
          fc.coords.middleRows(static_cast<long>(n) * fc.frame_count, bc);
    }
    AnchorNets nets = base_anchor;
    nets.pred_frames = pred;
    Mat x_r = anchor_mean_value(base.params, nets, base_cond, bc,
                                item.target.node_features);
    auto bcond = std::make_shared<Mat>(base_cond);
    ScoreFn fn = make_fused_score(&base.model, &base.params, &stack, feats, topo, control,
                                  bcond, bc);
    result.coords = sample_cond(fn, x_r, sched, seed);
    result.condition = fc.coords;
    result.condition_frames = fc.frame_count;
  } else {
    ScoreFn fn = make_fused_score(&base.model, &base.params, &stack, feats, topo, control,
                                  nullptr, 0);
    result.coords = sample_uncond(fn, nodes, pred, sched, seed);
  }
  return result;
}

}  // namespace equiada
