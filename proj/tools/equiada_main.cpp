#include <CLI11.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include "equiada/harness.hpp"

namespace {

using namespace equiada;

int run_simulate(const std::string& config_path, const std::string& out) {
  RunConfig config = RunConfig::from_file(config_path);
  DatasetSplits splits = make_dataset(config.sim_config());
  write_splits(out, splits);
  std::cout << "wrote " << splits.train.size() << "/" << splits.val.size() << "/"
            << splits.test.size() << " records to " << out << ".{train,val,test}\n";
  return 0;
}

int run_pretrain(const std::string& config_path, const std::string& data,
                 const std::string& out) {
  RunConfig config = RunConfig::from_file(config_path);
  DatasetSplits splits = load_splits(data);
  Checkpoint ckpt = pretrain(config, splits, out + ".lastgood");
  write_checkpoint(out, ckpt);
  std::cout << "pretrain done: val " << ckpt.manifest.at("val_loss_initial") << " -> "
            << ckpt.manifest.at("val_loss_final") << ", checkpoint " << out << "\n";
  return 0;
}

int run_finetune(const std::string& base_path, const std::string& config_path,
                 const std::string& data, const std::string& out) {
  RunConfig config = RunConfig::from_file(config_path);
  Checkpoint base = read_checkpoint(base_path);
  DatasetSplits splits = load_splits(data);
  Checkpoint ckpt = finetune(base, config, splits);
  write_checkpoint(out, ckpt);
  std::cout << "finetune done: val " << ckpt.manifest.at("val_loss_initial") << " -> "
            << ckpt.manifest.at("val_loss_final") << ", checkpoint " << out << "\n";
  return 0;
}

int run_sample(const std::string& ckpt_path, const std::string& adapter_path,
               std::uint64_t seed, const std::string& out) {
  Checkpoint base_ckpt = read_checkpoint(ckpt_path);
  LoadedModel base = load_base(base_ckpt);

  // A fresh simulated record supplies node identities (and condition frames
  // for conditional sampling).
  TrajectoryRecord record = simulate_charged(base.config.sim_params(), seed);

  std::unique_ptr<Checkpoint> adapter_ckpt;
  if (!adapter_path.empty()) {
    adapter_ckpt = std::make_unique<Checkpoint>(read_checkpoint(adapter_path));
  }

  SampleResult sample = sample_trajectory(base_ckpt, adapter_ckpt.get(), record, seed);

  // Conditioned draws are stored as [condition | sample] along the frame axis.
  TrajectoryRecord r;
  r.node_features = record.node_features;
  r.edges = record.edges;
  const int nodes = static_cast<int>(record.node_features.rows());
  const int tc = sample.condition_frames;
  r.frames = tc + sample.frames;
  r.coords.resize(static_cast<long>(nodes) * r.frames, 3);
  for (int n = 0; n < nodes; ++n) {
    if (tc > 0) {
      r.coords.middleRows(static_cast<long>(n) * r.frames, tc) =
          sample.condition.middleRows(static_cast<long>(n) * tc, tc);
    }
    r.coords.middleRows(static_cast<long>(n) * r.frames + tc, sample.frames) =
        sample.coords.middleRows(static_cast<long>(n) * sample.frames, sample.frames);
  }

  write_dataset(out, {r});
  std::cout << "wrote " << (tc > 0 ? "conditioned " : "") << "sample (" << r.frames
            << " frames) to " << out << "\n";
  return 0;
}

int run_eval(const std::string& base_path, const std::string& adapter_path,
             const std::string& data, const std::string& report_path) {
  Checkpoint base = read_checkpoint(base_path);
  std::unique_ptr<Checkpoint> adapter;
  if (!adapter_path.empty()) {
    adapter = std::make_unique<Checkpoint>(read_checkpoint(adapter_path));
  }
  DatasetSplits splits = load_splits(data);
  LoadedModel lm = load_base(base);
  MetricsReport report = evaluate(base, adapter.get(), splits, lm.config.eval_samples,
                                  lm.config.seed);
  std::ofstream file(report_path, std::ios::trunc);
  if (!file) throw std::runtime_error("eval: cannot open report path " + report_path);
  file << report.to_text();
  std::cout << report.to_text();
  return 0;
}

int run_audit(const std::string& ckpt_path, const std::string& adapter_path, int trials,
              double tol) {
  Checkpoint base_ckpt = read_checkpoint(ckpt_path);
  LoadedModel base = load_base(base_ckpt);
  base.params.freeze_all();

  const int pred = base.config.pred_frames;
  TrajectoryRecord record = simulate_charged(base.config.sim_params(), /*seed=*/0);
  GeometricTrajectory probe = slice_frames(record, 0, pred);

  DenoiserFn base_fn = [&](const GeometricTrajectory& traj, int tau) {
    Tape tape;
    Bound bound(tape, base.params);
    DenoiserOut o = denoiser_forward(bound, base.model, traj, tau);
    return std::make_pair(tape.value(o.eps), tape.value(o.feats));
  };

  bool all_passed = true;
  AuditReport eq = audit_equivariance(base_fn, probe, base.config.diffusion_steps, trials,
                                      tol, /*seed=*/1);
  std::cout << "base_equivariance_max_dev\t" << eq.max_deviation << "\n";
  all_passed = all_passed && eq.passed;

  if (!adapter_path.empty()) {
    Checkpoint adapter_ckpt = read_checkpoint(adapter_path);
    AdapterStack stack = load_adapter(adapter_ckpt, base.model);
    RunConfig ft_cfg;
    for (const auto& [key, value] : adapter_ckpt.manifest) {
      if (key.rfind("cfg.", 0) == 0) ft_cfg.set(key.substr(4), value);
    }
    const ControlVariant variant = variant_from_string(ft_cfg.control_variant);
    Control control = control_from_record(record, ft_cfg, variant);

    const Mlp encoder = stack.encoder();
    const bool global = variant == ControlVariant::kGlobal;
    AuditReport prop = audit_proposition1(base_fn, probe, control, 1, trials, tol,
                                          /*seed=*/2, global ? &stack.params : nullptr,
                                          global ? &encoder : nullptr);
    std::cout << "prop1_max_dev\t" << prop.max_deviation << "\n";
    all_passed = all_passed && prop.passed;

    // Joint-motion equivariance of the fused score.
    GraphTopology topo = GraphTopology::build(probe.nodes(), probe.frames, probe.edges);
    double fused_dev = 0.0;
    for (int k = 0; k < trials; ++k) {
      const std::uint64_t s = mix_seed(3, 0x61756474ULL, k);
      Eigen::Matrix3d r = random_rotation(s);
      Rng rng(mix_seed(s, 1));
      Eigen::Vector3d d(rng.normal(), rng.normal(), rng.normal());
      RigidMotion g(r, d);

      auto fused_eval = [&](const GeometricTrajectory& traj, const Control& c) {
        Tape tape;
        Bound bb(tape, base.params);
        Bound ab(tape, stack.params);
        FusedOut o = fused_score(bb, ab, base.model, stack,
                                 tape.constant(traj.coords),
                                 tape.constant(traj.node_features), topo, 1, c);
        return tape.value(o.eps);
      };
      Mat a = fused_eval(probe, control);
      Mat b = fused_eval(apply_rigid_motion(probe, g), transform_control(control, g));
      const double ref = std::max(a.cwiseAbs().maxCoeff(), 1e-9);
      fused_dev = std::max(fused_dev, (b - apply_rotation(a, r)).cwiseAbs().maxCoeff() / ref);
    }
    std::cout << "fused_equivariance_max_dev\t" << fused_dev << "\n";
    all_passed = all_passed && fused_dev <= tol;
  }

  std::cout << (all_passed ? "audit_passed\t1" : "audit_passed\t0") << "\n";
  return all_passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SE(3)-equivariant trajectory diffusion with adapter fine-tuning"};
  app.require_subcommand(1);

  std::string config_path, data_path, out_path, base_path, adapter_path, ckpt_path,
      report_path;
  std::uint64_t seed = 0;
  int trials = 20;
  double tol = 1e-8;

  CLI::App* simulate = app.add_subcommand("simulate", "generate a charged-particle dataset");
  simulate->add_option("--config", config_path, "run configuration")->required();
  simulate->add_option("--out", out_path, "output dataset stem")->required();

  CLI::App* pretrain_cmd = app.add_subcommand("pretrain", "train the base denoiser");
  pretrain_cmd->add_option("--config", config_path)->required();
  pretrain_cmd->add_option("--data", data_path)->required();
  pretrain_cmd->add_option("--out", out_path)->required();

  CLI::App* finetune_cmd = app.add_subcommand("finetune", "train an adapter on a frozen base");
  finetune_cmd->add_option("--base", base_path)->required();
  finetune_cmd->add_option("--config", config_path)->required();
  finetune_cmd->add_option("--data", data_path)->required();
  finetune_cmd->add_option("--out", out_path)->required();

  CLI::App* sample_cmd = app.add_subcommand("sample", "draw a trajectory sample");
  sample_cmd->add_option("--ckpt", ckpt_path)->required();
  sample_cmd->add_option("--adapter", adapter_path);
  sample_cmd->add_option("--seed", seed)->required();
  sample_cmd->add_option("--out", out_path)->required();

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate checkpoints on a dataset");
  eval_cmd->add_option("--base", base_path)->required();
  eval_cmd->add_option("--adapter", adapter_path);
  eval_cmd->add_option("--data", data_path)->required();
  eval_cmd->add_option("--report", report_path)->required();

  CLI::App* audit_cmd = app.add_subcommand("audit", "equivariance and Proposition-1 audits");
  audit_cmd->add_option("--ckpt", ckpt_path)->required();
  audit_cmd->add_option("--adapter", adapter_path);
  audit_cmd->add_option("--trials", trials);
  audit_cmd->add_option("--tol", tol);

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) return run_simulate(config_path, out_path);
    if (pretrain_cmd->parsed()) return run_pretrain(config_path, data_path, out_path);
    if (finetune_cmd->parsed()) {
      return run_finetune(base_path, config_path, data_path, out_path);
    }
    if (sample_cmd->parsed()) return run_sample(ckpt_path, adapter_path, seed, out_path);
    if (eval_cmd->parsed()) return run_eval(base_path, adapter_path, data_path, report_path);
    if (audit_cmd->parsed()) return run_audit(ckpt_path, adapter_path, trials, tol);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
