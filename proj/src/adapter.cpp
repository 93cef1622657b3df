#include "equiada/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace equiada {

std::pair<Mat, Mat> zero_conv_apply(const Mat& coords, const Mat& feats, double phi_x,
                                    const Eigen::RowVectorXd& phi_h) {
  if (phi_h.size() != feats.cols()) {
    throw std::invalid_argument("zero_conv_apply: phi_h length must equal feature dim");
  }
  Mat centered = coords.rowwise() - coords.colwise().mean();
  Mat fz = feats.array().rowwise() * phi_h.array();
  return {phi_x * centered, fz};
}

CopyStrategy copy_strategy_from_string(const std::string& s) {
  if (s == "strided") return CopyStrategy::kStrided;
  if (s == "first") return CopyStrategy::kFirst;
  if (s == "last") return CopyStrategy::kLast;
  throw std::invalid_argument("unknown copy strategy: " + s);
}

std::vector<int> select_copy_layers(int depth, int budget, CopyStrategy strategy) {
  if (budget < 1 || budget > depth) {
    throw std::invalid_argument("select_copy_layers: budget must lie in [1, depth]");
  }
  std::vector<int> out;
  out.reserve(budget);
  switch (strategy) {
    case CopyStrategy::kStrided: {
      const int k = depth / budget;
      for (int b = 0; b < budget; ++b) out.push_back(b * k);
      break;
    }
    case CopyStrategy::kFirst:
      for (int b = 0; b < budget; ++b) out.push_back(b);
      break;
    case CopyStrategy::kLast:
      for (int b = 0; b < budget; ++b) out.push_back(depth - budget + b);
      break;
  }
  return out;
}

AblationMode ablation_from_string(const std::string& s) {
  if (s == "standard") return AblationMode::kStandard;
  if (s == "no_zero_conv") return AblationMode::kNoZeroConv;
  if (s == "no_trainable_copy") return AblationMode::kNoTrainableCopy;
  throw std::invalid_argument("unknown ablation mode: " + s);
}

ControlVariant variant_from_string(const std::string& s) {
  if (s == "global") return ControlVariant::kGlobal;
  if (s == "subgraph") return ControlVariant::kSubgraph;
  if (s == "frame") return ControlVariant::kFrame;
  throw std::invalid_argument("unknown control variant: " + s);
}

bool variant_matches(ControlVariant variant, const Control& control) {
  switch (variant) {
    case ControlVariant::kGlobal:
      return std::holds_alternative<GlobalControl>(control);
    case ControlVariant::kSubgraph:
      return std::holds_alternative<SubgraphControl>(control);
    case ControlVariant::kFrame:
      return std::holds_alternative<FrameControl>(control);
  }
  return false;
}

std::string AdapterStack::zc_phi_x(int block) const {
  return "adapter.zc" + std::to_string(block) + ".phi_x";
}

std::string AdapterStack::zc_phi_h(int block) const {
  return "adapter.zc" + std::to_string(block) + ".phi_h";
}

Mlp AdapterStack::encoder() const {
  return Mlp{"adapter.encoder", {cfg.global_dim, 16, base_cfg.feature_dim}};
}

AnchorNets AdapterStack::anchor() const {
  AnchorNets nets;
  nets.prefix = "adapter.anchor";
  nets.feature_dim = base_cfg.feature_dim;
  nets.pred_frames = cfg.pred_frames;
  return nets;
}

DenoiserModel AdapterStack::copy_model() const {
  DenoiserModel m;
  m.cfg = base_cfg;
  m.prefix = "adapter";
  return m;
}

namespace {

void copy_mlp_params(const Mlp& src, const Mlp& dst, const ParamSet& from, ParamSet& to) {
  for (int l = 0; l < src.layers(); ++l) {
    to.add(dst.weight_name(l), from.at(src.weight_name(l)));
    to.add(dst.bias_name(l), from.at(src.bias_name(l)));
  }
}

}  // namespace

AdapterStack make_adapter(const DenoiserModel& base, const ParamSet& base_params,
                          const AdapterConfig& cfg, std::uint64_t seed) {
  AdapterStack stack;
  stack.cfg = cfg;
  stack.base_cfg = base.cfg;
  stack.source_layers = select_copy_layers(base.cfg.layers, cfg.blocks, cfg.strategy);

  DenoiserModel copy = stack.copy_model();
  copy_mlp_params(base.embed(), copy.embed(), base_params, stack.params);
  for (int layer : stack.source_layers) {
    copy_mlp_params(base.message_net(layer), copy.message_net(layer), base_params,
                    stack.params);
    copy_mlp_params(base.coord_net(layer), copy.coord_net(layer), base_params,
                    stack.params);
    copy_mlp_params(base.feature_net(layer), copy.feature_net(layer), base_params,
                    stack.params);
    copy_mlp_params(base.frame_mix_net(layer), copy.frame_mix_net(layer), base_params,
                    stack.params);
  }
  for (int b = 0; b < cfg.blocks; ++b) {
    stack.params.add(stack.zc_phi_x(b), Mat::Zero(1, 1));
    stack.params.add(stack.zc_phi_h(b), Mat::Zero(1, base.cfg.hidden));
  }

  Rng rng(mix_seed(seed, 0x61646170ULL));
  if (cfg.variant == ControlVariant::kGlobal) {
    if (cfg.global_dim < 1) {
      throw std::invalid_argument("make_adapter: global variant requires global_dim >= 1");
    }
    stack.encoder().init(stack.params, rng);
  }
  if (cfg.owns_anchor) {
    if (cfg.pred_frames < 1) {
      throw std::invalid_argument("make_adapter: anchor requires pred_frames >= 1");
    }
    stack.anchor().init_params(stack.params, mix_seed(seed, 0x616e6368ULL));
  }

  ablation_mode(stack, cfg.ablation, mix_seed(seed, 0x61626c61ULL));
  return stack;
}

void ablation_mode(AdapterStack& stack, AblationMode mode, std::uint64_t seed) {
  stack.cfg.ablation = mode;
  switch (mode) {
    case AblationMode::kStandard:
      return;
    case AblationMode::kNoZeroConv: {
      Rng rng(mix_seed(seed, 0x7a63ULL));
      for (int b = 0; b < stack.cfg.blocks; ++b) {
        stack.params.mutable_at(stack.zc_phi_x(b)) = rng.normal_mat(1, 1, 0.01);
        stack.params.mutable_at(stack.zc_phi_h(b)) =
            rng.normal_mat(1, stack.base_cfg.hidden, 0.01);
      }
      return;
    }
    case AblationMode::kNoTrainableCopy: {
      DenoiserModel copy = stack.copy_model();
      Rng rng(mix_seed(seed, 0x6672ULL));
      for (int layer : stack.source_layers) {
        for (const Mlp& net : {copy.message_net(layer), copy.coord_net(layer),
                               copy.feature_net(layer), copy.frame_mix_net(layer)}) {
          for (int l = 0; l < net.layers(); ++l) {
            Mat& w = stack.params.mutable_at(net.weight_name(l));
            const double std = 1.0 / std::sqrt(static_cast<double>(w.rows()));
            w = rng.normal_mat(static_cast<int>(w.rows()), static_cast<int>(w.cols()), std);
            stack.params.mutable_at(net.bias_name(l)).setZero();
          }
        }
      }
      return;
    }
  }
}

AdapterOut adapter_forward(Bound& adapter_bound, const AdapterStack& stack, Value coords,
                           Value feats_raw, const GraphTopology& topo, int tau,
                           const Control& control) {
  if (!variant_matches(stack.cfg.variant, control)) {
    throw std::invalid_argument(std::string("adapter_forward: stack bound to another "
                                            "control variant than ") +
                                control_name(control));
  }
  Tape& tape = adapter_bound.tape();
  DenoiserModel copy = stack.copy_model();
  Value t_emb = tape.constant(
      time_embed(tau, copy.cfg.time_dim, std::max(2, copy.cfg.max_step)));

  const int nodes = topo.nodes;
  const int frames = topo.frames;

  Value out_coords, out_feats;
  for (int b = 0; b < stack.cfg.blocks; ++b) {
    CouplingPlan plan = make_coupling_plan(nodes, frames, topo.edges,
                                           copy.cfg.feature_dim, control);

    Value coords_c = coords;
    if (!plan.identity_coords) {
      Value stacked = concat_rows(coords, tape.constant(plan.extra_coords));
      coords_c = gather_rows(stacked, plan.coord_perm);
    }

    Value feats_c = feats_raw;
    if (const auto* global = std::get_if<GlobalControl>(&control)) {
      Value lifted =
          stack.encoder()(adapter_bound, tape.constant(global->signal.transpose()));
      feats_c = add_rowvec(feats_raw, lifted);
    } else if (plan.extra_feats.size() > 0) {
      feats_c = concat_rows(feats_raw, tape.constant(plan.extra_feats));
    }

    GraphTopology coupled_topo =
        GraphTopology::build(plan.out_nodes, plan.out_frames, plan.out_edges);
    Value h = copy.embed()(adapter_bound, feats_c);
    LayerOut lo = layer_forward(adapter_bound, copy, stack.source_layers[b], h, coords_c,
                                coupled_topo, t_emb);
    Value updated = coords_c + lo.delta;

    Value xd = gather_rows(updated, plan.keep_coord_rows);
    Value hd = gather_rows(lo.feats, plan.keep_node_rows);

    Value cz = smul(adapter_bound[stack.zc_phi_x(b)], center_rows(xd));
    Value fz = cmul(hd, repeat_row(adapter_bound[stack.zc_phi_h(b)], nodes));

    out_coords = (b == 0) ? cz : (out_coords + cz);
    out_feats = (b == 0) ? fz : (out_feats + fz);
  }
  return AdapterOut{out_coords, out_feats};
}

FusedOut fused_score(Bound& base_bound, Bound& adapter_bound, const DenoiserModel& base,
                     const AdapterStack& stack, Value coords, Value feats_raw,
                     const GraphTopology& topo, int tau, const Control& control) {
  DenoiserOut b = denoiser_forward(base_bound, base, feats_raw, coords, topo, tau);
  AdapterOut s = adapter_forward(adapter_bound, stack, coords, feats_raw, topo, tau, control);
  return FusedOut{b.eps + s.coords, b.feats + s.feats};
}

namespace {

const FrameControl& frame_control_of(const FinetuneItem& item, const char* what) {
  const auto* fc = std::get_if<FrameControl>(&item.control);
  if (fc == nullptr) {
    throw std::invalid_argument(std::string(what) + ": anchored process needs a frame control");
  }
  return *fc;
}

}  // namespace

namespace {

Mat base_condition_slice(const FrameControl& fc, int nodes, int base_cond_frames) {
  Mat out(static_cast<long>(nodes) * base_cond_frames, 3);
  for (int n = 0; n < nodes; ++n) {
    out.middleRows(static_cast<long>(n) * base_cond_frames, base_cond_frames) =
        fc.coords.middleRows(static_cast<long>(n) * fc.frame_count, base_cond_frames);
  }
  return out;
}

}  // namespace

Value finetune_loss(Bound& base_bound, Bound& adapter_bound, const DenoiserModel& base,
                    const AdapterStack& stack, const FinetuneItem& item,
                    const FinetuneSetup& setup, const NoiseSchedule& sched,
                    std::uint64_t seed, bool include_adapter) {
  Tape& tape = base_bound.tape();
  const GeometricTrajectory& x0 = item.target;
  LossDraw draw = loss_draw(static_cast<int>(x0.coords.rows()), sched, seed);
  GraphTopology topo = GraphTopology::build(x0.nodes(), x0.frames, x0.edges);

  TapeScoreFn fused = [&](Tape& t, Value x_tau, int tau) {
    Value feats_raw = t.constant(x0.node_features);
    Value base_eps;
    if (setup.process == FinetuneProcess::kBaseAnchor) {
      const FrameControl& fc = frame_control_of(item, "finetune_loss");
      Mat base_cond = base_condition_slice(fc, x0.nodes(), setup.base_cond_frames);
      base_eps = denoiser_forward_cond(base_bound, base, feats_raw, x_tau, base_cond,
                                       setup.base_cond_frames, x0.frames, x0.edges, tau)
                     .eps;
    } else {
      base_eps = denoiser_forward(base_bound, base, feats_raw, x_tau, topo, tau).eps;
    }
    if (!include_adapter) return base_eps;
    AdapterOut s =
        adapter_forward(adapter_bound, stack, x_tau, feats_raw, topo, tau, item.control);
    return base_eps + s.coords;
  };

  switch (setup.process) {
    case FinetuneProcess::kSubspace:
      return loss_uncond_with_draw(tape, fused, x0.coords, draw.tau, draw.eps, sched);
    case FinetuneProcess::kAdapterAnchor: {
      const FrameControl& fc = frame_control_of(item, "finetune_loss");
      Value x_r = anchor_mean(adapter_bound, stack.anchor(), fc.coords, fc.frame_count,
                              x0.node_features);
      return loss_cond_with_draw(tape, fused, x0.coords, x_r, draw.tau, draw.eps, sched);
    }
    case FinetuneProcess::kBaseAnchor: {
      const FrameControl& fc = frame_control_of(item, "finetune_loss");
      if (setup.base_cond_frames < 1 || setup.base_cond_frames > fc.frame_count) {
        throw std::invalid_argument("finetune_loss: invalid base condition length");
      }
      AnchorNets nets;
      nets.prefix = base.prefix + ".anchor";
      nets.feature_dim = base.cfg.feature_dim;
      nets.pred_frames = x0.frames;
      Mat base_cond = base_condition_slice(fc, x0.nodes(), setup.base_cond_frames);
      Value x_r = anchor_mean(base_bound, nets, base_cond, setup.base_cond_frames,
                              x0.node_features);
      return loss_cond_with_draw(tape, fused, x0.coords, x_r, draw.tau, draw.eps, sched);
    }
  }
  throw std::logic_error("finetune_loss: unreachable");
}

double finetune_step(const DenoiserModel& base, const ParamSet& base_params,
                     AdapterStack& stack, const std::vector<FinetuneItem>& batch,
                     const FinetuneSetup& setup, const NoiseSchedule& sched,
                     AdamState& opt, std::uint64_t seed) {
  if (batch.empty()) throw std::invalid_argument("finetune_step: empty batch");
  if (!base_params.trainable_names().empty()) {
    throw std::invalid_argument("finetune_step: base ParamSet must be entirely frozen");
  }

  Tape tape;
  Bound base_bound(tape, base_params);
  Bound adapter_bound(tape, stack.params);
  Value total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Value li = finetune_loss(base_bound, adapter_bound, base, stack, batch[i], setup,
                             sched, mix_seed(seed, 0x66747370ULL, i));
    total = (i == 0) ? li : (total + li);
  }
  Value loss = scale(total, 1.0 / static_cast<double>(batch.size()));
  tape.backward(loss);
  GradMap grads = collect_gradients(adapter_bound);
  adam_step(stack.params, grads, opt);
  return tape.value(loss)(0, 0);
}

}  // namespace equiada
