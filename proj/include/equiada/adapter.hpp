#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "equiada/backbone.hpp"
#include "equiada/controls.hpp"
#include "equiada/diffusion.hpp"
#include "equiada/nn.hpp"

namespace equiada {

/// Equivariant zero-convolution: coords -> phi_x * (x - x_bar) with x_bar the
/// CoM over all rows, features -> phi_h (elementwise) h. Both parameters start
/// at exactly zero, so a fresh adapter contributes nothing.
std::pair<Mat, Mat> zero_conv_apply(const Mat& coords, const Mat& feats, double phi_x,
                                    const Eigen::RowVectorXd& phi_h);

enum class CopyStrategy { kStrided, kFirst, kLast };
CopyStrategy copy_strategy_from_string(const std::string& s);

/// Which base layers the adapter copies. Strided picks the first layer of
/// every K = floor(depth/budget) consecutive layers, truncated to budget.
std::vector<int> select_copy_layers(int depth, int budget, CopyStrategy strategy);

enum class AblationMode { kStandard, kNoZeroConv, kNoTrainableCopy };
AblationMode ablation_from_string(const std::string& s);

enum class ControlVariant { kGlobal, kSubgraph, kFrame };
ControlVariant variant_from_string(const std::string& s);
bool variant_matches(ControlVariant variant, const Control& control);

struct AdapterConfig {
  int blocks = 3;
  CopyStrategy strategy = CopyStrategy::kStrided;
  ControlVariant variant = ControlVariant::kFrame;
  AblationMode ablation = AblationMode::kStandard;
  int global_dim = 0;     // K, global variant only
  bool owns_anchor = false;
  int pred_frames = 0;    // anchor gamma length when owns_anchor
};

/// Trainable adapter state: copies of selected base layers (and of the input
/// embedding, shared across blocks), one zero-convolution per block, plus the
/// control encoder and anchor parameters where the variant needs them. Fully
/// disjoint from the frozen base ParamSet.
struct AdapterStack {
  AdapterConfig cfg;
  DenoiserConfig base_cfg;
  std::vector<int> source_layers;
  ParamSet params;

  std::string zc_phi_x(int block) const;
  std::string zc_phi_h(int block) const;
  Mlp encoder() const;       // sigma: R^K -> R^H
  AnchorNets anchor() const; // valid when cfg.owns_anchor
  /// Copy model whose layer indices mirror the base's.
  DenoiserModel copy_model() const;
};

/// Builds the stack from a frozen base: copied parameters bitwise-equal to the
/// base's, zero-convolutions at exactly zero.
AdapterStack make_adapter(const DenoiserModel& base, const ParamSet& base_params,
                          const AdapterConfig& cfg, std::uint64_t seed);

/// Reconfigures a stack in place. kNoZeroConv redraws phi from N(0, 0.01^2);
/// kNoTrainableCopy replaces each copied layer with a fresh random layer.
void ablation_mode(AdapterStack& stack, AblationMode mode, std::uint64_t seed);

struct AdapterOut {
  Value coords;  // (N*T) x 3 conditional score
  Value feats;   // N x hidden
};

/// The adapter score s: per block couple -> copied layer -> decouple ->
/// zero-convolution, with block outputs summed. Exactly zero at initialization.
AdapterOut adapter_forward(Bound& adapter_bound, const AdapterStack& stack,
                           Value coords, Value feats_raw, const GraphTopology& topo,
                           int tau, const Control& control);

struct FusedOut {
  Value eps;
  Value feats;
};

/// Fused conditional score eps_theta + s. At adapter initialization this adds
/// exact zeros, so the fused score equals the base score bitwise.
FusedOut fused_score(Bound& base_bound, Bound& adapter_bound, const DenoiserModel& base,
                     const AdapterStack& stack, Value coords, Value feats_raw,
                     const GraphTopology& topo, int tau, const Control& control);

/// Which forward process drives the fine-tune objective. The base's own
/// process keeps the step-0 loss equal to the base-only loss; the adapter
/// anchor variant centers the process on the learnable anchor built from the
/// frame control (gamma starts at zero, so step 0 still matches base-only).
enum class FinetuneProcess { kSubspace, kAdapterAnchor, kBaseAnchor };

struct FinetuneItem {
  GeometricTrajectory target;
  Control control;
};

struct FinetuneSetup {
  FinetuneProcess process = FinetuneProcess::kSubspace;
  int base_cond_frames = 0;  // kBaseAnchor: the base's native condition length
};

/// Eq-7-style loss for one item on an existing tape. include_adapter = false
/// evaluates the base-only oracle under identical draws.
Value finetune_loss(Bound& base_bound, Bound& adapter_bound, const DenoiserModel& base,
                    const AdapterStack& stack, const FinetuneItem& item,
                    const FinetuneSetup& setup, const NoiseSchedule& sched,
                    std::uint64_t seed, bool include_adapter = true);

/// One optimizer step over a batch: gradients flow only into the adapter's
/// parameters; the frozen base is bitwise untouched. Returns the mean loss.
double finetune_step(const DenoiserModel& base, const ParamSet& base_params,
                     AdapterStack& stack, const std::vector<FinetuneItem>& batch,
                     const FinetuneSetup& setup, const NoiseSchedule& sched,
                     AdamState& opt, std::uint64_t seed);

}  // namespace equiada
