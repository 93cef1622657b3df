#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "equiada/backbone.hpp"
#include "equiada/geometry.hpp"
#include "equiada/nn.hpp"

namespace equiada {

/// Per-step noising tables, 1-based step index tau in {1..steps}.
struct NoiseSchedule {
  int steps = 0;
  Eigen::VectorXd beta;
  Eigen::VectorXd alpha;
  Eigen::VectorXd alpha_bar;
  Eigen::VectorXd sigma2;  // reverse variance, sigma^2_tau = beta_tau

  double beta_at(int tau) const;
  double alpha_at(int tau) const;
  double alpha_bar_at(int tau) const;
  double sigma_at(int tau) const;
};

/// Linear interpolation of beta from beta_start to beta_end over `steps`.
NoiseSchedule build_linear_schedule(int steps, double beta_start, double beta_end);

/// Standard Gaussian draw projected onto the CoM-free subspace, (N*T) x 3.
Mat sample_subspace_gaussian(int nodes, int frames, std::uint64_t seed);

/// x_tau = sqrt(abar) x0 + sqrt(1-abar) eps, both inputs CoM-free (checked).
Mat forward_noise_uncond(const Mat& x0, int tau, const Mat& eps, const NoiseSchedule& sched);

/// Anchored process: x_tau = x_r + sqrt(abar) (x0 - x_r) + sqrt(1-abar) eps.
Mat forward_noise_cond(const Mat& x0, const Mat& x_r, int tau, const Mat& eps,
                       const NoiseSchedule& sched);

/// mu = (x_tau - beta/sqrt(1-abar) eps_pred) / sqrt(alpha); inputs CoM-free.
Mat reverse_mean_uncond(const Mat& x_tau, int tau, const Mat& eps_pred,
                        const NoiseSchedule& sched);

/// mu = x_r + (x_tau - x_r - beta/sqrt(1-abar) eps_pred) / sqrt(alpha).
Mat reverse_mean_cond(const Mat& x_tau, const Mat& x_r, int tau, const Mat& eps_pred,
                      const NoiseSchedule& sched);

/// Learnable anchor: per predicted frame t, a per-node convex combination of
/// the condition frames, with the last weight closing the sum to one.
struct AnchorNets {
  std::string prefix = "anchor";  // parameters "<prefix>.gamma", "<prefix>.h.*"
  int feature_dim = 2;
  int pred_frames = 1;

  std::string gamma_name() const { return prefix + ".gamma"; }
  Mlp feature_net() const;
  /// gamma starts at zero, so the initial anchor is the last condition frame.
  void init_params(ParamSet& params, std::uint64_t seed) const;
};

/// Anchor coordinates on tape, (N*T) x 3. cond_coords is (N*Tc) x 3.
Value anchor_mean(Bound& bound, const AnchorNets& nets, const Mat& cond_coords,
                  int cond_frames, const Mat& node_features);

/// Anchor coordinates evaluated through a scratch tape.
Mat anchor_mean_value(const ParamSet& params, const AnchorNets& nets,
                      const Mat& cond_coords, int cond_frames, const Mat& node_features);

/// Noise prediction on tape, for plugging stub predictors into the losses.
using TapeScoreFn = std::function<Value(Tape& tape, Value x_tau, int tau)>;

/// tau uniform on {1..steps} plus a raw standard-Gaussian draw, from seed.
struct LossDraw {
  int tau = 1;
  Mat eps;
};
LossDraw loss_draw(int rows, const NoiseSchedule& sched, std::uint64_t seed);

/// Subspace denoising loss with an explicit draw: the raw noise is projected,
/// x0 is projected, and the loss is the sum of squared errors over all
/// (node, frame, coordinate) entries.
Value loss_uncond_with_draw(Tape& tape, const TapeScoreFn& score, const Mat& x0_coords,
                            int tau, const Mat& eps_raw, const NoiseSchedule& sched);

/// Anchored conditional loss with an explicit draw; x_r lives on the tape so
/// gradients reach the anchor parameters through the noised input.
Value loss_cond_with_draw(Tape& tape, const TapeScoreFn& score, const Mat& x0_coords,
                          Value x_r, int tau, const Mat& eps, const NoiseSchedule& sched);

/// Subspace denoising loss for one trajectory; tau and noise derive from seed.
Value loss_uncond(Bound& bound, const DenoiserModel& model,
                  const GeometricTrajectory& x0, const NoiseSchedule& sched,
                  std::uint64_t seed);

/// Anchored conditional denoising loss; gradients reach the anchor parameters
/// through both the noised input and the model.
Value loss_cond(Bound& bound, const DenoiserModel& model, const AnchorNets& anchor,
                const GeometricTrajectory& target, const Mat& cond_coords,
                int cond_frames, const NoiseSchedule& sched, std::uint64_t seed);

/// Noise prediction for the sampler: coords (N*T) x 3 at step tau -> score.
using ScoreFn = std::function<Mat(const Mat& coords, int tau)>;
/// Observer over sampler intermediates (called after each reverse step and
/// once for the initial draw with tau = steps).
using SampleObserver = std::function<void(int tau, const Mat& x)>;
/// Source of standard-Gaussian rows for the samplers. Called with
/// tau = steps + 1 for the prior draw and with tau = steps..2 for the reverse
/// noise added after step tau. Overriding it makes sampling paths replayable.
using NoiseFn = std::function<Mat(int tau, int rows)>;

/// Seeded default noise source.
NoiseFn seeded_noise(std::uint64_t seed);

/// Ancestral sampling from the subspace prior; every intermediate stays
/// CoM-free (prior and reverse noise are drawn then projected).
Mat sample_uncond(const ScoreFn& score, int nodes, int frames, const NoiseSchedule& sched,
                  std::uint64_t seed, const SampleObserver& observer = {},
                  const NoiseFn& noise = {});

/// Ancestral sampling of the anchored process starting from N(x_r, I).
Mat sample_cond(const ScoreFn& score, const Mat& x_r, const NoiseSchedule& sched,
                std::uint64_t seed, const SampleObserver& observer = {},
                const NoiseFn& noise = {});

}  // namespace equiada
