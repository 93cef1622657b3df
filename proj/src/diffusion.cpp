#include "equiada/diffusion.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace equiada {

namespace {

void check_tau(int tau, const NoiseSchedule& sched, const char* what) {
  if (tau < 1 || tau > sched.steps) {
    throw std::invalid_argument(std::string(what) + ": step out of range [1, " +
                                std::to_string(sched.steps) + "]");
  }
}

void check_com_free(const Mat& x, const char* what) {
  const double dev = x.colwise().mean().cwiseAbs().maxCoeff();
  if (dev > 1e-10) {
    throw std::invalid_argument(std::string(what) + ": input is not CoM-free (|mean| = " +
                                std::to_string(dev) + ")");
  }
}

}  // namespace

double NoiseSchedule::beta_at(int tau) const {
  check_tau(tau, *this, "beta_at");
  return beta(tau - 1);
}

double NoiseSchedule::alpha_at(int tau) const {
  check_tau(tau, *this, "alpha_at");
  return alpha(tau - 1);
}

double NoiseSchedule::alpha_bar_at(int tau) const {
  check_tau(tau, *this, "alpha_bar_at");
  return alpha_bar(tau - 1);
}

double NoiseSchedule::sigma_at(int tau) const {
  check_tau(tau, *this, "sigma_at");
  return std::sqrt(sigma2(tau - 1));
}

NoiseSchedule build_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("build_linear_schedule: steps must be >= 1");
  if (beta_start <= 0.0 || beta_start >= 1.0 || beta_end <= 0.0 || beta_end >= 1.0) {
    throw std::invalid_argument("build_linear_schedule: beta values must lie in (0, 1)");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta.resize(steps);
  if (steps == 1) {
    s.beta(0) = beta_start;
  } else {
    for (int i = 0; i < steps; ++i) {
      s.beta(i) = beta_start + (beta_end - beta_start) * i / static_cast<double>(steps - 1);
    }
  }
  s.alpha = 1.0 - s.beta.array();
  s.alpha_bar.resize(steps);
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    prod *= s.alpha(i);
    s.alpha_bar(i) = prod;
  }
  s.sigma2 = s.beta;
  return s;
}

Mat sample_subspace_gaussian(int nodes, int frames, std::uint64_t seed) {
  if (nodes < 1 || frames < 1) {
    throw std::invalid_argument("sample_subspace_gaussian: empty shape");
  }
  Rng rng(seed);
  return com_project(rng.normal_mat(nodes * frames, 3));
}

Mat forward_noise_uncond(const Mat& x0, int tau, const Mat& eps,
                         const NoiseSchedule& sched) {
  check_tau(tau, sched, "forward_noise_uncond");
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) {
    throw std::invalid_argument("forward_noise_uncond: shape mismatch");
  }
  check_com_free(x0, "forward_noise_uncond x0");
  check_com_free(eps, "forward_noise_uncond eps");
  const double ab = sched.alpha_bar_at(tau);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

Mat forward_noise_cond(const Mat& x0, const Mat& x_r, int tau, const Mat& eps,
                       const NoiseSchedule& sched) {
  check_tau(tau, sched, "forward_noise_cond");
  if (x0.rows() != x_r.rows() || x0.cols() != x_r.cols() || x0.rows() != eps.rows() ||
      x0.cols() != eps.cols()) {
    throw std::invalid_argument("forward_noise_cond: shape mismatch");
  }
  const double ab = sched.alpha_bar_at(tau);
  return x_r + std::sqrt(ab) * (x0 - x_r) + std::sqrt(1.0 - ab) * eps;
}

Mat reverse_mean_uncond(const Mat& x_tau, int tau, const Mat& eps_pred,
                        const NoiseSchedule& sched) {
  check_tau(tau, sched, "reverse_mean_uncond");
  if (x_tau.rows() != eps_pred.rows() || x_tau.cols() != eps_pred.cols()) {
    throw std::invalid_argument("reverse_mean_uncond: shape mismatch");
  }
  check_com_free(x_tau, "reverse_mean_uncond x_tau");
  check_com_free(eps_pred, "reverse_mean_uncond eps_pred");
  const double a = sched.alpha_at(tau);
  const double ab = sched.alpha_bar_at(tau);
  const double b = sched.beta_at(tau);
  return (x_tau - (b / std::sqrt(1.0 - ab)) * eps_pred) / std::sqrt(a);
}

Mat reverse_mean_cond(const Mat& x_tau, const Mat& x_r, int tau, const Mat& eps_pred,
                      const NoiseSchedule& sched) {
  check_tau(tau, sched, "reverse_mean_cond");
  if (x_tau.rows() != x_r.rows() || x_tau.cols() != x_r.cols() ||
      x_tau.rows() != eps_pred.rows() || x_tau.cols() != eps_pred.cols()) {
    throw std::invalid_argument("reverse_mean_cond: shape mismatch");
  }
  const double a = sched.alpha_at(tau);
  const double ab = sched.alpha_bar_at(tau);
  const double b = sched.beta_at(tau);
  return x_r + (x_tau - x_r - (b / std::sqrt(1.0 - ab)) * eps_pred) / std::sqrt(a);
}

Mlp AnchorNets::feature_net() const {
  return Mlp{prefix + ".h", {feature_dim, 16, 1}};
}

void AnchorNets::init_params(ParamSet& params, std::uint64_t seed) const {
  Rng rng(seed);
  params.add(gamma_name(), Mat::Zero(pred_frames, 1));
  feature_net().init(params, rng);
}

Value anchor_mean(Bound& bound, const AnchorNets& nets, const Mat& cond_coords,
                  int cond_frames, const Mat& node_features) {
  if (cond_frames < 1) {
    throw std::invalid_argument("anchor_mean: need at least one condition frame");
  }
  const int nodes = static_cast<int>(node_features.rows());
  if (cond_coords.rows() != static_cast<long>(nodes) * cond_frames) {
    throw std::invalid_argument("anchor_mean: condition coordinate shape mismatch");
  }
  Tape& tape = bound.tape();
  const int pred = nets.pred_frames;

  Value h = sigmoid(nets.feature_net()(bound, tape.constant(node_features)));  // N x 1
  Value gamma = bound[nets.gamma_name()];                                      // T x 1
  Value ones = tape.constant(Mat::Ones(nodes, 1));

  // Condition frame s as an N x 3 gather.
  auto cond_frame = [&](int s) {
    std::vector<int> idx(nodes);
    for (int n = 0; n < nodes; ++n) idx[n] = n * cond_frames + s;
    return gather_rows(tape.constant(cond_coords), idx);
  };
  std::vector<Value> frames_v;
  frames_v.reserve(cond_frames);
  for (int s = 0; s < cond_frames; ++s) frames_v.push_back(cond_frame(s));

  // Anchor frames stacked frame-major, then permuted into node-major rows.
  Value anchor_frames;  // (T*N) x 3, row t*N + n
  for (int t = 0; t < pred; ++t) {
    Value g_t = cell(gamma, t, 0);
    Value w_sum;  // running sum of the non-last weights, N x 1
    Value frame_t;
    for (int s = 0; s + 1 < cond_frames; ++s) {
      Value w = smul(g_t, h);
      w_sum = (s == 0) ? w : (w_sum + w);
      Value contrib = cmul_col(frames_v[s], w);
      frame_t = (s == 0) ? contrib : (frame_t + contrib);
    }
    Value w_last = (cond_frames == 1) ? ones : (ones - w_sum);
    Value last = cmul_col(frames_v[cond_frames - 1], w_last);
    frame_t = (cond_frames == 1) ? last : (frame_t + last);
    anchor_frames = (t == 0) ? frame_t : concat_rows(anchor_frames, frame_t);
  }

  std::vector<int> to_node_major(nodes * pred);
  for (int n = 0; n < nodes; ++n) {
    for (int t = 0; t < pred; ++t) to_node_major[n * pred + t] = t * nodes + n;
  }
  return gather_rows(anchor_frames, to_node_major);
}

Mat anchor_mean_value(const ParamSet& params, const AnchorNets& nets,
                      const Mat& cond_coords, int cond_frames, const Mat& node_features) {
  Tape tape;
  Bound bound(tape, params);
  Value v = anchor_mean(bound, nets, cond_coords, cond_frames, node_features);
  return tape.value(v);
}

LossDraw loss_draw(int rows, const NoiseSchedule& sched, std::uint64_t seed) {
  Rng rng(seed);
  LossDraw draw;
  draw.tau = rng.uniform_int(1, sched.steps);
  draw.eps = rng.normal_mat(rows, 3);
  return draw;
}

Value loss_uncond_with_draw(Tape& tape, const TapeScoreFn& score, const Mat& x0_coords,
                            int tau, const Mat& eps_raw, const NoiseSchedule& sched) {
  Mat x0p = com_project(x0_coords);
  Mat eps = com_project(eps_raw);
  Mat x_tau = forward_noise_uncond(x0p, tau, eps, sched);
  Value pred = score(tape, tape.constant(x_tau), tau);
  return sum_sq(pred - tape.constant(eps));
}

Value loss_cond_with_draw(Tape& tape, const TapeScoreFn& score, const Mat& x0_coords,
                          Value x_r, int tau, const Mat& eps, const NoiseSchedule& sched) {
  const double ab = sched.alpha_bar_at(tau);
  Value x0v = tape.constant(x0_coords);
  Value x_tau = x_r + scale(x0v - x_r, std::sqrt(ab)) +
                scale(tape.constant(eps), std::sqrt(1.0 - ab));
  Value pred = score(tape, x_tau, tau);
  return sum_sq(pred - tape.constant(eps));
}

Value loss_uncond(Bound& bound, const DenoiserModel& model,
                  const GeometricTrajectory& x0, const NoiseSchedule& sched,
                  std::uint64_t seed) {
  LossDraw draw = loss_draw(static_cast<int>(x0.coords.rows()), sched, seed);
  GraphTopology topo = GraphTopology::build(x0.nodes(), x0.frames, x0.edges);
  TapeScoreFn score = [&](Tape& tape, Value x_tau, int tau) {
    return denoiser_forward(bound, model, tape.constant(x0.node_features), x_tau, topo,
                            tau)
        .eps;
  };
  return loss_uncond_with_draw(bound.tape(), score, x0.coords, draw.tau, draw.eps, sched);
}

Value loss_cond(Bound& bound, const DenoiserModel& model, const AnchorNets& anchor,
                const GeometricTrajectory& target, const Mat& cond_coords,
                int cond_frames, const NoiseSchedule& sched, std::uint64_t seed) {
  if (cond_frames < 1) {
    throw std::invalid_argument("loss_cond: condition frames must be present");
  }
  LossDraw draw = loss_draw(static_cast<int>(target.coords.rows()), sched, seed);
  Value x_r = anchor_mean(bound, anchor, cond_coords, cond_frames, target.node_features);
  TapeScoreFn score = [&](Tape& tape, Value x_tau, int tau) {
    return denoiser_forward_cond(bound, model, tape.constant(target.node_features), x_tau,
                                 cond_coords, cond_frames, target.frames, target.edges,
                                 tau)
        .eps;
  };
  return loss_cond_with_draw(bound.tape(), score, target.coords, x_r, draw.tau, draw.eps,
                             sched);
}

NoiseFn seeded_noise(std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  return [rng](int /*tau*/, int rows) { return rng->normal_mat(rows, 3); };
}

Mat sample_uncond(const ScoreFn& score, int nodes, int frames, const NoiseSchedule& sched,
                  std::uint64_t seed, const SampleObserver& observer,
                  const NoiseFn& noise) {
  const NoiseFn draw = noise ? noise : seeded_noise(mix_seed(seed, 0x756e636fULL));
  const int rows = nodes * frames;
  Mat x = com_project(draw(sched.steps + 1, rows));
  if (observer) observer(sched.steps, x);
  for (int tau = sched.steps; tau >= 1; --tau) {
    Mat eps_pred = score(x, tau);
    Mat mu = reverse_mean_uncond(x, tau, eps_pred, sched);
    if (tau > 1) {
      x = mu + sched.sigma_at(tau) * com_project(draw(tau, rows));
    } else {
      x = mu;
    }
    if (observer) observer(tau - 1, x);
  }
  return x;
}

Mat sample_cond(const ScoreFn& score, const Mat& x_r, const NoiseSchedule& sched,
                std::uint64_t seed, const SampleObserver& observer,
                const NoiseFn& noise) {
  const NoiseFn draw = noise ? noise : seeded_noise(mix_seed(seed, 0x636f6e64ULL));
  const int rows = static_cast<int>(x_r.rows());
  Mat x = x_r + draw(sched.steps + 1, rows);
  if (observer) observer(sched.steps, x);
  for (int tau = sched.steps; tau >= 1; --tau) {
    Mat eps_pred = score(x, tau);
    Mat mu = reverse_mean_cond(x, x_r, tau, eps_pred, sched);
    if (tau > 1) {
      x = mu + sched.sigma_at(tau) * draw(tau, rows);
    } else {
      x = mu;
    }
    if (observer) observer(tau - 1, x);
  }
  return x;
}

}  // namespace equiada
