#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "equiada/rng.hpp"
#include "equiada/tensor.hpp"

namespace equiada {

/// Named parameter tensors with a per-parameter trainable flag. A frozen
/// parameter is never mutated by an optimizer step.
class ParamSet {
 public:
  void add(const std::string& name, Mat value, bool trainable = true);
  bool has(const std::string& name) const;
  const Mat& at(const std::string& name) const;
  Mat& mutable_at(const std::string& name);
  bool trainable(const std::string& name) const;
  void set_trainable(const std::string& name, bool trainable);
  void freeze_all();

  std::vector<std::string> names() const;
  std::vector<std::string> trainable_names() const;
  std::size_t count() const { return entries_.size(); }
  long total_elements() const;

  struct Entry {
    Mat value;
    bool trainable = true;
  };
  const std::map<std::string, Entry>& entries() const { return entries_; }

 private:
  std::map<std::string, Entry> entries_;
};

/// Binds a ParamSet onto a tape: trainable entries become gradient leaves,
/// frozen entries become constants. Each name is bound at most once per tape.
class Bound {
 public:
  Bound(Tape& tape, const ParamSet& params) : tape_(&tape), params_(&params) {}

  Value operator[](const std::string& name);

  Tape& tape() const { return *tape_; }
  const ParamSet& params() const { return *params_; }
  const std::map<std::string, Value>& bound() const { return bound_; }

 private:
  Tape* tape_;
  const ParamSet* params_;
  std::map<std::string, Value> bound_;
};

using GradMap = std::map<std::string, Mat>;

/// Gradients for every trainable parameter of the bound set, after a
/// backward() pass. Parameters the loss does not reach get zero gradients.
GradMap collect_gradients(const Bound& bound);

enum class Activation { kIdentity, kSilu };

/// Plain multilayer perceptron evaluation: x -> act(x W0 + b0) W1 + b1 ...
/// The hidden activation applies between layers; the output stays linear
/// unless activate_output is set. Input rows are independent samples.
Mat mlp_forward(const std::vector<Mat>& weights, const std::vector<Mat>& biases,
                const Mat& input, Activation activation,
                bool activate_output = false);

/// View over named parameters "<prefix>.W<i>" / "<prefix>.b<i>" forming an MLP.
struct Mlp {
  std::string prefix;
  std::vector<int> dims;
  Activation hidden = Activation::kSilu;
  bool activate_output = false;

  int layers() const { return static_cast<int>(dims.size()) - 1; }
  std::string weight_name(int layer) const;
  std::string bias_name(int layer) const;

  /// Adds Gaussian-initialized parameters (std 1/sqrt(fan_in)); the last
  /// layer's weights are additionally scaled by out_scale.
  void init(ParamSet& params, Rng& rng, double out_scale = 1.0,
            bool trainable = true) const;

  Value operator()(Bound& bound, Value x) const;
  Mat eval(const ParamSet& params, const Mat& x) const;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter Adam moments plus the shared step counter.
class AdamState {
 public:
  explicit AdamState(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const { return config_; }
  long step() const { return step_; }

  friend void adam_step(ParamSet& params, const GradMap& grads, AdamState& state);

 private:
  struct Moments {
    Mat m;
    Mat v;
  };
  AdamConfig config_;
  std::map<std::string, Moments> moments_;
  long step_ = 0;
};

/// One bias-corrected Adam update over exactly the trainable parameters.
/// A gradient entry for a frozen or unknown parameter is a contract violation.
void adam_step(ParamSet& params, const GradMap& grads, AdamState& state);

/// Compares tape gradients of a deterministic scalar loss against central
/// finite differences. Returns the max over parameters of
/// |analytic - fd| / max(|analytic|, |fd|, 1e-12), with |.| the Frobenius
/// norm of the parameter's gradient.
double grad_check(const std::function<Value(Tape&, Bound&)>& loss_fn,
                  ParamSet& params, double fd_step = 1e-5);

}  // namespace equiada
