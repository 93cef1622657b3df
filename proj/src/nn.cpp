#include "equiada/nn.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace equiada {

void ParamSet::add(const std::string& name, Mat value, bool trainable) {
  if (entries_.count(name) != 0) {
    throw std::invalid_argument("ParamSet: duplicate parameter name " + name);
  }
  if (!value.allFinite()) {
    throw std::invalid_argument("ParamSet: non-finite values in " + name);
  }
  entries_[name] = Entry{std::move(value), trainable};
}

bool ParamSet::has(const std::string& name) const { return entries_.count(name) != 0; }

const Mat& ParamSet::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::invalid_argument("ParamSet: unknown parameter " + name);
  return it->second.value;
}

Mat& ParamSet::mutable_at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::invalid_argument("ParamSet: unknown parameter " + name);
  return it->second.value;
}

bool ParamSet::trainable(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::invalid_argument("ParamSet: unknown parameter " + name);
  return it->second.trainable;
}

void ParamSet::set_trainable(const std::string& name, bool trainable) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::invalid_argument("ParamSet: unknown parameter " + name);
  it->second.trainable = trainable;
}

void ParamSet::freeze_all() {
  for (auto& [name, entry] : entries_) entry.trainable = false;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, entry] : entries_) out.push_back(name);
  return out;
}

std::vector<std::string> ParamSet::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, entry] : entries_) {
    if (entry.trainable) out.push_back(name);
  }
  return out;
}

long ParamSet::total_elements() const {
  long n = 0;
  for (const auto& [name, entry] : entries_) n += entry.value.size();
  return n;
}

Value Bound::operator[](const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Mat& v = params_->at(name);
  Value val = params_->trainable(name) ? tape_->param(v) : tape_->constant(v);
  bound_[name] = val;
  return val;
}

GradMap collect_gradients(const Bound& bound) {
  GradMap grads;
  for (const std::string& name : bound.params().trainable_names()) {
    auto it = bound.bound().find(name);
    if (it != bound.bound().end()) {
      grads[name] = bound.tape().gradient(it->second);
    } else {
      const Mat& v = bound.params().at(name);
      grads[name] = Mat::Zero(v.rows(), v.cols());
    }
  }
  return grads;
}

namespace {

Mat apply_activation(const Mat& x, Activation act) {
  if (act == Activation::kIdentity) return x;
  Eigen::ArrayXXd s = 1.0 / (1.0 + (-x.array()).exp());
  return (x.array() * s).matrix();
}

}  // namespace

Mat mlp_forward(const std::vector<Mat>& weights, const std::vector<Mat>& biases,
                const Mat& input, Activation activation, bool activate_output) {
  if (weights.size() != biases.size()) {
    throw std::invalid_argument("mlp_forward: weight/bias count mismatch");
  }
  Mat x = input;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (x.cols() != weights[l].rows() || biases[l].rows() != 1 ||
        biases[l].cols() != weights[l].cols()) {
      std::ostringstream os;
      os << "mlp_forward: dimension mismatch at layer " << l << " (input "
         << x.rows() << "x" << x.cols() << ", weight " << weights[l].rows() << "x"
         << weights[l].cols() << ")";
      throw std::invalid_argument(os.str());
    }
    x = (x * weights[l]).rowwise() + biases[l].row(0);
    const bool last = (l + 1 == weights.size());
    if (!last || activate_output) x = apply_activation(x, activation);
  }
  return x;
}

std::string Mlp::weight_name(int layer) const {
  return prefix + ".W" + std::to_string(layer);
}

std::string Mlp::bias_name(int layer) const {
  return prefix + ".b" + std::to_string(layer);
}

void Mlp::init(ParamSet& params, Rng& rng, double out_scale, bool trainable) const {
  for (int l = 0; l < layers(); ++l) {
    const double std = 1.0 / std::sqrt(static_cast<double>(dims[l]));
    const double s = (l + 1 == layers()) ? std * out_scale : std;
    params.add(weight_name(l), rng.normal_mat(dims[l], dims[l + 1], s), trainable);
    params.add(bias_name(l), Mat::Zero(1, dims[l + 1]), trainable);
  }
}

Value Mlp::operator()(Bound& bound, Value x) const {
  for (int l = 0; l < layers(); ++l) {
    Value w = bound[weight_name(l)];
    Value b = bound[bias_name(l)];
    const Mat& xv = bound.tape().value(x);
    const Mat& wv = bound.tape().value(w);
    if (xv.cols() != wv.rows()) {
      std::ostringstream os;
      os << "Mlp " << prefix << ": dimension mismatch at layer " << l << " (input cols "
         << xv.cols() << ", weight rows " << wv.rows() << ")";
      throw std::invalid_argument(os.str());
    }
    x = add_rowvec(x * w, b);
    const bool last = (l + 1 == layers());
    if ((!last && hidden == Activation::kSilu) || (last && activate_output)) {
      x = silu(x);
    }
  }
  return x;
}

Mat Mlp::eval(const ParamSet& params, const Mat& x) const {
  std::vector<Mat> ws, bs;
  for (int l = 0; l < layers(); ++l) {
    ws.push_back(params.at(weight_name(l)));
    bs.push_back(params.at(bias_name(l)));
  }
  return mlp_forward(ws, bs, x, hidden, activate_output);
}

void adam_step(ParamSet& params, const GradMap& grads, AdamState& state) {
  for (const auto& [name, g] : grads) {
    if (!params.has(name)) {
      throw std::invalid_argument("adam_step: gradient for unknown parameter " + name);
    }
    if (!params.trainable(name)) {
      throw std::invalid_argument("adam_step: gradient routed to frozen parameter " + name);
    }
  }
  for (const std::string& name : params.trainable_names()) {
    if (grads.count(name) == 0) {
      throw std::invalid_argument("adam_step: missing gradient for trainable parameter " +
                                  name);
    }
  }

  state.step_ += 1;
  const AdamConfig& c = state.config_;
  const double t = static_cast<double>(state.step_);
  const double c1 = 1.0 - std::pow(c.beta1, t);
  const double c2 = 1.0 - std::pow(c.beta2, t);
  // Bias-corrected update with the eps term on the corrected scale:
  //   dp = lr * m-hat / (sqrt(v-hat) + eps * sqrt(c2) / c1)
  const double eps_t = c.eps * std::sqrt(c2) / c1;

  for (const auto& [name, g] : grads) {
    Mat& p = params.mutable_at(name);
    if (g.rows() != p.rows() || g.cols() != p.cols()) {
      throw std::invalid_argument("adam_step: gradient shape mismatch for " + name);
    }
    auto it = state.moments_.find(name);
    if (it == state.moments_.end()) {
      it = state.moments_
               .emplace(name, AdamState::Moments{Mat::Zero(p.rows(), p.cols()),
                                                 Mat::Zero(p.rows(), p.cols())})
               .first;
    }
    Mat& m = it->second.m;
    Mat& v = it->second.v;
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    Eigen::ArrayXXd m_hat = m.array() / c1;
    Eigen::ArrayXXd v_hat = v.array() / c2;
    p.array() -= c.lr * m_hat / (v_hat.sqrt() + eps_t);
  }
}

double grad_check(const std::function<Value(Tape&, Bound&)>& loss_fn,
                  ParamSet& params, double fd_step) {
  if (fd_step <= 0.0) throw std::invalid_argument("grad_check: fd_step must be positive");

  GradMap analytic;
  {
    Tape tape;
    Bound bound(tape, params);
    Value loss = loss_fn(tape, bound);
    tape.backward(loss);
    analytic = collect_gradients(bound);
  }

  auto eval_loss = [&]() {
    Tape tape;
    Bound bound(tape, params);
    Value loss = loss_fn(tape, bound);
    return tape.value(loss)(0, 0);
  };

  double max_rel = 0.0;
  for (const std::string& name : params.trainable_names()) {
    Mat& p = params.mutable_at(name);
    const Mat& ga = analytic.at(name);
    Mat gfd(p.rows(), p.cols());
    for (int r = 0; r < p.rows(); ++r) {
      for (int c = 0; c < p.cols(); ++c) {
        const double orig = p(r, c);
        p(r, c) = orig + fd_step;
        const double up = eval_loss();
        p(r, c) = orig - fd_step;
        const double down = eval_loss();
        p(r, c) = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
          std::ostringstream os;
          os << "grad_check: non-finite loss when perturbing " << name << "(" << r << ","
             << c << ")";
          throw std::runtime_error(os.str());
        }
        gfd(r, c) = (up - down) / (2.0 * fd_step);
      }
    }
    const double denom = std::max({ga.norm(), gfd.norm(), 1e-12});
    max_rel = std::max(max_rel, (ga - gfd).norm() / denom);
  }
  return max_rel;
}

}  // namespace equiada
