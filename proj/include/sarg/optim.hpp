#pragma once

#include <cmath>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "sarg/errors.hpp"
#include "sarg/prng.hpp"
#include "sarg/tensor.hpp"

namespace sarg {

// A learnable value living outside any tape. grad accumulates across backward
// passes until the optimizer consumes and zeroes it.
struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool trainable = true;

  size_t size() const { return value.size(); }
};

class ParamRegistry {
 public:
  // copying would leave the name index pointing into the source's storage;
  // moves keep deque element addresses stable, so the index survives
  ParamRegistry() = default;
  ParamRegistry(const ParamRegistry&) = delete;
  ParamRegistry& operator=(const ParamRegistry&) = delete;
  ParamRegistry(ParamRegistry&&) = default;
  ParamRegistry& operator=(ParamRegistry&&) = default;

  Parameter& create(const std::string& name, std::vector<int> shape, bool trainable = true) {
    if (by_name_.count(name)) throw InvalidConfig("duplicate parameter name: " + name);
    Parameter p;
    p.name = name;
    p.shape = std::move(shape);
    p.value.assign(ad::numel(p.shape), 0.0);
    p.grad.assign(p.value.size(), 0.0);
    p.trainable = trainable;
    params_.push_back(std::move(p));
    by_name_[name] = &params_.back();
    return params_.back();
  }

  Parameter& get(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw InvalidConfig("unknown parameter: " + name);
    return *it->second;
  }

  const Parameter& get(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw InvalidConfig("unknown parameter: " + name);
    return *it->second;
  }

  bool has(const std::string& name) const { return by_name_.count(name) > 0; }

  std::deque<Parameter>& all() { return params_; }
  const std::deque<Parameter>& all() const { return params_; }

  size_t value_count() const {
    size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  void zero_grads() {
    for (auto& p : params_)
      std::fill(p.grad.begin(), p.grad.end(), 0.0);
  }

 private:
  std::deque<Parameter> params_;
  std::unordered_map<std::string, Parameter*> by_name_;
};

// Put a parameter on a tape. The leaf's backward flushes the tape gradient
// into the parameter's persistent accumulator.
inline ad::Tensor leaf(ad::Tape& tape, Parameter& p) {
  ad::Tensor t = tape.alloc(p.shape, p.trainable);
  t.node->val = p.value;
  if (p.trainable) {
    Parameter* pp = &p;
    t.node->back = [pp](ad::Node& n) {
      for (size_t i = 0; i < n.grad.size(); ++i) pp->grad[i] += n.grad[i];
    };
  }
  return t;
}

// Glorot-uniform fill: bound sqrt(6 / (fan_in + fan_out)).
inline void init_uniform(Parameter& p, SplitMix64& rng, int fan_in, int fan_out) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (auto& v : p.value) v = (2.0 * rng.real() - 1.0) * bound;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam. step() applies accumulated gradients and zeroes them.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamRegistry& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& p : params.all()) {
      if (!p.trainable) continue;
      auto& m = m_[p.name];
      auto& v = v_[p.name];
      if (m.empty()) m.assign(p.size(), 0.0);
      if (v.empty()) v.assign(p.size(), 0.0);
      for (size_t i = 0; i < p.size(); ++i) {
        const double g = p.grad[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p.value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        p.grad[i] = 0.0;
      }
    }
  }

  long step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  // checkpoint plumbing
  const std::unordered_map<std::string, std::vector<double>>& first_moments() const { return m_; }
  const std::unordered_map<std::string, std::vector<double>>& second_moments() const { return v_; }
  void restore(long step, std::unordered_map<std::string, std::vector<double>> m,
               std::unordered_map<std::string, std::vector<double>> v) {
    t_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::unordered_map<std::string, std::vector<double>> m_;
  std::unordered_map<std::string, std::vector<double>> v_;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  size_t worst_index = 0;
};

// Compares reverse-mode gradients against central finite differences for every
// trainable element. f must build a fresh scalar loss on the given tape from
// the registry's current values.
template <typename F>
GradCheckReport grad_check(F&& f, ParamRegistry& params, double eps = 1e-5) {
  if (eps <= 0.0) throw InvalidConfig("grad_check eps must be positive");
  params.zero_grads();
  double base;
  {
    ad::Tape tape;
    ad::Tensor loss = f(tape);
    base = loss.scalar();
    if (!std::isfinite(base)) throw NonFiniteValue("grad_check forward");
    tape.backward(loss);
  }
  std::unordered_map<std::string, std::vector<double>> ad_grads;
  for (auto& p : params.all())
    if (p.trainable) ad_grads[p.name] = p.grad;

  auto eval = [&]() {
    ad::Tape tape;
    double v = f(tape).scalar();
    if (!std::isfinite(v)) throw NonFiniteValue("grad_check perturbed forward");
    return v;
  };

  GradCheckReport report;
  for (auto& p : params.all()) {
    if (!p.trainable) continue;
    const auto& g_ad = ad_grads[p.name];
    for (size_t i = 0; i < p.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + eps;
      const double up = eval();
      p.value[i] = saved - eps;
      const double down = eval();
      p.value[i] = saved;
      const double g_fd = (up - down) / (2.0 * eps);
      // a one-ulp wobble in the loss reaches g_fd as ulp(loss)/(2 eps); the
      // floor keeps exactly-zero derivatives (flat directions such as softmax
      // shift invariance) from scoring that noise as relative error
      const double rel = std::fabs(g_ad[i] - g_fd) /
                         std::max(1e-4, std::fabs(g_ad[i]) + std::fabs(g_fd));
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = p.name;
        report.worst_index = i;
      }
    }
  }
  params.zero_grads();
  return report;
}

}  // namespace sarg
