#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "driftalign/types.hpp"

namespace driftalign {

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over one parameter group. `name` labels the group in
/// error messages.
class Adam {
 public:
  Adam() = default;
  Adam(std::string name, size_t size, AdamParams params = {})
      : name_(std::move(name)), params_(params), m_(size, 0.0), v_(size, 0.0) {}

  size_t size() const { return m_.size(); }
  long step_count() const { return step_; }
  const AdamParams& params() const { return params_; }
  void set_lr(double lr) { params_.lr = lr; }
  void reset() {
    step_ = 0;
    std::fill(m_.begin(), m_.end(), 0.0);
    std::fill(v_.begin(), v_.end(), 0.0);
  }

  /// Throws Error("numeric") naming the group on a non-finite gradient;
  /// parameters are untouched in that case.
  template <typename T>
  void step(std::span<T> x, std::span<const double> grad) {
    if (x.size() != m_.size() || grad.size() != m_.size()) {
      throw Error("invariant", "Adam[" + name_ + "]: parameter/gradient size mismatch");
    }
    for (size_t i = 0; i < grad.size(); ++i) {
      if (!std::isfinite(grad[i])) {
        throw Error("numeric", "Adam[" + name_ + "]: non-finite gradient at index " + std::to_string(i));
      }
    }
    ++step_;
    const double b1 = params_.beta1, b2 = params_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (size_t i = 0; i < x.size(); ++i) {
      const double g = grad[i];
      m_[i] = b1 * m_[i] + (1.0 - b1) * g;
      v_[i] = b2 * v_[i] + (1.0 - b2) * g * g;
      const double mhat = m_[i] / c1;
      const double vhat = v_[i] / c2;
      x[i] = static_cast<T>(static_cast<double>(x[i]) - params_.lr * mhat / (std::sqrt(vhat) + params_.eps));
    }
  }

 private:
  std::string name_;
  AdamParams params_;
  long step_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace driftalign
