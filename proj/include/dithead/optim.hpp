#pragma once

#include <cmath>
#include <vector>

#include "dithead/tensor.hpp"

namespace dithead {

// Adaptive moment estimation with bias correction. Moments are exposed so the
// checkpoint container can persist them bit-exactly.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& p : params_) {
      p.set_requires_grad(true);
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i];
      if (!p.has_grad()) continue;
      const T* g = p.grad();
      T* w = p.data();
      T* m = m_[i].data();
      T* v = v_[i].data();
      for (int64_t j = 0; j < p.numel(); ++j) {
        double gj = static_cast<double>(g[j]);
        double mj = beta1_ * m[j] + (1.0 - beta1_) * gj;
        double vj = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        double mhat = mj / bc1;
        double vhat = vj / bc2;
        w[j] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void set_learning_rate(double lr) { lr_ = lr; }
  double learning_rate() const { return lr_; }

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

}  // namespace dithead
