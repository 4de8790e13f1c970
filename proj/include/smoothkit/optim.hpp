#ifndef SMOOTHKIT_OPTIM_HPP
#define SMOOTHKIT_OPTIM_HPP

// Adam with coupled weight decay (decay is added to the gradient).

#include "smoothkit/tensor.hpp"

namespace smoothkit {

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long step = 0;
};

class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  Adam(double lr, double weight_decay) : lr_(lr), wd_(weight_decay) {
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be >= 0");
  }

  /// Updates `params[i]` in place from `grads[i]`.
  void step(std::span<Matrix* const> params, std::span<const Matrix> grads) {
    if (params.size() != grads.size()) throw DimensionError("adam: parameter/gradient count mismatch");
    if (state_.m.empty()) {
      for (const Matrix* p : params) {
        state_.m.push_back(Matrix::Zero(p->rows(), p->cols()));
        state_.v.push_back(Matrix::Zero(p->rows(), p->cols()));
      }
    }
    if (state_.m.size() != params.size()) throw DimensionError("adam: parameter count changed");
    ++state_.step;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(state_.step));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(state_.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix& p = *params[i];
      const Matrix& g0 = grads[i];
      if (g0.rows() != p.rows() || g0.cols() != p.cols()) {
        throw DimensionError("adam: gradient shape " + shape_str(g0.rows(), g0.cols()) + " != parameter " +
                             shape_str(p.rows(), p.cols()));
      }
      Matrix g = wd_ != 0.0 ? Matrix(g0 + wd_ * p) : g0;
      state_.m[i] = kBeta1 * state_.m[i] + (1.0 - kBeta1) * g;
      state_.v[i] = kBeta2 * state_.v[i] + (1.0 - kBeta2) * g.cwiseAbs2();
      p.array() -= lr_ * (state_.m[i].array() / c1) / ((state_.v[i].array() / c2).sqrt() + kEps);
    }
  }

  const AdamState& state() const { return state_; }

 private:
  double lr_;
  double wd_;
  AdamState state_;
};

}  // namespace smoothkit

#endif  // SMOOTHKIT_OPTIM_HPP
