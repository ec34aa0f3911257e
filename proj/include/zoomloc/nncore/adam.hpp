#pragma once

#include <cmath>
#include <map>
#include <vector>

#include "zoomloc/common/error.hpp"
#include "zoomloc/nncore/graph.hpp"

namespace zoomloc::nncore {

// Adam with decoupled weight decay: the decay p -= lr*wd*p is applied to the
// parameter directly, before the bias-corrected moment update, and never
// enters the moment estimates.
template <typename T>
class Adam {
 public:
  struct Hyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  explicit Adam(Hyper h) : h_(h) {}

  double lr() const { return h_.lr; }
  void set_lr(double lr) { h_.lr = lr; }
  int steps() const { return t_; }

  // Clears moments and the step counter; used when a training stage hands
  // over to the next one.
  void reset() {
    t_ = 0;
    moments_.clear();
  }

  void step(Graph<T>& g) {
    ++t_;
    const double bc1 = 1.0 - std::pow(h_.beta1, t_);
    const double bc2 = 1.0 - std::pow(h_.beta2, t_);
    for (const typename Graph<T>::Id id : g.params()) {
      if (!g.trainable(id)) continue;
      Tensor<T>& p = g.tensor(id);
      if (p.grad.size() != p.data.size())
        throw GraphNotEvaluated("parameter has no gradient: " + g.name(id));
      auto& [m, v] = moments_[id];
      if (m.size() != p.data.size()) {
        m.assign(p.data.size(), T(0));
        v.assign(p.data.size(), T(0));
      }
      for (std::size_t i = 0; i < p.data.size(); ++i) {
        const double grad = static_cast<double>(p.grad[i]);
        double value = static_cast<double>(p.data[i]);
        value -= h_.lr * h_.weight_decay * value;
        double mi = h_.beta1 * m[i] + (1.0 - h_.beta1) * grad;
        double vi = h_.beta2 * v[i] + (1.0 - h_.beta2) * grad * grad;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        value -= h_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + h_.eps);
        p.data[i] = static_cast<T>(value);
      }
    }
  }

 private:
  Hyper h_;
  int t_ = 0;
  std::map<int, std::pair<std::vector<T>, std::vector<T>>> moments_;
};

}  // namespace zoomloc::nncore
