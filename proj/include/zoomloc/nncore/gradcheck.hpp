#pragma once

// Central finite-difference checking for Graph<double>, shared by the unit
// tests and the acceptance suite.

#include <algorithm>
#include <cmath>
#include <vector>

#include "zoomloc/common/rng.hpp"
#include "zoomloc/nncore/graph.hpp"

namespace zoomloc::nncore::gradcheck {

using zoomloc::Rng;
using zoomloc::nncore::Graph;
using zoomloc::nncore::Pad;
using GD = Graph<double>;

// Largest relative error between analytic gradients and central differences
// over every element of the listed nodes.
inline double max_rel_err(GD& g, GD::Id loss, const std::vector<GD::Id>& wrt,
                          double h = 1e-5) {
  g.forward(loss);
  g.backward(loss);
  std::vector<std::vector<double>> analytic;
  for (GD::Id id : wrt) analytic.push_back(g.grad(id));

  double worst = 0;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    auto& tensor = g.tensor(wrt[k]);
    for (std::size_t i = 0; i < tensor.data.size(); ++i) {
      const double orig = tensor.data[i];
      tensor.data[i] = orig + h;
      const double fp = g.forward(loss);
      tensor.data[i] = orig - h;
      const double fm = g.forward(loss);
      tensor.data[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[k][i];
      if (a == 0.0 && std::abs(numeric) < 1e-10) continue;
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  g.forward(loss);  // leave the graph evaluated at the original point
  return worst;
}

inline std::vector<double> random_values(Rng& rng, std::size_t n,
                                         double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Pixel-like values whose 2x2 windows have well-separated entries, so a
// finite-difference nudge cannot flip a maxpool argmax.
inline std::vector<double> pool_safe_values(Rng& rng, int n, int h, int w, int c) {
  std::vector<double> v(static_cast<std::size_t>(n) * h * w * c);
  for (int b = 0; b < n; ++b)
    for (int wr = 0; wr < h / 2; ++wr)
      for (int wc = 0; wc < w / 2; ++wc)
        for (int ch = 0; ch < c; ++ch) {
          double base[4] = {0.2, 0.4, 0.6, 0.8};
          for (int i = 3; i > 0; --i)
            std::swap(base[i], base[rng.uniform_int(i + 1)]);
          for (int dr = 0; dr < 2; ++dr)
            for (int dc = 0; dc < 2; ++dc) {
              const std::size_t idx =
                  ((static_cast<std::size_t>(b) * h + 2 * wr + dr) * w + 2 * wc +
                   dc) *
                      c +
                  ch;
              v[idx] = base[dr * 2 + dc] + rng.uniform(-0.04, 0.04);
            }
        }
  return v;
}

inline std::vector<double> one_hot_rows(Rng& rng, int n, int k) {
  std::vector<double> y(static_cast<std::size_t>(n) * k, 0.0);
  for (int r = 0; r < n; ++r) y[static_cast<std::size_t>(r) * k + rng.uniform_int(k)] = 1.0;
  return y;
}

// Builds a randomized network touching every op kind (conv same+valid, both
// pools, global pool, relu, dense, concat, softmax cross-entropy) and
// returns the largest gradient error across all parameters and the input.
inline double random_graph_error(std::uint64_t seed) {
  Rng rng(seed);
  const int n = 1 + static_cast<int>(rng.uniform_int(2));
  const int hw = 8;  // two pools deep: 8 -> 4 -> 2
  const int cin = 1 + static_cast<int>(rng.uniform_int(3));
  const int c1 = 1 + static_cast<int>(rng.uniform_int(4));
  const int c2 = 1 + static_cast<int>(rng.uniform_int(4));
  const int classes = 2 + static_cast<int>(rng.uniform_int(4));

  GD g;
  const auto x = g.input("x", {n, hw, hw, cin}, true);
  g.set_input(x, pool_safe_values(rng, n, hw, hw, cin));

  const auto w1 = g.param("w1", {3, 3, cin, c1},
                          random_values(rng, 9ull * cin * c1, -0.5, 0.5));
  const auto b1 = g.param("b1", {c1}, random_values(rng, c1, -0.1, 0.1));
  const auto c1n = g.conv2d(x, w1, b1, Pad::Same);
  const auto r1 = g.relu(c1n);
  const auto p1 = g.maxpool2d(r1);  // 4x4

  const auto w2 = g.param("w2", {3, 3, c1, c2},
                          random_values(rng, 9ull * c1 * c2, -0.5, 0.5));
  const auto b2 = g.param("b2", {c2}, random_values(rng, c2, -0.1, 0.1));
  const auto c2n = g.conv2d(p1, w2, b2, Pad::Same);
  const auto p2 = g.avgpool2d(c2n);  // 2x2
  const auto gap = g.global_avgpool(p2);

  // Second branch from a valid-padded conv, to cover valid mode and concat.
  const auto w3 = g.param("w3", {3, 3, cin, c1},
                          random_values(rng, 9ull * cin * c1, -0.5, 0.5));
  const auto b3 = g.param("b3", {c1}, random_values(rng, c1, -0.1, 0.1));
  const auto c3n = g.conv2d(x, w3, b3, Pad::Valid);  // 6x6
  const auto p3 = g.maxpool2d(c3n);                  // 3x3
  const auto gap3 = g.global_avgpool(p3);

  const auto cat = g.concat(gap, gap3);
  const int fused = c2 + c1;
  const auto wd = g.param("wd", {fused, classes},
                          random_values(rng, static_cast<std::size_t>(fused) * classes,
                                        -0.5, 0.5));
  const auto bd = g.param("bd", {classes}, random_values(rng, classes, -0.1, 0.1));
  const auto logits = g.dense(cat, wd, bd);

  const auto y = g.input("y", {n, classes});
  g.set_input(y, one_hot_rows(rng, n, classes));
  const auto loss = g.softmax_xent(logits, y);

  return max_rel_err(g, loss, {x, w1, b1, w2, b2, w3, b3, wd, bd});
}

}  // namespace zoomloc::nncore::gradcheck
