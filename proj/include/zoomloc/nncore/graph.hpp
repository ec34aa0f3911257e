#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "zoomloc/common/error.hpp"
#include "zoomloc/nncore/tensor.hpp"

namespace zoomloc::nncore {

enum class Pad { Same, Valid };

// Static computation graph: nodes are appended in dependency order, so the
// insertion order is already topological. Values live in the graph; params
// are nodes like everything else, which makes hard weight sharing a matter
// of referencing the same node id from two branches.
template <typename T>
class Graph {
 public:
  using Id = int;

  enum class Op {
    Input,
    Param,
    Conv2d,
    MaxPool2,
    AvgPool2,
    GlobalAvgPool,
    Relu,
    Dense,
    Concat,
    SoftmaxXent,
    SigmoidBce,
  };

  Id input(const std::string& name, std::vector<int> shape,
           bool requires_grad = false) {
    Node node;
    node.op = Op::Input;
    node.name = name;
    node.t = Tensor<T>(std::move(shape));
    node.needs_grad = requires_grad;
    node.batched = true;
    return push(std::move(node));
  }

  Id param(const std::string& name, std::vector<int> shape,
           std::vector<T> init, bool trainable = true) {
    Node node;
    node.op = Op::Param;
    node.name = name;
    node.t = Tensor<T>(std::move(shape));
    if (init.size() != node.t.data.size())
      throw ShapeMismatch("initializer size does not match " +
                          shape_str(node.t.shape) + " for " + name);
    node.t.data = std::move(init);
    node.trainable = trainable;
    node.needs_grad = trainable;
    return push(std::move(node));
  }

  Id conv2d(Id x, Id w, Id b, Pad pad) {
    Node node = op_node(Op::Conv2d, {x, w, b});
    node.pad = pad;
    return push(std::move(node));
  }
  Id maxpool2d(Id x) { return push(op_node(Op::MaxPool2, {x})); }
  Id avgpool2d(Id x) { return push(op_node(Op::AvgPool2, {x})); }
  Id global_avgpool(Id x) { return push(op_node(Op::GlobalAvgPool, {x})); }
  Id relu(Id x) { return push(op_node(Op::Relu, {x})); }
  Id dense(Id x, Id w, Id b) { return push(op_node(Op::Dense, {x, w, b})); }
  Id concat(Id a, Id b) { return push(op_node(Op::Concat, {a, b})); }
  Id softmax_xent(Id logits, Id onehot) {
    return push(op_node(Op::SoftmaxXent, {logits, onehot}));
  }
  Id sigmoid_bce(Id logits, Id targets) {
    return push(op_node(Op::SigmoidBce, {logits, targets}));
  }

  void set_input(Id id, const std::vector<T>& values) {
    Node& node = at(id);
    if (node.op != Op::Input) throw ConfigError("set_input on a non-input node");
    if (values.size() != node.t.data.size())
      throw ShapeMismatch("input size " + std::to_string(values.size()) +
                          " does not match " + shape_str(node.t.shape));
    node.t.data = values;
    last_eval_ = -1;
  }

  // Re-dimension every batched input to `n` rows and re-infer downstream
  // shapes. Parameters are untouched.
  void set_batch(int n) {
    if (n < 1) throw ShapeMismatch("batch size must be >= 1");
    for (Node& node : nodes_) {
      if (node.op == Op::Input && node.batched) {
        node.t.shape[0] = n;
        node.t.data.assign(node.t.numel(), T(0));
        node.t.grad.clear();
      } else if (node.op != Op::Input && node.op != Op::Param) {
        infer(node);
        node.t.grad.clear();
      }
    }
    last_eval_ = -1;
  }

  int batch() const {
    for (const Node& node : nodes_)
      if (node.op == Op::Input && node.batched) return node.t.shape[0];
    return 0;
  }

  void set_trainable(Id id, bool trainable) {
    Node& node = at(id);
    if (node.op != Op::Param) throw ConfigError("set_trainable on a non-param node");
    node.trainable = trainable;
    node.needs_grad = trainable;
    refresh_requires();
  }

  const Tensor<T>& value(Id id) const { return at(id).t; }
  Tensor<T>& tensor(Id id) { return at(id).t; }
  const std::vector<T>& grad(Id id) const {
    const Node& node = at(id);
    if (node.t.grad.size() != node.t.data.size())
      throw GraphNotEvaluated("no gradient stored for node " + std::to_string(id));
    return node.t.grad;
  }
  bool trainable(Id id) const { return at(id).trainable; }
  const std::string& name(Id id) const { return at(id).name; }

  std::vector<Id> params() const {
    std::vector<Id> ids;
    for (Id i = 0; i < static_cast<Id>(nodes_.size()); ++i)
      if (nodes_[i].op == Op::Param) ids.push_back(i);
    return ids;
  }

  Id find_param(const std::string& name) const {
    for (Id i = 0; i < static_cast<Id>(nodes_.size()); ++i)
      if (nodes_[i].op == Op::Param && nodes_[i].name == name) return i;
    throw MissingTensor("no parameter named " + name);
  }

  // Evaluates every ancestor of `target` in insertion order and returns the
  // target's first element (the loss for scalar nodes).
  T forward(Id target) {
    const std::vector<bool> needed = ancestors(target);
    for (Id i = 0; i <= target; ++i)
      if (needed[i]) eval(nodes_[i]);
    last_eval_ = target;
    return at(target).t.data[0];
  }

  // Reverse pass from `target`, accumulating into the grad buffers of every
  // node on a path to a grad-requiring leaf. forward(target) must have run.
  void backward(Id target) {
    if (last_eval_ != target)
      throw GraphNotEvaluated("backward without a matching forward");
    if (at(target).t.numel() != 1)
      throw ShapeMismatch("backward target must be scalar");
    if (!at(target).needs_grad) return;  // nothing trainable feeds the target
    const std::vector<bool> needed = ancestors(target);
    for (Id i = 0; i <= target; ++i) {
      Node& node = nodes_[i];
      if (!needed[i] || !node.needs_grad) continue;
      if (node.t.grad.size() != node.t.data.size()) node.t.alloc_grad();
      node.t.zero_grad();
    }
    at(target).t.grad[0] = T(1);
    for (Id i = target; i >= 0; --i) {
      Node& node = nodes_[i];
      if (needed[i] && node.needs_grad && node.op != Op::Input && node.op != Op::Param)
        grad_step(node);
    }
  }

 private:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<Mat>;
  using ConstMatMap = Eigen::Map<const Mat>;

  struct Node {
    Op op;
    std::vector<Id> in;
    Tensor<T> t;
    std::string name;
    bool needs_grad = false;
    bool trainable = false;
    bool batched = false;
    Pad pad = Pad::Valid;
    std::vector<int> argmax;  // maxpool routing
    std::vector<T> col;       // conv im2col cache / loss softmax cache
  };

  std::vector<Node> nodes_;
  Id last_eval_ = -1;

  Node& at(Id id) {
    if (id < 0 || id >= static_cast<Id>(nodes_.size()))
      throw OutOfRange("node id " + std::to_string(id));
    return nodes_[id];
  }
  const Node& at(Id id) const {
    if (id < 0 || id >= static_cast<Id>(nodes_.size()))
      throw OutOfRange("node id " + std::to_string(id));
    return nodes_[id];
  }

  Node op_node(Op op, std::vector<Id> in) {
    Node node;
    node.op = op;
    node.in = std::move(in);
    for (Id i : node.in) {
      const Node& src = at(i);
      node.needs_grad = node.needs_grad || src.needs_grad;
    }
    return node;
  }

  Id push(Node node) {
    if (node.op != Op::Input && node.op != Op::Param) infer(node);
    nodes_.push_back(std::move(node));
    last_eval_ = -1;
    return static_cast<Id>(nodes_.size()) - 1;
  }

  void refresh_requires() {
    for (Node& node : nodes_) {
      if (node.op == Op::Input || node.op == Op::Param) continue;
      bool req = false;
      for (Id i : node.in) req = req || nodes_[i].needs_grad;
      node.needs_grad = req;
    }
  }

  std::vector<bool> ancestors(Id target) const {
    at(target);
    std::vector<bool> needed(nodes_.size(), false);
    std::vector<Id> stack = {target};
    while (!stack.empty()) {
      const Id id = stack.back();
      stack.pop_back();
      if (needed[id]) continue;
      needed[id] = true;
      for (Id i : nodes_[id].in) stack.push_back(i);
    }
    return needed;
  }

  static void expect_rank(const Node& node, std::size_t rank, const char* what) {
    if (node.t.shape.size() != rank)
      throw ShapeMismatch(std::string(what) + " expects rank " +
                          std::to_string(rank) + ", got " +
                          shape_str(node.t.shape));
  }

  // Shape inference doubles as build-time validation and is re-run by
  // set_batch.
  void infer(Node& node) {
    switch (node.op) {
      case Op::Input:
      case Op::Param:
        return;
      case Op::Conv2d: {
        const Node& x = at(node.in[0]);
        const Node& w = at(node.in[1]);
        const Node& b = at(node.in[2]);
        expect_rank(x, 4, "conv2d input");
        expect_rank(w, 4, "conv2d weight");
        expect_rank(b, 1, "conv2d bias");
        const int kh = w.t.shape[0], kw = w.t.shape[1];
        const int cin = w.t.shape[2], cout = w.t.shape[3];
        if (x.t.shape[3] != cin)
          throw ShapeMismatch("conv2d channels: input " + shape_str(x.t.shape) +
                              " vs weight " + shape_str(w.t.shape));
        if (b.t.shape[0] != cout) throw ShapeMismatch("conv2d bias width");
        int oh, ow;
        if (node.pad == Pad::Same) {
          if (kh % 2 == 0 || kw % 2 == 0)
            throw ShapeMismatch("same padding needs odd kernel sides");
          oh = x.t.shape[1];
          ow = x.t.shape[2];
        } else {
          oh = x.t.shape[1] - kh + 1;
          ow = x.t.shape[2] - kw + 1;
          if (oh < 1 || ow < 1) throw ShapeMismatch("conv2d kernel exceeds input");
        }
        node.t = Tensor<T>({x.t.shape[0], oh, ow, cout});
        return;
      }
      case Op::MaxPool2:
      case Op::AvgPool2: {
        const Node& x = at(node.in[0]);
        expect_rank(x, 4, "pool2d input");
        if (x.t.shape[1] % 2 != 0 || x.t.shape[2] % 2 != 0)
          throw ShapeMismatch("pool2d needs even spatial dims, got " +
                              shape_str(x.t.shape));
        node.t = Tensor<T>(
            {x.t.shape[0], x.t.shape[1] / 2, x.t.shape[2] / 2, x.t.shape[3]});
        return;
      }
      case Op::GlobalAvgPool: {
        const Node& x = at(node.in[0]);
        expect_rank(x, 4, "global_avgpool input");
        node.t = Tensor<T>({x.t.shape[0], x.t.shape[3]});
        return;
      }
      case Op::Relu: {
        node.t = Tensor<T>(at(node.in[0]).t.shape);
        return;
      }
      case Op::Dense: {
        const Node& x = at(node.in[0]);
        const Node& w = at(node.in[1]);
        const Node& b = at(node.in[2]);
        expect_rank(x, 2, "dense input");
        expect_rank(w, 2, "dense weight");
        expect_rank(b, 1, "dense bias");
        if (x.t.shape[1] != w.t.shape[0])
          throw ShapeMismatch("dense width: input " + shape_str(x.t.shape) +
                              " vs weight " + shape_str(w.t.shape));
        if (b.t.shape[0] != w.t.shape[1]) throw ShapeMismatch("dense bias width");
        node.t = Tensor<T>({x.t.shape[0], w.t.shape[1]});
        return;
      }
      case Op::Concat: {
        const Node& a = at(node.in[0]);
        const Node& b = at(node.in[1]);
        expect_rank(a, 2, "concat input");
        expect_rank(b, 2, "concat input");
        if (a.t.shape[0] != b.t.shape[0])
          throw ShapeMismatch("concat batch dims differ");
        node.t = Tensor<T>({a.t.shape[0], a.t.shape[1] + b.t.shape[1]});
        return;
      }
      case Op::SoftmaxXent:
      case Op::SigmoidBce: {
        const Node& z = at(node.in[0]);
        const Node& y = at(node.in[1]);
        expect_rank(z, 2, "loss logits");
        expect_rank(y, 2, "loss targets");
        if (z.t.shape != y.t.shape)
          throw ShapeMismatch("loss logits " + shape_str(z.t.shape) +
                              " vs targets " + shape_str(y.t.shape));
        if (node.op == Op::SigmoidBce && z.t.shape[1] != 1)
          throw ShapeMismatch("sigmoid_bce expects a single logit column");
        node.t = Tensor<T>({1});
        return;
      }
    }
    throw ConfigError("unknown op");
  }

  void eval(Node& node) {
    switch (node.op) {
      case Op::Input:
      case Op::Param:
        return;
      case Op::Conv2d:
        return eval_conv(node);
      case Op::MaxPool2:
        return eval_maxpool(node);
      case Op::AvgPool2:
        return eval_avgpool(node);
      case Op::GlobalAvgPool:
        return eval_gap(node);
      case Op::Relu: {
        const auto& x = at(node.in[0]).t.data;
        for (std::size_t i = 0; i < x.size(); ++i)
          node.t.data[i] = x[i] > T(0) ? x[i] : T(0);
        return;
      }
      case Op::Dense:
        return eval_dense(node);
      case Op::Concat:
        return eval_concat(node);
      case Op::SoftmaxXent:
        return eval_softmax_xent(node);
      case Op::SigmoidBce:
        return eval_sigmoid_bce(node);
    }
  }

  void grad_step(Node& node) {
    switch (node.op) {
      case Op::Input:
      case Op::Param:
        return;
      case Op::Conv2d:
        return grad_conv(node);
      case Op::MaxPool2:
        return grad_maxpool(node);
      case Op::AvgPool2:
        return grad_avgpool(node);
      case Op::GlobalAvgPool:
        return grad_gap(node);
      case Op::Relu: {
        Node& x = at(node.in[0]);
        if (!x.needs_grad) return;
        for (std::size_t i = 0; i < x.t.data.size(); ++i)
          if (x.t.data[i] > T(0)) x.t.grad[i] += node.t.grad[i];
        return;
      }
      case Op::Dense:
        return grad_dense(node);
      case Op::Concat:
        return grad_concat(node);
      case Op::SoftmaxXent:
        return grad_softmax_xent(node);
      case Op::SigmoidBce:
        return grad_sigmoid_bce(node);
    }
  }

  // --- conv2d -------------------------------------------------------------

  void eval_conv(Node& node) {
    const Node& xn = at(node.in[0]);
    const Node& wn = at(node.in[1]);
    const Node& bn = at(node.in[2]);
    const int n = xn.t.shape[0], h = xn.t.shape[1], w = xn.t.shape[2],
              cin = xn.t.shape[3];
    const int kh = wn.t.shape[0], kw = wn.t.shape[1], cout = wn.t.shape[3];
    const int oh = node.t.shape[1], ow = node.t.shape[2];
    const int ph = node.pad == Pad::Same ? (kh - 1) / 2 : 0;
    const int pw = node.pad == Pad::Same ? (kw - 1) / 2 : 0;

    const std::size_t rows = static_cast<std::size_t>(n) * oh * ow;
    const std::size_t cols = static_cast<std::size_t>(kh) * kw * cin;
    node.col.assign(rows * cols, T(0));
    const T* x = xn.t.data.data();
    for (int b = 0; b < n; ++b) {
      for (int r = 0; r < oh; ++r) {
        for (int c = 0; c < ow; ++c) {
          T* dst = node.col.data() +
                   ((static_cast<std::size_t>(b) * oh + r) * ow + c) * cols;
          for (int i = 0; i < kh; ++i) {
            const int ir = r - ph + i;
            if (ir < 0 || ir >= h) {
              dst += kw * cin;
              continue;
            }
            const T* src = x + ((static_cast<std::size_t>(b) * h + ir) * w) * cin;
            for (int j = 0; j < kw; ++j) {
              const int ic = c - pw + j;
              if (ic >= 0 && ic < w)
                std::copy(src + ic * cin, src + (ic + 1) * cin, dst);
              dst += cin;
            }
          }
        }
      }
    }

    ConstMatMap colm(node.col.data(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(cols));
    ConstMatMap wm(wn.t.data.data(), static_cast<Eigen::Index>(cols), cout);
    MatMap outm(node.t.data.data(), static_cast<Eigen::Index>(rows), cout);
    outm.noalias() = colm * wm;
    ConstMatMap bm(bn.t.data.data(), 1, cout);
    outm.rowwise() += bm.row(0);
  }

  void grad_conv(Node& node) {
    Node& xn = at(node.in[0]);
    Node& wn = at(node.in[1]);
    Node& bn = at(node.in[2]);
    const int n = xn.t.shape[0], h = xn.t.shape[1], w = xn.t.shape[2],
              cin = xn.t.shape[3];
    const int kh = wn.t.shape[0], kw = wn.t.shape[1], cout = wn.t.shape[3];
    const int oh = node.t.shape[1], ow = node.t.shape[2];
    const int ph = node.pad == Pad::Same ? (kh - 1) / 2 : 0;
    const int pw = node.pad == Pad::Same ? (kw - 1) / 2 : 0;
    const std::size_t rows = static_cast<std::size_t>(n) * oh * ow;
    const std::size_t cols = static_cast<std::size_t>(kh) * kw * cin;

    ConstMatMap dout(node.t.grad.data(), static_cast<Eigen::Index>(rows), cout);
    if (wn.needs_grad) {
      ConstMatMap colm(node.col.data(), static_cast<Eigen::Index>(rows),
                       static_cast<Eigen::Index>(cols));
      MatMap dw(wn.t.grad.data(), static_cast<Eigen::Index>(cols), cout);
      dw.noalias() += colm.transpose() * dout;
    }
    if (bn.needs_grad) {
      MatMap db(bn.t.grad.data(), 1, cout);
      db.row(0) += dout.colwise().sum();
    }
    if (!xn.needs_grad) return;

    Mat dcol = dout * ConstMatMap(wn.t.data.data(),
                                  static_cast<Eigen::Index>(cols), cout)
                          .transpose();
    T* dx = xn.t.grad.data();
    for (int b = 0; b < n; ++b) {
      for (int r = 0; r < oh; ++r) {
        for (int c = 0; c < ow; ++c) {
          const T* src =
              dcol.data() + ((static_cast<std::size_t>(b) * oh + r) * ow + c) * cols;
          for (int i = 0; i < kh; ++i) {
            const int ir = r - ph + i;
            if (ir < 0 || ir >= h) {
              src += kw * cin;
              continue;
            }
            T* drow = dx + ((static_cast<std::size_t>(b) * h + ir) * w) * cin;
            for (int j = 0; j < kw; ++j) {
              const int ic = c - pw + j;
              if (ic >= 0 && ic < w)
                for (int ch = 0; ch < cin; ++ch) drow[ic * cin + ch] += src[ch];
              src += cin;
            }
          }
        }
      }
    }
  }

  // --- pooling ------------------------------------------------------------

  void eval_maxpool(Node& node) {
    const Node& xn = at(node.in[0]);
    const int n = node.t.shape[0], oh = node.t.shape[1], ow = node.t.shape[2],
              ch = node.t.shape[3];
    const int w = xn.t.shape[2];
    node.argmax.assign(node.t.data.size(), 0);
    for (int b = 0; b < n; ++b) {
      for (int r = 0; r < oh; ++r) {
        for (int c = 0; c < ow; ++c) {
          for (int k = 0; k < ch; ++k) {
            T best = -std::numeric_limits<T>::infinity();
            int arg = 0;
            for (int dr = 0; dr < 2; ++dr) {
              for (int dc = 0; dc < 2; ++dc) {
                const std::size_t idx =
                    ((static_cast<std::size_t>(b) * (oh * 2) + 2 * r + dr) * w +
                     2 * c + dc) *
                        ch +
                    k;
                if (xn.t.data[idx] > best) {
                  best = xn.t.data[idx];
                  arg = dr * 2 + dc;
                }
              }
            }
            const std::size_t out_idx =
                ((static_cast<std::size_t>(b) * oh + r) * ow + c) * ch + k;
            node.t.data[out_idx] = best;
            node.argmax[out_idx] = arg;
          }
        }
      }
    }
  }

  void grad_maxpool(Node& node) {
    Node& xn = at(node.in[0]);
    if (!xn.needs_grad) return;
    const int n = node.t.shape[0], oh = node.t.shape[1], ow = node.t.shape[2],
              ch = node.t.shape[3];
    const int w = xn.t.shape[2];
    for (int b = 0; b < n; ++b) {
      for (int r = 0; r < oh; ++r) {
        for (int c = 0; c < ow; ++c) {
          for (int k = 0; k < ch; ++k) {
            const std::size_t out_idx =
                ((static_cast<std::size_t>(b) * oh + r) * ow + c) * ch + k;
            const int arg = node.argmax[out_idx];
            const std::size_t in_idx =
                ((static_cast<std::size_t>(b) * (oh * 2) + 2 * r + arg / 2) * w +
                 2 * c + arg % 2) *
                    ch +
                k;
            xn.t.grad[in_idx] += node.t.grad[out_idx];
          }
        }
      }
    }
  }

  void eval_avgpool(Node& node) {
    const Node& xn = at(node.in[0]);
    const int n = node.t.shape[0], oh = node.t.shape[1], ow = node.t.shape[2],
              ch = node.t.shape[3];
    const int w = xn.t.shape[2];
    for (int b = 0; b < n; ++b)
      for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c)
          for (int k = 0; k < ch; ++k) {
            T sum = T(0);
            for (int dr = 0; dr < 2; ++dr)
              for (int dc = 0; dc < 2; ++dc)
                sum += xn.t.data[((static_cast<std::size_t>(b) * (oh * 2) + 2 * r +
                                   dr) *
                                      w +
                                  2 * c + dc) *
                                     ch +
                                 k];
            node.t.data[((static_cast<std::size_t>(b) * oh + r) * ow + c) * ch + k] =
                sum / T(4);
          }
  }

  void grad_avgpool(Node& node) {
    Node& xn = at(node.in[0]);
    if (!xn.needs_grad) return;
    const int n = node.t.shape[0], oh = node.t.shape[1], ow = node.t.shape[2],
              ch = node.t.shape[3];
    const int w = xn.t.shape[2];
    for (int b = 0; b < n; ++b)
      for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c)
          for (int k = 0; k < ch; ++k) {
            const T g =
                node.t
                    .grad[((static_cast<std::size_t>(b) * oh + r) * ow + c) * ch + k] /
                T(4);
            for (int dr = 0; dr < 2; ++dr)
              for (int dc = 0; dc < 2; ++dc)
                xn.t.grad[((static_cast<std::size_t>(b) * (oh * 2) + 2 * r + dr) * w +
                           2 * c + dc) *
                              ch +
                          k] += g;
          }
  }

  void eval_gap(Node& node) {
    const Node& xn = at(node.in[0]);
    const int n = xn.t.shape[0], h = xn.t.shape[1], w = xn.t.shape[2],
              ch = xn.t.shape[3];
    const T scale = T(1) / static_cast<T>(h * w);
    for (int b = 0; b < n; ++b) {
      for (int k = 0; k < ch; ++k) {
        T sum = T(0);
        for (int r = 0; r < h; ++r)
          for (int c = 0; c < w; ++c)
            sum += xn.t.data[((static_cast<std::size_t>(b) * h + r) * w + c) * ch + k];
        node.t.data[static_cast<std::size_t>(b) * ch + k] = sum * scale;
      }
    }
  }

  void grad_gap(Node& node) {
    Node& xn = at(node.in[0]);
    if (!xn.needs_grad) return;
    const int n = xn.t.shape[0], h = xn.t.shape[1], w = xn.t.shape[2],
              ch = xn.t.shape[3];
    const T scale = T(1) / static_cast<T>(h * w);
    for (int b = 0; b < n; ++b)
      for (int k = 0; k < ch; ++k) {
        const T g = node.t.grad[static_cast<std::size_t>(b) * ch + k] * scale;
        for (int r = 0; r < h; ++r)
          for (int c = 0; c < w; ++c)
            xn.t.grad[((static_cast<std::size_t>(b) * h + r) * w + c) * ch + k] += g;
      }
  }

  // --- dense / concat -----------------------------------------------------

  void eval_dense(Node& node) {
    const Node& xn = at(node.in[0]);
    const Node& wn = at(node.in[1]);
    const Node& bn = at(node.in[2]);
    const int n = xn.t.shape[0], d = xn.t.shape[1], m = wn.t.shape[1];
    ConstMatMap x(xn.t.data.data(), n, d);
    ConstMatMap w(wn.t.data.data(), d, m);
    MatMap out(node.t.data.data(), n, m);
    out.noalias() = x * w;
    ConstMatMap b(bn.t.data.data(), 1, m);
    out.rowwise() += b.row(0);
  }

  void grad_dense(Node& node) {
    Node& xn = at(node.in[0]);
    Node& wn = at(node.in[1]);
    Node& bn = at(node.in[2]);
    const int n = xn.t.shape[0], d = xn.t.shape[1], m = wn.t.shape[1];
    ConstMatMap dout(node.t.grad.data(), n, m);
    if (wn.needs_grad) {
      ConstMatMap x(xn.t.data.data(), n, d);
      MatMap dw(wn.t.grad.data(), d, m);
      dw.noalias() += x.transpose() * dout;
    }
    if (bn.needs_grad) {
      MatMap db(bn.t.grad.data(), 1, m);
      db.row(0) += dout.colwise().sum();
    }
    if (xn.needs_grad) {
      ConstMatMap w(wn.t.data.data(), d, m);
      MatMap dx(xn.t.grad.data(), n, d);
      dx.noalias() += dout * w.transpose();
    }
  }

  void eval_concat(Node& node) {
    const Node& a = at(node.in[0]);
    const Node& b = at(node.in[1]);
    const int n = node.t.shape[0];
    const int da = a.t.shape[1], db = b.t.shape[1];
    for (int r = 0; r < n; ++r) {
      std::copy(a.t.data.begin() + static_cast<std::size_t>(r) * da,
                a.t.data.begin() + static_cast<std::size_t>(r + 1) * da,
                node.t.data.begin() + static_cast<std::size_t>(r) * (da + db));
      std::copy(b.t.data.begin() + static_cast<std::size_t>(r) * db,
                b.t.data.begin() + static_cast<std::size_t>(r + 1) * db,
                node.t.data.begin() + static_cast<std::size_t>(r) * (da + db) + da);
    }
  }

  void grad_concat(Node& node) {
    Node& a = at(node.in[0]);
    Node& b = at(node.in[1]);
    const int n = node.t.shape[0];
    const int da = a.t.shape[1], db = b.t.shape[1];
    for (int r = 0; r < n; ++r) {
      const T* g = node.t.grad.data() + static_cast<std::size_t>(r) * (da + db);
      if (a.needs_grad)
        for (int i = 0; i < da; ++i)
          a.t.grad[static_cast<std::size_t>(r) * da + i] += g[i];
      if (b.needs_grad)
        for (int i = 0; i < db; ++i)
          b.t.grad[static_cast<std::size_t>(r) * db + i] += g[da + i];
    }
  }

  // --- losses -------------------------------------------------------------

  void eval_softmax_xent(Node& node) {
    const Node& zn = at(node.in[0]);
    const Node& yn = at(node.in[1]);
    const int n = zn.t.shape[0], k = zn.t.shape[1];
    node.col.assign(zn.t.data.size(), T(0));  // softmax cache
    T loss = T(0);
    for (int r = 0; r < n; ++r) {
      const T* z = zn.t.data.data() + static_cast<std::size_t>(r) * k;
      const T* y = yn.t.data.data() + static_cast<std::size_t>(r) * k;
      T* p = node.col.data() + static_cast<std::size_t>(r) * k;
      const T zmax = *std::max_element(z, z + k);
      T sum = T(0);
      for (int i = 0; i < k; ++i) {
        p[i] = std::exp(z[i] - zmax);
        sum += p[i];
      }
      const T lse = std::log(sum) + zmax;
      for (int i = 0; i < k; ++i) {
        p[i] /= sum;
        loss -= y[i] * (z[i] - lse);
      }
    }
    node.t.data[0] = loss / static_cast<T>(n);
  }

  void grad_softmax_xent(Node& node) {
    Node& zn = at(node.in[0]);
    if (!zn.needs_grad) return;
    const Node& yn = at(node.in[1]);
    const int n = zn.t.shape[0], k = zn.t.shape[1];
    const T g = node.t.grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < zn.t.grad.size(); ++i)
      zn.t.grad[i] += g * (node.col[i] - yn.t.data[i]);
    (void)k;
  }

  void eval_sigmoid_bce(Node& node) {
    const Node& zn = at(node.in[0]);
    const Node& yn = at(node.in[1]);
    const int n = zn.t.shape[0];
    node.col.assign(zn.t.data.size(), T(0));  // sigmoid cache
    T loss = T(0);
    for (int r = 0; r < n; ++r) {
      const T z = zn.t.data[r];
      const T y = yn.t.data[r];
      node.col[r] = T(1) / (T(1) + std::exp(-z));
      loss += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    node.t.data[0] = loss / static_cast<T>(n);
  }

  void grad_sigmoid_bce(Node& node) {
    Node& zn = at(node.in[0]);
    if (!zn.needs_grad) return;
    const Node& yn = at(node.in[1]);
    const int n = zn.t.shape[0];
    const T g = node.t.grad[0] / static_cast<T>(n);
    for (int r = 0; r < n; ++r) zn.t.grad[r] += g * (node.col[r] - yn.t.data[r]);
  }
};

}  // namespace zoomloc::nncore
