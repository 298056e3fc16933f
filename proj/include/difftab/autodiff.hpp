#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "difftab/errors.hpp"
#include "difftab/tensor.hpp"

namespace difftab {

// Ordered, named parameter collection.  Iteration order is the sorted name
// order (std::map), so every consumer (optimizer updates, checkpoints,
// gradient maps) walks parameters deterministically.
class ParamSet {
 public:
  void add(std::string name, Tensor value) {
    if (params_.count(name)) {
      throw ContractError("parameter '" + name + "' already exists");
    }
    params_.emplace(std::move(name), std::move(value));
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  // Shapes are fixed at creation; updates may only swap in same-shaped values.
  void set(const std::string& name, Tensor value) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    if (!it->second.same_shape(value)) {
      throw ContractError("parameter '" + name + "' shape is immutable: " +
                          shape_str(it->second.shape()) + " vs " +
                          shape_str(value.shape()));
    }
    it->second = std::move(value);
  }

  std::size_t size() const { return params_.size(); }
  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Tensor> params_;
};

// Handle to a node on a GradTape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape.  Operations record their inputs and a backward closure;
// backward() walks nodes in reverse creation order accumulating gradients.
// All arithmetic is double precision with fixed summation order.
class GradTape {
 public:
  Var input(Tensor value) {
    return push(std::move(value), nullptr);
  }

  // Creates one leaf per parameter and returns name -> Var.
  std::map<std::string, Var> adopt(const ParamSet& params) {
    std::map<std::string, Var> vars;
    for (const auto& [name, value] : params) vars.emplace(name, input(value));
    return vars;
  }

  const Tensor& value(Var v) const { return node(v).value; }

  std::size_t num_nodes() const { return nodes_.size(); }

  // Accumulated gradient of the last backward() loss w.r.t. node v; zero
  // tensor if the node does not influence the loss.
  const Tensor& grad(Var v) const {
    node(v);
    if (grads_.size() != nodes_.size()) {
      throw ContractError("grad() requires a prior backward() call");
    }
    return grads_[static_cast<std::size_t>(v.id)];
  }

  std::map<std::string, Tensor> grads(const std::map<std::string, Var>& vars) const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, v] : vars) out.emplace(name, grad(v));
    return out;
  }

  // Seeds d(loss)/d(loss) = seed and back-propagates.  The loss must be a
  // scalar (single element).  A zero seed yields all-zero gradients.
  void backward(Var loss, double seed = 1.0) {
    const Node& loss_node = node(loss);
    if (loss_node.value.size() != 1) {
      throw ContractError("backward() expects a scalar loss, got shape " +
                          shape_str(loss_node.value.shape()));
    }
    grads_.clear();
    grads_.reserve(nodes_.size());
    for (const Node& n : nodes_) grads_.emplace_back(n.value.shape());
    grads_[static_cast<std::size_t>(loss.id)][0] = seed;
    for (int i = loss.id; i >= 0; --i) {
      const Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back) n.back(*this, i);
    }
  }

  // ---- traced operations -------------------------------------------------

  Var add(Var a, Var b) {
    Tensor out = difftab::add(value(a), value(b));
    return push(std::move(out), [a, b](GradTape& t, int self) {
      const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
      t.accumulate(a, g);
      t.accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    Tensor out = difftab::sub(value(a), value(b));
    return push(std::move(out), [a, b](GradTape& t, int self) {
      const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
      t.accumulate(a, g);
      t.accumulate(b, difftab::scale(g, -1.0));
    });
  }

  Var mul(Var a, Var b) {
    Tensor out = difftab::mul(value(a), value(b));
    return push(std::move(out), [a, b](GradTape& t, int self) {
      const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
      t.accumulate(a, difftab::mul(g, t.value(b)));
      t.accumulate(b, difftab::mul(g, t.value(a)));
    });
  }

  Var scale(Var a, double c) {
    Tensor out = difftab::scale(value(a), c);
    return push(std::move(out), [a, c](GradTape& t, int self) {
      t.accumulate(a, difftab::scale(t.grads_[static_cast<std::size_t>(self)], c));
    });
  }

  // Elementwise product with a constant (untraced) tensor.
  Var const_mul(Var a, Tensor c) {
    Tensor out = difftab::mul(value(a), c);
    return push(std::move(out), [a, c = std::move(c)](GradTape& t, int self) {
      t.accumulate(a, difftab::mul(t.grads_[static_cast<std::size_t>(self)], c));
    });
  }

  Var matmul(Var a, Var b) {
    Tensor out = difftab::matmul(value(a), value(b));
    return push(std::move(out), [a, b](GradTape& t, int self) {
      const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
      t.accumulate(a, difftab::matmul(g, transpose2(t.value(b))));
      t.accumulate(b, difftab::matmul(transpose2(t.value(a)), g));
    });
  }

  // x[B,F] + bias[F] broadcast over rows.
  Var add_row_bias(Var x, Var bias) {
    const Tensor& xv = value(x);
    const Tensor& bv = value(bias);
    if (xv.rank() != 2 || bv.rank() != 1 || xv.dim(1) != bv.dim(0)) {
      throw DimensionError("add_row_bias: " + shape_str(xv.shape()) + " + " +
                           shape_str(bv.shape()));
    }
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.dim(0); ++i)
      for (std::size_t j = 0; j < xv.dim(1); ++j) out(i, j) = xv(i, j) + bv[j];
    return push(std::move(out), [x, bias](GradTape& t, int self) {
      const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
      t.accumulate(x, g);
      Tensor gb({g.dim(1)});
      for (std::size_t i = 0; i < g.dim(0); ++i)
        for (std::size_t j = 0; j < g.dim(1); ++j) gb[j] += g(i, j);
      t.accumulate(bias, std::move(gb));
    });
  }

  Var conv1d(Var x, Var kernel, std::size_t stride, std::size_t padding) {
    Tensor out = difftab::conv1d(value(x), value(kernel), stride, padding);
    return push(std::move(out), [x, kernel, stride, padding](GradTape& t, int self) {
      const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
      auto [gx, gk] = conv1d_backward(t.value(x), t.value(kernel), stride, padding, g);
      t.accumulate(x, std::move(gx));
      t.accumulate(kernel, std::move(gk));
    });
  }

  // x[B,C,L] + bias[C] broadcast over batch and positions (conv bias).
  Var add_channel_bias(Var x, Var bias) {
    const Tensor& xv = value(x);
    const Tensor& bv = value(bias);
    if (xv.rank() != 3 || bv.rank() != 1 || xv.dim(1) != bv.dim(0)) {
      throw DimensionError("add_channel_bias: " + shape_str(xv.shape()) + " + " +
                           shape_str(bv.shape()));
    }
    Tensor out(xv.shape());
    for (std::size_t b = 0; b < xv.dim(0); ++b)
      for (std::size_t c = 0; c < xv.dim(1); ++c)
        for (std::size_t l = 0; l < xv.dim(2); ++l)
          out(b, c, l) = xv(b, c, l) + bv[c];
    return push(std::move(out), [x, bias](GradTape& t, int self) {
      const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
      t.accumulate(x, g);
      Tensor gb({g.dim(1)});
      for (std::size_t b = 0; b < g.dim(0); ++b)
        for (std::size_t c = 0; c < g.dim(1); ++c)
          for (std::size_t l = 0; l < g.dim(2); ++l) gb[c] += g(b, c, l);
      t.accumulate(bias, std::move(gb));
    });
  }

  // x[B,C,L] + bias[B,C] broadcast over positions (per-sample conditioning).
  Var add_sample_channel_bias(Var x, Var bias) {
    const Tensor& xv = value(x);
    const Tensor& bv = value(bias);
    if (xv.rank() != 3 || bv.rank() != 2 || xv.dim(0) != bv.dim(0) ||
        xv.dim(1) != bv.dim(1)) {
      throw DimensionError("add_sample_channel_bias: " + shape_str(xv.shape()) +
                           " + " + shape_str(bv.shape()));
    }
    Tensor out(xv.shape());
    for (std::size_t b = 0; b < xv.dim(0); ++b)
      for (std::size_t c = 0; c < xv.dim(1); ++c)
        for (std::size_t l = 0; l < xv.dim(2); ++l)
          out(b, c, l) = xv(b, c, l) + bv(b, c);
    return push(std::move(out), [x, bias](GradTape& t, int self) {
      const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
      t.accumulate(x, g);
      Tensor gb({g.dim(0), g.dim(1)});
      for (std::size_t b = 0; b < g.dim(0); ++b)
        for (std::size_t c = 0; c < g.dim(1); ++c)
          for (std::size_t l = 0; l < g.dim(2); ++l) gb(b, c) += g(b, c, l);
      t.accumulate(bias, std::move(gb));
    });
  }

  Var silu(Var x) {
    const Tensor& xv = value(x);
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * sigmoid(xv[i]);
    return push(std::move(out), [x](GradTape& t, int self) {
      const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
      const Tensor& xv = t.value(x);
      Tensor gx(xv.shape());
      for (std::size_t i = 0; i < xv.size(); ++i) {
        double s = sigmoid(xv[i]);
        gx[i] = g[i] * s * (1.0 + xv[i] * (1.0 - s));
      }
      t.accumulate(x, std::move(gx));
    });
  }

  // Sum of all elements -> scalar.
  Var sum(Var x) {
    Tensor out = Tensor::scalar(difftab::sum(value(x)));
    return push(std::move(out), [x](GradTape& t, int self) {
      const double g = t.grads_[static_cast<std::size_t>(self)][0];
      t.accumulate(x, Tensor::full(t.value(x).shape(), g));
    });
  }

  Var reshape(Var x, Shape shape) {
    Tensor out = value(x).reshaped(shape);
    return push(std::move(out), [x](GradTape& t, int self) {
      t.accumulate(x, t.grads_[static_cast<std::size_t>(self)].reshaped(
                          t.value(x).shape()));
    });
  }

  // Zero-pad the position axis of x[B,C,L] on the right.
  Var pad_length(Var x, std::size_t n) {
    const Tensor& xv = value(x);
    if (xv.rank() != 3) throw DimensionError("pad_length expects rank-3 input");
    Tensor out({xv.dim(0), xv.dim(1), xv.dim(2) + n});
    for (std::size_t b = 0; b < xv.dim(0); ++b)
      for (std::size_t c = 0; c < xv.dim(1); ++c)
        for (std::size_t l = 0; l < xv.dim(2); ++l) out(b, c, l) = xv(b, c, l);
    return push(std::move(out), [x](GradTape& t, int self) {
      const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
      const Tensor& xv = t.value(x);
      Tensor gx(xv.shape());
      for (std::size_t b = 0; b < xv.dim(0); ++b)
        for (std::size_t c = 0; c < xv.dim(1); ++c)
          for (std::size_t l = 0; l < xv.dim(2); ++l) gx(b, c, l) = g(b, c, l);
      t.accumulate(x, std::move(gx));
    });
  }

  // Keep the first keep positions of x[B,C,L].
  Var crop_length(Var x, std::size_t keep) {
    const Tensor& xv = value(x);
    if (xv.rank() != 3) throw DimensionError("crop_length expects rank-3 input");
    if (keep == 0 || keep > xv.dim(2)) {
      throw DimensionError("crop_length out of range");
    }
    Tensor out({xv.dim(0), xv.dim(1), keep});
    for (std::size_t b = 0; b < xv.dim(0); ++b)
      for (std::size_t c = 0; c < xv.dim(1); ++c)
        for (std::size_t l = 0; l < keep; ++l) out(b, c, l) = xv(b, c, l);
    return push(std::move(out), [x, keep](GradTape& t, int self) {
      const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
      const Tensor& xv = t.value(x);
      Tensor gx(xv.shape());
      for (std::size_t b = 0; b < xv.dim(0); ++b)
        for (std::size_t c = 0; c < xv.dim(1); ++c)
          for (std::size_t l = 0; l < keep; ++l) gx(b, c, l) = g(b, c, l);
      t.accumulate(x, std::move(gx));
    });
  }

  // Nearest-neighbour 2x upsampling of the position axis.
  Var upsample2(Var x) {
    const Tensor& xv = value(x);
    if (xv.rank() != 3) throw DimensionError("upsample2 expects rank-3 input");
    Tensor out({xv.dim(0), xv.dim(1), xv.dim(2) * 2});
    for (std::size_t b = 0; b < xv.dim(0); ++b)
      for (std::size_t c = 0; c < xv.dim(1); ++c)
        for (std::size_t l = 0; l < xv.dim(2); ++l) {
          out(b, c, 2 * l) = xv(b, c, l);
          out(b, c, 2 * l + 1) = xv(b, c, l);
        }
    return push(std::move(out), [x](GradTape& t, int self) {
      const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
      const Tensor& xv = t.value(x);
      Tensor gx(xv.shape());
      for (std::size_t b = 0; b < xv.dim(0); ++b)
        for (std::size_t c = 0; c < xv.dim(1); ++c)
          for (std::size_t l = 0; l < xv.dim(2); ++l)
            gx(b, c, l) = g(b, c, 2 * l) + g(b, c, 2 * l + 1);
      t.accumulate(x, std::move(gx));
    });
  }

  // Concatenate along the channel axis: [B,C1,L] ++ [B,C2,L] -> [B,C1+C2,L].
  Var concat_channels(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) ||
        av.dim(2) != bv.dim(2)) {
      throw DimensionError("concat_channels: " + shape_str(av.shape()) + " ++ " +
                           shape_str(bv.shape()));
    }
    const std::size_t c1 = av.dim(1), c2 = bv.dim(1);
    Tensor out({av.dim(0), c1 + c2, av.dim(2)});
    for (std::size_t i = 0; i < av.dim(0); ++i)
      for (std::size_t l = 0; l < av.dim(2); ++l) {
        for (std::size_t c = 0; c < c1; ++c) out(i, c, l) = av(i, c, l);
        for (std::size_t c = 0; c < c2; ++c) out(i, c1 + c, l) = bv(i, c, l);
      }
    return push(std::move(out), [a, b, c1, c2](GradTape& t, int self) {
      const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
      Tensor ga(t.value(a).shape());
      Tensor gb(t.value(b).shape());
      for (std::size_t i = 0; i < g.dim(0); ++i)
        for (std::size_t l = 0; l < g.dim(2); ++l) {
          for (std::size_t c = 0; c < c1; ++c) ga(i, c, l) = g(i, c, l);
          for (std::size_t c = 0; c < c2; ++c) gb(i, c, l) = g(i, c1 + c, l);
        }
      t.accumulate(a, std::move(ga));
      t.accumulate(b, std::move(gb));
    });
  }

  // Concatenate along the feature axis: [B,F1] ++ [B,F2] -> [B,F1+F2].
  Var concat_cols(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(0) != bv.dim(0)) {
      throw DimensionError("concat_cols: " + shape_str(av.shape()) + " ++ " +
                           shape_str(bv.shape()));
    }
    const std::size_t f1 = av.dim(1), f2 = bv.dim(1);
    Tensor out({av.dim(0), f1 + f2});
    for (std::size_t i = 0; i < av.dim(0); ++i) {
      for (std::size_t j = 0; j < f1; ++j) out(i, j) = av(i, j);
      for (std::size_t j = 0; j < f2; ++j) out(i, f1 + j) = bv(i, j);
    }
    return push(std::move(out), [a, b, f1, f2](GradTape& t, int self) {
      const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
      Tensor ga(t.value(a).shape());
      Tensor gb(t.value(b).shape());
      for (std::size_t i = 0; i < g.dim(0); ++i) {
        for (std::size_t j = 0; j < f1; ++j) ga(i, j) = g(i, j);
        for (std::size_t j = 0; j < f2; ++j) gb(i, j) = g(i, f1 + j);
      }
      t.accumulate(a, std::move(ga));
      t.accumulate(b, std::move(gb));
    });
  }

  // Mean negative log-likelihood of integer labels under row-wise softmax of
  // logits[B,C].  Fused so the backward pass is the numerically stable
  // (softmax - onehot) / B form.
  Var nll_loss(Var logits, std::vector<int> labels) {
    const Tensor& lv = value(logits);
    if (lv.rank() != 2) throw DimensionError("nll_loss expects rank-2 logits");
    const std::size_t batch = lv.dim(0), classes = lv.dim(1);
    if (labels.size() != batch) {
      throw DimensionError("nll_loss: label count does not match batch size");
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= classes) {
        throw IndexError("nll_loss: label out of range");
      }
    }
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
      double mx = lv(i, 0);
      for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, lv(i, c));
      double denom = 0.0;
      for (std::size_t c = 0; c < classes; ++c) denom += std::exp(lv(i, c) - mx);
      total += -(lv(i, static_cast<std::size_t>(labels[i])) - mx - std::log(denom));
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(batch));
    return push(std::move(out), [logits, labels = std::move(labels)](GradTape& t,
                                                                     int self) {
      const double g = t.grads_[static_cast<std::size_t>(self)][0];
      const Tensor& lv = t.value(logits);
      const std::size_t batch = lv.dim(0), classes = lv.dim(1);
      Tensor gl(lv.shape());
      for (std::size_t i = 0; i < batch; ++i) {
        double mx = lv(i, 0);
        for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, lv(i, c));
        double denom = 0.0;
        for (std::size_t c = 0; c < classes; ++c) denom += std::exp(lv(i, c) - mx);
        for (std::size_t c = 0; c < classes; ++c) {
          double p = std::exp(lv(i, c) - mx) / denom;
          double onehot = (static_cast<std::size_t>(labels[i]) == c) ? 1.0 : 0.0;
          gl(i, c) = g * (p - onehot) / static_cast<double>(batch);
        }
      }
      t.accumulate(logits, std::move(gl));
    });
  }

  static double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

 private:
  struct Node {
    Tensor value;
    std::function<void(GradTape&, int)> back;  // null for leaves
  };

  const Node& node(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
      throw ContractError("Var does not belong to this tape");
    }
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  Var push(Tensor value, std::function<void(GradTape&, int)> back) {
    nodes_.push_back(Node{std::move(value), std::move(back)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void accumulate(Var v, const Tensor& g) {
    Tensor& slot = grads_[static_cast<std::size_t>(v.id)];
    for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

}  // namespace difftab
