// Copyright 2026 The evstr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Reverse-mode differentiation over matrices. Every op records its parents
// and a closure that pushes the output gradient back into them; `backward`
// walks the graph in reverse topological order.

#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "evstr/tensor.hpp"

namespace evstr {

template <class S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;  // allocated lazily
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  Tensor<S>& grad_buffer() {
    if (!grad.same_shape(value)) grad = Tensor<S>(value.shape());
    return grad;
  }
};

template <class S>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<S> value, bool requires_grad = false)
      : node_(std::make_shared<Node<S>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<S>& value() const { return node_->value; }
  Tensor<S>& mutable_value() { return node_->value; }
  const Tensor<S>& grad() const { return node_->grad; }
  Tensor<S>& grad_buffer() { return node_->grad_buffer(); }
  bool requires_grad() const { return node_->requires_grad; }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  const std::shared_ptr<Node<S>>& node() const { return node_; }

  void zero_grad() {
    if (node_->grad.same_shape(node_->value)) node_->grad.fill(S(0));
  }

 private:
  std::shared_ptr<Node<S>> node_;
};

/// Builds an op node. `fn` receives the node after its value is set and is
/// only kept when some parent needs gradients.
template <class S>
Var<S> make_op(Tensor<S> value, std::vector<Var<S>> parents, std::function<void(Node<S>&)> fn) {
  auto node = std::make_shared<Node<S>>();
  node->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(fn);
  }
  return Var<S>(std::move(node));
}

/// Accumulates d(root)/d(leaf) into every reachable leaf gradient. `seed`
/// defaults to ones, i.e. the gradient of sum(root).
template <class S>
void backward(const Var<S>& root, const Tensor<S>* seed = nullptr) {
  if (!root.requires_grad()) return;
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<S>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Tensor<S>& g = root.node()->grad_buffer();
  if (seed) {
    if (!seed->same_shape(g)) throw ShapeError("backward seed shape mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*seed)[i];
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += S(1);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backward_fn && n->grad.same_shape(n->value)) n->backward_fn(*n);
  }
  // Interior gradients are no longer needed; leaves keep theirs.
  for (Node<S>* n : order)
    if (n->backward_fn) n->grad = Tensor<S>();
}

namespace ops {

namespace detail {
template <class S>
Tensor<S>& pgrad(Node<S>& n, std::size_t i) {
  return n.parents[i]->grad_buffer();
}
template <class S>
bool wants(Node<S>& n, std::size_t i) {
  return n.parents[i]->requires_grad;
}
inline void expect(bool ok, const std::string& what, const std::vector<std::size_t>& a,
                   const std::vector<std::size_t>& b) {
  if (!ok) throw ShapeError(what + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}
}  // namespace detail

/// y = x W + b, x: N x D_in, W: D_in x D_out, b: 1 x D_out (may be undefined).
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  const auto& X = x.value();
  const auto& W = w.value();
  detail::expect(X.cols() == W.rows(), "linear", X.shape(), W.shape());
  const std::size_t n = X.rows(), din = W.rows(), dout = W.cols();
  Tensor<S> y(n, dout);
  if (b.defined()) {
    detail::expect(b.value().size() == dout, "linear bias", b.value().shape(), W.shape());
    for (std::size_t i = 0; i < n; ++i)
      std::copy(b.value().data(), b.value().data() + dout, y.data() + i * dout);
  }
  kernels::gemm_nn(n, din, dout, X.data(), W.data(), y.data());
  std::vector<Var<S>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  const bool has_bias = b.defined();
  return make_op<S>(std::move(y), parents, [n, din, dout, has_bias](Node<S>& self) {
    const auto& g = self.grad;
    const auto& X = self.parents[0]->value;
    const auto& W = self.parents[1]->value;
    if (detail::wants(self, 0))
      kernels::gemm_nt(n, dout, din, g.data(), W.data(), detail::pgrad(self, 0).data());
    if (detail::wants(self, 1))
      kernels::gemm_tn(n, din, dout, X.data(), g.data(), detail::pgrad(self, 1).data());
    if (has_bias && detail::wants(self, 2)) {
      S* gb = detail::pgrad(self, 2).data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dout; ++j) gb[j] += g[i * dout + j];
    }
  });
}

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  return linear(a, b, Var<S>());
}

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  detail::expect(a.value().size() == b.value().size() && a.rows() == b.rows(), "add",
                 a.value().shape(), b.value().shape());
  Tensor<S> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return make_op<S>(std::move(y), {a, b}, [](Node<S>& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (detail::wants(self, p)) {
        auto& g = detail::pgrad(self, p);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
  });
}

/// x (R x D) + p tiled along rows; R must be a multiple of p's row count.
template <class S>
Var<S> add_tiled(const Var<S>& x, const Var<S>& p) {
  const std::size_t r = x.rows(), pr = p.rows(), d = x.cols();
  detail::expect(pr > 0 && r % pr == 0 && p.cols() == d, "add_tiled", x.value().shape(),
                 p.value().shape());
  Tensor<S> y = x.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] += p.value()[(i % pr) * d + j];
  return make_op<S>(std::move(y), {x, p}, [r, pr, d](Node<S>& self) {
    if (detail::wants(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) g[(i % pr) * d + j] += self.grad[i * d + j];
    }
  });
}

/// Element-wise product.
template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  detail::expect(a.value().same_shape(b.value()), "mul", a.value().shape(), b.value().shape());
  Tensor<S> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return make_op<S>(std::move(y), {a, b}, [](Node<S>& self) {
    const auto& A = self.parents[0]->value;
    const auto& B = self.parents[1]->value;
    if (detail::wants(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A[i];
    }
  });
}

/// y = scale * x + shift
template <class S>
Var<S> affine(const Var<S>& x, S scale, S shift = S(0)) {
  Tensor<S> y = x.value();
  for (auto& v : y.vec()) v = scale * v + shift;
  return make_op<S>(std::move(y), {x}, [scale](Node<S>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * self.grad[i];
  });
}

namespace detail {
template <class S, class F, class D>
Var<S> unary(const Var<S>& x, F f, D df) {
  Tensor<S> y = x.value();
  for (auto& v : y.vec()) v = f(v);
  return make_op<S>(std::move(y), {x}, [df](Node<S>& self) {
    const auto& X = self.parents[0]->value;
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(X[i], self.value[i]);
  });
}
}  // namespace detail

template <class S>
Var<S> relu(const Var<S>& x) {
  return detail::unary<S>(
      x, [](S v) { return v > S(0) ? v : S(0); }, [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <class S>
Var<S> sigmoid(const Var<S>& x) {
  return detail::unary<S>(
      x, [](S v) { return S(1) / (S(1) + std::exp(-v)); }, [](S, S y) { return y * (S(1) - y); });
}

template <class S>
Var<S> tanh(const Var<S>& x) {
  return detail::unary<S>(
      x, [](S v) { return std::tanh(v); }, [](S, S y) { return S(1) - y * y; });
}

/// Exact (erf-based) GELU.
template <class S>
Var<S> gelu(const Var<S>& x) {
  return detail::unary<S>(
      x, [](S v) { return S(0.5) * v * (S(1) + std::erf(v / std::sqrt(S(2)))); },
      [](S v, S) {
        const S cdf = S(0.5) * (S(1) + std::erf(v / std::sqrt(S(2))));
        const S pdf = std::exp(-S(0.5) * v * v) / std::sqrt(S(2) * S(M_PI));
        return cdf + v * pdf;
      });
}

template <class S>
Var<S> concat_cols(const Var<S>& a, const Var<S>& b) {
  detail::expect(a.rows() == b.rows(), "concat_cols", a.value().shape(), b.value().shape());
  const std::size_t n = a.rows(), da = a.cols(), db = b.cols();
  Tensor<S> y(n, da + db);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * da, da, y.data() + i * (da + db));
    std::copy_n(b.value().data() + i * db, db, y.data() + i * (da + db) + da);
  }
  return make_op<S>(std::move(y), {a, b}, [n, da, db](Node<S>& self) {
    if (detail::wants(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < da; ++j) g[i * da + j] += self.grad[i * (da + db) + j];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < db; ++j) g[i * db + j] += self.grad[i * (da + db) + da + j];
    }
  });
}

template <class S>
Var<S> concat_rows(const Var<S>& a, const Var<S>& b) {
  detail::expect(a.cols() == b.cols(), "concat_rows", a.value().shape(), b.value().shape());
  Tensor<S> y(a.rows() + b.rows(), a.cols());
  std::copy(a.value().vec().begin(), a.value().vec().end(), y.data());
  std::copy(b.value().vec().begin(), b.value().vec().end(), y.data() + a.value().size());
  const std::size_t na = a.value().size();
  return make_op<S>(std::move(y), {a, b}, [na](Node<S>& self) {
    if (detail::wants(self, 0)) {
      auto& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
    }
  });
}

/// Row gather; repeated indices accumulate their gradients.
template <class S>
Var<S> gather_rows(const Var<S>& x, std::vector<std::size_t> idx) {
  const std::size_t d = x.cols(), n = x.rows();
  Tensor<S> y(idx.size(), d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw ShapeError("gather_rows: index out of range");
    std::copy_n(x.value().data() + idx[r] * d, d, y.data() + r * d);
  }
  return make_op<S>(std::move(y), {x}, [idx = std::move(idx), d](Node<S>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += self.grad[r * d + j];
  });
}

/// Per-segment column max over row ranges [offsets[s], offsets[s+1]).
template <class S>
Var<S> segment_max(const Var<S>& x, const std::vector<std::size_t>& offsets) {
  const std::size_t segs = offsets.size() - 1, d = x.cols();
  Tensor<S> y(segs, d);
  std::vector<std::size_t> arg(segs * d);
  const auto& X = x.value();
  for (std::size_t s = 0; s < segs; ++s) {
    if (offsets[s + 1] <= offsets[s]) throw ShapeError("segment_max: empty segment");
    for (std::size_t j = 0; j < d; ++j) {
      std::size_t best = offsets[s];
      for (std::size_t r = offsets[s] + 1; r < offsets[s + 1]; ++r)
        if (X[r * d + j] > X[best * d + j]) best = r;
      arg[s * d + j] = best;
      y[s * d + j] = X[best * d + j];
    }
  }
  return make_op<S>(std::move(y), {x}, [arg = std::move(arg), d](Node<S>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t k = 0; k < arg.size(); ++k) g[arg[k] * d + k % d] += self.grad[k];
  });
}

template <class S>
Var<S> segment_mean(const Var<S>& x, const std::vector<std::size_t>& offsets) {
  const std::size_t segs = offsets.size() - 1, d = x.cols();
  Tensor<S> y(segs, d);
  const auto& X = x.value();
  for (std::size_t s = 0; s < segs; ++s) {
    const std::size_t n = offsets[s + 1] - offsets[s];
    if (n == 0) throw ShapeError("segment_mean: empty segment");
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r)
      for (std::size_t j = 0; j < d; ++j) y[s * d + j] += X[r * d + j];
    for (std::size_t j = 0; j < d; ++j) y[s * d + j] /= static_cast<S>(n);
  }
  return make_op<S>(std::move(y), {x}, [offsets, d](Node<S>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
      const S inv = S(1) / static_cast<S>(offsets[s + 1] - offsets[s]);
      for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r)
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[s * d + j] * inv;
    }
  });
}

/// Row-wise softmax.
template <class S>
Var<S> softmax_rows(const Var<S>& x) {
  const std::size_t n = x.rows(), d = x.cols();
  Tensor<S> y = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    S* row = y.data() + i * d;
    const S mx = *std::max_element(row, row + d);
    S sum = 0;
    for (std::size_t j = 0; j < d; ++j) sum += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < d; ++j) row[j] /= sum;
  }
  return make_op<S>(std::move(y), {x}, [n, d](Node<S>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const S* p = self.value.data() + i * d;
      const S* gy = self.grad.data() + i * d;
      S dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += p[j] * gy[j];
      for (std::size_t j = 0; j < d; ++j) g[i * d + j] += p[j] * (gy[j] - dot);
    }
  });
}

/// Inverted dropout. Identity (same node) outside training.
template <class S>
Var<S> dropout(const Var<S>& x, double p, bool training, std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1)");
  if (!training || p == 0.0) return x;
  Rng rng(seed);
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  Tensor<S> mask(x.value().shape());
  for (auto& m : mask.vec()) m = rng.uniform() < p ? S(0) : keep_scale;
  Tensor<S> y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  return make_op<S>(std::move(y), {x}, [mask = std::move(mask)](Node<S>& self) {
    auto& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

/// sum(x * weights) for a constant weight tensor; used to build scalar test
/// objectives.
template <class S>
Var<S> weighted_sum(const Var<S>& x, const Tensor<S>& weights) {
  detail::expect(x.value().size() == weights.size(), "weighted_sum", x.value().shape(),
                 weights.shape());
  S acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += x.value()[i] * weights[i];
  return make_op<S>(Tensor<S>(1, 1, acc), {x}, [weights](Node<S>& self) {
    auto& g = detail::pgrad(self, 0);
    const S gy = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy * weights[i];
  });
}

/// Mean over the batch of -log softmax(logits)[label].
template <class S>
Var<S> cross_entropy(const Var<S>& logits, const std::vector<int>& labels) {
  const std::size_t n = logits.rows(), c = logits.cols();
  if (labels.size() != n) throw ShapeError("cross_entropy: label count does not match logits rows");
  Tensor<S> prob(n, c);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw ConfigError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                        std::to_string(c) + ")");
    const S* row = logits.value().data() + i * c;
    const S mx = *std::max_element(row, row + c);
    double sum = 0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j)
      prob[i * c + j] = static_cast<S>(std::exp(static_cast<double>(row[j] - mx)) / sum);
    loss += -(static_cast<double>(row[labels[i]] - mx) - std::log(sum));
  }
  loss /= static_cast<double>(n);
  return make_op<S>(Tensor<S>(1, 1, static_cast<S>(loss)), {logits},
                    [prob = std::move(prob), labels, n, c](Node<S>& self) {
                      auto& g = detail::pgrad(self, 0);
                      const S scale = self.grad[0] / static_cast<S>(n);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < c; ++j)
                          g[i * c + j] += scale * (prob[i * c + j] -
                                                   (static_cast<int>(j) == labels[i] ? S(1) : S(0)));
                    });
}

/// Batch normalization over rows. Training mode normalizes with (biased)
/// batch statistics and updates the running estimates (unbiased variance);
/// eval mode uses the running estimates.
template <class S>
Var<S> batch_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta,
                  Tensor<S>& running_mean, Tensor<S>& running_var, bool training, double momentum,
                  double eps) {
  const std::size_t n = x.rows(), d = x.cols();
  detail::expect(gamma.value().size() == d && beta.value().size() == d, "batch_norm",
                 x.value().shape(), gamma.value().shape());
  if (training && n < 2)
    throw ShapeError("batch_norm: training mode needs at least 2 rows, got " + std::to_string(n));
  const auto& X = x.value();
  std::vector<S> mean(d), inv_std(d);
  if (training) {
    std::vector<double> m(d, 0.0), v(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) m[j] += X[i * d + j];
    for (std::size_t j = 0; j < d; ++j) m[j] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double c = X[i * d + j] - m[j];
        v[j] += c * c;
      }
    for (std::size_t j = 0; j < d; ++j) {
      const double var = v[j] / static_cast<double>(n);
      mean[j] = static_cast<S>(m[j]);
      inv_std[j] = static_cast<S>(1.0 / std::sqrt(var + eps));
      const double unbiased = v[j] / static_cast<double>(n - 1);
      running_mean[j] = static_cast<S>((1.0 - momentum) * running_mean[j] + momentum * m[j]);
      running_var[j] = static_cast<S>((1.0 - momentum) * running_var[j] + momentum * unbiased);
    }
  } else {
    for (std::size_t j = 0; j < d; ++j) {
      mean[j] = running_mean[j];
      inv_std[j] = static_cast<S>(1.0 / std::sqrt(static_cast<double>(running_var[j]) + eps));
    }
  }
  Tensor<S> xhat(n, d), y(n, d);
  const auto& G = gamma.value();
  const auto& B = beta.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const S h = (X[i * d + j] - mean[j]) * inv_std[j];
      xhat[i * d + j] = h;
      y[i * d + j] = G[j] * h + B[j];
    }
  return make_op<S>(std::move(y), {x, gamma, beta},
                    [xhat = std::move(xhat), inv_std = std::move(inv_std), n, d,
                     training](Node<S>& self) {
                      const auto& g = self.grad;
                      const auto& G = self.parents[1]->value;
                      std::vector<S> sum_g(d, S(0)), sum_gh(d, S(0));
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < d; ++j) {
                          sum_g[j] += g[i * d + j];
                          sum_gh[j] += g[i * d + j] * xhat[i * d + j];
                        }
                      if (detail::wants(self, 1)) {
                        auto& gg = detail::pgrad(self, 1);
                        for (std::size_t j = 0; j < d; ++j) gg[j] += sum_gh[j];
                      }
                      if (detail::wants(self, 2)) {
                        auto& gb = detail::pgrad(self, 2);
                        for (std::size_t j = 0; j < d; ++j) gb[j] += sum_g[j];
                      }
                      if (detail::wants(self, 0)) {
                        auto& gx = detail::pgrad(self, 0);
                        const S inv_n = S(1) / static_cast<S>(n);
                        for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < d; ++j) {
                            const S k = G[j] * inv_std[j];
                            if (training)
                              gx[i * d + j] += k * (g[i * d + j] - inv_n * sum_g[j] -
                                                    xhat[i * d + j] * inv_n * sum_gh[j]);
                            else
                              gx[i * d + j] += k * g[i * d + j];
                          }
                      }
                    });
}

/// Per-row layer normalization with affine parameters.
template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, double eps) {
  const std::size_t n = x.rows(), d = x.cols();
  detail::expect(gamma.value().size() == d && beta.value().size() == d, "layer_norm",
                 x.value().shape(), gamma.value().shape());
  const auto& X = x.value();
  Tensor<S> xhat(n, d), y(n, d);
  std::vector<S> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < d; ++j) m += X[i * d + j];
    m /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) v += (X[i * d + j] - m) * (X[i * d + j] - m);
    v /= static_cast<double>(d);
    inv_std[i] = static_cast<S>(1.0 / std::sqrt(v + eps));
    for (std::size_t j = 0; j < d; ++j) {
      const S h = static_cast<S>(X[i * d + j] - m) * inv_std[i];
      xhat[i * d + j] = h;
      y[i * d + j] = gamma.value()[j] * h + beta.value()[j];
    }
  }
  return make_op<S>(std::move(y), {x, gamma, beta},
                    [xhat = std::move(xhat), inv_std = std::move(inv_std), n, d](Node<S>& self) {
                      const auto& g = self.grad;
                      const auto& G = self.parents[1]->value;
                      if (detail::wants(self, 1) || detail::wants(self, 2)) {
                        auto& gg = detail::pgrad(self, 1);
                        auto& gb = detail::pgrad(self, 2);
                        for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < d; ++j) {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                            gb[j] += g[i * d + j];
                          }
                      }
                      if (detail::wants(self, 0)) {
                        auto& gx = detail::pgrad(self, 0);
                        const S inv_d = S(1) / static_cast<S>(d);
                        for (std::size_t i = 0; i < n; ++i) {
                          S sg = 0, sgh = 0;
                          for (std::size_t j = 0; j < d; ++j) {
                            const S gh = g[i * d + j] * G[j];
                            sg += gh;
                            sgh += gh * xhat[i * d + j];
                          }
                          for (std::size_t j = 0; j < d; ++j) {
                            const S gh = g[i * d + j] * G[j];
                            gx[i * d + j] +=
                                inv_std[i] * (gh - inv_d * sg - xhat[i * d + j] * inv_d * sgh);
                          }
                        }
                      }
                    });
}

/// Nested multi-scale neighbour aggregation.
///
/// `features` and `weights` are (N * n_neighbors) x C, neighbour-major per
/// centre (row i * n_neighbors + j is the j-th nearest neighbour of centre i).
/// Subspace k (1-based) covers the k * n_neighbors / subspaces nearest
/// neighbours. With `attentive`, each subspace applies a channel-wise softmax
/// of `weights` over its neighbours and sums the re-weighted features;
/// otherwise it takes the channel-wise max of `features`. The per-subspace
/// results are summed (subspace ascending, neighbour rank ascending).
/// `probs_out`, if given, receives the attention scores per subspace k as an
/// N x m_k x C array.
template <class S>
Var<S> multiscale_aggregate(const Var<S>& features, const Var<S>& weights, std::size_t n_neighbors,
                            std::size_t subspaces, bool attentive,
                            std::vector<std::vector<S>>* probs_out = nullptr) {
  if (subspaces == 0 || n_neighbors % subspaces != 0)
    throw ConfigError("subspace count must divide the neighbour count");
  const std::size_t c = features.cols();
  if (features.rows() % n_neighbors != 0) throw ShapeError("multiscale_aggregate: ragged rows");
  const std::size_t n = features.rows() / n_neighbors;
  if (attentive)
    detail::expect(weights.defined() && weights.value().same_shape(features.value()),
                   "multiscale_aggregate", features.value().shape(),
                   weights.defined() ? weights.value().shape() : std::vector<std::size_t>{});
  const std::size_t step = n_neighbors / subspaces;
  const auto& F = features.value();
  Tensor<S> y(n, c);
  if (attentive) {
    const auto& W = weights.value();
    // probs[k][i][j][c] for j < m_k, stored per subspace.
    std::vector<std::vector<S>> probs(subspaces);
    std::vector<S> e(n_neighbors);
    for (std::size_t k = 0; k < subspaces; ++k) {
      const std::size_t m = (k + 1) * step;
      probs[k].resize(n * m * c);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
          S mx = W[(i * n_neighbors) * c + ch];
          for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, W[(i * n_neighbors + j) * c + ch]);
          S sum = 0;
          for (std::size_t j = 0; j < m; ++j)
            sum += (e[j] = std::exp(W[(i * n_neighbors + j) * c + ch] - mx));
          S acc = 0;
          for (std::size_t j = 0; j < m; ++j) {
            const S a = e[j] / sum;
            probs[k][(i * m + j) * c + ch] = a;
            acc += F[(i * n_neighbors + j) * c + ch] * a;
          }
          y[i * c + ch] += acc;
        }
    }
    if (probs_out) *probs_out = probs;
    return make_op<S>(
        std::move(y), {features, weights},
        [probs = std::move(probs), n, c, n_neighbors, step, subspaces](Node<S>& self) {
          const auto& F = self.parents[0]->value;
          const auto& g = self.grad;
          const bool want_f = detail::wants(self, 0), want_w = detail::wants(self, 1);
          Tensor<S>* gf = want_f ? &detail::pgrad(self, 0) : nullptr;
          Tensor<S>* gw = want_w ? &detail::pgrad(self, 1) : nullptr;
          for (std::size_t k = 0; k < subspaces; ++k) {
            const std::size_t m = (k + 1) * step;
            const auto& P = probs[k];
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t ch = 0; ch < c; ++ch) {
                const S gy = g[i * c + ch];
                S dot = 0;
                for (std::size_t j = 0; j < m; ++j)
                  dot += P[(i * m + j) * c + ch] * F[(i * n_neighbors + j) * c + ch];
                for (std::size_t j = 0; j < m; ++j) {
                  const std::size_t r = (i * n_neighbors + j) * c + ch;
                  const S a = P[(i * m + j) * c + ch];
                  if (gf) (*gf)[r] += gy * a;
                  if (gw) (*gw)[r] += gy * a * (F[r] - dot);
                }
              }
          }
        });
  }
  std::vector<std::size_t> arg(subspaces * n * c);
  for (std::size_t k = 0; k < subspaces; ++k) {
    const std::size_t m = (k + 1) * step;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        std::size_t best = i * n_neighbors;
        for (std::size_t j = 1; j < m; ++j)
          if (F[(i * n_neighbors + j) * c + ch] > F[best * c + ch]) best = i * n_neighbors + j;
        arg[(k * n + i) * c + ch] = best;
        y[i * c + ch] += F[best * c + ch];
      }
  }
  return make_op<S>(std::move(y), {features}, [arg = std::move(arg), n, c](Node<S>& self) {
    auto& gf = detail::pgrad(self, 0);
    for (std::size_t q = 0; q < arg.size(); ++q) {
      const std::size_t ic = q % (n * c);
      gf[arg[q] * c + ic % c] += self.grad[ic];
    }
  });
}

/// Multi-head scaled dot-product attention over independent row blocks.
///
/// Rows [offsets[s], offsets[s+1]) form one set; attention never crosses
/// sets. q, k are R x (heads * dk), v is R x (heads * dv). `bias`, when
/// defined, holds sum_s n_s^2 scalars (row-major n_s x n_s per set, shared
/// by all heads) added to the logits. If `probs_out` is given it receives
/// the attention matrices (set-major, then head, then row-major).
template <class S>
Var<S> block_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, const Var<S>& bias,
                       const std::vector<std::size_t>& offsets, std::size_t heads, S scale,
                       std::vector<S>* probs_out = nullptr) {
  const std::size_t r = q.rows();
  detail::expect(k.rows() == r && v.rows() == r && q.cols() == k.cols(), "block_attention",
                 q.value().shape(), k.value().shape());
  if (heads == 0 || q.cols() % heads != 0 || v.cols() % heads != 0)
    throw ShapeError("block_attention: widths not divisible by head count");
  if (offsets.empty() || offsets.back() != r) throw ShapeError("block_attention: bad offsets");
  const std::size_t dk = q.cols() / heads, dv = v.cols() / heads;
  const std::size_t qw = q.cols(), vw = v.cols();
  std::vector<std::size_t> bias_base(offsets.size(), 0);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t n = offsets[s + 1] - offsets[s];
    bias_base[s + 1] = bias_base[s] + n * n;
  }
  if (bias.defined() && bias.value().size() != bias_base.back())
    throw ShapeError("block_attention: bias has " + std::to_string(bias.value().size()) +
                     " entries, expected " + std::to_string(bias_base.back()));
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  std::vector<S> probs(bias_base.back() * heads);
  Tensor<S> y(r, vw);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t o = offsets[s], n = offsets[s + 1] - o;
    for (std::size_t h = 0; h < heads; ++h) {
      S* P = probs.data() + bias_base[s] * heads + h * n * n;
      for (std::size_t i = 0; i < n; ++i) {
        const S* qi = Q.data() + (o + i) * qw + h * dk;
        S* prow = P + i * n;
        S mx = -std::numeric_limits<S>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          const S* kj = K.data() + (o + j) * qw + h * dk;
          S dot = 0;
          for (std::size_t t = 0; t < dk; ++t) dot += qi[t] * kj[t];
          S logit = dot * scale;
          if (bias.defined()) logit += bias.value()[bias_base[s] + i * n + j];
          prow[j] = logit;
          mx = std::max(mx, logit);
        }
        S sum = 0;
        for (std::size_t j = 0; j < n; ++j) sum += (prow[j] = std::exp(prow[j] - mx));
        const S inv = S(1) / sum;
        S* yi = y.data() + (o + i) * vw + h * dv;
        for (std::size_t j = 0; j < n; ++j) {
          prow[j] *= inv;
          const S pj = prow[j];
          const S* vj = V.data() + (o + j) * vw + h * dv;
          for (std::size_t t = 0; t < dv; ++t) yi[t] += pj * vj[t];
        }
      }
    }
  }
  if (probs_out) *probs_out = probs;
  std::vector<Var<S>> parents{q, k, v};
  const bool has_bias = bias.defined();
  if (has_bias) parents.push_back(bias);
  return make_op<S>(
      std::move(y), parents,
      [probs = std::move(probs), bias_base = std::move(bias_base), offsets, heads, dk, dv, qw, vw,
       scale, has_bias](Node<S>& self) {
        const auto& Q = self.parents[0]->value;
        const auto& K = self.parents[1]->value;
        const auto& V = self.parents[2]->value;
        const auto& g = self.grad;
        Tensor<S>* gq = detail::wants(self, 0) ? &detail::pgrad(self, 0) : nullptr;
        Tensor<S>* gk = detail::wants(self, 1) ? &detail::pgrad(self, 1) : nullptr;
        Tensor<S>* gv = detail::wants(self, 2) ? &detail::pgrad(self, 2) : nullptr;
        Tensor<S>* gb = has_bias && detail::wants(self, 3) ? &detail::pgrad(self, 3) : nullptr;
        std::vector<S> dlogit;
        for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
          const std::size_t o = offsets[s], n = offsets[s + 1] - o;
          dlogit.assign(n, S(0));
          for (std::size_t h = 0; h < heads; ++h) {
            const S* P = probs.data() + bias_base[s] * heads + h * n * n;
            for (std::size_t i = 0; i < n; ++i) {
              const S* gi = g.data() + (o + i) * vw + h * dv;
              const S* prow = P + i * n;
              S dot = 0;
              for (std::size_t j = 0; j < n; ++j) {
                const S* vj = V.data() + (o + j) * vw + h * dv;
                S dp = 0;
                for (std::size_t t = 0; t < dv; ++t) dp += gi[t] * vj[t];
                dlogit[j] = dp;
                dot += prow[j] * dp;
                if (gv) {
                  S* gvj = gv->data() + (o + j) * vw + h * dv;
                  for (std::size_t t = 0; t < dv; ++t) gvj[t] += prow[j] * gi[t];
                }
              }
              const S* qi = Q.data() + (o + i) * qw + h * dk;
              for (std::size_t j = 0; j < n; ++j) {
                const S dl = prow[j] * (dlogit[j] - dot);
                if (gb) (*gb)[bias_base[s] + i * n + j] += dl;
                const S ds = dl * scale;
                if (ds == S(0)) continue;
                const S* kj = K.data() + (o + j) * qw + h * dk;
                if (gq) {
                  S* gqi = gq->data() + (o + i) * qw + h * dk;
                  for (std::size_t t = 0; t < dk; ++t) gqi[t] += ds * kj[t];
                }
                if (gk) {
                  S* gkj = gk->data() + (o + j) * qw + h * dk;
                  for (std::size_t t = 0; t < dk; ++t) gkj[t] += ds * qi[t];
                }
              }
            }
          }
        }
      });
}

}  // namespace ops
}  // namespace evstr
