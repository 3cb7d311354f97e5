#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "sumd/common.hpp"
#include "sumd/linalg.hpp"

namespace sumd {

// One node of the reverse-mode tape. Nodes are created in forward order;
// the creation sequence number doubles as a topological order for backward.
template <class S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;
  bool requires_grad = false;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<Node<S>>> parents;
  std::function<void(Node<S>&)> backward;

  static uint64_t next_seq() {
    static std::atomic<uint64_t> counter{0};
    return ++counter;
  }

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

// Dense N-d array with optional gradient tracking. Copying a Tensor copies the
// handle, not the storage; ops produce fresh nodes.
template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    check_shape_valid(shape, "Tensor");
    auto n = std::make_shared<Node<S>>();
    n->value.assign(static_cast<size_t>(sumd::numel(shape)), S(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    n->seq = Node<S>::next_seq();
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, S v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data(), t.data() + t.numel(), v);
    return t;
  }

  static Tensor from_vector(Shape shape, std::vector<S> values) {
    check_shape_valid(shape, "Tensor");
    if (static_cast<int64_t>(values.size()) != sumd::numel(shape))
      throw ConfigError("Tensor: value count " + std::to_string(values.size()) +
                        " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->seq = Node<S>::next_seq();
    return Tensor(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->numel(); }
  int64_t dim(int i) const { return node_->shape.at(static_cast<size_t>(i)); }
  int ndim() const { return static_cast<int>(node_->shape.size()); }

  S* data() { return node_->value.data(); }
  const S* data() const { return node_->value.data(); }
  const std::vector<S>& values() const { return node_->value; }

  S item() const {
    if (numel() != 1) throw ConfigError("item(): tensor is not scalar, shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  // Values-only copy, no tape.
  Tensor detach() const {
    Tensor t = Tensor::zeros(shape());
    std::copy(data(), data() + numel(), t.data());
    return t;
  }

  const std::vector<S>& grad_data() const {
    node_->ensure_grad();
    return node_->grad;
  }

  Tensor grad() const {
    node_->ensure_grad();
    return Tensor::from_vector(shape(), node_->grad);
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
  }

  // Reverse pass from a scalar node.
  void backward() {
    if (numel() != 1) throw ConfigError("backward(): loss must be scalar");
    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> seen;
    std::vector<Node<S>*> stack{node_.get()};
    while (!stack.empty()) {
      Node<S>* n = stack.back();
      stack.pop_back();
      if (!seen.insert(n).second) continue;
      order.push_back(n);
      for (auto& p : n->parents) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](const Node<S>* a, const Node<S>* b) { return a->seq > b->seq; });
    node_->ensure_grad();
    node_->grad[0] = S(1);
    for (Node<S>* n : order) {
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

  std::shared_ptr<Node<S>> node() const { return node_; }

  explicit Tensor(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node<S>> node_;
};

namespace detail {

template <class S>
Tensor<S> make_op(Shape shape, std::vector<Tensor<S>> parents,
                  std::function<void(Node<S>&)> backward) {
  Tensor<S> out = Tensor<S>::zeros(std::move(shape));
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    auto n = out.node();
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return out;
}

template <class S>
void accumulate(Node<S>& parent, const S* g, int64_t n) {
  parent.ensure_grad();
  S* dst = parent.grad.data();
  for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

template <class S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "add");
  auto out = detail::make_op<S>(a.shape(), {a, b}, [](Node<S>& n) {
    for (int k = 0; k < 2; ++k) {
      auto& p = *n.parents[k];
      if (p.requires_grad) detail::accumulate(p, n.grad.data(), n.numel());
    }
  });
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "sub");
  auto out = detail::make_op<S>(a.shape(), {a, b}, [](Node<S>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) detail::accumulate(pa, n.grad.data(), n.numel());
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int64_t i = 0; i < n.numel(); ++i) pb.grad[i] -= n.grad[i];
    }
  });
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "mul");
  auto out = detail::make_op<S>(a.shape(), {a, b}, [](Node<S>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int64_t i = 0; i < n.numel(); ++i) pa.grad[i] += n.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int64_t i = 0; i < n.numel(); ++i) pb.grad[i] += n.grad[i] * pa.value[i];
    }
  });
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
  return out;
}

template <class S>
Tensor<S> divide(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "divide");
  auto out = detail::make_op<S>(a.shape(), {a, b}, [](Node<S>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int64_t i = 0; i < n.numel(); ++i) pa.grad[i] += n.grad[i] / pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int64_t i = 0; i < n.numel(); ++i)
        pb.grad[i] -= n.grad[i] * pa.value[i] / (pb.value[i] * pb.value[i]);
    }
  });
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] / pb[i];
  return out;
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S k) {
  auto out = detail::make_op<S>(a.shape(), {a}, [](Node<S>& n) {
    auto& pa = *n.parents[0];
    if (pa.requires_grad) detail::accumulate(pa, n.grad.data(), n.numel());
  });
  const S* pa = a.data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + k;
  return out;
}

template <class S>
Tensor<S> mul_scalar(const Tensor<S>& a, S k) {
  auto out = detail::make_op<S>(a.shape(), {a}, [k](Node<S>& n) {
    auto& pa = *n.parents[0];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int64_t i = 0; i < n.numel(); ++i) pa.grad[i] += k * n.grad[i];
    }
  });
  const S* pa = a.data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * k;
  return out;
}

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
  auto out = detail::make_op<S>(a.shape(), {a}, [](Node<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (int64_t i = 0; i < n.numel(); ++i)
      if (pa.value[i] > S(0)) pa.grad[i] += n.grad[i];
  });
  const S* pa = a.data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] > S(0) ? pa[i] : S(0);
  return out;
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  auto out = detail::make_op<S>(a.shape(), {a}, [](Node<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (int64_t i = 0; i < n.numel(); ++i) {
      const S s = n.value[i];
      pa.grad[i] += n.grad[i] * s * (S(1) - s);
    }
  });
  const S* pa = a.data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = S(1) / (S(1) + std::exp(-pa[i]));
  return out;
}

// PReLU with a single channel-shared learned slope (shape {1}).
template <class S>
Tensor<S> prelu(const Tensor<S>& a, const Tensor<S>& slope) {
  if (slope.numel() != 1) throw ConfigError("prelu: slope must be a scalar parameter");
  auto out = detail::make_op<S>(a.shape(), {a, slope}, [](Node<S>& n) {
    auto& pa = *n.parents[0];
    auto& ps = *n.parents[1];
    const S s = ps.value[0];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int64_t i = 0; i < n.numel(); ++i)
        pa.grad[i] += n.grad[i] * (pa.value[i] > S(0) ? S(1) : s);
    }
    if (ps.requires_grad) {
      ps.ensure_grad();
      S acc = S(0);
      for (int64_t i = 0; i < n.numel(); ++i)
        if (pa.value[i] <= S(0)) acc += n.grad[i] * pa.value[i];
      ps.grad[0] += acc;
    }
  });
  const S* pa = a.data();
  const S s = slope.data()[0];
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] > S(0) ? pa[i] : s * pa[i];
  return out;
}

template <class S>
Tensor<S> sqrt_elem(const Tensor<S>& a) {
  auto out = detail::make_op<S>(a.shape(), {a}, [](Node<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (int64_t i = 0; i < n.numel(); ++i) pa.grad[i] += n.grad[i] * S(0.5) / n.value[i];
  });
  const S* pa = a.data();
  S* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = std::sqrt(pa[i]);
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
  auto out = detail::make_op<S>(Shape{1}, {a}, [](Node<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    const S g = n.grad[0];
    for (auto& v : pa.grad) v += g;
  });
  S acc = S(0);
  const S* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
  out.data()[0] = acc;
  return out;
}

template <class S>
Tensor<S> mean(const Tensor<S>& a) {
  const S inv = S(1) / static_cast<S>(a.numel());
  auto out = detail::make_op<S>(Shape{1}, {a}, [inv](Node<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    const S g = n.grad[0] * inv;
    for (auto& v : pa.grad) v += g;
  });
  S acc = S(0);
  const S* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
  out.data()[0] = acc * inv;
  return out;
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

// 2-d matrix product with optional transposes; gradients flow to both sides.
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false,
                 bool trans_b = false) {
  if (a.ndim() != 2 || b.ndim() != 2) throw ConfigError("matmul: expects 2-d tensors");
  const int64_t m = trans_a ? a.dim(1) : a.dim(0);
  const int64_t ka = trans_a ? a.dim(0) : a.dim(1);
  const int64_t kb = trans_b ? b.dim(1) : b.dim(0);
  const int64_t n = trans_b ? b.dim(0) : b.dim(1);
  if (ka != kb)
    throw ConfigError("matmul: dimension mismatch " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  auto out = detail::make_op<S>(Shape{m, n}, {a, b}, [trans_a, trans_b](Node<S>& n_) {
    auto& pa = *n_.parents[0];
    auto& pb = *n_.parents[1];
    const int64_t gm = n_.shape[0], gn = n_.shape[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      if (!trans_a)
        gemm(n_.grad.data(), gm, gn, false, pb.value.data(), pb.shape[0], pb.shape[1], !trans_b,
             pa.grad.data(), true);
      else
        gemm(pb.value.data(), pb.shape[0], pb.shape[1], trans_b, n_.grad.data(), gm, gn, true,
             pa.grad.data(), true);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      if (!trans_b)
        gemm(pa.value.data(), pa.shape[0], pa.shape[1], !trans_a, n_.grad.data(), gm, gn, false,
             pb.grad.data(), true);
      else
        gemm(n_.grad.data(), gm, gn, true, pa.value.data(), pa.shape[0], pa.shape[1], trans_a,
             pb.grad.data(), true);
    }
  });
  gemm(a.data(), a.dim(0), a.dim(1), trans_a, b.data(), b.dim(0), b.dim(1), trans_b, out.data());
  return out;
}

// Batched matrix product over matching leading dimension: (B,m,k)x(B,k,n).
template <class S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false, bool trans_b = false) {
  if (a.ndim() != 3 || b.ndim() != 3) throw ConfigError("bmm: expects 3-d tensors");
  if (a.dim(0) != b.dim(0))
    throw ConfigError("bmm: batch mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  const int64_t bs = a.dim(0);
  const int64_t m = trans_a ? a.dim(2) : a.dim(1);
  const int64_t ka = trans_a ? a.dim(1) : a.dim(2);
  const int64_t kb = trans_b ? b.dim(2) : b.dim(1);
  const int64_t n = trans_b ? b.dim(1) : b.dim(2);
  if (ka != kb)
    throw ConfigError("bmm: dimension mismatch " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  auto out = detail::make_op<S>(Shape{bs, m, n}, {a, b}, [trans_a, trans_b](Node<S>& n_) {
    auto& pa = *n_.parents[0];
    auto& pb = *n_.parents[1];
    const int64_t bs_ = n_.shape[0], gm = n_.shape[1], gn = n_.shape[2];
    const int64_t as0 = pa.shape[1] * pa.shape[2];
    const int64_t bs0 = pb.shape[1] * pb.shape[2];
    const int64_t os0 = gm * gn;
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (int64_t i = 0; i < bs_; ++i) {
      const S* gv = n_.grad.data() + i * os0;
      const S* av = pa.value.data() + i * as0;
      const S* bv = pb.value.data() + i * bs0;
      if (pa.requires_grad) {
        S* ga = pa.grad.data() + i * as0;
        if (!trans_a)
          gemm(gv, gm, gn, false, bv, pb.shape[1], pb.shape[2], !trans_b, ga, true);
        else
          gemm(bv, pb.shape[1], pb.shape[2], trans_b, gv, gm, gn, true, ga, true);
      }
      if (pb.requires_grad) {
        S* gb = pb.grad.data() + i * bs0;
        if (!trans_b)
          gemm(av, pa.shape[1], pa.shape[2], !trans_a, gv, gm, gn, false, gb, true);
        else
          gemm(gv, gm, gn, true, av, pa.shape[1], pa.shape[2], trans_a, gb, true);
      }
    }
  });
  for (int64_t i = 0; i < bs; ++i) {
    gemm(a.data() + i * a.dim(1) * a.dim(2), a.dim(1), a.dim(2), trans_a,
         b.data() + i * b.dim(1) * b.dim(2), b.dim(1), b.dim(2), trans_b,
         out.data() + i * m * n);
  }
  return out;
}

// ---------------------------------------------------------------------------
// layout
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (sumd::numel(shape) != a.numel())
    throw ConfigError("reshape: numel mismatch " + shape_str(a.shape()) + " -> " +
                      shape_str(shape));
  auto out = detail::make_op<S>(shape, {a}, [](Node<S>& n) {
    auto& pa = *n.parents[0];
    if (pa.requires_grad) detail::accumulate(pa, n.grad.data(), n.numel());
  });
  std::copy(a.data(), a.data() + a.numel(), out.data());
  return out;
}

template <class S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ConfigError("concat_channels: no inputs");
  const int64_t n = parts[0].dim(0);
  const int64_t h = parts[0].dim(2), w = parts[0].dim(3);
  int64_t c_total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 4 || p.dim(0) != n || p.dim(2) != h || p.dim(3) != w)
      throw ConfigError("concat_channels: incompatible shapes " + shape_str(p.shape()));
    c_total += p.dim(1);
  }
  auto out = detail::make_op<S>(Shape{n, c_total, h, w}, parts, [](Node<S>& nd) {
    const int64_t n_ = nd.shape[0], hw = nd.shape[2] * nd.shape[3];
    const int64_t c_total_ = nd.shape[1];
    int64_t c_off = 0;
    for (auto& pp : nd.parents) {
      auto& p = *pp;
      const int64_t c = p.shape[1];
      if (p.requires_grad) {
        p.ensure_grad();
        for (int64_t b = 0; b < n_; ++b) {
          const S* src = nd.grad.data() + (b * c_total_ + c_off) * hw;
          S* dst = p.grad.data() + b * c * hw;
          for (int64_t i = 0; i < c * hw; ++i) dst[i] += src[i];
        }
      }
      c_off += c;
    }
  });
  const int64_t hw = h * w;
  int64_t c_off = 0;
  for (const auto& p : parts) {
    const int64_t c = p.dim(1);
    for (int64_t b = 0; b < n; ++b) {
      const S* src = p.data() + b * c * hw;
      S* dst = out.data() + (b * c_total + c_off) * hw;
      std::copy(src, src + c * hw, dst);
    }
    c_off += c;
  }
  return out;
}

// Non-overlapping grid split: (N,C,H,W) -> (N*gy*gx, C, H/gy, W/gx).
// Pure index permutation; patch_merge is its exact inverse.
template <class S>
Tensor<S> patch_split(const Tensor<S>& x, int gy, int gx) {
  if (x.ndim() != 4) throw ConfigError("patch_split: expects 4-d input");
  if (gy < 1 || gx < 1) throw ConfigError("patch_split: grid must be >= 1");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % gy != 0 || w % gx != 0)
    throw InputError("patch_split: spatial dims " + shape_str(x.shape()) +
                     " not divisible by grid " + std::to_string(gy) + "x" + std::to_string(gx));
  const int64_t ph = h / gy, pw = w / gx;
  auto out = detail::make_op<S>(Shape{n * gy * gx, c, ph, pw}, {x}, [gy, gx](Node<S>& nd) {
    auto& p = *nd.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const int64_t n_ = p.shape[0], c_ = p.shape[1], h_ = p.shape[2], w_ = p.shape[3];
    const int64_t ph_ = h_ / gy, pw_ = w_ / gx;
    for (int64_t b = 0; b < n_; ++b)
      for (int64_t py = 0; py < gy; ++py)
        for (int64_t px = 0; px < gx; ++px) {
          const int64_t ob = (b * gy + py) * gx + px;
          for (int64_t ch = 0; ch < c_; ++ch)
            for (int64_t y = 0; y < ph_; ++y) {
              const S* src = nd.grad.data() + ((ob * c_ + ch) * ph_ + y) * pw_;
              S* dst = p.grad.data() + ((b * c_ + ch) * h_ + py * ph_ + y) * w_ + px * pw_;
              for (int64_t i = 0; i < pw_; ++i) dst[i] += src[i];
            }
        }
  });
  for (int64_t b = 0; b < n; ++b)
    for (int64_t py = 0; py < gy; ++py)
      for (int64_t px = 0; px < gx; ++px) {
        const int64_t ob = (b * gy + py) * gx + px;
        for (int64_t ch = 0; ch < c; ++ch)
          for (int64_t y = 0; y < ph; ++y) {
            const S* src = x.data() + ((b * c + ch) * h + py * ph + y) * w + px * pw;
            S* dst = out.data() + ((ob * c + ch) * ph + y) * pw;
            std::copy(src, src + pw, dst);
          }
      }
  return out;
}

// Inverse of patch_split: (N*gy*gx, C, h, w) -> (N, C, h*gy, w*gx).
template <class S>
Tensor<S> patch_merge(const Tensor<S>& x, int gy, int gx) {
  if (x.ndim() != 4) throw ConfigError("patch_merge: expects 4-d input");
  const int64_t nb = x.dim(0), c = x.dim(1), ph = x.dim(2), pw = x.dim(3);
  if (nb % (static_cast<int64_t>(gy) * gx) != 0)
    throw InputError("patch_merge: batch " + std::to_string(nb) + " not divisible by grid");
  const int64_t n = nb / (static_cast<int64_t>(gy) * gx);
  const int64_t h = ph * gy, w = pw * gx;
  auto out = detail::make_op<S>(Shape{n, c, h, w}, {x}, [gy, gx](Node<S>& nd) {
    auto& p = *nd.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const int64_t c_ = p.shape[1], ph_ = p.shape[2], pw_ = p.shape[3];
    const int64_t n_ = nd.shape[0], h_ = nd.shape[2], w_ = nd.shape[3];
    for (int64_t b = 0; b < n_; ++b)
      for (int64_t py = 0; py < gy; ++py)
        for (int64_t px = 0; px < gx; ++px) {
          const int64_t ib = (b * gy + py) * gx + px;
          for (int64_t ch = 0; ch < c_; ++ch)
            for (int64_t y = 0; y < ph_; ++y) {
              const S* src = nd.grad.data() + ((b * c_ + ch) * h_ + py * ph_ + y) * w_ + px * pw_;
              S* dst = p.grad.data() + ((ib * c_ + ch) * ph_ + y) * pw_;
              for (int64_t i = 0; i < pw_; ++i) dst[i] += src[i];
            }
        }
  });
  for (int64_t b = 0; b < n; ++b)
    for (int64_t py = 0; py < gy; ++py)
      for (int64_t px = 0; px < gx; ++px) {
        const int64_t ib = (b * gy + py) * gx + px;
        for (int64_t ch = 0; ch < c; ++ch)
          for (int64_t y = 0; y < ph; ++y) {
            const S* src = x.data() + ((ib * c + ch) * ph + y) * pw;
            S* dst = out.data() + ((b * c + ch) * h + py * ph + y) * w + px * pw;
            std::copy(src, src + pw, dst);
          }
      }
  return out;
}

// ---------------------------------------------------------------------------
// host-side helpers (not ops)
// ---------------------------------------------------------------------------

template <class S>
S min_value(const Tensor<S>& t) {
  return *std::min_element(t.data(), t.data() + t.numel());
}

template <class S>
S max_value(const Tensor<S>& t) {
  return *std::max_element(t.data(), t.data() + t.numel());
}

template <class S>
bool all_finite(const Tensor<S>& t) {
  const S* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(static_cast<double>(p[i]))) return false;
  return true;
}

template <class S>
bool bitwise_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(S) * static_cast<size_t>(a.numel())) == 0;
}

}  // namespace sumd
