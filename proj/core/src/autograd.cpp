#include "petduet/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cassert>
#include <cmath>
#include <string>
#include <unordered_set>

#include "petduet/error.hpp"

namespace petduet::ag {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;

template <typename T>
CMap<T> cmap(const Node<T>& n) {
  return CMap<T>(n.value.data(), n.rows, n.cols);
}

template <typename T>
Map<T> gmap(Node<T>& n) {
  return Map<T>(n.grad_buffer(), n.rows, n.cols);
}

template <typename T>
CMap<T> cgrad(const Node<T>& n) {
  return CMap<T>(n.grad.data(), n.rows, n.cols);
}

void check(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ValidationError(std::string(op) + ": " + what);
}

std::string dims(int r, int c) { return std::to_string(r) + "x" + std::to_string(c); }

/// Allocates the output node. It joins the graph only when recording is on
/// and at least one input needs a gradient.
template <typename T>
std::shared_ptr<Node<T>> result(int rows, int cols, std::initializer_list<const Tensor<T>*> inputs) {
  auto out = std::make_shared<Node<T>>();
  out->rows = rows;
  out->cols = cols;
  out->value.assign(static_cast<std::size_t>(rows) * cols, T(0));
  if (g_grad_enabled) {
    for (const Tensor<T>* in : inputs) {
      if (in->defined() && in->requires_grad()) out->requires_grad = true;
    }
    if (out->requires_grad) {
      for (const Tensor<T>* in : inputs) {
        if (in->defined()) out->parents.push_back(in->shared());
      }
    }
  }
  return out;
}

template <typename T>
std::shared_ptr<Node<T>> result_many(int rows, int cols, std::span<const Tensor<T>> inputs) {
  auto out = std::make_shared<Node<T>>();
  out->rows = rows;
  out->cols = cols;
  out->value.assign(static_cast<std::size_t>(rows) * cols, T(0));
  if (g_grad_enabled) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) out->requires_grad = true;
    }
    if (out->requires_grad) {
      for (const auto& in : inputs) out->parents.push_back(in.shared());
    }
  }
  return out;
}

template <typename T>
bool wants(const std::shared_ptr<Node<T>>& n) {
  return n && n->requires_grad;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- Tensor ---------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(int rows, int cols, std::vector<T> values, bool requires_grad) {
  if (rows < 0 || cols < 0) throw ValidationError("Tensor: negative shape");
  node_ = std::make_shared<Node<T>>();
  node_->rows = rows;
  node_->cols = cols;
  const std::size_t n = static_cast<std::size_t>(rows) * cols;
  if (values.empty()) {
    node_->value.assign(n, T(0));
  } else {
    if (values.size() != n) {
      throw ValidationError("Tensor: " + std::to_string(values.size()) +
                            " values for shape " + dims(rows, cols));
    }
    node_->value.assign(values.begin(), values.end());
  }
  node_->requires_grad = requires_grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
std::vector<T> Tensor<T>::row(int r) const {
  const auto begin = node_->value.begin() + static_cast<std::ptrdiff_t>(r) * cols();
  return std::vector<T>(begin, begin + cols());
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor<T> out(rows(), cols());
  out.node_->value = node_->value;
  return out;
}

template <typename T>
void Tensor<T>::backward() const {
  if (node_->value.size() != 1) throw ValidationError("backward: root must be 1x1");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS yields a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
  }
}

// ---- linear algebra -------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.cols() == b.rows(), "matmul", dims(a.rows(), a.cols()) + " * " + dims(b.rows(), b.cols()));
  auto out = result(a.rows(), b.cols(), {&a, &b});
  Map<T>(out->value.data(), out->rows, out->cols).noalias() = cmap(*a.node()) * cmap(*b.node());
  if (out->requires_grad) {
    auto an = a.shared();
    auto bn = b.shared();
    out->backward_fn = [an, bn](Node<T>& self) {
      if (wants(an)) gmap(*an).noalias() += cgrad(self) * cmap(*bn).transpose();
      if (wants(bn)) gmap(*bn).noalias() += cmap(*an).transpose() * cgrad(self);
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.cols() == b.cols(), "matmul_nt", dims(a.rows(), a.cols()) + " * (" + dims(b.rows(), b.cols()) + ")^T");
  auto out = result(a.rows(), b.rows(), {&a, &b});
  Map<T>(out->value.data(), out->rows, out->cols).noalias() =
      cmap(*a.node()) * cmap(*b.node()).transpose();
  if (out->requires_grad) {
    auto an = a.shared();
    auto bn = b.shared();
    out->backward_fn = [an, bn](Node<T>& self) {
      if (wants(an)) gmap(*an).noalias() += cgrad(self) * cmap(*bn);
      if (wants(bn)) gmap(*bn).noalias() += cgrad(self).transpose() * cmap(*an);
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  check(x.cols() == w.rows(), "linear", dims(x.rows(), x.cols()) + " * " + dims(w.rows(), w.cols()));
  if (bias.defined()) check(bias.rows() == 1 && bias.cols() == w.cols(), "linear", "bias shape");
  auto out = result(x.rows(), w.cols(), {&x, &w, &bias});
  auto y = Map<T>(out->value.data(), out->rows, out->cols);
  y.noalias() = cmap(*x.node()) * cmap(*w.node());
  if (bias.defined()) y.rowwise() += cmap(*bias.node()).row(0);
  if (out->requires_grad) {
    auto xn = x.shared();
    auto wn = w.shared();
    auto bn = bias.defined() ? bias.shared() : nullptr;
    out->backward_fn = [xn, wn, bn](Node<T>& self) {
      if (wants(xn)) gmap(*xn).noalias() += cgrad(self) * cmap(*wn).transpose();
      if (wants(wn)) gmap(*wn).noalias() += cmap(*xn).transpose() * cgrad(self);
      if (wants(bn)) gmap(*bn).row(0) += cgrad(self).colwise().sum();
    };
  }
  return Tensor<T>::from_node(out);
}

// ---- elementwise ----------------------------------------------------------

namespace {

template <typename T>
void same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), op,
        dims(a.rows(), a.cols()) + " vs " + dims(b.rows(), b.cols()));
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  same_shape(a, b, "add");
  auto out = result(a.rows(), a.cols(), {&a, &b});
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.data()[i] + b.data()[i];
  if (out->requires_grad) {
    auto an = a.shared();
    auto bn = b.shared();
    out->backward_fn = [an, bn](Node<T>& self) {
      for (auto* p : {an.get(), bn.get()}) {
        if (!p->requires_grad) continue;
        T* g = p->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  same_shape(a, b, "sub");
  auto out = result(a.rows(), a.cols(), {&a, &b});
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.data()[i] - b.data()[i];
  if (out->requires_grad) {
    auto an = a.shared();
    auto bn = b.shared();
    out->backward_fn = [an, bn](Node<T>& self) {
      if (an->requires_grad) {
        T* g = an->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        T* g = bn->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  same_shape(a, b, "mul");
  auto out = result(a.rows(), a.cols(), {&a, &b});
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.data()[i] * b.data()[i];
  if (out->requires_grad) {
    auto an = a.shared();
    auto bn = b.shared();
    out->backward_fn = [an, bn](Node<T>& self) {
      if (an->requires_grad) {
        T* g = an->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        T* g = bn->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * an->value[i];
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
  const bool scalar = b.rows() == 1 && b.cols() == 1;
  const bool row = !scalar && b.rows() == 1 && b.cols() == a.cols();
  const bool col = !scalar && !row && b.cols() == 1 && b.rows() == a.rows();
  check(scalar || row || col, "add_broadcast",
        dims(a.rows(), a.cols()) + " + " + dims(b.rows(), b.cols()));
  auto out = result(a.rows(), a.cols(), {&a, &b});
  const int R = a.rows();
  const int C = a.cols();
  auto index = [=](int r, int c) -> int { return scalar ? 0 : (row ? c : r); };
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) {
      out->value[r * C + c] = a.data()[r * C + c] + b.data()[index(r, c)];
    }
  }
  if (out->requires_grad) {
    auto an = a.shared();
    auto bn = b.shared();
    out->backward_fn = [an, bn, R, C, index](Node<T>& self) {
      if (an->requires_grad) {
        T* g = an->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        T* g = bn->grad_buffer();
        for (int r = 0; r < R; ++r) {
          for (int c = 0; c < C; ++c) g[index(r, c)] += self.grad[r * C + c];
        }
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  auto out = result(a.rows(), a.cols(), {&a});
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.data()[i] * s;
  if (out->requires_grad) {
    auto an = a.shared();
    out->backward_fn = [an, s](Node<T>& self) {
      T* g = an->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  auto out = result(a.rows(), a.cols(), {&a});
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = std::max(a.data()[i], T(0));
  if (out->requires_grad) {
    auto an = a.shared();
    out->backward_fn = [an](Node<T>& self) {
      T* g = an->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (an->value[i] > T(0)) g[i] += self.grad[i];
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  auto out = result(a.rows(), a.cols(), {&a});
  for (std::size_t i = 0; i < out->value.size(); ++i) {
    out->value[i] = T(1) / (T(1) + std::exp(-a.data()[i]));
  }
  if (out->requires_grad) {
    auto an = a.shared();
    out->backward_fn = [an](Node<T>& self) {
      T* g = an->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T s = self.value[i];
        g[i] += self.grad[i] * s * (T(1) - s);
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> inverse_sigmoid(const Tensor<T>& a, T eps) {
  auto out = result(a.rows(), a.cols(), {&a});
  for (std::size_t i = 0; i < out->value.size(); ++i) {
    const T x = std::clamp(a.data()[i], T(0), T(1));
    out->value[i] = std::log(std::max(x, eps) / std::max(T(1) - x, eps));
  }
  if (out->requires_grad) {
    auto an = a.shared();
    out->backward_fn = [an, eps](Node<T>& self) {
      T* g = an->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T x = an->value[i];
        T d = T(0);
        if (x > eps) d += T(1) / x;
        if (T(1) - x > eps) d += T(1) / (T(1) - x);
        g[i] += self.grad[i] * d;
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const int R = x.rows();
  const int C = x.cols();
  check(gamma.rows() == 1 && gamma.cols() == C && beta.rows() == 1 && beta.cols() == C,
        "layer_norm", "affine shape");
  auto out = result(R, C, {&x, &gamma, &beta});
  Buffer<T> xhat(static_cast<std::size_t>(R) * C);
  Buffer<T> inv_std(static_cast<std::size_t>(R));
  for (int r = 0; r < R; ++r) {
    const T* xr = x.data() + static_cast<std::size_t>(r) * C;
    T mean = 0;
    for (int c = 0; c < C; ++c) mean += xr[c];
    mean /= T(C);
    T var = 0;
    for (int c = 0; c < C; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= T(C);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int c = 0; c < C; ++c) {
      const T h = (xr[c] - mean) * is;
      xhat[r * C + c] = h;
      out->value[r * C + c] = h * gamma.data()[c] + beta.data()[c];
    }
  }
  if (out->requires_grad) {
    auto xn = x.shared();
    auto gn = gamma.shared();
    auto bn = beta.shared();
    out->backward_fn = [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), R,
                        C](Node<T>& self) {
      T* gg = gn->requires_grad ? gn->grad_buffer() : nullptr;
      T* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
      T* gx = xn->requires_grad ? xn->grad_buffer() : nullptr;
      std::vector<T> dxhat(static_cast<std::size_t>(C));
      for (int r = 0; r < R; ++r) {
        const T* dy = self.grad.data() + static_cast<std::size_t>(r) * C;
        const T* h = xhat.data() + static_cast<std::size_t>(r) * C;
        T sum_d = 0;
        T sum_dh = 0;
        for (int c = 0; c < C; ++c) {
          if (gg) gg[c] += dy[c] * h[c];
          if (gb) gb[c] += dy[c];
          dxhat[c] = dy[c] * gn->value[c];
          sum_d += dxhat[c];
          sum_dh += dxhat[c] * h[c];
        }
        if (gx) {
          const T k = inv_std[r] / T(C);
          for (int c = 0; c < C; ++c) {
            gx[r * C + c] += k * (T(C) * dxhat[c] - sum_d - h[c] * sum_dh);
          }
        }
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> softmax_groups(const Tensor<T>& x, int group) {
  check(group > 0 && x.cols() % group == 0, "softmax_groups", "group must divide cols");
  auto out = result(x.rows(), x.cols(), {&x});
  const std::size_t n_groups = x.size() / static_cast<std::size_t>(group);
  for (std::size_t gi = 0; gi < n_groups; ++gi) {
    const T* in = x.data() + gi * group;
    T* o = out->value.data() + gi * group;
    T m = in[0];
    for (int j = 1; j < group; ++j) m = std::max(m, in[j]);
    T s = 0;
    for (int j = 0; j < group; ++j) {
      o[j] = std::exp(in[j] - m);
      s += o[j];
    }
    for (int j = 0; j < group; ++j) o[j] /= s;
  }
  if (out->requires_grad) {
    auto xn = x.shared();
    out->backward_fn = [xn, group, n_groups](Node<T>& self) {
      T* g = xn->grad_buffer();
      for (std::size_t gi = 0; gi < n_groups; ++gi) {
        const T* y = self.value.data() + gi * group;
        const T* dy = self.grad.data() + gi * group;
        T dot = 0;
        for (int j = 0; j < group; ++j) dot += y[j] * dy[j];
        for (int j = 0; j < group; ++j) g[gi * group + j] += y[j] * (dy[j] - dot);
      }
    };
  }
  return Tensor<T>::from_node(out);
}

// ---- shape ----------------------------------------------------------------

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  check(!parts.empty(), "concat_rows", "no inputs");
  const int C = parts[0].cols();
  int R = 0;
  for (const auto& p : parts) {
    check(p.cols() == C, "concat_rows", "column mismatch");
    R += p.rows();
  }
  auto out = result_many<T>(R, C, parts);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out->value.begin() + offset);
    offset += p.size();
  }
  if (out->requires_grad) {
    out->backward_fn = [](Node<T>& self) {
      std::size_t off = 0;
      for (auto& p : self.parents) {
        if (p->requires_grad) {
          T* g = p->grad_buffer();
          for (std::size_t i = 0; i < p->value.size(); ++i) g[i] += self.grad[off + i];
        }
        off += p->value.size();
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
  check(!parts.empty(), "concat_cols", "no inputs");
  const int R = parts[0].rows();
  int C = 0;
  for (const auto& p : parts) {
    check(p.rows() == R, "concat_cols", "row mismatch");
    C += p.cols();
  }
  auto out = result_many<T>(R, C, parts);
  int col = 0;
  for (const auto& p : parts) {
    for (int r = 0; r < R; ++r) {
      std::copy_n(p.data() + static_cast<std::size_t>(r) * p.cols(), p.cols(),
                  out->value.data() + static_cast<std::size_t>(r) * C + col);
    }
    col += p.cols();
  }
  if (out->requires_grad) {
    out->backward_fn = [R, C](Node<T>& self) {
      int c0 = 0;
      for (auto& p : self.parents) {
        if (p->requires_grad) {
          T* g = p->grad_buffer();
          for (int r = 0; r < R; ++r) {
            for (int c = 0; c < p->cols; ++c) g[r * p->cols + c] += self.grad[r * C + c0 + c];
          }
        }
        c0 += p->cols;
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, int begin, int end) {
  check(0 <= begin && begin <= end && end <= x.rows(), "slice_rows", "range out of bounds");
  const int C = x.cols();
  auto out = result(end - begin, C, {&x});
  std::copy(x.data() + static_cast<std::size_t>(begin) * C, x.data() + static_cast<std::size_t>(end) * C,
            out->value.begin());
  if (out->requires_grad) {
    auto xn = x.shared();
    out->backward_fn = [xn, begin, C](Node<T>& self) {
      T* g = xn->grad_buffer() + static_cast<std::size_t>(begin) * C;
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int begin, int end) {
  check(0 <= begin && begin <= end && end <= x.cols(), "slice_cols", "range out of bounds");
  const int R = x.rows();
  const int C = x.cols();
  const int W = end - begin;
  auto out = result(R, W, {&x});
  for (int r = 0; r < R; ++r) {
    std::copy_n(x.data() + static_cast<std::size_t>(r) * C + begin, W,
                out->value.data() + static_cast<std::size_t>(r) * W);
  }
  if (out->requires_grad) {
    auto xn = x.shared();
    out->backward_fn = [xn, begin, R, C, W](Node<T>& self) {
      T* g = xn->grad_buffer();
      for (int r = 0; r < R; ++r) {
        for (int c = 0; c < W; ++c) g[r * C + begin + c] += self.grad[r * W + c];
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const int> index) {
  const int C = x.cols();
  for (int i : index) check(0 <= i && i < x.rows(), "gather_rows", "index out of range");
  auto out = result(static_cast<int>(index.size()), C, {&x});
  for (std::size_t r = 0; r < index.size(); ++r) {
    std::copy_n(x.data() + static_cast<std::size_t>(index[r]) * C, C, out->value.data() + r * C);
  }
  if (out->requires_grad) {
    auto xn = x.shared();
    std::vector<int> idx(index.begin(), index.end());
    out->backward_fn = [xn, idx = std::move(idx), C](Node<T>& self) {
      T* g = xn->grad_buffer();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (int c = 0; c < C; ++c) g[static_cast<std::size_t>(idx[r]) * C + c] += self.grad[r * C + c];
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> repeat_rows(const Tensor<T>& x, int n) {
  check(x.rows() == 1 && n >= 0, "repeat_rows", "expects a single row");
  const int C = x.cols();
  auto out = result(n, C, {&x});
  for (int r = 0; r < n; ++r) std::copy_n(x.data(), C, out->value.data() + static_cast<std::size_t>(r) * C);
  if (out->requires_grad) {
    auto xn = x.shared();
    out->backward_fn = [xn, n, C](Node<T>& self) {
      T* g = xn->grad_buffer();
      for (int r = 0; r < n; ++r) {
        for (int c = 0; c < C; ++c) g[c] += self.grad[r * C + c];
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  check(x.rows() > 0, "mean_rows", "empty input");
  const int R = x.rows();
  const int C = x.cols();
  auto out = result(1, C, {&x});
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) out->value[c] += x.data()[r * C + c];
  }
  for (int c = 0; c < C; ++c) out->value[c] /= T(R);
  if (out->requires_grad) {
    auto xn = x.shared();
    out->backward_fn = [xn, R, C](Node<T>& self) {
      T* g = xn->grad_buffer();
      for (int r = 0; r < R; ++r) {
        for (int c = 0; c < C; ++c) g[r * C + c] += self.grad[c] / T(R);
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  auto out = result(1, 1, {&x});
  T s = 0;
  for (T v : x.values()) s += v;
  out->value[0] = s;
  if (out->requires_grad) {
    auto xn = x.shared();
    out->backward_fn = [xn](Node<T>& self) {
      T* g = xn->grad_buffer();
      for (std::size_t i = 0; i < xn->value.size(); ++i) g[i] += self.grad[0];
    };
  }
  return Tensor<T>::from_node(out);
}

// ---- neural primitives ----------------------------------------------------

template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, int height, int width, const Tensor<T>& weight,
                  const Tensor<T>& bias, int stride) {
  const int cin = x.cols();
  check(x.rows() == height * width, "conv3x3", "input rows != height*width");
  check(weight.rows() == 9 * cin, "conv3x3", "weight rows != 9*cin");
  check(stride >= 1, "conv3x3", "stride must be positive");
  const int cout = weight.cols();
  const int ho = (height - 1) / stride + 1;
  const int wo = (width - 1) / stride + 1;
  const int K = 9 * cin;

  auto cols = std::make_shared<Buffer<T>>(static_cast<std::size_t>(ho) * wo * K, T(0));
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      T* dst = cols->data() + (static_cast<std::size_t>(oy) * wo + ox) * K;
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride + kx - 1;
          if (ix < 0 || ix >= width) continue;
          std::copy_n(x.data() + (static_cast<std::size_t>(iy) * width + ix) * cin, cin,
                      dst + (ky * 3 + kx) * cin);
        }
      }
    }
  }
  auto out = result(ho * wo, cout, {&x, &weight, &bias});
  auto y = Map<T>(out->value.data(), ho * wo, cout);
  y.noalias() = CMap<T>(cols->data(), ho * wo, K) * cmap(*weight.node());
  if (bias.defined()) y.rowwise() += cmap(*bias.node()).row(0);
  if (out->requires_grad) {
    auto xn = x.shared();
    auto wn = weight.shared();
    auto bn = bias.defined() ? bias.shared() : nullptr;
    out->backward_fn = [=](Node<T>& self) {
      CMap<T> col_mat(cols->data(), ho * wo, K);
      if (wants(wn)) gmap(*wn).noalias() += col_mat.transpose() * cgrad(self);
      if (wants(bn)) gmap(*bn).row(0) += cgrad(self).colwise().sum();
      if (wants(xn)) {
        RowMat<T> dcols = cgrad(self) * cmap(*wn).transpose();
        T* gx = xn->grad_buffer();
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            const T* src = dcols.data() + (static_cast<std::size_t>(oy) * wo + ox) * K;
            for (int ky = 0; ky < 3; ++ky) {
              const int iy = oy * stride + ky - 1;
              if (iy < 0 || iy >= height) continue;
              for (int kx = 0; kx < 3; ++kx) {
                const int ix = ox * stride + kx - 1;
                if (ix < 0 || ix >= width) continue;
                T* dst = gx + (static_cast<std::size_t>(iy) * width + ix) * cin;
                const T* s = src + (ky * 3 + kx) * cin;
                for (int c = 0; c < cin; ++c) dst[c] += s[c];
              }
            }
          }
        }
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads,
                    const std::vector<int>* segments) {
  const int nq = q.rows();
  const int nk = k.rows();
  const int d = q.cols();
  check(k.cols() == d && v.cols() == d && v.rows() == nk, "attention", "shape mismatch");
  check(heads > 0 && d % heads == 0, "attention", "heads must divide width");
  if (segments) {
    check(static_cast<int>(segments->size()) == nq && nq == nk, "attention",
          "segments require self-attention with one id per row");
  }
  const int dh = d / heads;
  const T sc = T(1) / std::sqrt(T(dh));
  auto out = result(nq, d, {&q, &k, &v});
  // Attention probabilities, one nq x nk block per head.
  auto probs = std::make_shared<Buffer<T>>(static_cast<std::size_t>(heads) * nq * nk);
  CMap<T> Q = cmap(*q.node());
  CMap<T> K = cmap(*k.node());
  CMap<T> V = cmap(*v.node());
  Map<T> Y(out->value.data(), nq, d);
  for (int h = 0; h < heads; ++h) {
    Map<T> A(probs->data() + static_cast<std::size_t>(h) * nq * nk, nq, nk);
    A.noalias() = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * sc;
    for (int i = 0; i < nq; ++i) {
      T m = -std::numeric_limits<T>::infinity();
      for (int j = 0; j < nk; ++j) {
        if (segments && (*segments)[i] != (*segments)[j]) continue;
        m = std::max(m, A(i, j));
      }
      T s = 0;
      for (int j = 0; j < nk; ++j) {
        if (segments && (*segments)[i] != (*segments)[j]) {
          A(i, j) = 0;
          continue;
        }
        A(i, j) = std::exp(A(i, j) - m);
        s += A(i, j);
      }
      if (s > 0) A.row(i) /= s;
    }
    Y.middleCols(h * dh, dh).noalias() = A * V.middleCols(h * dh, dh);
  }
  if (out->requires_grad) {
    auto qn = q.shared();
    auto kn = k.shared();
    auto vn = v.shared();
    out->backward_fn = [=](Node<T>& self) {
      CMap<T> Qb = cmap(*qn);
      CMap<T> Kb = cmap(*kn);
      CMap<T> Vb = cmap(*vn);
      CMap<T> dY = cgrad(self);
      RowMat<T> dA(nq, nk);
      for (int h = 0; h < heads; ++h) {
        CMap<T> A(probs->data() + static_cast<std::size_t>(h) * nq * nk, nq, nk);
        auto dYh = dY.middleCols(h * dh, dh);
        if (vn->requires_grad) gmap(*vn).middleCols(h * dh, dh).noalias() += A.transpose() * dYh;
        dA.noalias() = dYh * Vb.middleCols(h * dh, dh).transpose();
        for (int i = 0; i < nq; ++i) {
          const T dot = A.row(i).dot(dA.row(i));
          dA.row(i) = (A.row(i).array() * (dA.row(i).array() - dot)).matrix();
        }
        if (qn->requires_grad) gmap(*qn).middleCols(h * dh, dh).noalias() += (dA * Kb.middleCols(h * dh, dh)) * sc;
        if (kn->requires_grad) gmap(*kn).middleCols(h * dh, dh).noalias() += (dA.transpose() * Qb.middleCols(h * dh, dh)) * sc;
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> sampling_locations(const Tensor<T>& ref, const Tensor<T>& offsets, int points) {
  check(ref.cols() == 4 && ref.rows() == offsets.rows(), "sampling_locations", "shape mismatch");
  check(points > 0 && offsets.cols() % (2 * points) == 0, "sampling_locations", "bad offset width");
  const int N = ref.rows();
  const int M = offsets.cols();
  auto out = result(N, M, {&ref, &offsets});
  const T inv = T(0.5) / T(points);
  for (int n = 0; n < N; ++n) {
    const T* r = ref.data() + static_cast<std::size_t>(n) * 4;
    for (int j = 0; j < M; ++j) {
      const int xy = j & 1;
      out->value[n * M + j] = r[xy] + offsets.data()[n * M + j] * r[2 + xy] * inv;
    }
  }
  if (out->requires_grad) {
    auto rn = ref.shared();
    auto on = offsets.shared();
    out->backward_fn = [rn, on, N, M, inv](Node<T>& self) {
      T* gr = rn->requires_grad ? rn->grad_buffer() : nullptr;
      T* go = on->requires_grad ? on->grad_buffer() : nullptr;
      for (int n = 0; n < N; ++n) {
        const T* r = rn->value.data() + static_cast<std::size_t>(n) * 4;
        for (int j = 0; j < M; ++j) {
          const int xy = j & 1;
          const T g = self.grad[n * M + j];
          if (go) go[n * M + j] += g * r[2 + xy] * inv;
          if (gr) {
            gr[n * 4 + xy] += g;
            gr[n * 4 + 2 + xy] += g * on->value[n * M + j] * inv;
          }
        }
      }
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> deform_sample(const Tensor<T>& value, std::span<const LevelShape> levels,
                        const Tensor<T>& locations, const Tensor<T>& weights, int heads,
                        int points) {
  const int L = static_cast<int>(levels.size());
  const int N = locations.rows();
  const int D = value.cols();
  check(heads > 0 && D % heads == 0, "deform_sample", "heads must divide width");
  check(locations.cols() == heads * L * points * 2, "deform_sample", "location width");
  check(weights.rows() == N && weights.cols() == heads * L * points, "deform_sample", "weight shape");
  std::vector<int> starts(static_cast<std::size_t>(L));
  int total = 0;
  for (int l = 0; l < L; ++l) {
    starts[l] = total;
    total += levels[l].tokens();
  }
  check(total == value.rows(), "deform_sample", "value rows != total tokens");
  const int dh = D / heads;
  std::vector<LevelShape> shapes(levels.begin(), levels.end());

  auto out = result(N, D, {&value, &locations, &weights});
  // Visits the four bilinear corners of one sample; fn(token, corner_weight, dwx, dwy)
  // receives the corner weight and its derivatives w.r.t. the pixel coordinates.
  auto for_corners = [shapes, starts](int l, T lx, T ly, auto&& fn) {
    const int H = shapes[l].height;
    const int W = shapes[l].width;
    const T px = lx * T(W) - T(0.5);
    const T py = ly * T(H) - T(0.5);
    const T fx0 = std::floor(px);
    const T fy0 = std::floor(py);
    const int x0 = static_cast<int>(fx0);
    const int y0 = static_cast<int>(fy0);
    const T fx = px - fx0;
    const T fy = py - fy0;
    for (int cy = 0; cy < 2; ++cy) {
      const int yy = y0 + cy;
      if (yy < 0 || yy >= H) continue;
      const T wy = cy ? fy : T(1) - fy;
      const T dwy_sign = cy ? T(1) : T(-1);
      for (int cx = 0; cx < 2; ++cx) {
        const int xx = x0 + cx;
        if (xx < 0 || xx >= W) continue;
        const T wx = cx ? fx : T(1) - fx;
        const T dwx_sign = cx ? T(1) : T(-1);
        fn(starts[l] + yy * W + xx, wx * wy, dwx_sign * wy * T(W), dwy_sign * wx * T(H));
      }
    }
  };

  const T* val = value.data();
  for (int n = 0; n < N; ++n) {
    T* o = out->value.data() + static_cast<std::size_t>(n) * D;
    for (int h = 0; h < heads; ++h) {
      for (int l = 0; l < L; ++l) {
        for (int p = 0; p < points; ++p) {
          const int idx = (h * L + l) * points + p;
          const T w = weights.data()[static_cast<std::size_t>(n) * weights.cols() + idx];
          const T lx = locations.data()[static_cast<std::size_t>(n) * locations.cols() + 2 * idx];
          const T ly = locations.data()[static_cast<std::size_t>(n) * locations.cols() + 2 * idx + 1];
          for_corners(l, lx, ly, [&](int token, T cw, T, T) {
            const T* v = val + static_cast<std::size_t>(token) * D + h * dh;
            const T f = w * cw;
            for (int c = 0; c < dh; ++c) o[h * dh + c] += f * v[c];
          });
        }
      }
    }
  }

  if (out->requires_grad) {
    auto vn = value.shared();
    auto ln = locations.shared();
    auto wn = weights.shared();
    out->backward_fn = [=](Node<T>& self) mutable {
      T* gv = vn->requires_grad ? vn->grad_buffer() : nullptr;
      T* gl = ln->requires_grad ? ln->grad_buffer() : nullptr;
      T* gw = wn->requires_grad ? wn->grad_buffer() : nullptr;
      const int LW = ln->cols;
      const int WW = wn->cols;
      for (int n = 0; n < N; ++n) {
        const T* go = self.grad.data() + static_cast<std::size_t>(n) * D;
        for (int h = 0; h < heads; ++h) {
          const T* goh = go + h * dh;
          for (int l = 0; l < L; ++l) {
            for (int p = 0; p < points; ++p) {
              const int idx = (h * L + l) * points + p;
              const T w = wn->value[static_cast<std::size_t>(n) * WW + idx];
              const T lx = ln->value[static_cast<std::size_t>(n) * LW + 2 * idx];
              const T ly = ln->value[static_cast<std::size_t>(n) * LW + 2 * idx + 1];
              T dw = 0;
              T dlx = 0;
              T dly = 0;
              for_corners(l, lx, ly, [&](int token, T cw, T dcx, T dcy) {
                const T* v = vn->value.data() + static_cast<std::size_t>(token) * D + h * dh;
                T dot = 0;
                for (int c = 0; c < dh; ++c) dot += v[c] * goh[c];
                dw += cw * dot;
                dlx += dcx * dot;
                dly += dcy * dot;
                if (gv) {
                  T* g = gv + static_cast<std::size_t>(token) * D + h * dh;
                  const T f = w * cw;
                  for (int c = 0; c < dh; ++c) g[c] += f * goh[c];
                }
              });
              if (gw) gw[static_cast<std::size_t>(n) * WW + idx] += dw;
              if (gl) {
                gl[static_cast<std::size_t>(n) * LW + 2 * idx] += w * dlx;
                gl[static_cast<std::size_t>(n) * LW + 2 * idx + 1] += w * dly;
              }
            }
          }
        }
      }
    };
  }
  return Tensor<T>::from_node(out);
}

// ---- losses ----------------------------------------------------------------

template <typename T>
Tensor<T> sigmoid_focal_loss(const Tensor<T>& logits, std::span<const T> targets, T alpha, T gamma) {
  check(targets.size() == logits.size(), "sigmoid_focal_loss", "target count mismatch");
  auto out = result(1, 1, {&logits});
  const std::size_t n = logits.size();
  std::vector<T> dlogit(out->requires_grad ? n : 0);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T x = logits.data()[i];
    const T t = targets[i];
    const T p = T(1) / (T(1) + std::exp(-x));
    // Stable BCE with logits: max(x,0) - x t + log(1 + exp(-|x|)).
    const T ce = std::max(x, T(0)) - x * t + std::log1p(std::exp(-std::abs(x)));
    const T pt = p * t + (T(1) - p) * (T(1) - t);
    const T one_m = T(1) - pt;
    const T mod = gamma == T(0) ? T(1) : std::pow(one_m, gamma);
    const T at = alpha >= T(0) ? alpha * t + (T(1) - alpha) * (T(1) - t) : T(1);
    total += at * mod * ce;
    if (!dlogit.empty()) {
      const T dce = p - t;
      const T dpt = p * (T(1) - p) * (T(2) * t - T(1));
      T dmod = 0;
      if (gamma != T(0) && one_m > T(0)) dmod = -gamma * std::pow(one_m, gamma - T(1)) * dpt;
      dlogit[i] = at * (mod * dce + ce * dmod);
    }
  }
  out->value[0] = total;
  if (out->requires_grad) {
    auto ln = logits.shared();
    out->backward_fn = [ln, dlogit = std::move(dlogit)](Node<T>& self) {
      T* g = ln->grad_buffer();
      for (std::size_t i = 0; i < dlogit.size(); ++i) g[i] += self.grad[0] * dlogit[i];
    };
  }
  return Tensor<T>::from_node(out);
}

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, std::span<const T> target) {
  check(target.size() == pred.size(), "l1_loss", "target count mismatch");
  auto out = result(1, 1, {&pred});
  T s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred.data()[i] - target[i]);
  out->value[0] = s;
  if (out->requires_grad) {
    auto pn = pred.shared();
    std::vector<T> tgt(target.begin(), target.end());
    out->backward_fn = [pn, tgt = std::move(tgt)](Node<T>& self) {
      T* g = pn->grad_buffer();
      for (std::size_t i = 0; i < tgt.size(); ++i) {
        const T d = pn->value[i] - tgt[i];
        if (d > 0) g[i] += self.grad[0];
        else if (d < 0) g[i] -= self.grad[0];
      }
    };
  }
  return Tensor<T>::from_node(out);
}

namespace {

/// 1 - GIoU of one predicted (cx,cy,w,h) box against a target, with the
/// gradient w.r.t. the prediction written to grad (may be null).
template <typename T>
T giou_term(const T* p, const T* t, T* grad) {
  const T x0 = p[0] - p[2] / 2, x1 = p[0] + p[2] / 2;
  const T y0 = p[1] - p[3] / 2, y1 = p[1] + p[3] / 2;
  const T tx0 = t[0] - t[2] / 2, tx1 = t[0] + t[2] / 2;
  const T ty0 = t[1] - t[3] / 2, ty1 = t[1] + t[3] / 2;
  const T ap = (x1 - x0) * (y1 - y0);
  const T at = (tx1 - tx0) * (ty1 - ty0);
  const T iw_raw = std::min(x1, tx1) - std::max(x0, tx0);
  const T ih_raw = std::min(y1, ty1) - std::max(y0, ty0);
  const T iw = std::max(iw_raw, T(0));
  const T ih = std::max(ih_raw, T(0));
  const T inter = iw * ih;
  const T uni = ap + at - inter;
  const T hw = std::max(x1, tx1) - std::min(x0, tx0);
  const T hh = std::max(y1, ty1) - std::min(y0, ty0);
  const T hull = hw * hh;
  const T eps = T(1e-12);
  const T U = std::max(uni, eps);
  const T Hl = std::max(hull, eps);
  const T loss = T(2) - inter / U - U / Hl;
  if (grad) {
    // Partials of the loss w.r.t. inter, union, hull.
    const T dL_dI = -T(1) / U;
    const T dL_dU = inter / (U * U) - T(1) / Hl;
    const T dL_dH = U / (Hl * Hl);
    // d(corner) for x0, x1, y0, y1.
    T g[4] = {0, 0, 0, 0};
    // Area of the prediction.
    const T dAp[4] = {-(y1 - y0), (y1 - y0), -(x1 - x0), (x1 - x0)};
    // Intersection.
    T dI[4] = {0, 0, 0, 0};
    if (iw_raw > 0 && ih_raw > 0) {
      if (x0 > tx0) dI[0] = -ih;
      if (x1 < tx1) dI[1] = ih;
      if (y0 > ty0) dI[2] = -iw;
      if (y1 < ty1) dI[3] = iw;
    }
    T dH[4] = {0, 0, 0, 0};
    if (x0 < tx0) dH[0] = -hh;
    if (x1 > tx1) dH[1] = hh;
    if (y0 < ty0) dH[2] = -hw;
    if (y1 > ty1) dH[3] = hw;
    for (int i = 0; i < 4; ++i) {
      g[i] = dL_dI * dI[i] + dL_dU * (dAp[i] - dI[i]) + dL_dH * dH[i];
    }
    grad[0] += g[0] + g[1];
    grad[1] += g[2] + g[3];
    grad[2] += (g[1] - g[0]) / 2;
    grad[3] += (g[3] - g[2]) / 2;
  }
  return loss;
}

}  // namespace

template <typename T>
Tensor<T> giou_loss(const Tensor<T>& pred, std::span<const T> target) {
  check(pred.cols() == 4 && target.size() == pred.size(), "giou_loss", "expects n x 4 boxes");
  auto out = result(1, 1, {&pred});
  const int n = pred.rows();
  T s = 0;
  for (int i = 0; i < n; ++i) s += giou_term<T>(pred.data() + 4 * i, target.data() + 4 * i, nullptr);
  out->value[0] = s;
  if (out->requires_grad) {
    auto pn = pred.shared();
    std::vector<T> tgt(target.begin(), target.end());
    out->backward_fn = [pn, tgt = std::move(tgt), n](Node<T>& self) {
      std::vector<T> g(static_cast<std::size_t>(n) * 4, T(0));
      for (int i = 0; i < n; ++i) giou_term<T>(pn->value.data() + 4 * i, tgt.data() + 4 * i, g.data() + 4 * i);
      T* gp = pn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += self.grad[0] * g[i];
    };
  }
  return Tensor<T>::from_node(out);
}

// ---- instantiation ----------------------------------------------------------

#define PETDUET_AG_INSTANTIATE(T)                                                               \
  template class Tensor<T>;                                                                     \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> add_broadcast(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> relu(const Tensor<T>&);                                                    \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                 \
  template Tensor<T> inverse_sigmoid(const Tensor<T>&, T);                                      \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> softmax_groups(const Tensor<T>&, int);                                     \
  template Tensor<T> concat_rows(std::span<const Tensor<T>>);                                   \
  template Tensor<T> concat_cols(std::span<const Tensor<T>>);                                   \
  template Tensor<T> slice_rows(const Tensor<T>&, int, int);                                    \
  template Tensor<T> slice_cols(const Tensor<T>&, int, int);                                    \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const int>);                       \
  template Tensor<T> repeat_rows(const Tensor<T>&, int);                                        \
  template Tensor<T> mean_rows(const Tensor<T>&);                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> conv3x3(const Tensor<T>&, int, int, const Tensor<T>&, const Tensor<T>&, int); \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,       \
                               const std::vector<int>*);                                        \
  template Tensor<T> sampling_locations(const Tensor<T>&, const Tensor<T>&, int);               \
  template Tensor<T> deform_sample(const Tensor<T>&, std::span<const LevelShape>,               \
                                   const Tensor<T>&, const Tensor<T>&, int, int);               \
  template Tensor<T> sigmoid_focal_loss(const Tensor<T>&, std::span<const T>, T, T);            \
  template Tensor<T> l1_loss(const Tensor<T>&, std::span<const T>);                             \
  template Tensor<T> giou_loss(const Tensor<T>&, std::span<const T>);

PETDUET_AG_INSTANTIATE(float)
PETDUET_AG_INSTANTIATE(double)

#undef PETDUET_AG_INSTANTIATE

}  // namespace petduet::ag
