#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every tensor is two-dimensional (rows x cols). Feature maps are stored as
// (height * width) x channels, i.e. one row per spatial token. The library is
// instantiated for float (training) and double (gradient checking).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <memory>
#include <span>
#include <vector>

namespace petduet::ag {

/// 64-byte aligned storage. Vectorized reductions peel a prefix whose
/// length depends on the buffer address; a fixed alignment keeps results
/// bitwise identical from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct Node {
  Buffer<T> value;
  Buffer<T> grad;
  int rows = 0;
  int cols = 0;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::size_t size() const { return value.size(); }
  T* grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

/// Whether new operations record a backward graph on this thread.
bool grad_enabled();

/// Disables graph recording for its lifetime (evaluation, bank bookkeeping).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int rows, int cols, std::vector<T> values = {}, bool requires_grad = false);

  static Tensor zeros(int rows, int cols) { return Tensor(rows, cols); }
  static Tensor full(int rows, int cols, T v) {
    return Tensor(rows, cols, std::vector<T>(static_cast<std::size_t>(rows) * cols, v));
  }
  static Tensor from_node(std::shared_ptr<Node<T>> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  const T* data() const { return node_->value.data(); }
  T* data() { return node_->value.data(); }
  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  /// Empty when no gradient has reached this tensor.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad();

  T at(int r, int c) const { return node_->value[static_cast<std::size_t>(r) * cols() + c]; }
  T item() const { return node_->value.at(0); }
  std::vector<T> row(int r) const;

  /// Copy of the value with no history.
  Tensor detach() const;
  /// Back-propagates from this 1x1 tensor into every reachable tensor that
  /// requires a gradient. Gradients accumulate.
  void backward() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

struct LevelShape {
  int height = 0;
  int width = 0;
  int tokens() const { return height * width; }
  friend bool operator==(const LevelShape&, const LevelShape&) = default;
};

// ---- linear algebra -------------------------------------------------------

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// a * b^T
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
/// x * w + bias, with w stored (in x out) and bias 1 x out (may be undefined).
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

// ---- elementwise ----------------------------------------------------------

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// b is 1x1, 1 x cols or rows x 1 and is broadcast over a.
template <typename T> Tensor<T> add_broadcast(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
/// log(x / (1 - x)) with both terms clamped below by eps.
template <typename T> Tensor<T> inverse_sigmoid(const Tensor<T>& a, T eps = T(1e-5));
/// Per-row normalization over columns followed by an affine map.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));
/// Softmax over consecutive column groups of the given size within each row.
template <typename T> Tensor<T> softmax_groups(const Tensor<T>& x, int group);

// ---- shape ----------------------------------------------------------------

template <typename T> Tensor<T> concat_rows(std::span<const Tensor<T>> parts);
template <typename T> Tensor<T> concat_cols(std::span<const Tensor<T>> parts);
template <typename T> Tensor<T> slice_rows(const Tensor<T>& x, int begin, int end);
template <typename T> Tensor<T> slice_cols(const Tensor<T>& x, int begin, int end);
template <typename T> Tensor<T> gather_rows(const Tensor<T>& x, std::span<const int> index);
/// Repeats a 1 x cols tensor n times.
template <typename T> Tensor<T> repeat_rows(const Tensor<T>& x, int n);
/// Column-wise mean over rows: rows x cols -> 1 x cols.
template <typename T> Tensor<T> mean_rows(const Tensor<T>& x);
template <typename T> Tensor<T> sum(const Tensor<T>& x);

// ---- neural primitives ----------------------------------------------------

/// 3x3 convolution with zero padding 1. Input (h*w) x cin, weight (9*cin) x
/// cout ordered (ky, kx, cin), bias 1 x cout. Output ((h-1)/s+1)*((w-1)/s+1) x cout.
template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, int height, int width, const Tensor<T>& weight,
                  const Tensor<T>& bias, int stride);

/// Multi-head scaled dot-product attention on already-projected inputs.
/// q: nq x d, k: nk x d, v: nk x d, d divisible by heads. When segments is
/// non-null (self-attention only) a row may attend only to rows carrying
/// the same segment id.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads,
                    const std::vector<int>* segments = nullptr);

/// Sampling locations for box-referenced deformable attention:
/// loc = ref_center + offset * ref_size * 0.5 / points.
/// ref: n x 4 (cx, cy, w, h); offsets: n x (heads*levels*points*2).
template <typename T>
Tensor<T> sampling_locations(const Tensor<T>& ref, const Tensor<T>& offsets, int points);

/// Weighted bilinear sampling of multi-level value maps (zero padding,
/// pixel-center convention: pixel i covers [i, i+1) / size).
/// value: sum(h*w) x d, locations n x (heads*levels*points*2),
/// weights n x (heads*levels*points). Output n x d.
template <typename T>
Tensor<T> deform_sample(const Tensor<T>& value, std::span<const LevelShape> levels,
                        const Tensor<T>& locations, const Tensor<T>& weights, int heads,
                        int points);

// ---- losses (all return 1x1 sums) ------------------------------------------

/// Sigmoid focal loss summed over all cells. alpha < 0 disables the class
/// balance factor; gamma = 0 reduces to binary cross-entropy.
template <typename T>
Tensor<T> sigmoid_focal_loss(const Tensor<T>& logits, std::span<const T> targets, T alpha, T gamma);
/// Sum of absolute differences against constant targets.
template <typename T> Tensor<T> l1_loss(const Tensor<T>& pred, std::span<const T> target);
/// Sum over rows of (1 - GIoU) between predicted and constant target boxes,
/// both n x 4 in (cx, cy, w, h).
template <typename T> Tensor<T> giou_loss(const Tensor<T>& pred, std::span<const T> target);

}  // namespace petduet::ag
