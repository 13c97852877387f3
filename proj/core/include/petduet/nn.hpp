#pragma once

// Differentiable building blocks: parameter storage, dense layers, attention,
// multi-scale deformable attention, the convolutional backbone, the text
// embedding table and the feature enhancer.

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "petduet/autograd.hpp"
#include "petduet/geometry.hpp"
#include "petduet/image.hpp"
#include "petduet/model_config.hpp"

namespace petduet::nn {

using ag::LevelShape;
using ag::Tensor;

/// Parameter groups used for selective freezing.
enum class ParamGroup { kBackbone, kEnhancerShared, kText, kVisual, kHead };

std::string_view group_name(ParamGroup group);
ParamGroup parse_group(std::string_view name);

struct Init {
  enum class Kind { kZeros, kConstant, kUniform, kXavier };
  Kind kind = Kind::kZeros;
  double a = 0.0;
  double b = 0.0;

  static Init zeros() { return {Kind::kZeros}; }
  static Init constant(double v) { return {Kind::kConstant, v}; }
  static Init uniform(double lo, double hi) { return {Kind::kUniform, lo, hi}; }
  /// Glorot uniform over (rows, cols).
  static Init xavier() { return {Kind::kXavier}; }
};

template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    ParamGroup group;
    Tensor<T> tensor;
  };

  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  /// Registers a new trainable tensor. Names must be unique.
  Tensor<T> add(const std::string& name, ParamGroup group, int rows, int cols, Init init);

  const std::vector<Entry>& entries() const { return entries_; }
  const Entry* find(std::string_view name) const;
  std::size_t scalar_count() const;
  std::vector<Tensor<T>> tensors() const;
  std::vector<Tensor<T>> tensors(ParamGroup group) const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
  std::mt19937_64 rng_;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, ParamGroup group, int in, int out,
         Init weight_init = Init::xavier(), Init bias_init = Init::zeros());
  Tensor<T> operator()(const Tensor<T>& x) const { return ag::linear(x, weight_, bias_); }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }
  int in() const { return weight_.rows(); }
  int out() const { return weight_.cols(); }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& name, ParamGroup group, int dim);
  Tensor<T> operator()(const Tensor<T>& x) const { return ag::layer_norm(x, gamma_, beta_); }
  std::vector<Tensor<T>> parameters() const { return {gamma_, beta_}; }

 private:
  Tensor<T> gamma_;
  Tensor<T> beta_;
};

/// Linear layers with ReLU between them. The last layer can start at zero.
template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore<T>& store, const std::string& name, ParamGroup group, std::vector<int> widths,
      bool zero_last = false);
  Tensor<T> operator()(const Tensor<T>& x) const;
  std::vector<Tensor<T>> parameters() const;

 private:
  std::vector<Linear<T>> layers_;
};

/// Multi-head attention with input and output projections.
template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& store, const std::string& name, ParamGroup group, int dim,
                     int heads);
  /// segments restricts self-attention to rows with equal ids.
  Tensor<T> operator()(const Tensor<T>& query, const Tensor<T>& key, const Tensor<T>& value,
                       const std::vector<int>* segments = nullptr) const;
  std::vector<Tensor<T>> parameters() const;

 private:
  Linear<T> q_, k_, v_, o_;
  int heads_ = 1;
};

/// Per-level feature maps flattened into one token matrix (sum h*w) x D,
/// finest level first.
template <typename T>
struct MultiScaleFeatures {
  Tensor<T> tokens;
  std::vector<LevelShape> levels;

  int dim() const { return tokens.cols(); }
  int token_count() const { return tokens.rows(); }
  int level_start(int level) const;
  Tensor<T> level(int level) const;
  /// Throws ValidationError when the type invariants do not hold.
  void validate() const;
};

/// Reference box of every token: its cell center and a nominal square whose
/// side spans eight cells of its level (capped at 1).
std::vector<geometry::NormalizedBox> token_reference_boxes(const std::vector<LevelShape>& levels);
/// Boxes as an n x 4 constant tensor.
template <typename T>
Tensor<T> boxes_tensor(const std::vector<geometry::NormalizedBox>& boxes);
/// Sine/cosine codes of the boxes as an n x dim constant tensor.
template <typename T>
Tensor<T> positional_codes(const std::vector<geometry::NormalizedBox>& boxes, int dim);

template <typename T>
struct TextTokenEmbeddings {
  Tensor<T> tokens;
  std::vector<int> category_ids;
};

template <typename T>
struct EnhancerOutput {
  MultiScaleFeatures<T> image;
  std::optional<TextTokenEmbeddings<T>> text;
};

/// Box-referenced multi-scale deformable attention.
template <typename T>
class MSDeformAttn {
 public:
  MSDeformAttn() = default;
  MSDeformAttn(ParamStore<T>& store, const std::string& name, ParamGroup group,
               const ModelConfig& config);

  /// queries, query_pos: n x D; reference: n x 4 (cx, cy, w, h).
  Tensor<T> operator()(const Tensor<T>& queries, const Tensor<T>& query_pos,
                       const Tensor<T>& reference, const MultiScaleFeatures<T>& value) const;
  /// Softmax sampling weights, n x (heads * levels * points).
  Tensor<T> sampling_weights(const Tensor<T>& queries, const Tensor<T>& query_pos) const;
  std::vector<Tensor<T>> parameters() const;

  int heads() const { return heads_; }
  int levels() const { return levels_; }
  int points() const { return points_; }

 private:
  Linear<T> value_proj_, offset_proj_, weight_proj_, output_proj_;
  int heads_ = 1;
  int levels_ = 1;
  int points_ = 1;
};

/// Pre-norm feed-forward residual block: x + s * W2 relu(W1 LN(x)).
template <typename T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParamStore<T>& store, const std::string& name, ParamGroup group, int dim, int hidden,
              double residual_scale = 1.0);
  Tensor<T> operator()(const Tensor<T>& x) const;
  std::vector<Tensor<T>> parameters() const;

 private:
  LayerNorm<T> norm_;
  Linear<T> fc1_, fc2_;
  T residual_scale_ = T(1);
};

/// Strided convolutional stand-in for a pretrained backbone. Produces three
/// levels at strides 8, 16 and 32, projected to D channels.
template <typename T>
class Backbone {
 public:
  static constexpr int kCoarsestStride = 32;

  Backbone() = default;
  Backbone(ParamStore<T>& store, const ModelConfig& config);
  MultiScaleFeatures<T> operator()(const Image& image) const;

 private:
  struct Stage {
    Tensor<T> weight;
    Tensor<T> bias;
  };
  std::vector<Stage> stages_;
  std::vector<Linear<T>> level_proj_;
  std::vector<LayerNorm<T>> level_norm_;
  Tensor<T> level_embed_;
};

/// Learnable per-category text token table (stand-in for a language model).
template <typename T>
class TextEmbeddingTable {
 public:
  TextEmbeddingTable() = default;
  TextEmbeddingTable(ParamStore<T>& store, const ModelConfig& config);
  /// Throws ValidationError for ids outside [0, vocab).
  TextTokenEmbeddings<T> operator()(const std::vector<int>& category_ids) const;

 private:
  Tensor<T> table_;
};

/// Deformable self-attention block with its pre-norm, the piece shared
/// between the enhancer and the visual prompt generator.
template <typename T>
struct SharedEnhancerLayer {
  LayerNorm<T> norm;
  MSDeformAttn<T> attn;
  FeedForward<T> ffn;
};

template <typename T>
class FeatureEnhancer {
 public:
  FeatureEnhancer() = default;
  FeatureEnhancer(ParamStore<T>& store, const ModelConfig& config);

  EnhancerOutput<T> operator()(const MultiScaleFeatures<T>& features,
                               const TextTokenEmbeddings<T>* text = nullptr) const;

  /// The deformable self-attention and FFN tensors, in registration order.
  std::vector<Tensor<T>> shared_parameters() const;
  const std::vector<SharedEnhancerLayer<T>>& shared_layers() const { return shared_; }

 private:
  struct TextLayer {
    LayerNorm<T> image_norm, text_norm;
    MultiHeadAttention<T> image_from_text, text_from_image;
    FeedForward<T> text_ffn;
  };
  std::vector<SharedEnhancerLayer<T>> shared_;
  std::vector<TextLayer> text_;
  T residual_scale_ = T(1);
};

}  // namespace petduet::nn
