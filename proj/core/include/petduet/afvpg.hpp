#pragma once

// Visual prompt generation: K boxes of one category plus enhanced image
// features become a single D-dimensional prompt embedding.

#include <map>
#include <random>
#include <string_view>
#include <vector>

#include "petduet/geometry.hpp"
#include "petduet/nn.hpp"

namespace petduet::afvpg {

using ag::Tensor;
using geometry::NormalizedBox;

enum class PromptSource { kSelf, kBatch, kMemory };

std::string_view source_name(PromptSource source);
PromptSource parse_source(std::string_view name);

/// One prompt vector (1 x D) tagged with where it came from.
template <typename T>
class VisualPromptEmbedding {
 public:
  VisualPromptEmbedding(Tensor<T> vector, int category_id, PromptSource source, int dataset_id);

  const Tensor<T>& vector() const { return vector_; }
  int category_id() const { return category_id_; }
  PromptSource source() const { return source_; }
  int dataset_id() const { return dataset_id_; }
  int dim() const { return vector_.cols(); }

 private:
  Tensor<T> vector_;
  int category_id_;
  PromptSource source_;
  int dataset_id_;
};

/// Projected queries for one category: K box rows followed by the carrier row.
template <typename T>
struct PromptQuerySet {
  Tensor<T> content;
  Tensor<T> position;
  std::vector<NormalizedBox> boxes;

  int rows() const { return static_cast<int>(boxes.size()); }
};

/// Keeps at most max_boxes boxes, sampled uniformly without replacement and
/// returned in their original order.
std::vector<NormalizedBox> cap_prompt_boxes(const std::vector<NormalizedBox>& boxes, int max_boxes,
                                            std::mt19937_64& rng);

template <typename T>
class PromptGenerator {
 public:
  /// The enhancer's deformable self-attention and FFN are used as-is for the
  /// enhanced-feature path; the generator registers only its own block.
  PromptGenerator(nn::ParamStore<T>& store, const ModelConfig& config,
                  const nn::FeatureEnhancer<T>& enhancer);

  /// Runs the shared enhancement path (no text) on backbone features.
  nn::MultiScaleFeatures<T> enhance(const nn::MultiScaleFeatures<T>& raw) const;
  /// The tensors of the shared enhancement path.
  std::vector<Tensor<T>> enhancement_parameters() const;

  /// Throws ValidationError unless 1 <= K <= max_boxes and every box is valid.
  PromptQuerySet<T> build_prompt_queries(const std::vector<NormalizedBox>& boxes) const;

  /// Aggregates one query set against enhanced features; returns the carrier row.
  VisualPromptEmbedding<T> generate_prompt(const PromptQuerySet<T>& queries,
                                           const nn::MultiScaleFeatures<T>& enhanced,
                                           int category_id = -1, int dataset_id = 0) const;

  /// One embedding per category, ascending category id. All categories run
  /// in a single batched pass; self-attention is confined to each category.
  std::vector<VisualPromptEmbedding<T>> generate_prompts_for_image(
      const std::map<int, std::vector<NormalizedBox>>& per_category_boxes,
      const nn::MultiScaleFeatures<T>& enhanced, int dataset_id = 0) const;

  int max_boxes() const { return max_boxes_; }

 private:
  Tensor<T> aggregate(const Tensor<T>& content, const Tensor<T>& position,
                      const std::vector<NormalizedBox>& boxes,
                      const nn::MultiScaleFeatures<T>& enhanced,
                      const std::vector<int>* segments) const;

  const nn::FeatureEnhancer<T>* enhancer_;
  Tensor<T> content_embed_;
  Tensor<T> carrier_embed_;
  nn::Linear<T> query_proj_;
  nn::Linear<T> pos_proj_;
  nn::LayerNorm<T> cross_norm_;
  nn::MSDeformAttn<T> cross_attn_;
  nn::LayerNorm<T> self_norm_;
  nn::MultiHeadAttention<T> self_attn_;
  nn::FeedForward<T> ffn_;
  nn::LayerNorm<T> out_norm_;
  int dim_;
  int max_boxes_;
};

}  // namespace petduet::afvpg
