#pragma once

// Dual-route detection head: prompt-guided query selection, a refining
// decoder with dot-product alignment logits, Hungarian matching and the
// detection loss. Detector bundles every network component.

#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "petduet/afvpg.hpp"
#include "petduet/nn.hpp"
#include "petduet/prompts.hpp"

namespace petduet::detector {

using ag::Tensor;
using geometry::NormalizedBox;

struct LossConfig {
  // Weights of the final loss.
  double alignment_weight = 1.0;
  double l1_weight = 5.0;
  double giou_weight = 2.0;
  // Weights of the matching cost.
  double match_class = 2.0;
  double match_l1 = 5.0;
  double match_giou = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  /// Also supervise the query-selection proposals.
  bool proposal_loss = true;
  /// Denoising queries are not implemented; enabling them is an error.
  bool denoising = false;

  void validate() const;
  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

template <typename T>
struct QueryState {
  Tensor<T> content;    // nq x D, learnable
  Tensor<T> reference;  // nq x 4, detached
  std::vector<int> token_index;
  Tensor<T> proposal_boxes;   // nq x 4, differentiable
  Tensor<T> proposal_logits;  // nq x P
};

template <typename T>
struct DetectionSet {
  Tensor<T> boxes;   // nq x 4 (cx, cy, w, h)
  Tensor<T> logits;  // nq x P
  /// Category of every logit column.
  std::vector<int> column_categories;

  int num_queries() const { return boxes.rows(); }
  int num_columns() const { return logits.cols(); }
  std::vector<NormalizedBox> box_list() const;
};

template <typename T>
struct RouteOutput {
  DetectionSet<T> proposals;
  std::vector<DetectionSet<T>> layers;

  const DetectionSet<T>& final_layer() const { return layers.back(); }
};

struct GroundTruth {
  NormalizedBox box;
  std::vector<int> positive_columns;
};

/// Attaches to every box the columns whose category matches its label.
std::vector<GroundTruth> make_targets(const std::vector<NormalizedBox>& boxes,
                                      const std::vector<int>& categories,
                                      const std::vector<int>& column_categories);

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (query, gt), ascending gt
  std::vector<int> unmatched_gt;
};

/// Minimum-cost assignment on a dense rows x cols matrix. Entry r of the
/// result is the column assigned to row r, or -1 when rows > cols leaves r out.
std::vector<int> solve_assignment(std::span<const double> cost, int rows, int cols);

/// nq x n_gt matching cost, row-major.
template <typename T>
std::vector<double> matching_cost(const DetectionSet<T>& pred, const std::vector<GroundTruth>& gt,
                                  const LossConfig& config);

template <typename T>
MatchResult hungarian_match(const DetectionSet<T>& pred, const std::vector<GroundTruth>& gt,
                            const LossConfig& config);

/// Focal loss over the whole logit grid, normalized by max(1, matches).
template <typename T>
Tensor<T> alignment_loss(const DetectionSet<T>& pred, const std::vector<GroundTruth>& gt,
                         const MatchResult& match, const LossConfig& config);

/// Weighted terms (already multiplied by their loss weights).
template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  double alignment = 0.0;
  double l1 = 0.0;
  double giou = 0.0;
};

template <typename T>
LossBreakdown<T> layer_loss(const DetectionSet<T>& pred, const std::vector<GroundTruth>& gt,
                            const LossConfig& config);

/// Sum of layer_loss over the given outputs (deep supervision).
template <typename T>
LossBreakdown<T> total_loss(std::span<const DetectionSet<T>> outputs,
                            const std::vector<GroundTruth>& gt, const LossConfig& config);

/// total_loss over the decoder layers plus, when enabled, layer_loss on the
/// query-selection proposals.
template <typename T>
LossBreakdown<T> route_loss(const RouteOutput<T>& output, const std::vector<GroundTruth>& gt,
                            const LossConfig& config);

/// Query selection, decoder and alignment logits.
template <typename T>
class DetectionHead {
 public:
  DetectionHead(nn::ParamStore<T>& store, const ModelConfig& config);

  /// Throws ValidationError when prompts is empty or nq exceeds the tokens.
  QueryState<T> query_select(const nn::MultiScaleFeatures<T>& enhanced, const Tensor<T>& prompts,
                             int nq) const;
  std::vector<DetectionSet<T>> decode(const QueryState<T>& queries, const Tensor<T>& prompts,
                                      const nn::MultiScaleFeatures<T>& enhanced,
                                      const std::vector<int>& column_categories) const;
  /// Per-token selection scores (max logit over prompt columns).
  std::vector<T> token_scores(const nn::MultiScaleFeatures<T>& enhanced,
                              const Tensor<T>& prompts) const;
  /// Normalized token projections that query selection scores against.
  Tensor<T> memory(const nn::MultiScaleFeatures<T>& enhanced) const;

 private:
  struct Layer {
    nn::LayerNorm<T> self_norm, prompt_norm, cross_norm;
    nn::MultiHeadAttention<T> self_attn, prompt_attn;
    nn::MSDeformAttn<T> cross_attn;
    nn::FeedForward<T> ffn;
    nn::Mlp<T> box_head;
  };
  Tensor<T> contrast(const Tensor<T>& q, const Tensor<T>& prompts, const Tensor<T>& bias) const;

  nn::Linear<T> memory_proj_;
  nn::LayerNorm<T> memory_norm_;
  nn::Mlp<T> proposal_box_head_;
  Tensor<T> proposal_bias_;
  Tensor<T> query_embed_;
  nn::Mlp<T> query_pos_head_;
  std::vector<Layer> layers_;
  nn::LayerNorm<T> out_norm_;
  Tensor<T> logit_bias_;
  int dim_;
  double anchor_scale_;
};

/// The full network: backbone, enhancer, text table, prompt generator, head.
template <typename T>
class Detector {
 public:
  Detector(const ModelConfig& config, std::uint64_t seed);
  Detector(const Detector&) = delete;
  Detector& operator=(const Detector&) = delete;

  const ModelConfig& config() const { return config_; }
  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }

  nn::MultiScaleFeatures<T> backbone(const Image& image) const { return backbone_(image); }
  /// Enhanced features of the visual route (no text fusion).
  nn::MultiScaleFeatures<T> enhance_visual(const nn::MultiScaleFeatures<T>& raw) const {
    return generator_.enhance(raw);
  }
  const afvpg::PromptGenerator<T>& generator() const { return generator_; }
  const nn::FeatureEnhancer<T>& enhancer() const { return enhancer_; }
  const DetectionHead<T>& head() const { return head_; }

  /// Text prompt route; one column per category id. Throws ValidationError
  /// for an empty list.
  RouteOutput<T> text_route_forward(const Image& image, const std::vector<int>& category_ids) const;
  /// Text prompt route on backbone features.
  RouteOutput<T> text_route_forward(const nn::MultiScaleFeatures<T>& raw,
                                    const std::vector<int>& category_ids) const;
  /// Visual prompt route on an image.
  RouteOutput<T> visual_route_forward(const Image& image,
                                      const prompts::PromptColumnSet<T>& columns) const;
  /// Visual prompt route on already enhanced features.
  RouteOutput<T> visual_route_forward(const nn::MultiScaleFeatures<T>& enhanced,
                                      const prompts::PromptColumnSet<T>& columns) const;
  /// Runs query selection and decoding on arbitrary prompt rows.
  RouteOutput<T> detect(const nn::MultiScaleFeatures<T>& enhanced, const Tensor<T>& prompts,
                        const std::vector<int>& column_categories) const;

 private:
  ModelConfig config_;
  nn::ParamStore<T> store_;
  nn::Backbone<T> backbone_;
  nn::FeatureEnhancer<T> enhancer_;
  nn::TextEmbeddingTable<T> text_;
  nn::LayerNorm<T> text_out_norm_;
  afvpg::PromptGenerator<T> generator_;
  DetectionHead<T> head_;
};

}  // namespace petduet::detector
