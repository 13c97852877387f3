#pragma once

// Evaluation protocols (per-image visual prompts, offline global visual
// prompts, text prompts) and a COCO-style AP engine.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "petduet/data.hpp"
#include "petduet/detector.hpp"

namespace petduet::eval {

using geometry::AbsoluteBox;
using geometry::NormalizedBox;

enum class Protocol { kVisualI, kVisualG, kText };

std::string_view protocol_name(Protocol protocol);
/// Accepts "visual_i", "visual-i", "visual_g", "visual-g" and "text".
Protocol parse_protocol(std::string_view name);

struct ProtocolConfig {
  Protocol protocol = Protocol::kVisualI;
  std::uint64_t seed = 0;
  double score_threshold = 0.0;
  std::vector<double> iou_thresholds{0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};
  int visual_g_images_per_category = 16;
  /// Detections kept per image and category.
  int max_detections = 100;
  int max_prompt_boxes = 8;

  /// Throws ValidationError unless thresholds are strictly increasing in (0,1].
  void validate() const;
};

struct Detection {
  /// Unique per image across all evaluated datasets.
  int image_key = 0;
  int category_id = 0;
  AbsoluteBox box;
  double score = 0.0;
};

struct GroundTruthBox {
  int image_key = 0;
  int category_id = 0;
  AbsoluteBox box;
};

int image_key(int dataset_id, int image_id);

struct EvalReport {
  Protocol protocol = Protocol::kVisualI;
  std::uint64_t seed = 0;
  double ap = 0.0;
  double ap50 = 0.0;
  std::map<int, double> per_category_ap;
  int n_images = 0;
  /// Images without annotations (per-image visual prompts only).
  int skipped_images = 0;
  /// Dictionary categories without a global prompt.
  std::vector<int> missing_categories;

  std::string to_json() const;
  static EvalReport from_json(std::string_view text);
  static std::string csv_header();
  std::string csv_row(std::string_view run_id, double wall_time) const;
};

/// Greedy score-ordered matching per category and IoU threshold, 101-point
/// interpolated precision, averaged over thresholds then over categories
/// that have ground truth. ap50 is always evaluated at IoU 0.5.
EvalReport compute_ap(std::span<const Detection> detections,
                      std::span<const GroundTruthBox> ground_truth, const ProtocolConfig& config);

struct ScoredBox {
  NormalizedBox box;
  int category_id = 0;
  double score = 0.0;
};

struct CategoryPrompt {
  int category_id = 0;
  std::vector<float> embedding;
};

/// What the protocols need from a detector.
class EvalModel {
 public:
  virtual ~EvalModel() = default;

  virtual int prompt_dim() const = 0;
  /// One prompt per category, each built from that category's boxes.
  virtual std::map<int, std::vector<float>> visual_prompts(
      const Image& image, const std::map<int, std::vector<NormalizedBox>>& boxes,
      int dataset_id) const = 0;
  virtual std::vector<ScoredBox> detect_visual(const Image& image,
                                               const std::vector<CategoryPrompt>& prompts) const = 0;
  virtual std::vector<ScoredBox> detect_text(const Image& image,
                                             const std::vector<int>& category_ids) const = 0;
  /// Prompts from the image's own boxes, then detection on the same image.
  virtual std::vector<ScoredBox> detect_with_own_prompts(
      const Image& image, const std::map<int, std::vector<NormalizedBox>>& boxes,
      int dataset_id) const;
};

/// Highest scoring (query, category) pairs of a decoder output. A pair's
/// score is the sigmoid of the best logit among the category's columns.
/// Ties break by query then category.
std::vector<ScoredBox> top_detections(const detector::DetectionSet<float>& output, int k);

/// EvalModel over a trained network.
class DetectorModel final : public EvalModel {
 public:
  explicit DetectorModel(const detector::Detector<float>& model, int max_detections = 100);

  int prompt_dim() const override;
  std::map<int, std::vector<float>> visual_prompts(
      const Image& image, const std::map<int, std::vector<NormalizedBox>>& boxes,
      int dataset_id) const override;
  std::vector<ScoredBox> detect_visual(const Image& image,
                                       const std::vector<CategoryPrompt>& prompts) const override;
  std::vector<ScoredBox> detect_text(const Image& image,
                                     const std::vector<int>& category_ids) const override;
  std::vector<ScoredBox> detect_with_own_prompts(
      const Image& image, const std::map<int, std::vector<NormalizedBox>>& boxes,
      int dataset_id) const override;

 private:
  const detector::Detector<float>& model_;
  int max_detections_;
};

/// Averaged per-category prompts extracted from training images.
struct GlobalPrompts {
  struct Entry {
    int dataset_id = 0;
    int category_id = 0;
    int samples = 0;
    std::vector<float> embedding;
  };
  struct Missing {
    int dataset_id = 0;
    int category_id = 0;
    friend bool operator==(const Missing&, const Missing&) = default;
  };

  int dim = 0;
  int images_per_category = 0;
  std::uint64_t seed = 0;
  std::vector<Entry> entries;
  std::vector<Missing> missing;

  /// Archive with one (entries x dim) array named "prompts".
  void save(const std::filesystem::path& path) const;
  static GlobalPrompts load(const std::filesystem::path& path);
};

/// Per-image protocol: one random ground-truth box per present category
/// prompts that category; all ground truth, including the prompting
/// instance, remains a target.
EvalReport eval_visual_i(const EvalModel& model, std::span<const data::Dataset> datasets,
                         const ProtocolConfig& config);

/// For each dictionary category: sample images containing it (with
/// replacement when there are too few), prompt with all of the category's
/// boxes, and average. Categories absent from training are listed as missing.
GlobalPrompts extract_global_prompts(const EvalModel& model,
                                     std::span<const data::Dataset> train_datasets,
                                     const ProtocolConfig& config);

/// One forward per image with every category's global prompt. Throws
/// ValidationError when the prompts do not cover a dataset's dictionary or
/// have the wrong width.
EvalReport eval_visual_g(const EvalModel& model, std::span<const data::Dataset> datasets,
                         const GlobalPrompts& prompts, const ProtocolConfig& config);

/// Text prompts for the full dictionary of each image's dataset.
EvalReport eval_text(const EvalModel& model, std::span<const data::Dataset> datasets,
                     const ProtocolConfig& config);

}  // namespace petduet::eval
