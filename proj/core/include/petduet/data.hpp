#pragma once

// Synthetic shapes corpus: scene rendering, COCO-style annotation I/O,
// the single-dataset batch sampler and the two training augmentations.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "petduet/geometry.hpp"
#include "petduet/image.hpp"

namespace petduet::data {

using geometry::AbsoluteBox;

enum class Shape { kCircle, kSquare, kTriangle, kCross, kRing, kBar };

const char* shape_name(Shape shape);
Shape parse_shape(std::string_view name);

struct CategorySpec {
  int id = 0;
  std::string name;
  Shape shape = Shape::kCircle;
  std::array<float, 3> color{};

  friend bool operator==(const CategorySpec&, const CategorySpec&) = default;
};

struct SceneSpec {
  int dataset_id = 0;
  std::string name;
  int image_size = 96;
  std::vector<CategorySpec> categories;
  int min_objects = 1;
  int max_objects = 3;
  /// Object side as a fraction of the image side.
  double min_extent = 0.18;
  double max_extent = 0.40;
  bool occlusion_allowed = false;
  /// Standard deviation of per-pixel Gaussian noise.
  double noise_level = 0.03;

  /// Throws ValidationError: fewer than 2 categories, size not a multiple
  /// of 32, duplicate category ids, bad object or extent ranges.
  void validate() const;
  std::vector<int> category_ids() const;
  const CategorySpec& category(int id) const;
  bool has_category(int id) const;

  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

std::string scene_spec_to_json(const SceneSpec& spec);
SceneSpec parse_scene_spec(std::string_view json);

/// The two default datasets with disjoint dictionaries (ids 0-5 and 6-11).
/// With near_duplicates, the second dataset gets one extra category that
/// shares its shape with an existing one and differs only slightly in color.
std::vector<SceneSpec> default_scene_specs(int image_size = 96, bool near_duplicates = false);

struct Annotation {
  int id = 0;
  int category_id = 0;
  AbsoluteBox box;

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct AnnotatedImage {
  Image image;
  std::vector<Annotation> annotations;
  int image_id = 0;
  int dataset_id = 0;

  std::vector<geometry::NormalizedBox> normalized_boxes() const;
  std::vector<int> labels() const;
};

enum class Split { kTrain, kVal };

/// Every tenth image by hash of its id goes to validation.
Split split_of(int image_id);

/// Renders one image. The result depends only on (spec, seed, image_id).
AnnotatedImage render_scene(const SceneSpec& spec, std::uint64_t seed, int image_id);

/// A dataset loaded in memory.
struct Dataset {
  SceneSpec spec;
  std::uint64_t seed = 0;
  std::vector<AnnotatedImage> images;

  int dataset_id() const { return spec.dataset_id; }
  std::size_t size() const { return images.size(); }
  /// Indices into images.
  std::vector<int> indices(Split split) const;
  /// Copy restricted to one split.
  Dataset subset(Split split) const;
};

/// Renders a dataset without touching the disk.
Dataset synthesize_dataset(const SceneSpec& spec, int n_images, std::uint64_t seed);

/// Writes images/NNNNNN.png, annotations.json (COCO layout) and
/// manifest.json (spec, seed, SHA-256 of every file) to dir. Output is
/// byte-identical for a fixed (spec, n_images, seed). Throws
/// ValidationError for an invalid spec or n_images < 1.
void generate_dataset(const SceneSpec& spec, int n_images, std::uint64_t seed,
                      const std::filesystem::path& dir);

/// Reads a directory written by generate_dataset. With verify, every file's
/// checksum is compared with the manifest (ArtifactError on mismatch).
Dataset load_dataset(const std::filesystem::path& dir, bool verify = false);

/// COCO JSON for a dataset (file names are images/NNNNNN.png).
std::string to_coco_json(const Dataset& dataset);
/// Parses annotations back; the images are left empty.
std::vector<AnnotatedImage> parse_coco_annotations(std::string_view json);

/// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_hex(std::string_view bytes);

struct Batch {
  int dataset = 0;  // position in the sampler's dataset list
  std::vector<int> indices;
};

/// Infinite stream of batches, each drawn from a single dataset. The
/// dataset is picked per batch with probability proportional to its size;
/// within a dataset, images are visited in reshuffled passes.
class BatchSampler {
 public:
  BatchSampler(std::vector<int> dataset_sizes, int batch_size, std::uint64_t seed);

  Batch next();
  int batch_size() const { return batch_size_; }
  /// Batches per epoch: total images over batch size, rounded up.
  int batches_per_epoch() const;

  std::string save_state() const;
  void load_state(std::string_view state);

 private:
  int draw_index(int dataset);

  std::vector<int> sizes_;
  int batch_size_;
  std::mt19937_64 rng_;
  std::vector<std::vector<int>> order_;
  std::vector<std::size_t> cursor_;
};

/// Mirrors image and boxes around the vertical axis.
AnnotatedImage flip_horizontal(const AnnotatedImage& sample);
/// Bilinear resize to size x size with boxes scaled to match.
AnnotatedImage resize(const AnnotatedImage& sample, int size);

}  // namespace petduet::data
