#include "petduet/data.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "petduet/error.hpp"

namespace petduet::data {

using nlohmann::json;

const char* shape_name(Shape shape) {
  switch (shape) {
    case Shape::kCircle: return "circle";
    case Shape::kSquare: return "square";
    case Shape::kTriangle: return "triangle";
    case Shape::kCross: return "cross";
    case Shape::kRing: return "ring";
    case Shape::kBar: return "bar";
  }
  return "?";
}

Shape parse_shape(std::string_view name) {
  for (Shape s : {Shape::kCircle, Shape::kSquare, Shape::kTriangle, Shape::kCross, Shape::kRing,
                  Shape::kBar}) {
    if (name == shape_name(s)) return s;
  }
  throw ValidationError("unknown shape '" + std::string(name) + "'");
}

void SceneSpec::validate() const {
  if (categories.size() < 2) throw ValidationError("scene spec needs at least 2 categories");
  if (image_size < 32 || image_size % 32 != 0) {
    throw ValidationError("image_size must be a positive multiple of 32");
  }
  std::set<int> ids;
  for (const auto& c : categories) {
    if (c.id < 0) throw ValidationError("category ids must be non-negative");
    if (!ids.insert(c.id).second) {
      throw ValidationError("duplicate category id " + std::to_string(c.id));
    }
    for (float v : c.color) {
      if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("category color outside [0,1]");
    }
  }
  if (min_objects < 1 || max_objects < min_objects) {
    throw ValidationError("objects_per_image range must satisfy 1 <= min <= max");
  }
  if (!(min_extent > 0.0 && min_extent <= max_extent && max_extent <= 0.9)) {
    throw ValidationError("object extent range must satisfy 0 < min <= max <= 0.9");
  }
  if (min_extent * image_size < 6.0) throw ValidationError("objects smaller than 6 pixels");
  if (!(noise_level >= 0.0 && noise_level <= 1.0)) {
    throw ValidationError("noise_level outside [0,1]");
  }
}

std::vector<int> SceneSpec::category_ids() const {
  std::vector<int> ids;
  for (const auto& c : categories) ids.push_back(c.id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

const CategorySpec& SceneSpec::category(int id) const {
  for (const auto& c : categories) {
    if (c.id == id) return c;
  }
  throw ValidationError("category " + std::to_string(id) + " not in dataset " + name);
}

bool SceneSpec::has_category(int id) const {
  return std::any_of(categories.begin(), categories.end(),
                     [id](const CategorySpec& c) { return c.id == id; });
}

namespace {

json spec_json(const SceneSpec& s) {
  json cats = json::array();
  for (const auto& c : s.categories) {
    cats.push_back({{"id", c.id},
                    {"name", c.name},
                    {"shape", shape_name(c.shape)},
                    {"color", {c.color[0], c.color[1], c.color[2]}}});
  }
  return {{"dataset_id", s.dataset_id},
          {"name", s.name},
          {"image_size", s.image_size},
          {"categories", cats},
          {"objects_per_image", {s.min_objects, s.max_objects}},
          {"extent", {s.min_extent, s.max_extent}},
          {"occlusion_allowed", s.occlusion_allowed},
          {"noise_level", s.noise_level}};
}

SceneSpec spec_from_json(const json& j) {
  SceneSpec s;
  s.dataset_id = j.at("dataset_id").get<int>();
  s.name = j.at("name").get<std::string>();
  s.image_size = j.at("image_size").get<int>();
  for (const auto& c : j.at("categories")) {
    const auto color = c.at("color").get<std::vector<float>>();
    if (color.size() != 3) throw ValidationError("category color needs 3 components");
    s.categories.push_back({c.at("id").get<int>(), c.at("name").get<std::string>(),
                            parse_shape(c.at("shape").get<std::string>()),
                            {color[0], color[1], color[2]}});
  }
  const auto range = j.at("objects_per_image").get<std::vector<int>>();
  const auto extent = j.at("extent").get<std::vector<double>>();
  if (range.size() != 2 || extent.size() != 2) throw ValidationError("ranges need two values");
  s.min_objects = range[0];
  s.max_objects = range[1];
  s.min_extent = extent[0];
  s.max_extent = extent[1];
  s.occlusion_allowed = j.at("occlusion_allowed").get<bool>();
  s.noise_level = j.at("noise_level").get<double>();
  s.validate();
  return s;
}

}  // namespace

std::string scene_spec_to_json(const SceneSpec& spec) { return spec_json(spec).dump(2); }

SceneSpec parse_scene_spec(std::string_view text) {
  try {
    return spec_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed scene spec: ") + e.what());
  }
}

std::vector<SceneSpec> default_scene_specs(int image_size, bool near_duplicates) {
  SceneSpec a;
  a.dataset_id = 0;
  a.name = "shapes-a";
  a.image_size = image_size;
  a.categories = {{0, "red_circle", Shape::kCircle, {0.90f, 0.10f, 0.10f}},
                  {1, "green_square", Shape::kSquare, {0.10f, 0.80f, 0.15f}},
                  {2, "blue_triangle", Shape::kTriangle, {0.15f, 0.25f, 0.95f}},
                  {3, "yellow_cross", Shape::kCross, {0.95f, 0.90f, 0.10f}},
                  {4, "magenta_ring", Shape::kRing, {0.90f, 0.15f, 0.85f}},
                  {5, "cyan_bar", Shape::kBar, {0.10f, 0.85f, 0.90f}}};
  SceneSpec b = a;
  b.dataset_id = 1;
  b.name = "shapes-b";
  b.categories = {{6, "orange_triangle", Shape::kTriangle, {1.00f, 0.55f, 0.05f}},
                  {7, "purple_ring", Shape::kRing, {0.50f, 0.15f, 0.80f}},
                  {8, "lime_bar", Shape::kBar, {0.60f, 0.95f, 0.10f}},
                  {9, "pink_circle", Shape::kCircle, {1.00f, 0.50f, 0.70f}},
                  {10, "navy_square", Shape::kSquare, {0.05f, 0.05f, 0.45f}},
                  {11, "brown_cross", Shape::kCross, {0.50f, 0.30f, 0.10f}}};
  if (near_duplicates) {
    b.categories.push_back({12, "coral_circle", Shape::kCircle, {1.00f, 0.40f, 0.55f}});
  }
  return {a, b};
}

std::vector<geometry::NormalizedBox> AnnotatedImage::normalized_boxes() const {
  std::vector<geometry::NormalizedBox> out;
  for (const auto& a : annotations) {
    out.push_back(geometry::normalize_box(a.box, image.width, image.height));
  }
  return out;
}

std::vector<int> AnnotatedImage::labels() const {
  std::vector<int> out;
  for (const auto& a : annotations) out.push_back(a.category_id);
  return out;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::mt19937_64 image_rng(std::uint64_t seed, int dataset_id, int image_id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(dataset_id), static_cast<std::uint32_t>(image_id)};
  return std::mt19937_64(seq);
}

// Shape membership for a point relative to the object center, r = half side.
bool inside(Shape shape, bool vertical, double dx, double dy, double r) {
  switch (shape) {
    case Shape::kCircle: return dx * dx + dy * dy <= r * r;
    case Shape::kSquare: return std::abs(dx) <= r && std::abs(dy) <= r;
    case Shape::kTriangle: {
      if (dy < -r || dy > r) return false;
      const double half = 0.5 * (dy + r);
      return std::abs(dx) <= half;
    }
    case Shape::kCross: {
      const double arm = r / 3.0;
      return (std::abs(dx) <= r && std::abs(dy) <= arm) || (std::abs(dy) <= r && std::abs(dx) <= arm);
    }
    case Shape::kRing: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
    case Shape::kBar: {
      const double thin = 0.35 * r;
      return vertical ? (std::abs(dx) <= thin && std::abs(dy) <= r)
                      : (std::abs(dx) <= r && std::abs(dy) <= thin);
    }
  }
  return false;
}

bool overlaps(const AbsoluteBox& a, const AbsoluteBox& b, double margin) {
  return a.x0 < b.x1 + margin && b.x0 < a.x1 + margin && a.y0 < b.y1 + margin &&
         b.y0 < a.y1 + margin;
}

}  // namespace

Split split_of(int image_id) {
  return splitmix64(static_cast<std::uint64_t>(image_id)) % 10 == 0 ? Split::kVal : Split::kTrain;
}

AnnotatedImage render_scene(const SceneSpec& spec, std::uint64_t seed, int image_id) {
  auto rng = image_rng(seed, spec.dataset_id, image_id);
  const int size = spec.image_size;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> count(spec.min_objects, spec.max_objects);
  std::uniform_int_distribution<std::size_t> pick(0, spec.categories.size() - 1);
  std::normal_distribution<float> noise(0.0f, static_cast<float>(spec.noise_level));

  AnnotatedImage out;
  out.image_id = image_id;
  out.dataset_id = spec.dataset_id;
  out.image = Image(size, size);
  const float gray = static_cast<float>(0.35 + 0.3 * unit(rng));
  for (int c = 0; c < 3; ++c) {
    const float tint = gray + static_cast<float>(0.1 * (unit(rng) - 0.5));
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) out.image.at(y, x, c) = tint;
    }
  }

  const int wanted = count(rng);
  std::vector<AbsoluteBox> placed;
  for (int n = 0; n < wanted; ++n) {
    const auto& cat = spec.categories[pick(rng)];
    const bool vertical = unit(rng) < 0.5;
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double side =
          size * (spec.min_extent + (spec.max_extent - spec.min_extent) * unit(rng));
      const double r = 0.5 * side;
      const double cx = r + (size - side) * unit(rng);
      const double cy = r + (size - side) * unit(rng);
      // Tight pixel bounds of the rasterized shape (pixel centers).
      int x0 = size, y0 = size, x1 = -1, y1 = -1;
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          if (inside(cat.shape, vertical, x + 0.5 - cx, y + 0.5 - cy, r)) {
            x0 = std::min(x0, x);
            y0 = std::min(y0, y);
            x1 = std::max(x1, x);
            y1 = std::max(y1, y);
          }
        }
      }
      if (x1 < 0) continue;
      const AbsoluteBox box{static_cast<double>(x0), static_cast<double>(y0), x1 + 1.0, y1 + 1.0};
      const bool blocked =
          !spec.occlusion_allowed &&
          std::any_of(placed.begin(), placed.end(),
                      [&](const AbsoluteBox& other) { return overlaps(box, other, 2.0); });
      if (blocked) continue;
      std::array<float, 3> color = cat.color;
      for (float& v : color) v = std::clamp(v + static_cast<float>(0.08 * (unit(rng) - 0.5)), 0.0f, 1.0f);
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          if (inside(cat.shape, vertical, x + 0.5 - cx, y + 0.5 - cy, r)) {
            for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = color[c];
          }
        }
      }
      placed.push_back(box);
      out.annotations.push_back({0, cat.id, box});
      break;
    }
  }
  if (spec.noise_level > 0.0) {
    for (float& v : out.image.pixels) v = std::clamp(v + noise(rng), 0.0f, 1.0f);
  }
  // Quantize so in-memory and on-disk copies agree.
  out.image = from_bytes(size, size, to_bytes(out.image));
  return out;
}

std::vector<int> Dataset::indices(Split split) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (split_of(images[i].image_id) == split) out.push_back(static_cast<int>(i));
  }
  return out;
}

Dataset Dataset::subset(Split split) const {
  Dataset out{spec, seed, {}};
  for (int i : indices(split)) out.images.push_back(images[i]);
  return out;
}

Dataset synthesize_dataset(const SceneSpec& spec, int n_images, std::uint64_t seed) {
  spec.validate();
  if (n_images < 1) throw ValidationError("n_images must be at least 1");
  Dataset out{spec, seed, {}};
  out.images.reserve(n_images);
  int next_id = 1;
  for (int i = 0; i < n_images; ++i) {
    auto img = render_scene(spec, seed, i);
    // The first object always fits, so every image carries an annotation.
    for (auto& a : img.annotations) a.id = next_id++;
    out.images.push_back(std::move(img));
  }
  return out;
}

namespace {

std::string image_file(int image_id) {
  std::ostringstream name;
  name << "images/" << std::setw(6) << std::setfill('0') << image_id << ".png";
  return name.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out << text;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json coco_json(const Dataset& d) {
  json images = json::array(), annotations = json::array(), categories = json::array();
  for (const auto& img : d.images) {
    images.push_back({{"id", img.image_id},
                      {"file_name", image_file(img.image_id)},
                      {"width", d.spec.image_size},
                      {"height", d.spec.image_size}});
    for (const auto& a : img.annotations) {
      annotations.push_back({{"id", a.id},
                             {"image_id", img.image_id},
                             {"category_id", a.category_id},
                             {"bbox", {a.box.x0, a.box.y0, a.box.width(), a.box.height()}},
                             {"area", a.box.width() * a.box.height()},
                             {"iscrowd", 0}});
    }
  }
  for (const auto& c : d.spec.categories) {
    categories.push_back({{"id", c.id}, {"name", c.name}, {"supercategory", shape_name(c.shape)}});
  }
  return {{"info", {{"dataset_id", d.spec.dataset_id}, {"name", d.spec.name}}},
          {"images", images},
          {"annotations", annotations},
          {"categories", categories}};
}

}  // namespace

std::string to_coco_json(const Dataset& dataset) { return coco_json(dataset).dump(1); }

std::vector<AnnotatedImage> parse_coco_annotations(std::string_view text) {
  std::vector<AnnotatedImage> out;
  try {
    const auto j = json::parse(text);
    const int dataset_id = j.at("info").at("dataset_id").get<int>();
    std::map<int, std::size_t> slot;
    for (const auto& im : j.at("images")) {
      AnnotatedImage a;
      a.image_id = im.at("id").get<int>();
      a.dataset_id = dataset_id;
      slot[a.image_id] = out.size();
      out.push_back(std::move(a));
    }
    for (const auto& an : j.at("annotations")) {
      const auto it = slot.find(an.at("image_id").get<int>());
      if (it == slot.end()) throw ValidationError("annotation refers to unknown image");
      const auto b = an.at("bbox").get<std::vector<double>>();
      if (b.size() != 4) throw ValidationError("bbox needs 4 values");
      out[it->second].annotations.push_back(
          {an.at("id").get<int>(), an.at("category_id").get<int>(), {b[0], b[1], b[0] + b[2], b[1] + b[3]}});
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed annotation file: ") + e.what());
  }
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw ArtifactError("SHA-256 computation failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text(path)); }

void generate_dataset(const SceneSpec& spec, int n_images, std::uint64_t seed,
                      const std::filesystem::path& dir) {
  const Dataset d = synthesize_dataset(spec, n_images, seed);
  std::filesystem::create_directories(dir / "images");
  json files = json::object();
  for (const auto& img : d.images) {
    const auto rel = image_file(img.image_id);
    write_png(dir / rel, img.image);
    files[rel] = sha256_file(dir / rel);
  }
  const auto coco = to_coco_json(d);
  write_text(dir / "annotations.json", coco);
  files["annotations.json"] = sha256_hex(coco);
  const json manifest{{"format", "petduet-shapes"},
                      {"version", 1},
                      {"seed", seed},
                      {"n_images", n_images},
                      {"spec", spec_json(spec)},
                      {"files", files}};
  write_text(dir / "manifest.json", manifest.dump(2));
}

Dataset load_dataset(const std::filesystem::path& dir, bool verify) {
  json manifest;
  try {
    manifest = json::parse(read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw ArtifactError("malformed dataset manifest in " + dir.string() + ": " + e.what());
  }
  Dataset d;
  d.spec = spec_from_json(manifest.at("spec"));
  d.seed = manifest.at("seed").get<std::uint64_t>();
  if (verify) {
    for (const auto& [rel, sum] : manifest.at("files").items()) {
      if (sha256_file(dir / rel) != sum.get<std::string>()) {
        throw ArtifactError("checksum mismatch for " + (dir / rel).string());
      }
    }
  }
  d.images = parse_coco_annotations(read_text(dir / "annotations.json"));
  for (auto& img : d.images) {
    if (img.dataset_id != d.spec.dataset_id) throw ArtifactError("dataset id mismatch");
    img.image = read_png(dir / image_file(img.image_id));
    for (const auto& a : img.annotations) {
      if (!d.spec.has_category(a.category_id)) {
        throw ValidationError("annotation category " + std::to_string(a.category_id) +
                              " not in the dictionary");
      }
      if (a.box.x0 < 0 || a.box.y0 < 0 || a.box.x1 > img.image.width ||
          a.box.y1 > img.image.height || a.box.width() <= 0 || a.box.height() <= 0) {
        throw ValidationError("annotation box out of bounds");
      }
    }
  }
  return d;
}

BatchSampler::BatchSampler(std::vector<int> dataset_sizes, int batch_size, std::uint64_t seed)
    : sizes_(std::move(dataset_sizes)), batch_size_(batch_size), rng_(seed) {
  if (batch_size < 1) throw ValidationError("batch size must be at least 1");
  if (sizes_.empty()) throw ValidationError("sampler needs at least one dataset");
  for (int s : sizes_) {
    if (s < 1) throw ValidationError("sampler datasets must be non-empty");
  }
  order_.resize(sizes_.size());
  cursor_.assign(sizes_.size(), 0);
  for (std::size_t d = 0; d < sizes_.size(); ++d) {
    order_[d].resize(sizes_[d]);
    std::iota(order_[d].begin(), order_[d].end(), 0);
    std::shuffle(order_[d].begin(), order_[d].end(), rng_);
  }
}

int BatchSampler::draw_index(int dataset) {
  auto& order = order_[dataset];
  if (cursor_[dataset] == order.size()) {
    std::shuffle(order.begin(), order.end(), rng_);
    cursor_[dataset] = 0;
  }
  return order[cursor_[dataset]++];
}

Batch BatchSampler::next() {
  std::discrete_distribution<int> which(sizes_.begin(), sizes_.end());
  Batch batch;
  batch.dataset = which(rng_);
  for (int i = 0; i < batch_size_; ++i) batch.indices.push_back(draw_index(batch.dataset));
  for (int i : batch.indices) {
    if (i < 0 || i >= sizes_[batch.dataset]) throw std::logic_error("batch mixes datasets");
  }
  return batch;
}

int BatchSampler::batches_per_epoch() const {
  const int total = std::accumulate(sizes_.begin(), sizes_.end(), 0);
  return (total + batch_size_ - 1) / batch_size_;
}

std::string BatchSampler::save_state() const {
  std::ostringstream rng;
  rng << rng_;
  return json{{"rng", rng.str()}, {"order", order_}, {"cursor", cursor_}}.dump();
}

void BatchSampler::load_state(std::string_view state) {
  try {
    const auto j = json::parse(state);
    auto order = j.at("order").get<std::vector<std::vector<int>>>();
    auto cursor = j.at("cursor").get<std::vector<std::size_t>>();
    if (order.size() != sizes_.size() || cursor.size() != sizes_.size()) {
      throw ArtifactError("sampler state has a different dataset count");
    }
    for (std::size_t d = 0; d < order.size(); ++d) {
      if (static_cast<int>(order[d].size()) != sizes_[d] || cursor[d] > order[d].size()) {
        throw ArtifactError("sampler state does not match dataset sizes");
      }
    }
    std::istringstream rng(j.at("rng").get<std::string>());
    rng >> rng_;
    order_ = std::move(order);
    cursor_ = std::move(cursor);
  } catch (const json::exception& e) {
    throw ArtifactError(std::string("malformed sampler state: ") + e.what());
  }
}

AnnotatedImage flip_horizontal(const AnnotatedImage& sample) {
  AnnotatedImage out = sample;
  out.image = sample.image.flipped_horizontally();
  const double w = sample.image.width;
  for (auto& a : out.annotations) a.box = {w - a.box.x1, a.box.y0, w - a.box.x0, a.box.y1};
  return out;
}

AnnotatedImage resize(const AnnotatedImage& sample, int size) {
  if (size < 1) throw ValidationError("resize target must be positive");
  const Image& src = sample.image;
  AnnotatedImage out = sample;
  out.image = Image(size, size);
  const double sx = static_cast<double>(src.width) / size;
  const double sy = static_cast<double>(src.height) / size;
  for (int y = 0; y < size; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double ty = fy - y0;
    for (int x = 0; x < size; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double tx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = src.at(y0, x0, c) * (1 - tx) + src.at(y0, x1, c) * tx;
        const double bottom = src.at(y1, x0, c) * (1 - tx) + src.at(y1, x1, c) * tx;
        out.image.at(y, x, c) = static_cast<float>(top * (1 - ty) + bottom * ty);
      }
    }
  }
  for (auto& a : out.annotations) {
    a.box = {a.box.x0 / sx, a.box.y0 / sy, a.box.x1 / sx, a.box.y1 / sy};
  }
  return out;
}

}  // namespace petduet::data
