#include "petduet/nn.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "petduet/error.hpp"

namespace petduet::nn {

std::string_view group_name(ParamGroup group) {
  switch (group) {
    case ParamGroup::kBackbone: return "backbone";
    case ParamGroup::kEnhancerShared: return "enhancer_shared";
    case ParamGroup::kText: return "text";
    case ParamGroup::kVisual: return "visual";
    case ParamGroup::kHead: return "head";
  }
  return "unknown";
}

ParamGroup parse_group(std::string_view name) {
  for (ParamGroup g : {ParamGroup::kBackbone, ParamGroup::kEnhancerShared, ParamGroup::kText,
                       ParamGroup::kVisual, ParamGroup::kHead}) {
    if (group_name(g) == name) return g;
  }
  throw ValidationError("unknown parameter group '" + std::string(name) + "'");
}

// ---- ParamStore -------------------------------------------------------------

template <typename T>
Tensor<T> ParamStore<T>::add(const std::string& name, ParamGroup group, int rows, int cols,
                             Init init) {
  if (index_.contains(name)) throw ValidationError("duplicate parameter name '" + name + "'");
  std::vector<T> values(static_cast<std::size_t>(rows) * cols, T(0));
  switch (init.kind) {
    case Init::Kind::kZeros: break;
    case Init::Kind::kConstant: std::fill(values.begin(), values.end(), static_cast<T>(init.a)); break;
    case Init::Kind::kUniform: {
      std::uniform_real_distribution<double> dist(init.a, init.b);
      for (auto& v : values) v = static_cast<T>(dist(rng_));
      break;
    }
    case Init::Kind::kXavier: {
      const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : values) v = static_cast<T>(dist(rng_));
      break;
    }
  }
  Tensor<T> t(rows, cols, std::move(values), true);
  index_.emplace(name, entries_.size());
  entries_.push_back({name, group, t});
  return t;
}

template <typename T>
const typename ParamStore<T>::Entry* ParamStore<T>::find(std::string_view name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

template <typename T>
std::vector<Tensor<T>> ParamStore<T>::tensors() const {
  std::vector<Tensor<T>> out;
  for (const auto& e : entries_) out.push_back(e.tensor);
  return out;
}

template <typename T>
std::vector<Tensor<T>> ParamStore<T>::tensors(ParamGroup group) const {
  std::vector<Tensor<T>> out;
  for (const auto& e : entries_) {
    if (e.group == group) out.push_back(e.tensor);
  }
  return out;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

// ---- layers -----------------------------------------------------------------

template <typename T>
Linear<T>::Linear(ParamStore<T>& store, const std::string& name, ParamGroup group, int in, int out,
                  Init weight_init, Init bias_init)
    : weight_(store.add(name + ".weight", group, in, out, weight_init)),
      bias_(store.add(name + ".bias", group, 1, out, bias_init)) {}

template <typename T>
LayerNorm<T>::LayerNorm(ParamStore<T>& store, const std::string& name, ParamGroup group, int dim)
    : gamma_(store.add(name + ".gamma", group, 1, dim, Init::constant(1.0))),
      beta_(store.add(name + ".beta", group, 1, dim, Init::zeros())) {}

template <typename T>
Mlp<T>::Mlp(ParamStore<T>& store, const std::string& name, ParamGroup group, std::vector<int> widths,
            bool zero_last) {
  if (widths.size() < 2) throw ValidationError("Mlp needs at least input and output widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    layers_.emplace_back(store, name + ".fc" + std::to_string(i), group, widths[i], widths[i + 1],
                         last && zero_last ? Init::zeros() : Init::xavier());
  }
}

template <typename T>
Tensor<T> Mlp<T>::operator()(const Tensor<T>& x) const {
  Tensor<T> h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size()) h = ag::relu(h);
  }
  return h;
}

template <typename T>
std::vector<Tensor<T>> Mlp<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& l : layers_) {
    out.push_back(l.weight());
    out.push_back(l.bias());
  }
  return out;
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(ParamStore<T>& store, const std::string& name,
                                          ParamGroup group, int dim, int heads)
    : q_(store, name + ".q", group, dim, dim),
      k_(store, name + ".k", group, dim, dim),
      v_(store, name + ".v", group, dim, dim),
      o_(store, name + ".o", group, dim, dim),
      heads_(heads) {}

template <typename T>
Tensor<T> MultiHeadAttention<T>::operator()(const Tensor<T>& query, const Tensor<T>& key,
                                            const Tensor<T>& value,
                                            const std::vector<int>* segments) const {
  return o_(ag::attention(q_(query), k_(key), v_(value), heads_, segments));
}

template <typename T>
std::vector<Tensor<T>> MultiHeadAttention<T>::parameters() const {
  return {q_.weight(), q_.bias(), k_.weight(), k_.bias(),
          v_.weight(), v_.bias(), o_.weight(), o_.bias()};
}

// ---- multi-scale features -----------------------------------------------------

template <typename T>
int MultiScaleFeatures<T>::level_start(int level) const {
  int start = 0;
  for (int l = 0; l < level; ++l) start += levels.at(l).tokens();
  return start;
}

template <typename T>
Tensor<T> MultiScaleFeatures<T>::level(int level) const {
  const int start = level_start(level);
  return ag::slice_rows(tokens, start, start + levels.at(level).tokens());
}

template <typename T>
void MultiScaleFeatures<T>::validate() const {
  if (levels.size() < 2) throw ValidationError("multi-scale features need at least 2 levels");
  int total = 0;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    if (levels[l].height <= 0 || levels[l].width <= 0) {
      throw ValidationError("feature level with empty spatial extent");
    }
    if (l > 0 && levels[l].tokens() >= levels[l - 1].tokens()) {
      throw ValidationError("feature level sizes must strictly decrease");
    }
    total += levels[l].tokens();
  }
  if (!tokens.defined() || tokens.rows() != total) {
    throw ValidationError("feature token count does not match level shapes");
  }
}

std::vector<geometry::NormalizedBox> token_reference_boxes(const std::vector<LevelShape>& levels) {
  std::vector<geometry::NormalizedBox> out;
  for (const auto& s : levels) {
    const double bw = std::min(1.0, 8.0 / s.width);
    const double bh = std::min(1.0, 8.0 / s.height);
    for (int y = 0; y < s.height; ++y) {
      for (int x = 0; x < s.width; ++x) {
        out.push_back({(x + 0.5) / s.width, (y + 0.5) / s.height, bw, bh});
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> boxes_tensor(const std::vector<geometry::NormalizedBox>& boxes) {
  std::vector<T> v;
  v.reserve(boxes.size() * 4);
  for (const auto& b : boxes) {
    v.push_back(static_cast<T>(b.cx));
    v.push_back(static_cast<T>(b.cy));
    v.push_back(static_cast<T>(b.w));
    v.push_back(static_cast<T>(b.h));
  }
  return Tensor<T>(static_cast<int>(boxes.size()), 4, std::move(v));
}

template <typename T>
Tensor<T> positional_codes(const std::vector<geometry::NormalizedBox>& boxes, int dim) {
  std::vector<T> v;
  v.reserve(boxes.size() * dim);
  for (const auto& b : boxes) {
    for (double c : geometry::sincos_encode(b, dim)) v.push_back(static_cast<T>(c));
  }
  return Tensor<T>(static_cast<int>(boxes.size()), dim, std::move(v));
}

// ---- deformable attention -----------------------------------------------------

template <typename T>
MSDeformAttn<T>::MSDeformAttn(ParamStore<T>& store, const std::string& name, ParamGroup group,
                              const ModelConfig& config)
    : heads_(config.heads), levels_(config.levels), points_(config.points) {
  const int d = config.dim;
  const int samples = heads_ * levels_ * points_;
  value_proj_ = Linear<T>(store, name + ".value", group, d, d);
  offset_proj_ = Linear<T>(store, name + ".offset", group, d, samples * 2, Init::zeros());
  weight_proj_ = Linear<T>(store, name + ".weight", group, d, samples, Init::zeros());
  output_proj_ = Linear<T>(store, name + ".output", group, d, d);
  if (config.offset_init == OffsetInit::kGrid) {
    auto bias = offset_proj_.bias();
    auto b = bias.mutable_values();
    for (int h = 0; h < heads_; ++h) {
      const double theta = 2.0 * std::numbers::pi * h / heads_;
      double dx = std::cos(theta);
      double dy = std::sin(theta);
      const double norm = std::max(std::abs(dx), std::abs(dy));
      dx /= norm;
      dy /= norm;
      for (int l = 0; l < levels_; ++l) {
        for (int p = 0; p < points_; ++p) {
          const std::size_t col = static_cast<std::size_t>(((h * levels_ + l) * points_ + p) * 2);
          b[col] = static_cast<T>(dx * (p + 1));
          b[col + 1] = static_cast<T>(dy * (p + 1));
        }
      }
    }
  }
}

template <typename T>
Tensor<T> MSDeformAttn<T>::sampling_weights(const Tensor<T>& queries,
                                            const Tensor<T>& query_pos) const {
  return ag::softmax_groups(weight_proj_(ag::add(queries, query_pos)), levels_ * points_);
}

template <typename T>
Tensor<T> MSDeformAttn<T>::operator()(const Tensor<T>& queries, const Tensor<T>& query_pos,
                                      const Tensor<T>& reference,
                                      const MultiScaleFeatures<T>& value) const {
  if (queries.cols() != value.dim() || query_pos.cols() != value.dim()) {
    throw ValidationError("deformable attention: query and value widths differ");
  }
  if (static_cast<int>(value.levels.size()) != levels_) {
    throw ValidationError("deformable attention: wrong number of feature levels");
  }
  if (reference.rows() != queries.rows() || reference.cols() != 4) {
    throw ValidationError("deformable attention: reference must be n x 4");
  }
  Tensor<T> ref = reference;
  const auto rv = reference.values();
  const bool outside = std::any_of(rv.begin(), rv.end(), [](T v) { return !(v >= T(0) && v <= T(1)); });
  if (outside) {
    spdlog::warn("deformable attention: reference box outside [0,1], clamping");
    if (!reference.requires_grad()) {
      std::vector<T> clamped(rv.begin(), rv.end());
      for (auto& v : clamped) v = std::isfinite(v) ? std::clamp(v, T(0), T(1)) : T(0.5);
      ref = Tensor<T>(reference.rows(), 4, std::move(clamped));
    }
  }
  const Tensor<T> q = ag::add(queries, query_pos);
  const Tensor<T> offsets = offset_proj_(q);
  const Tensor<T> weights = ag::softmax_groups(weight_proj_(q), levels_ * points_);
  const Tensor<T> locations = ag::sampling_locations(ref, offsets, points_);
  const Tensor<T> v = value_proj_(value.tokens);
  const Tensor<T> sampled = ag::deform_sample(v, std::span<const LevelShape>(value.levels),
                                              locations, weights, heads_, points_);
  return output_proj_(sampled);
}

template <typename T>
std::vector<Tensor<T>> MSDeformAttn<T>::parameters() const {
  return {value_proj_.weight(),  value_proj_.bias(),  offset_proj_.weight(), offset_proj_.bias(),
          weight_proj_.weight(), weight_proj_.bias(), output_proj_.weight(), output_proj_.bias()};
}

template <typename T>
FeedForward<T>::FeedForward(ParamStore<T>& store, const std::string& name, ParamGroup group,
                            int dim, int hidden, double residual_scale)
    : norm_(store, name + ".norm", group, dim),
      fc1_(store, name + ".fc1", group, dim, hidden),
      fc2_(store, name + ".fc2", group, hidden, dim),
      residual_scale_(static_cast<T>(residual_scale)) {}

template <typename T>
Tensor<T> FeedForward<T>::operator()(const Tensor<T>& x) const {
  const Tensor<T> branch = fc2_(ag::relu(fc1_(norm_(x))));
  return ag::add(x, residual_scale_ == T(1) ? branch : ag::scale(branch, residual_scale_));
}

template <typename T>
std::vector<Tensor<T>> FeedForward<T>::parameters() const {
  auto out = norm_.parameters();
  for (const auto& t : {fc1_.weight(), fc1_.bias(), fc2_.weight(), fc2_.bias()}) out.push_back(t);
  return out;
}

// ---- backbone -------------------------------------------------------------------

template <typename T>
Backbone<T>::Backbone(ParamStore<T>& store, const ModelConfig& config) {
  const int w = config.backbone_width;
  const std::vector<int> channels{3, w, 2 * w, 3 * w, 4 * w, 4 * w};
  for (std::size_t s = 0; s + 1 < channels.size(); ++s) {
    const std::string name = "backbone.stage" + std::to_string(s);
    const int cin = channels[s];
    const int cout = channels[s + 1];
    // He-uniform keeps activations from shrinking through the ReLU stack.
    const double bound = std::sqrt(6.0 / (9.0 * cin));
    stages_.push_back({store.add(name + ".weight", ParamGroup::kBackbone, 9 * cin, cout,
                                 Init::uniform(-bound, bound)),
                       store.add(name + ".bias", ParamGroup::kBackbone, 1, cout, Init::zeros())});
  }
  for (int l = 0; l < 3; ++l) {
    const std::string name = "backbone.level" + std::to_string(l);
    level_proj_.emplace_back(store, name + ".proj", ParamGroup::kBackbone, channels[3 + l],
                             config.dim);
    level_norm_.emplace_back(store, name + ".norm", ParamGroup::kBackbone, config.dim);
  }
  level_embed_ = store.add("backbone.level_embed", ParamGroup::kBackbone, 3, config.dim,
                           Init::uniform(-0.1, 0.1));
}

template <typename T>
MultiScaleFeatures<T> Backbone<T>::operator()(const Image& image) const {
  if (image.height <= 0 || image.width <= 0 || image.height % kCoarsestStride != 0 ||
      image.width % kCoarsestStride != 0) {
    throw ValidationError("backbone: image size " + std::to_string(image.height) + "x" +
                          std::to_string(image.width) + " is not a multiple of " +
                          std::to_string(kCoarsestStride));
  }
  std::vector<T> px(image.pixels.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<T>(image.pixels[i] - 0.5f);
  Tensor<T> x(image.height * image.width, 3, std::move(px));
  int h = image.height;
  int w = image.width;
  std::vector<Tensor<T>> outputs;
  std::vector<LevelShape> shapes;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    x = ag::relu(ag::conv3x3(x, h, w, stages_[s].weight, stages_[s].bias, 2));
    h = (h - 1) / 2 + 1;
    w = (w - 1) / 2 + 1;
    if (s >= 2) {
      const int l = static_cast<int>(s) - 2;
      const std::vector<int> row{l};
      Tensor<T> level = level_norm_[l](level_proj_[l](x));
      level = ag::add_broadcast(level, ag::gather_rows(level_embed_, std::span<const int>(row)));
      outputs.push_back(level);
      shapes.push_back({h, w});
    }
  }
  MultiScaleFeatures<T> out{ag::concat_rows<T>(outputs), shapes};
  return out;
}

// ---- text -----------------------------------------------------------------------

template <typename T>
TextEmbeddingTable<T>::TextEmbeddingTable(ParamStore<T>& store, const ModelConfig& config)
    : table_(store.add("text.table", ParamGroup::kText, config.text_vocab, config.dim,
                       Init::uniform(-1.0, 1.0))) {}

template <typename T>
TextTokenEmbeddings<T> TextEmbeddingTable<T>::operator()(const std::vector<int>& category_ids) const {
  for (int id : category_ids) {
    if (id < 0 || id >= table_.rows()) {
      throw ValidationError("text embedding: category id " + std::to_string(id) +
                            " outside vocabulary of " + std::to_string(table_.rows()));
    }
  }
  return {ag::gather_rows(table_, std::span<const int>(category_ids)), category_ids};
}

// ---- feature enhancer -------------------------------------------------------------

template <typename T>
FeatureEnhancer<T>::FeatureEnhancer(ParamStore<T>& store, const ModelConfig& config)
    : residual_scale_(static_cast<T>(config.residual_scale)) {
  for (int i = 0; i < config.enhancer_layers; ++i) {
    const std::string name = "enhancer.layer" + std::to_string(i);
    SharedEnhancerLayer<T> layer;
    layer.norm = LayerNorm<T>(store, name + ".self_norm", ParamGroup::kEnhancerShared, config.dim);
    layer.attn = MSDeformAttn<T>(store, name + ".self_attn", ParamGroup::kEnhancerShared, config);
    layer.ffn = FeedForward<T>(store, name + ".ffn", ParamGroup::kEnhancerShared, config.dim,
                               config.ffn_dim, config.residual_scale);
    shared_.push_back(std::move(layer));

    TextLayer text;
    text.image_norm = LayerNorm<T>(store, name + ".fusion_image_norm", ParamGroup::kText, config.dim);
    text.text_norm = LayerNorm<T>(store, name + ".fusion_text_norm", ParamGroup::kText, config.dim);
    text.image_from_text = MultiHeadAttention<T>(store, name + ".image_from_text", ParamGroup::kText,
                                                 config.dim, config.heads);
    text.text_from_image = MultiHeadAttention<T>(store, name + ".text_from_image", ParamGroup::kText,
                                                 config.dim, config.heads);
    text.text_ffn = FeedForward<T>(store, name + ".text_ffn", ParamGroup::kText, config.dim,
                                   config.ffn_dim, config.residual_scale);
    text_.push_back(std::move(text));
  }
}

template <typename T>
EnhancerOutput<T> FeatureEnhancer<T>::operator()(const MultiScaleFeatures<T>& features,
                                                 const TextTokenEmbeddings<T>* text) const {
  features.validate();
  const auto boxes = token_reference_boxes(features.levels);
  const Tensor<T> reference = boxes_tensor<T>(boxes);
  const Tensor<T> pos = positional_codes<T>(boxes, features.dim());
  auto residual = [this](const Tensor<T>& x, const Tensor<T>& branch) {
    return ag::add(x, residual_scale_ == T(1) ? branch : ag::scale(branch, residual_scale_));
  };

  Tensor<T> x = features.tokens;
  std::optional<Tensor<T>> t;
  if (text) t = text->tokens;
  for (std::size_t i = 0; i < shared_.size(); ++i) {
    const auto& layer = shared_[i];
    const Tensor<T> h = layer.norm(x);
    x = residual(x, layer.attn(h, pos, reference, MultiScaleFeatures<T>{h, features.levels}));
    if (t) {
      const auto& fusion = text_[i];
      const Tensor<T> hi = fusion.image_norm(x);
      const Tensor<T> ht = fusion.text_norm(*t);
      x = residual(x, fusion.image_from_text(hi, ht, ht));
      t = fusion.text_ffn(residual(*t, fusion.text_from_image(ht, hi, hi)));
    }
    x = layer.ffn(x);
  }
  EnhancerOutput<T> out{MultiScaleFeatures<T>{x, features.levels}, std::nullopt};
  if (t) out.text = TextTokenEmbeddings<T>{*t, text->category_ids};
  return out;
}

template <typename T>
std::vector<Tensor<T>> FeatureEnhancer<T>::shared_parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& layer : shared_) {
    for (const auto& group : {layer.norm.parameters(), layer.attn.parameters(), layer.ffn.parameters()}) {
      out.insert(out.end(), group.begin(), group.end());
    }
  }
  return out;
}

#define PETDUET_NN_INSTANTIATE(T)                                                         \
  template class ParamStore<T>;                                                           \
  template class Linear<T>;                                                               \
  template class LayerNorm<T>;                                                            \
  template class Mlp<T>;                                                                  \
  template class MultiHeadAttention<T>;                                                   \
  template struct MultiScaleFeatures<T>;                                                  \
  template Tensor<T> boxes_tensor<T>(const std::vector<geometry::NormalizedBox>&);        \
  template Tensor<T> positional_codes<T>(const std::vector<geometry::NormalizedBox>&, int); \
  template class MSDeformAttn<T>;                                                         \
  template class FeedForward<T>;                                                          \
  template class Backbone<T>;                                                             \
  template class TextEmbeddingTable<T>;                                                   \
  template class FeatureEnhancer<T>;

PETDUET_NN_INSTANTIATE(float)
PETDUET_NN_INSTANTIATE(double)

#undef PETDUET_NN_INSTANTIATE

}  // namespace petduet::nn
