#include "petduet/afvpg.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "petduet/error.hpp"

namespace petduet::afvpg {

std::string_view source_name(PromptSource source) {
  switch (source) {
    case PromptSource::kSelf: return "self";
    case PromptSource::kBatch: return "batch";
    case PromptSource::kMemory: return "memory";
  }
  return "unknown";
}

PromptSource parse_source(std::string_view name) {
  for (PromptSource s : {PromptSource::kSelf, PromptSource::kBatch, PromptSource::kMemory}) {
    if (source_name(s) == name) return s;
  }
  throw ValidationError("unknown prompt source '" + std::string(name) + "'");
}

template <typename T>
VisualPromptEmbedding<T>::VisualPromptEmbedding(Tensor<T> vector, int category_id,
                                                PromptSource source, int dataset_id)
    : vector_(std::move(vector)), category_id_(category_id), source_(source), dataset_id_(dataset_id) {
  if (!vector_.defined() || vector_.rows() != 1) {
    throw ValidationError("visual prompt embedding must be a single row");
  }
}

std::vector<NormalizedBox> cap_prompt_boxes(const std::vector<NormalizedBox>& boxes, int max_boxes,
                                            std::mt19937_64& rng) {
  if (static_cast<int>(boxes.size()) <= max_boxes) return boxes;
  std::vector<int> index(boxes.size());
  std::iota(index.begin(), index.end(), 0);
  // Partial Fisher-Yates: the first max_boxes slots form the sample.
  for (int i = 0; i < max_boxes; ++i) {
    std::uniform_int_distribution<int> pick(i, static_cast<int>(index.size()) - 1);
    std::swap(index[i], index[pick(rng)]);
  }
  index.resize(max_boxes);
  std::sort(index.begin(), index.end());
  std::vector<NormalizedBox> out;
  for (int i : index) out.push_back(boxes[i]);
  return out;
}

template <typename T>
PromptGenerator<T>::PromptGenerator(nn::ParamStore<T>& store, const ModelConfig& config,
                                    const nn::FeatureEnhancer<T>& enhancer)
    : enhancer_(&enhancer), dim_(config.dim), max_boxes_(config.max_prompt_boxes) {
  using nn::Init;
  using nn::ParamGroup;
  const ParamGroup g = ParamGroup::kVisual;
  content_embed_ = store.add("afvpg.content", g, 1, dim_, Init::uniform(-1.0, 1.0));
  carrier_embed_ = store.add("afvpg.carrier", g, 1, dim_, Init::uniform(-1.0, 1.0));
  query_proj_ = nn::Linear<T>(store, "afvpg.query_proj", g, dim_, dim_);
  pos_proj_ = nn::Linear<T>(store, "afvpg.pos_proj", g, dim_, dim_);
  cross_norm_ = nn::LayerNorm<T>(store, "afvpg.cross_norm", g, dim_);
  cross_attn_ = nn::MSDeformAttn<T>(store, "afvpg.cross_attn", g, config);
  self_norm_ = nn::LayerNorm<T>(store, "afvpg.self_norm", g, dim_);
  self_attn_ = nn::MultiHeadAttention<T>(store, "afvpg.self_attn", g, dim_, config.heads);
  ffn_ = nn::FeedForward<T>(store, "afvpg.ffn", g, dim_, config.ffn_dim);
  out_norm_ = nn::LayerNorm<T>(store, "afvpg.out_norm", g, dim_);
}

template <typename T>
nn::MultiScaleFeatures<T> PromptGenerator<T>::enhance(const nn::MultiScaleFeatures<T>& raw) const {
  return (*enhancer_)(raw).image;
}

template <typename T>
std::vector<Tensor<T>> PromptGenerator<T>::enhancement_parameters() const {
  return enhancer_->shared_parameters();
}

template <typename T>
PromptQuerySet<T> PromptGenerator<T>::build_prompt_queries(
    const std::vector<NormalizedBox>& boxes) const {
  const int k = static_cast<int>(boxes.size());
  if (k < 1) throw ValidationError("build_prompt_queries: a category needs at least one box");
  if (k > max_boxes_) {
    throw ValidationError("build_prompt_queries: " + std::to_string(k) + " boxes exceed the limit of " +
                          std::to_string(max_boxes_));
  }
  for (const auto& b : boxes) geometry::validate(b);
  PromptQuerySet<T> out;
  out.boxes = boxes;
  out.boxes.push_back(geometry::kGlobalBox);
  const std::vector<Tensor<T>> rows{ag::repeat_rows(content_embed_, k), carrier_embed_};
  out.content = query_proj_(ag::concat_rows<T>(rows));
  out.position = pos_proj_(nn::positional_codes<T>(out.boxes, dim_));
  return out;
}

template <typename T>
Tensor<T> PromptGenerator<T>::aggregate(const Tensor<T>& content, const Tensor<T>& position,
                                        const std::vector<NormalizedBox>& boxes,
                                        const nn::MultiScaleFeatures<T>& enhanced,
                                        const std::vector<int>* segments) const {
  if (enhanced.dim() != dim_ || content.cols() != dim_) {
    throw ValidationError("generate_prompt: feature width " + std::to_string(enhanced.dim()) +
                          " does not match prompt width " + std::to_string(dim_));
  }
  Tensor<T> h = content;
  h = ag::add(h, cross_attn_(cross_norm_(h), position, nn::boxes_tensor<T>(boxes), enhanced));
  const Tensor<T> hn = self_norm_(h);
  const Tensor<T> qk = ag::add(hn, position);
  h = ag::add(h, self_attn_(qk, qk, hn, segments));
  return ffn_(h);
}

template <typename T>
VisualPromptEmbedding<T> PromptGenerator<T>::generate_prompt(
    const PromptQuerySet<T>& queries, const nn::MultiScaleFeatures<T>& enhanced, int category_id,
    int dataset_id) const {
  const Tensor<T> h = aggregate(queries.content, queries.position, queries.boxes, enhanced, nullptr);
  const int last = h.rows() - 1;
  return {out_norm_(ag::slice_rows(h, last, last + 1)), category_id, PromptSource::kSelf,
          dataset_id};
}

template <typename T>
std::vector<VisualPromptEmbedding<T>> PromptGenerator<T>::generate_prompts_for_image(
    const std::map<int, std::vector<NormalizedBox>>& per_category_boxes,
    const nn::MultiScaleFeatures<T>& enhanced, int dataset_id) const {
  std::vector<VisualPromptEmbedding<T>> out;
  if (per_category_boxes.empty()) return out;
  std::vector<Tensor<T>> content;
  std::vector<Tensor<T>> position;
  std::vector<NormalizedBox> boxes;
  std::vector<int> segments;
  std::vector<int> carrier_rows;
  int segment = 0;
  for (const auto& [category, cat_boxes] : per_category_boxes) {
    const auto q = build_prompt_queries(cat_boxes);
    content.push_back(q.content);
    position.push_back(q.position);
    boxes.insert(boxes.end(), q.boxes.begin(), q.boxes.end());
    segments.insert(segments.end(), q.rows(), segment++);
    carrier_rows.push_back(static_cast<int>(boxes.size()) - 1);
  }
  const Tensor<T> h = aggregate(ag::concat_rows<T>(content), ag::concat_rows<T>(position), boxes,
                                enhanced, &segments);
  const Tensor<T> carriers = out_norm_(ag::gather_rows(h, std::span<const int>(carrier_rows)));
  int i = 0;
  for (const auto& entry : per_category_boxes) {
    out.emplace_back(ag::slice_rows(carriers, i, i + 1), entry.first, PromptSource::kSelf, dataset_id);
    ++i;
  }
  return out;
}

template class VisualPromptEmbedding<float>;
template class VisualPromptEmbedding<double>;
template class PromptGenerator<float>;
template class PromptGenerator<double>;

}  // namespace petduet::afvpg
