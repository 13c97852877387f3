#include "petduet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "petduet/error.hpp"

namespace petduet::detector {

void LossConfig::validate() const {
  if (denoising) throw ValidationError("denoising queries are not supported");
  for (double w : {alignment_weight, l1_weight, giou_weight, match_class, match_l1, match_giou}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("loss weights must be finite and >= 0");
  }
  if (!(focal_gamma >= 0.0)) throw ValidationError("focal gamma must be >= 0");
  if (focal_alpha > 1.0) throw ValidationError("focal alpha must be <= 1 (negative disables it)");
}

template <typename T>
std::vector<NormalizedBox> DetectionSet<T>::box_list() const {
  std::vector<NormalizedBox> out;
  out.reserve(boxes.rows());
  for (int i = 0; i < boxes.rows(); ++i) {
    out.push_back({boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2), boxes.at(i, 3)});
  }
  return out;
}

std::vector<GroundTruth> make_targets(const std::vector<NormalizedBox>& boxes,
                                      const std::vector<int>& categories,
                                      const std::vector<int>& column_categories) {
  if (boxes.size() != categories.size()) {
    throw ValidationError("make_targets: box and label counts differ");
  }
  std::vector<GroundTruth> out;
  for (std::size_t g = 0; g < boxes.size(); ++g) {
    geometry::validate(boxes[g]);
    GroundTruth gt{boxes[g], {}};
    for (int c = 0; c < static_cast<int>(column_categories.size()); ++c) {
      if (column_categories[c] == categories[g]) gt.positive_columns.push_back(c);
    }
    out.push_back(std::move(gt));
  }
  return out;
}

// ---- assignment -----------------------------------------------------------------

std::vector<int> solve_assignment(std::span<const double> cost, int rows, int cols) {
  if (cost.size() != static_cast<std::size_t>(rows) * cols) {
    throw ValidationError("solve_assignment: cost size does not match shape");
  }
  if (rows == 0 || cols == 0) return std::vector<int>(rows, -1);
  const bool transpose = rows > cols;
  const int n = transpose ? cols : rows;
  const int m = transpose ? rows : cols;
  constexpr double kLarge = 1e12;
  auto a = [&](int i, int j) {  // 1-based, i <= n, j <= m
    const double c = transpose ? cost[static_cast<std::size_t>(j - 1) * cols + (i - 1)]
                               : cost[static_cast<std::size_t>(i - 1) * cols + (j - 1)];
    return std::isfinite(c) ? c : kLarge;
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(rows, -1);
  for (int j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    if (transpose) {
      out[j - 1] = p[j] - 1;
    } else {
      out[p[j] - 1] = j - 1;
    }
  }
  return out;
}

template <typename T>
std::vector<double> matching_cost(const DetectionSet<T>& pred, const std::vector<GroundTruth>& gt,
                                  const LossConfig& config) {
  const int nq = pred.num_queries();
  const int ng = static_cast<int>(gt.size());
  std::vector<double> cost(static_cast<std::size_t>(nq) * ng, 0.0);
  const double alpha = config.focal_alpha < 0.0 ? 0.5 : config.focal_alpha;
  const double gamma = config.focal_gamma;
  constexpr double kEps = 1e-8;
  for (int q = 0; q < nq; ++q) {
    const NormalizedBox b{pred.boxes.at(q, 0), pred.boxes.at(q, 1), pred.boxes.at(q, 2),
                          pred.boxes.at(q, 3)};
    for (int g = 0; g < ng; ++g) {
      double cls = 0.0;
      if (!gt[g].positive_columns.empty()) {
        double logit = -std::numeric_limits<double>::infinity();
        for (int c : gt[g].positive_columns) logit = std::max(logit, static_cast<double>(pred.logits.at(q, c)));
        const double p = 1.0 / (1.0 + std::exp(-logit));
        const double pos = alpha * std::pow(1.0 - p, gamma) * -std::log(p + kEps);
        const double neg = (1.0 - alpha) * std::pow(p, gamma) * -std::log(1.0 - p + kEps);
        cls = pos - neg;
      }
      const auto& t = gt[g].box;
      const double l1 = std::abs(b.cx - t.cx) + std::abs(b.cy - t.cy) + std::abs(b.w - t.w) +
                        std::abs(b.h - t.h);
      const double giou = geometry::giou(b, t);
      cost[static_cast<std::size_t>(q) * ng + g] =
          config.match_class * cls + config.match_l1 * l1 + config.match_giou * (1.0 - giou);
    }
  }
  return cost;
}

template <typename T>
MatchResult hungarian_match(const DetectionSet<T>& pred, const std::vector<GroundTruth>& gt,
                            const LossConfig& config) {
  MatchResult out;
  const int nq = pred.num_queries();
  const int ng = static_cast<int>(gt.size());
  if (ng == 0) return out;
  const auto cost = matching_cost(pred, gt, config);
  const auto assign = solve_assignment(cost, nq, ng);
  std::vector<int> query_of(ng, -1);
  for (int q = 0; q < nq; ++q) {
    if (assign[q] >= 0) query_of[assign[q]] = q;
  }
  for (int g = 0; g < ng; ++g) {
    if (query_of[g] >= 0) {
      out.pairs.emplace_back(query_of[g], g);
    } else {
      out.unmatched_gt.push_back(g);
    }
  }
  return out;
}

// ---- losses ---------------------------------------------------------------------

template <typename T>
Tensor<T> alignment_loss(const DetectionSet<T>& pred, const std::vector<GroundTruth>& gt,
                         const MatchResult& match, const LossConfig& config) {
  const int p = pred.num_columns();
  std::vector<T> targets(static_cast<std::size_t>(pred.num_queries()) * p, T(0));
  for (const auto& [q, g] : match.pairs) {
    for (int c : gt[g].positive_columns) targets[static_cast<std::size_t>(q) * p + c] = T(1);
  }
  const Tensor<T> loss = ag::sigmoid_focal_loss(pred.logits, std::span<const T>(targets),
                                                static_cast<T>(config.focal_alpha),
                                                static_cast<T>(config.focal_gamma));
  const double norm = std::max<std::size_t>(1, match.pairs.size());
  return ag::scale(loss, static_cast<T>(1.0 / norm));
}

template <typename T>
LossBreakdown<T> layer_loss(const DetectionSet<T>& pred, const std::vector<GroundTruth>& gt,
                            const LossConfig& config) {
  const MatchResult match = hungarian_match(pred, gt, config);
  const double norm = std::max<std::size_t>(1, match.pairs.size());
  const Tensor<T> align = ag::scale(alignment_loss(pred, gt, match, config),
                                    static_cast<T>(config.alignment_weight));
  LossBreakdown<T> out;
  out.alignment = align.item();
  out.total = align;
  if (!match.pairs.empty()) {
    std::vector<int> rows;
    std::vector<T> target;
    for (const auto& [q, g] : match.pairs) {
      rows.push_back(q);
      const auto& b = gt[g].box;
      for (double v : {b.cx, b.cy, b.w, b.h}) target.push_back(static_cast<T>(v));
    }
    const Tensor<T> matched = ag::gather_rows(pred.boxes, std::span<const int>(rows));
    const Tensor<T> l1 = ag::scale(ag::l1_loss(matched, std::span<const T>(target)),
                                   static_cast<T>(config.l1_weight / norm));
    const Tensor<T> giou = ag::scale(ag::giou_loss(matched, std::span<const T>(target)),
                                     static_cast<T>(config.giou_weight / norm));
    out.l1 = l1.item();
    out.giou = giou.item();
    out.total = ag::add(ag::add(out.total, l1), giou);
  }
  return out;
}

template <typename T>
LossBreakdown<T> total_loss(std::span<const DetectionSet<T>> outputs,
                            const std::vector<GroundTruth>& gt, const LossConfig& config) {
  LossBreakdown<T> out;
  out.total = Tensor<T>::zeros(1, 1);
  for (const auto& layer : outputs) {
    const auto l = layer_loss(layer, gt, config);
    out.total = ag::add(out.total, l.total);
    out.alignment += l.alignment;
    out.l1 += l.l1;
    out.giou += l.giou;
  }
  return out;
}

template <typename T>
LossBreakdown<T> route_loss(const RouteOutput<T>& output, const std::vector<GroundTruth>& gt,
                            const LossConfig& config) {
  auto out = total_loss<T>(output.layers, gt, config);
  if (config.proposal_loss) {
    const auto p = layer_loss(output.proposals, gt, config);
    out.total = ag::add(out.total, p.total);
    out.alignment += p.alignment;
    out.l1 += p.l1;
    out.giou += p.giou;
  }
  return out;
}

// ---- head -----------------------------------------------------------------------

template <typename T>
DetectionHead<T>::DetectionHead(nn::ParamStore<T>& store, const ModelConfig& config)
    : dim_(config.dim), anchor_scale_(config.anchor_scale) {
  using nn::Init;
  using nn::ParamGroup;
  const ParamGroup g = ParamGroup::kHead;
  const int d = config.dim;
  const double bias = -std::log((1.0 - config.prior_prob) / config.prior_prob);
  memory_proj_ = nn::Linear<T>(store, "head.memory_proj", g, d, d);
  memory_norm_ = nn::LayerNorm<T>(store, "head.memory_norm", g, d);
  proposal_box_head_ = nn::Mlp<T>(store, "head.proposal_box", g, {d, d, 4}, true);
  proposal_bias_ = store.add("head.proposal_logit_bias", g, 1, 1, Init::constant(bias));
  query_embed_ = store.add("head.query_embed", g, config.num_queries, d, Init::uniform(-1.0, 1.0));
  query_pos_head_ = nn::Mlp<T>(store, "head.query_pos", g, {d, d, d});
  for (int l = 0; l < config.decoder_layers; ++l) {
    const std::string name = "head.decoder" + std::to_string(l);
    Layer layer;
    layer.self_norm = nn::LayerNorm<T>(store, name + ".self_norm", g, d);
    layer.self_attn = nn::MultiHeadAttention<T>(store, name + ".self_attn", g, d, config.heads);
    layer.prompt_norm = nn::LayerNorm<T>(store, name + ".prompt_norm", g, d);
    layer.prompt_attn = nn::MultiHeadAttention<T>(store, name + ".prompt_attn", g, d, config.heads);
    layer.cross_norm = nn::LayerNorm<T>(store, name + ".cross_norm", g, d);
    layer.cross_attn = nn::MSDeformAttn<T>(store, name + ".cross_attn", g, config);
    layer.ffn = nn::FeedForward<T>(store, name + ".ffn", g, d, config.ffn_dim);
    layer.box_head = nn::Mlp<T>(store, name + ".box", g, {d, d, 4}, true);
    layers_.push_back(std::move(layer));
  }
  out_norm_ = nn::LayerNorm<T>(store, "head.out_norm", g, d);
  logit_bias_ = store.add("head.logit_bias", g, 1, 1, Init::constant(bias));
}

template <typename T>
Tensor<T> DetectionHead<T>::contrast(const Tensor<T>& q, const Tensor<T>& prompts,
                                     const Tensor<T>& bias) const {
  const T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dim_)));
  return ag::add_broadcast(ag::scale(ag::matmul_nt(q, prompts), s), bias);
}

template <typename T>
Tensor<T> DetectionHead<T>::memory(const nn::MultiScaleFeatures<T>& enhanced) const {
  return memory_norm_(memory_proj_(enhanced.tokens));
}

template <typename T>
std::vector<T> DetectionHead<T>::token_scores(const nn::MultiScaleFeatures<T>& enhanced,
                                              const Tensor<T>& prompts) const {
  const Tensor<T> logits = contrast(memory(enhanced), prompts, proposal_bias_);
  std::vector<T> scores(logits.rows(), -std::numeric_limits<T>::infinity());
  for (int t = 0; t < logits.rows(); ++t) {
    for (int c = 0; c < logits.cols(); ++c) scores[t] = std::max(scores[t], logits.at(t, c));
  }
  return scores;
}

template <typename T>
QueryState<T> DetectionHead<T>::query_select(const nn::MultiScaleFeatures<T>& enhanced,
                                             const Tensor<T>& prompts, int nq) const {
  if (!prompts.defined() || prompts.rows() < 1) {
    throw ValidationError("query selection needs at least one prompt column");
  }
  if (prompts.cols() != dim_ || enhanced.dim() != dim_) {
    throw ValidationError("query selection: prompt or feature width differs from model width");
  }
  if (nq < 1 || nq > enhanced.token_count() || nq > query_embed_.rows()) {
    throw ValidationError("query selection: cannot select " + std::to_string(nq) + " queries from " +
                          std::to_string(enhanced.token_count()) + " tokens (" +
                          std::to_string(query_embed_.rows()) + " query slots)");
  }
  const Tensor<T> mem = memory(enhanced);
  const Tensor<T> logits = contrast(mem, prompts, proposal_bias_);
  std::vector<T> scores(logits.rows(), -std::numeric_limits<T>::infinity());
  for (int t = 0; t < logits.rows(); ++t) {
    for (int c = 0; c < logits.cols(); ++c) scores[t] = std::max(scores[t], logits.at(t, c));
  }
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + nq, order.end(), [&](int a, int b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  });
  order.resize(nq);

  const auto token_boxes = nn::token_reference_boxes(enhanced.levels);
  std::vector<NormalizedBox> anchors;
  int level = 0;
  int level_end = enhanced.levels[0].tokens();
  std::vector<int> level_of(token_boxes.size());
  for (int t = 0; t < static_cast<int>(token_boxes.size()); ++t) {
    while (t >= level_end) level_end += enhanced.levels[++level].tokens();
    level_of[t] = level;
  }
  for (int t : order) {
    const double side = std::min(0.99, anchor_scale_ * std::pow(2.0, level_of[t]));
    anchors.push_back({token_boxes[t].cx, token_boxes[t].cy, side, side});
  }
  const std::span<const int> idx(order);
  const Tensor<T> selected = ag::gather_rows(mem, idx);
  const Tensor<T> anchor_logits = ag::inverse_sigmoid(nn::boxes_tensor<T>(anchors));

  QueryState<T> out;
  out.token_index = order;
  out.proposal_boxes = ag::sigmoid(ag::add(proposal_box_head_(selected), anchor_logits));
  out.proposal_logits = ag::gather_rows(logits, idx);
  out.reference = out.proposal_boxes.detach();
  out.content = ag::slice_rows(query_embed_, 0, nq);
  return out;
}

template <typename T>
std::vector<DetectionSet<T>> DetectionHead<T>::decode(const QueryState<T>& queries,
                                                      const Tensor<T>& prompts,
                                                      const nn::MultiScaleFeatures<T>& enhanced,
                                                      const std::vector<int>& column_categories) const {
  if (static_cast<int>(column_categories.size()) != prompts.rows()) {
    throw ValidationError("decode: one category per prompt column is required");
  }
  std::vector<DetectionSet<T>> out;
  Tensor<T> q = queries.content;
  Tensor<T> reference = queries.reference.detach();
  for (const auto& layer : layers_) {
    const Tensor<T> pos = query_pos_head_(nn::positional_codes<T>(
        DetectionSet<T>{reference, {}, {}}.box_list(), dim_));
    Tensor<T> hn = layer.self_norm(q);
    const Tensor<T> qk = ag::add(hn, pos);
    q = ag::add(q, layer.self_attn(qk, qk, hn));
    hn = layer.prompt_norm(q);
    q = ag::add(q, layer.prompt_attn(ag::add(hn, pos), prompts, prompts));
    q = ag::add(q, layer.cross_attn(layer.cross_norm(q), pos, reference, enhanced));
    q = layer.ffn(q);
    const Tensor<T> hidden = out_norm_(q);
    DetectionSet<T> set;
    set.logits = contrast(hidden, prompts, logit_bias_);
    set.boxes = ag::sigmoid(ag::add(ag::inverse_sigmoid(reference), layer.box_head(hidden)));
    set.column_categories = column_categories;
    reference = set.boxes.detach();
    out.push_back(std::move(set));
  }
  return out;
}

// ---- detector -------------------------------------------------------------------

namespace {

const ModelConfig& checked(const ModelConfig& c) {
  c.validate();
  return c;
}

}  // namespace

template <typename T>
Detector<T>::Detector(const ModelConfig& config, std::uint64_t seed)
    : config_(checked(config)),
      store_(seed),
      backbone_(store_, config_),
      enhancer_(store_, config_),
      text_(store_, config_),
      text_out_norm_(store_, "text.out_norm", nn::ParamGroup::kText, config_.dim),
      generator_(store_, config_, enhancer_),
      head_(store_, config_) {}

template <typename T>
RouteOutput<T> Detector<T>::detect(const nn::MultiScaleFeatures<T>& enhanced,
                                   const Tensor<T>& prompts,
                                   const std::vector<int>& column_categories) const {
  const int nq = std::min(config_.num_queries, enhanced.token_count());
  const QueryState<T> state = head_.query_select(enhanced, prompts, nq);
  RouteOutput<T> out;
  out.proposals = DetectionSet<T>{state.proposal_boxes, state.proposal_logits, column_categories};
  out.layers = head_.decode(state, prompts, enhanced, column_categories);
  return out;
}

template <typename T>
RouteOutput<T> Detector<T>::text_route_forward(const Image& image,
                                               const std::vector<int>& category_ids) const {
  if (category_ids.empty()) throw ValidationError("text route needs at least one category");
  return text_route_forward(backbone_(image), category_ids);
}

template <typename T>
RouteOutput<T> Detector<T>::text_route_forward(const nn::MultiScaleFeatures<T>& raw,
                                               const std::vector<int>& category_ids) const {
  if (category_ids.empty()) throw ValidationError("text route needs at least one category");
  const auto tokens = text_(category_ids);
  const auto enhanced = enhancer_(raw, &tokens);
  return detect(enhanced.image, text_out_norm_(enhanced.text->tokens), category_ids);
}

template <typename T>
RouteOutput<T> Detector<T>::visual_route_forward(const Image& image,
                                                 const prompts::PromptColumnSet<T>& columns) const {
  return visual_route_forward(enhance_visual(backbone_(image)), columns);
}

template <typename T>
RouteOutput<T> Detector<T>::visual_route_forward(const nn::MultiScaleFeatures<T>& enhanced,
                                                 const prompts::PromptColumnSet<T>& columns) const {
  if (columns.size() < 1) throw ValidationError("visual route needs at least one prompt column");
  std::vector<int> categories;
  for (const auto& c : columns.columns) categories.push_back(c.category_id);
  return detect(enhanced, columns.matrix(), categories);
}

#define PETDUET_DETECTOR_INSTANTIATE(T)                                                           \
  template struct DetectionSet<T>;                                                                \
  template std::vector<double> matching_cost(const DetectionSet<T>&,                              \
                                             const std::vector<GroundTruth>&, const LossConfig&); \
  template MatchResult hungarian_match(const DetectionSet<T>&, const std::vector<GroundTruth>&,   \
                                       const LossConfig&);                                        \
  template Tensor<T> alignment_loss(const DetectionSet<T>&, const std::vector<GroundTruth>&,      \
                                    const MatchResult&, const LossConfig&);                       \
  template LossBreakdown<T> layer_loss(const DetectionSet<T>&, const std::vector<GroundTruth>&,   \
                                       const LossConfig&);                                        \
  template LossBreakdown<T> total_loss(std::span<const DetectionSet<T>>,                          \
                                       const std::vector<GroundTruth>&, const LossConfig&);       \
  template LossBreakdown<T> route_loss(const RouteOutput<T>&, const std::vector<GroundTruth>&,    \
                                       const LossConfig&);                                        \
  template class DetectionHead<T>;                                                                \
  template class Detector<T>;

PETDUET_DETECTOR_INSTANTIATE(float)
PETDUET_DETECTOR_INSTANTIATE(double)

#undef PETDUET_DETECTOR_INSTANTIATE

}  // namespace petduet::detector
