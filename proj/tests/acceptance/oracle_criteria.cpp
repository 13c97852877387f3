#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "criteria.hpp"
#include "petduet/data.hpp"
#include "petduet/detector.hpp"
#include "petduet/eval.hpp"
#include "petduet/prompts.hpp"
#include "support/gradcheck.hpp"
#include "support/tensors.hpp"

namespace petduet::acceptance {

namespace {

namespace det = detector;
using afvpg::PromptSource;
using afvpg::VisualPromptEmbedding;
using ag::Tensor;
using geometry::NormalizedBox;
using testing::probe;
using testing::randn;

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<float> normal_vector(int d, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> v(d);
  for (auto& x : v) x = n(rng);
  return v;
}

NormalizedBox random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> c(0.15, 0.85), s(0.05, 0.3);
  return {c(rng), c(rng), s(rng), s(rng)};
}

}  // namespace

Verdict intra_batch_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> batch_dist(1, 8), cat_dist(1, 10), dim_dist(1, 16);
  std::bernoulli_distribution holds(0.6);
  double worst = 0.0;
  int mismatches = 0;
  long queries = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const int n = batch_dist(rng);
    const int cats = cat_dist(rng);
    const int d = dim_dist(rng);
    const int ds = trial % 3;
    prompts::BatchPromptTable<float> table(n, ds);
    std::map<std::pair<int, int>, std::vector<float>> raw;
    for (int c = 0; c < cats; ++c) {
      for (int j = 0; j < n; ++j) {
        if (!holds(rng)) continue;
        auto v = normal_vector(d, rng);
        raw[{c, j}] = v;
        table.insert(j, {Tensor<float>(1, d, v), c, PromptSource::kSelf, ds});
      }
    }
    // Category `cats` is never inserted and must yield nothing.
    for (int c = 0; c <= cats; ++c) {
      for (int i = 0; i < n; ++i) {
        std::vector<double> acc(d, 0.0);
        int count = 0;
        for (int j = 0; j < n; ++j) {
          const auto it = raw.find({c, j});
          if (j == i || it == raw.end()) continue;
          for (int k = 0; k < d; ++k) acc[k] += it->second[k];
          ++count;
        }
        const auto got = prompts::ibp_aggregate(table, c, i);
        ++queries;
        if (got.has_value() != (count > 0)) {
          ++mismatches;
          continue;
        }
        if (!got) continue;
        if (got->source() != PromptSource::kBatch || got->category_id() != c || got->dataset_id() != ds) ++mismatches;
        for (int k = 0; k < d; ++k) worst = std::max(worst, std::abs(got->vector().at(0, k) - acc[k] / count));
      }
    }
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && worst <= 1e-6 && secs < 10.0,
          format("%ld queries over 10000 tables, %d presence/tag mismatches, max abs error %.3g, %.2f s", queries,
                 mismatches, worst, secs)};
}

Verdict bank_invariants() {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr int kCapacity = 16;
  constexpr int kDim = 8;
  prompts::VisualCuesBank bank(kCapacity);
  std::map<int, std::map<int, std::deque<std::vector<float>>>> shadow;
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> ds_dist(0, 1), cat_dist(0, 19);
  std::bernoulli_distribution push(0.7);
  double worst = 0.0;
  int violations = 0;
  int pushes = 0;
  int aggregations = 0;
  for (int op = 0; op < 10000; ++op) {
    const int ds = ds_dist(rng);
    const int cat = cat_dist(rng);
    if (push(rng)) {
      const auto v = normal_vector(kDim, rng);
      bank.push(ds, cat, v);
      auto& q = shadow[ds][cat];
      q.push_back(v);
      if (q.size() > kCapacity) q.pop_front();
      ++pushes;
    } else {
      const auto got = prompts::dmd_aggregate<float>(bank, ds, cat);
      const auto* expect = shadow.count(ds) && shadow[ds].count(cat) ? &shadow[ds][cat] : nullptr;
      ++aggregations;
      if (got.has_value() != (expect != nullptr)) {
        ++violations;
      } else if (got) {
        if (got->source() != PromptSource::kMemory || got->dataset_id() != ds || got->category_id() != cat ||
            got->vector().requires_grad()) {
          ++violations;
        }
        for (int k = 0; k < kDim; ++k) {
          double s = 0.0;
          for (const auto& v : *expect) s += v[k];
          worst = std::max(worst, std::abs(got->vector().at(0, k) - s / static_cast<double>(expect->size())));
        }
      }
    }
    // Full-state comparison after every operation.
    std::size_t total = 0;
    for (const auto& [d, cats] : shadow) {
      std::vector<int> populated;
      for (const auto& [c, q] : cats) {
        populated.push_back(c);
        total += q.size();
        const auto* stored = bank.queue(d, c);
        if (!stored || stored->size() > kCapacity || !std::equal(stored->begin(), stored->end(), q.begin(), q.end())) {
          ++violations;
        }
      }
      if (bank.populated_categories(d) != populated) ++violations;
    }
    if (bank.size() != total || bank.queues().size() != shadow.size()) ++violations;
  }
  const double secs = seconds_since(t0);
  return {violations == 0 && worst <= 1e-6 && secs < 10.0,
          format("%d pushes, %d aggregations, %d invariant violations, max mean error %.3g, %.2f s", pushes,
                 aggregations, violations, worst, secs)};
}

namespace {

// Pixel-centre bilinear sample of channel c at normalized (x, y), zero outside.
double bilinear(const std::vector<double>& map, int h, int w, int d, int c, double x, double y) {
  const double px = x * w - 0.5;
  const double py = y * h - 0.5;
  const int x0 = static_cast<int>(std::floor(px));
  const int y0 = static_cast<int>(std::floor(py));
  const double fx = px - x0;
  const double fy = py - y0;
  auto at = [&](int yy, int xx) {
    if (xx < 0 || yy < 0 || xx >= w || yy >= h) return 0.0;
    return map[(static_cast<std::size_t>(yy) * w + xx) * d + c];
  };
  return at(y0, x0) * (1 - fx) * (1 - fy) + at(y0, x0 + 1) * fx * (1 - fy) + at(y0 + 1, x0) * (1 - fx) * fy +
         at(y0 + 1, x0 + 1) * fx * fy;
}

template <typename T>
std::vector<double> affine(const std::vector<double>& x, int n, const Tensor<T>& w, const Tensor<T>& b) {
  const int in = w.rows();
  const int out = w.cols();
  std::vector<double> y(static_cast<std::size_t>(n) * out);
  for (int i = 0; i < n; ++i) {
    for (int o = 0; o < out; ++o) {
      double s = b.at(0, o);
      for (int k = 0; k < in; ++k) s += x[static_cast<std::size_t>(i) * in + k] * w.at(k, o);
      y[static_cast<std::size_t>(i) * out + o] = s;
    }
  }
  return y;
}

}  // namespace

Verdict deformable_bilinear_oracle() {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> side(1, 12), points(1, 4), count(1, 6);
  std::uniform_real_distribution<double> centre(0.0, 1.0), extent(0.02, 0.5);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    ModelConfig c;
    c.dim = 8;
    c.heads = 1;
    c.levels = 1;
    c.points = points(rng);
    c.offset_init = OffsetInit::kZero;
    nn::ParamStore<float> store(1000 + trial);
    nn::MSDeformAttn<float> attn(store, "attn", nn::ParamGroup::kHead, c);
    const int h = side(rng), w = side(rng), n = count(rng), d = c.dim;
    const auto value = randn<float>(h * w, d, rng, 1.0, false);
    const auto queries = randn<float>(n, d, rng, 1.0, false);
    const auto pos = randn<float>(n, d, rng, 1.0, false);
    std::vector<float> ref;
    for (int i = 0; i < n; ++i) {
      for (double v : {centre(rng), centre(rng), extent(rng), extent(rng)}) ref.push_back(static_cast<float>(v));
    }
    const auto out = attn(queries, pos, Tensor<float>(n, 4, ref), nn::MultiScaleFeatures<float>{value, {{h, w}}});

    auto param = [&](const std::string& name) { return store.find(name)->tensor; };
    const std::vector<double> vals(value.values().begin(), value.values().end());
    const auto projected = affine(vals, h * w, param("attn.value.weight"), param("attn.value.bias"));
    std::vector<double> sampled(static_cast<std::size_t>(n) * d);
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < d; ++ch) {
        sampled[static_cast<std::size_t>(i) * d + ch] = bilinear(projected, h, w, d, ch, ref[4 * i], ref[4 * i + 1]);
      }
    }
    const auto expected = affine(sampled, n, param("attn.output.weight"), param("attn.output.bias"));
    for (std::size_t i = 0; i < expected.size(); ++i) {
      worst = std::max(worst, std::abs(out.values()[i] - expected[i]));
    }
  }
  return {worst <= 1e-5, format("100 random maps and references, max abs error %.3g", worst)};
}

namespace {

ModelConfig gradcheck_config() {
  ModelConfig c;
  c.dim = 8;
  c.heads = 2;
  c.points = 1;
  c.levels = 2;
  c.enhancer_layers = 1;
  c.ffn_dim = 2;
  c.max_prompt_boxes = 4;
  c.text_vocab = 5;
  return c;
}

// Grid-initialised offsets put sampling points on pixel centres, where
// bilinear interpolation has a kink; the check runs at a generic point.
void jitter(nn::ParamStore<double>& store, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 0.05);
  for (auto t : store.tensors()) {
    for (auto& v : t.mutable_values()) v += n(rng);
  }
}

// Zero-gradient parameters (key biases under softmax) leave only
// finite-difference noise; relative errors use this floor.
constexpr double kGradFloor = 1e-5;

std::size_t scalars(const std::vector<Tensor<double>>& ts) {
  std::size_t n = 0;
  for (const auto& t : ts) n += t.size();
  return n;
}

}  // namespace

Verdict gradient_checks() {
  const ModelConfig c = gradcheck_config();
  std::mt19937_64 rng(5);
  std::string detail;
  bool pass = true;
  // A tensor with an all-zero analytic gradient would pass vacuously (a dead
  // ReLU layer, say), so every checked tensor must receive some gradient.
  auto record = [&](const char* name, const testing::GradCheckResult& r, const std::vector<Tensor<double>>& wrt,
                    std::size_t params) {
    const auto dead = std::count_if(wrt.begin(), wrt.end(), [](const Tensor<double>& t) {
      return std::all_of(t.grad().begin(), t.grad().end(), [](double g) { return g == 0.0; });
    });
    pass = pass && r.max_rel_error < 1e-4 && params <= 1000 && dead == 0;
    detail += format("%s%s rel %.2g (%zu params, %ld tensors without gradient)", detail.empty() ? "" : ", ", name,
                     r.max_rel_error, params, static_cast<long>(dead));
  };

  {
    ModelConfig wide = c;
    wide.ffn_dim = 4;
    nn::ParamStore<double> store(3);
    nn::FeatureEnhancer<double> enhancer(store, wide);
    afvpg::PromptGenerator<double> generator(store, wide, enhancer);
    jitter(store, rng);
    nn::MultiScaleFeatures<double> raw{randn(16 + 4, wide.dim, rng), {{4, 4}, {2, 2}}};
    const std::vector<NormalizedBox> boxes{random_box(rng), random_box(rng), random_box(rng)};
    // The shared enhancement path is covered by the enhancer instance below.
    auto wrt = store.tensors(nn::ParamGroup::kVisual);
    const std::size_t params = scalars(wrt);
    wrt.push_back(raw.tokens);
    const auto r = testing::check_gradients(
        [&] {
          const auto queries = generator.build_prompt_queries(boxes);
          return probe(generator.generate_prompt(queries, generator.enhance(raw)).vector());
        },
        wrt, 1e-5, kGradFloor);
    record("AFVPG", r, wrt, params);
  }
  {
    std::normal_distribution<double> n(0.0, 2.0);
    std::vector<double> boxes, logits;
    for (int q = 0; q < 6; ++q) {
      const auto b = random_box(rng);
      boxes.insert(boxes.end(), {b.cx, b.cy, b.w, b.h});
      for (int k = 0; k < 4; ++k) logits.push_back(n(rng));
    }
    det::DetectionSet<double> pred{Tensor<double>(6, 4, boxes), Tensor<double>(6, 4, logits, true), {0, 1, 2, 3}};
    const std::vector<det::GroundTruth> gt{{random_box(rng), {0}}, {random_box(rng), {2, 3}}, {random_box(rng), {1}}};
    const det::LossConfig cfg;
    const auto match = det::hungarian_match(pred, gt, cfg);
    std::vector<Tensor<double>> wrt{pred.logits};
    record("alignment focal",
           testing::check_gradients([&] { return det::alignment_loss(pred, gt, match, cfg); }, wrt, 1e-5, kGradFloor),
           wrt, 0);
  }
  {
    std::vector<double> pv, tv;
    for (int i = 0; i < 8; ++i) {
      const auto p = random_box(rng);
      const auto t = random_box(rng);
      pv.insert(pv.end(), {p.cx, p.cy, p.w, p.h});
      tv.insert(tv.end(), {t.cx, t.cy, t.w, t.h});
    }
    std::vector<Tensor<double>> wrt{Tensor<double>(8, 4, pv, true)};
    record("GIoU", testing::check_gradients([&] { return ag::giou_loss<double>(wrt[0], tv); }, wrt, 1e-5, kGradFloor),
           wrt, 0);
  }
  {
    nn::ParamStore<double> store(23);
    nn::FeatureEnhancer<double> enhancer(store, c);
    jitter(store, rng);
    auto x = randn(9 + 4, c.dim, rng);
    auto t = randn(2, c.dim, rng);
    auto wrt = store.tensors();
    const std::size_t params = scalars(wrt);
    wrt.push_back(x);
    wrt.push_back(t);
    const auto r = testing::check_gradients(
        [&] {
          nn::TextTokenEmbeddings<double> tokens{t, {0, 1}};
          auto out = enhancer(nn::MultiScaleFeatures<double>{x, {{3, 3}, {2, 2}}}, &tokens);
          return ag::add(probe(out.image.tokens), probe(out.text->tokens, 5));
        },
        wrt, 1e-5, kGradFloor);
    record("enhancer", r, wrt, params);
  }
  return {pass, detail};
}

namespace {

// Exhaustive minimum over injective assignments, summed in ground-truth order.
double brute_force_min(const std::vector<double>& cost, int nq, int ng) {
  const int k = std::min(nq, ng);
  std::vector<int> queries(nq), gts(ng);
  std::iota(queries.begin(), queries.end(), 0);
  std::iota(gts.begin(), gts.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  auto consider = [&](const std::vector<std::pair<int, int>>& pairs) {
    double total = 0.0;
    for (auto [g, q] : pairs) total += cost[static_cast<std::size_t>(q) * ng + g];
    best = std::min(best, total);
  };
  if (ng <= nq) {
    do {
      std::vector<std::pair<int, int>> pairs;
      for (int g = 0; g < ng; ++g) pairs.emplace_back(g, queries[g]);
      consider(pairs);
    } while (std::next_permutation(queries.begin(), queries.end()));
  } else {
    do {
      std::vector<std::pair<int, int>> pairs;
      for (int q = 0; q < k; ++q) pairs.emplace_back(gts[q], q);
      std::sort(pairs.begin(), pairs.end());
      consider(pairs);
    } while (std::next_permutation(gts.begin(), gts.end()));
  }
  return best;
}

}  // namespace

Verdict hungarian_exactness() {
  const det::LossConfig cfg;
  if (cfg.match_class != 2.0 || cfg.match_l1 != 5.0 || cfg.match_giou != 2.0) {
    return {false, format("default matching weights are %g/%g/%g", cfg.match_class, cfg.match_l1, cfg.match_giou)};
  }
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> size(1, 6);
  std::normal_distribution<double> n(0.0, 2.0);
  std::uniform_int_distribution<int> col(0, 2);
  int wrong = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int nq = size(rng);
    const int ng = size(rng);
    std::vector<double> boxes, logits;
    for (int q = 0; q < nq; ++q) {
      const auto b = random_box(rng);
      boxes.insert(boxes.end(), {b.cx, b.cy, b.w, b.h});
      for (int c = 0; c < 3; ++c) logits.push_back(n(rng));
    }
    const det::DetectionSet<double> pred{Tensor<double>(nq, 4, boxes), Tensor<double>(nq, 3, logits), {0, 1, 2}};
    std::vector<det::GroundTruth> gt;
    for (int g = 0; g < ng; ++g) gt.push_back({random_box(rng), {col(rng)}});
    const auto cost = det::matching_cost(pred, gt, cfg);
    const auto match = det::hungarian_match(pred, gt, cfg);
    std::vector<std::pair<int, int>> by_gt;
    std::set<int> qs;
    for (auto [q, g] : match.pairs) {
      by_gt.emplace_back(g, q);
      qs.insert(q);
    }
    std::sort(by_gt.begin(), by_gt.end());
    bool injective = qs.size() == by_gt.size() && by_gt.size() == static_cast<std::size_t>(std::min(nq, ng));
    for (std::size_t i = 1; i < by_gt.size(); ++i) injective = injective && by_gt[i].first != by_gt[i - 1].first;
    double total = 0.0;
    for (auto [g, q] : by_gt) total += cost[static_cast<std::size_t>(q) * ng + g];
    if (!injective || total != brute_force_min(cost, nq, ng)) ++wrong;
  }
  return {wrong == 0, format("weights 2/5/2, %d of 1000 instances differ from exhaustive enumeration", wrong)};
}

namespace {

// Greedy matching then, for every recall point, the best precision reached
// at that recall or beyond.
double reference_ap(const std::vector<eval::Detection>& dets, const std::vector<eval::GroundTruthBox>& gts,
                    int category, double threshold) {
  std::vector<eval::Detection> mine;
  for (const auto& d : dets) {
    if (d.category_id == category) mine.push_back(d);
  }
  std::stable_sort(mine.begin(), mine.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<const eval::GroundTruthBox*> targets;
  for (const auto& g : gts) {
    if (g.category_id == category) targets.push_back(&g);
  }
  std::vector<bool> used(targets.size(), false);
  std::vector<double> rec, prec;
  int tp = 0;
  for (std::size_t k = 0; k < mine.size(); ++k) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < targets.size(); ++g) {
      if (used[g] || targets[g]->image_key != mine[k].image_key) continue;
      const double v = geometry::iou(mine[k].box, targets[g]->box);
      if (v >= threshold && v > best_iou) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      used[best] = true;
      ++tp;
    }
    rec.push_back(static_cast<double>(tp) / targets.size());
    prec.push_back(static_cast<double>(tp) / (k + 1));
  }
  double total = 0.0;
  for (int i = 0; i <= 100; ++i) {
    double p = 0.0;
    for (std::size_t k = 0; k < rec.size(); ++k) {
      if (rec[k] >= i * 0.01) p = std::max(p, prec[k]);
    }
    total += p;
  }
  return total / 101.0;
}

geometry::AbsoluteBox random_abs_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(0, 80), ext(8, 30);
  const double x = pos(rng), y = pos(rng);
  return {x, y, x + ext(rng), y + ext(rng)};
}

}  // namespace

Verdict ap_engine_fixtures() {
  const eval::ProtocolConfig cfg;
  std::mt19937_64 rng(1);
  std::vector<eval::GroundTruthBox> gts;
  std::vector<eval::Detection> dets;
  for (int i = 0; i < 20; ++i) {
    const auto b = random_abs_box(rng);
    gts.push_back({i % 5, i % 3, b});
    dets.push_back({i % 5, i % 3, b, 0.5 + 0.01 * i});
  }
  const double perfect = eval::compute_ap(dets, gts, cfg).ap;
  const double empty = eval::compute_ap({}, gts, cfg).ap;

  // One exact hit at score 0.9 and one miss at 0.8 against two boxes: the
  // 101-point interpolation carries precision 1 at recall points 0..0.5.
  const std::vector<eval::GroundTruthBox> fixture_gts{{0, 0, {10, 10, 30, 30}}, {0, 0, {50, 50, 70, 70}}};
  const std::vector<eval::Detection> fixture_dets{{0, 0, {10, 10, 30, 30}, 0.9}, {0, 0, {80, 0, 90, 5}, 0.8}};
  const double fixture = eval::compute_ap(fixture_dets, fixture_gts, cfg).ap50;

  std::uniform_int_distribution<int> count(1, 8), img(0, 3), cat(0, 2);
  std::uniform_real_distribution<double> score(0, 1), coin(0, 1), jitter(-4, 4);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<eval::GroundTruthBox> g;
    std::vector<eval::Detection> d;
    for (int i = count(rng); i > 0; --i) g.push_back({img(rng), cat(rng), random_abs_box(rng)});
    for (const auto& t : g) {
      if (coin(rng) >= 0.7) continue;
      const auto& b = t.box;
      d.push_back({t.image_key, t.category_id,
                   {b.x0 + jitter(rng), b.y0 + jitter(rng), b.x1 + jitter(rng), b.y1 + jitter(rng)}, score(rng)});
    }
    for (int i = count(rng); i > 0; --i) d.push_back({img(rng), cat(rng), random_abs_box(rng), score(rng)});
    const auto r = eval::compute_ap(d, g, cfg);
    std::set<int> cats;
    for (const auto& t : g) cats.insert(t.category_id);
    double ap = 0.0, ap50 = 0.0;
    for (int c : cats) {
      double s = 0.0;
      for (double t : cfg.iou_thresholds) s += reference_ap(d, g, c, t);
      ap += s / cfg.iou_thresholds.size();
      ap50 += reference_ap(d, g, c, 0.5);
    }
    worst = std::max({worst, std::abs(r.ap - ap / cats.size()), std::abs(r.ap50 - ap50 / cats.size())});
  }
  const bool pass = perfect == 1.0 && empty == 0.0 && std::abs(fixture - 51.0 / 101.0) <= 1e-9 && worst <= 1e-12;
  return {pass, format("perfect %.6f, empty %.6f, two-box fixture AP50 %.9f (hand value 51/101), "
                       "max deviation from reference over 100 instances %.3g",
                       perfect, empty, fixture, worst)};
}

Verdict permutation_invariants() {
  std::mt19937_64 rng(9);
  const ModelConfig c;

  double box_worst = 0.0;
  {
    det::Detector<float> net(c, 4);
    for (int trial = 0; trial < 30; ++trial) {
      const Image img = data::synthesize_dataset(data::default_scene_specs()[trial % 2], 1, trial).images[0].image;
      const auto enhanced = net.enhance_visual(net.backbone(img));
      std::vector<NormalizedBox> boxes(std::uniform_int_distribution<int>(1, c.max_prompt_boxes)(rng));
      for (auto& b : boxes) b = random_box(rng);
      auto shuffled = boxes;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      const auto& g = net.generator();
      const auto a = g.generate_prompt(g.build_prompt_queries(boxes), enhanced);
      const auto b = g.generate_prompt(g.build_prompt_queries(shuffled), enhanced);
      box_worst = std::max(box_worst, testing::max_abs_diff(a.vector(), b.vector()));
    }
  }

  double column_worst = 0.0;
  {
    det::Detector<float> net(c, 6);
    for (int trial = 0; trial < 10; ++trial) {
      const Image img = data::synthesize_dataset(data::default_scene_specs()[0], 1, 50 + trial).images[0].image;
      const auto enhanced = net.enhance_visual(net.backbone(img));
      const int p = std::uniform_int_distribution<int>(2, 8)(rng);
      prompts::PromptColumnSet<float> cols;
      for (int k = 0; k < p; ++k) cols.columns.push_back({k, PromptSource::kSelf, randn<float>(1, c.dim, rng, 1.0, false)});
      std::vector<int> perm(p);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      prompts::PromptColumnSet<float> permuted;
      for (int k = 0; k < p; ++k) permuted.columns.push_back(cols.columns[perm[k]]);
      const auto a = net.visual_route_forward(enhanced, cols).final_layer();
      const auto b = net.visual_route_forward(enhanced, permuted).final_layer();
      for (int q = 0; q < a.logits.rows(); ++q) {
        for (int k = 0; k < p; ++k) {
          column_worst = std::max(column_worst, static_cast<double>(std::abs(b.logits.at(q, k) - a.logits.at(q, perm[k]))));
        }
      }
      column_worst = std::max(column_worst, testing::max_abs_diff(a.boxes, b.boxes));
    }
  }

  bool ordering_exact = true;
  {
    ModelConfig small = c;
    small.num_queries = 50;
    det::Detector<float> net(small, 8);
    const eval::DetectorModel model(net, 100);
    const auto dataset = data::synthesize_dataset(data::default_scene_specs()[1], 16, 3);
    const eval::ProtocolConfig cfg;
    auto prompts = eval::extract_global_prompts(model, {&dataset, 1}, cfg);
    const auto reference = eval::eval_visual_g(model, {&dataset, 1}, prompts, cfg).to_json();
    for (int trial = 0; trial < 4; ++trial) {
      std::shuffle(prompts.entries.begin(), prompts.entries.end(), rng);
      ordering_exact = ordering_exact && eval::eval_visual_g(model, {&dataset, 1}, prompts, cfg).to_json() == reference;
    }
  }

  return {box_worst < 1e-5 && column_worst < 1e-5 && ordering_exact,
          format("box order max diff %.3g, column permutation max diff %.3g, Visual-G under shuffled prompt file %s",
                 box_worst, column_worst, ordering_exact ? "identical" : "differs")};
}

}  // namespace petduet::acceptance
