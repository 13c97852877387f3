#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <random>

#include "petduet/error.hpp"
#include "petduet/eval.hpp"

namespace data = petduet::data;
namespace eval = petduet::eval;
using petduet::geometry::AbsoluteBox;
using petduet::geometry::NormalizedBox;

namespace {

// Scalar reference: greedy matching then, for every recall point, the best
// precision reached at that recall or beyond.
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
      const double v = petduet::geometry::iou(mine[k].box, targets[g]->box);
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

AbsoluteBox random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(0, 80), ext(8, 30);
  const double x = pos(rng), y = pos(rng);
  return {x, y, x + ext(rng), y + ext(rng)};
}

// Perturbs a box by up to a few pixels so IoUs spread across thresholds.
AbsoluteBox jitter(const AbsoluteBox& b, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-4, 4);
  return {b.x0 + d(rng), b.y0 + d(rng), b.x1 + d(rng), b.y1 + d(rng)};
}

// Oracle: a prompt encodes its first box and category; detection returns it.
class OracleModel : public eval::EvalModel {
 public:
  int prompt_dim() const override { return 5; }
  std::map<int, std::vector<float>> visual_prompts(const petduet::Image&,
                                                   const std::map<int, std::vector<NormalizedBox>>& boxes,
                                                   int) const override {
    std::map<int, std::vector<float>> out;
    for (const auto& [cat, b] : boxes) {
      out[cat] = {float(b[0].cx), float(b[0].cy), float(b[0].w), float(b[0].h), float(cat)};
    }
    return out;
  }
  std::vector<eval::ScoredBox> detect_visual(const petduet::Image&,
                                             const std::vector<eval::CategoryPrompt>& prompts) const override {
    std::vector<eval::ScoredBox> out;
    for (const auto& p : prompts) {
      const auto& e = p.embedding;
      out.push_back({{e[0], e[1], e[2], e[3]}, p.category_id, 0.9});
    }
    return out;
  }
  std::vector<eval::ScoredBox> detect_text(const petduet::Image&, const std::vector<int>&) const override {
    return {};
  }
};

// Text oracle that knows the ground truth of the image it is shown.
class GroundTruthTextModel : public OracleModel {
 public:
  explicit GroundTruthTextModel(const data::Dataset& d) : dataset_(d) {}
  std::vector<eval::ScoredBox> detect_text(const petduet::Image& image, const std::vector<int>&) const override {
    for (const auto& img : dataset_.images) {
      if (img.image.pixels != image.pixels) continue;
      std::vector<eval::ScoredBox> out;
      const auto boxes = img.normalized_boxes();
      for (std::size_t i = 0; i < boxes.size(); ++i) out.push_back({boxes[i], img.annotations[i].category_id, 1.0});
      return out;
    }
    return {};
  }

 private:
  const data::Dataset& dataset_;
};

// Prompt vectors depend on the image and the category; every returned
// vector is logged so the averaging can be checked independently.
class LoggingModel : public OracleModel {
 public:
  std::map<int, std::vector<float>> visual_prompts(const petduet::Image& image,
                                                   const std::map<int, std::vector<NormalizedBox>>& boxes,
                                                   int) const override {
    std::map<int, std::vector<float>> out;
    for (const auto& [cat, b] : boxes) {
      std::vector<float> v(5);
      for (int k = 0; k < 5; ++k) {
        v[k] = image.pixels[(k * 997 + cat * 31) % image.pixels.size()] * (k + 1) + static_cast<float>(b.size());
      }
      log[cat].push_back(v);
      out[cat] = v;
    }
    return out;
  }
  mutable std::map<int, std::vector<std::vector<float>>> log;
};

data::Dataset small_dataset(int n, std::uint64_t seed = 4, int size = 64) {
  return data::synthesize_dataset(data::default_scene_specs(size)[0], n, seed);
}

}  // namespace

TEST(ComputeAp, PerfectAndEmpty) {
  std::mt19937_64 rng(1);
  std::vector<eval::GroundTruthBox> gts;
  std::vector<eval::Detection> dets;
  for (int i = 0; i < 20; ++i) {
    const auto b = random_box(rng);
    gts.push_back({i % 5, i % 3, b});
    dets.push_back({i % 5, i % 3, b, 0.5 + 0.01 * i});
  }
  const eval::ProtocolConfig cfg;
  const auto perfect = eval::compute_ap(dets, gts, cfg);
  EXPECT_DOUBLE_EQ(perfect.ap, 1.0);
  EXPECT_DOUBLE_EQ(perfect.ap50, 1.0);
  const auto empty = eval::compute_ap({}, gts, cfg);
  EXPECT_EQ(empty.ap, 0.0);
  EXPECT_EQ(empty.ap50, 0.0);
  EXPECT_EQ(empty.per_category_ap.size(), 3u);
}

TEST(ComputeAp, TwoGroundTruthFixture) {
  // One exact hit at score 0.9, one miss at 0.8: precision 1 up to recall
  // 0.5, nothing beyond. 51 of the 101 recall points carry precision 1.
  const std::vector<eval::GroundTruthBox> gts{{0, 0, {10, 10, 30, 30}}, {0, 0, {50, 50, 70, 70}}};
  const std::vector<eval::Detection> dets{{0, 0, {10, 10, 30, 30}, 0.9}, {0, 0, {80, 0, 90, 5}, 0.8}};
  const auto r = eval::compute_ap(dets, gts, eval::ProtocolConfig{});
  EXPECT_NEAR(r.ap50, 51.0 / 101.0, 1e-9);
  EXPECT_NEAR(r.ap, 51.0 / 101.0, 1e-9);
}

TEST(ComputeAp, MatchesScalarReferenceOnRandomInstances) {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> count(1, 8), img(0, 3), cat(0, 2);
  std::uniform_real_distribution<double> score(0, 1), coin(0, 1);
  const eval::ProtocolConfig cfg;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<eval::GroundTruthBox> gts;
    std::vector<eval::Detection> dets;
    const int n = count(rng);
    for (int i = 0; i < n; ++i) gts.push_back({img(rng), cat(rng), random_box(rng)});
    for (const auto& g : gts) {
      if (coin(rng) < 0.7) dets.push_back({g.image_key, g.category_id, jitter(g.box, rng), score(rng)});
    }
    for (int i = count(rng); i > 0; --i) dets.push_back({img(rng), cat(rng), random_box(rng), score(rng)});
    const auto r = eval::compute_ap(dets, gts, cfg);
    std::set<int> cats;
    for (const auto& g : gts) cats.insert(g.category_id);
    double ap = 0.0, ap50 = 0.0;
    for (int c : cats) {
      double s = 0.0;
      for (double t : cfg.iou_thresholds) s += reference_ap(dets, gts, c, t);
      EXPECT_NEAR(r.per_category_ap.at(c), s / cfg.iou_thresholds.size(), 1e-12);
      ap += s / cfg.iou_thresholds.size();
      ap50 += reference_ap(dets, gts, c, 0.5);
    }
    EXPECT_NEAR(r.ap, ap / cats.size(), 1e-12) << "trial " << trial;
    EXPECT_NEAR(r.ap50, ap50 / cats.size(), 1e-12) << "trial " << trial;
    EXPECT_GE(r.ap50 + 1e-12, r.ap);
    EXPECT_GE(r.ap, 0.0);
    EXPECT_LE(r.ap50, 1.0);
  }
}

TEST(ComputeAp, DetectionsOfUnannotatedCategoriesAreIgnored) {
  const std::vector<eval::GroundTruthBox> gts{{0, 1, {0, 0, 10, 10}}};
  const std::vector<eval::Detection> dets{{0, 1, {0, 0, 10, 10}, 0.5}, {0, 7, {0, 0, 10, 10}, 0.9}};
  EXPECT_DOUBLE_EQ(eval::compute_ap(dets, gts, eval::ProtocolConfig{}).ap, 1.0);
}

TEST(ProtocolConfig, ThresholdValidation) {
  eval::ProtocolConfig c;
  EXPECT_NO_THROW(c.validate());
  c.iou_thresholds = {0.5, 0.5};
  EXPECT_THROW(c.validate(), petduet::ValidationError);
  c.iou_thresholds = {0.0, 0.5};
  EXPECT_THROW(c.validate(), petduet::ValidationError);
  c.iou_thresholds = {0.5, 1.1};
  EXPECT_THROW(c.validate(), petduet::ValidationError);
  c.iou_thresholds = {};
  EXPECT_THROW(c.validate(), petduet::ValidationError);
  EXPECT_EQ(eval::parse_protocol("visual-g"), eval::Protocol::kVisualG);
  EXPECT_THROW(eval::parse_protocol("visual"), petduet::ValidationError);
}

TEST(Report, JsonAndCsv) {
  eval::EvalReport r;
  r.protocol = eval::Protocol::kText;
  r.seed = 3;
  r.ap = 0.25;
  r.ap50 = 0.5;
  r.per_category_ap = {{1, 0.2}, {4, 0.3}};
  r.n_images = 10;
  r.missing_categories = {9};
  const auto back = eval::EvalReport::from_json(r.to_json());
  EXPECT_EQ(back.to_json(), r.to_json());
  EXPECT_EQ(eval::EvalReport::csv_header(), "run_id,protocol,seed,ap,ap50,wall_time");
  EXPECT_EQ(r.csv_row("run7", 1.5), "run7,text,3,0.250000,0.500000,1.500");
}

TEST(TopDetections, TakesBestColumnPerCategory) {
  using petduet::ag::Tensor;
  petduet::detector::DetectionSet<float> out{
      Tensor<float>(2, 4, {0.5f, 0.5f, 0.2f, 0.2f, 0.3f, 0.3f, 0.1f, 0.1f}),
      Tensor<float>(2, 3, {0.0f, 2.0f, -1.0f, 1.0f, -3.0f, 3.0f}), {4, 4, 9}};
  const auto top = eval::top_detections(out, 3);
  ASSERT_EQ(top.size(), 3u);
  EXPECT_EQ(top[0].category_id, 9);  // query 1, logit 3
  EXPECT_NEAR(top[0].box.cx, 0.3, 1e-6);
  EXPECT_EQ(top[1].category_id, 4);  // query 0, max(0, 2)
  EXPECT_NEAR(top[1].score, 1.0 / (1.0 + std::exp(-2.0)), 1e-9);
  EXPECT_EQ(top[2].category_id, 4);  // query 1, max(1, -3)
  EXPECT_EQ(eval::top_detections(out, 10).size(), 4u);
}

TEST(VisualI, SelfRetrievalOfASingleObject) {
  data::Dataset d = small_dataset(1);
  d.images[0].annotations.resize(1);
  OracleModel oracle;
  const auto r = eval::eval_visual_i(oracle, {&d, 1}, eval::ProtocolConfig{});
  EXPECT_DOUBLE_EQ(r.ap, 1.0);
  EXPECT_EQ(r.n_images, 1);
}

TEST(VisualI, DeterministicAndSkipsUnannotatedImages) {
  data::Dataset d = small_dataset(30);
  d.images[3].annotations.clear();
  OracleModel oracle;
  eval::ProtocolConfig cfg;
  cfg.seed = 5;
  const auto a = eval::eval_visual_i(oracle, {&d, 1}, cfg);
  const auto b = eval::eval_visual_i(oracle, {&d, 1}, cfg);
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(a.skipped_images, 1);
  EXPECT_EQ(a.n_images, 29);
  // Only one instance per category and image is prompted, so recall is partial
  // wherever a category repeats.
  EXPECT_GT(a.ap, 0.5);
}

TEST(GlobalPrompts, SingleHolderAveragesToItsEmbedding) {
  data::Dataset d = small_dataset(20);
  // Remove category 0 from all but one image.
  int holder = -1;
  for (std::size_t i = 0; i < d.images.size(); ++i) {
    auto& anns = d.images[i].annotations;
    const bool has = std::any_of(anns.begin(), anns.end(), [](const auto& a) { return a.category_id == 0; });
    if (has && holder < 0) {
      holder = static_cast<int>(i);
    } else {
      anns.erase(std::remove_if(anns.begin(), anns.end(), [](const auto& a) { return a.category_id == 0; }),
                 anns.end());
    }
  }
  ASSERT_GE(holder, 0);
  LoggingModel model;
  const auto g = eval::extract_global_prompts(model, {&d, 1}, eval::ProtocolConfig{});
  const auto& entry = *std::find_if(g.entries.begin(), g.entries.end(), [](const auto& e) { return e.category_id == 0; });
  EXPECT_EQ(entry.samples, 16);
  ASSERT_EQ(model.log[0].size(), 16u);
  for (int k = 0; k < 5; ++k) EXPECT_NEAR(entry.embedding[k], model.log[0][0][k], 1e-6);
}

TEST(GlobalPrompts, StreamedMeanMatchesBatchedMean) {
  const data::Dataset d = small_dataset(60);
  LoggingModel model;
  eval::ProtocolConfig cfg;
  cfg.seed = 2;
  const auto g = eval::extract_global_prompts(model, {&d, 1}, cfg);
  ASSERT_EQ(g.entries.size(), 6u);
  for (const auto& e : g.entries) {
    const auto& rows = model.log.at(e.category_id);
    ASSERT_EQ(rows.size(), 16u);
    for (int k = 0; k < 5; ++k) {
      double sum = 0.0;
      for (const auto& r : rows) sum += r[k];
      EXPECT_NEAR(e.embedding[k], sum / rows.size(), 1e-6);
    }
  }
  // Same seed, same sample.
  LoggingModel again;
  const auto h = eval::extract_global_prompts(again, {&d, 1}, cfg);
  EXPECT_EQ(h.entries[2].embedding, g.entries[2].embedding);
}

TEST(GlobalPrompts, MissingCategoriesAreListed) {
  data::Dataset d = small_dataset(40);
  for (auto& img : d.images) {
    auto& anns = img.annotations;
    anns.erase(std::remove_if(anns.begin(), anns.end(), [](const auto& a) { return a.category_id == 5; }),
               anns.end());
  }
  LoggingModel model;
  const auto g = eval::extract_global_prompts(model, {&d, 1}, eval::ProtocolConfig{});
  ASSERT_EQ(g.missing.size(), 1u);
  EXPECT_EQ(g.missing[0].category_id, 5);
  EXPECT_EQ(g.entries.size(), 5u);

  const auto path = std::filesystem::temp_directory_path() / "petduet_prompts.bin";
  g.save(path);
  const auto back = eval::GlobalPrompts::load(path);
  EXPECT_EQ(back.dim, g.dim);
  EXPECT_EQ(back.missing, g.missing);
  ASSERT_EQ(back.entries.size(), g.entries.size());
  for (std::size_t i = 0; i < g.entries.size(); ++i) EXPECT_EQ(back.entries[i].embedding, g.entries[i].embedding);
  std::filesystem::remove(path);

  // A category that is neither prompted nor listed missing is a mismatch.
  auto incomplete = g;
  incomplete.missing.clear();
  EXPECT_THROW(eval::eval_visual_g(model, {&d, 1}, incomplete, eval::ProtocolConfig{}), petduet::ValidationError);
  auto foreign = g;
  foreign.entries[0].category_id = 40;
  EXPECT_THROW(eval::eval_visual_g(model, {&d, 1}, foreign, eval::ProtocolConfig{}), petduet::ValidationError);
  auto narrow = g;
  narrow.dim = 3;
  EXPECT_THROW(eval::eval_visual_g(model, {&d, 1}, narrow, eval::ProtocolConfig{}), petduet::ValidationError);
}

TEST(VisualG, EmptyOutputScoresZero) {
  const data::Dataset d = small_dataset(10);
  class Silent : public OracleModel {
    std::vector<eval::ScoredBox> detect_visual(const petduet::Image&,
                                               const std::vector<eval::CategoryPrompt>&) const override {
      return {};
    }
  } silent;
  const auto g = eval::extract_global_prompts(silent, {&d, 1}, eval::ProtocolConfig{});
  const auto r = eval::eval_visual_g(silent, {&d, 1}, g, eval::ProtocolConfig{});
  EXPECT_EQ(r.ap, 0.0);
  EXPECT_EQ(r.n_images, 10);
}

TEST(Text, PerfectOracleScoresOne) {
  const data::Dataset d = small_dataset(15);
  GroundTruthTextModel model(d);
  const auto r = eval::eval_text(model, {&d, 1}, eval::ProtocolConfig{});
  EXPECT_DOUBLE_EQ(r.ap, 1.0);
  EXPECT_EQ(r.protocol, eval::Protocol::kText);
}

class NetworkEval : public ::testing::Test {
 protected:
  static petduet::ModelConfig config() {
    petduet::ModelConfig c;
    c.dim = 32;
    c.heads = 2;
    c.points = 2;
    c.enhancer_layers = 1;
    c.decoder_layers = 2;
    c.ffn_dim = 32;
    c.num_queries = 50;
    c.text_vocab = 16;
    c.backbone_width = 8;
    return c;
  }
  NetworkEval() : net(config(), 3), model(net, 100), dataset(small_dataset(12, 9)) {}
  petduet::detector::Detector<float> net;
  eval::DetectorModel model;
  data::Dataset dataset;
};

TEST_F(NetworkEval, TextIsDeterministicAndCoversTheDictionary) {
  const auto a = eval::eval_text(model, {&dataset, 1}, eval::ProtocolConfig{});
  const auto b = eval::eval_text(model, {&dataset, 1}, eval::ProtocolConfig{});
  EXPECT_EQ(a.to_json(), b.to_json());
  const auto found = model.detect_text(dataset.images[0].image, dataset.spec.category_ids());
  EXPECT_EQ(found.size(), 100u);
  std::set<int> cats;
  for (const auto& f : found) cats.insert(f.category_id);
  for (int c : cats) EXPECT_TRUE(dataset.spec.has_category(c));
}

TEST_F(NetworkEval, VisualGIgnoresPromptFileOrder) {
  auto prompts = eval::extract_global_prompts(model, {&dataset, 1}, eval::ProtocolConfig{});
  const auto a = eval::eval_visual_g(model, {&dataset, 1}, prompts, eval::ProtocolConfig{});
  std::reverse(prompts.entries.begin(), prompts.entries.end());
  std::swap(prompts.entries[0], prompts.entries[3]);
  const auto b = eval::eval_visual_g(model, {&dataset, 1}, prompts, eval::ProtocolConfig{});
  EXPECT_EQ(a.to_json(), b.to_json());
}

TEST_F(NetworkEval, VisualIRunsOnTheNetwork) {
  const auto a = eval::eval_visual_i(model, {&dataset, 1}, eval::ProtocolConfig{});
  EXPECT_GE(a.ap, 0.0);
  EXPECT_LE(a.ap, 1.0);
  EXPECT_EQ(a.n_images, 12);
}

TEST(UntrainedNetwork, ScoresBelowSanityCeiling) {
  // Default-width network, no training, 60 images of the 6-category corpus.
  petduet::detector::Detector<float> net(petduet::ModelConfig{}, 0);
  eval::DetectorModel model(net);
  const auto d = data::synthesize_dataset(data::default_scene_specs()[0], 60, 0);
  const auto r = eval::eval_visual_i(model, {&d, 1}, eval::ProtocolConfig{});
  EXPECT_LT(r.ap, 0.05);
  const auto t = eval::eval_text(model, {&d, 1}, eval::ProtocolConfig{});
  EXPECT_LT(t.ap, 0.05);
  std::printf("untrained visual-i AP %.4f, text AP %.4f\n", r.ap, t.ap);
}
