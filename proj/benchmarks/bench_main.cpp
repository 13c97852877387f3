#include <benchmark/benchmark.h>

#include <random>

#include "petduet/detector.hpp"
#include "petduet/eval.hpp"
#include "petduet/prompts.hpp"
#include "petduet/training.hpp"

using namespace petduet;

namespace {

const std::vector<data::Dataset>& corpus() {
  static const auto datasets = [] {
    std::vector<data::Dataset> out;
    for (const auto& spec : data::default_scene_specs(96)) out.push_back(data::synthesize_dataset(spec, 16, 7));
    return out;
  }();
  return datasets;
}

std::map<int, std::vector<geometry::NormalizedBox>> boxes_by_category(const data::AnnotatedImage& img) {
  std::map<int, std::vector<geometry::NormalizedBox>> out;
  const auto boxes = img.normalized_boxes();
  const auto labels = img.labels();
  for (std::size_t i = 0; i < boxes.size(); ++i) out[labels[i]].push_back(boxes[i]);
  return out;
}

void BM_SolveAssignment(benchmark::State& state) {
  const int rows = 100;
  const int cols = static_cast<int>(state.range(0));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  std::vector<double> cost(static_cast<std::size_t>(rows) * cols);
  for (auto& c : cost) c = u(rng);
  for (auto _ : state) benchmark::DoNotOptimize(detector::solve_assignment(cost, rows, cols));
}
BENCHMARK(BM_SolveAssignment)->Arg(3)->Arg(10)->Arg(30);

void BM_BackboneAndEnhancer(benchmark::State& state) {
  const detector::Detector<float> model(ModelConfig{}, 0);
  const auto& image = corpus()[0].images[0].image;
  ag::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(model.enhance_visual(model.backbone(image)));
}
BENCHMARK(BM_BackboneAndEnhancer)->Unit(benchmark::kMillisecond);

void BM_VisualRouteInference(benchmark::State& state) {
  const detector::Detector<float> model(ModelConfig{}, 0);
  const eval::DetectorModel m(model);
  const auto& sample = corpus()[0].images[0];
  const auto boxes = boxes_by_category(sample);
  for (auto _ : state) benchmark::DoNotOptimize(m.detect_with_own_prompts(sample.image, boxes, 0));
}
BENCHMARK(BM_VisualRouteInference)->Unit(benchmark::kMillisecond);

void BM_TextRouteInference(benchmark::State& state) {
  const detector::Detector<float> model(ModelConfig{}, 0);
  const eval::DetectorModel m(model);
  const auto& sample = corpus()[0].images[0];
  const auto ids = corpus()[0].spec.category_ids();
  for (auto _ : state) benchmark::DoNotOptimize(m.detect_text(sample.image, ids));
}
BENCHMARK(BM_TextRouteInference)->Unit(benchmark::kMillisecond);

void BM_VisualTrainingStep(benchmark::State& state) {
  auto cfg = training::TrainConfig::desk_preset();
  detector::Detector<float> model(cfg.model, 0);
  training::AdamW opt(model.params());
  prompts::VisualCuesBank bank(cfg.bank_capacity);
  std::mt19937_64 rng(3);
  const auto& ds = corpus()[0];
  const std::vector<data::AnnotatedImage> batch(ds.images.begin(), ds.images.begin() + 8);
  const auto dictionary = ds.spec.category_ids();
  for (auto _ : state) {
    benchmark::DoNotOptimize(training::visual_step(model, opt, bank, batch, dictionary, cfg, cfg.lr, rng));
  }
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_VisualTrainingStep)->Unit(benchmark::kMillisecond);

void BM_ComputeAp(benchmark::State& state) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 80.0), s(4.0, 16.0), score(0.0, 1.0);
  std::vector<eval::Detection> dets;
  std::vector<eval::GroundTruthBox> gts;
  for (int img = 0; img < 200; ++img) {
    for (int k = 0; k < 3; ++k) {
      const double x = u(rng), y = u(rng), w = s(rng), h = s(rng);
      gts.push_back({img, k % 6, {x, y, x + w, y + h}});
    }
    for (int k = 0; k < 20; ++k) {
      const double x = u(rng), y = u(rng), w = s(rng), h = s(rng);
      dets.push_back({img, k % 6, {x, y, x + w, y + h}, score(rng)});
    }
  }
  const eval::ProtocolConfig pc;
  for (auto _ : state) benchmark::DoNotOptimize(eval::compute_ap(dets, gts, pc));
}
BENCHMARK(BM_ComputeAp)->Unit(benchmark::kMillisecond);

void BM_BankPushAndMean(benchmark::State& state) {
  prompts::VisualCuesBank bank(16);
  std::vector<float> v(64, 0.5f);
  int i = 0;
  for (auto _ : state) {
    bank.push(i % 2, i % 20, v);
    benchmark::DoNotOptimize(bank.mean(i % 2, i % 20));
    ++i;
  }
}
BENCHMARK(BM_BankPushAndMean);

}  // namespace

BENCHMARK_MAIN();
