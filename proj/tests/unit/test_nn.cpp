#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "petduet/error.hpp"
#include "petduet/nn.hpp"
#include "support/gradcheck.hpp"
#include "support/tensors.hpp"

namespace ag = petduet::ag;
namespace nn = petduet::nn;
using petduet::Image;
using petduet::ModelConfig;
using petduet::OffsetInit;
using petduet::ag::LevelShape;
using petduet::ag::Tensor;
using petduet::testing::check_gradients;
using petduet::testing::probe;
using petduet::testing::randn;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.dim = 8;
  c.heads = 2;
  c.points = 2;
  c.levels = 2;
  c.enhancer_layers = 1;
  c.ffn_dim = 8;
  c.text_vocab = 5;
  c.backbone_width = 2;
  return c;
}

Image random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(h, w);
  for (auto& p : img.pixels) p = u(rng);
  return img;
}

// Scalar reference: bilinear sample of channel c at normalized (x, y),
// pixel-center convention, zero outside the map.
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
  return at(y0, x0) * (1 - fx) * (1 - fy) + at(y0, x0 + 1) * fx * (1 - fy) +
         at(y0 + 1, x0) * (1 - fx) * fy + at(y0 + 1, x0 + 1) * fx * fy;
}

std::vector<double> affine(const std::vector<double>& x, int n, const Tensor<double>& w,
                           const Tensor<double>& b) {
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

TEST(Backbone, LevelShapesFollowStrides) {
  ModelConfig c;
  c.dim = 64;
  nn::ParamStore<float> store(1);
  nn::Backbone<float> backbone(store, c);
  const auto f = backbone(random_image(64, 64, 3));
  ASSERT_EQ(f.levels.size(), 3u);
  EXPECT_EQ(f.levels[0], (LevelShape{8, 8}));
  EXPECT_EQ(f.levels[1], (LevelShape{4, 4}));
  EXPECT_EQ(f.levels[2], (LevelShape{2, 2}));
  EXPECT_EQ(f.tokens.rows(), 84);
  EXPECT_EQ(f.dim(), 64);
  EXPECT_NO_THROW(f.validate());
}

TEST(Backbone, ZeroImageIsFinite) {
  nn::ParamStore<float> store(2);
  nn::Backbone<float> backbone(store, ModelConfig{});
  EXPECT_TRUE(petduet::testing::all_finite(backbone(Image(64, 96)).tokens));
}

TEST(Backbone, SeededRunsAreBitwiseIdentical) {
  const Image img = random_image(64, 64, 5);
  auto run = [&] {
    nn::ParamStore<float> store(7);
    nn::Backbone<float> backbone(store, ModelConfig{});
    const auto features = backbone(img);
    const auto v = features.tokens.values();
    return std::vector<float>(v.begin(), v.end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Backbone, RejectsIndivisibleSize) {
  nn::ParamStore<float> store(2);
  nn::Backbone<float> backbone(store, ModelConfig{});
  EXPECT_THROW(backbone(Image(60, 64)), petduet::ValidationError);
}

TEST(MSDeformAttn, ZeroInitSamplesReferenceCenters) {
  ModelConfig c = tiny_config();
  c.heads = 1;
  c.levels = 1;
  c.points = 3;
  c.offset_init = OffsetInit::kZero;
  nn::ParamStore<double> store(11);
  nn::MSDeformAttn<double> attn(store, "attn", nn::ParamGroup::kHead, c);
  std::mt19937_64 rng(4);
  const int h = 5, w = 4, d = c.dim, n = 4;
  auto value = randn(h * w, d, rng);
  auto queries = randn(n, d, rng);
  auto pos = randn(n, d, rng);
  const std::vector<double> centers{0.5, 0.5, 0.13, 0.91, 0.02, 0.3, 0.77, 0.64};
  std::vector<double> ref;
  for (int i = 0; i < n; ++i) {
    for (double v : {centers[2 * i], centers[2 * i + 1], 0.2, 0.3}) ref.push_back(v);
  }
  const Tensor<double> reference(n, 4, ref);
  const auto out = attn(queries, pos, reference, nn::MultiScaleFeatures<double>{value, {{h, w}}});

  auto param = [&](const std::string& name) { return store.find(name)->tensor; };
  const std::vector<double> vals(value.values().begin(), value.values().end());
  const auto projected = affine(vals, h * w, param("attn.value.weight"), param("attn.value.bias"));
  std::vector<double> sampled(static_cast<std::size_t>(n) * d);
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < d; ++ch) {
      sampled[static_cast<std::size_t>(i) * d + ch] =
          bilinear(projected, h, w, d, ch, centers[2 * i], centers[2 * i + 1]);
    }
  }
  const auto expected = affine(sampled, n, param("attn.output.weight"), param("attn.output.bias"));
  ASSERT_EQ(out.rows(), n);
  ASSERT_EQ(out.cols(), d);
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(out.values()[i], expected[i], 1e-12);
}

TEST(MSDeformAttn, NoQueriesGivesEmptyOutput) {
  ModelConfig c = tiny_config();
  nn::ParamStore<double> store(1);
  nn::MSDeformAttn<double> attn(store, "attn", nn::ParamGroup::kHead, c);
  std::mt19937_64 rng(1);
  auto value = randn(16 + 4, c.dim, rng);
  const Tensor<double> empty(0, c.dim);
  const auto out = attn(empty, empty, Tensor<double>(0, 4),
                        nn::MultiScaleFeatures<double>{value, {{4, 4}, {2, 2}}});
  EXPECT_EQ(out.rows(), 0);
  EXPECT_EQ(out.cols(), c.dim);
}

TEST(MSDeformAttn, ValueGradientMatchesFiniteDifferences) {
  ModelConfig c = tiny_config();
  c.levels = 1;
  nn::ParamStore<double> store(3);
  nn::MSDeformAttn<double> attn(store, "attn", nn::ParamGroup::kHead, c);
  std::mt19937_64 rng(8);
  auto value = randn(25, c.dim, rng);
  auto queries = randn(3, c.dim, rng, 1.0, false);
  auto pos = randn(3, c.dim, rng, 1.0, false);
  const Tensor<double> ref(3, 4, {0.3, 0.4, 0.5, 0.6, 0.71, 0.22, 0.3, 0.2, 0.5, 0.5, 1.0, 1.0});
  std::vector<Tensor<double>> wrt{value};
  auto r = check_gradients(
      [&] {
        return ag::sum(attn(queries, pos, ref, nn::MultiScaleFeatures<double>{value, {{5, 5}}}));
      },
      wrt);
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_EQ(r.checked, 25u * c.dim);
}

TEST(MSDeformAttn, ParameterGradientsMatchFiniteDifferences) {
  ModelConfig c = tiny_config();
  nn::ParamStore<double> store(5);
  nn::MSDeformAttn<double> attn(store, "attn", nn::ParamGroup::kHead, c);
  std::mt19937_64 rng(9);
  // Move the offset and weight projections off their initial zeros.
  for (const auto& e : store.entries()) {
    auto v = e.tensor;
    std::normal_distribution<double> n(0.0, 0.1);
    for (auto& x : v.mutable_values()) x += n(rng);
  }
  auto value = randn(16 + 4, c.dim, rng);
  auto queries = randn(3, c.dim, rng);
  auto pos = randn(3, c.dim, rng, 1.0, false);
  const Tensor<double> ref(3, 4, {0.3, 0.4, 0.5, 0.6, 0.71, 0.22, 0.3, 0.2, 0.5, 0.5, 1.0, 1.0});
  auto wrt = store.tensors();
  wrt.push_back(value);
  wrt.push_back(queries);
  ASSERT_LE(store.scalar_count(), 1000u);
  auto r = check_gradients(
      [&] {
        return probe(attn(queries, pos, ref,
                          nn::MultiScaleFeatures<double>{value, {{4, 4}, {2, 2}}}));
      },
      wrt);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(MSDeformAttn, SamplingWeightsSumToOnePerHead) {
  ModelConfig c = tiny_config();
  c.heads = 4;
  c.points = 3;
  nn::ParamStore<double> store(6);
  nn::MSDeformAttn<double> attn(store, "attn", nn::ParamGroup::kHead, c);
  std::mt19937_64 rng(10);
  for (const auto& e : store.entries()) {
    auto v = e.tensor;
    std::normal_distribution<double> n(0.0, 0.5);
    for (auto& x : v.mutable_values()) x += n(rng);
  }
  const auto w = attn.sampling_weights(randn(7, c.dim, rng), randn(7, c.dim, rng));
  const int per_head = c.levels * c.points;
  ASSERT_EQ(w.cols(), c.heads * per_head);
  for (int i = 0; i < w.rows(); ++i) {
    for (int h = 0; h < c.heads; ++h) {
      double s = 0.0;
      for (int k = 0; k < per_head; ++k) s += w.at(i, h * per_head + k);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Layers, FeedForwardAndAttentionGradients) {
  ModelConfig c = tiny_config();
  nn::ParamStore<double> store(12);
  nn::FeedForward<double> ffn(store, "ffn", nn::ParamGroup::kHead, c.dim, c.ffn_dim);
  nn::MultiHeadAttention<double> mha(store, "mha", nn::ParamGroup::kHead, c.dim, c.heads);
  nn::Mlp<double> mlp(store, "mlp", nn::ParamGroup::kHead, {c.dim, 6, 4});
  std::mt19937_64 rng(13);
  auto x = randn(4, c.dim, rng);
  auto y = randn(3, c.dim, rng);
  ASSERT_LE(store.scalar_count(), 1000u);
  auto wrt = store.tensors();
  wrt.push_back(x);
  wrt.push_back(y);
  auto r = check_gradients(
      [&] {
        return ag::add(ag::add(probe(ffn(x)), probe(mha(x, y, y), 3)), probe(mlp(x), 4));
      },
      wrt, 1e-5, 1e-5);  // floor above the ~1e-10 finite-difference noise
  EXPECT_LT(r.max_rel_error, 1e-4) << "abs " << r.max_abs_error;
}

TEST(Layers, MlpZeroLastLayerStartsAtZero) {
  nn::ParamStore<double> store(1);
  nn::Mlp<double> mlp(store, "mlp", nn::ParamGroup::kHead, {4, 4, 3}, true);
  std::mt19937_64 rng(1);
  const auto y = mlp(randn(2, 4, rng));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(ParamStore, RejectsDuplicateNamesAndTracksGroups) {
  nn::ParamStore<float> store(0);
  store.add("a", nn::ParamGroup::kText, 2, 3, nn::Init::xavier());
  store.add("b", nn::ParamGroup::kHead, 1, 3, nn::Init::zeros());
  EXPECT_THROW(store.add("a", nn::ParamGroup::kHead, 1, 1, nn::Init::zeros()),
               petduet::ValidationError);
  EXPECT_EQ(store.scalar_count(), 9u);
  EXPECT_EQ(store.tensors(nn::ParamGroup::kText).size(), 1u);
  EXPECT_EQ(nn::parse_group("enhancer_shared"), nn::ParamGroup::kEnhancerShared);
  EXPECT_THROW(nn::parse_group("nope"), petduet::ValidationError);
}

TEST(FeatureEnhancer, ShapesWithAndWithoutText) {
  ModelConfig c = tiny_config();
  nn::ParamStore<float> store(21);
  nn::FeatureEnhancer<float> enhancer(store, c);
  nn::TextEmbeddingTable<float> text(store, c);
  std::mt19937_64 rng(3);
  nn::MultiScaleFeatures<float> f{randn<float>(16 + 4, c.dim, rng, 1.0, false), {{4, 4}, {2, 2}}};
  const auto plain = enhancer(f);
  EXPECT_FALSE(plain.text.has_value());
  EXPECT_EQ(plain.image.levels, f.levels);
  EXPECT_EQ(plain.image.tokens.rows(), f.tokens.rows());

  const auto tokens = text({0, 2, 4});
  const auto fused = enhancer(f, &tokens);
  ASSERT_TRUE(fused.text.has_value());
  EXPECT_EQ(fused.text->tokens.rows(), 3);
  EXPECT_EQ(fused.text->tokens.cols(), c.dim);
  EXPECT_EQ(fused.text->category_ids, (std::vector<int>{0, 2, 4}));
  EXPECT_TRUE(petduet::testing::all_finite(fused.image.tokens));
  EXPECT_TRUE(petduet::testing::all_finite(fused.text->tokens));
  EXPECT_THROW(text({5}), petduet::ValidationError);
}

TEST(FeatureEnhancer, ZeroResidualScaleIsIdentity) {
  ModelConfig c = tiny_config();
  c.residual_scale = 0.0;
  nn::ParamStore<double> store(22);
  nn::FeatureEnhancer<double> enhancer(store, c);
  nn::TextEmbeddingTable<double> text(store, c);
  std::mt19937_64 rng(4);
  nn::MultiScaleFeatures<double> f{randn(16 + 4, c.dim, rng), {{4, 4}, {2, 2}}};
  const auto tokens = text({1, 3});
  const auto out = enhancer(f, &tokens);
  for (std::size_t i = 0; i < f.tokens.size(); ++i) {
    EXPECT_EQ(out.image.tokens.values()[i], f.tokens.values()[i]);
  }
  for (std::size_t i = 0; i < tokens.tokens.size(); ++i) {
    EXPECT_EQ(out.text->tokens.values()[i], tokens.tokens.values()[i]);
  }
}

TEST(FeatureEnhancer, InputGradientMatchesFiniteDifferences) {
  ModelConfig c = tiny_config();
  nn::ParamStore<double> store(23);
  nn::FeatureEnhancer<double> enhancer(store, c);
  std::mt19937_64 rng(5);
  auto x = randn(9 + 4, c.dim, rng);
  auto t = randn(2, c.dim, rng);
  std::vector<Tensor<double>> wrt{x, t};
  auto r = check_gradients(
      [&] {
        nn::TextTokenEmbeddings<double> tokens{t, {0, 1}};
        auto out = enhancer(nn::MultiScaleFeatures<double>{x, {{3, 3}, {2, 2}}}, &tokens);
        return ag::add(probe(out.image.tokens), probe(out.text->tokens, 5));
      },
      wrt);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(FeatureEnhancer, SharedParametersAreTheRegisteredTensors) {
  ModelConfig c = tiny_config();
  c.enhancer_layers = 2;
  nn::ParamStore<float> store(24);
  nn::FeatureEnhancer<float> enhancer(store, c);
  const auto shared = enhancer.shared_parameters();
  const auto registered = store.tensors(nn::ParamGroup::kEnhancerShared);
  ASSERT_EQ(shared.size(), registered.size());
  for (std::size_t i = 0; i < shared.size(); ++i) EXPECT_EQ(shared[i].node(), registered[i].node());
}

TEST(FeatureEnhancer, RandomInputsStayFinite) {
  ModelConfig c;
  nn::ParamStore<float> store(25);
  nn::Backbone<float> backbone(store, c);
  nn::FeatureEnhancer<float> enhancer(store, c);
  nn::TextEmbeddingTable<float> text(store, c);
  std::mt19937_64 rng(6);
  auto f = backbone(random_image(96, 96, 1));
  f.tokens = randn<float>(f.tokens.rows(), f.tokens.cols(), rng, 1.0, false);
  const auto tokens = text({0, 1, 2, 3});
  const auto out = enhancer(f, &tokens);
  EXPECT_TRUE(petduet::testing::all_finite(out.image.tokens));
  EXPECT_TRUE(petduet::testing::all_finite(out.text->tokens));
}
