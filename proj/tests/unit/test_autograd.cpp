#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "petduet/autograd.hpp"
#include "petduet/error.hpp"
#include "support/gradcheck.hpp"

using petduet::ag::Tensor;
namespace ag = petduet::ag;
using petduet::testing::check_gradients;

namespace {

Tensor<double> randn(int r, int c, std::mt19937_64& rng, double s = 1.0, bool grad = true) {
  std::normal_distribution<double> n(0.0, s);
  std::vector<double> v(static_cast<std::size_t>(r) * c);
  for (auto& x : v) x = n(rng);
  return Tensor<double>(r, c, std::move(v), grad);
}

// Weighted sum so every output element gets a distinct upstream gradient.
Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  auto w = randn(y.rows(), y.cols(), rng, 1.0, false);
  return ag::sum(ag::mul(y, w));
}

constexpr double kTol = 1e-6;

}  // namespace

TEST(Autograd, MatmulFamily) {
  std::mt19937_64 rng(1);
  auto a = randn(3, 4, rng), b = randn(4, 5, rng), c = randn(5, 4, rng), bias = randn(1, 5, rng);
  std::vector<Tensor<double>> wrt{a, b, c, bias};
  auto r = check_gradients([&] {
    return ag::add(ag::add(probe(ag::matmul(a, b)), probe(ag::matmul_nt(a, c), 7)),
                   probe(ag::linear(a, b, bias), 8));
  }, std::span(wrt));
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autograd, Elementwise) {
  std::mt19937_64 rng(2);
  auto a = randn(4, 3, rng), b = randn(4, 3, rng), row = randn(1, 3, rng), col = randn(4, 1, rng),
       s = randn(1, 1, rng);
  std::vector<Tensor<double>> wrt{a, b, row, col, s};
  auto r = check_gradients([&] {
    auto y = ag::mul(ag::sub(a, b), ag::add(a, b));
    y = ag::add_broadcast(ag::add_broadcast(ag::add_broadcast(y, row), col), s);
    y = ag::add(ag::sigmoid(y), ag::scale(ag::relu(a), 0.5));
    return probe(y);
  }, std::span(wrt));
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autograd, InverseSigmoidAndLayerNorm) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::vector<double> pv(12);
  for (auto& v : pv) v = u(rng);
  Tensor<double> p(3, 4, pv, true);
  auto x = randn(3, 6, rng), g = randn(1, 6, rng), b = randn(1, 6, rng);
  std::vector<Tensor<double>> wrt{p, x, g, b};
  auto r = check_gradients([&] {
    return ag::add(probe(ag::inverse_sigmoid(p)), probe(ag::layer_norm(x, g, b), 5));
  }, std::span(wrt));
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autograd, SoftmaxGroupsSumToOne) {
  std::mt19937_64 rng(4);
  auto x = randn(3, 12, rng);
  auto y = ag::softmax_groups(x, 4);
  for (int i = 0; i < 9; ++i) {
    double s = 0;
    for (int j = 0; j < 4; ++j) s += y.values()[i * 4 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  std::vector<Tensor<double>> wrt{x};
  auto r = check_gradients([&] { return probe(ag::softmax_groups(x, 4)); }, std::span(wrt));
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autograd, ShapeOps) {
  std::mt19937_64 rng(5);
  auto a = randn(2, 3, rng), b = randn(3, 3, rng), c = randn(2, 2, rng), r1 = randn(1, 3, rng);
  std::vector<Tensor<double>> wrt{a, b, c, r1};
  const std::vector<int> idx{4, 0, 0, 2};
  auto r = check_gradients([&] {
    std::vector<Tensor<double>> rows{a, b, ag::repeat_rows(r1, 2)};
    auto cat = ag::concat_rows<double>(rows);
    std::vector<Tensor<double>> cols{a, c};
    auto catc = ag::concat_cols<double>(cols);
    auto y = ag::add(probe(ag::gather_rows<double>(cat, idx)), probe(ag::slice_cols(catc, 1, 4), 3));
    y = ag::add(y, probe(ag::slice_rows(cat, 1, 5), 4));
    return ag::add(y, probe(ag::mean_rows(cat), 6));
  }, std::span(wrt));
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Autograd, Conv3x3) {
  std::mt19937_64 rng(6);
  const int H = 5, W = 4, cin = 2, cout = 3;
  auto x = randn(H * W, cin, rng), w = randn(9 * cin, cout, rng), b = randn(1, cout, rng);
  std::vector<Tensor<double>> wrt{x, w, b};
  for (int stride : {1, 2}) {
    auto y = ag::conv3x3(x, H, W, w, b, stride);
    EXPECT_EQ(y.rows(), ((H - 1) / stride + 1) * ((W - 1) / stride + 1));
    auto r = check_gradients([&] { return probe(ag::conv3x3(x, H, W, w, b, stride)); }, std::span(wrt));
    EXPECT_LT(r.max_rel_error, kTol) << "stride " << stride;
  }
}

TEST(Autograd, Conv3x3MatchesDirectSum) {
  std::mt19937_64 rng(7);
  const int H = 4, W = 3, cin = 2, cout = 1;
  auto x = randn(H * W, cin, rng, 1.0, false), w = randn(9 * cin, cout, rng, 1.0, false);
  auto y = ag::conv3x3(x, H, W, w, Tensor<double>(), 1);
  for (int oy = 0; oy < H; ++oy) {
    for (int ox = 0; ox < W; ++ox) {
      double ref = 0;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const int iy = oy + ky - 1, ix = ox + kx - 1;
          if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
          for (int c = 0; c < cin; ++c) ref += x.at(iy * W + ix, c) * w.at((ky * 3 + kx) * cin + c, 0);
        }
      }
      EXPECT_NEAR(y.at(oy * W + ox, 0), ref, 1e-12);
    }
  }
}

TEST(Autograd, AttentionWithAndWithoutSegments) {
  std::mt19937_64 rng(8);
  auto q = randn(5, 8, rng), k = randn(5, 8, rng), v = randn(5, 8, rng);
  const std::vector<int> seg{0, 0, 1, 1, 1};
  std::vector<Tensor<double>> wrt{q, k, v};
  auto r = check_gradients([&] {
    return ag::add(probe(ag::attention(q, k, v, 2)), probe(ag::attention(q, k, v, 2, &seg), 3));
  }, std::span(wrt));
  EXPECT_LT(r.max_rel_error, kTol);
  // Segmented attention equals attention run on each segment alone.
  auto full = ag::attention(q, k, v, 2, &seg);
  auto tail = ag::attention(ag::slice_rows(q, 2, 5), ag::slice_rows(k, 2, 5), ag::slice_rows(v, 2, 5), 2);
  for (int i = 0; i < 3; ++i) {
    for (int c = 0; c < 8; ++c) EXPECT_NEAR(full.at(2 + i, c), tail.at(i, c), 1e-12);
  }
}

TEST(Autograd, DeformSampleGradients) {
  std::mt19937_64 rng(9);
  const std::vector<ag::LevelShape> levels{{4, 5}, {2, 3}};
  const int heads = 2, points = 2, D = 4;
  auto value = randn(4 * 5 + 2 * 3, D, rng);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::vector<double> refv;
  for (int n = 0; n < 3; ++n) {
    refv.insert(refv.end(), {u(rng), u(rng), u(rng) * 0.5, u(rng) * 0.5});
  }
  Tensor<double> ref(3, 4, refv, true);
  auto offsets = randn(3, heads * 2 * points * 2, rng, 0.7);
  auto logits = randn(3, heads * 2 * points, rng);
  std::vector<Tensor<double>> wrt{value, ref, offsets, logits};
  auto r = check_gradients([&] {
    auto loc = ag::sampling_locations(ref, offsets, points);
    auto w = ag::softmax_groups(logits, 2 * points);
    return probe(ag::deform_sample<double>(value, levels, loc, w, heads, points));
  }, std::span(wrt));
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(Autograd, FocalLossReducesToBce) {
  std::mt19937_64 rng(10);
  auto x = randn(3, 4, rng);
  std::vector<double> t(12);
  for (int i = 0; i < 12; ++i) t[i] = i % 3 == 0 ? 1.0 : 0.0;
  const double focal = ag::sigmoid_focal_loss<double>(x, t, -1.0, 0.0).item();
  double bce = 0;
  for (int i = 0; i < 12; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-x.values()[i]));
    bce += -(t[i] * std::log(p) + (1 - t[i]) * std::log(1 - p));
  }
  EXPECT_NEAR(focal, bce, 1e-12);
}

TEST(Autograd, FocalLossSingleCell) {
  Tensor<double> x(1, 1, {0.0}, true);
  const std::vector<double> t{1.0};
  EXPECT_NEAR(ag::sigmoid_focal_loss<double>(x, t, 0.25, 2.0).item(),
              0.25 * 0.25 * -std::log(0.5), 1e-15);
}

TEST(Autograd, LossGradients) {
  std::mt19937_64 rng(11);
  auto x = randn(4, 3, rng, 2.0);
  std::vector<double> t(12);
  for (int i = 0; i < 12; ++i) t[i] = i % 4 == 1 ? 1.0 : 0.0;
  std::uniform_real_distribution<double> u(0.2, 0.8);
  std::vector<double> pv, tv;
  for (int i = 0; i < 6; ++i) {
    pv.insert(pv.end(), {u(rng), u(rng), u(rng) * 0.4 + 0.05, u(rng) * 0.4 + 0.05});
    tv.insert(tv.end(), {u(rng), u(rng), u(rng) * 0.4 + 0.05, u(rng) * 0.4 + 0.05});
  }
  Tensor<double> boxes(6, 4, pv, true);
  std::vector<Tensor<double>> wrt{x, boxes};
  auto r = check_gradients([&] {
    auto l = ag::sigmoid_focal_loss<double>(x, t, 0.25, 2.0);
    l = ag::add(l, ag::giou_loss<double>(boxes, tv));
    return ag::add(l, ag::l1_loss<double>(boxes, tv));
  }, std::span(wrt));
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(Autograd, NoGradGuardSkipsGraph) {
  std::mt19937_64 rng(12);
  auto a = randn(2, 2, rng);
  ag::NoGradGuard guard;
  auto y = ag::relu(a);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->parents.empty());
}

TEST(Autograd, ShapeErrorsAreValidationErrors) {
  Tensor<double> a(2, 3), b(2, 3);
  EXPECT_THROW(ag::matmul(a, b), petduet::ValidationError);
  EXPECT_THROW(ag::softmax_groups(a, 2), petduet::ValidationError);
}
