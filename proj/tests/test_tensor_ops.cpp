#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "winlin/nn_ops.hpp"
#include "winlin/ops.hpp"
#include "winlin/rng.hpp"
#include "winlin/tensor.hpp"

using namespace winlin;

namespace {

// Independent triple-loop product; the reference for matmul.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  std::int64_t m, std::int64_t k, std::int64_t n) {
  std::vector<double> c(static_cast<std::size_t>(m * n), 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t l = 0; l < k; ++l) c[i * n + j] += a[i * k + l] * b[l * n + j];
  return c;
}

// Direct six-nested-loop cross-correlation, zero padding, with groups.
std::vector<double> conv2d_oracle(const std::vector<double>& x, const std::vector<double>& w,
                                  std::int64_t B, std::int64_t C, std::int64_t H, std::int64_t W,
                                  std::int64_t O, std::int64_t kh, std::int64_t kw,
                                  std::int64_t stride, std::int64_t pad, std::int64_t groups) {
  const std::int64_t Cg = C / groups, Og = O / groups;
  const std::int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> y(static_cast<std::size_t>(B * O * Ho * Wo), 0.0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t o = 0; o < O; ++o) {
      const std::int64_t g = o / Og;
      for (std::int64_t oh = 0; oh < Ho; ++oh)
        for (std::int64_t ow = 0; ow < Wo; ++ow) {
          double acc = 0.0;
          for (std::int64_t c = 0; c < Cg; ++c)
            for (std::int64_t ki = 0; ki < kh; ++ki)
              for (std::int64_t kj = 0; kj < kw; ++kj) {
                const std::int64_t ih = oh * stride + ki - pad;
                const std::int64_t iw = ow * stride + kj - pad;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x[((b * C + g * Cg + c) * H + ih) * W + iw] *
                       w[((o * Cg + c) * kh + ki) * kw + kj];
              }
          y[((b * O + o) * Ho + oh) * Wo + ow] = acc;
        }
    }
  return y;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("matmul identity and scalar cases") {
  Rng rng(1);
  TensorD a = TensorD::randn({4, 4}, rng);
  TensorD eye = TensorD::zeros({4, 4});
  for (int i = 0; i < 4; ++i) eye.data()[i * 4 + i] = 1.0;
  TensorD y = matmul(a, eye);
  CHECK(max_abs_diff(y.vec(), a.vec()) == 0.0);

  TensorD two = TensorD::from({1, 1}, {2.0});
  TensorD three = TensorD::from({1, 1}, {3.0});
  CHECK(matmul(two, three).item() == 6.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(7);
  TensorD a = TensorD::randn({7, 5}, rng);
  TensorD b = TensorD::randn({5, 3}, rng);
  TensorD c = matmul(a, b);
  auto ref = matmul_oracle(a.vec(), b.vec(), 7, 5, 3);
  CHECK(max_abs_diff(c.vec(), ref) < 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  TensorD a = TensorD::zeros({2, 3});
  TensorD b = TensorD::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2,3]"), ShapeError);
  try {
    matmul(a, b);
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("conv2d 1x1 unit kernel is identity") {
  Rng rng(3);
  TensorD x = TensorD::randn({2, 3, 5, 4}, rng);
  TensorD w = TensorD::zeros({3, 3, 1, 1});
  for (int o = 0; o < 3; ++o) w.data()[o * 3 + o] = 1.0;
  TensorD y = conv2d(x, w, 1, 0);
  CHECK(max_abs_diff(y.vec(), x.vec()) == 0.0);
}

TEST_CASE("conv2d Laplacian kernel on constant image") {
  TensorD x = TensorD::full({1, 1, 6, 6}, 2.5);
  TensorD w = TensorD::from({1, 1, 3, 3}, {-1, -1, -1, -1, 8, -1, -1, -1, -1});
  TensorD y = conv2d(x, w, 1, 1);
  // interior: kernel sums to zero
  for (std::int64_t i = 1; i < 5; ++i)
    for (std::int64_t j = 1; j < 5; ++j) CHECK(y.data()[i * 6 + j] == doctest::Approx(0.0));
  // corner sees 3 taps of padding: 8*v - 3*v - (3 missing -1 taps read 0) -> 8v-3v = 5v? no:
  // corner (0,0): taps inside are (0,0)x8,(0,1),(1,0),(1,1) each -1 -> 8v-3v = 5v
  CHECK(y.data()[0] == doctest::Approx(5.0 * 2.5));
  // edge (0,2): inside taps: center 8, five -1 neighbours -> 3v
  CHECK(y.data()[2] == doctest::Approx(3.0 * 2.5));
}

TEST_CASE("conv2d matches nested-loop oracle") {
  Rng rng(11);
  TensorD x = TensorD::randn({1, 3, 6, 6}, rng);
  TensorD w = TensorD::randn({4, 3, 3, 3}, rng);
  TensorD y = conv2d(x, w, 1, 1);
  auto ref = conv2d_oracle(x.vec(), w.vec(), 1, 3, 6, 6, 4, 3, 3, 1, 1, 1);
  CHECK(max_abs_diff(y.vec(), ref) < 1e-10);

  SUBCASE("with stride 2, pad 0, bias") {
    TensorD b = TensorD::randn({4}, rng);
    TensorD y2 = conv2d(x, w, b, 2, 0);
    auto ref2 = conv2d_oracle(x.vec(), w.vec(), 1, 3, 6, 6, 4, 3, 3, 2, 0, 1);
    for (std::int64_t o = 0; o < 4; ++o)
      for (std::int64_t i = 0; i < 4; ++i) ref2[o * 4 + i] += b.data()[o];
    CHECK(max_abs_diff(y2.vec(), ref2) < 1e-10);
  }
}

TEST_CASE("conv2d grouped matches oracle, depthwise included") {
  Rng rng(13);
  TensorD x = TensorD::randn({2, 4, 5, 5}, rng);
  SUBCASE("groups=2") {
    TensorD w = TensorD::randn({6, 2, 3, 3}, rng);
    TensorD y = conv2d(x, w, 1, 1, 2);
    auto ref = conv2d_oracle(x.vec(), w.vec(), 2, 4, 5, 5, 6, 3, 3, 1, 1, 2);
    CHECK(max_abs_diff(y.vec(), ref) < 1e-10);
  }
  SUBCASE("depthwise") {
    TensorD w = TensorD::randn({4, 1, 3, 3}, rng);
    TensorD y = conv2d(x, w, 1, 1, 4);
    auto ref = conv2d_oracle(x.vec(), w.vec(), 2, 4, 5, 5, 4, 3, 3, 1, 1, 4);
    CHECK(max_abs_diff(y.vec(), ref) < 1e-10);
  }
  SUBCASE("non-divisible groups rejected") {
    TensorD w = TensorD::randn({6, 2, 3, 3}, rng);
    CHECK_THROWS_AS(conv2d(x, w, 1, 1, 3), ConfigError);
  }
}

TEST_CASE("batchnorm2d training normalizes per channel") {
  Rng rng(17);
  TensorD x = TensorD::randn({3, 2, 4, 4}, rng);
  for (auto& v : x.vec()) v = v * 2.0 + 1.5;
  TensorD gamma = TensorD::full({2}, 1.0);
  TensorD beta = TensorD::zeros({2});
  BnState<double> state(2);
  TensorD y = batchnorm2d(x, gamma, beta, state, true);
  const std::int64_t m = 3 * 4 * 4;
  for (std::int64_t c = 0; c < 2; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::int64_t b = 0; b < 3; ++b)
      for (std::int64_t i = 0; i < 16; ++i) mean += y.data()[(b * 2 + c) * 16 + i];
    mean /= m;
    for (std::int64_t b = 0; b < 3; ++b)
      for (std::int64_t i = 0; i < 16; ++i) {
        const double d = y.data()[(b * 2 + c) * 16 + i] - mean;
        var += d * d;
      }
    var /= m;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("batchnorm2d constant input gives zeros; single-pixel batch defined") {
  TensorD x = TensorD::full({2, 3, 2, 2}, 4.0);
  TensorD gamma = TensorD::full({3}, 1.0);
  TensorD beta = TensorD::zeros({3});
  BnState<double> state(3);
  TensorD y = batchnorm2d(x, gamma, beta, state, true);
  for (auto v : y.vec()) CHECK(v == doctest::Approx(0.0));

  TensorD x1 = TensorD::full({1, 3, 1, 1}, 7.0);
  BnState<double> s1(3);
  TensorD y1 = batchnorm2d(x1, gamma, beta, s1, true);
  for (auto v : y1.vec()) CHECK(std::isfinite(v));
}

TEST_CASE("batchnorm2d eval matches scalar formula") {
  Rng rng(23);
  TensorD x = TensorD::randn({2, 3, 3, 3}, rng);
  TensorD gamma = TensorD::randn({3}, rng);
  TensorD beta = TensorD::randn({3}, rng);
  BnState<double> state(3);
  for (int c = 0; c < 3; ++c) {
    state.running_mean[c] = 0.3 * c - 0.2;
    state.running_var[c] = 0.5 + 0.25 * c;
  }
  const double eps = 1e-5;
  TensorD y = batchnorm2d(x, gamma, beta, state, false, eps);
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t i = 0; i < 9; ++i) {
        const double xv = x.data()[(b * 3 + c) * 9 + i];
        const double expect = (xv - state.running_mean[c]) /
                                  std::sqrt(state.running_var[c] + eps) * gamma.data()[c] +
                              beta.data()[c];
        CHECK(y.data()[(b * 3 + c) * 9 + i] == doctest::Approx(expect).epsilon(1e-12));
      }
}

TEST_CASE("relu6 clamps at both rails") {
  TensorD x = TensorD::from({3}, {-1.0, 3.0, 9.0});
  TensorD y = relu6(x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == 3.0);
  CHECK(y.data()[2] == 6.0);
}

TEST_CASE("softmax_rows closed forms and oracle") {
  TensorD u = TensorD::full({1, 4}, 1.7);
  TensorD yu = softmax_rows(u);
  for (auto v : yu.vec()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  TensorD r = TensorD::from({1, 2}, {0.0, std::log(2.0)});
  TensorD yr = softmax_rows(r);
  CHECK(yr.data()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(yr.data()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  Rng rng(29);
  TensorD x = TensorD::randn({5, 8}, rng);
  TensorD y = softmax_rows(x);
  // naive two-pass reference without max subtraction
  for (std::int64_t i = 0; i < 5; ++i) {
    double denom = 0.0;
    for (std::int64_t j = 0; j < 8; ++j) denom += std::exp(x.data()[i * 8 + j]);
    for (std::int64_t j = 0; j < 8; ++j)
      CHECK(std::abs(y.data()[i * 8 + j] - std::exp(x.data()[i * 8 + j]) / denom) < 1e-12);
  }

  SUBCASE("rows sum to one, extreme values included") {
    TensorD big = TensorD::from({2, 3}, {1e4, 0.0, -1e4, 800.0, 800.0, 800.0});
    TensorD yb = softmax_rows(big);
    for (std::int64_t i = 0; i < 2; ++i) {
      double s = 0.0;
      for (std::int64_t j = 0; j < 3; ++j) s += yb.data()[i * 3 + j];
      CHECK(std::abs(s - 1.0) < 1e-6);
      for (std::int64_t j = 0; j < 3; ++j) CHECK(std::isfinite(yb.data()[i * 3 + j]));
    }
  }
}

TEST_CASE("l2_normalize_rows cases") {
  TensorD x = TensorD::from({1, 2}, {3.0, 4.0});
  TensorD y = l2_normalize_rows(x);
  CHECK(y.data()[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(y.data()[1] == doctest::Approx(0.8).epsilon(1e-12));

  TensorD z = TensorD::zeros({1, 3});
  TensorD yz = l2_normalize_rows(z, 1e-12);
  for (auto v : yz.vec()) CHECK(v == 0.0);

  Rng rng(31);
  TensorD r = TensorD::randn({6, 5}, rng);
  TensorD yr = l2_normalize_rows(r);
  for (std::int64_t i = 0; i < 6; ++i) {
    double n = 0.0;
    for (std::int64_t j = 0; j < 5; ++j) n += yr.data()[i * 5 + j] * yr.data()[i * 5 + j];
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-9);
  }
}

TEST_CASE("upsample_bilinear identity, constants, and hand oracle") {
  Rng rng(37);
  TensorD x = TensorD::randn({1, 2, 3, 3}, rng);
  TensorD y1 = upsample_bilinear(x, 1);
  CHECK(max_abs_diff(y1.vec(), x.vec()) == 0.0);

  TensorD c = TensorD::full({1, 1, 2, 3}, 1.25);
  TensorD yc = upsample_bilinear(c, 3);
  for (auto v : yc.vec()) CHECK(v == doctest::Approx(1.25).epsilon(1e-12));

  // hand-evaluated align_corners=false interpolation of [[0,1],[2,3]] at factor 2
  TensorD g = TensorD::from({1, 1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
  TensorD yg = upsample_bilinear(g, 2);
  const std::vector<double> expect = {0.0, 0.25, 0.75, 1.0,  0.5, 0.75, 1.25, 1.5,
                                      1.5, 1.75, 2.25, 2.5,  2.0, 2.25, 2.75, 3.0};
  CHECK(max_abs_diff(yg.vec(), expect) < 1e-12);
}

TEST_CASE("elementwise ops and reductions") {
  TensorD a = TensorD::from({4}, {1.0, -2.0, 0.5, 3.0});
  TensorD b = TensorD::from({4}, {2.0, 0.5, -1.0, 1.0});
  TensorD s = add(a, b);
  CHECK(s.data()[1] == doctest::Approx(-1.5));
  TensorD p = mul(a, b);
  CHECK(p.data()[2] == doctest::Approx(-0.5));
  CHECK(sum_all(a).item() == doctest::Approx(2.5));
  CHECK(abs_val(a).data()[1] == doctest::Approx(2.0));
  TensorD cl = clamp(a, 0.0, 1.0);
  CHECK(cl.data()[1] == 0.0);
  CHECK(cl.data()[3] == 1.0);
  TensorD sg = sigmoid(TensorD::from({2}, {0.0, 100.0}));
  CHECK(sg.data()[0] == doctest::Approx(0.5));
  CHECK(sg.data()[1] == doctest::Approx(1.0));
}

TEST_CASE("concat_channels layout and reshape round trip") {
  Rng rng(41);
  TensorD a = TensorD::randn({2, 2, 2, 2}, rng);
  TensorD b = TensorD::randn({2, 3, 2, 2}, rng);
  TensorD c = concat_channels(a, b);
  CHECK(c.shape() == Shape{2, 5, 2, 2});
  CHECK(c.data()[0 * 20 + 0] == a.data()[0]);
  CHECK(c.data()[0 * 20 + 2 * 4] == b.data()[0]);
  CHECK(c.data()[1 * 20 + 2 * 4 + 1] == b.data()[1 * 12 + 1]);

  TensorD r = reshape(c, {5, 8});
  CHECK(r.vec() == c.vec());
}

TEST_CASE("forward determinism: same seed, bit-identical results") {
  auto run = [] {
    Rng rng(99);
    TensorD x = TensorD::randn({1, 3, 8, 8}, rng);
    TensorD w = TensorD::randn({4, 3, 3, 3}, rng);
    TensorD g = TensorD::full({4}, 1.0);
    TensorD be = TensorD::zeros({4});
    BnState<double> st(4);
    TensorD y = relu6(batchnorm2d(conv2d(x, w, 1, 1), g, be, st, true));
    return y.vec();
  };
  CHECK(run() == run());
}
