#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "winlin/gradcheck.hpp"
#include "winlin/loss.hpp"
#include "winlin/metrics.hpp"
#include "winlin/rng.hpp"

using namespace winlin;

namespace {

// Independent 3x3 neighborhood scan: |8*v - sum of in-bounds neighbors|,
// clamped to [0,1].
TensorD boundary_scan_oracle(const TensorD& map) {
  const std::int64_t H = map.dim(2), W = map.dim(3);
  TensorD out = TensorD::zeros(map.shape());
  for (std::int64_t b = 0; b < map.dim(0); ++b)
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j) {
        double acc = 8.0 * map.data()[(b * H + i) * W + j];
        for (std::int64_t di = -1; di <= 1; ++di)
          for (std::int64_t dj = -1; dj <= 1; ++dj) {
            if (di == 0 && dj == 0) continue;
            const std::int64_t ii = i + di, jj = j + dj;
            if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
            acc -= map.data()[(b * H + ii) * W + jj];
          }
        out.data()[(b * H + i) * W + j] = std::min(std::abs(acc), 1.0);
      }
  return out;
}

TensorD random_binary_mask(std::int64_t h, std::int64_t w, Rng& rng) {
  TensorD m = TensorD::zeros({1, 1, h, w});
  for (auto& v : m.vec()) v = rng.bernoulli(0.35) ? 1.0 : 0.0;
  return m;
}

}  // namespace

TEST_CASE("laplacian_boundary on constant maps") {
  TensorD half = TensorD::full({1, 1, 6, 6}, 0.5);
  TensorD yb = laplacian_boundary(half);
  for (std::int64_t i = 1; i < 5; ++i)
    for (std::int64_t j = 1; j < 5; ++j) CHECK(yb.data()[i * 6 + j] == doctest::Approx(0.0));

  TensorD ones = TensorD::full({1, 1, 6, 6}, 1.0);
  TensorD y1 = laplacian_boundary(ones);
  // zero padding lights the frame, clamped to 1
  CHECK(y1.data()[0] == doctest::Approx(1.0));
  CHECK(y1.data()[3] == doctest::Approx(1.0));
  CHECK(y1.data()[2 * 6 + 2] == doctest::Approx(0.0));
}

TEST_CASE("laplacian_boundary single pixel stencil") {
  TensorD m = TensorD::zeros({1, 1, 7, 7});
  m.data()[3 * 7 + 3] = 1.0;
  TensorD y = laplacian_boundary(m);
  for (std::int64_t i = 0; i < 7; ++i)
    for (std::int64_t j = 0; j < 7; ++j) {
      const double v = y.data()[i * 7 + j];
      if (std::abs(i - 3) <= 1 && std::abs(j - 3) <= 1)
        CHECK(v == doctest::Approx(1.0));
      else
        CHECK(v == doctest::Approx(0.0));
    }
}

TEST_CASE("laplacian_boundary rectangle band matches the scan oracle") {
  TensorD m = TensorD::zeros({1, 1, 12, 12});
  for (std::int64_t i = 3; i < 9; ++i)
    for (std::int64_t j = 2; j < 8; ++j) m.data()[i * 12 + j] = 1.0;
  TensorD y = laplacian_boundary(m);
  TensorD ref = boundary_scan_oracle(m);
  for (std::int64_t i = 0; i < y.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
  // band is exactly the two-pixel inside/outside border of the rectangle
  for (std::int64_t i = 1; i < 11; ++i)
    for (std::int64_t j = 1; j < 11; ++j) {
      const bool inside = i >= 3 && i < 9 && j >= 2 && j < 8;
      const bool deep_inside = i >= 4 && i < 8 && j >= 3 && j < 7;
      const bool near_outside =
          !inside && i >= 2 && i < 10 && j >= 1 && j < 9;
      const double v = y.data()[i * 12 + j];
      if (deep_inside)
        CHECK(v == doctest::Approx(0.0));
      else if (inside || near_outside)
        CHECK(v > 0.0);
      else
        CHECK(v == doctest::Approx(0.0));
    }
}

TEST_CASE("laplacian_boundary matches the scan oracle on random masks") {
  for (int t = 0; t < 50; ++t) {
    Rng rng(4000 + t);
    const std::int64_t h = rng.uniform_int(3, 64), w = rng.uniform_int(3, 64);
    TensorD m = random_binary_mask(h, w, rng);
    TensorD y = laplacian_boundary(m);
    TensorD ref = boundary_scan_oracle(m);
    double d = 0.0;
    for (std::int64_t i = 0; i < y.numel(); ++i)
      d = std::max(d, std::abs(y.data()[i] - ref.data()[i]));
    CHECK(d < 1e-10);
  }
}

TEST_CASE("bce_with_logits closed forms and oracle") {
  TensorD ones_valid = TensorD::full({1}, 1.0);
  TensorD z = TensorD::zeros({1});
  TensorD half = TensorD::full({1}, 0.5);
  CHECK(bce_with_logits(z, half, ones_valid).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  TensorD big = TensorD::full({1}, 50.0);
  TensorD one = TensorD::full({1}, 1.0);
  const double v = bce_with_logits(big, one, ones_valid).item();
  CHECK(std::isfinite(v));
  CHECK(v < 1e-20);

  Rng rng(71);
  TensorD logits = TensorD::randn({1, 1, 5, 5}, rng);
  TensorD target = random_binary_mask(5, 5, rng);
  TensorD valid = TensorD::full({1, 1, 5, 5}, 1.0);
  double ref = 0.0;
  for (std::int64_t i = 0; i < 25; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-logits.data()[i]));
    const double t = target.data()[i];
    ref += -(t * std::log(s) + (1.0 - t) * std::log(1.0 - s));
  }
  ref /= 25.0;
  CHECK(std::abs(bce_with_logits(logits, target, valid).item() - ref) < 1e-10);

  SUBCASE("zero valid pixels is defined as 0 with a flag") {
    TensorD none = TensorD::zeros({1, 1, 5, 5});
    bool degenerate = false;
    CHECK(bce_with_logits(logits, target, none, &degenerate).item() == 0.0);
    CHECK(degenerate);
  }
}

TEST_CASE("dice_loss closed forms") {
  TensorD valid = TensorD::full({1, 1, 4, 4}, 1.0);
  Rng rng(73);
  TensorD mask = random_binary_mask(4, 4, rng);
  CHECK(dice_loss(mask, mask, valid).item() == doctest::Approx(0.0));

  // disjoint full masks of size n
  TensorD p = TensorD::zeros({1, 1, 4, 4});
  TensorD g = TensorD::zeros({1, 1, 4, 4});
  for (int i = 0; i < 5; ++i) p.data()[i] = 1.0;
  for (int i = 5; i < 10; ++i) g.data()[i] = 1.0;
  CHECK(dice_loss(p, g, valid).item() == doctest::Approx(1.0 - 1.0 / 11.0).epsilon(1e-12));

  // half overlap on a 2x2 grid: inter=1, sums 2+2, smooth 1 -> 1 - 3/5
  TensorD p2 = TensorD::from({1, 1, 2, 2}, {1.0, 1.0, 0.0, 0.0});
  TensorD g2 = TensorD::from({1, 1, 2, 2}, {1.0, 0.0, 1.0, 0.0});
  TensorD v2 = TensorD::full({1, 1, 2, 2}, 1.0);
  CHECK(dice_loss(p2, g2, v2).item() == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("joint_loss near zero for perfect hard predictions") {
  Rng rng(79);
  TensorD target = random_binary_mask(8, 8, rng);
  TensorD valid = TensorD::full({1, 1, 8, 8}, 1.0);
  TensorD logits = TensorD::zeros({1, 1, 8, 8});
  for (std::int64_t i = 0; i < 64; ++i) logits.data()[i] = target.data()[i] > 0.5 ? 50.0 : -50.0;
  JointLoss<double> loss = joint_loss(logits, target, valid);
  CHECK(loss.total.item() < 1e-3);
  CHECK(loss.ce.item() >= 0.0);
  CHECK(loss.dice.item() >= 0.0);
  CHECK(loss.boundary.item() >= 0.0);
}

TEST_CASE("joint_loss terms match scalar oracles on the half-ones case") {
  const std::int64_t H = 4, W = 4;
  TensorD logits = TensorD::zeros({1, 1, H, W});
  TensorD target = TensorD::zeros({1, 1, H, W});
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j) target.data()[i * W + j] = i < H / 2 ? 1.0 : 0.0;
  TensorD valid = TensorD::full({1, 1, H, W}, 1.0);
  JointLoss<double> loss = joint_loss(logits, target, valid);

  CHECK(loss.ce.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // dice: probs are all 0.5
  const double inter = 0.5 * 8, psum = 0.5 * 16, gsum = 8;
  CHECK(loss.dice.item() ==
        doctest::Approx(1.0 - (2 * inter + 1) / (psum + gsum + 1)).epsilon(1e-12));

  // boundary oracle: prediction map is constant 0.5, so its Laplacian is
  // nonzero only on the frame; target boundary from the scan oracle
  TensorD probs = TensorD::full({1, 1, H, W}, 0.5);
  TensorD pb = boundary_scan_oracle(probs);
  TensorD tb = boundary_scan_oracle(target);
  double ref = 0.0;
  const double eps = 1e-7;
  for (std::int64_t i = 0; i < H * W; ++i) {
    const double p = std::min(std::max(pb.data()[i], eps), 1.0 - eps);
    const double t = tb.data()[i] > 0.0 ? 1.0 : 0.0;
    ref += -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
  }
  ref /= H * W;
  CHECK(loss.boundary.item() == doctest::Approx(ref).epsilon(1e-10));
  CHECK(loss.total.item() ==
        doctest::Approx(loss.ce.item() + loss.dice.item() + loss.boundary.item()));
}

TEST_CASE("gradcheck: joint loss") {
  for (int seed = 0; seed < 3; ++seed) {
    Rng rng(5000 + seed);
    TensorD logits = TensorD::randn({1, 1, 6, 6}, rng);
    TensorD target = random_binary_mask(6, 6, rng);
    TensorD valid = TensorD::full({1, 1, 6, 6}, 1.0);
    auto r = gradcheck([&] { return joint_loss(logits, target, valid).total; }, {logits});
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("losses ignore invalid pixels exactly") {
  Rng rng(83);
  TensorD logits = TensorD::randn({1, 1, 6, 6}, rng);
  TensorD target = random_binary_mask(6, 6, rng);
  TensorD valid = TensorD::full({1, 1, 6, 6}, 1.0);
  for (std::int64_t j = 0; j < 6; ++j) {
    valid.data()[5 * 6 + j] = 0.0;  // last row padded
    target.data()[5 * 6 + j] = 0.0;
  }
  JointLoss<double> before = joint_loss(logits, target, valid);

  TensorD logits2 = logits.clone();
  TensorD target2 = target.clone();
  for (std::int64_t j = 0; j < 6; ++j) {
    logits2.data()[5 * 6 + j] = 123.0 - j;
    target2.data()[5 * 6 + j] = 1.0;
  }
  JointLoss<double> after = joint_loss(logits2, target2, valid);
  CHECK(before.total.item() == after.total.item());
  CHECK(before.ce.item() == after.ce.item());
  CHECK(before.dice.item() == after.dice.item());
  CHECK(before.boundary.item() == after.boundary.item());

  MetricReport mb = compute_metrics(sigmoid(logits), target, valid);
  MetricReport ma = compute_metrics(sigmoid(logits2), target2, valid);
  CHECK(mb.iou == ma.iou);
  CHECK(mb.precision == ma.precision);
  CHECK(mb.recall == ma.recall);
  CHECK(mb.f1 == ma.f1);
}

TEST_CASE("compute_metrics closed cases") {
  SUBCASE("perfect prediction") {
    Rng rng(89);
    TensorD m = random_binary_mask(8, 8, rng);
    m.data()[0] = 1.0;  // ensure at least one positive
    TensorD valid = TensorD::full({1, 1, 8, 8}, 1.0);
    MetricReport r = compute_metrics(m, m, valid);
    CHECK(r.iou == 1.0);
    CHECK(r.precision == 1.0);
    CHECK(r.recall == 1.0);
    CHECK(r.f1 == 1.0);
    CHECK_FALSE(r.degenerate);
  }
  SUBCASE("tp=6 fp=2 fn=2") {
    MetricReport r = metrics_from_counts({6, 2, 2, 0});
    CHECK(r.precision == doctest::Approx(0.75));
    CHECK(r.recall == doctest::Approx(0.75));
    CHECK(r.f1 == doctest::Approx(0.75));
    CHECK(r.iou == doctest::Approx(0.6));
  }
  SUBCASE("empty prediction and target flags degenerate") {
    MetricReport r = metrics_from_counts({0, 0, 0, 10});
    CHECK(r.iou == 0.0);
    CHECK(r.degenerate);
  }
}

TEST_CASE("pooled F1 equals 2*IoU/(1+IoU)") {
  ConfusionCounts pooled;
  for (int t = 0; t < 10; ++t) {
    Rng rng(6000 + t);
    const std::int64_t h = rng.uniform_int(4, 64), w = rng.uniform_int(4, 64);
    TensorD pred = random_binary_mask(h, w, rng);
    TensorD target = random_binary_mask(h, w, rng);
    TensorD valid = TensorD::full({1, 1, h, w}, 1.0);
    pooled += confusion_counts(pred, target, valid);

    // brute-force per-pixel oracle
    ConfusionCounts c;
    for (std::int64_t i = 0; i < h * w; ++i) {
      const bool p = pred.data()[i] > 0.5, g = target.data()[i] > 0.5;
      c.tp += p && g;
      c.fp += p && !g;
      c.fn += !p && g;
      c.tn += !p && !g;
    }
    ConfusionCounts got = confusion_counts(pred, target, valid);
    CHECK(got.tp == c.tp);
    CHECK(got.fp == c.fp);
    CHECK(got.fn == c.fn);
    CHECK(got.tn == c.tn);
    CHECK(got.total() == h * w);
  }
  MetricReport r = metrics_from_counts(pooled);
  CHECK(std::abs(r.f1 - 2.0 * r.iou / (1.0 + r.iou)) < 1e-12);

  // the published BuildFormer row: IoU 0.7574 implies F1 0.8619
  const double iou = 0.7574;
  const double f1 = 2.0 * iou / (1.0 + iou);
  CHECK(std::abs(f1 - 0.8619) < 0.001);
}

TEST_CASE("metric bounds hold on random inputs") {
  for (int t = 0; t < 20; ++t) {
    Rng rng(7000 + t);
    TensorD pred = TensorD::zeros({1, 1, 10, 10});
    for (auto& v : pred.vec()) v = rng.uniform();
    TensorD target = random_binary_mask(10, 10, rng);
    TensorD valid = TensorD::full({1, 1, 10, 10}, 1.0);
    MetricReport r = compute_metrics(pred, target, valid);
    for (double m : {r.iou, r.precision, r.recall, r.f1}) {
      CHECK(m >= 0.0);
      CHECK(m <= 1.0);
    }
  }
}

TEST_CASE("tta_predict symmetrizes and preserves symmetric inputs") {
  Rng rng(97);
  TensorD kernel = TensorD::randn({1, 3, 3, 3}, rng);
  auto model = [&](const TensorD& img) { return conv2d(img, kernel, 1, 1); };

  SUBCASE("flip-invariant input through a flip-equivariant model") {
    // kernel symmetric under both flips, so the model commutes with them
    TensorD sym = TensorD::zeros({1, 3, 3, 3});
    for (std::int64_t c = 0; c < 3; ++c) {
      const double a = 0.1 + 0.05 * c, b = -0.2 + 0.1 * c, d = 0.4;
      const std::vector<double> k = {a, b, a, b, d, b, a, b, a};
      for (int i = 0; i < 9; ++i) sym.data()[c * 9 + i] = k[i];
    }
    auto sym_model = [&](const TensorD& in) { return conv2d(in, sym, 1, 1); };
    TensorD img = TensorD::full({1, 3, 8, 8}, 0.25);
    TensorD single = sigmoid(sym_model(img));
    TensorD averaged = tta_predict<double>(sym_model, img);
    for (std::int64_t i = 0; i < single.numel(); ++i)
      CHECK(std::abs(single.data()[i] - averaged.data()[i]) < 1e-5);
  }
  SUBCASE("output invariant under input flips") {
    TensorD img = TensorD::randn({1, 3, 8, 8}, rng);
    TensorD base = tta_predict<double>(model, img);
    TensorD flipped = hflip(tta_predict<double>(model, hflip(img)));
    for (std::int64_t i = 0; i < base.numel(); ++i)
      CHECK(std::abs(base.data()[i] - flipped.data()[i]) < 1e-5);
    TensorD vflipped = vflip(tta_predict<double>(model, vflip(img)));
    for (std::int64_t i = 0; i < base.numel(); ++i)
      CHECK(std::abs(base.data()[i] - vflipped.data()[i]) < 1e-5);
  }
  SUBCASE("tta never degrades flip consistency") {
    for (int t = 0; t < 5; ++t) {
      Rng r2(8000 + t);
      TensorD img = TensorD::randn({1, 3, 8, 8}, r2);
      auto consistency = [&](const std::function<TensorD(const TensorD&)>& f) {
        TensorD a = f(img);
        TensorD b = hflip(f(hflip(img)));
        double d = 0.0;
        for (std::int64_t i = 0; i < a.numel(); ++i)
          d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
        return d;
      };
      const double single = consistency([&](const TensorD& x) { return sigmoid(model(x)); });
      const double averaged =
          consistency([&](const TensorD& x) { return tta_predict<double>(model, x); });
      CHECK(averaged <= single + 1e-12);
    }
  }
}

TEST_CASE("metric report CSV row") {
  MetricReport r;
  r.iou = 0.6;
  r.precision = 0.75;
  r.recall = 0.75;
  r.f1 = 0.75;
  CHECK(r.csv_row("val") == "val,0.600000,0.750000,0.750000,0.750000");
}
