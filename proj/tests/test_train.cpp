#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "winlin/train.hpp"

using namespace winlin;
namespace fs = std::filesystem;

namespace {

ModelConfig micro_config() {
  ModelConfig c;
  c.stage_channels = {8, 16, 32, 64};
  c.stage_depths = {1, 1, 1, 1};
  c.window_side = 4;
  c.mlp_ratio = 2.0;
  c.scp_channels = {4, 4, 8, 8, 8, 8};
  c.scp_strides = {2, 2, 1, 1, 1, 1};
  c.fpn_dim = 16;
  c.head_hidden = 8;
  return c;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const char* tag)
      : path(fs::temp_directory_path() / (std::string("winlin_train_") + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("cosine_lr endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 1e-3, 1e-6) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(cosine_lr(100, 100, 1e-3, 1e-6) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(cosine_lr(50, 100, 1e-3, 1e-6) == doctest::Approx((1e-3 + 1e-6) / 2).epsilon(1e-12));
  CHECK_THROWS_AS(cosine_lr(101, 100, 1e-3, 1e-6), ShapeError);
}

TEST_CASE("adamw: zero gradient and zero decay leave parameters unchanged") {
  Parameter<double> p(TensorD::from({3}, {1.0, -2.0, 0.5}), "p");
  p.tensor.grad_buffer();  // zeros
  AdamW<double> opt(0.9, 0.999, 1e-8, 0.0);
  opt.step({&p}, 1e-3);
  CHECK(p.tensor.data()[0] == 1.0);
  CHECK(p.tensor.data()[1] == -2.0);
  CHECK(p.tensor.data()[2] == 0.5);
}

TEST_CASE("adamw: first step with unit gradient moves by -lr") {
  Parameter<double> p(TensorD::from({1}, {0.7}), "p");
  p.tensor.grad_buffer()[0] = 1.0;
  AdamW<double> opt(0.9, 0.999, 1e-8, 0.0);
  opt.step({&p}, 1e-3);
  CHECK(std::abs(p.tensor.data()[0] - (0.7 - 1e-3)) < 1e-10);
}

TEST_CASE("adamw: ten steps on a quadratic match an independent reference") {
  // optimize 0.5*(w-3)^2 with decoupled decay
  const double lr = 0.05, wd = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Parameter<double> p(TensorD::from({1}, {0.0}), "w");
  AdamW<double> opt(b1, b2, eps, wd);

  double ref_w = 0.0, ref_m = 0.0, ref_v = 0.0;
  for (int t = 1; t <= 10; ++t) {
    const double g = p.tensor.data()[0] - 3.0;
    p.tensor.zero_grad();
    p.tensor.grad_buffer()[0] = g;
    opt.step({&p}, lr);

    const double ref_g = ref_w - 3.0;
    ref_w -= lr * wd * ref_w;
    ref_m = b1 * ref_m + (1 - b1) * ref_g;
    ref_v = b2 * ref_v + (1 - b2) * ref_g * ref_g;
    const double mhat = ref_m / (1 - std::pow(b1, t));
    const double vhat = ref_v / (1 - std::pow(b2, t));
    ref_w -= lr * mhat / (std::sqrt(vhat) + eps);
    CHECK(std::abs(p.tensor.data()[0] - ref_w) < 1e-10);
  }
}

TEST_CASE("adamw: non-finite gradient aborts the step naming the parameter") {
  Parameter<double> good(TensorD::from({1}, {1.0}), "net.good");
  Parameter<double> bad(TensorD::from({1}, {2.0}), "net.bad");
  good.tensor.grad_buffer()[0] = 0.5;
  bad.tensor.grad_buffer()[0] = std::numeric_limits<double>::infinity();
  AdamW<double> opt(0.9, 0.999, 1e-8, 0.1);
  CHECK_THROWS_WITH_AS(opt.step({&good, &bad}, 1e-3), doctest::Contains("net.bad"), NumericError);
  CHECK(good.tensor.data()[0] == 1.0);  // nothing was touched
  CHECK(bad.tensor.data()[0] == 2.0);
}

TEST_CASE("training smoke: one epoch, loadable checkpoint, exact lr schedule") {
  TempDir tmp("smoke");
  auto model = BuildFormer<float>::init(micro_config(), 5);
  auto data = synth_dataset(21, 4, 32);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.seed = 5;
  TrainResult result = train(model, data, nullptr, cfg, tmp.path.string());
  CHECK(result.epochs_run == 1);
  CHECK(result.log_lines.size() == 2);
  CHECK_FALSE(result.aborted_non_finite);

  Checkpoint ckpt = load_checkpoint(result.checkpoint_path);
  CHECK(ckpt.epoch == 1);
  auto restored = model_from_checkpoint<float>(ckpt);
  CHECK(restored.parameter_count() == model.parameter_count());

  // logged lr values reproduce cosine_lr exactly
  for (std::size_t i = 0; i < result.log_lines.size(); ++i) {
    std::istringstream is(result.log_lines[i]);
    std::string field;
    std::getline(is, field, ',');  // epoch
    std::getline(is, field, ',');  // step
    const std::int64_t step = std::stoll(field);
    std::getline(is, field, ',');  // lr
    const double lr = std::stod(field);
    CHECK(lr == cosine_lr(step, 2, cfg.base_lr, cfg.min_lr));
  }
}

TEST_CASE("training is bit-deterministic for a fixed seed") {
  auto run = [] {
    auto model = BuildFormer<float>::init(micro_config(), 9);
    auto data = synth_dataset(33, 4, 32);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.seed = 9;
    TrainResult r = train(model, data, nullptr, cfg);
    std::vector<float> weights;
    for (auto* p : model.registry().params)
      weights.insert(weights.end(), p->tensor.vec().begin(), p->tensor.vec().end());
    return std::make_pair(r.log_lines, weights);
  };
  auto [log1, w1] = run();
  auto [log2, w2] = run();
  CHECK(log1 == log2);
  CHECK(w1 == w2);
}

TEST_CASE("non-finite loss aborts and keeps the last good checkpoint") {
  TempDir tmp("nan");
  auto model = BuildFormer<float>::init(micro_config(), 7);
  auto data = synth_dataset(11, 2, 32);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.seed = 7;
  // poison one weight so the first forward already produces a non-finite loss
  model.registry().params[0]->tensor.data()[0] = std::numeric_limits<float>::quiet_NaN();
  TrainResult result = train(model, data, nullptr, cfg, tmp.path.string());
  CHECK(result.aborted_non_finite);
  CHECK(result.log_lines.empty());
  Checkpoint ckpt = load_checkpoint(result.checkpoint_path);
  CHECK(ckpt.epoch == 0);  // the pre-training snapshot survived
}

TEST_CASE("evaluate: perfect oracle scores 1.0 on every metric") {
  auto data = synth_dataset(41, 3, 32);
  // stash (padded image bytes -> padded mask) so the "model" can look up the
  // ground truth for whatever image evaluate() hands it
  std::vector<std::pair<std::vector<float>, TensorF>> lookup;
  for (const auto& raw : data) {
    SegSample padded = pad_to_multiple(raw, 32);
    TensorF logits = TensorF::zeros({1, 1, padded.height(), padded.width()});
    for (std::int64_t i = 0; i < logits.numel(); ++i)
      logits.data()[i] = padded.mask.data()[i] > 0.5f ? 50.0f : -50.0f;
    lookup.emplace_back(padded.image.vec(), logits);
  }
  auto oracle = [&](const TensorF& img) -> TensorF {
    for (const auto& [bytes, logits] : lookup)
      if (bytes == img.vec()) return logits;
    throw std::runtime_error("unexpected image");
  };
  MetricReport r = evaluate(oracle, data, false);
  CHECK(r.iou == 1.0);
  CHECK(r.precision == 1.0);
  CHECK(r.recall == 1.0);
  CHECK(r.f1 == 1.0);
}

TEST_CASE("evaluation is deterministic and TTA stays bounded") {
  auto model = BuildFormer<float>::init(micro_config(), 13);
  auto data = synth_dataset(51, 3, 32);
  MetricReport a = evaluate_model(model, data, false);
  MetricReport b = evaluate_model(model, data, false);
  CHECK(a.iou == b.iou);
  CHECK(a.f1 == b.f1);

  MetricReport tta = evaluate_model(model, data, true);
  for (double m : {tta.iou, tta.precision, tta.recall, tta.f1}) {
    CHECK(m >= 0.0);
    CHECK(m <= 1.0);
  }
}

TEST_CASE("fine-tune flow: checkpoint resume with optimizer state") {
  auto model = BuildFormer<float>::init(micro_config(), 17);
  auto data = synth_dataset(61, 4, 32);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.seed = 17;
  train(model, data, nullptr, cfg);
  MetricReport before = evaluate_model(model, data, false);

  Checkpoint ckpt = snapshot_model(model, 2);
  auto resumed = model_from_checkpoint<float>(ckpt);
  MetricReport restored = evaluate_model(resumed, data, false);
  CHECK(restored.iou == before.iou);

  TrainConfig fine = cfg;
  fine.base_lr = 5e-4;
  fine.epochs = 1;
  TrainResult r = train(resumed, data, nullptr, fine);
  CHECK(r.epochs_run == 1);
  CHECK_FALSE(r.aborted_non_finite);
}
