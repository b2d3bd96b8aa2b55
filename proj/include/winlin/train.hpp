#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "winlin/checkpoint.hpp"
#include "winlin/data.hpp"
#include "winlin/loss.hpp"
#include "winlin/metrics.hpp"
#include "winlin/model.hpp"

namespace winlin {

struct TrainConfig {
  double base_lr = 1e-3;
  double min_lr = 1e-6;
  std::int64_t epochs = 105;
  std::int64_t batch_size = 8;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::int64_t crop_size = 0;   // 0: use the padded sample as-is
  std::int64_t eval_every = 0;  // epochs between val evaluations; 0: only at the end
  double flip_prob = 0.5;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  double target_train_iou = 0.0;  // early stop once reached (0 disables)

  void validate() const {
    if (!(min_lr > 0.0 && min_lr <= base_lr))
      throw ConfigError("train: need 0 < min_lr <= base_lr, got min_lr=" +
                        std::to_string(min_lr) + " base_lr=" + std::to_string(base_lr));
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (flip_prob < 0.0 || flip_prob > 1.0)
      throw ConfigError("train.flip_prob must lie in [0,1]");
  }
};

inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double base, double min) {
  check_shape(step >= 0 && step <= total_steps, "cosine_lr: step out of range");
  if (total_steps == 0) return base;
  return min + 0.5 * (base - min) *
                   (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) /
                                   static_cast<double>(total_steps)));
}

// Decoupled weight decay plus bias-corrected moment update. The step aborts
// before touching any parameter if a gradient is non-finite.
template <typename T>
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  std::int64_t step_count() const { return t_; }

  void step(const std::vector<Parameter<T>*>& params, double lr) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(static_cast<std::size_t>(params[i]->tensor.numel()), T(0));
        v_[i].assign(static_cast<std::size_t>(params[i]->tensor.numel()), T(0));
      }
    }
    for (const auto* p : params) {
      if (!p->tensor.has_grad()) continue;
      for (const T g : p->tensor.grad())
        if (!std::isfinite(static_cast<double>(g)))
          throw NumericError("adamw: non-finite gradient in parameter '" + p->name +
                             "', step aborted");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter<T>& p = *params[i];
      const std::int64_t n = p.tensor.numel();
      T* w = p.tensor.data();
      if (weight_decay_ != 0.0)
        for (std::int64_t j = 0; j < n; ++j)
          w[j] -= static_cast<T>(lr * weight_decay_) * w[j];
      if (!p.tensor.has_grad()) continue;
      const T* g = p.tensor.grad().data();
      T* m = m_[i].data();
      T* v = v_[i].data();
      for (std::int64_t j = 0; j < n; ++j) {
        m[j] = static_cast<T>(beta1_) * m[j] + static_cast<T>(1.0 - beta1_) * g[j];
        v[j] = static_cast<T>(beta2_) * v[j] + static_cast<T>(1.0 - beta2_) * g[j] * g[j];
        const double mhat = static_cast<double>(m[j]) / bc1;
        const double vhat = static_cast<double>(v[j]) / bc2;
        w[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  // Optimizer state for checkpointing.
  void export_state(const std::vector<Parameter<T>*>& params, Checkpoint& ckpt) const {
    if (m_.empty()) return;
    ckpt.has_optimizer = true;
    ckpt.optimizer_step = t_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto to_f32 = [](const std::vector<T>& src) {
        std::vector<float> dst(src.size());
        for (std::size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<float>(src[j]);
        return dst;
      };
      ckpt.tensors.emplace("opt.m." + params[i]->name,
                           std::make_pair(params[i]->tensor.shape(), to_f32(m_[i])));
      ckpt.tensors.emplace("opt.v." + params[i]->name,
                           std::make_pair(params[i]->tensor.shape(), to_f32(v_[i])));
    }
  }

  void import_state(const std::vector<Parameter<T>*>& params, const Checkpoint& ckpt) {
    if (!ckpt.has_optimizer) return;
    t_ = ckpt.optimizer_step;
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto fetch = [&](const std::string& prefix, std::vector<T>& dst) {
        auto it = ckpt.tensors.find(prefix + params[i]->name);
        if (it == ckpt.tensors.end())
          throw IoError("checkpoint: missing optimizer slot '" + prefix + params[i]->name + "'");
        dst.resize(it->second.second.size());
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(it->second.second[j]);
      };
      fetch("opt.m.", m_[i]);
      fetch("opt.v.", v_[i]);
    }
  }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::int64_t t_ = 0;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
};

struct TrainResult {
  std::vector<std::string> log_lines;  // epoch,step,lr,loss_total,loss_ce,loss_dice,loss_boundary
  std::vector<double> epoch_mean_loss;
  std::vector<std::pair<std::int64_t, MetricReport>> val_history;  // epoch -> report
  bool aborted_non_finite = false;
  std::int64_t epochs_run = 0;
  std::string checkpoint_path;
  std::string log_path;
};

namespace detail {

inline std::string format_log_line(std::int64_t epoch, std::int64_t step, double lr, double total,
                                   double ce, double dice, double boundary) {
  // 17 significant digits: doubles survive the text round trip exactly
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%lld,%.17g,%.17g,%.17g,%.17g,%.17g",
                static_cast<long long>(epoch), static_cast<long long>(step), lr, total, ce, dice,
                boundary);
  return buf;
}

// Stacks padded/cropped/flipped samples into batch tensors.
struct Batch {
  TensorF images;
  TensorF masks;
  TensorF valid;
};

inline Batch assemble_batch(const std::vector<SegSample>& dataset,
                            const std::vector<std::int64_t>& indices, std::int64_t first,
                            std::int64_t count, const TrainConfig& cfg, std::int64_t epoch) {
  std::vector<SegSample> prepared;
  prepared.reserve(count);
  for (std::int64_t k = 0; k < count; ++k) {
    const std::int64_t idx = indices[first + k];
    SegSample s = pad_to_multiple(dataset[static_cast<std::size_t>(idx)], 32);
    if (cfg.crop_size > 0) {
      Rng crop_rng = Rng::stream(cfg.seed, 0xC407ull, static_cast<std::uint64_t>(epoch),
                                 static_cast<std::uint64_t>(first + k));
      s = random_crop(s, cfg.crop_size, crop_rng);
    }
    Rng flip_rng = Rng::stream(cfg.seed, 0xF11Bull, static_cast<std::uint64_t>(epoch),
                               static_cast<std::uint64_t>(first + k));
    s = flip_augment(s, flip_rng, cfg.flip_prob);
    prepared.push_back(std::move(s));
  }
  const std::int64_t H = prepared[0].height(), W = prepared[0].width();
  for (const auto& s : prepared)
    check_shape(s.height() == H && s.width() == W,
                "train: samples in a batch must share dimensions (use crop_size)");
  Batch b;
  b.images = TensorF::zeros({count, 3, H, W});
  b.masks = TensorF::zeros({count, 1, H, W});
  b.valid = TensorF::zeros({count, 1, H, W});
  for (std::int64_t k = 0; k < count; ++k) {
    std::copy(prepared[k].image.vec().begin(), prepared[k].image.vec().end(),
              b.images.data() + k * 3 * H * W);
    std::copy(prepared[k].mask.vec().begin(), prepared[k].mask.vec().end(),
              b.masks.data() + k * H * W);
    std::copy(prepared[k].valid.vec().begin(), prepared[k].valid.vec().end(),
              b.valid.data() + k * H * W);
  }
  return b;
}

}  // namespace detail

// Pads each sample, runs the forward (optionally TTA-symmetrized), pools the
// confusion counts over valid pixels.
inline MetricReport evaluate(const std::function<TensorF(const TensorF&)>& forward,
                             const std::vector<SegSample>& samples, bool use_tta,
                             float threshold = 0.5f) {
  NoGradGuard no_grad;
  ConfusionCounts pooled;
  for (const auto& raw : samples) {
    SegSample s = pad_to_multiple(raw, 32);
    const std::int64_t H = s.height(), W = s.width();
    TensorF img = reshape(s.image, {1, 3, H, W});
    TensorF probs = use_tta ? tta_predict<float>(forward, img) : sigmoid(forward(img));
    TensorF mask = reshape(s.mask, {1, 1, H, W});
    TensorF valid = reshape(s.valid, {1, 1, H, W});
    pooled += confusion_counts(probs, mask, valid, threshold);
  }
  return metrics_from_counts(pooled);
}

inline MetricReport evaluate_model(BuildFormer<float>& model, const std::vector<SegSample>& samples,
                                   bool use_tta, float threshold = 0.5f) {
  const bool was_training = model.training();
  model.set_training(false);
  MetricReport r = evaluate([&](const TensorF& img) { return model.forward(img); }, samples,
                            use_tta, threshold);
  model.set_training(was_training);
  return r;
}

// Deterministic training loop: per step, assemble -> forward -> joint loss ->
// backward -> AdamW with the cosine schedule. Writes the CSV log and
// checkpoints under out_dir when given.
inline TrainResult train(BuildFormer<float>& model, const std::vector<SegSample>& train_set,
                         const std::vector<SegSample>* val_set, const TrainConfig& cfg,
                         const std::string& out_dir = "") {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("train: dataset is empty");
  namespace fs = std::filesystem;
  if (!out_dir.empty()) fs::create_directories(out_dir);

  TrainResult result;
  auto registry = model.registry();
  AdamW<float> opt(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  const std::int64_t n = static_cast<std::int64_t>(train_set.size());
  const std::int64_t steps_per_epoch = ceil_div(n, cfg.batch_size);
  const std::int64_t total_steps = cfg.epochs * steps_per_epoch;

  Checkpoint last_good = snapshot_model(model, 0);
  auto flush_outputs = [&](const Checkpoint& ckpt) {
    if (out_dir.empty()) return;
    result.checkpoint_path = (fs::path(out_dir) / "checkpoint_last.bfck").string();
    save_checkpoint(result.checkpoint_path, ckpt);
    result.log_path = (fs::path(out_dir) / "train_log.csv").string();
    std::ofstream log(result.log_path);
    log << "epoch,step,lr,loss_total,loss_ce,loss_dice,loss_boundary\n";
    for (const auto& line : result.log_lines) log << line << '\n';
  };

  std::int64_t global_step = 0;
  model.set_training(true);
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::int64_t> order(n);
    for (std::int64_t i = 0; i < n; ++i) order[i] = i;
    Rng shuffle_rng = Rng::stream(cfg.seed, 0x0DDEull, static_cast<std::uint64_t>(epoch));
    for (std::int64_t i = n - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.uniform_int(0, i)]);

    double epoch_loss = 0.0;
    std::int64_t epoch_batches = 0;
    for (std::int64_t first = 0; first < n; first += cfg.batch_size) {
      const std::int64_t count = std::min(cfg.batch_size, n - first);
      detail::Batch batch = detail::assemble_batch(train_set, order, first, count, cfg, epoch);
      const double lr = cosine_lr(global_step, total_steps, cfg.base_lr, cfg.min_lr);

      model.zero_grad();
      TensorF logits = model.forward(batch.images);
      JointLoss<float> loss = joint_loss(logits, batch.masks, batch.valid);
      const double total = loss.total.item();
      if (!std::isfinite(total)) {
        result.aborted_non_finite = true;
        flush_outputs(last_good);
        return result;
      }
      loss.total.backward();
      if (cfg.grad_clip > 0.0) {
        double sq = 0.0;
        for (auto* p : registry.params)
          if (p->tensor.has_grad())
            for (const float g : p->tensor.grad()) sq += static_cast<double>(g) * g;
        const double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip) {
          const float scale = static_cast<float>(cfg.grad_clip / norm);
          for (auto* p : registry.params)
            if (p->tensor.has_grad())
              for (auto& g : p->tensor.grad_buffer()) g *= scale;
        }
      }
      opt.step(registry.params, lr);

      result.log_lines.push_back(detail::format_log_line(
          epoch, global_step, lr, total, loss.ce.item(), loss.dice.item(), loss.boundary.item()));
      epoch_loss += total;
      ++epoch_batches;
      ++global_step;
    }
    result.epoch_mean_loss.push_back(epoch_loss / static_cast<double>(epoch_batches));
    result.epochs_run = epoch + 1;

    last_good = snapshot_model(model, epoch + 1);
    opt.export_state(registry.params, last_good);
    last_good.seed = cfg.seed;

    bool stop = false;
    const bool eval_now = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
    if (eval_now && val_set) {
      result.val_history.emplace_back(epoch + 1, evaluate_model(model, *val_set, false));
      model.set_training(true);
    }
    if (cfg.target_train_iou > 0.0 && (eval_now || cfg.eval_every == 0)) {
      MetricReport train_report = evaluate_model(model, train_set, false);
      model.set_training(true);
      if (train_report.iou >= cfg.target_train_iou) stop = true;
    }
    if (eval_now && !out_dir.empty()) flush_outputs(last_good);
    if (stop) break;
  }

  flush_outputs(last_good);
  return result;
}

}  // namespace winlin
