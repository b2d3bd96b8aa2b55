#pragma once

#include <string>
#include <vector>

#include "winlin/attention.hpp"
#include "winlin/gradcheck.hpp"
#include "winlin/loss.hpp"
#include "winlin/model.hpp"
#include "winlin/nn_ops.hpp"

namespace winlin {

struct GradcheckEntry {
  std::string op;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

// Every differentiable op at float64, worst case over `seeds` draws, with the
// tighter tolerance for linear ops. The same suite backs the CLI subcommand
// and the acceptance run.
inline std::vector<GradcheckEntry> run_gradcheck_suite(int seeds = 5) {
  std::vector<GradcheckEntry> entries;
  auto record = [&](const std::string& op, double tol, auto&& runner) {
    GradcheckEntry e;
    e.op = op;
    e.tolerance = tol;
    for (int seed = 0; seed < seeds; ++seed)
      e.max_rel_error = std::max(e.max_rel_error, runner(seed));
    e.pass = e.max_rel_error < tol;
    entries.push_back(e);
  };

  record("matmul", 1e-8, [](int seed) {
    Rng rng(1200 + seed);
    TensorD a = TensorD::randn({4, 3}, rng);
    TensorD b = TensorD::randn({3, 2}, rng);
    return gradcheck([&] { return matmul(a, b); }, {a, b}).max_rel_error;
  });
  record("conv2d", 1e-7, [](int seed) {
    Rng rng(1300 + seed);
    TensorD x = TensorD::randn({2, 4, 5, 5}, rng);
    TensorD w = TensorD::randn({6, 2, 3, 3}, rng);
    TensorD b = TensorD::randn({6}, rng);
    return gradcheck([&] { return conv2d(x, w, b, 2, 1, 2); }, {x, w, b}).max_rel_error;
  });
  record("conv2d.depthwise", 1e-7, [](int seed) {
    Rng rng(1350 + seed);
    TensorD x = TensorD::randn({1, 3, 4, 4}, rng);
    TensorD w = TensorD::randn({3, 1, 3, 3}, rng);
    return gradcheck([&] { return conv2d(x, w, 1, 1, 3); }, {x, w}).max_rel_error;
  });
  record("batchnorm2d.train", 1e-4, [](int seed) {
    Rng rng(1400 + seed);
    TensorD x = TensorD::randn({2, 3, 3, 3}, rng);
    TensorD g = TensorD::randn({3}, rng);
    TensorD b = TensorD::randn({3}, rng);
    return gradcheck(
               [&] {
                 BnState<double> st(3);
                 return batchnorm2d(x, g, b, st, true);
               },
               {x, g, b})
        .max_rel_error;
  });
  record("batchnorm2d.eval", 1e-4, [](int seed) {
    Rng rng(1450 + seed);
    TensorD x = TensorD::randn({2, 3, 3, 3}, rng);
    TensorD g = TensorD::randn({3}, rng);
    TensorD b = TensorD::randn({3}, rng);
    BnState<double> st(3);
    for (int c = 0; c < 3; ++c) {
      st.running_mean[c] = 0.1 * c - 0.1;
      st.running_var[c] = 0.8 + 0.3 * c;
    }
    return gradcheck([&] { return batchnorm2d(x, g, b, st, false); }, {x, g, b}).max_rel_error;
  });
  record("relu6", 1e-7, [](int seed) {
    Rng rng(1500 + seed);
    TensorD x = TensorD::zeros({3, 7});
    for (auto& v : x.vec()) {
      do {
        v = rng.normal(2.0, 3.0);
      } while (std::abs(v) < 1e-3 || std::abs(v - 6.0) < 1e-3);
    }
    return gradcheck([&] { return relu6(x); }, {x}).max_rel_error;
  });
  record("softmax_rows", 1e-4, [](int seed) {
    Rng rng(1600 + seed);
    TensorD x = TensorD::randn({4, 6}, rng);
    return gradcheck([&] { return softmax_rows(x); }, {x}).max_rel_error;
  });
  record("l2_normalize_rows", 1e-4, [](int seed) {
    Rng rng(1700 + seed);
    TensorD x = TensorD::randn({5, 4}, rng);
    return gradcheck([&] { return l2_normalize_rows(x); }, {x}).max_rel_error;
  });
  record("upsample_bilinear", 1e-7, [](int seed) {
    Rng rng(1800 + seed);
    TensorD x = TensorD::randn({1, 2, 3, 4}, rng);
    return gradcheck([&] { return upsample_bilinear(x, 2); }, {x}).max_rel_error;
  });
  record("elementwise.add_mul_sigmoid_clamp_abs", 1e-4, [](int seed) {
    Rng rng(1850 + seed);
    TensorD a = TensorD::randn({3, 5}, rng);
    TensorD b = TensorD::randn({3, 5}, rng);
    return gradcheck(
               [&] {
                 return mul_scalar(abs_val(clamp(mul(sigmoid(add(a, b)), a), -0.5, 0.5)), 1.5);
               },
               {a, b})
        .max_rel_error;
  });
  record("concat_reshape_sum", 1e-7, [](int seed) {
    Rng rng(1870 + seed);
    TensorD a = TensorD::randn({1, 2, 3, 3}, rng);
    TensorD b = TensorD::randn({1, 3, 3, 3}, rng);
    return gradcheck([&] { return reshape(concat_channels(a, b), {5, 9}); }, {a, b})
        .max_rel_error;
  });
  record("window_partition_reverse", 1e-7, [](int seed) {
    Rng rng(1900 + seed);
    TensorD x = TensorD::randn({2, 3, 5, 7}, rng);
    return gradcheck(
               [&] {
                 auto [tokens, layout] = window_partition(x, 4);
                 return window_reverse(tokens, layout, 2);
               },
               {x})
        .max_rel_error;
  });
  record("window_attention.linear", 1e-4, [](int seed) {
    Rng rng(2000 + seed);
    TensorD q = TensorD::randn({8, 6}, rng);
    TensorD k = TensorD::randn({8, 6}, rng);
    TensorD v = TensorD::randn({8, 6}, rng);
    return gradcheck(
               [&] { return window_attention(q, k, v, 2, 4, 2, AttentionKind::linear); },
               {q, k, v})
        .max_rel_error;
  });
  record("window_attention.exact", 1e-4, [](int seed) {
    Rng rng(2100 + seed);
    TensorD q = TensorD::randn({8, 6}, rng);
    TensorD k = TensorD::randn({8, 6}, rng);
    TensorD v = TensorD::randn({8, 6}, rng);
    return gradcheck(
               [&] { return window_attention(q, k, v, 2, 4, 2, AttentionKind::exact, 2.0); },
               {q, k, v})
        .max_rel_error;
  });
  record("w_lmhsa", 1e-4, [](int seed) {
    Rng rng(2200 + seed);
    TensorD x = TensorD::randn({1, 8, 6, 6}, rng);
    auto p = AttentionParams<double>::init(8, 2, rng, "attn");
    return gradcheck([&] { return w_lmhsa(x, p, 4); },
                     {x, p.wq.tensor, p.wk.tensor, p.wv.tensor, p.wo.tensor})
        .max_rel_error;
  });
  record("buildformer_block", 1e-4, [](int seed) {
    Rng rng(2300 + seed);
    auto block = BuildFormerBlock<double>::init(4, 2, 2, 2.0, rng, "block");
    TensorD x = TensorD::randn({1, 4, 4, 4}, rng);
    ParamRegistry<double> reg;
    block.collect(reg);
    std::vector<TensorD> leaves{x};
    for (auto* p : reg.params) leaves.push_back(p->tensor);
    return gradcheck([&] { return block.forward(x, true); }, leaves).max_rel_error;
  });
  record("joint_loss", 1e-4, [](int seed) {
    Rng rng(2400 + seed);
    TensorD logits = TensorD::randn({1, 1, 6, 6}, rng);
    TensorD target = TensorD::zeros({1, 1, 6, 6});
    for (auto& v : target.vec()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
    TensorD valid = TensorD::full({1, 1, 6, 6}, 1.0);
    return gradcheck([&] { return joint_loss(logits, target, valid).total; }, {logits})
        .max_rel_error;
  });
  record("buildformer.full", 1e-3, [](int seed) {
    ModelConfig cfg;
    cfg.stage_channels = {8, 16, 32, 64};
    cfg.stage_depths = {1, 1, 1, 1};
    cfg.window_side = 4;
    cfg.mlp_ratio = 2.0;
    cfg.scp_channels = {4, 4, 8, 8, 8, 8};
    cfg.scp_strides = {2, 2, 1, 1, 1, 1};
    cfg.fpn_dim = 16;
    cfg.head_hidden = 8;
    auto model = BuildFormer<double>::init(cfg, 100 + seed);
    Rng rng(2500 + seed);
    TensorD img = TensorD::randn({1, 3, 32, 32}, rng, 0.4);
    auto registry = model.registry();
    Rng jitter(2600 + seed);
    for (auto* p : registry.params)
      for (auto& v : p->tensor.vec()) v += jitter.normal(0.0, 0.02);
    std::vector<TensorD> leaves;
    std::vector<std::vector<std::int64_t>> elements;
    Rng sampler(2700 + seed);
    for (auto* p : registry.params) {
      leaves.push_back(p->tensor);
      const std::int64_t want = std::max<std::int64_t>(1, p->tensor.numel() / 100);
      std::vector<std::int64_t> idx;
      for (std::int64_t j = 0; j < want; ++j)
        idx.push_back(sampler.uniform_int(0, p->tensor.numel() - 1));
      elements.push_back(std::move(idx));
    }
    return gradcheck_sampled([&] { return model.forward(img); }, leaves, elements).max_rel_error;
  });

  return entries;
}

}  // namespace winlin
