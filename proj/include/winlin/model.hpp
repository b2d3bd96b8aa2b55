#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "winlin/attention.hpp"
#include "winlin/nn_ops.hpp"
#include "winlin/ops.hpp"
#include "winlin/rng.hpp"
#include "winlin/tensor.hpp"

namespace winlin {

// Architecture hyperparameters. The paper pins the embedding width (96),
// channel doubling, the overall 1/32 downsampling and the 384-channel fusion
// width; stage depths and the SCP schedule are open and configurable.
struct ModelConfig {
  std::array<std::int64_t, 4> stage_channels{96, 192, 384, 768};
  std::array<std::int64_t, 4> stage_depths{1, 1, 2, 1};
  std::int64_t window_side = 16;
  double mlp_ratio = 4.0;
  std::array<std::int64_t, 6> scp_channels{64, 64, 128, 128, 128, 128};
  std::array<std::int64_t, 6> scp_strides{2, 2, 1, 1, 1, 1};
  std::int64_t fpn_dim = 384;
  std::int64_t head_hidden = 256;

  std::int64_t heads_for(std::int64_t channels) const {
    return std::max<std::int64_t>(1, channels / 32);
  }

  std::int64_t scp_out_channels() const { return scp_channels[5]; }

  static ModelConfig toy() { return ModelConfig{}; }

  static ModelConfig paper_scale() {
    ModelConfig c;
    c.stage_depths = {2, 2, 6, 2};
    return c;
  }

  // Invariants for user-supplied configs. Test fixtures may build smaller
  // unchecked configs directly.
  void validate() const {
    if (stage_channels[0] != 96)
      throw ConfigError("model.stage_channels must start at 96, got " +
                        std::to_string(stage_channels[0]));
    for (int i = 1; i < 4; ++i)
      if (stage_channels[i] != 2 * stage_channels[i - 1])
        throw ConfigError("model.stage_channels must double across stages");
    for (auto d : stage_depths)
      if (d < 1) throw ConfigError("model.stage_depths entries must be >= 1");
    if (window_side < 1) throw ConfigError("model.window_side must be >= 1");
    if (mlp_ratio <= 0) throw ConfigError("model.mlp_ratio must be positive");
    std::int64_t stride_product = 1;
    for (auto s : scp_strides) {
      if (s < 1) throw ConfigError("model.scp_strides entries must be >= 1");
      stride_product *= s;
    }
    if (stride_product != 4)
      throw ConfigError("model.scp_strides must multiply to 4 (output at 1/4), got " +
                        std::to_string(stride_product));
    for (auto c : scp_channels)
      if (c < 1) throw ConfigError("model.scp_channels entries must be >= 1");
    if (fpn_dim < 1 || head_hidden < 1)
      throw ConfigError("model.fpn_dim and model.head_hidden must be >= 1");
  }
};

template <typename T>
struct ParamRegistry {
  std::vector<Parameter<T>*> params;
  std::vector<std::pair<std::string, std::vector<T>*>> buffers;  // BN running stats

  void add(Parameter<T>& p) { params.push_back(&p); }
  void add_buffer(std::string name, std::vector<T>& b) { buffers.emplace_back(std::move(name), &b); }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto* p : params) n += p->tensor.numel();
    return n;
  }
};

template <typename T>
struct Conv2dLayer {
  Parameter<T> weight;
  Parameter<T> bias;  // tensor undefined when the layer is bias-free
  std::int64_t stride = 1;
  std::int64_t pad = 0;
  std::int64_t groups = 1;

  static Conv2dLayer init(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride,
                          std::int64_t pad, std::int64_t groups, bool with_bias, Rng& rng,
                          const std::string& name) {
    Conv2dLayer l;
    l.stride = stride;
    l.pad = pad;
    l.groups = groups;
    const std::int64_t fan_in = (in / groups) * k * k;
    const T std_ = std::sqrt(T(2) / static_cast<T>(fan_in));
    l.weight = Parameter<T>(Tensor<T>::randn({out, in / groups, k, k}, rng, std_), name + ".w");
    if (with_bias) l.bias = Parameter<T>(Tensor<T>::zeros({out}), name + ".b");
    return l;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return bias.tensor.defined() ? conv2d(x, weight.tensor, bias.tensor, stride, pad, groups)
                                 : conv2d(x, weight.tensor, stride, pad, groups);
  }

  void collect(ParamRegistry<T>& r) {
    r.add(weight);
    if (bias.tensor.defined()) r.add(bias);
  }
};

template <typename T>
struct BatchNormLayer {
  Parameter<T> gamma;
  Parameter<T> beta;
  BnState<T> state;
  std::string name;

  static BatchNormLayer init(std::int64_t channels, const std::string& name) {
    BatchNormLayer l;
    l.gamma = Parameter<T>(Tensor<T>::full({channels}, T(1)), name + ".gamma");
    l.beta = Parameter<T>(Tensor<T>::zeros({channels}), name + ".beta");
    l.state = BnState<T>(channels);
    l.name = name;
    return l;
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return batchnorm2d(x, gamma.tensor, beta.tensor, state, training);
  }

  void collect(ParamRegistry<T>& r) {
    r.add(gamma);
    r.add(beta);
    r.add_buffer(name + ".running_mean", state.running_mean);
    r.add_buffer(name + ".running_var", state.running_var);
  }
};

// Convolution -> BatchNorm -> ReLU6.
template <typename T>
struct CbrBlock {
  Conv2dLayer<T> conv;
  BatchNormLayer<T> bn;

  static CbrBlock init(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride,
                       std::int64_t pad, Rng& rng, const std::string& name) {
    CbrBlock b;
    b.conv = Conv2dLayer<T>::init(in, out, k, stride, pad, 1, false, rng, name + ".conv");
    b.bn = BatchNormLayer<T>::init(out, name + ".bn");
    return b;
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return relu6(bn.forward(conv.forward(x), training));
  }

  void collect(ParamRegistry<T>& r) {
    conv.collect(r);
    bn.collect(r);
  }
};

// Two stride-2 CBR layers to 1/4 resolution, then a depthwise residual that
// injects relative position information.
template <typename T>
struct PatchEmbed {
  CbrBlock<T> cbr1;
  CbrBlock<T> cbr2;
  Conv2dLayer<T> dw;

  static PatchEmbed init(std::int64_t in, std::int64_t out, Rng& rng, const std::string& name) {
    PatchEmbed e;
    const std::int64_t mid = std::max<std::int64_t>(1, out / 2);
    e.cbr1 = CbrBlock<T>::init(in, mid, 3, 2, 1, rng, name + ".cbr1");
    e.cbr2 = CbrBlock<T>::init(mid, out, 3, 2, 1, rng, name + ".cbr2");
    e.dw = Conv2dLayer<T>::init(out, out, 3, 1, 1, out, false, rng, name + ".dw");
    return e;
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    check_shape(x.dim(2) % 4 == 0 && x.dim(3) % 4 == 0,
                "patch_embed: input spatial dims must divide by 4, got " + shape_str(x.shape()));
    Tensor<T> y = cbr2.forward(cbr1.forward(x, training), training);
    return add(y, dw.forward(y));
  }

  void collect(ParamRegistry<T>& r) {
    cbr1.collect(r);
    cbr2.collect(r);
    dw.collect(r);
  }
};

// BN -> 2x2 stride-2 conv doubling channels -> depthwise residual.
template <typename T>
struct PatchMerge {
  BatchNormLayer<T> bn;
  Conv2dLayer<T> conv;
  Conv2dLayer<T> dw;

  static PatchMerge init(std::int64_t in, Rng& rng, const std::string& name) {
    PatchMerge m;
    m.bn = BatchNormLayer<T>::init(in, name + ".bn");
    m.conv = Conv2dLayer<T>::init(in, 2 * in, 2, 2, 0, 1, true, rng, name + ".conv");
    m.dw = Conv2dLayer<T>::init(2 * in, 2 * in, 3, 1, 1, 2 * in, false, rng, name + ".dw");
    return m;
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    check_shape(x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0,
                "patch_merge: spatial dims must be even, got " + shape_str(x.shape()));
    Tensor<T> y = conv.forward(bn.forward(x, training));
    return add(y, dw.forward(y));
  }

  void collect(ParamRegistry<T>& r) {
    bn.collect(r);
    conv.collect(r);
    dw.collect(r);
  }
};

// 1x1 expand -> 3x3 depthwise over the full (un-windowed) map -> ReLU6 ->
// 1x1 project. The depthwise tap spans window borders, which is what carries
// information across windows.
template <typename T>
struct CMlp {
  Conv2dLayer<T> pw1;
  Conv2dLayer<T> dw;
  Conv2dLayer<T> pw2;

  static CMlp init(std::int64_t channels, double ratio, Rng& rng, const std::string& name) {
    CMlp m;
    const std::int64_t hidden =
        std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(channels * ratio)));
    m.pw1 = Conv2dLayer<T>::init(channels, hidden, 1, 1, 0, 1, true, rng, name + ".pw1");
    m.dw = Conv2dLayer<T>::init(hidden, hidden, 3, 1, 1, hidden, false, rng, name + ".dw");
    m.pw2 = Conv2dLayer<T>::init(hidden, channels, 1, 1, 0, 1, true, rng, name + ".pw2");
    return m;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return pw2.forward(relu6(dw.forward(pw1.forward(x))));
  }

  void collect(ParamRegistry<T>& r) {
    pw1.collect(r);
    dw.collect(r);
    pw2.collect(r);
  }
};

// y = x + W-LMHSA(BN(x)); z = y + C-MLP(BN(y))
template <typename T>
struct BuildFormerBlock {
  BatchNormLayer<T> bn1;
  BatchNormLayer<T> bn2;
  AttentionParams<T> attn;
  CMlp<T> mlp;
  std::int64_t window_side = 16;

  static BuildFormerBlock init(std::int64_t channels, std::int64_t heads, std::int64_t window,
                               double mlp_ratio, Rng& rng, const std::string& name) {
    BuildFormerBlock b;
    b.bn1 = BatchNormLayer<T>::init(channels, name + ".bn1");
    b.bn2 = BatchNormLayer<T>::init(channels, name + ".bn2");
    b.attn = AttentionParams<T>::init(channels, heads, rng, name);
    b.mlp = CMlp<T>::init(channels, mlp_ratio, rng, name + ".mlp");
    b.window_side = window;
    return b;
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    Tensor<T> y = add(x, w_lmhsa(bn1.forward(x, training), attn, window_side));
    return add(y, mlp.forward(bn2.forward(y, training)));
  }

  void collect(ParamRegistry<T>& r) {
    bn1.collect(r);
    bn2.collect(r);
    r.add(attn.wq);
    r.add(attn.wk);
    r.add(attn.wv);
    r.add(attn.wo);
    mlp.collect(r);
  }
};

// Patch embedding plus four block stages with merges between them; emits the
// feature map after every stage (1/4, 1/8, 1/16, 1/32).
template <typename T>
struct GlobalContextPath {
  PatchEmbed<T> embed;
  std::vector<std::vector<BuildFormerBlock<T>>> stages;
  std::vector<PatchMerge<T>> merges;

  static GlobalContextPath init(const ModelConfig& cfg, Rng& rng, const std::string& name) {
    GlobalContextPath g;
    g.embed = PatchEmbed<T>::init(3, cfg.stage_channels[0], rng, name + ".embed");
    for (int s = 0; s < 4; ++s) {
      std::vector<BuildFormerBlock<T>> blocks;
      for (std::int64_t b = 0; b < cfg.stage_depths[s]; ++b)
        blocks.push_back(BuildFormerBlock<T>::init(
            cfg.stage_channels[s], cfg.heads_for(cfg.stage_channels[s]), cfg.window_side,
            cfg.mlp_ratio, rng,
            name + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b)));
      g.stages.push_back(std::move(blocks));
      if (s < 3)
        g.merges.push_back(
            PatchMerge<T>::init(cfg.stage_channels[s], rng, name + ".merge" + std::to_string(s + 1)));
    }
    return g;
  }

  std::array<Tensor<T>, 4> forward(const Tensor<T>& img, bool training) {
    std::array<Tensor<T>, 4> out;
    Tensor<T> x = embed.forward(img, training);
    for (int s = 0; s < 4; ++s) {
      for (auto& block : stages[s]) x = block.forward(x, training);
      out[s] = x;
      if (s < 3) x = merges[s].forward(x, training);
    }
    return out;
  }

  void collect(ParamRegistry<T>& r) {
    embed.collect(r);
    for (int s = 0; s < 4; ++s) {
      for (auto& block : stages[s]) block.collect(r);
      if (s < 3) merges[s].collect(r);
    }
  }
};

// Six CBR blocks ending at 1/4 resolution.
template <typename T>
struct SpatialContextPath {
  std::vector<CbrBlock<T>> blocks;

  static SpatialContextPath init(const ModelConfig& cfg, Rng& rng, const std::string& name) {
    std::int64_t stride_product = 1;
    for (auto s : cfg.scp_strides) stride_product *= s;
    if (stride_product != 4)
      throw ConfigError("scp: stride product must be 4, got " + std::to_string(stride_product));
    SpatialContextPath p;
    std::int64_t in = 3;
    for (int i = 0; i < 6; ++i) {
      p.blocks.push_back(CbrBlock<T>::init(in, cfg.scp_channels[i], 3, cfg.scp_strides[i], 1, rng,
                                           name + ".cbr" + std::to_string(i + 1)));
      in = cfg.scp_channels[i];
    }
    return p;
  }

  Tensor<T> forward(const Tensor<T>& img, bool training) {
    check_shape(img.dim(2) % 4 == 0 && img.dim(3) % 4 == 0,
                "scp: input spatial dims must divide by 4, got " + shape_str(img.shape()));
    Tensor<T> x = img;
    for (auto& b : blocks) x = b.forward(x, training);
    return x;
  }

  void collect(ParamRegistry<T>& r) {
    for (auto& b : blocks) b.collect(r);
  }
};

// FPN-style top-down fusion of the four GCP maps at fpn_dim channels, then
// concat with the SCP feature and one CBR to head_hidden.
template <typename T>
struct ContextAggregation {
  std::array<Conv2dLayer<T>, 4> lateral;
  std::array<CbrBlock<T>, 4> cbr;
  CbrBlock<T> fuse;

  static ContextAggregation init(const ModelConfig& cfg, Rng& rng, const std::string& name) {
    ContextAggregation a;
    for (int i = 0; i < 4; ++i) {
      a.lateral[i] = Conv2dLayer<T>::init(cfg.stage_channels[i], cfg.fpn_dim, 1, 1, 0, 1, true,
                                          rng, name + ".lateral" + std::to_string(i + 1));
      a.cbr[i] = CbrBlock<T>::init(cfg.fpn_dim, cfg.fpn_dim, 3, 1, 1, rng,
                                   name + ".cbr" + std::to_string(i + 1));
    }
    a.fuse = CbrBlock<T>::init(cfg.fpn_dim + cfg.scp_out_channels(), cfg.head_hidden, 3, 1, 1,
                               rng, name + ".fuse");
    return a;
  }

  Tensor<T> forward(const std::array<Tensor<T>, 4>& f, const Tensor<T>& fs, bool training) {
    for (int i = 0; i < 3; ++i)
      if (f[i].dim(2) != 2 * f[i + 1].dim(2) || f[i].dim(3) != 2 * f[i + 1].dim(3))
        throw ConfigError("context aggregation: feature " + std::to_string(i + 1) + " at " +
                          shape_str(f[i].shape()) + " is not twice the resolution of feature " +
                          std::to_string(i + 2) + " at " + shape_str(f[i + 1].shape()));
    if (fs.dim(2) != f[0].dim(2) || fs.dim(3) != f[0].dim(3))
      throw ConfigError("context aggregation: SCP feature " + shape_str(fs.shape()) +
                        " does not match the 1/4-resolution map " + shape_str(f[0].shape()));
    Tensor<T> t = cbr[3].forward(lateral[3].forward(f[3]), training);
    for (int i = 2; i >= 0; --i)
      t = cbr[i].forward(add(lateral[i].forward(f[i]), upsample_bilinear(t, 2)), training);
    return fuse.forward(concat_channels(t, fs), training);
  }

  void collect(ParamRegistry<T>& r) {
    for (int i = 0; i < 4; ++i) {
      lateral[i].collect(r);
      cbr[i].collect(r);
    }
    fuse.collect(r);
  }
};

template <typename T>
class BuildFormer {
 public:
  static BuildFormer init(const ModelConfig& cfg, std::uint64_t seed) {
    BuildFormer m;
    m.config_ = cfg;
    Rng rng = Rng::stream(seed, 0xb01dF08Eull);
    m.gcp_ = GlobalContextPath<T>::init(cfg, rng, "gcp");
    m.scp_ = SpatialContextPath<T>::init(cfg, rng, "scp");
    m.agg_ = ContextAggregation<T>::init(cfg, rng, "agg");
    m.head_ = Conv2dLayer<T>::init(cfg.head_hidden, 1, 1, 1, 0, 1, true, rng, "head");
    m.init_seed_ = seed;
    return m;
  }

  const ModelConfig& config() const { return config_; }
  std::uint64_t init_seed() const { return init_seed_; }

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  // Full-resolution logits.
  Tensor<T> forward(const Tensor<T>& img) {
    check_shape(img.ndim() == 4 && img.dim(1) == 3,
                "forward: expects [B,3,H,W] input, got " + shape_str(img.shape()));
    if (img.dim(2) % 32 != 0 || img.dim(3) % 32 != 0)
      throw ShapeError("forward: input " + shape_str(img.shape()) +
                       " must have H,W divisible by 32; pad first (pad_to_multiple)");
    auto features = gcp_.forward(img, training_);
    Tensor<T> fs = scp_.forward(img, training_);
    Tensor<T> fused = agg_.forward(features, fs, training_);
    return upsample_bilinear(head_.forward(fused), 4);
  }

  std::array<Tensor<T>, 4> gcp_forward(const Tensor<T>& img) {
    check_shape(img.dim(2) % 32 == 0 && img.dim(3) % 32 == 0,
                "gcp_forward: input H,W must divide by 32");
    return gcp_.forward(img, training_);
  }

  Tensor<T> scp_forward(const Tensor<T>& img) { return scp_.forward(img, training_); }

  Tensor<T> context_aggregate(const std::array<Tensor<T>, 4>& f, const Tensor<T>& fs) {
    return agg_.forward(f, fs, training_);
  }

  GlobalContextPath<T>& gcp() { return gcp_; }
  SpatialContextPath<T>& scp() { return scp_; }
  ContextAggregation<T>& agg() { return agg_; }
  Conv2dLayer<T>& head() { return head_; }

  ParamRegistry<T> registry() {
    ParamRegistry<T> r;
    gcp_.collect(r);
    scp_.collect(r);
    agg_.collect(r);
    head_.collect(r);
    return r;
  }

  std::int64_t parameter_count() { return registry().parameter_count(); }

  void zero_grad() {
    for (auto* p : registry().params) p->tensor.zero_grad();
  }

 private:
  ModelConfig config_;
  GlobalContextPath<T> gcp_;
  SpatialContextPath<T> scp_;
  ContextAggregation<T> agg_;
  Conv2dLayer<T> head_;
  bool training_ = true;
  std::uint64_t init_seed_ = 0;
};

}  // namespace winlin
