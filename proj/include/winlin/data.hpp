#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "winlin/common.hpp"
#include "winlin/metrics.hpp"
#include "winlin/netpbm.hpp"
#include "winlin/rng.hpp"
#include "winlin/tensor.hpp"

namespace winlin {

// One training/eval example. valid is 0 exactly on padded pixels; losses and
// metrics read it so padding content can never matter.
struct SegSample {
  TensorF image;  // [3,H,W], values in [0,1]
  TensorF mask;   // [1,H,W], values in {0,1}
  TensorF valid;  // [1,H,W], values in {0,1}
  std::string id;

  std::int64_t height() const { return image.dim(1); }
  std::int64_t width() const { return image.dim(2); }
};

struct DatasetManifest {
  std::string root;
  std::string split;
  std::vector<std::pair<std::string, std::string>> pairs;  // image path, mask path (absolute)
};

// Zero-pads right/bottom to the next multiple of m; valid marks the original
// extent.
inline SegSample pad_to_multiple(const SegSample& s, std::int64_t m = 32) {
  check_shape(m >= 1, "pad_to_multiple: m must be >= 1");
  const std::int64_t H = s.height(), W = s.width();
  const std::int64_t Hp = round_up(H, m), Wp = round_up(W, m);
  if (Hp == H && Wp == W) return s;
  SegSample out;
  out.id = s.id;
  out.image = TensorF::zeros({3, Hp, Wp});
  out.mask = TensorF::zeros({1, Hp, Wp});
  out.valid = TensorF::zeros({1, Hp, Wp});
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j)
        out.image.data()[(c * Hp + i) * Wp + j] = s.image.data()[(c * H + i) * W + j];
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j) {
      out.mask.data()[i * Wp + j] = s.mask.data()[i * W + j];
      out.valid.data()[i * Wp + j] = s.valid.data()[i * W + j];
    }
  return out;
}

// Same window applied to image, mask and valid.
inline SegSample random_crop(const SegSample& s, std::int64_t size, Rng& rng) {
  const std::int64_t H = s.height(), W = s.width();
  check_shape(size >= 1 && size <= H && size <= W,
              "random_crop: size " + std::to_string(size) + " exceeds sample " +
                  std::to_string(H) + "x" + std::to_string(W));
  const std::int64_t y0 = rng.uniform_int(0, H - size);
  const std::int64_t x0 = rng.uniform_int(0, W - size);
  SegSample out;
  out.id = s.id;
  out.image = TensorF::zeros({3, size, size});
  out.mask = TensorF::zeros({1, size, size});
  out.valid = TensorF::zeros({1, size, size});
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < size; ++i)
      for (std::int64_t j = 0; j < size; ++j)
        out.image.data()[(c * size + i) * size + j] =
            s.image.data()[(c * H + y0 + i) * W + x0 + j];
  for (std::int64_t i = 0; i < size; ++i)
    for (std::int64_t j = 0; j < size; ++j) {
      out.mask.data()[i * size + j] = s.mask.data()[(y0 + i) * W + x0 + j];
      out.valid.data()[i * size + j] = s.valid.data()[(y0 + i) * W + x0 + j];
    }
  return out;
}

// Horizontal and vertical flips, each applied independently with probability p
// to image, mask and valid jointly.
inline SegSample flip_augment(const SegSample& s, Rng& rng, double p = 0.5) {
  const bool do_h = rng.bernoulli(p);
  const bool do_v = rng.bernoulli(p);
  if (!do_h && !do_v) return s;
  SegSample out = s;
  if (do_h) {
    out.image = hflip(out.image);
    out.mask = hflip(out.mask);
    out.valid = hflip(out.valid);
  }
  if (do_v) {
    out.image = vflip(out.image);
    out.mask = vflip(out.mask);
    out.valid = vflip(out.valid);
  }
  return out;
}

struct SynthParams {
  std::int64_t min_buildings = 1;
  std::int64_t max_buildings = 8;
  double min_fraction = 0.05;
  double max_fraction = 0.4;
};

namespace detail {

struct Rect {
  std::int64_t y0, x0, h, w;
};

inline void synth_try(std::uint64_t seed, std::int64_t index, std::int64_t retry,
                      std::int64_t size, const SynthParams& params, SegSample& out) {
  Rng rng = Rng::stream(seed, 0x5E6D0001ull + static_cast<std::uint64_t>(retry), index);
  out.image = TensorF::zeros({3, size, size});
  out.mask = TensorF::zeros({1, size, size});
  out.valid = TensorF::full({1, size, size}, 1.0f);

  // background: per-channel base + two low-frequency waves + fine noise
  float base[3];
  for (int c = 0; c < 3; ++c) base[c] = static_cast<float>(rng.uniform(0.1, 0.45));
  double fy1 = rng.uniform(0.05, 0.25), fx1 = rng.uniform(0.05, 0.25);
  double fy2 = rng.uniform(0.2, 0.6), fx2 = rng.uniform(0.2, 0.6);
  double ph1 = rng.uniform(0.0, 6.28), ph2 = rng.uniform(0.0, 6.28);
  const float amp1 = static_cast<float>(rng.uniform(0.03, 0.08));
  const float amp2 = static_cast<float>(rng.uniform(0.01, 0.04));
  for (std::int64_t i = 0; i < size; ++i)
    for (std::int64_t j = 0; j < size; ++j) {
      const float wave =
          amp1 * static_cast<float>(std::sin(fy1 * i + fx1 * j + ph1)) +
          amp2 * static_cast<float>(std::sin(fy2 * i - fx2 * j + ph2));
      const float noise = static_cast<float>(rng.uniform(-0.02, 0.02));
      for (int c = 0; c < 3; ++c)
        out.image.data()[(c * size + i) * size + j] = base[c] + wave + noise;
    }

  const std::int64_t n_buildings = rng.uniform_int(params.min_buildings, params.max_buildings);
  Rect prev{0, 0, 0, 0};
  for (std::int64_t b = 0; b < n_buildings; ++b) {
    Rect r;
    if (rng.bernoulli(0.3)) {  // tiny building, recall stressor
      r.h = rng.uniform_int(3, 7);
      r.w = rng.uniform_int(3, 7);
    } else {
      r.h = rng.uniform_int(5, std::max<std::int64_t>(6, size / 4));
      r.w = rng.uniform_int(5, std::max<std::int64_t>(6, size / 4));
    }
    if (b > 0 && prev.h > 0 && rng.bernoulli(0.35)) {
      // adjacent to the previous building: shared vertical edge
      r.y0 = prev.y0;
      r.x0 = prev.x0 + prev.w;
      if (r.x0 + r.w > size) r.x0 = std::max<std::int64_t>(0, prev.x0 - r.w);
    } else {
      r.y0 = rng.uniform_int(0, std::max<std::int64_t>(0, size - r.h));
      r.x0 = rng.uniform_int(0, std::max<std::int64_t>(0, size - r.w));
    }
    r.h = std::min(r.h, size - r.y0);
    r.w = std::min(r.w, size - r.x0);
    if (r.h <= 0 || r.w <= 0) continue;

    // L-shape: cut one quadrant out of the rectangle
    const bool l_shape = rng.bernoulli(0.4) && r.h >= 6 && r.w >= 6;
    const std::int64_t cut_h = l_shape ? r.h / 2 : 0;
    const std::int64_t cut_w = l_shape ? r.w / 2 : 0;
    const int cut_corner = l_shape ? static_cast<int>(rng.uniform_int(0, 3)) : -1;

    float color[3];
    for (int c = 0; c < 3; ++c) {
      // keep the roof tone separated from the background tone
      const double bright = rng.bernoulli(0.7) ? rng.uniform(0.6, 0.95)
                                               : rng.uniform(0.0, 0.08);
      color[c] = static_cast<float>(bright);
    }
    const double tex_f = rng.uniform(0.5, 1.5);
    const float tex_amp = static_cast<float>(rng.uniform(0.01, 0.04));

    for (std::int64_t i = r.y0; i < r.y0 + r.h; ++i)
      for (std::int64_t j = r.x0; j < r.x0 + r.w; ++j) {
        const std::int64_t dy = i - r.y0, dx = j - r.x0;
        bool in_cut = false;
        switch (cut_corner) {
          case 0: in_cut = dy < cut_h && dx < cut_w; break;
          case 1: in_cut = dy < cut_h && dx >= r.w - cut_w; break;
          case 2: in_cut = dy >= r.h - cut_h && dx < cut_w; break;
          case 3: in_cut = dy >= r.h - cut_h && dx >= r.w - cut_w; break;
          default: break;
        }
        if (in_cut) continue;
        out.mask.data()[i * size + j] = 1.0f;
        const float tex = tex_amp * static_cast<float>(std::sin(tex_f * (dy + dx)));
        for (int c = 0; c < 3; ++c)
          out.image.data()[(c * size + i) * size + j] = color[c] + tex;
      }
    prev = r;
  }

  // clamp and quantize to the 8-bit grid so a disk round trip is lossless
  for (auto& v : out.image.vec()) {
    v = std::min(std::max(v, 0.0f), 1.0f);
    v = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
  }
}

}  // namespace detail

// Deterministic synthetic building scenes. Regenerates (bounded retries) until
// the building-pixel fraction lands inside [min_fraction, max_fraction].
inline std::vector<SegSample> synth_dataset(std::uint64_t seed, std::int64_t n, std::int64_t size,
                                            const SynthParams& params = {}) {
  std::vector<SegSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (std::int64_t index = 0; index < n; ++index) {
    SegSample s;
    bool ok = false;
    for (std::int64_t retry = 0; retry < 64 && !ok; ++retry) {
      detail::synth_try(seed, index, retry, size, params, s);
      double frac = 0.0;
      for (auto v : s.mask.vec()) frac += v;
      frac /= static_cast<double>(size * size);
      ok = frac >= params.min_fraction && frac <= params.max_fraction;
    }
    if (!ok)
      throw NumericError("synth_dataset: could not reach the target building fraction at index " +
                         std::to_string(index));
    s.id = "synth-" + std::to_string(seed) + "-" + std::to_string(index);
    out.push_back(std::move(s));
  }
  return out;
}

inline PnmImage sample_image_to_pnm(const SegSample& s) {
  PnmImage img;
  img.width = s.width();
  img.height = s.height();
  img.channels = 3;
  img.pixels.resize(static_cast<std::size_t>(3 * img.width * img.height));
  const std::int64_t hw = img.width * img.height;
  for (std::int64_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c)
      img.pixels[i * 3 + c] = static_cast<std::uint8_t>(
          std::lround(std::min(std::max(s.image.data()[c * hw + i], 0.0f), 1.0f) * 255.0f));
  return img;
}

inline PnmImage sample_mask_to_pnm(const SegSample& s) {
  PnmImage img;
  img.width = s.width();
  img.height = s.height();
  img.channels = 1;
  img.pixels.resize(static_cast<std::size_t>(img.width * img.height));
  for (std::int64_t i = 0; i < img.width * img.height; ++i)
    img.pixels[i] = s.mask.data()[i] > 0.5f ? 255 : 0;
  return img;
}

// Writes root/<split>/{images,masks}/<id>.(ppm|pgm) plus manifest.csv.
inline DatasetManifest write_dataset(const std::string& root, const std::string& split,
                                     const std::vector<SegSample>& samples) {
  namespace fs = std::filesystem;
  const fs::path split_dir = fs::path(root) / split;
  fs::create_directories(split_dir / "images");
  fs::create_directories(split_dir / "masks");
  DatasetManifest manifest;
  manifest.root = root;
  manifest.split = split;
  std::ofstream csv(split_dir / "manifest.csv");
  if (!csv) throw IoError("write_dataset: cannot write manifest under " + split_dir.string());
  for (const auto& s : samples) {
    const std::string img_rel = "images/" + s.id + ".ppm";
    const std::string mask_rel = "masks/" + s.id + ".pgm";
    write_pnm((split_dir / img_rel).string(), sample_image_to_pnm(s));
    write_pnm((split_dir / mask_rel).string(), sample_mask_to_pnm(s));
    csv << img_rel << ',' << mask_rel << '\n';
    manifest.pairs.emplace_back((split_dir / img_rel).string(), (split_dir / mask_rel).string());
  }
  return manifest;
}

// Generator + writer in one step.
inline std::vector<SegSample> synth_generate(std::uint64_t seed, std::int64_t n, std::int64_t size,
                                             const SynthParams& params, const std::string& root,
                                             const std::string& split) {
  std::vector<SegSample> samples = synth_dataset(seed, n, size, params);
  write_dataset(root, split, samples);
  return samples;
}

inline DatasetManifest read_manifest(const std::string& root, const std::string& split) {
  namespace fs = std::filesystem;
  const fs::path split_dir = fs::path(root) / split;
  const fs::path csv_path = split_dir / "manifest.csv";
  std::ifstream csv(csv_path);
  if (!csv) throw IoError("read_manifest: cannot open " + csv_path.string());
  DatasetManifest m;
  m.root = root;
  m.split = split;
  std::string line;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw IoError("read_manifest: malformed line '" + line + "' in " + csv_path.string());
    m.pairs.emplace_back((split_dir / line.substr(0, comma)).string(),
                         (split_dir / line.substr(comma + 1)).string());
  }
  return m;
}

// Values scaled to [0,1]; masks binarized at >127. Iteration order follows the
// manifest, so it is deterministic.
inline SegSample load_sample(const std::string& image_path, const std::string& mask_path) {
  const PnmImage img = read_pnm(image_path);
  const PnmImage msk = read_pnm(mask_path);
  if (img.channels != 3) throw IoError("load_sample: " + image_path + " is not RGB");
  if (msk.channels != 1) throw IoError("load_sample: " + mask_path + " is not grayscale");
  if (img.width != msk.width || img.height != msk.height)
    throw IoError("load_sample: size mismatch between " + image_path + " (" +
                  std::to_string(img.width) + "x" + std::to_string(img.height) + ") and " +
                  mask_path + " (" + std::to_string(msk.width) + "x" +
                  std::to_string(msk.height) + ")");
  SegSample s;
  const std::int64_t H = img.height, W = img.width, hw = H * W;
  s.image = TensorF::zeros({3, H, W});
  s.mask = TensorF::zeros({1, H, W});
  s.valid = TensorF::full({1, H, W}, 1.0f);
  for (std::int64_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c)
      s.image.data()[c * hw + i] = static_cast<float>(img.pixels[i * 3 + c]) / 255.0f;
  for (std::int64_t i = 0; i < hw; ++i) s.mask.data()[i] = msk.pixels[i] > 127 ? 1.0f : 0.0f;
  const std::string stem = std::filesystem::path(image_path).stem().string();
  s.id = stem;
  return s;
}

inline std::vector<SegSample> load_dataset(const DatasetManifest& manifest) {
  std::vector<SegSample> out;
  out.reserve(manifest.pairs.size());
  for (const auto& [img, msk] : manifest.pairs) out.push_back(load_sample(img, msk));
  return out;
}

}  // namespace winlin
