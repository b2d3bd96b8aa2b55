#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "winlin/attention.hpp"
#include "winlin/eigen_map.hpp"
#include "winlin/rng.hpp"

namespace winlin {

struct BenchOom : std::runtime_error {
  explicit BenchOom(const std::string& msg) : std::runtime_error(msg) {}
};

// Byte accounting for attention-transient buffers. Only what the kernels
// allocate through the arena is counted; weights and caller-owned in/out
// tensors stay outside so the window-size mechanism is isolated.
class TransientArena {
 public:
  explicit TransientArena(std::size_t budget_bytes) : budget_(budget_bytes) {}

  std::size_t peak_bytes() const { return peak_; }
  std::size_t current_bytes() const { return current_; }

  template <typename U>
  class Buffer {
   public:
    Buffer(TransientArena& arena, std::size_t count) : arena_(&arena), bytes_(count * sizeof(U)) {
      arena_->acquire(bytes_);
      data_.resize(count);
    }
    ~Buffer() { arena_->release(bytes_); }
    Buffer(const Buffer&) = delete;
    Buffer& operator=(const Buffer&) = delete;

    U* data() { return data_.data(); }
    const U* data() const { return data_.data(); }

   private:
    TransientArena* arena_;
    std::size_t bytes_;
    std::vector<U> data_;
  };

 private:
  void acquire(std::size_t bytes) {
    if (current_ + bytes > budget_)
      throw BenchOom("transient attention buffers exceed the memory budget: " +
                     std::to_string(current_ + bytes) + " > " + std::to_string(budget_) +
                     " bytes");
    current_ += bytes;
    peak_ = std::max(peak_, current_);
  }
  void release(std::size_t bytes) { current_ -= bytes; }

  std::size_t budget_;
  std::size_t current_ = 0;
  std::size_t peak_ = 0;

  template <typename U>
  friend class Buffer;
};

enum class BenchKernel { exact, linear };

inline const char* bench_kernel_name(BenchKernel k) {
  return k == BenchKernel::exact ? "exact" : "linear";
}

struct FlopReport {
  BenchKernel kernel = BenchKernel::exact;
  std::int64_t window_side = 0;
  std::int64_t height = 0, width = 0;
  std::int64_t dim = 0, heads = 0;
  // analytic part
  std::int64_t flops_total = 0;        // attention core, whole image
  std::int64_t flops_projections = 0;  // Q,K,V,O projections (identical for both kernels)
  // measured part
  std::int64_t peak_buffer_bytes = 0;
  double wall_ms = 0.0;
  bool oom = false;
};

// Analytic counts, multiply-add = 2 FLOPs, softmax = 5 ops per score element.
// Exact core per window: h·(2N²d + 5N² + 2N²d); linear core per window:
// h·(3Nd + 2Nd² + 2Nd² + 2Nd + 2Nd). Totals multiply by the window count at
// the (padded) geometry; projections 8·HW·D² are reported separately.
inline FlopReport count_flops(BenchKernel kernel, std::int64_t w, std::int64_t H, std::int64_t W,
                              std::int64_t D, std::int64_t h) {
  check_shape(w >= 1 && H >= 1 && W >= 1 && D >= 1 && h >= 1 && D % h == 0,
              "count_flops: positive geometry with D divisible by heads required");
  FlopReport r;
  r.kernel = kernel;
  r.window_side = w;
  r.height = H;
  r.width = W;
  r.dim = D;
  r.heads = h;
  const std::int64_t N = w * w;
  const std::int64_t d = D / h;
  const std::int64_t n_windows = ceil_div(H, w) * ceil_div(W, w);
  const std::int64_t per_window =
      kernel == BenchKernel::exact
          ? h * (2 * N * N * d + 5 * N * N + 2 * N * N * d)
          : h * (3 * N * d + 2 * N * d * d + 2 * N * d * d + 2 * N * d + 2 * N * d);
  r.flops_total = per_window * n_windows;
  r.flops_projections = 8 * H * W * D * D;
  return r;
}

namespace detail {

// Batched exact attention: the score tensor for every window and head is
// materialized at once, which is what ties peak memory to N.
inline void exact_kernel_pass(const float* q, const float* k, const float* v, float* out,
                              std::int64_t n_windows, std::int64_t N, std::int64_t D,
                              std::int64_t h, float scale, TransientArena& arena) {
  const std::int64_t d = D / h;
  TransientArena::Buffer<float> scores(arena,
                                       static_cast<std::size_t>(n_windows * h * N * N));
  for (std::int64_t w0 = 0; w0 < n_windows; ++w0)
    for (std::int64_t m = 0; m < h; ++m) {
      auto Q = block_map(q, w0 * N, m * d, N, d, D);
      auto K = block_map(k, w0 * N, m * d, N, d, D);
      MatMap<float> S(scores.data() + (w0 * h + m) * N * N, N, N);
      S.noalias() = Q * K.transpose() / scale;
    }
  for (std::int64_t b = 0; b < n_windows * h; ++b) {
    MatMap<float> S(scores.data() + b * N * N, N, N);
    for (std::int64_t i = 0; i < N; ++i) {
      auto row = S.row(i);
      const float mx = row.maxCoeff();
      row = (row.array() - mx).exp();
      row /= row.sum();
    }
  }
  for (std::int64_t w0 = 0; w0 < n_windows; ++w0)
    for (std::int64_t m = 0; m < h; ++m) {
      auto V = block_map(v, w0 * N, m * d, N, d, D);
      auto O = block_map(out, w0 * N, m * d, N, d, D);
      ConstMatMap<float> S(scores.data() + (w0 * h + m) * N * N, N, N);
      O.noalias() = S * V;
    }
}

// Batched linear attention: normalized Q̂,K̂ are materialized for the whole
// image; the d×d reaccumulation buffers are per-window scratch.
inline void linear_kernel_pass(const float* q, const float* k, const float* v, float* out,
                               std::int64_t n_windows, std::int64_t N, std::int64_t D,
                               std::int64_t h, TransientArena& arena) {
  const std::int64_t d = D / h;
  const std::int64_t rows = n_windows * N;
  TransientArena::Buffer<float> qh(arena, static_cast<std::size_t>(rows * D));
  TransientArena::Buffer<float> kh(arena, static_cast<std::size_t>(rows * D));
  const float norm_eps = static_cast<float>(kNormEps);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t m = 0; m < h; ++m) {
      const float* qs = q + r * D + m * d;
      const float* ks = k + r * D + m * d;
      float* qd = qh.data() + r * D + m * d;
      float* kd = kh.data() + r * D + m * d;
      float nq = 0.f, nk = 0.f;
      for (std::int64_t c = 0; c < d; ++c) {
        nq += qs[c] * qs[c];
        nk += ks[c] * ks[c];
      }
      nq = std::max(std::sqrt(nq), norm_eps);
      nk = std::max(std::sqrt(nk), norm_eps);
      for (std::int64_t c = 0; c < d; ++c) {
        qd[c] = qs[c] / nq;
        kd[c] = ks[c] / nk;
      }
    }
  TransientArena::Buffer<float> kv(arena, static_cast<std::size_t>(d * d));
  TransientArena::Buffer<float> ksum(arena, static_cast<std::size_t>(d));
  TransientArena::Buffer<float> vsum(arena, static_cast<std::size_t>(d));
  TransientArena::Buffer<float> denom(arena, static_cast<std::size_t>(N));
  const float denom_eps = static_cast<float>(kDenomEps);
  for (std::int64_t w0 = 0; w0 < n_windows; ++w0)
    for (std::int64_t m = 0; m < h; ++m) {
      auto Qh = block_map(static_cast<const float*>(qh.data()), w0 * N, m * d, N, d, D);
      auto Kh = block_map(static_cast<const float*>(kh.data()), w0 * N, m * d, N, d, D);
      auto V = block_map(v, w0 * N, m * d, N, d, D);
      auto O = block_map(out, w0 * N, m * d, N, d, D);
      MatMap<float> S(kv.data(), d, d);
      S.noalias() = Kh.transpose() * V;
      Eigen::Map<Eigen::VectorXf> ks(ksum.data(), d);
      Eigen::Map<Eigen::VectorXf> vs(vsum.data(), d);
      ks = Kh.colwise().sum().transpose();
      vs = V.colwise().sum().transpose();
      O.noalias() = Qh * S;
      O.rowwise() += vs.transpose();
      for (std::int64_t i = 0; i < N; ++i) {
        denom.data()[i] =
            std::max(static_cast<float>(N) + Qh.row(i).dot(ks.transpose()), denom_eps);
        O.row(i) /= denom.data()[i];
      }
    }
}

}  // namespace detail

// Runs the requested kernel on random projected tokens; reports the median
// wall time over `repeats` passes (one warm-up) and the arena's peak bytes.
// Exceeding the budget is reported as a distinguished OOM result.
inline FlopReport measure(BenchKernel kernel, std::int64_t w, std::int64_t H, std::int64_t W,
                          std::int64_t D, std::int64_t h, int repeats,
                          std::size_t budget_bytes = std::size_t(4096) << 20,
                          std::uint64_t seed = 1234) {
  check_shape(repeats >= 3, "measure: repeats must be >= 3");
  FlopReport r = count_flops(kernel, w, H, W, D, h);
  const std::int64_t N = w * w;
  const std::int64_t n_windows = ceil_div(H, w) * ceil_div(W, w);
  const std::int64_t rows = n_windows * N;

  Rng rng = Rng::stream(seed, 0xBE9C4ull, static_cast<std::uint64_t>(w));
  std::vector<float> q(static_cast<std::size_t>(rows * D));
  std::vector<float> k(q.size()), v(q.size()), out(q.size());
  for (auto& x : q) x = static_cast<float>(rng.normal());
  for (auto& x : k) x = static_cast<float>(rng.normal());
  for (auto& x : v) x = static_cast<float>(rng.normal());

  try {
    std::vector<double> times;
    TransientArena arena(budget_bytes);
    for (int rep = 0; rep <= repeats; ++rep) {  // rep 0 is warm-up
      const auto t0 = std::chrono::steady_clock::now();
      if (kernel == BenchKernel::exact)
        detail::exact_kernel_pass(q.data(), k.data(), v.data(), out.data(), n_windows, N, D, h,
                                  1.0f, arena);
      else
        detail::linear_kernel_pass(q.data(), k.data(), v.data(), out.data(), n_windows, N, D, h,
                                   arena);
      const auto t1 = std::chrono::steady_clock::now();
      if (rep > 0) times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    r.wall_ms = times[times.size() / 2];
    r.peak_buffer_bytes = static_cast<std::int64_t>(arena.peak_bytes());
  } catch (const BenchOom&) {
    r.oom = true;
    r.wall_ms = 0.0;
    r.peak_buffer_bytes = 0;
  }
  return r;
}

struct BenchConfig {
  std::int64_t height = 256;
  std::int64_t width = 256;
  std::int64_t dim = 96;
  std::int64_t heads = 3;
  std::vector<std::int64_t> windows{8, 16, 32, 64};
  int repeats = 5;
  std::size_t budget_bytes = std::size_t(4096) << 20;
  std::uint64_t seed = 1234;
};

struct BenchRow {
  std::string kernel;
  std::int64_t window = 0;
  std::int64_t flops = 0;
  std::int64_t peak_bytes = 0;  // valid when !oom
  double wall_ms = 0.0;         // valid when !oom
  bool oom = false;
  double ratio = 0.0;  // flops ratio to the previous window's row; 0 on the first
};

struct BenchTable {
  std::vector<std::string> comments;  // '#'-prefixed header lines
  std::vector<BenchRow> rows;
};

inline BenchTable bench_sweep(const BenchConfig& cfg) {
  BenchTable table;
  table.comments = {
      "# attention-core FLOP convention: multiply-add = 2 FLOPs, softmax = 5 ops/element",
      "# exact core/window: h*(2N^2d + 5N^2 + 2N^2d); linear core/window: h*(3Nd + 4Nd^2 + 4Nd)",
      "# projections (8*H*W*D^2, identical for both kernels) are excluded from the flops column",
      "# peak_bytes counts transient attention buffers only; '*' marks rows over the memory budget",
      "# geometry: " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width) + ", D=" +
          std::to_string(cfg.dim) + ", heads=" + std::to_string(cfg.heads),
  };
  for (BenchKernel kernel : {BenchKernel::exact, BenchKernel::linear}) {
    std::int64_t prev_flops = 0;
    for (std::int64_t w : cfg.windows) {
      FlopReport r = measure(kernel, w, cfg.height, cfg.width, cfg.dim, cfg.heads, cfg.repeats,
                             cfg.budget_bytes, cfg.seed);
      BenchRow row;
      row.kernel = bench_kernel_name(kernel);
      row.window = w;
      row.flops = r.flops_total;
      row.peak_bytes = r.peak_buffer_bytes;
      row.wall_ms = r.wall_ms;
      row.oom = r.oom;
      row.ratio = prev_flops > 0 ? static_cast<double>(r.flops_total) /
                                       static_cast<double>(prev_flops)
                                 : 0.0;
      prev_flops = r.flops_total;
      table.rows.push_back(row);
    }
  }
  return table;
}

inline std::string bench_csv(const BenchTable& table) {
  std::ostringstream os;
  for (const auto& c : table.comments) os << c << '\n';
  os << "kernel,window,flops,peak_bytes,wall_ms,ratio\n";
  for (const auto& r : table.rows) {
    os << r.kernel << ',' << r.window << ',' << r.flops << ',';
    if (r.oom)
      os << "*,*,";
    else {
      char wall[32];
      std::snprintf(wall, sizeof(wall), "%.3f", r.wall_ms);
      os << r.peak_bytes << ',' << wall << ',';
    }
    if (r.ratio > 0.0) {
      char ratio[32];
      std::snprintf(ratio, sizeof(ratio), "%.3f", r.ratio);
      os << ratio;
    }
    os << '\n';
  }
  return os.str();
}

inline BenchTable parse_bench_csv(const std::string& text) {
  BenchTable table;
  std::istringstream is(text);
  std::string line;
  bool header_seen = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      table.comments.push_back(line);
      continue;
    }
    if (!header_seen) {
      if (line != "kernel,window,flops,peak_bytes,wall_ms,ratio")
        throw IoError("bench csv: unexpected header '" + line + "'");
      header_seen = true;
      continue;
    }
    std::istringstream row_is(line);
    std::string field;
    BenchRow row;
    std::getline(row_is, row.kernel, ',');
    std::getline(row_is, field, ',');
    row.window = std::stoll(field);
    std::getline(row_is, field, ',');
    row.flops = std::stoll(field);
    std::getline(row_is, field, ',');
    if (field == "*") {
      row.oom = true;
      std::getline(row_is, field, ',');  // the '*' wall column
    } else {
      row.peak_bytes = std::stoll(field);
      std::getline(row_is, field, ',');
      row.wall_ms = std::stod(field);
    }
    if (std::getline(row_is, field, ',') && !field.empty()) row.ratio = std::stod(field);
    table.rows.push_back(row);
  }
  return table;
}

}  // namespace winlin
