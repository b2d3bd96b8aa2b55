#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "winlin/eigen_map.hpp"
#include "winlin/ops.hpp"
#include "winlin/tensor.hpp"

namespace winlin {

// Guard for zero rows inside L2 normalization.
inline constexpr double kNormEps = 1e-12;
// Floor for the linear-attention denominator. Applied as max(denom, eps) so
// the generic case stays bit-equal to the unguarded reassociated form; only
// the all-antipodal degenerate input engages it.
inline constexpr double kDenomEps = 1e-6;

struct WindowLayout {
  std::int64_t window_side = 0;
  std::int64_t padded_h = 0;
  std::int64_t padded_w = 0;
  std::int64_t n_windows = 0;  // per image
  std::int64_t original_h = 0;
  std::int64_t original_w = 0;

  std::int64_t tokens() const { return window_side * window_side; }
  std::int64_t grid_w() const { return padded_w / window_side; }
  std::int64_t grid_h() const { return padded_h / window_side; }
};

inline WindowLayout make_window_layout(std::int64_t h, std::int64_t w, std::int64_t side) {
  check_shape(side >= 1, "window layout: window side must be >= 1");
  WindowLayout l;
  l.window_side = side;
  l.original_h = h;
  l.original_w = w;
  l.padded_h = round_up(h, side);
  l.padded_w = round_up(w, side);
  l.n_windows = (l.padded_h / side) * (l.padded_w / side);
  return l;
}

// [B,C,H,W] -> [B·nW, N, C] token sequences, zero-padding H,W up to multiples
// of the window side. Windows are ordered row-major over the padded grid and
// tokens row-major inside each window.
template <typename T>
std::pair<Tensor<T>, WindowLayout> window_partition(const Tensor<T>& x, std::int64_t side) {
  check_shape(x.ndim() == 4, "window_partition: input must be 4-D, got " + shape_str(x.shape()));
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const WindowLayout layout = make_window_layout(H, W, side);
  const std::int64_t N = layout.tokens();
  const std::int64_t gw = layout.grid_w();
  const std::int64_t nW = layout.n_windows;

  Tensor<T> out = Tensor<T>::make_result({B * nW, N, C});
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t wy = 0; wy < layout.grid_h(); ++wy)
      for (std::int64_t wx = 0; wx < gw; ++wx) {
        const std::int64_t win = b * nW + wy * gw + wx;
        for (std::int64_t ty = 0; ty < side; ++ty) {
          const std::int64_t iy = wy * side + ty;
          for (std::int64_t tx = 0; tx < side; ++tx) {
            const std::int64_t ix = wx * side + tx;
            T* dst = po + (win * N + ty * side + tx) * C;
            if (iy < H && ix < W) {
              for (std::int64_t c = 0; c < C; ++c) dst[c] = px[((b * C + c) * H + iy) * W + ix];
            }  // else stays zero
          }
        }
      }

  auto xn = x.node();
  out.attach(
      "window_partition",
      [xn, layout, B, C, H, W, N, gw, nW, side](typename Tensor<T>::Node& self) {
        auto& gx = xn->grad_buffer();
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t wy = 0; wy < layout.grid_h(); ++wy)
            for (std::int64_t wx = 0; wx < gw; ++wx) {
              const std::int64_t win = b * nW + wy * gw + wx;
              for (std::int64_t ty = 0; ty < side; ++ty) {
                const std::int64_t iy = wy * side + ty;
                if (iy >= H) continue;
                for (std::int64_t tx = 0; tx < side; ++tx) {
                  const std::int64_t ix = wx * side + tx;
                  if (ix >= W) continue;
                  const T* g = self.grad.data() + (win * N + ty * side + tx) * C;
                  for (std::int64_t c = 0; c < C; ++c)
                    gx[((b * C + c) * H + iy) * W + ix] += g[c];
                }
              }
            }
      },
      x);
  return {out, layout};
}

// Inverse of window_partition, cropping back to the original H,W.
template <typename T>
Tensor<T> window_reverse(const Tensor<T>& tokens, const WindowLayout& layout, std::int64_t batch) {
  check_shape(tokens.ndim() == 3, "window_reverse: tokens must be 3-D, got " +
                                      shape_str(tokens.shape()));
  const std::int64_t N = layout.tokens();
  const std::int64_t nW = layout.n_windows;
  const std::int64_t C = tokens.dim(2);
  check_shape(tokens.dim(0) == batch * nW && tokens.dim(1) == N,
              "window_reverse: tokens " + shape_str(tokens.shape()) +
                  " do not match layout (windows " + std::to_string(batch * nW) + ", tokens " +
                  std::to_string(N) + ")");
  const std::int64_t H = layout.original_h, W = layout.original_w;
  const std::int64_t gw = layout.grid_w();
  const std::int64_t side = layout.window_side;

  Tensor<T> out = Tensor<T>::make_result({batch, C, H, W});
  const T* pt = tokens.data();
  T* po = out.data();
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t wy = 0; wy < layout.grid_h(); ++wy)
      for (std::int64_t wx = 0; wx < gw; ++wx) {
        const std::int64_t win = b * nW + wy * gw + wx;
        for (std::int64_t ty = 0; ty < side; ++ty) {
          const std::int64_t iy = wy * side + ty;
          if (iy >= H) continue;
          for (std::int64_t tx = 0; tx < side; ++tx) {
            const std::int64_t ix = wx * side + tx;
            if (ix >= W) continue;
            const T* src = pt + (win * N + ty * side + tx) * C;
            for (std::int64_t c = 0; c < C; ++c) po[((b * C + c) * H + iy) * W + ix] = src[c];
          }
        }
      }

  auto tn = tokens.node();
  out.attach(
      "window_reverse",
      [tn, layout, batch, C, H, W, N, gw, nW, side](typename Tensor<T>::Node& self) {
        auto& gt = tn->grad_buffer();
        for (std::int64_t b = 0; b < batch; ++b)
          for (std::int64_t wy = 0; wy < layout.grid_h(); ++wy)
            for (std::int64_t wx = 0; wx < gw; ++wx) {
              const std::int64_t win = b * nW + wy * gw + wx;
              for (std::int64_t ty = 0; ty < side; ++ty) {
                const std::int64_t iy = wy * side + ty;
                if (iy >= H) continue;
                for (std::int64_t tx = 0; tx < side; ++tx) {
                  const std::int64_t ix = wx * side + tx;
                  if (ix >= W) continue;
                  T* dst = gt.data() + (win * N + ty * side + tx) * C;
                  for (std::int64_t c = 0; c < C; ++c)
                    dst[c] += self.grad.data()[((b * C + c) * H + iy) * W + ix];
                }
              }
            }
      },
      tokens);
  return out;
}

// sim(q,k) = 1 + cos(q,k) with eps-guarded norms; range [0, 2].
template <typename T>
T taylor_similarity(const T* q, const T* k, std::int64_t d) {
  T nq = T(0), nk = T(0), dot = T(0);
  for (std::int64_t i = 0; i < d; ++i) {
    nq += q[i] * q[i];
    nk += k[i] * k[i];
    dot += q[i] * k[i];
  }
  const T dq = std::max(std::sqrt(nq), static_cast<T>(kNormEps));
  const T dk = std::max(std::sqrt(nk), static_cast<T>(kNormEps));
  return T(1) + dot / (dq * dk);
}

template <typename T>
T taylor_similarity(const Tensor<T>& q, const Tensor<T>& k) {
  check_shape(q.numel() == k.numel(), "taylor_similarity: vector lengths disagree");
  return taylor_similarity(q.data(), k.data(), q.numel());
}

// Softmax_rows(QKᵀ/s)·V. Value-level kernel; the differentiable path lives
// in window_attention.
template <typename T>
Tensor<T> attention_exact(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, T scale) {
  check_shape(q.ndim() == 2 && q.shape() == k.shape() && q.shape() == v.shape(),
              "attention_exact: Q,K,V must share [N,d] shape");
  check_shape(scale != T(0), "attention_exact: scale must be nonzero");
  const std::int64_t N = q.dim(0), d = q.dim(1);
  Tensor<T> out = Tensor<T>::make_result({N, d});
  MatRM<T> scores(N, N);
  scores.noalias() = as_matrix(q, N, d) * as_matrix(k, N, d).transpose() / scale;
  for (std::int64_t i = 0; i < N; ++i) {
    auto row = scores.row(i);
    const T mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
  as_matrix(out, N, d).noalias() = scores * as_matrix(v, N, d);
  return out;
}

// O(N²) reference: row i = Σⱼ sim(qᵢ,kⱼ)vⱼ / Σⱼ sim(qᵢ,kⱼ). Ground truth for
// the reassociated linear form.
template <typename T>
Tensor<T> attention_kernelized_oracle(const Tensor<T>& q, const Tensor<T>& k,
                                      const Tensor<T>& v) {
  check_shape(q.ndim() == 2 && q.shape() == k.shape() && q.shape() == v.shape(),
              "attention_kernelized_oracle: Q,K,V must share [N,d] shape");
  const std::int64_t N = q.dim(0), d = q.dim(1);
  Tensor<T> out = Tensor<T>::make_result({N, d});
  std::vector<T> acc(static_cast<std::size_t>(d));
  for (std::int64_t i = 0; i < N; ++i) {
    std::fill(acc.begin(), acc.end(), T(0));
    T denom = T(0);
    for (std::int64_t j = 0; j < N; ++j) {
      const T s = taylor_similarity(q.data() + i * d, k.data() + j * d, d);
      denom += s;
      const T* vj = v.data() + j * d;
      for (std::int64_t c = 0; c < d; ++c) acc[c] += s * vj[c];
    }
    if (denom < static_cast<T>(kDenomEps))
      throw NumericError("attention_kernelized_oracle: degenerate input, denominator " +
                         std::to_string(static_cast<double>(denom)) + " < eps at query " +
                         std::to_string(i));
    for (std::int64_t c = 0; c < d; ++c) out.data()[i * d + c] = acc[c] / denom;
  }
  return out;
}

// Reassociated form: numerator Σⱼvⱼ + Q̂(K̂ᵀV), denominator N + Q̂·Σⱼk̂ⱼ,
// O(N·d²) per call. Matches attention_kernelized_oracle up to float
// reassociation error.
template <typename T>
Tensor<T> attention_linear(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  check_shape(q.ndim() == 2 && q.shape() == k.shape() && q.shape() == v.shape(),
              "attention_linear: Q,K,V must share [N,d] shape");
  const std::int64_t N = q.dim(0), d = q.dim(1);
  Tensor<T> out = Tensor<T>::make_result({N, d});

  MatRM<T> qh = as_matrix(q, N, d);
  MatRM<T> kh = as_matrix(k, N, d);
  for (std::int64_t i = 0; i < N; ++i) {
    qh.row(i) /= std::max(qh.row(i).norm(), static_cast<T>(kNormEps));
    kh.row(i) /= std::max(kh.row(i).norm(), static_cast<T>(kNormEps));
  }
  ConstMatMap<T> V(v.data(), N, d);
  MatRM<T> kv(d, d);
  kv.noalias() = kh.transpose() * V;
  VecX<T> ksum = kh.colwise().sum().transpose();
  VecX<T> vsum = V.colwise().sum().transpose();

  MatMap<T> O(out.data(), N, d);
  O.noalias() = qh * kv;
  O.rowwise() += vsum.transpose();
  for (std::int64_t i = 0; i < N; ++i) {
    const T denom =
        std::max(static_cast<T>(N) + qh.row(i).dot(ksum.transpose()), static_cast<T>(kDenomEps));
    O.row(i) /= denom;
  }
  return out;
}

enum class AttentionKind { exact, linear };

namespace detail {

// Row-normalize a block into dst; returns nothing, norms written to out_norms.
template <typename T, typename Block>
void normalize_rows_into(const Block& src, MatRM<T>& dst, std::vector<T>& out_norms) {
  dst = src;
  out_norms.resize(static_cast<std::size_t>(src.rows()));
  for (std::int64_t i = 0; i < src.rows(); ++i) {
    const T n = dst.row(i).norm();
    out_norms[static_cast<std::size_t>(i)] = n;
    dst.row(i) /= std::max(n, static_cast<T>(kNormEps));
  }
}

}  // namespace detail

// Multi-head attention over pre-projected Q,K,V token matrices
// [n_windows·tokens, D]. Each (window, head) block attends independently; the
// fused backward keeps the graph small. Numerics of the linear kind match
// attention_linear exactly; the exact kind matches attention_exact.
template <typename T>
Tensor<T> window_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::int64_t n_windows, std::int64_t tokens, std::int64_t heads,
                           AttentionKind kind, T scale = T(1)) {
  check_shape(q.ndim() == 2 && q.shape() == k.shape() && q.shape() == v.shape(),
              "window_attention: Q,K,V must share shape");
  const std::int64_t rows = q.dim(0), D = q.dim(1);
  check_shape(rows == n_windows * tokens,
              "window_attention: rows " + std::to_string(rows) + " != windows*tokens " +
                  std::to_string(n_windows * tokens));
  check_shape(D % heads == 0, "window_attention: dim " + std::to_string(D) +
                                  " not divisible by heads " + std::to_string(heads));
  check_shape(kind == AttentionKind::linear || scale != T(0),
              "window_attention: scale must be nonzero");
  const std::int64_t d = D / heads;
  const std::int64_t N = tokens;

  Tensor<T> out = Tensor<T>::make_result(q.shape());
  {
    MatRM<T> qh(N, d), kh(N, d);
    std::vector<T> qnorm, knorm;
    MatRM<T> scores;
    for (std::int64_t w0 = 0; w0 < n_windows; ++w0)
      for (std::int64_t m = 0; m < heads; ++m) {
        auto Q = block_map(q.data(), w0 * N, m * d, N, d, D);
        auto K = block_map(k.data(), w0 * N, m * d, N, d, D);
        auto V = block_map(v.data(), w0 * N, m * d, N, d, D);
        auto O = block_map(out.data(), w0 * N, m * d, N, d, D);
        if (kind == AttentionKind::exact) {
          scores.resize(N, N);
          scores.noalias() = Q * K.transpose() / scale;
          for (std::int64_t i = 0; i < N; ++i) {
            auto row = scores.row(i);
            const T mx = row.maxCoeff();
            row = (row.array() - mx).exp();
            row /= row.sum();
          }
          O.noalias() = scores * V;
        } else {
          detail::normalize_rows_into<T>(Q, qh, qnorm);
          detail::normalize_rows_into<T>(K, kh, knorm);
          MatRM<T> kv(d, d);
          kv.noalias() = kh.transpose() * V;
          VecX<T> ksum = kh.colwise().sum().transpose();
          VecX<T> vsum = V.colwise().sum().transpose();
          O.noalias() = qh * kv;
          O.rowwise() += vsum.transpose();
          for (std::int64_t i = 0; i < N; ++i) {
            const T denom = std::max(static_cast<T>(N) + qh.row(i).dot(ksum.transpose()),
                                     static_cast<T>(kDenomEps));
            O.row(i) /= denom;
          }
        }
      }
  }

  auto qn = q.node();
  auto kn = k.node();
  auto vn = v.node();
  out.attach(
      "window_attention",
      [qn, kn, vn, n_windows, heads, N, d, D, kind, scale](typename Tensor<T>::Node& self) {
        const bool need_q = qn->requires_grad, need_k = kn->requires_grad,
                   need_v = vn->requires_grad;
        MatRM<T> qh(N, d), kh(N, d), scores(0, 0);
        std::vector<T> qnorm, knorm;
        for (std::int64_t w0 = 0; w0 < n_windows; ++w0)
          for (std::int64_t m = 0; m < heads; ++m) {
            auto Q = block_map(qn->data.data(), w0 * N, m * d, N, d, D);
            auto K = block_map(kn->data.data(), w0 * N, m * d, N, d, D);
            auto V = block_map(vn->data.data(), w0 * N, m * d, N, d, D);
            auto G = block_map(static_cast<const T*>(self.grad.data()), w0 * N, m * d, N, d, D);
            if (kind == AttentionKind::exact) {
              scores.resize(N, N);
              scores.noalias() = Q * K.transpose() / scale;
              for (std::int64_t i = 0; i < N; ++i) {
                auto row = scores.row(i);
                const T mx = row.maxCoeff();
                row = (row.array() - mx).exp();
                row /= row.sum();
              }
              if (need_v) {
                auto Gv = block_map(vn->grad_buffer().data(), w0 * N, m * d, N, d, D);
                Gv.noalias() += scores.transpose() * G;
              }
              if (need_q || need_k) {
                MatRM<T> dP(N, N);
                dP.noalias() = G * V.transpose();
                for (std::int64_t i = 0; i < N; ++i) {
                  const T dot = dP.row(i).dot(scores.row(i));
                  dP.row(i) = (scores.row(i).array() * (dP.row(i).array() - dot)).matrix();
                }
                if (need_q) {
                  auto Gq = block_map(qn->grad_buffer().data(), w0 * N, m * d, N, d, D);
                  Gq.noalias() += dP * K / scale;
                }
                if (need_k) {
                  auto Gk = block_map(kn->grad_buffer().data(), w0 * N, m * d, N, d, D);
                  Gk.noalias() += dP.transpose() * Q / scale;
                }
              }
            } else {
              detail::normalize_rows_into<T>(Q, qh, qnorm);
              detail::normalize_rows_into<T>(K, kh, knorm);
              MatRM<T> kv(d, d);
              kv.noalias() = kh.transpose() * V;
              VecX<T> ksum = kh.colwise().sum().transpose();
              VecX<T> vsum = V.colwise().sum().transpose();
              VecX<T> denom(N);
              for (std::int64_t i = 0; i < N; ++i)
                denom(i) = std::max(static_cast<T>(N) + qh.row(i).dot(ksum.transpose()),
                                    static_cast<T>(kDenomEps));
              // out_i = numer_i / denom_i with numer = 1·vsumᵀ + Q̂·KV
              MatRM<T> dnumer(N, d);
              VecX<T> ddenom(N);
              for (std::int64_t i = 0; i < N; ++i) {
                dnumer.row(i) = G.row(i) / denom(i);
                // numer_i = out_i·denom_i; d(1/denom) chain gives -G·out/denom
                const T numer_dot_g = (vsum.transpose() + qh.row(i) * kv).dot(G.row(i));
                const bool guarded =
                    static_cast<T>(N) + qh.row(i).dot(ksum.transpose()) <
                    static_cast<T>(kDenomEps);
                ddenom(i) = guarded ? T(0) : -numer_dot_g / (denom(i) * denom(i));
              }
              if (need_v) {
                auto Gv = block_map(vn->grad_buffer().data(), w0 * N, m * d, N, d, D);
                VecX<T> dvsum = dnumer.colwise().sum().transpose();
                Gv.rowwise() += dvsum.transpose();
                Gv.noalias() += kh * (qh.transpose() * dnumer);
              }
              if (need_q) {
                MatRM<T> dqh(N, d);
                dqh.noalias() = dnumer * kv.transpose();
                dqh.noalias() += ddenom * ksum.transpose();
                auto Gq = block_map(qn->grad_buffer().data(), w0 * N, m * d, N, d, D);
                for (std::int64_t i = 0; i < N; ++i) {
                  const T n = qnorm[static_cast<std::size_t>(i)];
                  if (n > static_cast<T>(kNormEps)) {
                    const T dot = qh.row(i).dot(dqh.row(i));
                    Gq.row(i) += (dqh.row(i) - qh.row(i) * dot) / n;
                  } else {
                    Gq.row(i) += dqh.row(i) / static_cast<T>(kNormEps);
                  }
                }
              }
              if (need_k) {
                MatRM<T> dkh(N, d);
                MatRM<T> dkv(d, d);
                dkv.noalias() = qh.transpose() * dnumer;
                dkh.noalias() = V * dkv.transpose();
                VecX<T> dksum = qh.transpose() * ddenom;
                dkh.rowwise() += dksum.transpose();
                auto Gk = block_map(kn->grad_buffer().data(), w0 * N, m * d, N, d, D);
                for (std::int64_t i = 0; i < N; ++i) {
                  const T n = knorm[static_cast<std::size_t>(i)];
                  if (n > static_cast<T>(kNormEps)) {
                    const T dot = kh.row(i).dot(dkh.row(i));
                    Gk.row(i) += (dkh.row(i) - kh.row(i) * dot) / n;
                  } else {
                    Gk.row(i) += dkh.row(i) / static_cast<T>(kNormEps);
                  }
                }
              }
            }
          }
      },
      q, k, v);
  out.check_finite_debug();
  return out;
}

// Projection weights for one attention layer. All windows share them.
template <typename T>
struct AttentionParams {
  std::int64_t dim = 0;
  std::int64_t heads = 1;
  T scale = T(1);
  Parameter<T> wq, wk, wv, wo;

  std::int64_t head_dim() const { return dim / heads; }

  static AttentionParams init(std::int64_t dim, std::int64_t heads, Rng& rng,
                              const std::string& prefix, T scale = T(1)) {
    check_shape(dim % heads == 0, "attention: dim " + std::to_string(dim) +
                                      " not divisible by heads " + std::to_string(heads));
    AttentionParams p;
    p.dim = dim;
    p.heads = heads;
    p.scale = scale;
    const T std_ = T(1) / std::sqrt(static_cast<T>(dim));
    p.wq = Parameter<T>(Tensor<T>::randn({dim, dim}, rng, std_), prefix + ".wq");
    p.wk = Parameter<T>(Tensor<T>::randn({dim, dim}, rng, std_), prefix + ".wk");
    p.wv = Parameter<T>(Tensor<T>::randn({dim, dim}, rng, std_), prefix + ".wv");
    p.wo = Parameter<T>(Tensor<T>::randn({dim, dim}, rng, std_), prefix + ".wo");
    return p;
  }
};

namespace detail {

template <typename T>
Tensor<T> windowed_mhsa(const Tensor<T>& x, const AttentionParams<T>& p, std::int64_t side,
                        AttentionKind kind) {
  check_shape(x.ndim() == 4, "windowed attention: input must be 4-D");
  check_shape(x.dim(1) == p.dim, "windowed attention: input channels " +
                                     std::to_string(x.dim(1)) + " != attention dim " +
                                     std::to_string(p.dim));
  const std::int64_t B = x.dim(0), C = x.dim(1);
  auto [tokens3, layout] = window_partition(x, side);
  const std::int64_t rows = tokens3.dim(0) * tokens3.dim(1);
  Tensor<T> tokens = reshape(tokens3, {rows, C});
  Tensor<T> q = matmul(tokens, p.wq.tensor);
  Tensor<T> k = matmul(tokens, p.wk.tensor);
  Tensor<T> v = matmul(tokens, p.wv.tensor);
  Tensor<T> att = window_attention(q, k, v, B * layout.n_windows, layout.tokens(), p.heads, kind,
                                   p.scale);
  Tensor<T> proj = matmul(att, p.wo.tensor);
  Tensor<T> proj3 = reshape(proj, {B * layout.n_windows, layout.tokens(), C});
  return window_reverse(proj3, layout, B);
}

}  // namespace detail

// Window-based linear multi-head self-attention.
template <typename T>
Tensor<T> w_lmhsa(const Tensor<T>& x, const AttentionParams<T>& p, std::int64_t side) {
  return detail::windowed_mhsa(x, p, side, AttentionKind::linear);
}

// Exact-softmax window attention; the benchmark/ablation baseline.
template <typename T>
Tensor<T> w_mhsa_baseline(const Tensor<T>& x, const AttentionParams<T>& p, std::int64_t side) {
  return detail::windowed_mhsa(x, p, side, AttentionKind::exact);
}

}  // namespace winlin
