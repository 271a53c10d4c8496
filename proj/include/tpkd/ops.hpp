#pragma once
// Differentiable operations on Tensor<T>.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "tpkd/tensor.hpp"

namespace tpkd::ops {

namespace detail {

template <typename T>
void accumulate(TensorNode<T>& parent, std::span<const T> g) {
  if (!parent.requires_grad) return;
  auto& pg = parent.grad_buffer();
  for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
}

inline void require_same_shape(const std::vector<int>& a, const std::vector<int>& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void require_rank(const std::vector<int>& s, size_t rank, const char* op) {
  if (s.size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& n) {
    detail::accumulate<T>(*n.parents[0], n.grad);
    detail::accumulate<T>(*n.parents[1], n.grad);
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& n) {
    detail::accumulate<T>(*n.parents[0], n.grad);
    auto& p = *n.parents[1];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa.data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return make_result<T>(a.shape(), std::move(out), {a}, [s](TensorNode<T>& n) {
    auto& p = *n.parents[0];
    auto& g = p.grad_buffer();
    for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * s;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
  return make_result<T>(a.shape(), std::move(out), {a},
                        [](TensorNode<T>& n) { detail::accumulate<T>(*n.parents[0], n.grad); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  return make_result<T>(a.shape(), std::move(out), {a}, [](TensorNode<T>& n) {
    auto& p = *n.parents[0];
    auto& g = p.grad_buffer();
    for (size_t i = 0; i < g.size(); ++i) {
      if (p.data[i] > T(0)) g[i] += n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return make_result<T>({1}, {s}, {a}, [](TensorNode<T>& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (auto& v : g) v += n.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Same data under a new shape with equal element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int> shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return make_result<T>(std::move(shape), a.storage(), {a},
                        [](TensorNode<T>& n) { detail::accumulate<T>(*n.parents[0], n.grad); });
}

/// Collapses all dimensions after the first: [b, ...] -> [b, rest].
template <typename T>
Tensor<T> flatten_rows(const Tensor<T>& a) {
  int b = a.dim(0);
  return reshape(a, {b, static_cast<int>(a.numel() / static_cast<size_t>(b))});
}

// ------------------------------------------------------------ linear algebra

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a.shape(), 2, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<T> out(a.numel());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
  return make_result<T>({n, m}, std::move(out), {a}, [m, n](TensorNode<T>& node) {
    auto& p = *node.parents[0];
    auto& g = p.grad_buffer();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) g[static_cast<size_t>(i) * n + j] += node.grad[static_cast<size_t>(j) * m + i];
  });
}

namespace detail {
/// Dot product with eight independent partial sums (vectorizable).
template <typename T>
T dot(const T* a, const T* b, size_t n) {
  T acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

// c[m,p] += a[m,n] * b[n,p]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int m, int n, int p) {
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    T* c0 = c + static_cast<size_t>(i) * p;
    T* c1 = c0 + p;
    T* c2 = c1 + p;
    T* c3 = c2 + p;
    const T* ar = a + static_cast<size_t>(i) * n;
    for (int k = 0; k < n; ++k) {
      const T a0 = ar[k], a1 = ar[n + k], a2 = ar[2 * n + k], a3 = ar[3 * n + k];
      const T* brow = b + static_cast<size_t>(k) * p;
      for (int j = 0; j < p; ++j) {
        const T bv = brow[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    T* crow = c + static_cast<size_t>(i) * p;
    for (int k = 0; k < n; ++k) {
      const T av = a[static_cast<size_t>(i) * n + k];
      const T* brow = b + static_cast<size_t>(k) * p;
      for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}
// c[m,p] += a[m,n] * b[p,n]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int m, int n, int p) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * n;
    for (int j = 0; j < p; ++j) {
      c[static_cast<size_t>(i) * p + j] += dot(arow, b + static_cast<size_t>(j) * n, static_cast<size_t>(n));
    }
  }
}
// c[n,p] += a[m,n]^T * b[m,p]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int m, int n, int p) {
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    T* c0 = c + static_cast<size_t>(i) * p;
    T* c1 = c0 + p;
    T* c2 = c1 + p;
    T* c3 = c2 + p;
    for (int k = 0; k < m; ++k) {
      const T* ar = a + static_cast<size_t>(k) * n + i;
      const T a0 = ar[0], a1 = ar[1], a2 = ar[2], a3 = ar[3];
      const T* brow = b + static_cast<size_t>(k) * p;
      for (int j = 0; j < p; ++j) {
        const T bv = brow[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < n; ++i) {
    T* crow = c + static_cast<size_t>(i) * p;
    for (int k = 0; k < m; ++k) {
      const T av = a[static_cast<size_t>(k) * n + i];
      const T* brow = b + static_cast<size_t>(k) * p;
      for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}
}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a.shape(), 2, "matmul");
  detail::require_rank(b.shape(), 2, "matmul");
  const int m = a.dim(0), n = a.dim(1), p = b.dim(1);
  if (b.dim(0) != n) throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(static_cast<size_t>(m) * p, T(0));
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, n, p);
  return make_result<T>({m, p}, std::move(out), {a, b}, [m, n, p](TensorNode<T>& node) {
    auto& pa = *node.parents[0];
    auto& pb = *node.parents[1];
    if (pa.requires_grad) detail::gemm_nt(node.grad.data(), pb.data.data(), pa.grad_buffer().data(), m, p, n);
    if (pb.requires_grad) detail::gemm_tn(pa.data.data(), node.grad.data(), pb.grad_buffer().data(), m, n, p);
  });
}

/// Gram matrix of the rows: a[m,n] -> a * a^T [m,m].
template <typename T>
Tensor<T> row_gram(const Tensor<T>& a) {
  detail::require_rank(a.shape(), 2, "row_gram");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<T> out(static_cast<size_t>(m) * m, T(0));
  detail::gemm_nt(a.data().data(), a.data().data(), out.data(), m, n, m);
  return make_result<T>({m, m}, std::move(out), {a}, [m, n](TensorNode<T>& node) {
    auto& pa = *node.parents[0];
    // d/dA (A A^T) = (G + G^T) A
    std::vector<T> sym(static_cast<size_t>(m) * m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j)
        sym[static_cast<size_t>(i) * m + j] = node.grad[static_cast<size_t>(i) * m + j] + node.grad[static_cast<size_t>(j) * m + i];
    detail::gemm_nn(sym.data(), pa.data.data(), pa.grad_buffer().data(), m, m, n);
  });
}

/// x[b,in] * w[out,in]^T + bias[out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  detail::require_rank(x.shape(), 2, "linear");
  detail::require_rank(w.shape(), 2, "linear");
  const int b = x.dim(0), in = x.dim(1), outf = w.dim(0);
  if (w.dim(1) != in) throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (bias.numel() != static_cast<size_t>(outf)) throw ShapeError("linear: bias length mismatch");
  std::vector<T> out(static_cast<size_t>(b) * outf, T(0));
  detail::gemm_nt(x.data().data(), w.data().data(), out.data(), b, in, outf);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < outf; ++j) out[static_cast<size_t>(i) * outf + j] += bias.data()[j];
  return make_result<T>({b, outf}, std::move(out), {x, w, bias}, [b, in, outf](TensorNode<T>& node) {
    auto& px = *node.parents[0];
    auto& pw = *node.parents[1];
    auto& pb = *node.parents[2];
    if (px.requires_grad) detail::gemm_nn(node.grad.data(), pw.data.data(), px.grad_buffer().data(), b, outf, in);
    if (pw.requires_grad) detail::gemm_tn(node.grad.data(), px.data.data(), pw.grad_buffer().data(), b, outf, in);
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < outf; ++j) g[j] += node.grad[static_cast<size_t>(i) * outf + j];
    }
  });
}

// -------------------------------------------------------------- convolutions

namespace detail {

struct ConvGeometry {
  int C, H, W;     // input channels and spatial size
  int KH, KW;      // kernel
  int stride_h, stride_w, pad_h, pad_w;
  int Ho, Wo;

  int col_rows() const { return C * KH * KW; }
  int col_cols() const { return Ho * Wo; }
};

// col[(c*KH + kh)*KW + kw][y*Wo + x] = in[c][y*sh + kh - ph][x*sw + kw - pw] (0 outside).
// `ld` is the row stride of col, so several samples can share one matrix.
template <typename T>
void im2col(const T* in, const ConvGeometry& g, T* col, size_t ld) {
  for (int c = 0; c < g.C; ++c)
    for (int kh = 0; kh < g.KH; ++kh)
      for (int kw = 0; kw < g.KW; ++kw) {
        T* dst = col + static_cast<size_t>((c * g.KH + kh) * g.KW + kw) * ld;
        for (int y = 0; y < g.Ho; ++y) {
          const int iy = y * g.stride_h + kh - g.pad_h;
          T* row = dst + static_cast<size_t>(y) * g.Wo;
          if (iy < 0 || iy >= g.H) {
            std::fill(row, row + g.Wo, T(0));
            continue;
          }
          const T* src = in + (static_cast<size_t>(c) * g.H + iy) * g.W;
          for (int x = 0; x < g.Wo; ++x) {
            const int ix = x * g.stride_w + kw - g.pad_w;
            row[x] = (ix >= 0 && ix < g.W) ? src[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* in, size_t ld) {
  for (int c = 0; c < g.C; ++c)
    for (int kh = 0; kh < g.KH; ++kh)
      for (int kw = 0; kw < g.KW; ++kw) {
        const T* srcc = col + static_cast<size_t>((c * g.KH + kh) * g.KW + kw) * ld;
        for (int y = 0; y < g.Ho; ++y) {
          const int iy = y * g.stride_h + kh - g.pad_h;
          if (iy < 0 || iy >= g.H) continue;
          const T* row = srcc + static_cast<size_t>(y) * g.Wo;
          T* dst = in + (static_cast<size_t>(c) * g.H + iy) * g.W;
          for (int x = 0; x < g.Wo; ++x) {
            const int ix = x * g.stride_w + kw - g.pad_w;
            if (ix >= 0 && ix < g.W) dst[ix] += row[x];
          }
        }
      }
}

/// Convolution of x[B, C, H*W] with w[O, C*KH*KW]. Samples are processed in
/// chunks whose im2col matrices sit side by side, so each chunk is one GEMM.
template <typename T>
Tensor<T> conv_gemm(const Tensor<T>& x, const Tensor<T>& w, const ConvGeometry& g, std::vector<int> out_shape) {
  const int B = x.dim(0), O = w.dim(0);
  const int rows = g.col_rows(), cols = g.col_cols();
  const size_t in_per = static_cast<size_t>(g.C) * g.H * g.W;
  const size_t out_per = static_cast<size_t>(O) * cols;
  // keep the chunk's column matrix around a few MB
  const int chunk = std::clamp(static_cast<int>((1u << 15) / (static_cast<size_t>(rows) * cols)), 1, std::max(B, 1));

  std::vector<T> out(static_cast<size_t>(B) * out_per, T(0));
  std::vector<T> col(static_cast<size_t>(rows) * cols * chunk);
  std::vector<T> res(out_per * chunk);
  for (int b0 = 0; b0 < B; b0 += chunk) {
    const int nb = std::min(chunk, B - b0);
    const size_t ld = static_cast<size_t>(nb) * cols;
    for (int s = 0; s < nb; ++s) im2col(x.data().data() + (b0 + s) * in_per, g, col.data() + s * cols, ld);
    std::fill(res.begin(), res.begin() + static_cast<std::ptrdiff_t>(O * ld), T(0));
    gemm_nn(w.data().data(), col.data(), res.data(), O, rows, static_cast<int>(ld));
    for (int o = 0; o < O; ++o)
      for (int s = 0; s < nb; ++s)
        std::copy_n(res.data() + o * ld + static_cast<size_t>(s) * cols, cols,
                    out.data() + (b0 + s) * out_per + static_cast<size_t>(o) * cols);
  }
  return make_result<T>(std::move(out_shape), std::move(out), {x, w}, [=](TensorNode<T>& node) {
    auto& px = *node.parents[0];
    auto& pw = *node.parents[1];
    T* gx = px.requires_grad ? px.grad_buffer().data() : nullptr;
    T* gw = pw.requires_grad ? pw.grad_buffer().data() : nullptr;
    std::vector<T> colb(gw ? static_cast<size_t>(rows) * cols * chunk : 0);
    std::vector<T> dcol(gx ? static_cast<size_t>(rows) * cols * chunk : 0);
    std::vector<T> gout(out_per * chunk);
    for (int b0 = 0; b0 < B; b0 += chunk) {
      const int nb = std::min(chunk, B - b0);
      const size_t ld = static_cast<size_t>(nb) * cols;
      for (int o = 0; o < O; ++o)
        for (int s = 0; s < nb; ++s)
          std::copy_n(node.grad.data() + (b0 + s) * out_per + static_cast<size_t>(o) * cols, cols,
                      gout.data() + o * ld + static_cast<size_t>(s) * cols);
      if (gw) {
        for (int s = 0; s < nb; ++s) im2col(px.data.data() + (b0 + s) * in_per, g, colb.data() + s * cols, ld);
        gemm_nt(gout.data(), colb.data(), gw, O, static_cast<int>(ld), rows);
      }
      if (gx) {
        std::fill(dcol.begin(), dcol.begin() + static_cast<std::ptrdiff_t>(rows * ld), T(0));
        gemm_tn(pw.data.data(), gout.data(), dcol.data(), O, rows, static_cast<int>(ld));
        for (int s = 0; s < nb; ++s) col2im(dcol.data() + s * cols, g, gx + (b0 + s) * in_per, ld);
      }
    }
  });
}

}  // namespace detail

/// x[b,c,l] (*) w[o,c,k], zero padding on both ends, no bias.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  detail::require_rank(x.shape(), 3, "conv1d");
  detail::require_rank(w.shape(), 3, "conv1d");
  const int B = x.dim(0), C = x.dim(1), L = x.dim(2), O = w.dim(0), K = w.dim(2);
  if (w.dim(1) != C) throw ShapeError("conv1d: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const int Lo = (L + 2 * pad - K) / stride + 1;
  if (Lo <= 0) throw ShapeError("conv1d: input too short for kernel");
  detail::ConvGeometry g{C, 1, L, 1, K, 1, stride, 0, pad, 1, Lo};
  return detail::conv_gemm(x, w, g, {B, O, Lo});
}

/// x[b,c,h,w] (*) w[o,c,kh,kw], symmetric zero padding, no bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  detail::require_rank(x.shape(), 4, "conv2d");
  detail::require_rank(w.shape(), 4, "conv2d");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  if (w.dim(1) != C) throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const int Ho = (H + 2 * pad - KH) / stride + 1;
  const int Wo = (W + 2 * pad - KW) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: input too small for kernel");
  detail::ConvGeometry g{C, H, W, KH, KW, stride, stride, pad, pad, Ho, Wo};
  return detail::conv_gemm(x, w, g, {B, O, Ho, Wo});
}

// ------------------------------------------------------------ normalization

/// Per-channel batch normalization over all dims except dim 1. In training
/// mode batch statistics are used and the running buffers updated in place.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.rank() < 2) throw ShapeError("batch_norm: input must have a channel dimension");
  const int B = x.dim(0), C = x.dim(1);
  const size_t S = x.numel() / (static_cast<size_t>(B) * C);
  if (gamma.numel() != static_cast<size_t>(C)) throw ShapeError("batch_norm: gamma length mismatch");
  const size_t N = static_cast<size_t>(B) * S;
  const T* xd = x.data().data();

  std::vector<T> mu(C), inv_std(C);
  if (training) {
    if (N < 2) throw ShapeError("batch_norm: training mode needs more than one value per channel");
    for (int c = 0; c < C; ++c) {
      double s = 0, ss = 0;
      for (int b = 0; b < B; ++b) {
        const T* p = xd + (static_cast<size_t>(b) * C + c) * S;
        for (size_t i = 0; i < S; ++i) s += p[i];
      }
      double m = s / static_cast<double>(N);
      for (int b = 0; b < B; ++b) {
        const T* p = xd + (static_cast<size_t>(b) * C + c) * S;
        for (size_t i = 0; i < S; ++i) ss += (p[i] - m) * (p[i] - m);
      }
      double var = ss / static_cast<double>(N);
      mu[c] = static_cast<T>(m);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      auto& rm = running_mean.storage();
      auto& rv = running_var.storage();
      rm[c] = (T(1) - momentum) * rm[c] + momentum * static_cast<T>(m);
      rv[c] = (T(1) - momentum) * rv[c] + momentum * static_cast<T>(ss / static_cast<double>(N - 1));
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mu[c] = running_mean.data()[c];
      inv_std[c] = T(1) / std::sqrt(running_var.data()[c] + eps);
    }
  }

  std::vector<T> xhat(x.numel()), out(x.numel());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const size_t off = (static_cast<size_t>(b) * C + c) * S;
      const T g = gamma.data()[c], be = beta.data()[c];
      for (size_t i = 0; i < S; ++i) {
        xhat[off + i] = (xd[off + i] - mu[c]) * inv_std[c];
        out[off + i] = g * xhat[off + i] + be;
      }
    }

  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [B, C, S, N, training, xhat = std::move(xhat), inv_std](TensorNode<T>& node) {
    auto& px = *node.parents[0];
    auto& pg = *node.parents[1];
    auto& pb = *node.parents[2];
    const T* g = node.grad.data();
    std::vector<T> sum_g(C, T(0)), sum_gx(C, T(0));
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const size_t off = (static_cast<size_t>(b) * C + c) * S;
        T s = 0, sx = 0;
        for (size_t i = 0; i < S; ++i) {
          s += g[off + i];
          sx += g[off + i] * xhat[off + i];
        }
        sum_g[c] += s;
        sum_gx[c] += sx;
      }
    if (pg.requires_grad) {
      auto& gg = pg.grad_buffer();
      for (int c = 0; c < C; ++c) gg[c] += sum_gx[c];
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (int c = 0; c < C; ++c) gb[c] += sum_g[c];
    }
    if (!px.requires_grad) return;
    auto& gx = px.grad_buffer();
    const T invN = T(1) / static_cast<T>(N);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const size_t off = (static_cast<size_t>(b) * C + c) * S;
        const T gam = pg.data[c];
        if (training) {
          // dx = gamma * inv_std / N * (N*dy - sum(dy) - xhat*sum(dy*xhat))
          const T k = gam * inv_std[c] * invN;
          for (size_t i = 0; i < S; ++i)
            gx[off + i] += k * (static_cast<T>(N) * g[off + i] - sum_g[c] - xhat[off + i] * sum_gx[c]);
        } else {
          const T k = gam * inv_std[c];
          for (size_t i = 0; i < S; ++i) gx[off + i] += k * g[off + i];
        }
      }
  });
}

/// Mean over all dims after the first two: [b,c,...] -> [b,c].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() < 3) throw ShapeError("global_avg_pool: expected [b,c,...], got " + shape_str(x.shape()));
  const int B = x.dim(0), C = x.dim(1);
  const size_t S = x.numel() / (static_cast<size_t>(B) * C);
  std::vector<T> out(static_cast<size_t>(B) * C);
  for (size_t r = 0; r < out.size(); ++r) {
    T s = 0;
    for (size_t i = 0; i < S; ++i) s += x.data()[r * S + i];
    out[r] = s / static_cast<T>(S);
  }
  return make_result<T>({B, C}, std::move(out), {x}, [S](TensorNode<T>& node) {
    auto& g = node.parents[0]->grad_buffer();
    const T inv = T(1) / static_cast<T>(S);
    for (size_t r = 0; r < node.grad.size(); ++r)
      for (size_t i = 0; i < S; ++i) g[r * S + i] += node.grad[r] * inv;
  });
}

/// Divides each row of a[m,n] by its L2 norm (rows of zero norm stay zero).
template <typename T>
Tensor<T> row_l2_normalize(const Tensor<T>& a, T eps = T(1e-12)) {
  detail::require_rank(a.shape(), 2, "row_l2_normalize");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<T> out(a.numel()), norms(m);
  for (int i = 0; i < m; ++i) {
    T s = 0;
    for (int j = 0; j < n; ++j) s += a.data()[static_cast<size_t>(i) * n + j] * a.data()[static_cast<size_t>(i) * n + j];
    norms[i] = std::max(std::sqrt(s), eps);
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] = a.data()[static_cast<size_t>(i) * n + j] / norms[i];
  }
  return make_result<T>(a.shape(), out, {a}, [m, n, norms, y = out](TensorNode<T>& node) {
    auto& g = node.parents[0]->grad_buffer();
    for (int i = 0; i < m; ++i) {
      const size_t off = static_cast<size_t>(i) * n;
      T dot = 0;
      for (int j = 0; j < n; ++j) dot += y[off + j] * node.grad[off + j];
      for (int j = 0; j < n; ++j) g[off + j] += (node.grad[off + j] - y[off + j] * dot) / norms[i];
    }
  });
}

/// Divides the whole tensor by its Frobenius norm.
template <typename T>
Tensor<T> frobenius_normalize(const Tensor<T>& a, T eps = T(1e-12)) {
  T s = 0;
  for (T v : a.data()) s += v * v;
  const T norm = std::max(std::sqrt(s), eps);
  std::vector<T> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / norm;
  return make_result<T>(a.shape(), out, {a}, [norm, y = out](TensorNode<T>& node) {
    auto& g = node.parents[0]->grad_buffer();
    T dot = 0;
    for (size_t i = 0; i < y.size(); ++i) dot += y[i] * node.grad[i];
    for (size_t i = 0; i < y.size(); ++i) g[i] += (node.grad[i] - y[i] * dot) / norm;
  });
}

// ------------------------------------------------------------ softmax family

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  detail::require_rank(a.shape(), 2, "log_softmax");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<T> out(a.numel());
  for (int i = 0; i < m; ++i) {
    const T* r = a.data().data() + static_cast<size_t>(i) * n;
    T mx = *std::max_element(r, r + n);
    T s = 0;
    for (int j = 0; j < n; ++j) s += std::exp(r[j] - mx);
    const T lse = mx + std::log(s);
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] = r[j] - lse;
  }
  return make_result<T>(a.shape(), out, {a}, [m, n, y = out](TensorNode<T>& node) {
    auto& g = node.parents[0]->grad_buffer();
    for (int i = 0; i < m; ++i) {
      const size_t off = static_cast<size_t>(i) * n;
      T s = 0;
      for (int j = 0; j < n; ++j) s += node.grad[off + j];
      for (int j = 0; j < n; ++j) g[off + j] += node.grad[off + j] - std::exp(y[off + j]) * s;
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  detail::require_rank(a.shape(), 2, "softmax");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<T> out(a.numel());
  for (int i = 0; i < m; ++i) {
    const T* r = a.data().data() + static_cast<size_t>(i) * n;
    T mx = *std::max_element(r, r + n);
    T s = 0;
    for (int j = 0; j < n; ++j) s += (out[static_cast<size_t>(i) * n + j] = std::exp(r[j] - mx));
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] /= s;
  }
  return make_result<T>(a.shape(), out, {a}, [m, n, y = out](TensorNode<T>& node) {
    auto& g = node.parents[0]->grad_buffer();
    for (int i = 0; i < m; ++i) {
      const size_t off = static_cast<size_t>(i) * n;
      T dot = 0;
      for (int j = 0; j < n; ++j) dot += node.grad[off + j] * y[off + j];
      for (int j = 0; j < n; ++j) g[off + j] += y[off + j] * (node.grad[off + j] - dot);
    }
  });
}

/// Mean negative log-likelihood of integer labels under softmax(logits).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  detail::require_rank(logits.shape(), 2, "cross_entropy");
  const int m = logits.dim(0), n = logits.dim(1);
  if (labels.size() != static_cast<size_t>(m)) throw ShapeError("cross_entropy: label count differs from batch size");
  std::vector<T> prob(logits.numel());
  T loss = 0;
  for (int i = 0; i < m; ++i) {
    if (labels[i] < 0 || labels[i] >= n) throw InputError("cross_entropy: label out of range");
    const T* r = logits.data().data() + static_cast<size_t>(i) * n;
    T mx = *std::max_element(r, r + n);
    T s = 0;
    for (int j = 0; j < n; ++j) s += (prob[static_cast<size_t>(i) * n + j] = std::exp(r[j] - mx));
    for (int j = 0; j < n; ++j) prob[static_cast<size_t>(i) * n + j] /= s;
    loss -= r[labels[i]] - mx - std::log(s);
  }
  loss /= static_cast<T>(m);
  std::vector<int> y(labels.begin(), labels.end());
  return make_result<T>({1}, {loss}, {logits}, [m, n, prob = std::move(prob), y = std::move(y)](TensorNode<T>& node) {
    auto& g = node.parents[0]->grad_buffer();
    const T k = node.grad[0] / static_cast<T>(m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        const size_t idx = static_cast<size_t>(i) * n + j;
        g[idx] += k * (prob[idx] - (j == y[i] ? T(1) : T(0)));
      }
  });
}

// ------------------------------------------------------------ patch grams

/// For each row v of g[b,n] (n divisible by k, d = n/k) forms the d x k patch
/// matrix P with P[r][c] = v[c*d + r] and returns P^T P - I, stacked as
/// [b,k,k].
template <typename T>
Tensor<T> patch_gram(const Tensor<T>& g, int k) {
  detail::require_rank(g.shape(), 2, "patch_gram");
  const int b = g.dim(0), n = g.dim(1);
  if (k <= 0 || n % k != 0)
    throw ShapeError("patch_gram: row length " + std::to_string(n) + " is not divisible by k=" + std::to_string(k) +
                     "; use drop-last batching so the batch size is a multiple of k");
  const int d = n / k;
  std::vector<T> out(static_cast<size_t>(b) * k * k);
  for (int i = 0; i < b; ++i) {
    const T* v = g.data().data() + static_cast<size_t>(i) * n;
    T* o = out.data() + static_cast<size_t>(i) * k * k;
    for (int c1 = 0; c1 < k; ++c1)
      for (int c2 = 0; c2 < k; ++c2) {
        T s = 0;
        for (int r = 0; r < d; ++r) s += v[c1 * d + r] * v[c2 * d + r];
        o[c1 * k + c2] = s - (c1 == c2 ? T(1) : T(0));
      }
  }
  return make_result<T>({b, k, k}, std::move(out), {g}, [b, n, k, d](TensorNode<T>& node) {
    auto& p = *node.parents[0];
    auto& gg = p.grad_buffer();
    for (int i = 0; i < b; ++i) {
      const T* v = p.data.data() + static_cast<size_t>(i) * n;
      const T* go = node.grad.data() + static_cast<size_t>(i) * k * k;
      T* gv = gg.data() + static_cast<size_t>(i) * n;
      for (int c1 = 0; c1 < k; ++c1)
        for (int c2 = 0; c2 < k; ++c2) {
          const T w = go[c1 * k + c2] + go[c2 * k + c1];
          for (int r = 0; r < d; ++r) gv[c1 * d + r] += w * v[c2 * d + r];
        }
    }
  });
}

}  // namespace tpkd::ops
