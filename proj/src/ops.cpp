#include "faudit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>

namespace faudit::ops {

namespace {

Tensor finish(Shape shape, std::vector<double> data, const char* op, std::vector<Tensor> inputs,
              BackwardFn fn) {
  Tensor out = make_result(std::move(shape), std::move(data), op);
  Tape::current().record(out, std::move(inputs), std::move(fn));
  return out;
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(x.shape()));
  }
}

enum class Broadcast { same, left_scalar, right_scalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (a.size() == 1) return Broadcast::left_scalar;
  if (b.size() == 1) return Broadcast::right_scalar;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                       shape_str(b.shape()));
}

// Accumulates g (full size) into a gradient buffer that may be a scalar.
void accumulate(double* dst, bool scalar, std::span<const double> g) {
  if (!dst) return;
  if (scalar) {
    double s = 0.0;
    for (double v : g) s += v;
    dst[0] += s;
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
}

using v4d = double __attribute__((vector_size(32)));

inline v4d load4(const double* p) {
  v4d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void add_store4(double* p, v4d v) {
  v += load4(p);
  std::memcpy(p, &v, sizeof v);
}

// C[m,n] += A[m,k] B[k,n]. A is addressed with explicit strides so that a
// transposed operand needs no copy; B and C are row-major.
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t a_rs,
          std::size_t a_cs, const double* b, std::size_t ldb, double* c, std::size_t ldc) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = a + i * a_rs;
    const double* a1 = a0 + a_rs;
    const double* a2 = a1 + a_rs;
    const double* a3 = a2 + a_rs;
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      v4d c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
      for (std::size_t p = 0; p < k; ++p) {
        const double* bp = b + p * ldb + j;
        const v4d b0 = load4(bp), b1 = load4(bp + 4);
        const std::size_t ap = p * a_cs;
        c00 += a0[ap] * b0;
        c01 += a0[ap] * b1;
        c10 += a1[ap] * b0;
        c11 += a1[ap] * b1;
        c20 += a2[ap] * b0;
        c21 += a2[ap] * b1;
        c30 += a3[ap] * b0;
        c31 += a3[ap] * b1;
      }
      double* cr = c + i * ldc + j;
      add_store4(cr, c00);
      add_store4(cr + 4, c01);
      add_store4(cr + ldc, c10);
      add_store4(cr + ldc + 4, c11);
      add_store4(cr + 2 * ldc, c20);
      add_store4(cr + 2 * ldc + 4, c21);
      add_store4(cr + 3 * ldc, c30);
      add_store4(cr + 3 * ldc + 4, c31);
    }
    for (; j < n; ++j) {
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double bv = b[p * ldb + j];
        const std::size_t ap = p * a_cs;
        s0 += a0[ap] * bv;
        s1 += a1[ap] * bv;
        s2 += a2[ap] * bv;
        s3 += a3[ap] * bv;
      }
      c[i * ldc + j] += s0;
      c[(i + 1) * ldc + j] += s1;
      c[(i + 2) * ldc + j] += s2;
      c[(i + 3) * ldc + j] += s3;
    }
  }
  for (; i < m; ++i) {
    double* crow = c + i * ldc;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * a_rs + p * a_cs];
      const double* bp = b + p * ldb;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * bp[j];
    }
  }
}

std::vector<double> transposed(const double* x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = x[i * cols + j];
  return t;
}

template <typename F>
Tensor unary(const Tensor& x, const char* op, F&& f) {
  std::vector<double> out(x.size());
  const double* px = x.raw();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(px[i]);
  return make_result(x.shape(), std::move(out), op);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const auto kind = broadcast_kind(a, b, "add");
  const Shape shape = kind == Broadcast::left_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_size(shape);
  std::vector<double> out(n);
  const double* pa = a.raw();
  const double* pb = b.raw();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = pa[kind == Broadcast::left_scalar ? 0 : i] + pb[kind == Broadcast::right_scalar ? 0 : i];
  }
  return finish(shape, std::move(out), "add", {a, b}, [kind](std::span<const double> g, GradInputs gi) {
    accumulate(gi[0], kind == Broadcast::left_scalar, g);
    accumulate(gi[1], kind == Broadcast::right_scalar, g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto kind = broadcast_kind(a, b, "mul");
  const Shape shape = kind == Broadcast::left_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_size(shape);
  std::vector<double> out(n);
  const double* pa = a.raw();
  const double* pb = b.raw();
  const bool ls = kind == Broadcast::left_scalar;
  const bool rs = kind == Broadcast::right_scalar;
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[ls ? 0 : i] * pb[rs ? 0 : i];
  auto ia = a.impl();
  auto ib = b.impl();
  return finish(shape, std::move(out), "mul", {a, b},
                [ia, ib, ls, rs](std::span<const double> g, GradInputs gi) {
                  const double* pa = ia->data.data();
                  const double* pb = ib->data.data();
                  if (double* ga = gi[0]) {
                    for (std::size_t i = 0; i < g.size(); ++i) ga[ls ? 0 : i] += g[i] * pb[rs ? 0 : i];
                  }
                  if (double* gb = gi[1]) {
                    for (std::size_t i = 0; i < g.size(); ++i) gb[rs ? 0 : i] += g[i] * pa[ls ? 0 : i];
                  }
                });
}

Tensor scale(const Tensor& x, double factor) {
  auto out = unary(x, "scale", [factor](double v) { return v * factor; });
  Tape::current().record(out, {x}, [factor](std::span<const double> g, GradInputs gi) {
    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * factor;
  });
  return out;
}

Tensor relu(const Tensor& x) {
  auto out = unary(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; });
  auto ix = x.impl();
  Tape::current().record(out, {x}, [ix](std::span<const double> g, GradInputs gi) {
    const double* px = ix->data.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (px[i] > 0.0) gi[0][i] += g[i];
    }
  });
  return out;
}

Tensor exp(const Tensor& x) {
  auto out = unary(x, "exp", [](double v) { return std::exp(v); });
  auto io = out.impl();
  // Weak reference: the tape already keeps the output alive while it matters.
  std::weak_ptr<TensorImpl> wo = io;
  Tape::current().record(out, {x}, [wo](std::span<const double> g, GradInputs gi) {
    auto o = wo.lock();
    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * o->data[i];
  });
  return out;
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  auto out = unary(x, "log", [](double v) { return std::log(v); });
  auto ix = x.impl();
  Tape::current().record(out, {x}, [ix](std::span<const double> g, GradInputs gi) {
    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] / ix->data[i];
  });
  return out;
}

Tensor sigmoid(const Tensor& x) {
  auto out = unary(x, "sigmoid", [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  std::weak_ptr<TensorImpl> wo = out.impl();
  Tape::current().record(out, {x}, [wo](std::span<const double> g, GradInputs gi) {
    auto o = wo.lock();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = o->data[i];
      gi[0][i] += g[i] * y * (1.0 - y);
    }
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " @ " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm(m, n, k, a.raw(), k, 1, b.raw(), n, out.data(), n);
  auto ia = a.impl();
  auto ib = b.impl();
  return finish({m, n}, std::move(out), "matmul", {a, b},
                [ia, ib, m, k, n](std::span<const double> g, GradInputs gi) {
                  if (double* ga = gi[0]) {
                    // dA = dC B^T
                    const auto bt = transposed(ib->data.data(), k, n);
                    gemm(m, k, n, g.data(), n, 1, bt.data(), k, ga, k);
                  }
                  if (double* gb = gi[1]) {
                    // dB = A^T dC
                    gemm(k, n, m, ia->data.data(), 1, k, g.data(), n, gb, n);
                  }
                });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  const double* px = x.raw();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = px[i * c + j];
  return finish({c, r}, std::move(out), "transpose", {x},
                [r, c](std::span<const double> g, GradInputs gi) {
                  for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gi[0][i * c + j] += g[j * r + i];
                });
}

Tensor softmax(const Tensor& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  if (rank == 0) throw DimensionError("softmax: scalar input");
  const int ax = axis < 0 ? axis + rank : axis;
  if (ax < 0 || ax >= rank) throw DimensionError("softmax: axis out of range");
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= shape[i];
  for (int i = ax + 1; i < rank; ++i) inner *= shape[i];
  const std::size_t n = shape[ax];
  if (n == 0) throw DimensionError("softmax: empty axis");

  std::vector<double> out(x.size());
  const double* px = x.raw();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, px[base + j * inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(px[base + j * inner] - mx);
        out[base + j * inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= s;
    }
  }
  Tensor result = make_result(shape, std::move(out), "softmax");
  std::weak_ptr<TensorImpl> wo = result.impl();
  Tape::current().record(result, {x}, [wo, outer, inner, n](std::span<const double> g, GradInputs gi) {
    auto o = wo.lock();
    const double* y = o->data.data();
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = a * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          gi[0][idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
  return result;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const std::size_t n = x.size();
  return finish({}, {s}, "sum", {x}, [n](std::span<const double> g, GradInputs gi) {
    for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return finish(std::move(shape), std::move(out), "reshape", {x},
                [](std::span<const double> g, GradInputs gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                });
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  require_rank(x, 3, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const std::size_t c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t c_out = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != c_in) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                         " input channels, got " + std::to_string(c_in));
  }
  const std::size_t hp = h + 2 * padding, wp = w + 2 * padding;
  if (kh > hp || kw > wp || kh == 0 || kw == 0) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  if ((hp - kh) % stride != 0 || (wp - kw) % stride != 0) {
    throw DimensionError("conv2d: non-integer output size");
  }
  const std::size_t oh = (hp - kh) / stride + 1, ow = (wp - kw) / stride + 1;
  const std::size_t rows = c_in * kh * kw, cols_n = oh * ow;

  auto cols = std::make_shared<std::vector<double>>(rows * cols_n, 0.0);
  const double* px = x.raw();
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        double* dst = cols->data() + ((c * kh + ky) * kw + kx) * cols_n;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            dst[oy * ow + ox] = px[(c * h + iy) * w + ix];
          }
        }
      }

  std::vector<double> out(c_out * cols_n, 0.0);
  gemm(c_out, cols_n, rows, kernel.raw(), rows, 1, cols->data(), cols_n, out.data(), cols_n);

  auto ik = kernel.impl();
  return finish(
      {c_out, oh, ow}, std::move(out), "conv2d", {x, kernel},
      [cols, ik, c_in, h, w, c_out, kh, kw, oh, ow, stride, padding, rows,
       cols_n](std::span<const double> g, GradInputs gi) {
        if (double* gk = gi[1]) {
          // dK^T = cols dC^T, computed as [rows, c_out] so the wide axis is contiguous.
          const auto gt = transposed(g.data(), c_out, cols_n);
          std::vector<double> gkt(rows * c_out, 0.0);
          gemm(rows, c_out, cols_n, cols->data(), cols_n, 1, gt.data(), c_out, gkt.data(), c_out);
          for (std::size_t o = 0; o < c_out; ++o)
            for (std::size_t r = 0; r < rows; ++r) gk[o * rows + r] += gkt[r * c_out + o];
        }
        if (double* gx = gi[0]) {
          // dcols = K^T dC
          std::vector<double> gcols(rows * cols_n, 0.0);
          gemm(rows, cols_n, c_out, ik->data.data(), 1, rows, g.data(), cols_n, gcols.data(),
               cols_n);
          for (std::size_t c = 0; c < c_in; ++c)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const double* src = gcols.data() + ((c * kh + ky) * kw + kx) * cols_n;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                  const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  for (std::size_t ox = 0; ox < ow; ++ox) {
                    const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                    if (ix < 0 || ix >= static_cast<long>(w)) continue;
                    gx[(c * h + iy) * w + ix] += src[oy * ow + ox];
                  }
                }
              }
        }
      });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 1 || bias.size() != x.dim(0)) {
    throw DimensionError("add_channel_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  const std::size_t c = x.dim(0), per = x.size() / std::max<std::size_t>(c, 1);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < per; ++i) out[ch * per + i] += bias[ch];
  return finish(x.shape(), std::move(out), "add_channel_bias", {x, bias},
                [c, per](std::span<const double> g, GradInputs gi) {
                  if (double* gx = gi[0])
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                  if (double* gb = gi[1])
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      double s = 0.0;
                      for (std::size_t i = 0; i < per; ++i) s += g[ch * per + i];
                      gb[ch] += s;
                    }
                });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (bias.size() != d) {
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const double* pb = bias.raw();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += pb[j];
  return finish(x.shape(), std::move(out), "add_row_bias", {x, bias},
                [n, d](std::span<const double> g, GradInputs gi) {
                  if (double* gx = gi[0])
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                  if (double* gb = gi[1])
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                });
}

Tensor pool2d(const Tensor& x, PoolKind kind, std::size_t window) {
  require_rank(x, 3, "pool2d");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == 0 || w == 0) throw DimensionError("pool2d: empty spatial dims");
  const double* px = x.raw();

  if (kind == PoolKind::global_avg || kind == PoolKind::global_max) {
    const std::size_t hw = h * w;
    std::vector<double> out(c);
    auto argmax = std::make_shared<std::vector<std::size_t>>(c, 0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* src = px + ch * hw;
      if (kind == PoolKind::global_avg) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += src[i];
        out[ch] = s / static_cast<double>(hw);
      } else {
        std::size_t best = 0;
        for (std::size_t i = 1; i < hw; ++i)
          if (src[i] > src[best]) best = i;
        (*argmax)[ch] = best;
        out[ch] = src[best];
      }
    }
    const bool is_avg = kind == PoolKind::global_avg;
    return finish({c, 1, 1}, std::move(out), "pool2d", {x},
                  [argmax, is_avg, c, hw](std::span<const double> g, GradInputs gi) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      if (is_avg) {
                        const double v = g[ch] / static_cast<double>(hw);
                        for (std::size_t i = 0; i < hw; ++i) gi[0][ch * hw + i] += v;
                      } else {
                        gi[0][ch * hw + (*argmax)[ch]] += g[ch];
                      }
                    }
                  });
  }

  if (window == 0 || window > h || window > w) {
    throw DimensionError("pool2d: window " + std::to_string(window) + " does not fit " +
                         shape_str(x.shape()));
  }
  const std::size_t oh = h / window, ow = w / window;
  std::vector<double> out(c * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  const bool is_max = kind == PoolKind::max;
  if (is_max) argmax->resize(out.size());
  const double inv = 1.0 / static_cast<double>(window * window);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t o = (ch * oh + oy) * ow + ox;
        double acc = is_max ? -std::numeric_limits<double>::infinity() : 0.0;
        std::size_t best = 0;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = (ch * h + oy * window + dy) * w + ox * window + dx;
            if (is_max) {
              if (px[idx] > acc) {
                acc = px[idx];
                best = idx;
              }
            } else {
              acc += px[idx];
            }
          }
        if (is_max) {
          out[o] = acc;
          (*argmax)[o] = best;
        } else {
          out[o] = acc * inv;
        }
      }
  return finish({c, oh, ow}, std::move(out), "pool2d", {x},
                [argmax, is_max, c, h, w, oh, ow, window, inv](std::span<const double> g,
                                                                GradInputs gi) {
                  if (is_max) {
                    for (std::size_t o = 0; o < g.size(); ++o) gi[0][(*argmax)[o]] += g[o];
                    return;
                  }
                  for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t oy = 0; oy < oh; ++oy)
                      for (std::size_t ox = 0; ox < ow; ++ox) {
                        const double v = g[(ch * oh + oy) * ow + ox] * inv;
                        for (std::size_t dy = 0; dy < window; ++dy)
                          for (std::size_t dx = 0; dx < window; ++dx)
                            gi[0][(ch * h + oy * window + dy) * w + ox * window + dx] += v;
                      }
                });
}

Tensor channel_mean(const Tensor& x) {
  require_rank(x, 3, "channel_mean");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (c == 0) throw DimensionError("channel_mean: no channels");
  std::vector<double> out(hw, 0.0);
  const double* px = x.raw();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[i] += px[ch * hw + i];
  const double inv = 1.0 / static_cast<double>(c);
  for (double& v : out) v *= inv;
  return finish({1, x.dim(1), x.dim(2)}, std::move(out), "channel_mean", {x},
                [c, hw, inv](std::span<const double> g, GradInputs gi) {
                  for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < hw; ++i) gi[0][ch * hw + i] += g[i] * inv;
                });
}

Tensor channel_max(const Tensor& x) {
  require_rank(x, 3, "channel_max");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (c == 0) throw DimensionError("channel_max: no channels");
  std::vector<double> out(hw);
  auto argmax = std::make_shared<std::vector<std::size_t>>(hw, 0);
  const double* px = x.raw();
  for (std::size_t i = 0; i < hw; ++i) {
    std::size_t best = 0;
    for (std::size_t ch = 1; ch < c; ++ch)
      if (px[ch * hw + i] > px[best * hw + i]) best = ch;
    (*argmax)[i] = best;
    out[i] = px[best * hw + i];
  }
  return finish({1, x.dim(1), x.dim(2)}, std::move(out), "channel_max", {x},
                [argmax, hw](std::span<const double> g, GradInputs gi) {
                  for (std::size_t i = 0; i < hw; ++i) gi[0][(*argmax)[i] * hw + i] += g[i];
                });
}

Tensor scale_channels(const Tensor& x, const Tensor& s) {
  require_rank(x, 3, "scale_channels");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (s.size() != c) {
    throw DimensionError("scale_channels: scale " + shape_str(s.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.size());
  const double* px = x.raw();
  const double* ps = s.raw();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = px[ch * hw + i] * ps[ch];
  auto ix = x.impl();
  auto is = s.impl();
  return finish(x.shape(), std::move(out), "scale_channels", {x, s},
                [ix, is, c, hw](std::span<const double> g, GradInputs gi) {
                  const double* px = ix->data.data();
                  const double* ps = is->data.data();
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    if (double* gx = gi[0])
                      for (std::size_t i = 0; i < hw; ++i) gx[ch * hw + i] += g[ch * hw + i] * ps[ch];
                    if (double* gs = gi[1]) {
                      double acc = 0.0;
                      for (std::size_t i = 0; i < hw; ++i) acc += g[ch * hw + i] * px[ch * hw + i];
                      gs[ch] += acc;
                    }
                  }
                });
}

Tensor scale_spatial(const Tensor& x, const Tensor& m) {
  require_rank(x, 3, "scale_spatial");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (m.size() != hw) {
    throw DimensionError("scale_spatial: map " + shape_str(m.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.size());
  const double* px = x.raw();
  const double* pm = m.raw();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = px[ch * hw + i] * pm[i];
  auto ix = x.impl();
  auto im = m.impl();
  return finish(x.shape(), std::move(out), "scale_spatial", {x, m},
                [ix, im, c, hw](std::span<const double> g, GradInputs gi) {
                  const double* px = ix->data.data();
                  const double* pm = im->data.data();
                  for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < hw; ++i) {
                      const double gv = g[ch * hw + i];
                      if (gi[0]) gi[0][ch * hw + i] += gv * pm[i];
                      if (gi[1]) gi[1][i] += gv * px[ch * hw + i];
                    }
                });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank(x, 2, "slice_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (begin + count > n) throw DimensionError("slice_rows: range exceeds " + shape_str(x.shape()));
  std::vector<double> out(x.data().begin() + begin * d, x.data().begin() + (begin + count) * d);
  return finish({count, d}, std::move(out), "slice_rows", {x},
                [begin, d](std::span<const double> g, GradInputs gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) gi[0][begin * d + i] += g[i];
                });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "concat_rows");
  require_rank(b, 2, "concat_rows");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("concat_rows: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  const std::size_t na = a.size();
  return finish({a.dim(0) + b.dim(0), a.dim(1)}, std::move(out), "concat_rows", {a, b},
                [na](std::span<const double> g, GradInputs gi) {
                  if (double* ga = gi[0])
                    for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
                  if (double* gb = gi[1])
                    for (std::size_t i = na; i < g.size(); ++i) gb[i - na] += g[i];
                });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank(x, 2, "slice_cols");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (begin + count > d) throw DimensionError("slice_cols: range exceeds " + shape_str(x.shape()));
  std::vector<double> out(n * count);
  const double* px = x.raw();
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(px + i * d + begin, count, out.data() + i * count);
  return finish({n, count}, std::move(out), "slice_cols", {x},
                [n, d, begin, count](std::span<const double> g, GradInputs gi) {
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < count; ++j) gi[0][i * d + begin + j] += g[i * count + j];
                });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t n = parts.front().rank() == 2 ? parts.front().dim(0) : 0;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != n) throw DimensionError("concat_cols: row counts disagree");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(n * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const double* src = parts[k].raw();
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(src + i * widths[k], widths[k], out.data() + i * total + off);
    off += widths[k];
  }
  return finish({n, total}, std::move(out), "concat_cols", parts,
                [n, total, widths](std::span<const double> g, GradInputs gi) {
                  std::size_t off = 0;
                  for (std::size_t k = 0; k < widths.size(); ++k) {
                    if (double* gk = gi[k])
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < widths[k]; ++j)
                          gk[i * widths[k] + j] += g[i * total + off + j];
                    off += widths[k];
                  }
                });
}

Tensor patchify(const Tensor& x, std::size_t patch) {
  require_rank(x, 3, "patchify");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw DimensionError("patchify: " + shape_str(x.shape()) + " not divisible by patch " +
                         std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch, pd = c * patch * patch;
  // index[k] = source offset of output element k
  auto index = std::make_shared<std::vector<std::size_t>>(gh * gw * pd);
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx) {
            const std::size_t row = gy * gw + gx;
            const std::size_t col = (ch * patch + dy) * patch + dx;
            (*index)[row * pd + col] = (ch * h + gy * patch + dy) * w + gx * patch + dx;
          }
  std::vector<double> out(index->size());
  const double* px = x.raw();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = px[(*index)[k]];
  return finish({gh * gw, pd}, std::move(out), "patchify", {x},
                [index](std::span<const double> g, GradInputs gi) {
                  for (std::size_t k = 0; k < g.size(); ++k) gi[0][(*index)[k]] += g[k];
                });
}

Tensor cross_entropy(const Tensor& logits, std::size_t target) {
  const std::size_t n = logits.size();
  if (logits.rank() != 1) throw DimensionError("cross_entropy: logits must be a vector");
  if (target >= n) {
    throw std::out_of_range("cross_entropy: target " + std::to_string(target) + " >= " +
                            std::to_string(n) + " classes");
  }
  const double* pl = logits.raw();
  const double mx = *std::max_element(pl, pl + n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(pl[i] - mx);
  const double lse = mx + std::log(s);
  auto probs = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) (*probs)[i] = std::exp(pl[i] - lse);
  return finish({}, {lse - pl[target]}, "cross_entropy", {logits},
                [probs, target](std::span<const double> g, GradInputs gi) {
                  for (std::size_t i = 0; i < probs->size(); ++i)
                    gi[0][i] += g[0] * ((*probs)[i] - (i == target ? 1.0 : 0.0));
                });
}

}  // namespace faudit::ops
