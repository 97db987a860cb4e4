#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "glossrec/gemm.hpp"
#include "glossrec/tensor.hpp"

namespace glossrec {

enum class BnMode { kTrain, kInfer };

namespace detail {

template <typename R>
void check_finite(const TensorT<R>& t, const char* op) {
  for (const R v : t.values())
    if (!std::isfinite(double(v)))
      throw NumericError(std::string(op) + ": non-finite value in output");
}

template <typename R>
bool tracing(std::initializer_list<const TensorT<R>*> inputs) {
  if (!TapeT<R>::active()) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// col is (c*kh*kw) x (oh*ow), row-major.
template <typename R>
void im2col(const R* in, int c, int h, int w, int kh, int kw, int stride, int pad,
            int oh, int ow, R* col) {
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        R* dst = col + ((long(ch) * kh + i) * kw + j) * (long(oh) * ow);
        for (int y = 0; y < oh; ++y) {
          const int sy = y * stride - pad + i;
          R* drow = dst + long(y) * ow;
          if (sy < 0 || sy >= h) {
            for (int x = 0; x < ow; ++x) drow[x] = R(0);
            continue;
          }
          const R* src = in + (long(ch) * h + sy) * w;
          for (int x = 0; x < ow; ++x) {
            const int sx = x * stride - pad + j;
            drow[x] = (sx >= 0 && sx < w) ? src[sx] : R(0);
          }
        }
      }
}

template <typename R>
void col2im_add(const R* col, int c, int h, int w, int kh, int kw, int stride, int pad,
                int oh, int ow, R* din) {
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        const R* src = col + ((long(ch) * kh + i) * kw + j) * (long(oh) * ow);
        for (int y = 0; y < oh; ++y) {
          const int sy = y * stride - pad + i;
          if (sy < 0 || sy >= h) continue;
          R* drow = din + (long(ch) * h + sy) * w;
          for (int x = 0; x < ow; ++x) {
            const int sx = x * stride - pad + j;
            if (sx >= 0 && sx < w) drow[sx] += src[long(y) * ow + x];
          }
        }
      }
}

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// 2D cross-correlation. Input is (c_in,h,w) or batched (n,c_in,h,w); weight is
// (c_out,c_in,kh,kw); zero padding.
template <typename R>
TensorT<R> conv2d(const TensorT<R>& input, const TensorT<R>& weight, const TensorT<R>& bias,
                  int stride, int pad) {
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (pad < 0) throw ConfigError("conv2d: padding must be >= 0");
  const bool batched = input.rank() == 4;
  if (!batched && input.rank() != 3)
    throw ShapeError("conv2d: input must be (c,h,w) or (n,c,h,w)");
  if (weight.rank() != 4) throw ShapeError("conv2d: weight must be (c_out,c_in,kh,kw)");
  const int n = batched ? input.dim(0) : 1;
  const int c = input.dim(batched ? 1 : 0);
  const int h = input.dim(batched ? 2 : 1);
  const int w = input.dim(batched ? 3 : 2);
  const int c_out = weight.dim(0);
  const int kh = weight.dim(2);
  const int kw = weight.dim(3);
  if (weight.dim(1) != c)
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                     " input channels, got " + std::to_string(c));
  if (kh > h + 2 * pad || kw > w + 2 * pad)
    throw ShapeError("conv2d: kernel larger than padded input");
  if (bias.rank() != 1 || bias.dim(0) != c_out)
    throw ShapeError("conv2d: bias must be (c_out)");

  const int oh = detail::conv_out_extent(h, kh, stride, pad);
  const int ow = detail::conv_out_extent(w, kw, stride, pad);
  const long ckk = long(c) * kh * kw;
  const long osz = long(oh) * ow;

  TensorT<R> out(batched ? std::vector<int>{n, c_out, oh, ow}
                         : std::vector<int>{c_out, oh, ow});
  std::vector<R> col(size_t(ckk * osz));
  for (int s = 0; s < n; ++s) {
    detail::im2col(input.data() + long(s) * c * h * w, c, h, w, kh, kw, stride, pad, oh, ow,
                   col.data());
    R* dst = out.data() + long(s) * c_out * osz;
    gemm_nn(c_out, int(osz), int(ckk), weight.data(), col.data(), dst, false);
    for (int co = 0; co < c_out; ++co) {
      const R b = bias.data()[co];
      R* row = dst + long(co) * osz;
      for (long i = 0; i < osz; ++i) row[i] += b;
    }
  }
  detail::check_finite(out, "conv2d");

  if (detail::tracing<R>({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    auto* tape = TapeT<R>::active();
    tape->record(out, [input, weight, bias, out, n, c, h, w, c_out, kh, kw, stride, pad, oh,
                       ow, ckk, osz]() {
      std::vector<R> col(size_t(ckk * osz));
      std::vector<R> dcol;
      for (int s = 0; s < n; ++s) {
        const R* dout = out.grad() + long(s) * c_out * osz;
        detail::im2col(input.data() + long(s) * c * h * w, c, h, w, kh, kw, stride, pad, oh,
                       ow, col.data());
        if (weight.requires_grad())
          gemm_nt(c_out, int(ckk), int(osz), dout, col.data(),
                  const_cast<R*>(weight.grad()), true);
        if (bias.requires_grad()) {
          R* db = const_cast<R*>(bias.grad());
          for (int co = 0; co < c_out; ++co) {
            R acc = R(0);
            const R* row = dout + long(co) * osz;
            for (long i = 0; i < osz; ++i) acc += row[i];
            db[co] += acc;
          }
        }
        if (input.requires_grad()) {
          dcol.assign(size_t(ckk * osz), R(0));
          gemm_tn(int(ckk), int(osz), c_out, weight.data(), dout, dcol.data(), false);
          detail::col2im_add(dcol.data(), c, h, w, kh, kw, stride, pad, oh, ow,
                             const_cast<R*>(input.grad()) + long(s) * c * h * w);
        }
      }
    });
  }
  return out;
}

// 1D temporal cross-correlation. Input (c_in,t), weight (c_out,c_in,k).
template <typename R>
TensorT<R> conv1d(const TensorT<R>& input, const TensorT<R>& weight, const TensorT<R>& bias,
                  int stride, int pad) {
  if (stride < 1) throw ConfigError("conv1d: stride must be >= 1");
  if (pad < 0) throw ConfigError("conv1d: padding must be >= 0");
  if (input.rank() != 2) throw ShapeError("conv1d: input must be (c,t)");
  if (weight.rank() != 3) throw ShapeError("conv1d: weight must be (c_out,c_in,k)");
  const int c = input.dim(0);
  const int t = input.dim(1);
  const int c_out = weight.dim(0);
  const int k = weight.dim(2);
  if (weight.dim(1) != c)
    throw ShapeError("conv1d: weight expects " + std::to_string(weight.dim(1)) +
                     " input channels, got " + std::to_string(c));
  if (k > t + 2 * pad) throw ShapeError("conv1d: kernel larger than padded input");
  if (bias.rank() != 1 || bias.dim(0) != c_out) throw ShapeError("conv1d: bias must be (c_out)");

  const int ot = detail::conv_out_extent(t, k, stride, pad);
  const long ck = long(c) * k;

  TensorT<R> out({c_out, ot});
  std::vector<R> col(size_t(ck * ot));
  detail::im2col(input.data(), c, 1, t, 1, k, stride, pad, 1, ot, col.data());
  gemm_nn(c_out, ot, int(ck), weight.data(), col.data(), out.data(), false);
  for (int co = 0; co < c_out; ++co) {
    const R b = bias.data()[co];
    R* row = out.data() + long(co) * ot;
    for (int i = 0; i < ot; ++i) row[i] += b;
  }
  detail::check_finite(out, "conv1d");

  if (detail::tracing<R>({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    TapeT<R>::active()->record(out, [input, weight, bias, out, c, t, c_out, k, stride, pad,
                                     ot, ck]() {
      std::vector<R> col(size_t(ck * ot));
      detail::im2col(input.data(), c, 1, t, 1, k, stride, pad, 1, ot, col.data());
      const R* dout = out.grad();
      if (weight.requires_grad())
        gemm_nt(c_out, int(ck), ot, dout, col.data(), const_cast<R*>(weight.grad()), true);
      if (bias.requires_grad()) {
        R* db = const_cast<R*>(bias.grad());
        for (int co = 0; co < c_out; ++co) {
          R acc = R(0);
          for (int i = 0; i < ot; ++i) acc += dout[long(co) * ot + i];
          db[co] += acc;
        }
      }
      if (input.requires_grad()) {
        std::vector<R> dcol(size_t(ck * ot), R(0));
        gemm_tn(int(ck), ot, c_out, weight.data(), dout, dcol.data(), false);
        detail::col2im_add(dcol.data(), c, 1, t, 1, k, stride, pad, 1, ot,
                           const_cast<R*>(input.grad()));
      }
    });
  }
  return out;
}

// Non-overlapping spatial max pooling on (..,h,w); trailing remainder truncated.
// Gradient routes to the first maximal element in scan order.
template <typename R>
TensorT<R> maxpool2d(const TensorT<R>& input, int window) {
  if (window < 1) throw ConfigError("maxpool2d: window must be >= 1");
  const bool batched = input.rank() == 4;
  if (!batched && input.rank() != 3)
    throw ShapeError("maxpool2d: input must be (c,h,w) or (n,c,h,w)");
  const int n = batched ? input.dim(0) : 1;
  const int c = input.dim(batched ? 1 : 0);
  const int h = input.dim(batched ? 2 : 1);
  const int w = input.dim(batched ? 3 : 2);
  const int oh = h / window;
  const int ow = w / window;
  if (oh < 1 || ow < 1) throw ShapeError("maxpool2d: window larger than input");

  TensorT<R> out(batched ? std::vector<int>{n, c, oh, ow} : std::vector<int>{c, oh, ow});
  auto argmax = std::make_shared<std::vector<long>>(size_t(out.numel()));
  const R* in = input.data();
  R* dst = out.data();
  long o = 0;
  for (int s = 0; s < n; ++s)
    for (int ch = 0; ch < c; ++ch) {
      const long plane = (long(s) * c + ch) * h * w;
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x, ++o) {
          R best = -std::numeric_limits<R>::infinity();
          long best_idx = -1;
          for (int i = 0; i < window; ++i)
            for (int j = 0; j < window; ++j) {
              const long idx = plane + long(y * window + i) * w + (x * window + j);
              if (in[idx] > best) {
                best = in[idx];
                best_idx = idx;
              }
            }
          dst[o] = best;
          (*argmax)[size_t(o)] = best_idx;
        }
    }
  detail::check_finite(out, "maxpool2d");

  if (detail::tracing<R>({&input})) {
    out.set_requires_grad(true);
    TapeT<R>::active()->record(out, [input, out, argmax]() {
      R* din = const_cast<R*>(input.grad());
      const R* dout = out.grad();
      for (long i = 0; i < out.numel(); ++i) din[(*argmax)[size_t(i)]] += dout[i];
    });
  }
  return out;
}

// Non-overlapping temporal max pooling on (c,t).
template <typename R>
TensorT<R> maxpool1d(const TensorT<R>& input, int window) {
  if (window < 1) throw ConfigError("maxpool1d: window must be >= 1");
  if (input.rank() != 2) throw ShapeError("maxpool1d: input must be (c,t)");
  const int c = input.dim(0);
  const int t = input.dim(1);
  const int ot = t / window;
  if (ot < 1) throw ShapeError("maxpool1d: window larger than input");

  TensorT<R> out({c, ot});
  auto argmax = std::make_shared<std::vector<long>>(size_t(out.numel()));
  const R* in = input.data();
  R* dst = out.data();
  long o = 0;
  for (int ch = 0; ch < c; ++ch)
    for (int x = 0; x < ot; ++x, ++o) {
      R best = -std::numeric_limits<R>::infinity();
      long best_idx = -1;
      for (int j = 0; j < window; ++j) {
        const long idx = long(ch) * t + x * window + j;
        if (in[idx] > best) {
          best = in[idx];
          best_idx = idx;
        }
      }
      dst[o] = best;
      (*argmax)[size_t(o)] = best_idx;
    }
  detail::check_finite(out, "maxpool1d");

  if (detail::tracing<R>({&input})) {
    out.set_requires_grad(true);
    TapeT<R>::active()->record(out, [input, out, argmax]() {
      R* din = const_cast<R*>(input.grad());
      const R* dout = out.grad();
      for (long i = 0; i < out.numel(); ++i) din[(*argmax)[size_t(i)]] += dout[i];
    });
  }
  return out;
}

// Mean over the spatial extent: (c,h,w) -> (c) or (n,c,h,w) -> (n,c).
template <typename R>
TensorT<R> global_avg_pool(const TensorT<R>& input) {
  const bool batched = input.rank() == 4;
  if (!batched && input.rank() != 3)
    throw ShapeError("global_avg_pool: input must be (c,h,w) or (n,c,h,w)");
  const int n = batched ? input.dim(0) : 1;
  const int c = input.dim(batched ? 1 : 0);
  const long hw = long(input.dim(batched ? 2 : 1)) * input.dim(batched ? 3 : 2);

  TensorT<R> out(batched ? std::vector<int>{n, c} : std::vector<int>{c});
  const R* in = input.data();
  for (long p = 0; p < long(n) * c; ++p) {
    R acc = R(0);
    const R* src = in + p * hw;
    for (long i = 0; i < hw; ++i) acc += src[i];
    out.data()[p] = acc / R(hw);
  }
  detail::check_finite(out, "global_avg_pool");

  if (detail::tracing<R>({&input})) {
    out.set_requires_grad(true);
    TapeT<R>::active()->record(out, [input, out, n, c, hw]() {
      R* din = const_cast<R*>(input.grad());
      const R* dout = out.grad();
      for (long p = 0; p < long(n) * c; ++p) {
        const R g = dout[p] / R(hw);
        R* dst = din + p * hw;
        for (long i = 0; i < hw; ++i) dst[i] += g;
      }
    });
  }
  return out;
}

namespace detail {

// Channel layout for batchnorm: (groups, channels, inner). rank 4 = (n,c,h*w),
// rank 2 = (1,c,t).
template <typename R>
void bn_layout(const TensorT<R>& x, int& groups, int& channels, long& inner) {
  if (x.rank() == 4) {
    groups = x.dim(0);
    channels = x.dim(1);
    inner = long(x.dim(2)) * x.dim(3);
  } else if (x.rank() == 2) {
    groups = 1;
    channels = x.dim(0);
    inner = x.dim(1);
  } else {
    throw ShapeError("batchnorm: input must be (n,c,h,w) or (c,t)");
  }
}

}  // namespace detail

// Per-channel batch normalization. Train mode computes statistics over the
// current batch (all frames / time steps) and updates the running buffers;
// infer mode uses the running statistics only and is position-independent.
template <typename R>
TensorT<R> batchnorm(const TensorT<R>& input, const TensorT<R>& gamma, const TensorT<R>& beta,
                     TensorT<R>& running_mean, TensorT<R>& running_var, BnMode mode,
                     R momentum = R(0.1), R eps = R(1e-5)) {
  int groups, channels;
  long inner;
  detail::bn_layout(input, groups, channels, inner);
  if (gamma.numel() != channels || beta.numel() != channels ||
      running_mean.numel() != channels || running_var.numel() != channels)
    throw ShapeError("batchnorm: parameter extent does not match channel count");

  const long m = long(groups) * inner;  // elements per channel
  TensorT<R> out(input.shape());
  auto xhat = std::make_shared<std::vector<R>>(size_t(input.numel()));
  std::vector<R> inv_std(size_t(channels));

  auto at = [&](const R* base, int g, int ch, long i) -> const R& {
    return base[(long(g) * channels + ch) * inner + i];
  };

  if (mode == BnMode::kTrain) {
    for (int ch = 0; ch < channels; ++ch) {
      R mean = R(0);
      for (int g = 0; g < groups; ++g)
        for (long i = 0; i < inner; ++i) mean += at(input.data(), g, ch, i);
      mean /= R(m);
      R var = R(0);
      for (int g = 0; g < groups; ++g)
        for (long i = 0; i < inner; ++i) {
          const R d = at(input.data(), g, ch, i) - mean;
          var += d * d;
        }
      var /= R(m);
      const R istd = R(1) / std::sqrt(var + eps);
      inv_std[size_t(ch)] = istd;
      for (int g = 0; g < groups; ++g)
        for (long i = 0; i < inner; ++i) {
          const long idx = (long(g) * channels + ch) * inner + i;
          const R xh = (input.data()[idx] - mean) * istd;
          (*xhat)[size_t(idx)] = xh;
          out.data()[idx] = gamma.data()[ch] * xh + beta.data()[ch];
        }
      running_mean.data()[ch] = (R(1) - momentum) * running_mean.data()[ch] + momentum * mean;
      running_var.data()[ch] = (R(1) - momentum) * running_var.data()[ch] + momentum * var;
    }
  } else {
    for (int ch = 0; ch < channels; ++ch) {
      const R istd = R(1) / std::sqrt(running_var.data()[ch] + eps);
      const R mean = running_mean.data()[ch];
      inv_std[size_t(ch)] = istd;
      for (int g = 0; g < groups; ++g)
        for (long i = 0; i < inner; ++i) {
          const long idx = (long(g) * channels + ch) * inner + i;
          const R xh = (input.data()[idx] - mean) * istd;
          (*xhat)[size_t(idx)] = xh;
          out.data()[idx] = gamma.data()[ch] * xh + beta.data()[ch];
        }
    }
  }
  detail::check_finite(out, "batchnorm");

  if (detail::tracing<R>({&input, &gamma, &beta})) {
    out.set_requires_grad(true);
    auto istd_cap = std::make_shared<std::vector<R>>(inv_std);
    const bool train = mode == BnMode::kTrain;
    TapeT<R>::active()->record(out, [input, gamma, beta, out, xhat, istd_cap, groups,
                                     channels, inner, m, train]() {
      const R* dout = out.grad();
      for (int ch = 0; ch < channels; ++ch) {
        R sum_dy = R(0), sum_dy_xhat = R(0);
        for (int g = 0; g < groups; ++g)
          for (long i = 0; i < inner; ++i) {
            const long idx = (long(g) * channels + ch) * inner + i;
            sum_dy += dout[idx];
            sum_dy_xhat += dout[idx] * (*xhat)[size_t(idx)];
          }
        if (gamma.requires_grad()) const_cast<R*>(gamma.grad())[ch] += sum_dy_xhat;
        if (beta.requires_grad()) const_cast<R*>(beta.grad())[ch] += sum_dy;
        if (input.requires_grad()) {
          R* din = const_cast<R*>(input.grad());
          const R scale = gamma.data()[ch] * (*istd_cap)[size_t(ch)];
          if (train) {
            const R mean_dy = sum_dy / R(m);
            const R mean_dy_xhat = sum_dy_xhat / R(m);
            for (int g = 0; g < groups; ++g)
              for (long i = 0; i < inner; ++i) {
                const long idx = (long(g) * channels + ch) * inner + i;
                din[idx] +=
                    scale * (dout[idx] - mean_dy - (*xhat)[size_t(idx)] * mean_dy_xhat);
              }
          } else {
            for (int g = 0; g < groups; ++g)
              for (long i = 0; i < inner; ++i) {
                const long idx = (long(g) * channels + ch) * inner + i;
                din[idx] += scale * dout[idx];
              }
          }
        }
      }
    });
  }
  return out;
}

template <typename R>
TensorT<R> relu(const TensorT<R>& input) {
  TensorT<R> out(input.shape());
  for (long i = 0; i < input.numel(); ++i)
    out.data()[i] = input.data()[i] > R(0) ? input.data()[i] : R(0);
  if (detail::tracing<R>({&input})) {
    out.set_requires_grad(true);
    TapeT<R>::active()->record(out, [input, out]() {
      R* din = const_cast<R*>(input.grad());
      const R* dout = out.grad();
      for (long i = 0; i < input.numel(); ++i)
        if (input.data()[i] > R(0)) din[i] += dout[i];
    });
  }
  return out;
}

// Fully connected: (n,f_in) x (f_out,f_in)^T + bias -> (n,f_out).
template <typename R>
TensorT<R> linear(const TensorT<R>& input, const TensorT<R>& weight, const TensorT<R>& bias) {
  if (input.rank() != 2 || weight.rank() != 2)
    throw ShapeError("linear: input and weight must be rank 2");
  const int n = input.dim(0);
  const int fi = input.dim(1);
  const int fo = weight.dim(0);
  if (weight.dim(1) != fi)
    throw ShapeError("linear: weight expects " + std::to_string(weight.dim(1)) +
                     " features, got " + std::to_string(fi));
  if (bias.numel() != fo) throw ShapeError("linear: bias must be (f_out)");

  TensorT<R> out({n, fo});
  gemm_nt(n, fo, fi, input.data(), weight.data(), out.data(), false);
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < fo; ++j) out.data()[long(r) * fo + j] += bias.data()[j];
  detail::check_finite(out, "linear");

  if (detail::tracing<R>({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    TapeT<R>::active()->record(out, [input, weight, bias, out, n, fi, fo]() {
      const R* dout = out.grad();
      if (input.requires_grad())
        gemm_nn(n, fi, fo, dout, weight.data(), const_cast<R*>(input.grad()), true);
      if (weight.requires_grad())
        gemm_tn(fo, fi, n, dout, input.data(), const_cast<R*>(weight.grad()), true);
      if (bias.requires_grad()) {
        R* db = const_cast<R*>(bias.grad());
        for (int r = 0; r < n; ++r)
          for (int j = 0; j < fo; ++j) db[j] += dout[long(r) * fo + j];
      }
    });
  }
  return out;
}

// Row-wise softmax on (rows, cols), max-subtracted.
template <typename R>
TensorT<R> softmax(const TensorT<R>& input) {
  if (input.rank() != 2) throw ShapeError("softmax: input must be rank 2");
  const int rows = input.dim(0);
  const int cols = input.dim(1);
  TensorT<R> out(input.shape());
  for (int r = 0; r < rows; ++r) {
    const R* x = input.data() + long(r) * cols;
    R* y = out.data() + long(r) * cols;
    R mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    R z = R(0);
    for (int j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < cols; ++j) y[j] /= z;
  }
  detail::check_finite(out, "softmax");

  if (detail::tracing<R>({&input})) {
    out.set_requires_grad(true);
    TapeT<R>::active()->record(out, [input, out, rows, cols]() {
      R* din = const_cast<R*>(input.grad());
      for (int r = 0; r < rows; ++r) {
        const R* p = out.data() + long(r) * cols;
        const R* dy = out.grad() + long(r) * cols;
        R dot = R(0);
        for (int j = 0; j < cols; ++j) dot += dy[j] * p[j];
        for (int j = 0; j < cols; ++j) din[long(r) * cols + j] += p[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

// Row-wise log-softmax, numerically stable for logits of large magnitude.
template <typename R>
TensorT<R> log_softmax(const TensorT<R>& input) {
  if (input.rank() != 2) throw ShapeError("log_softmax: input must be rank 2");
  const int rows = input.dim(0);
  const int cols = input.dim(1);
  TensorT<R> out(input.shape());
  for (int r = 0; r < rows; ++r) {
    const R* x = input.data() + long(r) * cols;
    R* y = out.data() + long(r) * cols;
    R mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    R z = R(0);
    for (int j = 0; j < cols; ++j) z += std::exp(x[j] - mx);
    const R lz = std::log(z) + mx;
    for (int j = 0; j < cols; ++j) y[j] = x[j] - lz;
  }
  detail::check_finite(out, "log_softmax");

  if (detail::tracing<R>({&input})) {
    out.set_requires_grad(true);
    TapeT<R>::active()->record(out, [input, out, rows, cols]() {
      R* din = const_cast<R*>(input.grad());
      for (int r = 0; r < rows; ++r) {
        const R* ls = out.data() + long(r) * cols;
        const R* dy = out.grad() + long(r) * cols;
        R sum = R(0);
        for (int j = 0; j < cols; ++j) sum += dy[j];
        for (int j = 0; j < cols; ++j)
          din[long(r) * cols + j] += dy[j] - std::exp(ls[j]) * sum;
      }
    });
  }
  return out;
}

template <typename R>
TensorT<R> transpose(const TensorT<R>& input) {
  if (input.rank() != 2) throw ShapeError("transpose: input must be rank 2");
  const int rows = input.dim(0);
  const int cols = input.dim(1);
  TensorT<R> out({cols, rows});
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j < cols; ++j) out.data()[long(j) * rows + r] = input.data()[long(r) * cols + j];
  if (detail::tracing<R>({&input})) {
    out.set_requires_grad(true);
    TapeT<R>::active()->record(out, [input, out, rows, cols]() {
      R* din = const_cast<R*>(input.grad());
      const R* dout = out.grad();
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < cols; ++j) din[long(r) * cols + j] += dout[long(j) * rows + r];
    });
  }
  return out;
}

template <typename R>
TensorT<R> add(const TensorT<R>& a, const TensorT<R>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch");
  TensorT<R> out(a.shape());
  for (long i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  detail::check_finite(out, "add");
  if (detail::tracing<R>({&a, &b})) {
    out.set_requires_grad(true);
    TapeT<R>::active()->record(out, [a, b, out]() {
      const R* dout = out.grad();
      if (a.requires_grad()) {
        R* da = const_cast<R*>(a.grad());
        for (long i = 0; i < a.numel(); ++i) da[i] += dout[i];
      }
      if (b.requires_grad()) {
        R* db = const_cast<R*>(b.grad());
        for (long i = 0; i < b.numel(); ++i) db[i] += dout[i];
      }
    });
  }
  return out;
}

template <typename R>
TensorT<R> mul(const TensorT<R>& a, const TensorT<R>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul: shape mismatch");
  TensorT<R> out(a.shape());
  for (long i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  detail::check_finite(out, "mul");
  if (detail::tracing<R>({&a, &b})) {
    out.set_requires_grad(true);
    TapeT<R>::active()->record(out, [a, b, out]() {
      const R* dout = out.grad();
      if (a.requires_grad()) {
        R* da = const_cast<R*>(a.grad());
        for (long i = 0; i < a.numel(); ++i) da[i] += dout[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        R* db = const_cast<R*>(b.grad());
        for (long i = 0; i < b.numel(); ++i) db[i] += dout[i] * a.data()[i];
      }
    });
  }
  return out;
}

template <typename R>
TensorT<R> scale(const TensorT<R>& a, R factor) {
  TensorT<R> out(a.shape());
  for (long i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * factor;
  detail::check_finite(out, "scale");
  if (detail::tracing<R>({&a})) {
    out.set_requires_grad(true);
    TapeT<R>::active()->record(out, [a, out, factor]() {
      R* da = const_cast<R*>(a.grad());
      const R* dout = out.grad();
      for (long i = 0; i < a.numel(); ++i) da[i] += dout[i] * factor;
    });
  }
  return out;
}

template <typename R>
TensorT<R> sum(const TensorT<R>& a) {
  R acc = R(0);
  for (long i = 0; i < a.numel(); ++i) acc += a.data()[i];
  TensorT<R> out = TensorT<R>::scalar(acc);
  detail::check_finite(out, "sum");
  if (detail::tracing<R>({&a})) {
    out.set_requires_grad(true);
    TapeT<R>::active()->record(out, [a, out]() {
      R* da = const_cast<R*>(a.grad());
      const R g = out.grad()[0];
      for (long i = 0; i < a.numel(); ++i) da[i] += g;
    });
  }
  return out;
}

template <typename R>
TensorT<R> sum_squares(const TensorT<R>& a) {
  R acc = R(0);
  for (long i = 0; i < a.numel(); ++i) acc += a.data()[i] * a.data()[i];
  TensorT<R> out = TensorT<R>::scalar(acc);
  detail::check_finite(out, "sum_squares");
  if (detail::tracing<R>({&a})) {
    out.set_requires_grad(true);
    TapeT<R>::active()->record(out, [a, out]() {
      R* da = const_cast<R*>(a.grad());
      const R g = out.grad()[0];
      for (long i = 0; i < a.numel(); ++i) da[i] += R(2) * a.data()[i] * g;
    });
  }
  return out;
}

// Mean over rows of -weight[j] * log(max(probs[j, target[j]], floor)). The
// floor keeps a zero probability from producing an infinite loss; inside the
// clamp the gradient is zero.
template <typename R>
TensorT<R> weighted_nll(const TensorT<R>& probs, const std::vector<int>& targets,
                        const std::vector<R>& weights, R floor = R(1e-12)) {
  if (probs.rank() != 2) throw ShapeError("weighted_nll: probs must be (k,u)");
  const int k = probs.dim(0);
  const int u = probs.dim(1);
  if (int(targets.size()) != k || int(weights.size()) != k)
    throw ShapeError("weighted_nll: targets/weights must have one entry per row");
  for (int j = 0; j < k; ++j)
    if (targets[size_t(j)] < 0 || targets[size_t(j)] >= u)
      throw ShapeError("weighted_nll: target out of range");

  R acc = R(0);
  for (int j = 0; j < k; ++j) {
    const R p = std::max(probs.data()[long(j) * u + targets[size_t(j)]], floor);
    acc -= weights[size_t(j)] * std::log(p);
  }
  TensorT<R> out = TensorT<R>::scalar(acc / R(k));
  detail::check_finite(out, "weighted_nll");

  if (detail::tracing<R>({&probs})) {
    out.set_requires_grad(true);
    auto tgt = std::make_shared<std::vector<int>>(targets);
    auto wts = std::make_shared<std::vector<R>>(weights);
    TapeT<R>::active()->record(out, [probs, out, tgt, wts, k, u, floor]() {
      R* dp = const_cast<R*>(probs.grad());
      const R g = out.grad()[0];
      for (int j = 0; j < k; ++j) {
        const long idx = long(j) * u + (*tgt)[size_t(j)];
        const R p = probs.data()[idx];
        if (p > floor) dp[idx] -= g * (*wts)[size_t(j)] / (p * R(k));
      }
    });
  }
  return out;
}

}  // namespace glossrec
