#include <algorithm>
#include <cmath>
#include <memory>

#include "avs/autodiff.hpp"

namespace avs {

namespace {

void require_image(const Tensor& t, const char* op) {
  if (t.rank() != 4) throw ShapeError(std::string(op) + " expects (T,h,w,C), got " + to_string(t.dims()));
}

// Source taps of a half-pixel bilinear resize along one axis.
struct Taps {
  std::size_t lo, hi;
  double w_hi;
};

std::vector<Taps> bilinear_taps(std::size_t in, std::size_t factor) {
  std::vector<Taps> taps(in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::max(src, 0.0);
    auto lo = static_cast<std::size_t>(std::floor(src));
    lo = std::min(lo, in - 1);
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t dilation,
                             std::size_t padding) {
  if (stride == 0 || dilation == 0) throw ArgumentError("stride and dilation must be positive");
  const std::size_t extent = dilation * (kernel - 1) + 1;
  if (in + 2 * padding < extent) {
    throw ShapeError("window extent " + std::to_string(extent) + " exceeds padded input " +
                     std::to_string(in + 2 * padding));
  }
  const std::size_t span = in + 2 * padding - extent;
  if (span % stride > padding) {
    throw ShapeError("output size (" + std::to_string(in) + " + 2*" + std::to_string(padding) + " - " +
                     std::to_string(extent) + ")/" + std::to_string(stride) + " + 1 is not integral");
  }
  return span / stride + 1;
}

Var unfold(Var input, std::size_t kh, std::size_t kw, std::size_t stride, std::size_t dilation, std::size_t padding) {
  const Tensor& x = input.value();
  require_image(x, "unfold");
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("kernel sizes must be odd");
  const std::size_t T = x.dim(0), h = x.dim(1), w = x.dim(2), C = x.dim(3);
  const std::size_t oh = conv_output_size(h, kh, stride, dilation, padding);
  const std::size_t ow = conv_output_size(w, kw, stride, dilation, padding);
  const std::size_t cols = kh * kw * C;

  // Per output row, the source offset of each (ky,kx) tap or npos for padding.
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  auto src = std::make_shared<std::vector<std::size_t>>(T * oh * ow * kh * kw, npos);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t row = (t * oh + oy) * ow + ox;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky * dilation) - static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx * dilation) - static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            (*src)[row * kh * kw + ky * kw + kx] = ((t * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) * C;
          }
        }
      }
    }
  }

  Tensor out({T * oh * ow, cols});
  const double* xd = x.data().data();
  double* yd = out.data().data();
  const std::size_t taps = kh * kw;
  for (std::size_t r = 0; r < T * oh * ow; ++r) {
    for (std::size_t k = 0; k < taps; ++k) {
      const std::size_t s = (*src)[r * taps + k];
      if (s == npos) continue;
      std::copy_n(xd + s, C, yd + r * cols + k * C);
    }
  }
  return input.tape->record(std::move(out), {input.id}, [src, taps, C, cols](BackwardContext& ctx) {
    const auto g = ctx.grad_out();
    auto gx = ctx.input_grad(0);
    const std::size_t rows = g.size() / cols;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = 0; k < taps; ++k) {
        const std::size_t s = (*src)[r * taps + k];
        if (s == npos) continue;
        const double* gr = g.data() + r * cols + k * C;
        for (std::size_t c = 0; c < C; ++c) gx[s + c] += gr[c];
      }
    }
  });
}

Var conv2d(Var input, Var weight, Var bias, std::size_t stride, std::size_t dilation, std::size_t padding) {
  const Tensor& x = input.value();
  const Tensor& wt = weight.value();
  require_image(x, "conv2d");
  if (wt.rank() != 4 || wt.dim(2) != x.dim(3)) {
    throw ShapeError("conv2d weight " + to_string(wt.dims()) + " does not fit input " + to_string(x.dims()));
  }
  const std::size_t kh = wt.dim(0), kw = wt.dim(1), cin = wt.dim(2), cout = wt.dim(3);
  if (bias.value().rank() != 1 || bias.dim(0) != cout) {
    throw ShapeError("conv2d bias " + to_string(bias.dims()) + " does not match Cout " + std::to_string(cout));
  }
  const std::size_t T = x.dim(0);
  const std::size_t oh = conv_output_size(x.dim(1), kh, stride, dilation, padding);
  const std::size_t ow = conv_output_size(x.dim(2), kw, stride, dilation, padding);
  Var cols = (kh == 1 && kw == 1 && stride == 1) ? reshape(input, {T * oh * ow, cin})
                                                 : unfold(input, kh, kw, stride, dilation, padding);
  Var y = matmul(cols, reshape(weight, {kh * kw * cin, cout}));
  return reshape(add(y, bias), {T, oh, ow, cout});
}

Var avg_pool2d(Var input, std::size_t kh, std::size_t kw) {
  const Tensor& x = input.value();
  require_image(x, "avg_pool2d");
  if (kh == 0 || kw == 0 || x.dim(1) % kh != 0 || x.dim(2) % kw != 0) {
    throw ShapeError("avg_pool2d window " + std::to_string(kh) + "x" + std::to_string(kw) + " does not divide " +
                     to_string(x.dims()));
  }
  const std::size_t T = x.dim(0), h = x.dim(1), w = x.dim(2), C = x.dim(3);
  const std::size_t oh = h / kh, ow = w / kw;
  const double inv = 1.0 / static_cast<double>(kh * kw);
  Tensor out({T, oh, ow, C});
  const double* xd = x.data().data();
  double* yd = out.data().data();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        const double* s = xd + ((t * h + y) * w + xx) * C;
        double* d = yd + ((t * oh + y / kh) * ow + xx / kw) * C;
        for (std::size_t c = 0; c < C; ++c) d[c] += s[c] * inv;
      }
  return input.tape->record(std::move(out), {input.id}, [=](BackwardContext& ctx) {
    const auto g = ctx.grad_out();
    auto gx = ctx.input_grad(0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          const double* s = g.data() + ((t * oh + y / kh) * ow + xx / kw) * C;
          double* d = gx.data() + ((t * h + y) * w + xx) * C;
          for (std::size_t c = 0; c < C; ++c) d[c] += s[c] * inv;
        }
  });
}

Var upsample_bilinear(Var input, std::size_t factor) {
  const Tensor& x = input.value();
  require_image(x, "upsample_bilinear");
  if (factor < 1) throw ArgumentError("upsample factor must be >= 1");
  const std::size_t T = x.dim(0), h = x.dim(1), w = x.dim(2), C = x.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  auto rows = std::make_shared<std::vector<Taps>>(bilinear_taps(h, factor));
  auto cols = std::make_shared<std::vector<Taps>>(bilinear_taps(w, factor));
  Tensor out({T, oh, ow, C});
  const double* xd = x.data().data();
  double* yd = out.data().data();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const Taps ry = (*rows)[oy];
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const Taps rx = (*cols)[ox];
        const double w00 = (1 - ry.w_hi) * (1 - rx.w_hi), w01 = (1 - ry.w_hi) * rx.w_hi;
        const double w10 = ry.w_hi * (1 - rx.w_hi), w11 = ry.w_hi * rx.w_hi;
        const double* p00 = xd + ((t * h + ry.lo) * w + rx.lo) * C;
        const double* p01 = xd + ((t * h + ry.lo) * w + rx.hi) * C;
        const double* p10 = xd + ((t * h + ry.hi) * w + rx.lo) * C;
        const double* p11 = xd + ((t * h + ry.hi) * w + rx.hi) * C;
        double* d = yd + ((t * oh + oy) * ow + ox) * C;
        for (std::size_t c = 0; c < C; ++c) d[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
      }
    }
  return input.tape->record(std::move(out), {input.id}, [=](BackwardContext& ctx) {
    const auto g = ctx.grad_out();
    auto gx = ctx.input_grad(0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t oy = 0; oy < oh; ++oy) {
        const Taps ry = (*rows)[oy];
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const Taps rx = (*cols)[ox];
          const double w00 = (1 - ry.w_hi) * (1 - rx.w_hi), w01 = (1 - ry.w_hi) * rx.w_hi;
          const double w10 = ry.w_hi * (1 - rx.w_hi), w11 = ry.w_hi * rx.w_hi;
          const double* s = g.data() + ((t * oh + oy) * ow + ox) * C;
          double* p00 = gx.data() + ((t * h + ry.lo) * w + rx.lo) * C;
          double* p01 = gx.data() + ((t * h + ry.lo) * w + rx.hi) * C;
          double* p10 = gx.data() + ((t * h + ry.hi) * w + rx.lo) * C;
          double* p11 = gx.data() + ((t * h + ry.hi) * w + rx.hi) * C;
          for (std::size_t c = 0; c < C; ++c) {
            p00[c] += w00 * s[c];
            p01[c] += w01 * s[c];
            p10[c] += w10 * s[c];
            p11[c] += w11 * s[c];
          }
        }
      }
  });
}

}  // namespace avs
