#pragma once

// Brute-force reference implementations shared by the unit and acceptance tests.

#include <span>
#include <string>
#include <vector>

#include "avs/model.hpp"

namespace avs::test {

struct TpaviOracle {
  Tensor alpha, fused;
};

// Attention update evaluated with explicit loops over positions from the raw
// stage parameters. v is (T,h,w,C), a is (T,d); rows and columns of alpha run
// over (t,y,x).
inline TpaviOracle tpavi_loop_oracle(AvsModel& model, int stage, const Tensor& v, const Tensor& a) {
  const std::string pre = "tpavi" + std::to_string(stage);
  auto affine = [&](const std::string& name, std::span<const double> x) {
    const Tensor& w = model.parameter(pre + "." + name + ".weight");
    const Tensor& b = model.parameter(pre + "." + name + ".bias");
    std::vector<double> y(w.dim(1));
    for (std::size_t o = 0; o < w.dim(1); ++o) {
      y[o] = b[o];
      for (std::size_t i = 0; i < w.dim(0); ++i) y[o] += x[i] * w[i * w.dim(1) + o];
    }
    return y;
  };
  const std::size_t T = v.dim(0), h = v.dim(1), w = v.dim(2), C = v.dim(3), d = a.dim(1);
  const std::size_t N = T * h * w;
  std::vector<std::vector<double>> th(N), ph(N), g(N);
  for (std::size_t p = 0; p < N; ++p) {
    const auto vp = v.data().subspan(p * C, C);
    th[p] = affine("theta", vp);
    g[p] = affine("g", vp);
    const std::size_t t = p / (h * w);
    ph[p] = affine("phi", affine("audio", a.data().subspan(t * d, d)));
  }
  TpaviOracle out{Tensor({N, N}), Tensor(v.dims())};
  for (std::size_t p = 0; p < N; ++p) {
    for (std::size_t q = 0; q < N; ++q) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += th[p][c] * ph[q][c];
      out.alpha.at({p, q}) = dot / static_cast<double>(N);
    }
    std::vector<double> mix(C, 0.0);
    for (std::size_t q = 0; q < N; ++q)
      for (std::size_t c = 0; c < C; ++c) mix[c] += out.alpha.at({p, q}) * g[q][c];
    const auto upd = affine("mu", mix);
    for (std::size_t c = 0; c < C; ++c) out.fused[p * C + c] = v[p * C + c] + upd[c];
  }
  return out;
}

// Pixel-count metrics for frame t of (T,H,W) masks.
inline double iou_oracle(const Tensor& p, const Tensor& g, std::size_t t) {
  const std::size_t plane = p.numel() / p.dim(0);
  double inter = 0, uni = 0;
  for (std::size_t k = t * plane; k < (t + 1) * plane; ++k) {
    const bool a = p[k] > 0.5, b = g[k] > 0.5;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : inter / uni;
}

inline double f_oracle(const Tensor& p, const Tensor& g, std::size_t t) {
  const std::size_t plane = p.numel() / p.dim(0);
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t k = t * plane; k < (t + 1) * plane; ++k) {
    const bool a = p[k] > 0.5, b = g[k] > 0.5;
    tp += a && b;
    fp += a && !b;
    fn += !a && b;
  }
  if (tp + fp + fn == 0) return 1.0;
  if (tp == 0) return 0.0;
  const double prec = tp / (tp + fp), rec = tp / (tp + fn);
  return 1.3 * prec * rec / (0.3 * prec + rec);
}

}  // namespace avs::test
