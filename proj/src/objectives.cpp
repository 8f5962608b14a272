#include "avs/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace avs {

std::string to_string(Setting s) { return s == Setting::s4 ? "s4" : "ms3"; }

std::string to_string(AvmVariant v) {
  switch (v) {
    case AvmVariant::none:
      return "none";
    case AvmVariant::av:
      return "av";
    case AvmVariant::vv:
      return "vv";
  }
  return "?";
}

Setting parse_setting(std::string_view text) {
  if (text == "s4" || text == "S4") return Setting::s4;
  if (text == "ms3" || text == "MS3") return Setting::ms3;
  throw ConfigError("unknown setting '" + std::string(text) + "'");
}

AvmVariant parse_avm_variant(std::string_view text) {
  if (text == "none") return AvmVariant::none;
  if (text == "av") return AvmVariant::av;
  if (text == "vv") return AvmVariant::vv;
  throw ConfigError("unknown loss variant '" + std::string(text) + "'");
}

std::vector<std::size_t> supervised_frames(Setting setting, std::size_t clips) {
  if (clips == 0) throw ArgumentError("clip count must be positive");
  if (setting == Setting::s4) return {0};
  std::vector<std::size_t> all(clips);
  for (std::size_t t = 0; t < clips; ++t) all[t] = t;
  return all;
}

Var bce(Var prediction, const Tensor& target, std::span<const std::size_t> frames) {
  if (frames.empty()) throw ArgumentError("bce needs at least one supervised frame");
  if (prediction.dims() != target.dims() || target.rank() != 3) {
    throw ShapeError("bce shape mismatch: prediction " + to_string(prediction.dims()) + ", target " +
                     to_string(target.dims()));
  }
  const std::size_t T = target.dim(0);
  const std::size_t plane = target.numel() / T;
  Tensor y({frames.size(), target.dim(1), target.dim(2)});
  for (std::size_t r = 0; r < frames.size(); ++r) {
    if (frames[r] >= T) throw ArgumentError("supervised frame " + std::to_string(frames[r]) + " out of range");
    std::copy_n(target.data().begin() + frames[r] * plane, plane, y.data().begin() + r * plane);
  }
  Tensor not_y = y;
  for (double& v : not_y.data()) v = 1.0 - v;

  Tape& tape = *prediction.tape;
  Var p = clamp(select(prediction, frames), kProbClamp, 1.0 - kProbClamp);
  Var pos = mul(tape.constant(std::move(y)), log(p));
  Var negv = mul(tape.constant(std::move(not_y)), log(add_scalar(neg(p), 1.0)));
  return neg(mean(add(pos, negv)));
}

Var masked_average(Var mask, Var fused) {
  const Tensor& m = mask.value();
  const Tensor& z = fused.value();
  if (m.rank() != 3 || z.rank() != 4 || m.dim(0) != z.dim(0) || m.dim(1) % z.dim(1) != 0 ||
      m.dim(2) % z.dim(2) != 0) {
    throw ShapeError("mask " + to_string(m.dims()) + " does not tile feature map " + to_string(z.dims()));
  }
  const std::size_t T = z.dim(0), h = z.dim(1), w = z.dim(2), C = z.dim(3);
  Var pooled = avg_pool2d(reshape(mask, {T, m.dim(1), m.dim(2), 1}), m.dim(1) / h, m.dim(2) / w);
  Var weighted = sum_axis(reshape(mul(pooled, fused), {T, h * w, C}), 1);
  Var weight = add_scalar(sum_axis(reshape(pooled, {T, h * w, 1}), 1), kMaskedPoolEps);
  return div(weighted, weight);
}

Var softmax_kl(Var p_logits, Var q_logits) {
  if (p_logits.dims() != q_logits.dims()) {
    throw ShapeError("KL operands differ: " + to_string(p_logits.dims()) + " vs " + to_string(q_logits.dims()));
  }
  Var lp = log_softmax(p_logits);
  Var lq = log_softmax(q_logits);
  return sum_axis(mul(exp(lp), sub(lp, lq)), p_logits.value().rank() - 1);
}

Var avm_av(Var mask, std::span<const AvmStage> stages) {
  if (stages.empty()) throw ArgumentError("avm_av needs at least one stage");
  Var total{};
  std::size_t terms = 0;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    Var v = masked_average(mask, stages[s].fused);
    Var kl = sum(softmax_kl(v, stages[s].audio_target));
    total = s == 0 ? kl : add(total, kl);
    terms += v.dim(0);
  }
  return scale(total, 1.0 / static_cast<double>(terms));
}

std::vector<std::size_t> audio_partners(const Tensor& audio) {
  if (audio.rank() != 2) throw ShapeError("audio must be (T, d), got " + to_string(audio.dims()));
  const std::size_t T = audio.dim(0), d = audio.dim(1);
  if (T < 2) throw ArgumentError("audio partner search needs at least two frames");
  std::vector<std::size_t> partner(T);
  for (std::size_t t = 0; t < T; ++t) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t u = 0; u < T; ++u) {
      if (u == t) continue;
      double dist = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = audio[t * d + k] - audio[u * d + k];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        partner[t] = u;
      }
    }
  }
  return partner;
}

Var avm_vv(Var mask, std::span<const AvmStage> stages, const Tensor& audio) {
  if (stages.empty()) throw ArgumentError("avm_vv needs at least one stage");
  const auto partner = audio_partners(audio);
  Var total{};
  std::size_t terms = 0;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    Var v = masked_average(mask, stages[s].fused);
    if (v.dim(0) != partner.size()) throw ShapeError("audio and visual clip counts differ");
    Var kl = sum(softmax_kl(v, select(v, partner)));
    total = s == 0 ? kl : add(total, kl);
    terms += v.dim(0);
  }
  return scale(total, 1.0 / static_cast<double>(terms));
}

LossBreakdown total_loss(Var prediction, const Tensor& target, std::span<const std::size_t> frames, Setting setting,
                         AvmVariant variant, double lambda, std::span<const AvmStage> stages, const Tensor& audio) {
  LossBreakdown out;
  Var main = bce(prediction, target, frames);
  out.bce = main.value()[0];
  out.lambda = setting == Setting::s4 ? 0.0 : lambda;
  if (setting == Setting::s4 || variant == AvmVariant::none) {
    out.total_var = main;
    out.total = out.bce;
    return out;
  }
  Var reg = variant == AvmVariant::av ? avm_av(prediction, stages) : avm_vv(prediction, stages, audio);
  out.avm = reg.value()[0];
  out.total_var = out.lambda == 0.0 ? main : add(main, scale(reg, out.lambda));
  out.total = out.total_var.value()[0];
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

struct Counts {
  std::size_t pred = 0, gt = 0, both = 0;
};

Counts count(std::span<const double> pred, std::span<const double> gt, double threshold) {
  if (pred.size() != gt.size()) throw ShapeError("prediction and ground truth sizes differ");
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] > threshold;
    const bool g = gt[i] > 0.5;
    c.pred += p;
    c.gt += g;
    c.both += p && g;
  }
  return c;
}

void check_threshold(double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ArgumentError("threshold must lie in (0, 1)");
}

template <class FrameFn>
double frame_mean(const Tensor& pred, const Tensor& gt, std::span<const std::size_t> frames, FrameFn fn) {
  if (pred.dims() != gt.dims() || pred.rank() != 3) {
    throw ShapeError("metric shape mismatch: " + to_string(pred.dims()) + " vs " + to_string(gt.dims()));
  }
  const std::size_t T = pred.dim(0);
  const std::size_t plane = pred.numel() / T;
  std::vector<std::size_t> all;
  if (frames.empty()) {
    for (std::size_t t = 0; t < T; ++t) all.push_back(t);
    frames = all;
  }
  double total = 0.0;
  for (auto t : frames) {
    if (t >= T) throw ArgumentError("frame index out of range");
    total += fn(pred.data().subspan(t * plane, plane), gt.data().subspan(t * plane, plane));
  }
  return total / static_cast<double>(frames.size());
}

}  // namespace

double frame_iou(std::span<const double> pred, std::span<const double> gt, double threshold) {
  check_threshold(threshold);
  const Counts c = count(pred, gt, threshold);
  const std::size_t uni = c.pred + c.gt - c.both;
  if (uni == 0) return 1.0;
  return static_cast<double>(c.both) / static_cast<double>(uni);
}

double frame_fscore(std::span<const double> pred, std::span<const double> gt, double threshold, double beta2) {
  check_threshold(threshold);
  const Counts c = count(pred, gt, threshold);
  if (c.pred == 0 && c.gt == 0) return 1.0;
  if (c.pred == 0 || c.gt == 0 || c.both == 0) return 0.0;
  const double precision = static_cast<double>(c.both) / static_cast<double>(c.pred);
  const double recall = static_cast<double>(c.both) / static_cast<double>(c.gt);
  return (1.0 + beta2) * precision * recall / (beta2 * precision + recall);
}

double miou(const Tensor& pred, const Tensor& gt, double threshold, std::span<const std::size_t> frames) {
  return frame_mean(pred, gt, frames, [&](auto p, auto g) { return frame_iou(p, g, threshold); });
}

double f_score(const Tensor& pred, const Tensor& gt, double threshold, double beta2,
               std::span<const std::size_t> frames) {
  return frame_mean(pred, gt, frames, [&](auto p, auto g) { return frame_fscore(p, g, threshold, beta2); });
}

MetricReport summarize(std::vector<VideoScore> rows, double threshold, double beta2) {
  if (rows.empty()) throw ArgumentError("metric report needs at least one video");
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.video_id < b.video_id; });
  MetricReport report;
  report.threshold = threshold;
  report.beta2 = beta2;
  for (const auto& r : rows) {
    report.miou += r.miou;
    report.fscore += r.fscore;
  }
  report.miou /= static_cast<double>(rows.size());
  report.fscore /= static_cast<double>(rows.size());
  report.per_video = std::move(rows);
  return report;
}

}  // namespace avs
