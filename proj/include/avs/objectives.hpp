#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "avs/autodiff.hpp"

namespace avs {

/// S4: only the first frame is labelled for training. MS3: every frame is.
enum class Setting { s4, ms3 };
enum class AvmVariant { none, av, vv };

std::string to_string(Setting s);
std::string to_string(AvmVariant v);
Setting parse_setting(std::string_view text);
AvmVariant parse_avm_variant(std::string_view text);

inline constexpr double kDefaultLambda = 0.5;
inline constexpr double kDefaultBeta2 = 0.3;
inline constexpr double kDefaultThreshold = 0.5;
inline constexpr double kMaskedPoolEps = 1e-8;
inline constexpr double kProbClamp = 1e-12;

/// Frame indices (0-based) carrying supervision in a setting.
std::vector<std::size_t> supervised_frames(Setting setting, std::size_t clips);

/// Mean binary cross entropy over the selected frames and all their pixels.
/// prediction and target are (T, H, W); probabilities are clamped to
/// [1e-12, 1 - 1e-12].
Var bce(Var prediction, const Tensor& target, std::span<const std::size_t> frames);

/// Mask-weighted mean of a fused feature map per frame.
/// mask (T,H,W) is average-pooled to (T,h,w); result is (T, C).
Var masked_average(Var mask, Var fused);

/// Row-wise KL(softmax(p) || softmax(q)) over the last axis, as a (rows) vector.
Var softmax_kl(Var p_logits, Var q_logits);

/// Features of one fused stage entering the audio-visual mapping loss.
struct AvmStage {
  int stage;
  Var fused;         // Z_i (T, h, w, C)
  Var audio_target;  // A_i (T, C)
};

/// Mean over stages and frames of KL(softmax(masked Z_i) || softmax(A_i)).
Var avm_av(Var mask, std::span<const AvmStage> stages);

/// For every frame the other frame with the nearest audio embedding
/// (Euclidean; ties resolved to the smaller index). Needs at least 2 frames.
std::vector<std::size_t> audio_partners(const Tensor& audio);

/// Mean over stages and frames of KL(softmax(v_t) || softmax(v_partner(t))).
Var avm_vv(Var mask, std::span<const AvmStage> stages, const Tensor& audio);

struct LossBreakdown {
  Var total_var;
  double bce = 0.0;
  double avm = 0.0;
  double total = 0.0;
  double lambda = 0.0;
};

/// BCE on `frames` plus lambda times the selected mapping loss. Under S4 the
/// mapping term is dropped (lambda reported as 0).
LossBreakdown total_loss(Var prediction, const Tensor& target, std::span<const std::size_t> frames, Setting setting,
                         AvmVariant variant, double lambda, std::span<const AvmStage> stages, const Tensor& audio);

// ---------------------------------------------------------------------------
// Evaluation metrics on (T, H, W) volumes. Predictions are binarized with a
// strict `> threshold`; ground truth with `> 0.5`.

/// Per-frame IoU, 1 when both masks are empty.
double frame_iou(std::span<const double> pred, std::span<const double> gt, double threshold);
/// Per-frame F_beta; both empty gives 1, exactly one empty gives 0.
double frame_fscore(std::span<const double> pred, std::span<const double> gt, double threshold, double beta2);

/// Mean over the listed frames (all frames when `frames` is empty).
double miou(const Tensor& pred, const Tensor& gt, double threshold = kDefaultThreshold,
            std::span<const std::size_t> frames = {});
double f_score(const Tensor& pred, const Tensor& gt, double threshold = kDefaultThreshold,
               double beta2 = kDefaultBeta2, std::span<const std::size_t> frames = {});

struct VideoScore {
  std::string video_id;
  double miou = 0.0;
  double fscore = 0.0;
};

struct MetricReport {
  double miou = 0.0;
  double fscore = 0.0;
  std::vector<VideoScore> per_video;
  double threshold = kDefaultThreshold;
  double beta2 = kDefaultBeta2;
};

/// Sorts rows by video id and averages them.
MetricReport summarize(std::vector<VideoScore> rows, double threshold = kDefaultThreshold,
                       double beta2 = kDefaultBeta2);

}  // namespace avs
