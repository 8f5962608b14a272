#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "avs/model.hpp"
#include "avs/objectives.hpp"
#include "avs/storage.hpp"
#include "avs/synthscene.hpp"

namespace avs {

/// Which frames carry the BCE term. `setting` follows the S4/MS3 rule.
enum class Supervision { setting, first, all };
std::string to_string(Supervision s);
Supervision parse_supervision(std::string_view text);

struct ExperimentConfig {
  ModelConfig model;  // frame size and n_mels are taken from the dataset
  Setting setting = Setting::s4;
  AvmVariant loss = AvmVariant::none;
  double lambda = kDefaultLambda;
  double lr = 1e-4;
  std::size_t batch_size = 4;
  std::size_t epochs = 15;
  fs::path data_dir;
  std::uint64_t seed = 0;
  std::optional<fs::path> init_checkpoint;
  Supervision supervise = Supervision::setting;

  // ablation only
  std::vector<std::uint64_t> ablation_seeds;  // empty: {seed}
  std::optional<fs::path> pretrain_data_dir;
  std::optional<std::size_t> pretrain_epochs;

  /// Reads `key = value` settings. Unknown keys are rejected; missing ones
  /// keep their defaults (epochs default to 15 for S4 and 30 for MS3).
  static ExperimentConfig from_config(const ConfigFile& cfg);
  static ExperimentConfig load(const fs::path& path);
  ConfigFile to_config() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double bce = 0.0;
  double avm = 0.0;
  double valid_miou = 0.0;
  double valid_fscore = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

/// CSV of the log without wall-clock times, so reruns are byte-identical.
std::string format_train_log(const TrainLog& log);

struct TrainResult {
  AvsModel model;  // parameters of the best validation epoch
  TrainLog log;
  std::size_t best_epoch = 0;  // 0 when no epoch improved on the start
  double best_valid_miou = 0.0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

struct BatchLoss {
  double bce = 0.0;  // summed over the batch
  double avm = 0.0;
};

/// Zeroes the parameter gradients and accumulates those of the batch-mean
/// total loss, as one training step does before its update.
BatchLoss batch_gradients(AvsModel& model, const ExperimentConfig& config, std::span<const VideoSample* const> batch);

/// Adam over total_loss with batches drawn in a seed-determined order.
TrainResult train(const ExperimentConfig& config, const EpochCallback& on_epoch = {});

/// Forward pass per video, scored on the frames that have masks.
MetricReport evaluate(const AvsModel& model, const std::vector<VideoSample>& videos);
MetricReport evaluate(const fs::path& checkpoint, const fs::path& data_dir, std::string_view split);

/// Scores given (T, H, W) masks exactly as evaluate() scores model output.
MetricReport score_predictions(const std::vector<Tensor>& predictions, const std::vector<VideoSample>& videos);

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string variant;
  std::vector<double> miou;    // one per seed
  std::vector<double> fscore;  // one per seed
  double mean_miou() const;
  double mean_fscore() const;
};

struct AblationTable {
  std::string name;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;
};

/// Names: tpavi, fusion_stages, loss, pretrain. Every variant trains on the
/// same data with the same seeds and batch order and is scored on the test
/// split. Per-variant checkpoints and metric CSVs go to out_dir when given.
AblationTable run_ablation(const std::string& name, const ExperimentConfig& base,
                           const std::optional<fs::path>& out_dir = std::nullopt,
                           std::ostream* progress = nullptr);
std::string format_ablation_csv(const AblationTable& table);

// ---------------------------------------------------------------------------
// Attention maps

struct AttentionMaps {
  std::vector<Tensor> response;  // per frame (h, w), before normalization
  std::vector<Tensor> images;    // per frame (H, W) in [0, 1]
};

/// Stage-4 TPAVI response: R_t(p) = mean over positions q of frame t of
/// alpha(p, q); min-max normalized per frame (constant maps become 0.5) and
/// bilinearly upsampled to the frame size.
AttentionMaps attention_maps(const AvsModel& model, const VideoSample& video);
AttentionMaps export_attention(const fs::path& checkpoint, const fs::path& video_dir, const fs::path& out_dir);

// ---------------------------------------------------------------------------
// Gradient checks

inline constexpr double kGradTolerance = 1e-4;

struct GradReport {
  std::vector<std::pair<std::string, double>> components;
  bool ok() const;
  double worst() const;
};

/// Finite-difference checks of every network component and loss on a small
/// randomly initialized network.
GradReport gradcheck_components(std::uint64_t seed, Fault fault = Fault::none);

}  // namespace avs
