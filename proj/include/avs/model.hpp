#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "avs/autodiff.hpp"

namespace avs {

class Rng;

inline constexpr std::size_t kStageCount = 4;

enum class FusionMode { none, add, tpavi };

std::string to_string(FusionMode mode);
FusionMode parse_fusion_mode(std::string_view text);

/// Network hyper-parameters. Stage numbers are 1-based throughout.
struct ModelConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t n_mels = 32;
  std::size_t audio_hidden = 32;
  std::size_t audio_dim = 16;  // d
  std::size_t channels = 32;   // C, shared by every ASPP output
  std::array<std::size_t, kStageCount> stage_channels{16, 32, 64, 128};
  FusionMode fusion = FusionMode::tpavi;
  std::vector<int> fusion_stages{1, 2, 3, 4};
  std::vector<std::size_t> aspp_rates{1, 2};
  std::uint64_t seed = 0;

  void validate() const;
  bool fused(int stage) const;
};

/// Per-stage feature maps, index 0 holds stage 1. Stage i is (T, H/2^(i+1), W/2^(i+1), C_i).
struct StagePyramid {
  std::array<Var, kStageCount> stages;

  Var& operator[](std::size_t i) { return stages[i]; }
  const Var& operator[](std::size_t i) const { return stages[i]; }
};

struct TpaviOutput {
  Var fused;                    // Z_i
  std::optional<Tensor> alpha;  // (N, N) similarity, N = T*h*w
};

struct StageAlpha {
  int stage;
  Tensor alpha;
};

struct ForwardOptions {
  bool keep_alpha = true;
};

struct ForwardOutput {
  Var mask;             // M, (T, H, W), sigmoid activated
  StagePyramid fused;   // Z_1..Z_4 (V_i where the stage is not fused)
  std::vector<StageAlpha> alphas;
  Var audio;            // A, (T, d)
};

/// Audio-visual segmentation network: audio embedder, four-stage visual
/// encoder, ASPP neck per stage, audio fusion at the configured stages and a
/// top-down decoder with a sigmoid mask head.
///
/// Parameters live in the model; every forward entry point takes a span of
/// tape variables standing for them (see bind()), so the same code path serves
/// training and finite-difference checks.
class AvsModel {
 public:
  using Params = std::span<const Var>;

  explicit AvsModel(ModelConfig config);

  const ModelConfig& config() const noexcept { return config_; }

  std::vector<Tensor>& parameters() noexcept { return params_; }
  const std::vector<Tensor>& parameters() const noexcept { return params_; }
  const std::vector<std::string>& names() const noexcept { return names_; }
  std::optional<std::size_t> find(std::string_view name) const;
  Tensor& parameter(std::string_view name);
  std::size_t parameter_count() const;

  /// One leaf per parameter, in parameters() order.
  std::vector<Var> bind(Tape& tape);
  /// Copies of the parameters as tape constants, for inference on a const model.
  std::vector<Var> bind_constants(Tape& tape) const;
  void set_requires_grad(bool on);
  void zero_grad();

  /// (T, n_mels) -> A (T, d).
  Var encode_audio(Params p, Var mel) const;
  /// (T, H, W, 3) -> F_1..F_4.
  StagePyramid encode_visual(Params p, Var frames) const;
  /// F_i -> V_i with C channels.
  Var aspp(Params p, int stage, Var features) const;
  TpaviOutput tpavi(Params p, int stage, Var visual, Var audio, bool keep_alpha = true) const;
  Var fuse_add(Params p, int stage, Var visual, Var audio) const;
  /// Z_1..Z_4 -> M (T, H, W).
  Var decode(Params p, const StagePyramid& fused) const;
  /// Linear map of A to the fused width, used as the audio-side target of the
  /// audio-visual mapping loss at one stage.
  Var audio_target(Params p, int stage, Var audio) const;

  ForwardOutput forward(Params p, Var frames, Var mel, ForwardOptions options = {}) const;

 private:
  struct Affine {
    std::size_t weight = 0, bias = 0;
  };
  struct Conv {
    std::size_t weight = 0, bias = 0;
    std::size_t stride = 1, dilation = 1, padding = 0;
  };
  struct Tpavi {
    Affine audio, theta, phi, g, mu;
  };

  std::size_t add_param(Rng& rng, std::string name, Shape dims, std::size_t fan_in, bool zero = false);
  Affine make_affine(Rng& rng, const std::string& name, std::size_t in, std::size_t out);
  Conv make_conv(Rng& rng, const std::string& name, std::size_t k, std::size_t cin, std::size_t cout,
                 std::size_t stride = 1, std::size_t dilation = 1);

  static Var apply(Params p, const Affine& layer, Var rows);
  static Var apply(Params p, const Conv& layer, Var image);
  void check_params(Params p) const;

  ModelConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;

  Affine audio_fc1_, audio_fc2_;
  Conv stem_;
  std::array<Conv, kStageCount> down_{}, refine_{};
  std::array<Conv, kStageCount> aspp_point_{};
  std::array<std::vector<Conv>, kStageCount> aspp_dilated_{};
  std::array<std::optional<Tpavi>, kStageCount> tpavi_{};
  std::array<std::optional<Affine>, kStageCount> fuse_audio_{};
  std::array<std::optional<Affine>, kStageCount> audio_target_{};
  std::array<Conv, kStageCount> merge_{};  // merge_[i] combines into stage i+1; index 3 unused
  Conv head_;
};

}  // namespace avs
