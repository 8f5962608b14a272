#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "avs/tensor.hpp"

namespace avs {

/// S4: one object sounds for the whole video, possibly next to a silent one.
/// MS3: several objects, each clip has at least one sounding.
/// DISAMBIG: two equal squares, one of them sounds; the pixels never reveal which.
enum class SceneMode { s4, ms3, disambig };
enum class ShapeClass { circle, square, triangle };

std::string to_string(SceneMode mode);
SceneMode parse_scene_mode(std::string_view text);
std::string to_string(ShapeClass shape);
ShapeClass parse_shape_class(std::string_view text);

inline constexpr std::size_t kSignatureCount = 3;

struct SceneObject {
  ShapeClass shape = ShapeClass::square;
  double size = 16.0;  // side, diameter, or triangle base and height, in px
  double x0 = 32.0, y0 = 32.0;  // centre at clip 0
  double vx = 0.0, vy = 0.0;    // px per clip
  std::array<double, 3> color{};
  std::size_t signature = 0;
  double amplitude = 1.0;

  double cx(std::size_t clip) const { return x0 + vx * static_cast<double>(clip); }
  double cy(std::size_t clip) const { return y0 + vy * static_cast<double>(clip); }
};

struct SceneSpec {
  std::string video_id;
  SceneMode mode = SceneMode::s4;
  std::vector<SceneObject> objects;
  std::vector<std::vector<bool>> schedule;  // [clip][object]
  double noise_level = 0.0;
  std::uint64_t seed = 0;
};

struct SceneParams {
  std::size_t clips = 5;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t n_mels = 32;
  double noise_level = 0.05;
  /// DISAMBIG only: index of the sounding square, or negative to draw it from the seed.
  int disambig_source = -1;

  void validate() const;
};

struct Scene {
  Tensor frames;  // (T, H, W, 3), multiples of 1/255
  Tensor mel;     // (T, n_mels)
  Tensor gt;      // (T, H, W) in {0, 1}
  SceneSpec spec;
};

/// Unit-norm class templates, identical for every dataset; pairwise cosine
/// similarity is at most 0.3.
std::vector<Tensor> signature_templates(std::size_t n_mels);

/// Pixels whose centre lies inside the object at a clip, as an (H, W) 0/1 map.
Tensor rasterize(const SceneObject& object, std::size_t clip, std::size_t height, std::size_t width);

Scene generate_scene(SceneMode mode, std::uint64_t seed, const SceneParams& params, std::string video_id = "");

// ---------------------------------------------------------------------------
// On-disk datasets

struct SplitSizes {
  std::size_t train = 0, valid = 0, test = 0;
};
/// 70/15/15: valid and test get floor(0.15 n) each, train the rest.
SplitSizes split_sizes(std::size_t n_videos);

struct DatasetSpec {
  SceneMode mode = SceneMode::s4;
  std::size_t n_videos = 100;
  std::uint64_t seed = 0;
  SceneParams params;
  /// Store every mask in the S4 training split too (normally only frame 1).
  bool all_masks = false;
};

/// Writes out_dir/{train,valid,test}/video_%05d/ plus out_dir/dataset.cfg.
void make_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir);
DatasetSpec read_dataset_spec(const std::filesystem::path& data_dir);

struct VideoSample {
  std::string id;
  Tensor frames;                  // (T, H, W, 3)
  Tensor mel;                     // (T, n_mels)
  Tensor masks;                   // (T, H, W); unlabelled frames are zero
  std::vector<std::size_t> labelled;  // 0-based frames that have a mask file
  SceneSpec spec;
};

VideoSample load_video(const std::filesystem::path& video_dir);
/// Videos of one split in id order.
std::vector<VideoSample> load_split(const std::filesystem::path& data_dir, std::string_view split);

/// Best mIoU reachable without audio on a DISAMBIG split: the max over
/// always-A, always-B and always-both predictions.
double bayes_visual_ceiling(const std::vector<VideoSample>& videos);
double bayes_visual_ceiling(const std::filesystem::path& data_dir, std::string_view split = "test");

}  // namespace avs
