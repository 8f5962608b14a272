#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "avs/model.hpp"
#include "avs/objectives.hpp"
#include "avs/tensor.hpp"

namespace avs {

namespace fs = std::filesystem;
using Bytes = std::vector<std::uint8_t>;

// Raw file access. Failures raise IoError.
Bytes read_file(const fs::path& path);
void write_file(const fs::path& path, std::span<const std::uint8_t> bytes);
std::string read_text(const fs::path& path);
void write_text(const fs::path& path, std::string_view text);

// ---------------------------------------------------------------------------
// Tensor file: "AVST", u32 rank, rank x u32 dims, f64 payload, little endian.

Bytes encode_tensor(const Tensor& t);
/// Decodes a whole buffer; trailing bytes are an error.
Tensor decode_tensor(std::span<const std::uint8_t> bytes);
void write_tensor(const fs::path& path, const Tensor& t);
Tensor read_tensor(const fs::path& path);

// ---------------------------------------------------------------------------
// Checkpoint: "AVSC", u32 count, then (u32 name length, name, tensor file).

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

Bytes encode_checkpoint(const NamedTensors& entries);
NamedTensors decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const fs::path& path, const AvsModel& model);
NamedTensors read_checkpoint(const fs::path& path);

/// Rebuilds the network hyper-parameters from parameter names and shapes.
/// Frame size is not recorded in a checkpoint and is supplied by the caller.
ModelConfig infer_model_config(const NamedTensors& entries, std::size_t height, std::size_t width);
/// Copies every parameter into `model`. Missing, extra or mis-shaped entries
/// raise CheckpointError.
void load_parameters(AvsModel& model, const NamedTensors& entries);
AvsModel load_model(const fs::path& path, std::size_t height, std::size_t width);

// ---------------------------------------------------------------------------
// Netpbm images.

/// Binary (H, W) mask with values 0 or 1 as P5, 1 stored as 255.
Bytes encode_mask_pgm(const Tensor& mask);
/// Any P5 image; a pixel becomes 1 when its byte exceeds 127.
Tensor decode_mask_pgm(std::span<const std::uint8_t> bytes);
void write_mask_pgm(const fs::path& path, const Tensor& mask);
Tensor read_mask_pgm(const fs::path& path);

/// (H, W) intensities in [0, 1] as an 8-bit P5 image.
void write_gray_pgm(const fs::path& path, const Tensor& image);
/// Gray P5 image as (H, W) values byte / 255.
Tensor read_gray_pgm(const fs::path& path);

/// (H, W, 3) colours in [0, 1] as P6, maxval 255, rounded to the nearest level.
Bytes encode_ppm(const Tensor& image);
Tensor decode_ppm(std::span<const std::uint8_t> bytes);
void write_ppm(const fs::path& path, const Tensor& image);
Tensor read_ppm(const fs::path& path);

// ---------------------------------------------------------------------------
// Metrics CSV: `video_id,miou,fscore`, rows by id, then `ALL,<miou>,<fscore>`.

std::string format_metrics_csv(const MetricReport& report);
void write_metrics_csv(const fs::path& path, const MetricReport& report);
MetricReport parse_metrics_csv(std::string_view text);
MetricReport read_metrics_csv(const fs::path& path);

// ---------------------------------------------------------------------------
// `key = value` configuration text with `#` comments.

class ConfigFile {
 public:
  static ConfigFile parse(std::string_view text);
  static ConfigFile load(const fs::path& path);

  bool has(std::string_view key) const;
  const std::string& text(std::string_view key) const;
  std::string text_or(std::string_view key, std::string fallback) const;
  double real(std::string_view key) const;
  std::int64_t integer(std::string_view key) const;
  std::uint64_t unsigned_integer(std::string_view key) const;
  std::vector<std::int64_t> integers(std::string_view key) const;

  void set(std::string key, std::string value);
  const std::map<std::string, std::string, std::less<>>& entries() const noexcept { return entries_; }
  /// Keys in sorted order, one `key = value` line each.
  std::string format() const;

 private:
  std::map<std::string, std::string, std::less<>> entries_;
};

}  // namespace avs
