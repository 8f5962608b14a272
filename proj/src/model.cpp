#include "avs/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "avs/random.hpp"

namespace avs {

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::none:
      return "none";
    case FusionMode::add:
      return "add";
    case FusionMode::tpavi:
      return "tpavi";
  }
  return "?";
}

FusionMode parse_fusion_mode(std::string_view text) {
  if (text == "none") return FusionMode::none;
  if (text == "add") return FusionMode::add;
  if (text == "tpavi") return FusionMode::tpavi;
  throw ConfigError("unknown fusion mode '" + std::string(text) + "'");
}

void ModelConfig::validate() const {
  const std::size_t stride = std::size_t{1} << (kStageCount + 1);
  if (height == 0 || width == 0 || height % stride != 0 || width % stride != 0) {
    throw ShapeError("frame size " + std::to_string(height) + "x" + std::to_string(width) +
                     " must be divisible by " + std::to_string(stride));
  }
  if (n_mels == 0 || audio_hidden == 0 || audio_dim == 0 || channels == 0) {
    throw ConfigError("model widths must be positive");
  }
  for (auto c : stage_channels) {
    if (c == 0) throw ConfigError("stage widths must be positive");
  }
  if (aspp_rates.empty()) throw ConfigError("aspp_rates must not be empty");
  for (auto r : aspp_rates) {
    if (r == 0) throw ConfigError("aspp rates must be positive");
  }
  std::set<int> seen;
  for (int s : fusion_stages) {
    if (s < 1 || s > static_cast<int>(kStageCount)) throw ConfigError("fusion stage out of range: " + std::to_string(s));
    if (!seen.insert(s).second) throw ConfigError("duplicate fusion stage " + std::to_string(s));
  }
  if ((fusion == FusionMode::none) != fusion_stages.empty()) {
    throw ConfigError("fusion stages must be non-empty exactly when fusion mode is not 'none'");
  }
}

bool ModelConfig::fused(int stage) const {
  return fusion != FusionMode::none && std::find(fusion_stages.begin(), fusion_stages.end(), stage) != fusion_stages.end();
}

AvsModel::AvsModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(config_.seed);
  const std::size_t C = config_.channels;

  audio_fc1_ = make_affine(rng, "audio.fc1", config_.n_mels, config_.audio_hidden);
  audio_fc2_ = make_affine(rng, "audio.fc2", config_.audio_hidden, config_.audio_dim);

  const auto& widths = config_.stage_channels;
  stem_ = make_conv(rng, "visual.stem", 3, 3, widths[0], 2);
  std::size_t prev = widths[0];
  for (std::size_t i = 0; i < kStageCount; ++i) {
    const std::string prefix = "visual.stage" + std::to_string(i + 1);
    down_[i] = make_conv(rng, prefix + ".down", 3, prev, widths[i], 2);
    refine_[i] = make_conv(rng, prefix + ".refine", 3, widths[i], widths[i]);
    prev = widths[i];
  }

  for (std::size_t i = 0; i < kStageCount; ++i) {
    const std::string prefix = "aspp" + std::to_string(i + 1);
    aspp_point_[i] = make_conv(rng, prefix + ".point", 1, widths[i], C);
    for (auto rate : config_.aspp_rates) {
      aspp_dilated_[i].push_back(make_conv(rng, prefix + ".rate" + std::to_string(rate), 3, widths[i], C, 1, rate));
    }
  }

  for (std::size_t i = 0; i < kStageCount; ++i) {
    const int stage = static_cast<int>(i + 1);
    if (!config_.fused(stage)) continue;
    const std::string n = std::to_string(stage);
    if (config_.fusion == FusionMode::tpavi) {
      Tpavi t;
      t.audio = make_affine(rng, "tpavi" + n + ".audio", config_.audio_dim, C);
      t.theta = make_affine(rng, "tpavi" + n + ".theta", C, C);
      t.phi = make_affine(rng, "tpavi" + n + ".phi", C, C);
      t.g = make_affine(rng, "tpavi" + n + ".g", C, C);
      t.mu = make_affine(rng, "tpavi" + n + ".mu", C, C);
      // The residual branch starts with a zero offset.
      std::fill(params_[t.mu.bias].data().begin(), params_[t.mu.bias].data().end(), 0.0);
      tpavi_[i] = t;
    } else {
      fuse_audio_[i] = make_affine(rng, "fuse" + n + ".audio", config_.audio_dim, C);
    }
    audio_target_[i] = make_affine(rng, "avm" + n + ".audio", config_.audio_dim, C);
  }

  for (std::size_t i = 0; i + 1 < kStageCount; ++i) {
    merge_[i] = make_conv(rng, "decoder.merge" + std::to_string(i + 1), 3, C, C);
  }
  head_ = make_conv(rng, "decoder.head", 3, C, 1);
}

std::size_t AvsModel::add_param(Rng& rng, std::string name, Shape dims, std::size_t fan_in, bool zero) {
  Tensor t(std::move(dims));
  if (!zero) {
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    for (double& v : t.data()) v = rng.uniform(-bound, bound);
  }
  t.set_requires_grad(true);
  params_.push_back(std::move(t));
  names_.push_back(std::move(name));
  return params_.size() - 1;
}

AvsModel::Affine AvsModel::make_affine(Rng& rng, const std::string& name, std::size_t in, std::size_t out) {
  Affine layer;
  layer.weight = add_param(rng, name + ".weight", {in, out}, in);
  layer.bias = add_param(rng, name + ".bias", {out}, in);
  return layer;
}

AvsModel::Conv AvsModel::make_conv(Rng& rng, const std::string& name, std::size_t k, std::size_t cin, std::size_t cout,
                                   std::size_t stride, std::size_t dilation) {
  Conv layer;
  layer.weight = add_param(rng, name + ".weight", {k, k, cin, cout}, k * k * cin);
  layer.bias = add_param(rng, name + ".bias", {cout}, k * k * cin);
  layer.stride = stride;
  layer.dilation = dilation;
  layer.padding = (k / 2) * dilation;
  return layer;
}

std::optional<std::size_t> AvsModel::find(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  return std::nullopt;
}

Tensor& AvsModel::parameter(std::string_view name) {
  auto idx = find(name);
  if (!idx) throw ArgumentError("no parameter named '" + std::string(name) + "'");
  return params_[*idx];
}

std::size_t AvsModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

std::vector<Var> AvsModel::bind(Tape& tape) {
  std::vector<Var> vars;
  vars.reserve(params_.size());
  for (auto& p : params_) vars.push_back(tape.leaf(p));
  return vars;
}

std::vector<Var> AvsModel::bind_constants(Tape& tape) const {
  std::vector<Var> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) vars.push_back(tape.constant(Tensor(p.dims(), p.values())));
  return vars;
}

void AvsModel::set_requires_grad(bool on) {
  for (auto& p : params_) p.set_requires_grad(on);
}

void AvsModel::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void AvsModel::check_params(Params p) const {
  if (p.size() != params_.size()) {
    throw ArgumentError("expected " + std::to_string(params_.size()) + " parameter variables, got " +
                        std::to_string(p.size()));
  }
}

Var AvsModel::apply(Params p, const Affine& layer, Var rows) {
  return add(matmul(rows, p[layer.weight]), p[layer.bias]);
}

Var AvsModel::apply(Params p, const Conv& layer, Var image) {
  return conv2d(image, p[layer.weight], p[layer.bias], layer.stride, layer.dilation, layer.padding);
}

Var AvsModel::encode_audio(Params p, Var mel) const {
  check_params(p);
  if (mel.value().rank() != 2 || mel.dim(1) != config_.n_mels) {
    throw ShapeError("audio input must be (T, " + std::to_string(config_.n_mels) + "), got " + to_string(mel.dims()));
  }
  return apply(p, audio_fc2_, relu(apply(p, audio_fc1_, mel)));
}

StagePyramid AvsModel::encode_visual(Params p, Var frames) const {
  check_params(p);
  const Tensor& x = frames.value();
  if (x.rank() != 4 || x.dim(3) != 3) throw ShapeError("frames must be (T, H, W, 3), got " + to_string(x.dims()));
  if (x.dim(1) != config_.height || x.dim(2) != config_.width) {
    throw ShapeError("frames " + to_string(x.dims()) + " do not match configured size " +
                     std::to_string(config_.height) + "x" + std::to_string(config_.width));
  }
  StagePyramid out;
  Var h = relu(apply(p, stem_, frames));
  for (std::size_t i = 0; i < kStageCount; ++i) {
    h = relu(apply(p, down_[i], h));
    h = relu(apply(p, refine_[i], h));
    out[i] = h;
  }
  return out;
}

Var AvsModel::aspp(Params p, int stage, Var features) const {
  check_params(p);
  if (stage < 1 || stage > static_cast<int>(kStageCount)) throw ArgumentError("stage out of range");
  const std::size_t i = static_cast<std::size_t>(stage - 1);
  const Tensor& f = features.value();
  if (f.rank() != 4 || f.dim(3) != config_.stage_channels[i]) {
    throw ShapeError("aspp" + std::to_string(stage) + " expects " + std::to_string(config_.stage_channels[i]) +
                     " channels, got " + to_string(f.dims()));
  }
  const std::size_t extent = std::max(f.dim(1), f.dim(2));
  Var total = apply(p, aspp_point_[i], features);
  for (const auto& branch : aspp_dilated_[i]) {
    if (branch.dilation > extent) {
      throw ShapeError("aspp rate " + std::to_string(branch.dilation) + " too large for " +
                       std::to_string(f.dim(1)) + "x" + std::to_string(f.dim(2)) + " map");
    }
    total = add(total, apply(p, branch, features));
  }
  return relu(total);
}

TpaviOutput AvsModel::tpavi(Params p, int stage, Var visual, Var audio, bool keep_alpha) const {
  check_params(p);
  if (stage < 1 || stage > static_cast<int>(kStageCount) || !tpavi_[stage - 1]) {
    throw ArgumentError("stage " + std::to_string(stage) + " has no TPAVI block");
  }
  const Tpavi& blk = *tpavi_[stage - 1];
  const Tensor& v = visual.value();
  if (v.rank() != 4 || v.dim(3) != config_.channels) throw ShapeError("tpavi visual input " + to_string(v.dims()));
  if (audio.value().rank() != 2 || audio.dim(0) != v.dim(0)) {
    throw ArgumentError("audio clip count " + std::to_string(audio.dim(0)) + " does not match visual clip count " +
                        std::to_string(v.dim(0)));
  }
  const std::size_t T = v.dim(0), h = v.dim(1), w = v.dim(2), C = v.dim(3);
  const std::size_t N = T * h * w;

  Var projected = apply(p, blk.audio, audio);  // (T, C)
  Var duplicated = reshape(broadcast_to(reshape(projected, {T, 1, 1, C}), {T, h, w, C}), {N, C});
  Var flat = reshape(visual, {N, C});
  Var theta = apply(p, blk.theta, flat);
  Var phi = apply(p, blk.phi, duplicated);
  Var g = apply(p, blk.g, flat);

  // alpha * g(V) evaluated as theta * (phi^T g) / N: same product, O(N C^2)
  // instead of O(N^2 C).
  Var attended = scale(matmul(theta, matmul(transpose(phi), g)), 1.0 / static_cast<double>(N));
  Var fused = reshape(add(flat, apply(p, blk.mu, attended)), {T, h, w, C});

  TpaviOutput out{fused, std::nullopt};
  if (keep_alpha) {
    out.alpha = scale(matmul(theta, transpose(phi)), 1.0 / static_cast<double>(N)).value();
  }
  return out;
}

Var AvsModel::fuse_add(Params p, int stage, Var visual, Var audio) const {
  check_params(p);
  if (stage < 1 || stage > static_cast<int>(kStageCount) || !fuse_audio_[stage - 1]) {
    throw ArgumentError("stage " + std::to_string(stage) + " has no additive fusion block");
  }
  const Tensor& v = visual.value();
  if (v.rank() != 4 || v.dim(3) != config_.channels) throw ShapeError("fuse_add visual input " + to_string(v.dims()));
  if (audio.value().rank() != 2 || audio.dim(0) != v.dim(0)) {
    throw ArgumentError("audio clip count " + std::to_string(audio.dim(0)) + " does not match visual clip count " +
                        std::to_string(v.dim(0)));
  }
  Var projected = apply(p, *fuse_audio_[stage - 1], audio);
  return add(visual, reshape(projected, {v.dim(0), 1, 1, v.dim(3)}));
}

Var AvsModel::audio_target(Params p, int stage, Var audio) const {
  check_params(p);
  if (stage < 1 || stage > static_cast<int>(kStageCount) || !audio_target_[stage - 1]) {
    throw ArgumentError("stage " + std::to_string(stage) + " is not fused");
  }
  return apply(p, *audio_target_[stage - 1], audio);
}

Var AvsModel::decode(Params p, const StagePyramid& fused) const {
  check_params(p);
  for (std::size_t i = 0; i < kStageCount; ++i) {
    const Tensor& z = fused[i].value();
    if (z.rank() != 4 || z.dim(3) != config_.channels) {
      throw ShapeError("decoder input stage " + std::to_string(i + 1) + " has dims " + to_string(z.dims()) +
                       ", expected " + std::to_string(config_.channels) + " channels");
    }
  }
  Var running = fused[kStageCount - 1];
  for (std::size_t i = kStageCount - 1; i-- > 0;) {
    running = relu(apply(p, merge_[i], add(upsample_bilinear(running, 2), fused[i])));
  }
  Var logits = apply(p, head_, running);
  logits = upsample_bilinear(upsample_bilinear(logits, 2), 2);
  const Tensor& l = logits.value();
  return sigmoid(reshape(logits, {l.dim(0), l.dim(1), l.dim(2)}));
}

ForwardOutput AvsModel::forward(Params p, Var frames, Var mel, ForwardOptions options) const {
  ForwardOutput out;
  out.audio = encode_audio(p, mel);
  if (out.audio.dim(0) != frames.dim(0)) {
    throw ArgumentError("audio has " + std::to_string(out.audio.dim(0)) + " clips but video has " +
                        std::to_string(frames.dim(0)));
  }
  const StagePyramid features = encode_visual(p, frames);
  for (std::size_t i = 0; i < kStageCount; ++i) {
    const int stage = static_cast<int>(i + 1);
    Var v = aspp(p, stage, features[i]);
    if (!config_.fused(stage)) {
      out.fused[i] = v;
    } else if (config_.fusion == FusionMode::tpavi) {
      auto t = tpavi(p, stage, v, out.audio, options.keep_alpha);
      out.fused[i] = t.fused;
      if (t.alpha) out.alphas.push_back({stage, std::move(*t.alpha)});
    } else {
      out.fused[i] = fuse_add(p, stage, v, out.audio);
    }
  }
  out.mask = decode(p, out.fused);
  return out;
}

}  // namespace avs
