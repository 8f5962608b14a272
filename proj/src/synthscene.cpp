#include "avs/synthscene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "avs/objectives.hpp"
#include "avs/random.hpp"
#include "avs/storage.hpp"

namespace avs {

std::string to_string(SceneMode mode) {
  switch (mode) {
    case SceneMode::s4:
      return "s4";
    case SceneMode::ms3:
      return "ms3";
    case SceneMode::disambig:
      return "disambig";
  }
  return "?";
}

SceneMode parse_scene_mode(std::string_view text) {
  if (text == "s4") return SceneMode::s4;
  if (text == "ms3") return SceneMode::ms3;
  if (text == "disambig") return SceneMode::disambig;
  throw ConfigError("unknown scene mode '" + std::string(text) + "'");
}

std::string to_string(ShapeClass shape) {
  switch (shape) {
    case ShapeClass::circle:
      return "circle";
    case ShapeClass::square:
      return "square";
    case ShapeClass::triangle:
      return "triangle";
  }
  return "?";
}

ShapeClass parse_shape_class(std::string_view text) {
  if (text == "circle") return ShapeClass::circle;
  if (text == "square") return ShapeClass::square;
  if (text == "triangle") return ShapeClass::triangle;
  throw ConfigError("unknown shape '" + std::string(text) + "'");
}

void SceneParams::validate() const {
  if (clips == 0) throw ArgumentError("scenes need at least one clip");
  if (height == 0 || width == 0) throw ArgumentError("frame size must be positive");
  if (n_mels == 0) throw ArgumentError("n_mels must be positive");
  if (!(noise_level >= 0.0)) throw ArgumentError("noise level must be non-negative");
}

std::vector<Tensor> signature_templates(std::size_t n_mels) {
  if (n_mels < 2) throw ArgumentError("signatures need n_mels >= 2");
  Rng rng(0x5157A7u);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    std::vector<Tensor> out;
    for (std::size_t c = 0; c < kSignatureCount; ++c) {
      Tensor t({n_mels});
      double norm = 0.0;
      for (double& v : t.data()) {
        v = rng.normal();
        norm += v * v;
      }
      for (double& v : t.data()) v /= std::sqrt(norm);
      out.push_back(std::move(t));
    }
    bool ok = true;
    for (std::size_t a = 0; a < kSignatureCount; ++a)
      for (std::size_t b = a + 1; b < kSignatureCount; ++b) {
        double dot = 0.0;
        for (std::size_t k = 0; k < n_mels; ++k) dot += out[a][k] * out[b][k];
        ok = ok && dot <= 0.3;
      }
    if (ok) return out;
  }
  throw GenerationError("no signature set with cosine <= 0.3 for n_mels = " + std::to_string(n_mels));
}

namespace {

bool inside(const SceneObject& o, double cx, double cy, double px, double py) {
  const double h = o.size / 2.0;
  switch (o.shape) {
    case ShapeClass::square:
      return px >= cx - h && px < cx + h && py >= cy - h && py < cy + h;
    case ShapeClass::circle:
      return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= h * h;
    case ShapeClass::triangle: {
      // apex up, base along the bottom of the bounding box
      if (py < cy - h || py >= cy + h) return false;
      const double half_width = h * (py - (cy - h)) / o.size;
      return std::abs(px - cx) <= half_width;
    }
  }
  return false;
}

std::array<double, 3> base_color(std::size_t signature) {
  static constexpr std::array<std::array<double, 3>, kSignatureCount> colors{
      {{0.85, 0.25, 0.2}, {0.2, 0.35, 0.9}, {0.25, 0.8, 0.3}}};
  return colors[signature];
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

// Bounding boxes stay inside the frame at both ends of the straight path and
// keep a gap of two pixels between objects at every clip.
bool placement_ok(const std::vector<SceneObject>& objs, const SceneParams& p) {
  const double W = static_cast<double>(p.width), H = static_cast<double>(p.height);
  for (const auto& o : objs) {
    const double h = o.size / 2.0;
    for (std::size_t t : {std::size_t{0}, p.clips - 1}) {
      if (o.cx(t) - h < 0.0 || o.cx(t) + h > W || o.cy(t) - h < 0.0 || o.cy(t) + h > H) return false;
    }
  }
  for (std::size_t a = 0; a < objs.size(); ++a)
    for (std::size_t b = a + 1; b < objs.size(); ++b)
      for (std::size_t t = 0; t < p.clips; ++t) {
        const double gap = (objs[a].size + objs[b].size) / 2.0 + 2.0;
        if (std::abs(objs[a].cx(t) - objs[b].cx(t)) < gap && std::abs(objs[a].cy(t) - objs[b].cy(t)) < gap) {
          return false;
        }
      }
  return true;
}

}  // namespace

Tensor rasterize(const SceneObject& o, std::size_t clip, std::size_t height, std::size_t width) {
  Tensor m({height, width});
  const double cx = o.cx(clip), cy = o.cy(clip);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      if (inside(o, cx, cy, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) m[y * width + x] = 1.0;
    }
  return m;
}

Scene generate_scene(SceneMode mode, std::uint64_t seed, const SceneParams& p, std::string video_id) {
  p.validate();
  Rng geo(mix_seed(seed, 1));
  Rng tex(mix_seed(seed, 2));
  Rng snd(mix_seed(seed, 3));
  const double scale = static_cast<double>(std::min(p.height, p.width)) / 64.0;
  const double T1 = static_cast<double>(p.clips - 1);

  // Object identities.
  std::vector<SceneObject> objs;
  if (mode == SceneMode::disambig) {
    for (std::size_t sig : {0, 1}) {
      SceneObject o;
      o.shape = ShapeClass::square;
      o.size = std::round(16.0 * scale);
      o.signature = sig;
      o.color = base_color(sig);
      objs.push_back(o);
    }
  } else {
    std::array<std::size_t, kSignatureCount> classes{0, 1, 2};
    geo.shuffle(classes.begin(), classes.end());
    const std::size_t n = (mode == SceneMode::s4 ? 1 : 2) + (geo.coin() ? 1 : 0);
    for (std::size_t k = 0; k < n; ++k) {
      SceneObject o;
      o.signature = classes[k];
      o.shape = static_cast<ShapeClass>(classes[k]);
      o.size = static_cast<double>(geo.between(std::lround(12 * scale), std::lround(20 * scale)));
      o.color = base_color(o.signature);
      for (double& c : o.color) c = std::clamp(c + geo.uniform(-0.05, 0.05), 0.0, 1.0);
      objs.push_back(o);
    }
  }

  // Trajectories.
  bool placed = false;
  for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
    bool feasible = true;
    for (auto& o : objs) {
      o.vx = geo.uniform(-2.0, 2.0) * scale;
      o.vy = geo.uniform(-2.0, 2.0) * scale;
      const double h = o.size / 2.0;
      const double xlo = h + std::max(0.0, -o.vx * T1), xhi = static_cast<double>(p.width) - h - std::max(0.0, o.vx * T1);
      const double ylo = h + std::max(0.0, -o.vy * T1), yhi = static_cast<double>(p.height) - h - std::max(0.0, o.vy * T1);
      if (xlo > xhi || ylo > yhi) {
        feasible = false;
        break;
      }
      o.x0 = geo.uniform(xlo, xhi);
      o.y0 = geo.uniform(ylo, yhi);
    }
    placed = feasible && placement_ok(objs, p);
  }
  if (!placed) {
    throw GenerationError("could not place " + std::to_string(objs.size()) + " objects in a " + std::to_string(p.height) +
                          "x" + std::to_string(p.width) + " frame after 100 attempts");
  }

  // Who sounds when.
  std::vector<std::vector<bool>> schedule(p.clips, std::vector<bool>(objs.size(), false));
  switch (mode) {
    case SceneMode::s4:
      for (auto& row : schedule) row[0] = true;
      break;
    case SceneMode::ms3:
      for (auto& row : schedule) {
        bool any = false;
        for (std::size_t o = 0; o < objs.size(); ++o) any |= (row[o] = snd.coin());
        if (!any) row[snd.below(objs.size())] = true;
      }
      break;
    case SceneMode::disambig: {
      const std::size_t source = p.disambig_source >= 0 ? static_cast<std::size_t>(p.disambig_source) % 2 : snd.below(2);
      for (auto& row : schedule) row[source] = true;
      break;
    }
  }
  for (auto& o : objs) o.amplitude = mode == SceneMode::disambig ? 1.0 : snd.uniform(0.8, 1.2);

  Scene scene;
  scene.spec.video_id = std::move(video_id);
  scene.spec.mode = mode;
  scene.spec.noise_level = p.noise_level;
  scene.spec.seed = seed;

  // Audio.
  const auto templates = signature_templates(p.n_mels);
  scene.mel = Tensor({p.clips, p.n_mels});
  for (std::size_t t = 0; t < p.clips; ++t)
    for (std::size_t k = 0; k < p.n_mels; ++k) {
      double v = 0.0;
      for (std::size_t o = 0; o < objs.size(); ++o) {
        if (schedule[t][o]) v += objs[o].amplitude * templates[objs[o].signature][k];
      }
      scene.mel.at({t, k}) = v + p.noise_level * snd.normal();
    }

  // Background: a smooth tinted ripple plus fixed grain.
  const std::size_t H = p.height, W = p.width;
  std::vector<double> background(H * W * 3);
  {
    const double fx = tex.uniform(0.1, 0.35) / scale, fy = tex.uniform(0.1, 0.35) / scale;
    const double px = tex.uniform(0.0, 2.0 * std::numbers::pi), py = tex.uniform(0.0, 2.0 * std::numbers::pi);
    std::array<double, 3> tint;
    for (double& c : tint) c = tex.uniform(-0.05, 0.05);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double ripple = 0.1 * std::sin(fx * static_cast<double>(x) + px) * std::cos(fy * static_cast<double>(y) + py);
        for (std::size_t c = 0; c < 3; ++c) {
          background[(y * W + x) * 3 + c] = 0.45 + tint[c] + ripple + tex.uniform(-0.04, 0.04);
        }
      }
  }

  scene.frames = Tensor({p.clips, H, W, 3});
  scene.gt = Tensor({p.clips, H, W});
  for (std::size_t t = 0; t < p.clips; ++t) {
    const std::size_t f0 = t * H * W * 3;
    for (std::size_t k = 0; k < H * W * 3; ++k) scene.frames[f0 + k] = background[k] + tex.uniform(-0.02, 0.02);
    for (std::size_t o = 0; o < objs.size(); ++o) {
      const Tensor m = rasterize(objs[o], t, H, W);
      for (std::size_t k = 0; k < H * W; ++k) {
        if (m[k] == 0.0) continue;
        for (std::size_t c = 0; c < 3; ++c) scene.frames[f0 + k * 3 + c] = objs[o].color[c];
        if (schedule[t][o]) scene.gt[t * H * W + k] = 1.0;
      }
    }
    for (std::size_t k = 0; k < H * W * 3; ++k) scene.frames[f0 + k] = quantize(scene.frames[f0 + k]);
  }

  scene.spec.objects = std::move(objs);
  scene.spec.schedule = std::move(schedule);
  return scene;
}

// ---------------------------------------------------------------------------
// Datasets

SplitSizes split_sizes(std::size_t n) {
  SplitSizes s;
  s.valid = s.test = n * 15 / 100;
  s.train = n - s.valid - s.test;
  return s;
}

namespace {

constexpr std::array<std::string_view, 3> kSplits{"train", "valid", "test"};

std::string video_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "video_%05zu", index);
  return buf;
}

std::string join_row(const std::vector<bool>& row) {
  std::string s;
  for (std::size_t k = 0; k < row.size(); ++k) s += (k ? "," : "") + std::string(row[k] ? "1" : "0");
  return s;
}

std::string real_text(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

ConfigFile scene_meta(const Scene& scene, const SceneParams& p, std::uint64_t dataset_seed) {
  ConfigFile meta;
  const SceneSpec& s = scene.spec;
  meta.set("mode", to_string(s.mode));
  meta.set("seed", std::to_string(s.seed));
  meta.set("dataset_seed", std::to_string(dataset_seed));
  meta.set("video_id", s.video_id);
  meta.set("clips", std::to_string(p.clips));
  meta.set("height", std::to_string(p.height));
  meta.set("width", std::to_string(p.width));
  meta.set("n_mels", std::to_string(p.n_mels));
  meta.set("noise_level", real_text(s.noise_level));
  meta.set("objects", std::to_string(s.objects.size()));
  for (std::size_t o = 0; o < s.objects.size(); ++o) {
    const auto& ob = s.objects[o];
    const std::string pre = "object." + std::to_string(o + 1) + ".";
    meta.set(pre + "shape", to_string(ob.shape));
    meta.set(pre + "size", real_text(ob.size));
    meta.set(pre + "start", real_text(ob.x0) + "," + real_text(ob.y0));
    meta.set(pre + "velocity", real_text(ob.vx) + "," + real_text(ob.vy));
    meta.set(pre + "color", real_text(ob.color[0]) + "," + real_text(ob.color[1]) + "," + real_text(ob.color[2]));
    meta.set(pre + "signature", std::to_string(ob.signature));
    meta.set(pre + "amplitude", real_text(ob.amplitude));
  }
  for (std::size_t t = 0; t < p.clips; ++t) meta.set("schedule." + std::to_string(t + 1), join_row(s.schedule[t]));
  return meta;
}

std::vector<double> reals(const ConfigFile& cfg, const std::string& key, std::size_t count) {
  std::vector<double> out;
  const std::string& text = cfg.text(key);
  std::size_t start = 0;
  for (;;) {
    const auto comma = text.find(',', start);
    const std::string cell = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    char* end = nullptr;
    const double v = std::strtod(cell.c_str(), &end);
    if (cell.empty() || *end != '\0') throw ConfigError("bad number list for '" + key + "'");
    out.push_back(v);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.size() != count) throw ConfigError("'" + key + "' needs " + std::to_string(count) + " values");
  return out;
}

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
}

}  // namespace

void make_dataset(const DatasetSpec& spec, const fs::path& out_dir) {
  if (spec.n_videos < 10) throw ArgumentError("a dataset needs at least 10 videos");
  spec.params.validate();
  const SplitSizes sizes = split_sizes(spec.n_videos);
  make_dirs(out_dir);

  ConfigFile info;
  info.set("mode", to_string(spec.mode));
  info.set("seed", std::to_string(spec.seed));
  info.set("videos", std::to_string(spec.n_videos));
  info.set("clips", std::to_string(spec.params.clips));
  info.set("height", std::to_string(spec.params.height));
  info.set("width", std::to_string(spec.params.width));
  info.set("n_mels", std::to_string(spec.params.n_mels));
  info.set("noise_level", real_text(spec.params.noise_level));
  info.set("all_masks", spec.all_masks ? "1" : "0");
  write_text(out_dir / "dataset.cfg", info.format());

  for (std::size_t i = 0; i < spec.n_videos; ++i) {
    const std::string_view split = i < sizes.train ? kSplits[0] : i < sizes.train + sizes.valid ? kSplits[1] : kSplits[2];
    const std::string name = video_name(i);
    SceneParams p = spec.params;
    p.disambig_source = static_cast<int>(i % 2);
    const Scene scene = generate_scene(spec.mode, mix_seed(spec.seed, i), p, name);

    const fs::path dir = out_dir / split / name;
    for (auto sub : {"frames", "masks"}) {
      std::error_code ec;
      fs::remove_all(dir / sub, ec);
      make_dirs(dir / sub);
    }
    const std::size_t H = p.height, W = p.width;
    for (std::size_t t = 0; t < p.clips; ++t) {
      Tensor frame({H, W, 3}, std::vector<double>(scene.frames.data().begin() + t * H * W * 3,
                                                  scene.frames.data().begin() + (t + 1) * H * W * 3));
      write_ppm(dir / "frames" / ("frame_" + std::to_string(t + 1) + ".ppm"), frame);
    }
    const bool first_only = spec.mode == SceneMode::s4 && split == "train" && !spec.all_masks;
    for (std::size_t t = 0; t < (first_only ? 1 : p.clips); ++t) {
      Tensor mask({H, W}, std::vector<double>(scene.gt.data().begin() + t * H * W,
                                              scene.gt.data().begin() + (t + 1) * H * W));
      write_mask_pgm(dir / "masks" / ("mask_" + std::to_string(t + 1) + ".pgm"), mask);
    }
    write_tensor(dir / "mel.tns", scene.mel);
    write_text(dir / "meta.cfg", scene_meta(scene, p, spec.seed).format());
  }
}

DatasetSpec read_dataset_spec(const fs::path& data_dir) {
  const ConfigFile info = ConfigFile::load(data_dir / "dataset.cfg");
  DatasetSpec spec;
  spec.mode = parse_scene_mode(info.text("mode"));
  spec.seed = info.unsigned_integer("seed");
  spec.n_videos = info.unsigned_integer("videos");
  spec.params.clips = info.unsigned_integer("clips");
  spec.params.height = info.unsigned_integer("height");
  spec.params.width = info.unsigned_integer("width");
  spec.params.n_mels = info.unsigned_integer("n_mels");
  spec.params.noise_level = info.real("noise_level");
  spec.all_masks = info.integer("all_masks") != 0;
  return spec;
}

VideoSample load_video(const fs::path& dir) {
  const ConfigFile meta = ConfigFile::load(dir / "meta.cfg");
  VideoSample v;
  v.id = meta.text("video_id");
  SceneSpec& s = v.spec;
  s.video_id = v.id;
  s.mode = parse_scene_mode(meta.text("mode"));
  s.seed = meta.unsigned_integer("seed");
  s.noise_level = meta.real("noise_level");
  const std::size_t T = meta.unsigned_integer("clips"), H = meta.unsigned_integer("height"),
                    W = meta.unsigned_integer("width");
  const std::size_t n_obj = meta.unsigned_integer("objects");
  if (T == 0 || H == 0 || W == 0 || n_obj == 0 || n_obj > 16) throw ConfigError("implausible meta.cfg in " + dir.string());
  for (std::size_t o = 0; o < n_obj; ++o) {
    const std::string pre = "object." + std::to_string(o + 1) + ".";
    SceneObject ob;
    ob.shape = parse_shape_class(meta.text(pre + "shape"));
    ob.size = meta.real(pre + "size");
    const auto start = reals(meta, pre + "start", 2), vel = reals(meta, pre + "velocity", 2);
    const auto col = reals(meta, pre + "color", 3);
    ob.x0 = start[0];
    ob.y0 = start[1];
    ob.vx = vel[0];
    ob.vy = vel[1];
    ob.color = {col[0], col[1], col[2]};
    ob.signature = meta.unsigned_integer(pre + "signature");
    ob.amplitude = meta.real(pre + "amplitude");
    s.objects.push_back(ob);
  }
  for (std::size_t t = 0; t < T; ++t) {
    const auto row = meta.integers("schedule." + std::to_string(t + 1));
    if (row.size() != n_obj) throw ConfigError("schedule row width differs from object count");
    std::vector<bool> r;
    for (auto x : row) r.push_back(x != 0);
    s.schedule.push_back(r);
  }

  v.frames = Tensor({T, H, W, 3});
  v.masks = Tensor({T, H, W});
  for (std::size_t t = 0; t < T; ++t) {
    const Tensor f = read_ppm(dir / "frames" / ("frame_" + std::to_string(t + 1) + ".ppm"));
    if (f.dims() != Shape{H, W, 3}) throw ShapeError("frame size disagrees with meta.cfg in " + dir.string());
    std::copy(f.data().begin(), f.data().end(), v.frames.data().begin() + t * H * W * 3);
    const fs::path mask_path = dir / "masks" / ("mask_" + std::to_string(t + 1) + ".pgm");
    if (fs::exists(mask_path)) {
      const Tensor m = read_mask_pgm(mask_path);
      if (m.dims() != Shape{H, W}) throw ShapeError("mask size disagrees with meta.cfg in " + dir.string());
      std::copy(m.data().begin(), m.data().end(), v.masks.data().begin() + t * H * W);
      v.labelled.push_back(t);
    }
  }
  v.mel = read_tensor(dir / "mel.tns");
  if (v.mel.rank() != 2 || v.mel.dim(0) != T) throw ShapeError("mel tensor disagrees with meta.cfg in " + dir.string());
  return v;
}

std::vector<VideoSample> load_split(const fs::path& data_dir, std::string_view split) {
  if (std::find(kSplits.begin(), kSplits.end(), split) == kSplits.end()) {
    throw ArgumentError("unknown split '" + std::string(split) + "'");
  }
  const fs::path dir = data_dir / split;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError("missing split directory '" + dir.string() + "'");
  std::vector<fs::path> videos;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) videos.push_back(e.path());
  }
  std::sort(videos.begin(), videos.end());
  std::vector<VideoSample> out;
  for (const auto& v : videos) out.push_back(load_video(v));
  return out;
}

double bayes_visual_ceiling(const std::vector<VideoSample>& videos) {
  if (videos.empty()) throw ArgumentError("ceiling needs at least one video");
  std::array<double, 3> score{};  // always A, always B, both
  for (const auto& v : videos) {
    if (v.spec.mode != SceneMode::disambig || v.spec.objects.size() != 2) {
      throw ArgumentError("visual ceiling is defined for disambiguation videos only");
    }
    const std::size_t H = v.masks.dim(1), W = v.masks.dim(2);
    std::array<double, 3> per{};
    for (std::size_t t : v.labelled) {
      const Tensor a = rasterize(v.spec.objects[0], t, H, W);
      const Tensor b = rasterize(v.spec.objects[1], t, H, W);
      Tensor both = a;
      for (std::size_t k = 0; k < both.numel(); ++k) both[k] = std::max(a[k], b[k]);
      const auto gt = v.masks.data().subspan(t * H * W, H * W);
      per[0] += frame_iou(a.data(), gt, kDefaultThreshold);
      per[1] += frame_iou(b.data(), gt, kDefaultThreshold);
      per[2] += frame_iou(both.data(), gt, kDefaultThreshold);
    }
    if (v.labelled.empty()) throw ArgumentError("video " + v.id + " has no masks");
    for (std::size_t s = 0; s < 3; ++s) score[s] += per[s] / static_cast<double>(v.labelled.size());
  }
  return *std::max_element(score.begin(), score.end()) / static_cast<double>(videos.size());
}

double bayes_visual_ceiling(const fs::path& data_dir, std::string_view split) {
  return bayes_visual_ceiling(load_split(data_dir, split));
}

}  // namespace avs
