#include "avs/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "avs/random.hpp"

namespace avs {

std::string to_string(Supervision s) {
  switch (s) {
    case Supervision::setting:
      return "setting";
    case Supervision::first:
      return "first";
    case Supervision::all:
      return "all";
  }
  return "?";
}

Supervision parse_supervision(std::string_view text) {
  if (text == "setting") return Supervision::setting;
  if (text == "first") return Supervision::first;
  if (text == "all") return Supervision::all;
  throw ConfigError("unknown supervision '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Config

namespace {

std::string join(const auto& values, const char* sep = ",") {
  std::string s;
  bool first = true;
  for (const auto& v : values) {
    if (!first) s += sep;
    s += std::to_string(v);
    first = false;
  }
  return s;
}

std::string real_text(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
std::vector<T> positive_list(const ConfigFile& cfg, std::string_view key) {
  std::vector<T> out;
  for (auto v : cfg.integers(key)) {
    if (v <= 0) throw ConfigError("'" + std::string(key) + "' entries must be positive");
    out.push_back(static_cast<T>(v));
  }
  return out;
}

std::size_t positive(const ConfigFile& cfg, std::string_view key) {
  const auto v = cfg.integer(key);
  if (v <= 0) throw ConfigError("'" + std::string(key) + "' must be positive");
  return static_cast<std::size_t>(v);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_config(const ConfigFile& cfg) {
  static const std::set<std::string, std::less<>> known{
      "setting",        "loss",           "lambda",          "lr",
      "batch_size",     "epochs",         "data_dir",        "seed",
      "init_checkpoint", "supervise",     "model.fusion",    "model.tpavi_stages",
      "model.channels", "model.audio_dim", "model.audio_hidden", "model.stage_channels",
      "model.aspp_rates", "ablation.seeds", "pretrain.data_dir", "pretrain.epochs"};
  for (const auto& [k, v] : cfg.entries()) {
    if (!known.contains(k)) throw ConfigError("unknown config key '" + k + "'");
  }

  ExperimentConfig c;
  if (cfg.has("setting")) c.setting = parse_setting(cfg.text("setting"));
  c.epochs = c.setting == Setting::s4 ? 15 : 30;
  if (cfg.has("loss")) c.loss = parse_avm_variant(cfg.text("loss"));
  if (cfg.has("lambda")) c.lambda = cfg.real("lambda");
  if (cfg.has("lr")) c.lr = cfg.real("lr");
  if (cfg.has("batch_size")) c.batch_size = positive(cfg, "batch_size");
  if (cfg.has("epochs")) {
    const auto e = cfg.integer("epochs");
    if (e < 0) throw ConfigError("'epochs' must be non-negative");
    c.epochs = static_cast<std::size_t>(e);
  }
  c.data_dir = cfg.text("data_dir");
  if (cfg.has("seed")) c.seed = cfg.unsigned_integer("seed");
  if (cfg.has("init_checkpoint") && !cfg.text("init_checkpoint").empty()) c.init_checkpoint = cfg.text("init_checkpoint");
  if (cfg.has("supervise")) c.supervise = parse_supervision(cfg.text("supervise"));
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw ConfigError("'lr' must be positive");
  if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda)) throw ConfigError("'lambda' must be non-negative");

  ModelConfig& m = c.model;
  if (cfg.has("model.fusion")) m.fusion = parse_fusion_mode(cfg.text("model.fusion"));
  if (cfg.has("model.tpavi_stages")) {
    m.fusion_stages.clear();
    for (auto s : cfg.integers("model.tpavi_stages")) m.fusion_stages.push_back(static_cast<int>(s));
  } else if (m.fusion == FusionMode::none) {
    m.fusion_stages.clear();
  }
  if (cfg.has("model.channels")) m.channels = positive(cfg, "model.channels");
  if (cfg.has("model.audio_dim")) m.audio_dim = positive(cfg, "model.audio_dim");
  if (cfg.has("model.audio_hidden")) m.audio_hidden = positive(cfg, "model.audio_hidden");
  if (cfg.has("model.stage_channels")) {
    const auto w = positive_list<std::size_t>(cfg, "model.stage_channels");
    if (w.size() != kStageCount) throw ConfigError("'model.stage_channels' needs 4 widths");
    std::copy(w.begin(), w.end(), m.stage_channels.begin());
  }
  if (cfg.has("model.aspp_rates")) m.aspp_rates = positive_list<std::size_t>(cfg, "model.aspp_rates");
  if (m.aspp_rates.empty()) throw ConfigError("'model.aspp_rates' must not be empty");
  m.validate();

  if (cfg.has("ablation.seeds")) {
    for (auto s : cfg.integers("ablation.seeds")) {
      if (s < 0) throw ConfigError("'ablation.seeds' entries must be non-negative");
      c.ablation_seeds.push_back(static_cast<std::uint64_t>(s));
    }
  }
  if (cfg.has("pretrain.data_dir")) c.pretrain_data_dir = cfg.text("pretrain.data_dir");
  if (cfg.has("pretrain.epochs")) c.pretrain_epochs = static_cast<std::size_t>(std::max<std::int64_t>(0, cfg.integer("pretrain.epochs")));
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) { return from_config(ConfigFile::load(path)); }

ConfigFile ExperimentConfig::to_config() const {
  ConfigFile cfg;
  cfg.set("setting", to_string(setting));
  cfg.set("loss", to_string(loss));
  cfg.set("lambda", real_text(lambda));
  cfg.set("lr", real_text(lr));
  cfg.set("batch_size", std::to_string(batch_size));
  cfg.set("epochs", std::to_string(epochs));
  cfg.set("data_dir", data_dir.string());
  cfg.set("seed", std::to_string(seed));
  if (init_checkpoint) cfg.set("init_checkpoint", init_checkpoint->string());
  cfg.set("supervise", to_string(supervise));
  cfg.set("model.fusion", to_string(model.fusion));
  cfg.set("model.tpavi_stages", join(model.fusion_stages));
  cfg.set("model.channels", std::to_string(model.channels));
  cfg.set("model.audio_dim", std::to_string(model.audio_dim));
  cfg.set("model.audio_hidden", std::to_string(model.audio_hidden));
  cfg.set("model.stage_channels", join(model.stage_channels));
  cfg.set("model.aspp_rates", join(model.aspp_rates));
  if (!ablation_seeds.empty()) cfg.set("ablation.seeds", join(ablation_seeds));
  if (pretrain_data_dir) cfg.set("pretrain.data_dir", pretrain_data_dir->string());
  if (pretrain_epochs) cfg.set("pretrain.epochs", std::to_string(*pretrain_epochs));
  return cfg;
}

std::string format_train_log(const TrainLog& log) {
  std::string out = "epoch,bce,avm,valid_miou,valid_fscore\n";
  char buf[160];
  for (const auto& r : log.epochs) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f\n", r.epoch, r.bce, r.avm, r.valid_miou, r.valid_fscore);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

VideoScore score_video(const Tensor& prediction, const VideoSample& v) {
  if (v.labelled.empty()) throw ArgumentError("video " + v.id + " has no masks to score against");
  return {v.id, miou(prediction, v.masks, kDefaultThreshold, v.labelled),
          f_score(prediction, v.masks, kDefaultThreshold, kDefaultBeta2, v.labelled)};
}

}  // namespace

MetricReport evaluate(const AvsModel& model, const std::vector<VideoSample>& videos) {
  std::vector<VideoScore> rows;
  for (const auto& v : videos) {
    Tape tape;
    const auto p = model.bind_constants(tape);
    const auto out = model.forward(p, tape.constant(v.frames), tape.constant(v.mel), {false});
    rows.push_back(score_video(out.mask.value(), v));
  }
  return summarize(std::move(rows));
}

MetricReport evaluate(const fs::path& checkpoint, const fs::path& data_dir, std::string_view split) {
  const auto videos = load_split(data_dir, split);
  if (videos.empty()) throw ArgumentError("split '" + std::string(split) + "' has no videos");
  const AvsModel model = load_model(checkpoint, videos[0].frames.dim(1), videos[0].frames.dim(2));
  return evaluate(model, videos);
}

MetricReport score_predictions(const std::vector<Tensor>& predictions, const std::vector<VideoSample>& videos) {
  if (predictions.size() != videos.size()) throw ArgumentError("one prediction per video required");
  std::vector<VideoScore> rows;
  for (std::size_t i = 0; i < videos.size(); ++i) rows.push_back(score_video(predictions[i], videos[i]));
  return summarize(std::move(rows));
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct Adam {
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m, v;

  Adam(double rate, const std::vector<Tensor>& params) : lr(rate) {
    for (const auto& p : params) {
      m.emplace_back(p.numel(), 0.0);
      v.emplace_back(p.numel(), 0.0);
    }
  }

  void update(std::vector<Tensor>& params) {
    ++step;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.has_grad()) continue;
      const auto& g = p.grad();
      auto& mi = m[i];
      auto& vi = v[i];
      for (std::size_t k = 0; k < p.numel(); ++k) {
        mi[k] = b1 * mi[k] + (1.0 - b1) * g[k];
        vi[k] = b2 * vi[k] + (1.0 - b2) * g[k] * g[k];
        p[k] -= lr * (mi[k] / c1) / (std::sqrt(vi[k] / c2) + eps);
      }
    }
  }
};

std::vector<std::size_t> frames_for(const ExperimentConfig& c, std::size_t clips) {
  switch (c.supervise) {
    case Supervision::setting:
      return supervised_frames(c.setting, clips);
    case Supervision::first:
      return {0};
    case Supervision::all:
      return supervised_frames(Setting::ms3, clips);
  }
  return {};
}

}  // namespace

BatchLoss batch_gradients(AvsModel& model, const ExperimentConfig& c, std::span<const VideoSample* const> batch) {
  const ModelConfig& mc = model.config();
  const bool use_avm = c.setting == Setting::ms3 && c.loss != AvmVariant::none;
  const double n = static_cast<double>(batch.size());
  BatchLoss sums;
  model.zero_grad();
  for (const VideoSample* v : batch) {
    const auto sup = frames_for(c, v->frames.dim(0));
    Tape tape;
    const auto p = model.bind(tape);
    const auto out = model.forward(p, tape.constant(v->frames), tape.constant(v->mel), {false});
    std::vector<AvmStage> stages;
    if (use_avm) {
      for (int s : mc.fusion_stages) {
        stages.push_back({s, out.fused[static_cast<std::size_t>(s - 1)], model.audio_target(p, s, out.audio)});
      }
    }
    const auto loss = total_loss(out.mask, v->masks, sup, c.setting, c.loss, c.lambda, stages, out.audio.value());
    backward(scale(loss.total_var, 1.0 / n));
    sums.bce += loss.bce;
    sums.avm += loss.avm;
  }
  return sums;
}

namespace {

TrainResult train_impl(const ExperimentConfig& c, const EpochCallback& on_epoch, const NamedTensors* init) {
  const DatasetSpec data = read_dataset_spec(c.data_dir);
  if (c.setting == Setting::s4 && data.mode != SceneMode::s4) {
    throw ConfigError("S4 training needs an s4 dataset, '" + c.data_dir.string() + "' is " + to_string(data.mode));
  }
  if (c.setting == Setting::ms3 && data.mode == SceneMode::s4) {
    throw ConfigError("MS3 training needs an ms3 or disambig dataset, '" + c.data_dir.string() + "' is s4");
  }
  ModelConfig mc = c.model;
  mc.height = data.params.height;
  mc.width = data.params.width;
  mc.n_mels = data.params.n_mels;
  mc.seed = c.seed;
  if (c.setting == Setting::ms3 && c.loss != AvmVariant::none && mc.fusion_stages.empty()) throw ConfigError("the mapping loss needs at least one fused stage");
  if (c.loss == AvmVariant::vv && data.params.clips < 2) throw ConfigError("the vv loss needs at least two clips");

  const auto train_set = load_split(c.data_dir, "train");
  const auto valid_set = load_split(c.data_dir, "valid");
  if (train_set.empty() || valid_set.empty()) throw ConfigError("dataset lacks train or valid videos");
  const auto sup = frames_for(c, data.params.clips);
  for (const auto& v : train_set) {
    for (auto t : sup) {
      if (std::find(v.labelled.begin(), v.labelled.end(), t) == v.labelled.end()) {
        throw ConfigError("training video " + v.id + " has no mask for frame " + std::to_string(t + 1) +
                          " (supervise = " + to_string(c.supervise) + ")");
      }
    }
  }

  AvsModel model(mc);
  if (init) load_parameters(model, *init);
  model.set_requires_grad(true);

  TrainResult result{model, {}, 0, -1.0};
  if (c.epochs == 0) {
    result.best_valid_miou = evaluate(model, valid_set).miou;
    return result;
  }

  Adam adam(c.lr, model.parameters());
  Rng order(mix_seed(c.seed, 0xBA7C4));
  std::vector<std::size_t> perm(train_set.size());
  std::vector<Tensor> best = model.parameters();
  std::vector<const VideoSample*> batch;

  for (std::size_t epoch = 1; epoch <= c.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    order.shuffle(perm.begin(), perm.end());
    double bce_sum = 0.0, avm_sum = 0.0;
    for (std::size_t b = 0; b < perm.size(); b += c.batch_size) {
      const std::size_t n = std::min(c.batch_size, perm.size() - b);
      batch.clear();
      for (std::size_t k = b; k < b + n; ++k) batch.push_back(&train_set[perm[k]]);
      const BatchLoss loss = batch_gradients(model, c, batch);
      bce_sum += loss.bce;
      avm_sum += loss.avm;
      adam.update(model.parameters());
    }

    const MetricReport valid = evaluate(model, valid_set);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.bce = bce_sum / static_cast<double>(train_set.size());
    rec.avm = avm_sum / static_cast<double>(train_set.size());
    rec.valid_miou = valid.miou;
    rec.valid_fscore = valid.fscore;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.epochs.push_back(rec);
    if (valid.miou > result.best_valid_miou) {
      result.best_valid_miou = valid.miou;
      result.best_epoch = epoch;
      for (std::size_t i = 0; i < best.size(); ++i) best[i].values() = model.parameters()[i].values();
    }
    if (on_epoch) on_epoch(rec);
  }
  for (std::size_t i = 0; i < best.size(); ++i) model.parameters()[i].values() = best[i].values();
  model.zero_grad();
  result.model = std::move(model);
  return result;
}

}  // namespace

TrainResult train(const ExperimentConfig& config, const EpochCallback& on_epoch) {
  if (config.init_checkpoint) {
    const NamedTensors init = read_checkpoint(*config.init_checkpoint);
    return train_impl(config, on_epoch, &init);
  }
  return train_impl(config, on_epoch, nullptr);
}

// ---------------------------------------------------------------------------
// Ablations

double AblationRow::mean_miou() const {
  return std::accumulate(miou.begin(), miou.end(), 0.0) / static_cast<double>(miou.size());
}

double AblationRow::mean_fscore() const {
  return std::accumulate(fscore.begin(), fscore.end(), 0.0) / static_cast<double>(fscore.size());
}

namespace {

struct Variant {
  std::string label;
  ExperimentConfig config;
  bool pretrain = false;
};

std::string stage_label(const std::vector<int>& stages) { return join(stages, "+"); }

std::vector<Variant> ablation_variants(const std::string& name, const ExperimentConfig& base) {
  std::vector<Variant> out;
  const std::vector<int> all_stages{1, 2, 3, 4};
  if (name == "tpavi") {
    for (auto mode : {FusionMode::none, FusionMode::add, FusionMode::tpavi}) {
      ExperimentConfig c = base;
      c.loss = AvmVariant::none;
      c.model.fusion = mode;
      c.model.fusion_stages = mode == FusionMode::none ? std::vector<int>{}
                              : base.model.fusion_stages.empty() ? all_stages
                                                                 : base.model.fusion_stages;
      out.push_back({to_string(mode), c});
    }
  } else if (name == "fusion_stages") {
    for (const auto& stages : std::vector<std::vector<int>>{{1}, {2}, {3}, {4}, {3, 4}, {2, 3, 4}, {1, 2, 3, 4}}) {
      ExperimentConfig c = base;
      c.model.fusion = FusionMode::tpavi;
      c.model.fusion_stages = stages;
      out.push_back({stage_label(stages), c});
    }
  } else if (name == "loss") {
    if (base.setting != Setting::ms3) throw ConfigError("the loss ablation runs in the MS3 setting");
    for (auto v : {AvmVariant::none, AvmVariant::av, AvmVariant::vv}) {
      ExperimentConfig c = base;
      c.loss = v;
      if (c.model.fusion == FusionMode::none) {
        c.model.fusion = FusionMode::tpavi;
        c.model.fusion_stages = all_stages;
      }
      out.push_back({to_string(v), c});
    }
  } else if (name == "pretrain") {
    if (base.setting != Setting::ms3) throw ConfigError("the pretrain ablation fine-tunes in the MS3 setting");
    if (!base.pretrain_data_dir) throw ConfigError("the pretrain ablation needs 'pretrain.data_dir' (S4 data)");
    out.push_back({"scratch", base});
    out.push_back({"pretrained", base, true});
  } else {
    throw ArgumentError("unknown ablation '" + name + "' (expected tpavi, fusion_stages, loss or pretrain)");
  }
  return out;
}

}  // namespace

AblationTable run_ablation(const std::string& name, const ExperimentConfig& base, const std::optional<fs::path>& out_dir,
                           std::ostream* progress) {
  AblationTable table;
  table.name = name;
  const auto variants = ablation_variants(name, base);
  table.seeds = base.ablation_seeds.empty() ? std::vector<std::uint64_t>{base.seed} : base.ablation_seeds;
  if (out_dir) {
    std::error_code ec;
    fs::create_directories(*out_dir, ec);
    if (!fs::is_directory(*out_dir)) throw IoError("cannot create directory '" + out_dir->string() + "'");
  }
  const auto test_set = load_split(base.data_dir, "test");
  if (test_set.empty()) throw ConfigError("dataset has no test videos");

  for (const auto& variant : variants) {
    AblationRow row{variant.label, {}, {}};
    for (auto seed : table.seeds) {
      ExperimentConfig c = variant.config;
      c.seed = seed;
      TrainResult trained = [&] {
        if (!variant.pretrain) return train(c);
        ExperimentConfig pre = c;
        pre.setting = Setting::s4;
        pre.loss = AvmVariant::none;
        pre.supervise = Supervision::setting;
        pre.data_dir = *c.pretrain_data_dir;
        pre.init_checkpoint.reset();
        if (c.pretrain_epochs) pre.epochs = *c.pretrain_epochs;
        const TrainResult source = train(pre);
        NamedTensors init;
        for (std::size_t i = 0; i < source.model.names().size(); ++i) {
          init.emplace_back(source.model.names()[i], source.model.parameters()[i]);
        }
        c.init_checkpoint.reset();
        return train_impl(c, {}, &init);
      }();
      const MetricReport report = evaluate(trained.model, test_set);
      row.miou.push_back(report.miou);
      row.fscore.push_back(report.fscore);
      if (out_dir) {
        const std::string stem = variant.label + "_seed" + std::to_string(seed);
        save_checkpoint(*out_dir / (stem + ".ckpt"), trained.model);
        write_metrics_csv(*out_dir / (stem + ".csv"), report);
      }
      if (progress) {
        char buf[200];
        std::snprintf(buf, sizeof buf, "%s %s seed %llu: test mIoU %.4f F %.4f (best epoch %zu)\n", name.c_str(),
                      variant.label.c_str(), static_cast<unsigned long long>(seed), report.miou, report.fscore,
                      trained.best_epoch);
        *progress << buf << std::flush;
      }
    }
    table.rows.push_back(std::move(row));
  }
  if (out_dir) write_text(*out_dir / "ablation.csv", format_ablation_csv(table));
  return table;
}

std::string format_ablation_csv(const AblationTable& table) {
  std::string out = "variant,mean_miou,mean_fscore";
  for (auto s : table.seeds) out += ",miou_seed" + std::to_string(s) + ",fscore_seed" + std::to_string(s);
  out += "\n";
  char buf[64];
  for (const auto& r : table.rows) {
    out += r.variant;
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f", r.mean_miou(), r.mean_fscore());
    out += buf;
    for (std::size_t k = 0; k < r.miou.size(); ++k) {
      std::snprintf(buf, sizeof buf, ",%.6f,%.6f", r.miou[k], r.fscore[k]);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention

AttentionMaps attention_maps(const AvsModel& model, const VideoSample& video) {
  const ModelConfig& mc = model.config();
  if (mc.fusion != FusionMode::tpavi || !mc.fused(4)) {
    throw ArgumentError("attention export needs TPAVI at stage 4");
  }
  Tape tape;
  const auto p = model.bind_constants(tape);
  const auto out = model.forward(p, tape.constant(video.frames), tape.constant(video.mel), {true});
  const auto it = std::find_if(out.alphas.begin(), out.alphas.end(), [](const auto& a) { return a.stage == 4; });
  const Tensor& alpha = it->alpha;
  const Tensor& z = out.fused[3].value();
  const std::size_t T = z.dim(0), h = z.dim(1), w = z.dim(2), N = T * h * w, hw = h * w;
  const std::size_t factor = mc.height / h;

  AttentionMaps maps;
  for (std::size_t t = 0; t < T; ++t) {
    Tensor r({h, w});
    for (std::size_t i = 0; i < hw; ++i) {
      const std::size_t pidx = t * hw + i;
      double s = 0.0;
      for (std::size_t j = 0; j < hw; ++j) s += alpha[pidx * N + t * hw + j];
      r[i] = s / static_cast<double>(hw);
    }
    const auto [lo, hi] = std::minmax_element(r.data().begin(), r.data().end());
    const double range = *hi - *lo;
    Tensor norm({1, h, w, 1});
    for (std::size_t i = 0; i < hw; ++i) norm[i] = range > 0.0 ? (r[i] - *lo) / range : 0.5;
    Tape up;
    Tensor img = upsample_bilinear(up.constant(std::move(norm)), factor).value().reshaped({h * factor, w * factor});
    for (double& v : img.data()) v = std::clamp(v, 0.0, 1.0);
    maps.response.push_back(std::move(r));
    maps.images.push_back(std::move(img));
  }
  return maps;
}

AttentionMaps export_attention(const fs::path& checkpoint, const fs::path& video_dir, const fs::path& out_dir) {
  const VideoSample video = load_video(video_dir);
  const AvsModel model = load_model(checkpoint, video.frames.dim(1), video.frames.dim(2));
  AttentionMaps maps = attention_maps(model, video);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir)) throw IoError("cannot create directory '" + out_dir.string() + "'");
  for (std::size_t t = 0; t < maps.images.size(); ++t) {
    write_gray_pgm(out_dir / ("attn_" + std::to_string(t + 1) + ".pgm"), maps.images[t]);
  }
  return maps;
}

// ---------------------------------------------------------------------------
// Gradient checks

bool GradReport::ok() const {
  return std::all_of(components.begin(), components.end(), [](const auto& c) { return c.second <= kGradTolerance; });
}

double GradReport::worst() const {
  double w = 0.0;
  for (const auto& c : components) w = std::max(w, std::isfinite(c.second) ? c.second : INFINITY);
  return w;
}

namespace {

Tensor uniform_tensor(Shape dims, Rng& rng, double lo, double hi) {
  Tensor t(std::move(dims));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Tensor mask_tensor(Shape dims, Rng& rng) {
  Tensor t(std::move(dims));
  for (double& v : t.data()) v = rng.coin() ? 1.0 : 0.0;
  return t;
}

using Body = std::function<Var(Tape&, std::span<const Var> params, std::span<const Var> extra)>;

// grad_check over the parameters whose names start with one of `prefixes`
// plus `extra` inputs; every other parameter enters as a constant.
double check_part(AvsModel& model, const std::vector<std::string>& prefixes, std::vector<Tensor> extra,
                  const Body& body, Fault fault) {
  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < model.names().size(); ++i) {
    for (const auto& pre : prefixes) {
      if (model.names()[i].rfind(pre, 0) == 0) {
        chosen.push_back(i);
        break;
      }
    }
  }
  std::vector<Tensor> inputs;
  for (auto i : chosen) inputs.push_back(Tensor(model.parameters()[i].dims(), model.parameters()[i].values()));
  const std::size_t n = inputs.size();
  for (auto& e : extra) inputs.push_back(std::move(e));
  return grad_check(
      [&](Tape& tape, std::span<const Var> in) {
        std::vector<Var> params;
        std::size_t k = 0;
        for (std::size_t i = 0; i < model.names().size(); ++i) {
          if (k < chosen.size() && chosen[k] == i) {
            params.push_back(in[k++]);
          } else {
            params.push_back(tape.constant(Tensor(model.parameters()[i].dims(), model.parameters()[i].values())));
          }
        }
        return body(tape, params, in.subspan(n));
      },
      std::move(inputs), 1e-6, {fault});
}

}  // namespace

GradReport gradcheck_components(std::uint64_t seed, Fault fault) {
  ModelConfig mc;
  mc.height = mc.width = 32;
  mc.n_mels = 6;
  mc.audio_hidden = 5;
  mc.audio_dim = 4;
  mc.channels = 4;
  mc.stage_channels = {2, 3, 3, 4};
  mc.aspp_rates = {1};
  mc.fusion = FusionMode::tpavi;
  mc.fusion_stages = {1, 2, 3, 4};
  mc.seed = mix_seed(seed, 0x6C);
  AvsModel model(mc);
  Rng rng(mix_seed(seed, 0x6D));
  const std::size_t T = 5;

  const Tensor frames = uniform_tensor({T, 32, 32, 3}, rng, 0.0, 1.0);
  const Tensor mel = uniform_tensor({T, 6}, rng, -1.0, 1.0);
  const Tensor gt = mask_tensor({T, 32, 32}, rng);

  // Weighted sum with fixed random weights as the scalar head.
  auto probe = [&](Tape& tape, Var y, std::uint64_t key) {
    Rng w(mix_seed(seed, key));
    return sum(mul(y, tape.constant(uniform_tensor(y.dims(), w, -1.0, 1.0))));
  };
  auto pyramid_dims = [&](std::size_t t, std::size_t c, std::size_t i) -> Shape {
    const std::size_t s = 32 >> (i + 2);
    return {t, s, s, c};
  };

  GradReport report;
  auto run = [&](const std::string& name, const std::vector<std::string>& prefixes, std::vector<Tensor> extra,
                 const Body& body) { report.components.emplace_back(name, check_part(model, prefixes, std::move(extra), body, fault)); };

  run("encode_audio", {"audio."}, {mel}, [&](Tape& tape, auto p, auto x) {
    return probe(tape, model.encode_audio(p, x[0]), 1);
  });

  run("encode_visual", {"visual."}, {}, [&](Tape& tape, auto p, auto) {
    Tensor two({2, 32, 32, 3}, std::vector<double>(frames.data().begin(), frames.data().begin() + 2 * 32 * 32 * 3));
    const auto f = model.encode_visual(p, tape.constant(two));
    Var total = probe(tape, f[0], 10);
    for (std::size_t i = 1; i < kStageCount; ++i) total = add(total, probe(tape, f[i], 10 + i));
    return total;
  });

  {
    std::vector<Tensor> feats;
    for (std::size_t i = 0; i < kStageCount; ++i) feats.push_back(uniform_tensor(pyramid_dims(2, mc.stage_channels[i], i), rng, -1, 1));
    run("aspp", {"aspp"}, feats, [&](Tape& tape, auto p, auto x) {
      Var total = probe(tape, model.aspp(p, 1, x[0]), 20);
      for (std::size_t i = 1; i < kStageCount; ++i) total = add(total, probe(tape, model.aspp(p, static_cast<int>(i + 1), x[i]), 20 + i));
      return total;
    });
  }

  {
    std::vector<Tensor> vis;
    for (std::size_t i = 0; i < kStageCount; ++i) vis.push_back(uniform_tensor(pyramid_dims(T, 4, i), rng, -1, 1));
    vis.push_back(uniform_tensor({T, 4}, rng, -1, 1));
    run("tpavi", {"tpavi"}, vis, [&](Tape& tape, auto p, auto x) {
      Var total = probe(tape, model.tpavi(p, 1, x[0], x[4], false).fused, 30);
      for (std::size_t i = 1; i < kStageCount; ++i) {
        total = add(total, probe(tape, model.tpavi(p, static_cast<int>(i + 1), x[i], x[4], false).fused, 30 + i));
      }
      return total;
    });
  }

  {
    std::vector<Tensor> zs;
    for (std::size_t i = 0; i < kStageCount; ++i) zs.push_back(uniform_tensor(pyramid_dims(2, 4, i), rng, -1, 1));
    run("decode", {"decoder."}, zs, [&](Tape& tape, auto p, auto x) {
      StagePyramid z;
      for (std::size_t i = 0; i < kStageCount; ++i) z[i] = x[i];
      return probe(tape, model.decode(p, z), 40);
    });
  }

  const Tensor logits = uniform_tensor({T, 8, 8}, rng, -2, 2);
  const Tensor small_gt = mask_tensor({T, 8, 8}, rng);
  const std::vector<std::size_t> all_frames = supervised_frames(Setting::ms3, T);
  run("bce", {}, {logits}, [&](Tape&, auto, auto x) { return bce(sigmoid(x[0]), small_gt, all_frames); });

  const Tensor z_small = uniform_tensor({T, 4, 4, 4}, rng, -2, 2);
  const Tensor a_small = uniform_tensor({T, 4}, rng, -2, 2);
  run("avm_av", {}, {logits, z_small, a_small}, [&](Tape&, auto, auto x) {
    const std::vector<AvmStage> stages{{1, x[1], x[2]}};
    return avm_av(sigmoid(x[0]), stages);
  });
  run("avm_vv", {}, {logits, z_small}, [&](Tape& tape, auto, auto x) {
    const std::vector<AvmStage> stages{{1, x[1], tape.constant(Tensor({T, 4}))}};
    return avm_vv(sigmoid(x[0]), stages, a_small);
  });

  run("end_to_end", {""}, {}, [&](Tape& tape, auto p, auto) {
    const auto out = model.forward(p, tape.constant(frames), tape.constant(mel), {false});
    std::vector<AvmStage> stages;
    for (int s : mc.fusion_stages) stages.push_back({s, out.fused[static_cast<std::size_t>(s - 1)], model.audio_target(p, s, out.audio)});
    return total_loss(out.mask, gt, all_frames, Setting::ms3, AvmVariant::av, kDefaultLambda, stages, out.audio.value())
        .total_var;
  });
  return report;
}

}  // namespace avs
