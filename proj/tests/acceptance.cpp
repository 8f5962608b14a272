// Acceptance suite: one PASS/FAIL line per criterion.
//
//   avs_acceptance [N ...]       run the listed criteria (default: all)
//
// Training criteria read their hyperparameters from the configs/ directory and
// generate their own datasets under a scratch directory.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "avs/harness.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace avs {
namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

class Workspace {
 public:
  explicit Workspace(int criterion)
      : dir_(fs::temp_directory_path() / ("avs_acceptance_" + std::to_string(criterion))) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  ~Workspace() { fs::remove_all(dir_); }
  const fs::path& dir() const { return dir_; }

  fs::path dataset(const std::string& name, SceneMode mode, std::size_t videos, std::uint64_t seed,
                   bool all_masks = false) const {
    DatasetSpec spec;
    spec.mode = mode;
    spec.n_videos = videos;
    spec.seed = seed;
    spec.all_masks = all_masks;
    make_dataset(spec, dir_ / name);
    return dir_ / name;
  }

 private:
  fs::path dir_;
};

ExperimentConfig load_config(const std::string& name, std::map<std::string, fs::path> dirs) {
  ConfigFile cfg = ConfigFile::load(fs::path(AVS_CONFIG_DIR) / name);
  for (auto& [key, dir] : dirs) cfg.set(key, dir.string());
  return ExperimentConfig::from_config(cfg);
}

std::vector<std::uint64_t> seeds_of(const ExperimentConfig& c) {
  return c.ablation_seeds.empty() ? std::vector<std::uint64_t>{c.seed} : c.ablation_seeds;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string join_values(const std::vector<double>& v) {
  std::string out;
  for (double x : v) out += (out.empty() ? "" : " ") + fmt("%.4f", x);
  return out;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_name;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (const auto& [name, err] : gradcheck_components(seed).components) {
      if (err >= worst) {
        worst = err;
        worst_name = name;
      }
    }
  }
  const double secs = seconds_since(t0);
  const bool fault_caught = !gradcheck_components(0, Fault::matmul_backward).ok();
  return {worst <= kGradTolerance && secs <= 120.0 && fault_caught,
          fmt("max rel. error %.2e (%s) over 10 seeds x 9 components, %.1f s (limit 1e-4, 120 s); injected fault %s",
              worst, worst_name.c_str(), secs, fault_caught ? "detected" : "MISSED")};
}

Outcome tpavi_oracle() {
  ModelConfig mc;
  mc.seed = 21;
  AvsModel model(mc);
  const Tensor frames = test::random_tensor({5, mc.height, mc.width, 3}, 22, 0.0, 1.0);
  const Tensor mel = test::random_tensor({5, mc.n_mels}, 23, 0.0, 1.0);
  Tape tape;
  const auto p = model.bind_constants(tape);
  const auto out = model.forward(p, tape.constant(frames), tape.constant(mel), {true});
  const auto visual = model.encode_visual(p, tape.constant(frames));
  const Tensor a = out.audio.value();

  bool ok = true;
  std::string detail;
  int checked = 0;
  for (int s = 1; s <= 4; ++s) {
    const Tensor v = model.aspp(p, s, visual[static_cast<std::size_t>(s - 1)]).value();
    if (v.dim(1) * v.dim(2) > 64) continue;
    const auto oracle = test::tpavi_loop_oracle(model, s, v, a);
    const auto it = std::find_if(out.alphas.begin(), out.alphas.end(), [&](const auto& x) { return x.stage == s; });
    double ea = 0.0, ez = 0.0;
    for (std::size_t k = 0; k < oracle.alpha.numel(); ++k) ea = std::max(ea, std::abs(it->alpha[k] - oracle.alpha[k]));
    const Tensor& z = out.fused[static_cast<std::size_t>(s - 1)].value();
    for (std::size_t k = 0; k < oracle.fused.numel(); ++k) ez = std::max(ez, std::abs(z[k] - oracle.fused[k]));
    ok = ok && ea <= 1e-10 && ez <= 1e-10;
    ++checked;
    detail += fmt("stage %d (%zux%zu): alpha %.1e, Z %.1e; ", s, v.dim(1), v.dim(2), ea, ez);
  }
  return {ok && checked > 0, detail + "limit 1e-10, T=5"};
}

Outcome tpavi_identity() {
  ModelConfig mc;
  mc.seed = 31;
  AvsModel model(mc);
  for (int s = 1; s <= 4; ++s) {
    const std::string pre = "tpavi" + std::to_string(s);
    for (const auto& name : {pre + ".phi.weight", pre + ".phi.bias", pre + ".mu.bias"})
      for (double& v : model.parameter(name).data()) v = 0.0;
  }
  const Tensor frames = test::random_tensor({5, mc.height, mc.width, 3}, 32, 0.0, 1.0);
  const Tensor mel = test::random_tensor({5, mc.n_mels}, 33, 0.0, 1.0);
  Tape tape;
  const auto p = model.bind_constants(tape);
  const auto visual = model.encode_visual(p, tape.constant(frames));
  const auto audio = model.encode_audio(p, tape.constant(mel));
  int identical = 0;
  for (int s = 1; s <= 4; ++s) {
    const Var v = model.aspp(p, s, visual[static_cast<std::size_t>(s - 1)]);
    const auto out = model.tpavi(p, s, v, audio);
    const Tensor& z = out.fused.value();
    identical += z.dims() == v.value().dims() &&
                 std::memcmp(z.data().data(), v.value().data().data(), z.numel() * sizeof(double)) == 0;
  }
  return {identical == 4, fmt("%d of 4 stages bitwise identical", identical)};
}

Outcome metric_oracles() {
  std::mt19937_64 gen(41);
  std::uniform_real_distribution<double> density(0.0, 1.0);
  int mismatches = 0, both_empty = 0, one_empty = 0;
  const std::size_t T = 5;
  for (std::uint64_t i = 0; i < 100; ++i) {
    const double dp = i % 5 == 0 ? 0.0 : density(gen);
    const double dg = i % 4 == 0 ? 0.0 : density(gen);
    const Tensor pred = test::random_mask({T, 16, 16}, 4100 + i, dp);
    const Tensor gt = test::random_mask({T, 16, 16}, 4200 + i, dg);
    double io = 0.0, fo = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      Tensor pt({1, 16, 16}), gtt({1, 16, 16});
      std::copy_n(pred.data().begin() + static_cast<std::ptrdiff_t>(t * 256), 256, pt.data().begin());
      std::copy_n(gt.data().begin() + static_cast<std::ptrdiff_t>(t * 256), 256, gtt.data().begin());
      const double fi = test::iou_oracle(pred, gt, t), ff = test::f_oracle(pred, gt, t);
      mismatches += miou(pt, gtt) != fi || f_score(pt, gtt) != ff;
      io += fi;
      fo += ff;
    }
    mismatches += miou(pred, gt) != io / T || f_score(pred, gt) != fo / T;
    both_empty += dp == 0.0 && dg == 0.0;
    one_empty += (dp == 0.0) != (dg == 0.0);
  }
  return {mismatches == 0 && both_empty > 0 && one_empty > 0,
          fmt("%d exact mismatches over 100 pairs (%d both-empty, %d one-empty pairs)", mismatches, both_empty,
              one_empty)};
}

Outcome disambiguation() {
  const auto t0 = std::chrono::steady_clock::now();
  Workspace ws(5);
  const fs::path data = ws.dataset("disambig", SceneMode::disambig, 60, 1);
  const double ceiling = bayes_visual_ceiling(data, "test");
  const ExperimentConfig base = load_config("disambig.cfg", {{"data_dir", data}});
  const auto test_set = load_split(data, "test");
  std::vector<double> none, tpavi;
  for (auto seed : seeds_of(base)) {
    for (auto mode : {FusionMode::none, FusionMode::tpavi}) {
      ExperimentConfig c = base;
      c.seed = seed;
      c.loss = AvmVariant::none;
      c.model.fusion = mode;
      c.model.fusion_stages = mode == FusionMode::none ? std::vector<int>{} : std::vector<int>{1, 2, 3, 4};
      const double m = evaluate(train(c).model, test_set).miou;
      (mode == FusionMode::none ? none : tpavi).push_back(m);
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = mean(none) <= ceiling + 0.05 && mean(tpavi) >= ceiling + 0.15 && secs <= 1800.0;
  return {ok, fmt("ceiling %.4f; none %.4f [%s] (<= %.4f); tpavi %.4f [%s] (>= %.4f); %.0f s (limit 1800 s)",
                  ceiling, mean(none), join_values(none).c_str(), ceiling + 0.05, mean(tpavi),
                  join_values(tpavi).c_str(), ceiling + 0.15, secs)};
}

Outcome audio_gating() {
  Workspace ws(6);
  const fs::path data = ws.dataset("ms3", SceneMode::ms3, 20, 6);
  const auto videos = load_split(data, "train");
  ExperimentConfig c = load_config("ms3.cfg", {{"data_dir", data}});
  c.loss = AvmVariant::none;
  std::size_t batches = 0, gated = 0, flowing = 0;
  for (auto mode : {FusionMode::none, FusionMode::tpavi}) {
    ModelConfig mc = c.model;
    mc.fusion = mode;
    mc.fusion_stages = mode == FusionMode::none ? std::vector<int>{} : std::vector<int>{1, 2, 3, 4};
    mc.seed = 61;
    AvsModel model(mc);
    for (std::size_t b = 0; b < videos.size(); b += c.batch_size) {
      std::vector<const VideoSample*> batch;
      for (std::size_t k = b; k < std::min(videos.size(), b + c.batch_size); ++k) batch.push_back(&videos[k]);
      batch_gradients(model, c, batch);
      std::size_t nonzero = 0, all_zero = 1;
      for (std::size_t i = 0; i < model.names().size(); ++i) {
        if (model.names()[i].rfind("audio.", 0) != 0) continue;
        const Tensor& p = model.parameters()[i];
        if (!p.has_grad()) continue;
        for (double g : p.grad()) {
          nonzero += std::abs(g) > 1e-12;
          all_zero = all_zero && g == 0.0;
        }
      }
      if (mode == FusionMode::none) {
        ++batches;
        gated += all_zero;
      } else {
        flowing += nonzero > 0;
      }
    }
  }
  return {gated == batches && flowing == batches,
          fmt("fusion none: %zu/%zu batches with all audio-encoder gradients exactly 0; "
              "tpavi: %zu/%zu batches with some |g| > 1e-12",
              gated, batches, flowing, batches)};
}

Outcome avm_non_degradation() {
  Workspace ws(7);
  const fs::path data = ws.dataset("ms3", SceneMode::ms3, 60, 2);
  const ExperimentConfig base = load_config("ms3.cfg", {{"data_dir", data}});
  const AblationTable t = run_ablation("loss", base);
  const auto& none = t.rows[0];
  const auto& av = t.rows[1];
  const auto& vv = t.rows[2];
  const double d_av = 100.0 * (av.mean_miou() - none.mean_miou());
  const double d_vv = 100.0 * (vv.mean_miou() - none.mean_miou());
  return {d_av >= -0.5, fmt("BCE-only %.4f [%s]; AV %.4f [%s] delta %+.2f pts (>= -0.5); VV %.4f [%s] delta %+.2f pts",
                            none.mean_miou(), join_values(none.miou).c_str(), av.mean_miou(),
                            join_values(av.miou).c_str(), d_av, vv.mean_miou(), join_values(vv.miou).c_str(), d_vv)};
}

Outcome one_shot_supervision() {
  Workspace ws(8);
  const fs::path data = ws.dataset("s4", SceneMode::s4, 60, 3, true);
  const ExperimentConfig base = load_config("s4.cfg", {{"data_dir", data}});
  const auto test_set = load_split(data, "test");
  std::vector<double> first, all;
  for (auto seed : seeds_of(base)) {
    for (auto sup : {Supervision::first, Supervision::all}) {
      ExperimentConfig c = base;
      c.seed = seed;
      c.supervise = sup;
      (sup == Supervision::first ? first : all).push_back(evaluate(train(c).model, test_set).miou);
    }
  }
  const double gap = 100.0 * (mean(all) - mean(first));
  return {gap <= 5.0, fmt("frame-1 only %.4f [%s]; all frames %.4f [%s]; gap %.2f pts (<= 5)", mean(first),
                          join_values(first).c_str(), mean(all), join_values(all).c_str(), gap)};
}

Outcome pretraining() {
  Workspace ws(9);
  const fs::path ms3 = ws.dataset("ms3", SceneMode::ms3, 60, 2);
  const fs::path s4 = ws.dataset("s4", SceneMode::s4, 60, 3);
  const ExperimentConfig base = load_config("pretrain.cfg", {{"data_dir", ms3}, {"pretrain.data_dir", s4}});
  const AblationTable t = run_ablation("pretrain", base);
  const auto& scratch = t.rows[0];
  const auto& pre = t.rows[1];
  const double delta = 100.0 * (pre.mean_miou() - scratch.mean_miou());
  return {delta >= -0.5, fmt("scratch %.4f [%s]; pretrained %.4f [%s]; delta %+.2f pts (>= -0.5)", scratch.mean_miou(),
                             join_values(scratch.miou).c_str(), pre.mean_miou(), join_values(pre.miou).c_str(), delta)};
}

// Criterion 10 pieces. Each returns an empty string on success.

std::string determinism(const Workspace& ws) {
  const fs::path data = ws.dataset("ms3", SceneMode::ms3, 10, 7);
  const fs::path again = ws.dataset("ms3_again", SceneMode::ms3, 10, 7);
  for (const auto& entry : fs::recursive_directory_iterator(data)) {
    if (!entry.is_regular_file()) continue;
    if (read_file(entry.path()) != read_file(again / fs::relative(entry.path(), data)))
      return "regenerated dataset differs at " + entry.path().string();
  }
  ExperimentConfig c = ExperimentConfig::from_config(ConfigFile::parse(
      "data_dir = .\nsetting = ms3\nloss = av\nlr = 0.003\nepochs = 2\nseed = 4\nmodel.stage_channels = 4,8,8,16\n"
      "model.channels = 8\nmodel.aspp_rates = 1\n"));
  c.data_dir = data;
  std::vector<Bytes> ckpt, logs, csv;
  for (int run = 0; run < 2; ++run) {
    const TrainResult r = train(c);
    const fs::path path = ws.dir() / ("run" + std::to_string(run) + ".ckpt");
    save_checkpoint(path, r.model);
    ckpt.push_back(read_file(path));
    const std::string log = format_train_log(r.log);
    logs.emplace_back(log.begin(), log.end());
    const fs::path metrics = ws.dir() / ("run" + std::to_string(run) + ".csv");
    write_metrics_csv(metrics, evaluate(path, data, "test"));
    csv.push_back(read_file(metrics));
  }
  if (ckpt[0] != ckpt[1]) return "checkpoints differ between identical runs";
  if (logs[0] != logs[1]) return "train logs differ between identical runs";
  if (csv[0] != csv[1]) return "metric CSVs differ between identical runs";
  return {};
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.dims() == b.dims() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

std::string round_trips(const Workspace& ws) {
  std::mt19937_64 gen(101);
  for (int i = 0; i < 50; ++i) {
    const std::size_t rank = 1 + gen() % 4;
    Shape dims;
    for (std::size_t r = 0; r < rank; ++r) dims.push_back(1 + gen() % 5);
    Tensor t(dims);
    for (double& v : t.data()) {
      const std::uint64_t bits = gen();
      std::memcpy(&v, &bits, sizeof v);  // every bit pattern, NaNs included
    }
    const fs::path path = ws.dir() / "t.tns";
    write_tensor(path, t);
    if (!same_bits(read_tensor(path), t)) return "tensor round trip changed bits";
  }

  ModelConfig mc;
  mc.seed = 102;
  const AvsModel model(mc);
  const fs::path ckpt = ws.dir() / "m.ckpt", ckpt2 = ws.dir() / "m2.ckpt";
  save_checkpoint(ckpt, model);
  const AvsModel loaded = load_model(ckpt, mc.height, mc.width);
  for (std::size_t i = 0; i < model.parameters().size(); ++i)
    if (!same_bits(model.parameters()[i], loaded.parameters()[i])) return "checkpoint round trip changed bits";
  save_checkpoint(ckpt2, loaded);
  if (read_file(ckpt) != read_file(ckpt2)) return "re-saved checkpoint differs";

  const Tensor mask = test::random_mask({24, 40}, 103);
  write_mask_pgm(ws.dir() / "m.pgm", mask);
  if (!same_bits(read_mask_pgm(ws.dir() / "m.pgm"), mask)) return "mask PGM round trip changed values";
  Tensor rgb({16, 24, 3}), gray({16, 24});
  for (double& v : rgb.data()) v = static_cast<double>(gen() % 256) / 255.0;
  for (double& v : gray.data()) v = static_cast<double>(gen() % 256) / 255.0;
  write_ppm(ws.dir() / "f.ppm", rgb);
  if (!same_bits(read_ppm(ws.dir() / "f.ppm"), rgb)) return "PPM round trip changed values";
  write_gray_pgm(ws.dir() / "g.pgm", gray);
  if (!same_bits(read_gray_pgm(ws.dir() / "g.pgm"), gray)) return "gray PGM round trip changed values";

  std::vector<VideoScore> rows;
  for (int i = 0; i < 7; ++i)
    rows.push_back({"video_" + std::to_string(i), static_cast<double>(gen() % 1000001) / 1e6,
                    static_cast<double>(gen() % 1000001) / 1e6});
  const std::string csv = format_metrics_csv(summarize(rows));
  if (format_metrics_csv(parse_metrics_csv(csv)) != csv) return "metrics CSV round trip changed text";
  ExperimentConfig c;
  c.data_dir = "some/dir";
  const std::string text = c.to_config().format();
  if (ConfigFile::parse(text).format() != text) return "config round trip changed text";
  if (ExperimentConfig::from_config(ConfigFile::parse(text)).to_config().format() != text)
    return "experiment config round trip changed text";
  return {};
}

std::string fuzz() {
  ModelConfig mc;
  mc.height = mc.width = 32;
  mc.stage_channels = {2, 2, 2, 2};
  mc.channels = 2;
  mc.aspp_rates = {1};
  const AvsModel model(mc);
  NamedTensors entries;
  for (std::size_t i = 0; i < model.names().size(); ++i) entries.emplace_back(model.names()[i], model.parameters()[i]);
  auto text_bytes = [](const std::string& s) { return Bytes(s.begin(), s.end()); };
  auto as_text = [](std::span<const std::uint8_t> b) { return std::string(b.begin(), b.end()); };

  struct Reader {
    const char* name;
    Bytes valid;
    std::function<void(std::span<const std::uint8_t>)> read;
  };
  std::vector<Reader> readers{
      {"tensor", encode_tensor(test::random_tensor({3, 4, 5}, 111)), [](auto b) { decode_tensor(b); }},
      {"checkpoint", encode_checkpoint(entries), [](auto b) { decode_checkpoint(b); }},
      {"mask pgm", encode_mask_pgm(test::random_mask({8, 8}, 112)), [](auto b) { decode_mask_pgm(b); }},
      {"ppm", encode_ppm(Tensor({4, 4, 3})), [](auto b) { decode_ppm(b); }},
      {"metrics csv", text_bytes(format_metrics_csv(summarize({{"a", 0.5, 0.25}, {"b", 1.0, 0.75}}))),
       [&](auto b) { parse_metrics_csv(as_text(b)); }},
      {"config", text_bytes("# experiment\nsetting = ms3\nlr = 0.001\nmodel.aspp_rates = 1,2\n"),
       [&](auto b) { ExperimentConfig::from_config(ConfigFile::parse(as_text(b))); }},
  };

  std::mt19937_64 gen(113);
  std::size_t cases = 0;
  for (const auto& r : readers) {
    for (int i = 0; i < 3000; ++i) {
      Bytes b = r.valid;
      switch (i % 4) {
        case 0:
          b.resize(gen() % b.size());
          break;
        case 1:
          for (int k = 0, n = 1 + static_cast<int>(gen() % 4); k < n; ++k) b[gen() % b.size()] = gen() & 0xFF;
          break;
        case 2:
          b.insert(b.begin() + static_cast<std::ptrdiff_t>(gen() % b.size()), gen() & 0xFF);
          break;
        default:
          b.resize(gen() % 4096);
          for (auto& x : b) x = gen() & 0xFF;
      }
      ++cases;
      try {
        r.read(b);
      } catch (const Error&) {
      } catch (const std::exception& e) {
        return fmt("%s reader raised an unstructured error: %s", r.name, e.what());
      }
    }
  }
  return {};
}

Outcome determinism_and_formats() {
  Workspace ws(10);
  std::string detail;
  bool ok = true;
  for (auto [name, check] : std::vector<std::pair<const char*, std::function<std::string()>>>{
           {"determinism", [&] { return determinism(ws); }},
           {"round trips", [&] { return round_trips(ws); }},
           {"fuzz", [] { return fuzz(); }}}) {
    const std::string err = check();
    ok = ok && err.empty();
    detail += std::string(name) + ": " + (err.empty() ? "ok" : err) + "; ";
  }
  return {ok, detail + "18000 malformed inputs"};
}

}  // namespace
}  // namespace avs

int main(int argc, char** argv) {
  using namespace avs;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"TPAVI loop oracle", tpavi_oracle},
      {"TPAVI identity", tpavi_identity},
      {"metric oracles", metric_oracles},
      {"disambiguation", disambiguation},
      {"audio-gradient gating", audio_gating},
      {"AVM non-degradation", avm_non_degradation},
      {"one-shot supervision", one_shot_supervision},
      {"pretraining", pretraining},
      {"determinism and formats", determinism_and_formats},
  };
  std::vector<std::size_t> selected;
  for (int i = 1; i < argc; ++i) {
    const int n = std::atoi(argv[i]);
    if (n < 1 || n > static_cast<int>(criteria.size())) {
      std::fprintf(stderr, "usage: %s [criterion 1-%zu ...]\n", argv[0], criteria.size());
      return 2;
    }
    selected.push_back(static_cast<std::size_t>(n));
  }
  if (selected.empty())
    for (std::size_t n = 1; n <= criteria.size(); ++n) selected.push_back(n);

  int failed = 0;
  for (auto n : selected) {
    const auto& [name, run] = criteria[n - 1];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %zu %s: %s  (%.1f s)  %s\n", n, name, o.pass ? "PASS" : "FAIL", seconds_since(t0),
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
