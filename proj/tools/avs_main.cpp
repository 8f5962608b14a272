#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "avs/harness.hpp"

namespace {

using namespace avs;

int cmd_gen_data(const std::string& mode, std::size_t videos, std::uint64_t seed, const std::string& out,
                 bool all_masks, const SceneParams& params) {
  DatasetSpec spec;
  spec.mode = parse_scene_mode(mode);
  spec.n_videos = videos;
  spec.seed = seed;
  spec.params = params;
  spec.all_masks = all_masks;
  make_dataset(spec, out);
  const auto sizes = split_sizes(videos);
  std::printf("wrote %zu %s videos to %s (train %zu, valid %zu, test %zu)\n", videos, mode.c_str(), out.c_str(),
              sizes.train, sizes.valid, sizes.test);
  if (spec.mode == SceneMode::disambig) {
    std::printf("audio-blind ceiling (test split): %.6f\n", bayes_visual_ceiling(fs::path(out), "test"));
  }
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out) {
  const ExperimentConfig cfg = ExperimentConfig::load(config_path);
  const TrainResult r = train(cfg, [](const EpochRecord& e) {
    std::printf("epoch %3zu  bce %.5f  avm %.5f  valid mIoU %.4f  F %.4f  %.1fs\n", e.epoch, e.bce, e.avm,
                e.valid_miou, e.valid_fscore, e.seconds);
    std::fflush(stdout);
  });
  save_checkpoint(out, r.model);
  write_text(out + ".log.csv", format_train_log(r.log));
  std::printf("best epoch %zu, valid mIoU %.6f -> %s\n", r.best_epoch, r.best_valid_miou, out.c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& split, const std::string& csv) {
  const MetricReport report = evaluate(ckpt, data, split);
  write_metrics_csv(csv, report);
  std::printf("%s: %zu videos, mIoU %.6f, F %.6f\n", split.c_str(), report.per_video.size(), report.miou,
              report.fscore);
  return 0;
}

int cmd_ablate(const std::string& name, const std::string& config_path, const std::string& out) {
  const ExperimentConfig cfg = ExperimentConfig::load(config_path);
  const AblationTable table = run_ablation(name, cfg, fs::path(out), &std::cout);
  std::cout << format_ablation_csv(table);
  return 0;
}

int cmd_attn(const std::string& ckpt, const std::string& video, const std::string& out) {
  const AttentionMaps maps = export_attention(ckpt, video, out);
  std::printf("wrote %zu attention maps to %s\n", maps.images.size(), out.c_str());
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, bool inject) {
  const GradReport report = gradcheck_components(seed, inject ? Fault::matmul_backward : Fault::none);
  for (const auto& [name, err] : report.components) {
    std::printf("%-14s %.3e %s\n", name.c_str(), err, err <= kGradTolerance ? "ok" : "FAIL");
  }
  std::printf("max relative error %.3e (tolerance %.0e)\n", report.worst(), kGradTolerance);
  return report.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audio-visual segmentation toolkit"};
  app.require_subcommand(1);

  std::string mode, out, config, ckpt, data, split, csv, name, video;
  std::size_t videos = 0;
  std::uint64_t seed = 0;
  bool all_masks = false, inject = false;
  SceneParams params;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--mode", mode, "s4, ms3 or disambig")->required()->check(CLI::IsMember({"s4", "ms3", "disambig"}));
  gen->add_option("--videos", videos, "Number of videos (>= 10)")->required();
  gen->add_option("--seed", seed, "Dataset seed")->required();
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_flag("--all-masks", all_masks, "Keep every mask in the S4 training split");
  gen->add_option("--clips", params.clips, "Clips per video")->capture_default_str();
  gen->add_option("--size", params.height, "Frame height and width")->capture_default_str();
  gen->add_option("--n-mels", params.n_mels, "Audio feature width")->capture_default_str();
  gen->add_option("--noise", params.noise_level, "Audio noise level")->capture_default_str();

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", config, "Experiment config")->required();
  tr->add_option("--out", out, "Checkpoint to write")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--ckpt", ckpt)->required();
  ev->add_option("--data", data)->required();
  ev->add_option("--split", split)->required()->check(CLI::IsMember({"train", "valid", "test"}));
  ev->add_option("--csv", csv)->required();

  auto* ab = app.add_subcommand("ablate", "Run an ablation");
  ab->add_option("--name", name)->required()->check(CLI::IsMember({"tpavi", "fusion_stages", "loss", "pretrain"}));
  ab->add_option("--config", config)->required();
  ab->add_option("--out", out)->required();

  auto* at = app.add_subcommand("attn", "Export stage-4 attention maps");
  at->add_option("--ckpt", ckpt)->required();
  at->add_option("--video", video)->required();
  at->add_option("--out", out)->required();

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every component");
  gc->add_option("--seed", seed)->capture_default_str();
  gc->add_flag("--inject-fault", inject, "Corrupt the matmul backward rule");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      params.width = params.height;
      return cmd_gen_data(mode, videos, seed, out, all_masks, params);
    }
    if (*tr) return cmd_train(config, out);
    if (*ev) return cmd_eval(ckpt, data, split, csv);
    if (*ab) return cmd_ablate(name, config, out);
    if (*at) return cmd_attn(ckpt, video, out);
    if (*gc) return cmd_gradcheck(seed, inject);
  } catch (const IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
