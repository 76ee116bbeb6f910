// Command-line front end: train / eval / enhance / export-embeddings.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include "psg/metrics.hpp"
#include "psg/model.hpp"
#include "psg/pipeline.hpp"

namespace {

psg::text::TextBackend pick_text_backend(const std::string& embeddings, int dim) {
  if (embeddings.empty()) return psg::text::TextBackend::toy(dim);
  return psg::text::TextBackend::from_file(embeddings);
}

// min-max normalized grayscale heatmap of one light-map channel average
void write_heatmap(const std::string& path, const psg::Tensor& map) {
  const int h = map.dim(1), w = map.dim(2);
  psg::Tensor gray({3, h, w});
  float lo = map.data()[0], hi = map.data()[0];
  for (int64_t i = 0; i < map.size(); ++i) {
    lo = std::min(lo, map.data()[i]);
    hi = std::max(hi, map.data()[i]);
  }
  const float span = hi - lo > 1e-12f ? hi - lo : 1.0f;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float v = 0.0f;
      for (int c = 0; c < 3; ++c) v += map.data()[(c * h + y) * w + x];
      v = (v / 3.0f - lo) / span;
      for (int c = 0; c < 3; ++c) gray.data()[(c * h + y) * w + x] = std::clamp(v, 0.0f, 1.0f);
    }
  psg::img::write_png(path, gray);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-guided underwater image enhancement"};
  app.require_subcommand(1);

  // train
  std::string train_config, train_manifest, val_manifest, train_out, train_ablation;
  std::optional<uint64_t> cli_seed;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", train_config, "key = value config file")->required();
  train_cmd->add_option("--train", train_manifest, "training manifest (JSON-Lines)")->required();
  train_cmd->add_option("--val", val_manifest, "validation manifest (JSON-Lines)")->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_option("--ablation", train_ablation, "comma list: no_ie,no_ir,no_ta,no_cfm,no_text,mha_swap");
  train_cmd->add_option("--seed", cli_seed, "overrides PSG_SEED and the config seed");

  // eval
  std::string eval_ckpt, eval_manifest, eval_out, eval_embeddings;
  uint64_t eval_mask_seed = 0;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint against references");
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--manifest", eval_manifest)->required();
  eval_cmd->add_option("--out", eval_out, "output directory for per_image.csv / aggregate.json")->required();
  eval_cmd->add_option("--mask-seed", eval_mask_seed, "inference mask seed (default 0)");
  eval_cmd->add_option("--embeddings", eval_embeddings, "TEMB file (default: toy encoder)");

  // enhance
  std::string enh_ckpt, enh_image, enh_text, enh_out, enh_embeddings, enh_dump;
  uint64_t enh_mask_seed = 0;
  auto* enh_cmd = app.add_subcommand("enhance", "Enhance a single image");
  enh_cmd->add_option("--checkpoint", enh_ckpt)->required();
  enh_cmd->add_option("--image", enh_image)->required();
  enh_cmd->add_option("--text", enh_text, "scene description (default prompt when omitted)");
  enh_cmd->add_option("--out", enh_out, "output PNG path")->required();
  enh_cmd->add_option("--mask-seed", enh_mask_seed, "inference mask seed (default 0)");
  enh_cmd->add_option("--embeddings", enh_embeddings, "TEMB file (default: toy encoder)");
  enh_cmd->add_option("--dump-illum", enh_dump, "directory for per-scale light-map heatmaps");

  // export-embeddings
  std::string exp_texts, exp_backend = "toy", exp_out;
  int exp_dim = psg::text::kDefaultEmbedDim;
  auto* exp_cmd = app.add_subcommand("export-embeddings", "Write a TEMB embedding file");
  exp_cmd->add_option("--texts", exp_texts, "one UTF-8 text per line")->required();
  exp_cmd->add_option("--backend", exp_backend, "toy | export");
  exp_cmd->add_option("--out", exp_out)->required();
  exp_cmd->add_option("--dim", exp_dim, "embedding width");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      auto cfg = psg::pipeline::parse_train_config(train_config);
      if (!train_ablation.empty())
        cfg.ablation = psg::model::AblationFlags::parse(train_ablation);
      psg::pipeline::apply_seed_overrides(cfg, cli_seed);
      auto train_mf = psg::data::load_manifest(train_manifest);
      auto val_mf = psg::data::load_manifest(val_manifest);
      auto result = psg::pipeline::train(cfg, train_mf, val_mf, train_out);
      std::printf("steps: %lld\n", static_cast<long long>(result.steps));
      std::printf("best val PSNR: %.4f dB\n", result.best_val_psnr);
      std::printf("last checkpoint: %s\n", result.last_checkpoint.c_str());
      std::printf("best checkpoint: %s\n", result.best_checkpoint.c_str());
      std::printf("loss log: %s\n", result.log_path.c_str());
    } else if (*eval_cmd) {
      auto net = psg::model::load_checkpoint(eval_ckpt);
      auto manifest = psg::data::load_manifest(eval_manifest);
      psg::metrics::EvalOptions opts;
      opts.image_size = net->config().image_size;
      opts.mask_seed = eval_mask_seed;
      opts.text_backend = pick_text_backend(eval_embeddings, net->config().text_embed_dim);
      auto report = psg::metrics::evaluate_to_files(*net, manifest, opts, eval_out);
      std::printf("images: %zu  failures: %zu\n", report.per_image.size(),
                  report.failed_ids.size());
      std::printf("mean PSNR: %.4f dB  mean SSIM(x100): %.4f  mean perc: %.6f\n",
                  report.mean_psnr_db, report.mean_ssim_x100, report.mean_perc_dist);
    } else if (*enh_cmd) {
      auto net = psg::model::load_checkpoint(enh_ckpt);
      auto backend = pick_text_backend(enh_embeddings, net->config().text_embed_dim);
      std::vector<psg::Tensor> maps;
      psg::pipeline::enhance(*net, enh_image, enh_text, enh_out, enh_mask_seed, backend,
                             enh_dump.empty() ? nullptr : &maps);
      if (!enh_dump.empty()) {
        std::filesystem::create_directories(enh_dump);
        const auto& scales = net->config().illumination.scales;
        for (size_t i = 0; i < maps.size(); ++i) {
          const std::string name = "illum_scale" +
                                   (i < scales.size() ? std::to_string(scales[i])
                                                      : std::to_string(i)) +
                                   ".png";
          write_heatmap((std::filesystem::path(enh_dump) / name).string(), maps[i]);
        }
      }
      std::printf("wrote %s\n", enh_out.c_str());
    } else if (*exp_cmd) {
      const int count = psg::pipeline::export_embeddings(exp_texts, exp_backend, exp_out, exp_dim);
      std::printf("wrote %d embeddings to %s\n", count, exp_out.c_str());
    }
  } catch (const psg::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
