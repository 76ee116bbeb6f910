#pragma once

// Full-reference metrics and the per-manifest evaluation harness. PSNR and
// the report scalars are computed in double; SSIM shares the loss kernel so
// metric + loss is exactly 1.

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "psg/data.hpp"
#include "psg/error.hpp"
#include "psg/losses.hpp"
#include "psg/model.hpp"

namespace psg {
namespace metrics {

inline constexpr double kPsnrCap = 100.0;

inline double psnr(const Tensor& a, const Tensor& b, double cap_db = kPsnrCap) {
  check_same_shape(a, b, "psnr");
  double mse = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - b.data()[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse < 1e-10) return cap_db;
  return 10.0 * std::log10(1.0 / mse);
}

// same kernel and constants as the loss; metric == 1 - loss by construction
inline double ssim_metric(const Tensor& a, const Tensor& b) {
  NoGradGuard ng;
  const double l = static_cast<double>(loss::ssim_loss(Var::leaf(a), Var::leaf(b)).value().item());
  return 1.0 - l;
}

// layer-count-normalized feature distance (0 for identical inputs)
inline double perceptual_distance(const Tensor& a, const Tensor& b,
                                  const loss::PerceptualBackend& backend) {
  NoGradGuard ng;
  const double total =
      static_cast<double>(loss::perceptual_loss(Var::leaf(a), Var::leaf(b), backend).value().item());
  return total / static_cast<double>(backend.layer_ids().size());
}

struct MetricRow {
  std::string id;
  double psnr_db = 0.0;
  double ssim_x100 = 0.0;
  double perc_dist = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> per_image;
  std::vector<std::string> failed_ids;
  double mean_psnr_db = 0.0;
  double mean_ssim_x100 = 0.0;
  double mean_perc_dist = 0.0;

  void compute_aggregates() {
    mean_psnr_db = mean_ssim_x100 = mean_perc_dist = 0.0;
    if (per_image.empty()) return;
    for (const auto& r : per_image) {
      mean_psnr_db += r.psnr_db;
      mean_ssim_x100 += r.ssim_x100;
      mean_perc_dist += r.perc_dist;
    }
    const double n = static_cast<double>(per_image.size());
    mean_psnr_db /= n;
    mean_ssim_x100 /= n;
    mean_perc_dist /= n;
  }

  std::string to_csv() const {
    std::string out = "id,psnr_db,ssim_x100,perc_dist\n";
    char buf[160];
    for (const auto& r : per_image) {
      std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.8f\n", r.id.c_str(), r.psnr_db,
                    r.ssim_x100, r.perc_dist);
      out += buf;
    }
    return out;
  }

  nlohmann::json aggregate_json() const {
    return nlohmann::json{{"count", per_image.size()},
                          {"failures", failed_ids.size()},
                          {"mean_psnr_db", mean_psnr_db},
                          {"mean_ssim_x100", mean_ssim_x100},
                          {"mean_perc_dist", mean_perc_dist}};
  }
};

struct EvalOptions {
  int image_size = 256;
  uint64_t mask_seed = 0;  // inference mask policy: fixed seed, overridable
  loss::PerceptualBackend perceptual = loss::PerceptualBackend::toy();
  text::TextBackend text_backend = text::TextBackend::toy();
};

// Runs the full enhancement pipeline for every manifest entry and scores the
// result against the reference. Per-image failures are recorded and skipped;
// aggregates cover the successes.
inline MetricReport evaluate(const model::Network& net, const data::DatasetManifest& manifest,
                             const EvalOptions& opts) {
  NoGradGuard ng;
  MetricReport report;
  for (const auto& entry : manifest.entries) {
    try {
      data::Triplet t = data::load_triplet(manifest, entry.id, opts.image_size);
      Tensor temb = opts.text_backend.encode(t.text);
      auto mask = restore::make_mask(opts.image_size, opts.image_size,
                                     net.config().restorer.mask_ratio, opts.mask_seed);
      auto fwd = net.forward(t.raw, temb, mask);
      const Tensor& enh = fwd.enhanced.value();
      MetricRow row;
      row.id = entry.id;
      row.psnr_db = psnr(enh, t.reference);
      row.ssim_x100 = 100.0 * ssim_metric(enh, t.reference);
      row.perc_dist = perceptual_distance(enh, t.reference, opts.perceptual);
      report.per_image.push_back(std::move(row));
    } catch (const Error&) {
      report.failed_ids.push_back(entry.id);
    }
  }
  report.compute_aggregates();
  return report;
}

inline MetricReport evaluate_to_files(const model::Network& net,
                                      const data::DatasetManifest& manifest,
                                      const EvalOptions& opts, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  MetricReport report = evaluate(net, manifest, opts);
  {
    std::ofstream csv(fs::path(out_dir) / "per_image.csv", std::ios::binary);
    if (!csv) throw Error(ErrorCode::IOError, "cannot write per-image CSV");
    csv << report.to_csv();
  }
  {
    std::ofstream js(fs::path(out_dir) / "aggregate.json", std::ios::binary);
    if (!js) throw Error(ErrorCode::IOError, "cannot write aggregate JSON");
    js << report.aggregate_json().dump(2) << "\n";
  }
  return report;
}

}  // namespace metrics
}  // namespace psg
