#pragma once

// Count metrics over a scene set (MAE and root-mean-square error between
// ground-truth and integrated estimated counts), plus prediction export:
// density/confidence rasters, raw-value sidecars, and the confidence
// overlay.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "crowdcount/data.hpp"
#include "crowdcount/model.hpp"

namespace crowdcount {

struct EvalRow {
  std::string id;
  double gt_count = 0.0;
  double est_count = 0.0;
  double abs_error = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;  // ordered by scene id
  double mae = 0.0;
  double mse = 0.0;  // root of the mean squared count error
  int n = 0;
};

inline EvalReport compute_metrics(std::vector<EvalRow> rows) {
  if (rows.empty()) throw std::invalid_argument("evaluate: no scenes");
  std::sort(rows.begin(), rows.end(),
            [](const EvalRow& a, const EvalRow& b) { return a.id < b.id; });
  EvalReport report;
  double abs_sum = 0.0, sq_sum = 0.0;
  for (EvalRow& r : rows) {
    r.abs_error = std::fabs(r.gt_count - r.est_count);
    abs_sum += r.abs_error;
    sq_sum += r.abs_error * r.abs_error;
  }
  report.n = static_cast<int>(rows.size());
  report.mae = abs_sum / report.n;
  report.mse = std::sqrt(sq_sum / report.n);
  report.rows = std::move(rows);
  return report;
}

inline EvalReport evaluate(const std::vector<Scene>& scenes, const ModelParams& params,
                           const ArchConfig& arch) {
  std::vector<EvalRow> rows;
  rows.reserve(scenes.size());
  for (const Scene& s : scenes) {
    ForwardOutput out = forward(s.image, params, arch);  // no tape: inference
    rows.push_back({s.id, static_cast<double>(s.count()),
                    integrate_count(out.final_density), 0.0});
  }
  return compute_metrics(std::move(rows));
}

inline void write_eval_report(const std::string& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open report for writing");
  out << "id,gt_count,est_count,abs_error\n";
  char buf[256];
  for (const EvalRow& r : report.rows) {
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g\n", r.id.c_str(), r.gt_count,
                  r.est_count, r.abs_error);
    out << buf;
  }
}

namespace detail {

inline void write_raw_csv(const std::string& path, const Tensor& map) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  const int h = map.extent(1), w = map.extent(2);
  char buf[32];
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      std::snprintf(buf, sizeof buf, "%.17g", map.at(0, y, x));
      out << (x ? "," : "") << buf;
    }
    out << "\n";
  }
}

// blue-to-red heat ramp used for the confidence overlay
inline void colorize_confidence(double c, double rgb[3]) {
  rgb[0] = c;
  rgb[1] = 0.0;
  rgb[2] = 1.0 - c;
}

}  // namespace detail

struct PredictResult {
  double count = 0.0;
  bool confidence_written = false;
};

// Writes into out_dir:
//   density.pgm      16-bit raster, scaled so the recorded max maps to 65535
//   density_max.txt  the scale factor, "max=<value>"
//   density.csv      raw values, one raster row per line
//   confidence.pgm   16-bit, [0,1] mapped linearly onto [0,65535]
//   overlay.ppm      0.3*image + 0.7*colorized confidence at input size
inline PredictResult predict(const std::string& image_path, const std::string& checkpoint_path,
                             const std::string& out_dir) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const Tensor image = read_image(image_path);
  const ForwardOutput out = forward(image, ckpt.params, ckpt.arch);

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path root(out_dir);

  double max_value = 0.0;
  for (double v : out.final_density.data()) max_value = std::max(max_value, v);
  Tensor scaled = Tensor::zeros(out.final_density.shape());
  if (max_value > 0.0)
    for (std::size_t i = 0; i < scaled.numel(); ++i)
      scaled.data()[i] = out.final_density.data()[i] / max_value;
  write_pnm((root / "density.pgm").string(), scaled, 65535);
  {
    std::ofstream meta(root / "density_max.txt", std::ios::binary);
    char buf[64];
    std::snprintf(buf, sizeof buf, "max=%.17g\n", max_value);
    meta << buf;
  }
  detail::write_raw_csv((root / "density.csv").string(), out.final_density);

  PredictResult result;
  result.count = integrate_count(out.final_density);
  if (!out.confidence.defined()) {
    std::cerr << "predict: checkpoint has no confidence head; skipping confidence outputs\n";
    return result;
  }

  write_pnm((root / "confidence.pgm").string(), out.confidence, 65535);

  // nearest-neighbor upscale of the confidence map onto the input raster
  const int h = image.extent(1), w = image.extent(2);
  const int mh = out.confidence.extent(1), mw = out.confidence.extent(2);
  Tensor overlay = Tensor::zeros({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double c =
          out.confidence.at(0, std::min(y * mh / h, mh - 1), std::min(x * mw / w, mw - 1));
      double rgb[3];
      detail::colorize_confidence(c, rgb);
      for (int ch = 0; ch < 3; ++ch) {
        const double base = image.extent(0) == 3 ? image.at(ch, y, x) : image.at(0, y, x);
        overlay.at(ch, y, x) = 0.3 * base + 0.7 * rgb[ch];
      }
    }
  write_pnm((root / "overlay.ppm").string(), overlay, 255);
  result.confidence_written = true;
  return result;
}

}  // namespace crowdcount
