#pragma once

// Scene storage and ingestion: PGM/PPM rasters, the line-oriented dot
// annotation format, dataset manifests, and a synthetic scene generator
// producing head-like blobs plus unannotated distractor clutter.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "crowdcount/groundtruth.hpp"
#include "crowdcount/rng.hpp"
#include "crowdcount/tensor.hpp"

namespace crowdcount {

struct IngestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Scene {
  Tensor image;  // [C,H,W], C in {1,3}, values in [0,1]
  DotAnnotation annotation;
  std::string id;

  int height() const { return image.extent(1); }
  int width() const { return image.extent(2); }
  int count() const { return static_cast<int>(annotation.points.size()); }
};

// ---- raster I/O (netpbm P5/P6, 8- or 16-bit, 16-bit big-endian) ----

namespace detail {

inline int next_pnm_token(std::istream& in, const std::string& path) {
  // skips whitespace and '#' comment lines
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int value = -1;
  if (!(in >> value) || value < 0)
    throw IngestError(path + ": malformed header token");
  return value;
}

}  // namespace detail

inline Tensor read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError(path + ": cannot open image");
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || (m1 != '5' && m1 != '6'))
    throw IngestError(path + ": not a binary PGM (P5) or PPM (P6) file");
  const int channels = m1 == '5' ? 1 : 3;
  const int w = detail::next_pnm_token(in, path);
  const int h = detail::next_pnm_token(in, path);
  const int maxval = detail::next_pnm_token(in, path);
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535)
    throw IngestError(path + ": invalid raster dimensions");
  in.get();  // single whitespace after maxval
  const int bytes_per_sample = maxval > 255 ? 2 : 1;
  const std::size_t samples = static_cast<std::size_t>(w) * h * channels;
  std::vector<unsigned char> raw(samples * bytes_per_sample);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw IngestError(path + ": truncated raster at byte offset " +
                      std::to_string(in.gcount()));
  Tensor img = Tensor::zeros({channels, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        const std::size_t s = (static_cast<std::size_t>(y) * w + x) * channels + c;
        int v;
        if (bytes_per_sample == 2)
          v = raw[2 * s] << 8 | raw[2 * s + 1];
        else
          v = raw[s];
        img.at(c, y, x) = static_cast<double>(v) / maxval;
      }
  return img;
}

inline void write_pnm(const std::string& path, const Tensor& image, int maxval) {
  if (image.rank() != 3 || (image.extent(0) != 1 && image.extent(0) != 3))
    throw std::invalid_argument("write_pnm: image must be [1,H,W] or [3,H,W]");
  if (maxval != 255 && maxval != 65535)
    throw std::invalid_argument("write_pnm: maxval must be 255 or 65535");
  const int channels = image.extent(0), h = image.extent(1), w = image.extent(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError(path + ": cannot open for writing");
  out << (channels == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n" << maxval << "\n";
  std::vector<unsigned char> raw;
  raw.reserve(static_cast<std::size_t>(w) * h * channels * (maxval > 255 ? 2 : 1));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        const double clamped = std::clamp(image.at(c, y, x), 0.0, 1.0);
        const int v = static_cast<int>(std::floor(clamped * maxval + 0.5));
        if (maxval > 255) {
          raw.push_back(static_cast<unsigned char>(v >> 8));
          raw.push_back(static_cast<unsigned char>(v & 0xff));
        } else {
          raw.push_back(static_cast<unsigned char>(v));
        }
      }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IngestError(path + ": short write");
}

// ---- annotation I/O ----
//
// Line-oriented text, UTF-8, LF endings:
//   count N
//   x y          (N lines, decimal reals, full-resolution pixels)

inline DotAnnotation read_annotation(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestError(path + ": cannot open annotation");
  std::string tag;
  long declared = -1;
  if (!(in >> tag >> declared) || tag != "count" || declared < 0)
    throw IngestError(path + ": line 1: expected 'count N'");
  DotAnnotation a;
  a.points.reserve(static_cast<std::size_t>(declared));
  for (long i = 0; i < declared; ++i) {
    Point p;
    if (!(in >> p.x >> p.y))
      throw IngestError(path + ": line " + std::to_string(i + 2) +
                        ": expected 'x y' but found " +
                        (in.eof() ? "end of file" : "malformed input"));
    a.points.push_back(p);
  }
  double extra;
  if (in >> extra)
    throw IngestError(path + ": more points than the declared count " +
                      std::to_string(declared));
  return a;
}

inline void write_annotation(const std::string& path, const DotAnnotation& a) {
  std::ofstream out(path, std::ios::binary);  // binary: LF endings everywhere
  if (!out) throw IngestError(path + ": cannot open for writing");
  out << "count " << a.points.size() << "\n";
  char buf[64];
  for (const Point& p : a.points) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g\n", p.x, p.y);
    out << buf;
  }
}

inline Scene load_scene(const std::string& image_path, const std::string& annotation_path) {
  Scene s;
  s.image = read_image(image_path);
  s.annotation = read_annotation(annotation_path);
  s.annotation.clip_to_bounds(s.width(), s.height());
  s.id = std::filesystem::path(image_path).stem().string();
  return s;
}

inline void save_scene(const Scene& s, const std::string& image_path,
                       const std::string& annotation_path) {
  write_pnm(image_path, s.image, 65535);
  write_annotation(annotation_path, s.annotation);
}

// ---- synthetic scenes ----

struct SynthConfig {
  std::uint64_t seed = 0;
  int height = 64, width = 64;
  int count_min = 5, count_max = 20;
  double head_radius_min = 3.0, head_radius_max = 4.0;
  enum class Background { flat, gradient, clutter } background = Background::clutter;
  // head-like blobs per 512 pixels, deliberately absent from
  // the annotation; they supply the false-positive pressure the confidence
  // gate exists to resist
  double distractor_density = 0.0;
};

namespace detail {

inline double smoothstep(double lo, double hi, double v) {
  const double t = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

inline void paint_disk(Tensor& img, double cx, double cy, double radius, double dark) {
  const int h = img.extent(1), w = img.extent(2);
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + radius + 1)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + radius + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      const double t = smoothstep(radius - 0.7, radius + 0.7, d);
      const double v = dark + (img.at(0, y, x) - dark) * t;
      img.at(0, y, x) = std::min(img.at(0, y, x), v);
    }
}

inline void paint_ring(Tensor& img, double cx, double cy, double radius, double dark) {
  const int h = img.extent(1), w = img.extent(2);
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + radius + 1)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + radius + 1)));
  const double mid = 0.72 * radius, half_width = 0.33 * radius;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      const double t = smoothstep(half_width - 0.5, half_width + 0.5, std::fabs(d - mid));
      const double v = dark + (img.at(0, y, x) - dark) * t;
      img.at(0, y, x) = std::min(img.at(0, y, x), v);
    }
}

}  // namespace detail

inline Scene generate_scene(const SynthConfig& config, Rng& rng) {
  if (config.height < 32 || config.width < 32)
    throw std::invalid_argument("generate_scene: extents must be >= 32");
  if (config.count_min < 0 || config.count_max < config.count_min)
    throw std::invalid_argument("generate_scene: invalid count range");
  const int h = config.height, w = config.width;
  Scene scene;
  scene.image = Tensor::zeros({1, h, w});

  // Backgrounds sit near mid-gray so the network's centered input makes
  // conv zero padding read like plausible background.
  switch (config.background) {
    case SynthConfig::Background::flat:
      std::fill(scene.image.data().begin(), scene.image.data().end(), 0.55);
      break;
    case SynthConfig::Background::gradient:
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          scene.image.at(0, y, x) = 0.45 + 0.22 * (x + y) / static_cast<double>(w + h - 2);
      break;
    case SynthConfig::Background::clutter: {
      std::fill(scene.image.data().begin(), scene.image.data().end(), 0.55);
      const int blotches = std::max(2, h * w / 700);
      for (int i = 0; i < blotches; ++i) {
        const double cx = rng.uniform(0.0, w - 1.0), cy = rng.uniform(0.0, h - 1.0);
        detail::paint_disk(scene.image, cx, cy, rng.uniform(4.0, 10.0),
                           rng.uniform(0.40, 0.48));
      }
      for (auto& v : scene.image.data()) v = std::clamp(v + rng.uniform(-0.03, 0.03), 0.0, 1.0);
      break;
    }
  }

  const int n = rng.uniform_int(config.count_min, config.count_max);
  const double mean_radius = 0.5 * (config.head_radius_min + config.head_radius_max);
  std::vector<Point> centers;
  int relaxed = 0;
  auto place = [&](double margin, double min_sep) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      Point p{rng.uniform(margin, w - 1.0 - margin), rng.uniform(margin, h - 1.0 - margin)};
      bool ok = true;
      for (const Point& q : centers)
        if (std::hypot(p.x - q.x, p.y - q.y) < min_sep) {
          ok = false;
          break;
        }
      if (ok) return p;
    }
    ++relaxed;
    return Point{rng.uniform(margin, w - 1.0 - margin), rng.uniform(margin, h - 1.0 - margin)};
  };

  for (int i = 0; i < n; ++i) {
    const Point p = place(mean_radius, 2.0 * mean_radius);
    centers.push_back(p);
    const double r = rng.uniform(config.head_radius_min, config.head_radius_max);
    detail::paint_disk(scene.image, p.x, p.y, r, 0.12);
    scene.annotation.points.push_back(p);
  }
  if (relaxed > 0)
    std::cerr << "generate_scene: relaxed head separation for " << relaxed << " of " << n
              << " heads\n";

  // Distractors are solid disks whose tone continuum straddles the head
  // tone: some are genuinely indistinguishable from heads pixel-for-pixel,
  // so a plain density regressor keeps a false-positive floor.
  const int distractors =
      static_cast<int>(std::floor(config.distractor_density * h * w / 512.0 + 0.5));
  for (int i = 0; i < distractors; ++i) {
    const Point p = place(mean_radius, 2.0 * mean_radius);
    centers.push_back(p);  // keep distractors off heads too
    const double r = rng.uniform(config.head_radius_min, config.head_radius_max);
    detail::paint_disk(scene.image, p.x, p.y, r, rng.uniform(0.10, 0.34));
  }
  return scene;
}

// ---- datasets ----

struct ManifestRow {
  std::string id;
  std::uint64_t seed = 0;
  int count = 0;
};

struct Dataset {
  std::vector<Scene> scenes;
  std::vector<ManifestRow> manifest;
};

struct DatasetStats {
  int num = 0;
  int range_lo = 0, range_hi = 0;
  double average = 0.0;
  long total = 0;
};

inline DatasetStats dataset_stats(const std::vector<Scene>& scenes) {
  DatasetStats s;
  s.num = static_cast<int>(scenes.size());
  if (scenes.empty()) return s;
  s.range_lo = s.range_hi = scenes.front().count();
  for (const Scene& sc : scenes) {
    s.range_lo = std::min(s.range_lo, sc.count());
    s.range_hi = std::max(s.range_hi, sc.count());
    s.total += sc.count();
  }
  s.average = static_cast<double>(s.total) / s.num;
  return s;
}

inline Dataset make_dataset(const SynthConfig& config, int n_scenes) {
  if (n_scenes < 1) throw std::invalid_argument("make_dataset: need at least one scene");
  Dataset ds;
  for (int i = 0; i < n_scenes; ++i) {
    const std::uint64_t scene_seed = Rng::mix(config.seed, static_cast<std::uint64_t>(i));
    Rng rng(scene_seed);
    Scene s = generate_scene(config, rng);
    char name[32];
    std::snprintf(name, sizeof name, "scene_%04d", i);
    s.id = name;
    ds.manifest.push_back({s.id, scene_seed, s.count()});
    ds.scenes.push_back(std::move(s));
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path root(dir);
  std::ofstream manifest(root / "manifest.csv", std::ios::binary);
  if (!manifest) throw IngestError(dir + ": cannot write manifest.csv");
  manifest << "id,seed,count\n";
  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    const Scene& s = ds.scenes[i];
    save_scene(s, (root / (s.id + ".pgm")).string(), (root / (s.id + ".txt")).string());
    manifest << ds.manifest[i].id << "," << ds.manifest[i].seed << ","
             << ds.manifest[i].count << "\n";
  }
}

inline Dataset load_dataset(const std::string& dir) {
  const std::filesystem::path root(dir);
  std::ifstream manifest(root / "manifest.csv");
  if (!manifest) throw IngestError(dir + ": cannot open manifest.csv");
  std::string line;
  if (!std::getline(manifest, line) || line != "id,seed,count")
    throw IngestError(dir + "/manifest.csv: line 1: expected header 'id,seed,count'");
  Dataset ds;
  int lineno = 1;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    ManifestRow m;
    std::string seed_str, count_str;
    if (!std::getline(row, m.id, ',') || !std::getline(row, seed_str, ',') ||
        !std::getline(row, count_str))
      throw IngestError(dir + "/manifest.csv: line " + std::to_string(lineno) +
                        ": expected 'id,seed,count'");
    m.seed = std::stoull(seed_str);
    m.count = std::stoi(count_str);
    Scene s = load_scene((root / (m.id + ".pgm")).string(), (root / (m.id + ".txt")).string());
    if (s.count() != m.count)
      throw IngestError(dir + "/manifest.csv: line " + std::to_string(lineno) + ": scene " +
                        m.id + " has " + std::to_string(s.count()) +
                        " points but manifest declares " + std::to_string(m.count));
    ds.manifest.push_back(std::move(m));
    ds.scenes.push_back(std::move(s));
  }
  return ds;
}

}  // namespace crowdcount
