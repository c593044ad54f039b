// Synthetic detection data and the on-disk dataset layout:
//
//   <dir>/annotations.json   {"images":[{"file","id","boxes":[{"class","xyxy":[x1,y1,x2,y2]}]}]}
//   <dir>/<file>             P6 PPM images
//
// Synthetic classes are shape/colour pairs: class k draws shape k % 2
// (0 rectangle, 1 ellipse) in colour k / 2 of red, green, blue, yellow.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mnx/box.hpp"
#include "mnx/image.hpp"
#include "mnx/rng.hpp"

namespace mnx::inline MNX_ABI {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Sample {
  std::string file;
  std::int64_t id = 0;
  Tensor image;  // [3, H, W]
  std::vector<GroundTruthBox> boxes;
};

struct Dataset {
  std::vector<Sample> samples;
  int num_classes = 0;

  std::vector<GroundTruthBox> all_boxes() const {
    std::vector<GroundTruthBox> out;
    for (const auto& s : samples) out.insert(out.end(), s.boxes.begin(), s.boxes.end());
    return out;
  }
};

inline constexpr int kMaxSynthClasses = 8;

namespace detail {

inline void fill_shape(Tensor& img, const Box& b, int shape, const std::array<Real, 3>& color) {
  const std::int64_t H = img.dim(1), W = img.dim(2);
  const double cx = 0.5 * (b.x1 + b.x2), cy = 0.5 * (b.y1 + b.y2);
  const double rx = 0.5 * b.width(), ry = 0.5 * b.height();
  for (auto y = static_cast<std::int64_t>(b.y1); y < static_cast<std::int64_t>(b.y2) && y < H; ++y) {
    for (auto x = static_cast<std::int64_t>(b.x1); x < static_cast<std::int64_t>(b.x2) && x < W; ++x) {
      if (shape == 1) {
        const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
        if (dx * dx + dy * dy > 1.0) continue;
      }
      for (std::int64_t c = 0; c < 3; ++c) img[(c * H + y) * W + x] = color[static_cast<std::size_t>(c)];
    }
  }
}

inline std::array<Real, 3> synth_color(int k) {
  static constexpr std::array<std::array<Real, 3>, 4> kColors = {
      {{0.9f, 0.1f, 0.1f}, {0.1f, 0.8f, 0.1f}, {0.1f, 0.2f, 0.9f}, {0.95f, 0.85f, 0.1f}}};
  return kColors[static_cast<std::size_t>(k / 2)];
}

}  // namespace detail

// Square `size` x `size` images on a uniform grey background with 1-4
// non-overlapping objects whose sides span [0.075, 0.3] of the image (12 to
// 48 px at 160). Classes are dealt from shuffled rounds so the histogram is
// balanced to within one round.
inline Dataset synth_dataset(int n_images, int n_classes, int size, std::uint64_t seed) {
  if (n_classes < 1 || n_classes > kMaxSynthClasses) {
    throw DatasetError("synth_dataset: n_classes must be in [1, " + std::to_string(kMaxSynthClasses) + "]");
  }
  if (n_images < 1) throw DatasetError("synth_dataset: n_images must be >= 1");
  if (size < 32) throw DatasetError("synth_dataset: size must be >= 32");
  Rng rng(seed);
  Dataset ds;
  ds.num_classes = n_classes;
  std::vector<int> deck;
  auto next_class = [&] {
    if (deck.empty()) {
      for (int k = n_classes; k-- > 0;) deck.push_back(k);
      rng.shuffle(deck);
    }
    const int k = deck.back();
    deck.pop_back();
    return k;
  };
  const double lo = std::max(8.0, 0.075 * size), hi = std::max(lo, 0.3 * size);
  for (int i = 0; i < n_images; ++i) {
    Sample s;
    s.id = i;
    char name[32];
    std::snprintf(name, sizeof name, "img_%05d.ppm", i);
    s.file = name;
    s.image = Tensor::full({3, size, size}, static_cast<Real>(rng.uniform(0.4, 0.6)));
    const int count = rng.uniform_int(1, 4);
    for (int o = 0; o < count; ++o) {
      const int cls = next_class();
      for (int attempt = 0; attempt < 100; ++attempt) {
        const double w = std::round(rng.uniform(lo, hi)), h = std::round(rng.uniform(lo, hi));
        const double x1 = std::floor(rng.uniform(0.0, size - w)), y1 = std::floor(rng.uniform(0.0, size - h));
        const Box b{static_cast<float>(x1), static_cast<float>(y1), static_cast<float>(x1 + w), static_cast<float>(y1 + h)};
        const bool clear = std::none_of(s.boxes.begin(), s.boxes.end(), [&](const GroundTruthBox& g) { return iou(g.box, b) > 0.0; });
        if (!clear) continue;
        detail::fill_shape(s.image, b, cls % 2, detail::synth_color(cls));
        s.boxes.push_back({s.id, cls, b});
        break;
      }
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline nlohmann::json annotations_to_json(const Dataset& ds) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& s : ds.samples) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& g : s.boxes) {
      boxes.push_back({{"class", g.class_id}, {"xyxy", {g.box.x1, g.box.y1, g.box.x2, g.box.y2}}});
    }
    images.push_back({{"file", s.file}, {"id", s.id}, {"boxes", boxes}});
  }
  return {{"images", images}};
}

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (const auto& s : ds.samples) save_image(s.image, (fs::path(dir) / s.file).string());
  std::ofstream out(fs::path(dir) / "annotations.json");
  if (!out) throw DatasetError("cannot write annotations in '" + dir + "'");
  out << annotations_to_json(ds).dump() << "\n";
}

// Reads the sidecar and every image it names. num_classes is one past the
// largest class id seen (at least 1).
inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path ann = fs::path(dir) / "annotations.json";
  std::ifstream in(ann);
  if (!in) throw DatasetError("no annotations.json in '" + dir + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(ann.string() + ": " + e.what());
  }
  Dataset ds;
  ds.num_classes = 1;
  try {
    for (const auto& im : j.at("images")) {
      Sample s;
      s.file = im.at("file").get<std::string>();
      s.id = im.at("id").get<std::int64_t>();
      s.image = load_image((fs::path(dir) / s.file).string());
      for (const auto& b : im.at("boxes")) {
        const auto xy = b.at("xyxy").get<std::array<float, 4>>();
        GroundTruthBox g{s.id, b.at("class").get<int>(), {xy[0], xy[1], xy[2], xy[3]}};
        if (g.class_id < 0) throw DatasetError(ann.string() + ": negative class id in '" + s.file + "'");
        if (!g.box.valid()) throw DatasetError(ann.string() + ": box with non-positive area in '" + s.file + "'");
        ds.num_classes = std::max(ds.num_classes, g.class_id + 1);
        s.boxes.push_back(g);
      }
      ds.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(ann.string() + ": " + e.what());
  }
  if (ds.samples.empty()) throw DatasetError(ann.string() + ": dataset has no images");
  return ds;
}

// Letterboxes every image to `size` and maps its boxes accordingly.
inline Dataset letterbox_dataset(const Dataset& ds, std::int64_t size) {
  Dataset out;
  out.num_classes = ds.num_classes;
  for (const auto& s : ds.samples) {
    if (s.image.dim(1) == size && s.image.dim(2) == size) {
      out.samples.push_back(s);
      continue;
    }
    Letterbox lb = letterbox(s.image, size);
    Sample t{s.file, s.id, lb.image, {}};
    for (auto g : s.boxes) {
      g.box = lb.to_network(g.box);
      t.boxes.push_back(g);
    }
    out.samples.push_back(std::move(t));
  }
  return out;
}

}  // namespace mnx
