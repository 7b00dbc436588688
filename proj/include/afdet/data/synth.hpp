#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "afdet/augment.hpp"
#include "afdet/common.hpp"
#include "afdet/data/coco.hpp"
#include "afdet/data/image_io.hpp"
#include "afdet/geometry.hpp"
#include "afdet/target_codec.hpp"

namespace afdet::data {

// Desk-scale stand-in for a detection dataset: low-amplitude noise images
// with 1-4 solid rectangles whose fill color encodes the class.

inline constexpr int kSynthMaxClasses = 8;

inline std::array<float, 3> synth_palette(int class_id) {
  static constexpr std::array<std::array<float, 3>, kSynthMaxClasses> kPalette{{
      {0.90f, 0.15f, 0.15f},  // red
      {0.15f, 0.80f, 0.20f},  // green
      {0.20f, 0.25f, 0.90f},  // blue
      {0.90f, 0.85f, 0.15f},  // yellow
      {0.85f, 0.20f, 0.85f},  // magenta
      {0.15f, 0.80f, 0.85f},  // cyan
      {0.95f, 0.55f, 0.15f},  // orange
      {0.55f, 0.25f, 0.80f},  // purple
  }};
  require(class_id >= 0 && class_id < kSynthMaxClasses,
          "synth_palette: class id out of range");
  return kPalette[static_cast<std::size_t>(class_id)];
}

// One seeded image. Rectangles are placed so their centers stay at least two
// feature cells apart and heavy mutual overlap is rejected, which keeps the
// targets unambiguous for the encoder.
inline TrainSample synth_image(std::int64_t size, int classes, std::uint64_t seed,
                               std::int64_t image_index) {
  require(size >= 16, "synth_image: image size must be >= 16");
  require(classes >= 1 && classes <= kSynthMaxClasses,
          "synth_image: classes must lie in [1,8]");
  Rng rng = Rng::stream(seed, "synth", image_index, 0);

  Tensor img({3, size, size});
  for (std::int64_t i = 0; i < img.numel(); ++i)
    img[i] = 0.40f + 0.08f * static_cast<float>(rng.uniform());

  const int want = static_cast<int>(rng.uniform_int(1, 4));
  const double min_center_gap = 2.0 * kStride;
  std::vector<BBox> boxes;
  std::vector<int> class_ids;
  for (int b = 0; b < want; ++b) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const std::int64_t bw = rng.uniform_int(size / 5, size / 2);
      const std::int64_t bh = rng.uniform_int(size / 5, size / 2);
      const std::int64_t x0 = rng.uniform_int(0, size - bw);
      const std::int64_t y0 = rng.uniform_int(0, size - bh);
      const BBox cand{static_cast<double>(x0), static_cast<double>(y0),
                      static_cast<double>(x0 + bw), static_cast<double>(y0 + bh)};
      bool ok = true;
      for (const auto& prev : boxes) {
        const double dx = cand.center_x() - prev.center_x();
        const double dy = cand.center_y() - prev.center_y();
        // Disjoint rectangles keep every box's center pixel visible.
        if (dx * dx + dy * dy < min_center_gap * min_center_gap ||
            intersection_area(cand, prev) > 0.0) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      boxes.push_back(cand);
      class_ids.push_back(static_cast<int>(rng.uniform_int(0, classes - 1)));
      break;
    }
  }

  for (std::size_t b = 0; b < boxes.size(); ++b) {
    const auto color = synth_palette(class_ids[b]);
    const auto x0 = static_cast<std::int64_t>(boxes[b].x_min);
    const auto y0 = static_cast<std::int64_t>(boxes[b].y_min);
    const auto x1 = static_cast<std::int64_t>(boxes[b].x_max);
    const auto y1 = static_cast<std::int64_t>(boxes[b].y_max);
    for (std::int64_t y = y0; y < y1; ++y)
      for (std::int64_t x = x0; x < x1; ++x)
        for (std::int64_t c = 0; c < 3; ++c) img(c, y, x) = color[c];
  }
  return make_sample(std::move(img), std::move(boxes), std::move(class_ids));
}

inline std::vector<TrainSample> synth_dataset(std::int64_t n_images,
                                              std::int64_t size, int classes,
                                              std::uint64_t seed) {
  require(n_images >= 1, "synth_dataset: need at least one image");
  std::vector<TrainSample> out;
  out.reserve(static_cast<std::size_t>(n_images));
  for (std::int64_t i = 0; i < n_images; ++i)
    out.push_back(synth_image(size, classes, seed, i));
  return out;
}

// Materializes a synthetic dataset on disk as PNGs plus a COCO-format
// annotation file, for exercising the file-based CLI paths.
inline DatasetIndex write_synth_dataset(const std::vector<TrainSample>& samples,
                                        int classes, const std::string& dir,
                                        const std::string& annotation_path) {
  DatasetIndex index;
  for (int c = 0; c < classes; ++c)
    index.categories.push_back({c + 1, "class" + std::to_string(c)});
  for (std::size_t i = 0; i < index.categories.size(); ++i)
    index.category_map.emplace(index.categories[i].id, static_cast<int>(i));

  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    ImageRecord rec;
    rec.id = static_cast<std::int64_t>(i) + 1;
    rec.file_name = "synth_" + std::to_string(i) + ".png";
    rec.path = detail::join_path(dir, rec.file_name);
    rec.width = s.image.dim(2);
    rec.height = s.image.dim(1);
    for (std::size_t b = 0; b < s.boxes.size(); ++b)
      rec.boxes.push_back({s.boxes[b], s.classes[b], false});
    write_image(s.image, rec.path);
    index.records.push_back(std::move(rec));
  }
  index.validate();
  save_coco_subset(index, annotation_path);
  return index;
}

}  // namespace afdet::data
