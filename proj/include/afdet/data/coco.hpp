#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "afdet/common.hpp"
#include "afdet/data/image_io.hpp"
#include "afdet/geometry.hpp"

namespace afdet::data {

struct CocoCategory {
  std::int64_t id = 0;
  std::string name;

  bool operator==(const CocoCategory&) const = default;
};

// One annotation with its box already in corner form and the category mapped
// to a contiguous class index. Crowd regions are kept (the evaluator uses
// them as ignore regions) but excluded from training targets.
struct ImageAnnotation {
  BBox box;
  int class_id = 0;
  bool crowd = false;

  bool operator==(const ImageAnnotation&) const = default;
};

struct ImageRecord {
  std::int64_t id = 0;
  std::string path;  // image_dir / file_name
  std::string file_name;
  std::int64_t width = 0, height = 0;
  std::vector<ImageAnnotation> boxes;

  bool operator==(const ImageRecord&) const = default;
};

struct DatasetIndex {
  std::vector<ImageRecord> records;          // sorted by image id
  std::vector<CocoCategory> categories;      // sorted by category id
  std::map<std::int64_t, int> category_map;  // dataset id -> contiguous index

  int num_classes() const { return static_cast<int>(categories.size()); }

  bool operator==(const DatasetIndex&) const = default;

  void validate() const {
    const int c = num_classes();
    std::int64_t prev_id = std::numeric_limits<std::int64_t>::min();
    for (const auto& rec : records) {
      require(rec.id > prev_id, "DatasetIndex: duplicate or unsorted image id " +
                                    std::to_string(rec.id));
      prev_id = rec.id;
      for (const auto& ann : rec.boxes) {
        require(ann.class_id >= 0 && ann.class_id < c,
                "DatasetIndex: class index out of range in image " +
                    std::to_string(rec.id));
        require(ann.box.x_min >= 0 && ann.box.y_min >= 0 &&
                    ann.box.x_max <= static_cast<double>(rec.width) &&
                    ann.box.y_max <= static_cast<double>(rec.height) &&
                    ann.box.x_min < ann.box.x_max && ann.box.y_min < ann.box.y_max,
                "DatasetIndex: box outside image " + std::to_string(rec.id));
      }
    }
  }
};

namespace detail {

inline nlohmann::json parse_json_file(const std::string& path,
                                      const std::string& what) {
  std::ifstream is(path);
  if (!is.good()) throw RuntimeFailure(what + ": cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw RuntimeFailure(what + ": malformed JSON in " + path + ": " + e.what());
  }
}

inline std::string join_path(const std::string& dir, const std::string& name) {
  if (dir.empty()) return name;
  if (dir.back() == '/') return dir + name;
  return dir + "/" + name;
}

}  // namespace detail

// Loads the COCO-format subset this project understands: images, annotations
// with bbox [x,y,w,h], and categories. Boxes come back in corner form;
// records are ordered by image id and annotations by annotation id.
inline DatasetIndex load_coco_subset(const std::string& annotation_path,
                                     const std::string& image_dir = "") {
  const auto j = detail::parse_json_file(annotation_path, "load_coco_subset");
  require(j.contains("images") && j.contains("annotations") &&
              j.contains("categories"),
          "load_coco_subset: missing images/annotations/categories in " +
              annotation_path);

  DatasetIndex index;
  for (const auto& jc : j.at("categories"))
    index.categories.push_back(
        {jc.at("id").get<std::int64_t>(), jc.value("name", std::string{})});
  std::sort(index.categories.begin(), index.categories.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t i = 0; i < index.categories.size(); ++i) {
    const auto [it, fresh] =
        index.category_map.emplace(index.categories[i].id, static_cast<int>(i));
    require(fresh, "load_coco_subset: duplicate category id " +
                       std::to_string(index.categories[i].id));
  }

  std::map<std::int64_t, std::size_t> by_image;
  for (const auto& ji : j.at("images")) {
    ImageRecord rec;
    rec.id = ji.at("id").get<std::int64_t>();
    rec.file_name = ji.value("file_name", std::string{});
    rec.path = detail::join_path(image_dir, rec.file_name);
    rec.width = ji.at("width").get<std::int64_t>();
    rec.height = ji.at("height").get<std::int64_t>();
    require(by_image.find(rec.id) == by_image.end(),
            "load_coco_subset: duplicate image id " + std::to_string(rec.id));
    index.records.push_back(std::move(rec));
    by_image.emplace(index.records.back().id, 0);
  }
  std::sort(index.records.begin(), index.records.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t i = 0; i < index.records.size(); ++i)
    by_image[index.records[i].id] = i;

  // Collect (annotation id, annotation) per image so order is deterministic.
  std::vector<std::vector<std::pair<std::int64_t, ImageAnnotation>>> staged(
      index.records.size());
  for (const auto& ja : j.at("annotations")) {
    const auto ann_id = ja.value("id", std::int64_t{0});
    const auto image_id = ja.at("image_id").get<std::int64_t>();
    const auto img_it = by_image.find(image_id);
    if (img_it == by_image.end())
      throw RuntimeFailure("load_coco_subset: annotation " +
                           std::to_string(ann_id) +
                           " references unknown image " +
                           std::to_string(image_id));
    const ImageRecord& rec = index.records[img_it->second];

    const auto cat_id = ja.at("category_id").get<std::int64_t>();
    const auto cat_it = index.category_map.find(cat_id);
    if (cat_it == index.category_map.end())
      throw RuntimeFailure("load_coco_subset: annotation " +
                           std::to_string(ann_id) +
                           " references unknown category " +
                           std::to_string(cat_id));

    const auto jb = ja.at("bbox");
    require(jb.is_array() && jb.size() == 4,
            "load_coco_subset: annotation " + std::to_string(ann_id) +
                " has a malformed bbox");
    const double x = jb[0].get<double>(), y = jb[1].get<double>();
    const double w = jb[2].get<double>(), h = jb[3].get<double>();
    if (w <= 0 || h <= 0 || x < 0 || y < 0 ||
        x + w > static_cast<double>(rec.width) ||
        y + h > static_cast<double>(rec.height))
      throw RuntimeFailure("load_coco_subset: annotation " +
                           std::to_string(ann_id) +
                           " has an out-of-bounds box in image " +
                           std::to_string(image_id));

    ImageAnnotation ann;
    ann.box = BBox{x, y, x + w, y + h};
    ann.class_id = cat_it->second;
    ann.crowd = ja.value("iscrowd", 0) != 0;
    staged[img_it->second].emplace_back(ann_id, std::move(ann));
  }
  for (std::size_t i = 0; i < staged.size(); ++i) {
    std::sort(staged[i].begin(), staged[i].end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [ann_id, ann] : staged[i])
      index.records[i].boxes.push_back(std::move(ann));
  }
  index.validate();
  return index;
}

// Inverse of load_coco_subset: corner boxes go back to [x,y,w,h] and class
// indices back to dataset category ids. load(save(x)) == x.
inline void save_coco_subset(const DatasetIndex& index, const std::string& path) {
  index.validate();
  nlohmann::json j;
  auto& jc = j["categories"] = nlohmann::json::array();
  for (const auto& cat : index.categories)
    jc.push_back({{"id", cat.id}, {"name", cat.name}});

  auto& ji = j["images"] = nlohmann::json::array();
  auto& ja = j["annotations"] = nlohmann::json::array();
  std::int64_t next_ann_id = 1;
  for (const auto& rec : index.records) {
    ji.push_back({{"id", rec.id},
                  {"file_name", rec.file_name},
                  {"width", rec.width},
                  {"height", rec.height}});
    for (const auto& ann : rec.boxes) {
      ja.push_back(
          {{"id", next_ann_id++},
           {"image_id", rec.id},
           {"category_id", index.categories[static_cast<std::size_t>(ann.class_id)].id},
           {"bbox", {ann.box.x_min, ann.box.y_min, ann.box.width(), ann.box.height()}},
           {"area", ann.box.area()},
           {"iscrowd", ann.crowd ? 1 : 0}});
    }
  }
  detail::write_file_atomic(path, j.dump(2) + "\n");
}

}  // namespace afdet::data
