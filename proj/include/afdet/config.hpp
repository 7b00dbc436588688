#pragma once

// Run configuration: one JSON document covering data, model, targets, loss,
// optimizer, EMA, training, augmentation, and decode settings. Parsing is
// strict — unknown keys and type mismatches are errors, so a typo can never
// silently fall back to a default.

#include <array>
#include <cstdint>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "afdet/augment.hpp"
#include "afdet/common.hpp"
#include "afdet/losses.hpp"
#include "afdet/nn/detector.hpp"
#include "afdet/nn/optim.hpp"
#include "afdet/target_codec.hpp"

namespace afdet {

struct DataConfig {
  std::string annotations;  // COCO JSON path; empty selects the synthetic set
  std::string image_dir;    // prefix for file_name entries in the annotations
  int synth_images = 8;
  int num_classes = 3;
  int image_size = 128;  // square training resolution, multiple of 16
  bool normalize = true;

  bool operator==(const DataConfig&) const = default;
};

struct ModelConfig {
  int head_width = 48;
  std::array<int, 4> stage_channels{16, 32, 64, 64};

  bool operator==(const ModelConfig&) const = default;
};

struct TargetConfig {
  double alpha = kDefaultGaussianAlpha;

  bool operator==(const TargetConfig&) const = default;
};

struct LossConfig {
  double w_loc = kDefaultLocWeight;
  double w_reg = kDefaultRegWeight;
  bool ags_enabled = true;
  double ags_lambda = kDefaultAgsLambda;

  bool operator==(const LossConfig&) const = default;
};

struct OptimizerConfig {
  double lr = nn::kDefaultBaseLr;
  double momentum = nn::kDefaultMomentum;
  double weight_decay = nn::kDefaultWeightDecay;
  std::vector<std::int64_t> milestones = nn::default_lr_milestones();
  double gamma = nn::kDefaultLrGamma;

  bool operator==(const OptimizerConfig&) const = default;
};

struct EmaConfig {
  bool enabled = true;
  double decay = nn::kDefaultEmaDecay;

  bool operator==(const EmaConfig&) const = default;
};

struct TrainLoopConfig {
  std::int64_t iterations = 500;
  int batch_size = 4;
  std::int64_t checkpoint_interval = 100;
  // Forward-only passes over the (unaugmented) dataset after the last
  // iteration, run before the final checkpoint is written. They re-estimate
  // the batchnorm running statistics under the final weights, which matters
  // on tiny datasets where the momentum-0.9 running averages lag behind.
  int bn_refresh_passes = 0;

  bool operator==(const TrainLoopConfig&) const = default;
};

struct DecodeConfig {
  int topk = kDefaultTopK;
  double score_thresh = kDefaultScoreThresh;

  bool operator==(const DecodeConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/afdet";
  DataConfig data;
  ModelConfig model;
  TargetConfig targets;
  LossConfig loss;
  OptimizerConfig optimizer;
  EmaConfig ema;
  TrainLoopConfig train;
  AugmentConfig augment;
  DecodeConfig decode;

  bool operator==(const RunConfig&) const = default;

  nn::DetectorConfig detector_config() const {
    nn::DetectorConfig d;
    d.num_classes = data.num_classes;
    d.head_width = model.head_width;
    d.stage_channels = model.stage_channels;
    return d;
  }

  AgsConfig ags_config() const { return AgsConfig{loss.ags_lambda, loss.ags_enabled}; }

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);

  // Identifies the training trajectory: everything except where outputs land,
  // so a resumed run may write into a fresh directory.
  std::uint64_t hash() const {
    nlohmann::json j = to_json();
    j.erase("output_dir");
    return fnv1a64(j.dump());
  }
};

namespace detail {

// Strict accessor for one JSON object: every read key is recorded and
// close() rejects whatever was never asked for.
class ConfigSection {
 public:
  ConfigSection(const nlohmann::json& j, std::string prefix)
      : j_(j), prefix_(std::move(prefix)) {
    require(j_.is_object(), "config: '" + label() + "' must be a JSON object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const nlohmann::json* find(const std::string& key) {
    return has(key) ? &j_.at(key) : nullptr;
  }

  void get(const std::string& key, double& out) {
    if (const auto* v = find(key)) {
      require(v->is_number(), type_error(key, "number"));
      out = v->get<double>();
    }
  }

  void get(const std::string& key, bool& out) {
    if (const auto* v = find(key)) {
      require(v->is_boolean(), type_error(key, "boolean"));
      out = v->get<bool>();
    }
  }

  void get(const std::string& key, std::string& out) {
    if (const auto* v = find(key)) {
      require(v->is_string(), type_error(key, "string"));
      out = v->get<std::string>();
    }
  }

  template <typename Int>
    requires std::integral<Int>
  void get(const std::string& key, Int& out) {
    if (const auto* v = find(key)) {
      require(v->is_number_integer() || v->is_number_unsigned(),
              type_error(key, "integer"));
      out = v->get<Int>();
    }
  }

  void get(const std::string& key, std::vector<std::int64_t>& out) {
    if (const auto* v = find(key)) {
      require(v->is_array(), type_error(key, "integer array"));
      out.clear();
      for (const auto& e : *v) {
        require(e.is_number_integer() || e.is_number_unsigned(),
                type_error(key, "integer array"));
        out.push_back(e.get<std::int64_t>());
      }
    }
  }

  template <std::size_t N, typename T>
  void get(const std::string& key, std::array<T, N>& out) {
    if (const auto* v = find(key)) {
      require(v->is_array() && v->size() == N,
              type_error(key, "array of " + std::to_string(N) + " numbers"));
      for (std::size_t i = 0; i < N; ++i) {
        const auto& e = (*v)[i];
        if constexpr (std::integral<T>)
          require(e.is_number_integer() || e.is_number_unsigned(),
                  type_error(key, "integer array"));
        else
          require(e.is_number(), type_error(key, "number array"));
        out[i] = e.get<T>();
      }
    }
  }

  ConfigSection section(const std::string& key) {
    seen_.insert(key);
    static const nlohmann::json kEmpty = nlohmann::json::object();
    return ConfigSection(j_.contains(key) ? j_.at(key) : kEmpty,
                         prefix_.empty() ? key : prefix_ + "." + key);
  }

  void close() const {
    for (const auto& [key, value] : j_.items()) {
      (void)value;
      require(seen_.count(key) != 0, "config: unknown key '" + qualify(key) + "'");
    }
  }

 private:
  std::string label() const { return prefix_.empty() ? "<root>" : prefix_; }
  std::string qualify(const std::string& key) const {
    return prefix_.empty() ? key : prefix_ + "." + key;
  }
  std::string type_error(const std::string& key, const std::string& want) const {
    return "config: '" + qualify(key) + "' must be a " + want;
  }

  const nlohmann::json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline void RunConfig::validate() const {
  require(data.image_size >= 16 && data.image_size % 16 == 0,
          "config: data.image_size must be a positive multiple of 16");
  require(data.num_classes >= 1, "config: data.num_classes must be >= 1");
  require(data.synth_images >= 1, "config: data.synth_images must be >= 1");
  require(targets.alpha > 0.0 && targets.alpha <= 1.0,
          "config: targets.alpha must lie in (0,1]");
  require(loss.w_loc >= 0.0 && loss.w_reg >= 0.0,
          "config: loss weights must be non-negative");
  ags_config().validate();
  require(optimizer.lr > 0.0, "config: optimizer.lr must be positive");
  require(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0,
          "config: optimizer.momentum must lie in [0,1)");
  require(optimizer.weight_decay >= 0.0,
          "config: optimizer.weight_decay must be non-negative");
  require(optimizer.gamma > 0.0, "config: optimizer.gamma must be positive");
  std::int64_t prev = 0;
  for (const std::int64_t m : optimizer.milestones) {
    require(m > prev, "config: optimizer.milestones must be strictly ascending");
    prev = m;
  }
  require(ema.decay >= 0.0 && ema.decay <= 1.0,
          "config: ema.decay must lie in [0,1]");
  require(train.iterations >= 1, "config: train.iterations must be >= 1");
  require(train.batch_size >= 1, "config: train.batch_size must be >= 1");
  require(train.checkpoint_interval >= 1,
          "config: train.checkpoint_interval must be >= 1");
  require(train.bn_refresh_passes >= 0,
          "config: train.bn_refresh_passes must be non-negative");
  augment.validate();
  require(decode.topk >= 1, "config: decode.topk must be >= 1");
  require(decode.score_thresh >= 0.0 && decode.score_thresh <= 1.0,
          "config: decode.score_thresh must lie in [0,1]");
  detector_config().validate();
}

inline nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["output_dir"] = output_dir;
  j["data"] = {{"annotations", data.annotations},
               {"image_dir", data.image_dir},
               {"synth_images", data.synth_images},
               {"num_classes", data.num_classes},
               {"image_size", data.image_size},
               {"normalize", data.normalize}};
  j["model"] = {{"head_width", model.head_width},
                {"stage_channels", model.stage_channels}};
  j["targets"] = {{"alpha", targets.alpha}};
  j["loss"] = {{"w_loc", loss.w_loc},
               {"w_reg", loss.w_reg},
               {"ags_enabled", loss.ags_enabled},
               {"ags_lambda", loss.ags_lambda}};
  j["optimizer"] = {{"lr", optimizer.lr},
                    {"momentum", optimizer.momentum},
                    {"weight_decay", optimizer.weight_decay},
                    {"milestones", optimizer.milestones},
                    {"gamma", optimizer.gamma}};
  j["ema"] = {{"enabled", ema.enabled}, {"decay", ema.decay}};
  j["train"] = {{"iterations", train.iterations},
                {"batch_size", train.batch_size},
                {"checkpoint_interval", train.checkpoint_interval},
                {"bn_refresh_passes", train.bn_refresh_passes}};
  j["augment"] = {{"enabled", augment.enabled},
                  {"expand_prob", augment.expand_prob},
                  {"expand_max_ratio", augment.expand_max_ratio},
                  {"expand_fill", augment.expand_fill},
                  {"crop_prob", augment.crop_prob},
                  {"crop_min_iou", augment.crop_min_iou},
                  {"mix_prob", augment.mix_prob},
                  {"beta_param", augment.beta_param},
                  {"min_box_weight", augment.min_box_weight},
                  {"gridmask_unit", augment.gridmask_unit},
                  {"gridmask_ratio", augment.gridmask_ratio},
                  {"gridmask_prob", augment.gridmask_prob}};
  j["decode"] = {{"topk", decode.topk}, {"score_thresh", decode.score_thresh}};
  return j;
}

inline RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::ConfigSection root(j, "");
  root.get("seed", c.seed);
  root.get("output_dir", c.output_dir);

  auto data = root.section("data");
  data.get("annotations", c.data.annotations);
  data.get("image_dir", c.data.image_dir);
  data.get("synth_images", c.data.synth_images);
  data.get("num_classes", c.data.num_classes);
  data.get("image_size", c.data.image_size);
  data.get("normalize", c.data.normalize);
  data.close();

  auto model = root.section("model");
  model.get("head_width", c.model.head_width);
  model.get("stage_channels", c.model.stage_channels);
  model.close();

  auto targets = root.section("targets");
  targets.get("alpha", c.targets.alpha);
  targets.close();

  auto loss = root.section("loss");
  loss.get("w_loc", c.loss.w_loc);
  loss.get("w_reg", c.loss.w_reg);
  loss.get("ags_enabled", c.loss.ags_enabled);
  loss.get("ags_lambda", c.loss.ags_lambda);
  loss.close();

  auto opt = root.section("optimizer");
  opt.get("lr", c.optimizer.lr);
  opt.get("momentum", c.optimizer.momentum);
  opt.get("weight_decay", c.optimizer.weight_decay);
  opt.get("milestones", c.optimizer.milestones);
  opt.get("gamma", c.optimizer.gamma);
  opt.close();

  auto ema = root.section("ema");
  ema.get("enabled", c.ema.enabled);
  ema.get("decay", c.ema.decay);
  ema.close();

  auto train = root.section("train");
  train.get("iterations", c.train.iterations);
  train.get("batch_size", c.train.batch_size);
  train.get("checkpoint_interval", c.train.checkpoint_interval);
  train.get("bn_refresh_passes", c.train.bn_refresh_passes);
  train.close();

  auto aug = root.section("augment");
  aug.get("enabled", c.augment.enabled);
  aug.get("expand_prob", c.augment.expand_prob);
  aug.get("expand_max_ratio", c.augment.expand_max_ratio);
  aug.get("expand_fill", c.augment.expand_fill);
  aug.get("crop_prob", c.augment.crop_prob);
  aug.get("crop_min_iou", c.augment.crop_min_iou);
  aug.get("mix_prob", c.augment.mix_prob);
  aug.get("beta_param", c.augment.beta_param);
  aug.get("min_box_weight", c.augment.min_box_weight);
  aug.get("gridmask_unit", c.augment.gridmask_unit);
  aug.get("gridmask_ratio", c.augment.gridmask_ratio);
  aug.get("gridmask_prob", c.augment.gridmask_prob);
  aug.close();

  auto dec = root.section("decode");
  dec.get("topk", c.decode.topk);
  dec.get("score_thresh", c.decode.score_thresh);
  dec.close();

  root.close();
  return c;
}

// Reads, parses, and validates a config file. All failures here are usage
// errors (the file is operator input), not runtime faults.
inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidArgument("config: malformed JSON in '" + path + "': " + e.what());
  }
  RunConfig c = RunConfig::from_json(j);
  c.validate();
  return c;
}

// One "key = default" line per config entry, generated from the default
// instance so the listing can never drift from the schema.
inline std::string config_help_text() {
  std::string out;
  const std::function<void(const nlohmann::json&, const std::string&)> walk =
      [&](const nlohmann::json& j, const std::string& prefix) {
        for (const auto& [key, value] : j.items()) {
          const std::string name = prefix.empty() ? key : prefix + "." + key;
          if (value.is_object())
            walk(value, name);
          else
            out += "  " + name + " = " + value.dump() + "\n";
        }
      };
  walk(RunConfig{}.to_json(), "");
  return out;
}

}  // namespace afdet
