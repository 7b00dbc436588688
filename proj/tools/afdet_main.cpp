// afdet command-line tool: target encode/decode inspection, augmentation
// preview, toy training, evaluation, benchmarking, FLOPs reporting, and
// heatmap dumps. Exit codes: 0 success, 1 usage/config error, 2 runtime
// failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "afdet/config.hpp"
#include "afdet/nn/flops.hpp"
#include "afdet/trainer.hpp"

namespace {

using afdet::RunConfig;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path,
                  "JSON config file; built-in defaults apply when omitted");
  cmd->add_option("--seed", o.seed, "override the config seed");
  cmd->add_option("--out", o.out_dir, "override the config output_dir");
}

RunConfig resolve(const CommonOpts& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{}
                                        : afdet::load_run_config(o.config_path);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out_dir.empty()) cfg.output_dir = o.out_dir;
  cfg.validate();
  return cfg;
}

void ensure_out_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec)
    throw afdet::RuntimeFailure("cannot create output dir '" + dir +
                                "': " + ec.message());
}

// Replicates one channel of a C x h x w map into a 3 x h x w grayscale image.
afdet::TensorT<float> gray_image(const afdet::TensorT<float>& map,
                                 std::int64_t channel) {
  const std::int64_t h = map.dim(1), w = map.dim(2);
  afdet::TensorT<float> out({3, h, w});
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < h * w; ++i)
      out[c * h * w + i] = map[channel * h * w + i];
  return out;
}

std::vector<afdet::GroundTruth> sample_gts(const afdet::TrainSample& s) {
  std::vector<afdet::GroundTruth> gts;
  for (std::size_t i = 0; i < s.boxes.size(); ++i)
    gts.push_back(afdet::GroundTruth{s.boxes[i], s.classes[i]});
  return gts;
}

void emit(const json& j, const std::string& path = "") {
  std::cout << j.dump(2) << "\n";
  if (path.empty()) return;
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) ensure_out_dir(parent.string());
  afdet::data::detail::write_file_atomic(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------- encode --

void cmd_encode(const RunConfig& cfg, bool viz) {
  const auto bundle = afdet::load_dataset(cfg);
  ensure_out_dir(cfg.output_dir);
  json files = json::array();
  for (std::size_t i = 0; i < bundle.samples.size(); ++i) {
    const auto& s = bundle.samples[i];
    const int id = bundle.image_ids[i];
    const int h = static_cast<int>(s.image.dim(1));
    const int w = static_cast<int>(s.image.dim(2));
    const auto enc = afdet::encode<float>(sample_gts(s), h, w,
                                          cfg.data.num_classes, cfg.targets.alpha);
    afdet::TensorT<float> oid(enc.object_id.shape());
    for (std::int64_t k = 0; k < oid.numel(); ++k)
      oid[k] = static_cast<float>(enc.object_id[k]);

    const std::string path =
        cfg.output_dir + "/targets_" + std::to_string(id) + ".bin";
    afdet::nn::save_tensor_archive<float>(
        path,
        {{"class_heatmap", &enc.class_heatmap},
         {"reg_target", &enc.reg_target},
         {"weight_map", &enc.weight_map},
         {"object_id", &oid}},
        json{{"image_id", id}, {"input_h", h}, {"input_w", w}});
    files.push_back(path);

    if (viz)
      for (int c = 0; c < cfg.data.num_classes; ++c)
        afdet::data::write_image(gray_image(enc.class_heatmap, c),
                                 cfg.output_dir + "/heatmap_" +
                                     std::to_string(id) + "_c" +
                                     std::to_string(c) + ".png");
  }
  emit(json{{"schema", "afdet.encode.v1"},
            {"images", bundle.samples.size()},
            {"out", cfg.output_dir},
            {"files", files}});
}

// ---------------------------------------------------------------- decode --

void cmd_decode(const RunConfig& cfg, std::vector<std::string> files,
                const std::string& in_dir) {
  namespace fs = std::filesystem;
  if (files.empty() && !in_dir.empty()) {
    if (!fs::is_directory(in_dir))
      throw afdet::RuntimeFailure("decode: '" + in_dir + "' is not a directory");
    for (const auto& e : fs::directory_iterator(in_dir)) {
      const std::string name = e.path().filename().string();
      if (name.rfind("targets_", 0) == 0 && e.path().extension() == ".bin")
        files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
  }
  afdet::require(!files.empty(),
                 "decode: no target archives given (pass files or --in DIR)");

  json rows = json::array();
  for (const auto& f : files) {
    json extra;
    const auto tensors = afdet::nn::load_tensor_archive<float>(f, &extra);
    const afdet::TensorT<float>* heat = nullptr;
    const afdet::TensorT<float>* reg = nullptr;
    for (const auto& [name, t] : tensors) {
      if (name == "class_heatmap") heat = &t;
      if (name == "reg_target") reg = &t;
    }
    if (!heat || !reg)
      throw afdet::RuntimeFailure(
          "decode: archive '" + f +
          "' is missing the class_heatmap/reg_target tensors");
    const int h = extra.value("input_h",
                              static_cast<int>(heat->dim(1)) * afdet::kStride);
    const int w = extra.value("input_w",
                              static_cast<int>(heat->dim(2)) * afdet::kStride);
    const auto dets = afdet::decode(*heat, *reg, cfg.decode.topk,
                                    cfg.decode.score_thresh, h, w);
    for (const auto& d : dets)
      rows.push_back(json{{"image_id", extra.value("image_id", -1)},
                          {"class_id", d.class_id},
                          {"score", d.score},
                          {"box", {d.box.x_min, d.box.y_min, d.box.x_max,
                                   d.box.y_max}}});
  }
  ensure_out_dir(cfg.output_dir);
  emit(json{{"schema", "afdet.detections.v1"}, {"detections", rows}},
       cfg.output_dir + "/detections.json");
}

// --------------------------------------------------------------- augment --

void cmd_augment(const RunConfig& cfg) {
  const auto bundle = afdet::load_dataset(cfg);
  const auto n = static_cast<std::int64_t>(bundle.samples.size());
  afdet::require(n >= 2 || cfg.augment.mix_prob == 0.0,
                 "augment: mix operations need at least 2 inputs, got " +
                     std::to_string(n) +
                     " (set augment.mix_prob to 0 for single-image runs)");
  ensure_out_dir(cfg.output_dir);

  const int size = cfg.data.image_size;
  afdet::data::DatasetIndex index;
  for (int c = 0; c < cfg.data.num_classes; ++c)
    index.categories.push_back(
        afdet::data::CocoCategory{c + 1, "class" + std::to_string(c)});

  for (std::int64_t i = 0; i < n; ++i) {
    afdet::TrainSample s = afdet::resize_bilinear(bundle.samples[i], size, size);
    afdet::TrainSample partner;
    if (n > 1)
      partner = afdet::resize_bilinear(bundle.samples[(i + 1) % n], size, size);
    afdet::Rng rng = afdet::Rng::stream(cfg.seed, "augment-cmd",
                                        static_cast<std::uint64_t>(i), 0);
    const afdet::TrainSample aug = afdet::augment_pipeline(
        s, n > 1 ? &partner : nullptr, cfg.augment, rng);

    const std::string file = "aug_" + std::to_string(i) + ".png";
    afdet::data::write_image(aug.image, cfg.output_dir + "/" + file);

    afdet::data::ImageRecord rec;
    rec.id = static_cast<int>(i) + 1;
    rec.path = cfg.output_dir + "/" + file;
    rec.file_name = file;
    rec.width = static_cast<int>(aug.image.dim(2));
    rec.height = static_cast<int>(aug.image.dim(1));
    for (const auto& g :
         afdet::detail::trainable_boxes(aug, cfg.augment.min_box_weight))
      rec.boxes.push_back(afdet::data::ImageAnnotation{g.box, g.class_id, false});
    index.records.push_back(std::move(rec));
  }
  const std::string ann = cfg.output_dir + "/augmented.json";
  afdet::data::save_coco_subset(index, ann);
  emit(json{{"schema", "afdet.augment.v1"},
            {"images", n},
            {"annotations", ann},
            {"out", cfg.output_dir}});
}

// ----------------------------------------------------------- train/eval --

void cmd_train(const RunConfig& cfg, const std::string& resume) {
  const auto report = afdet::train_run(cfg, resume);
  emit(json{{"schema", "afdet.train.v1"},
            {"start_iteration", report.start_iteration},
            {"iterations", report.iterations},
            {"final_loss_total", report.final_loss.total},
            {"metrics", report.metrics_path},
            {"checkpoint", report.final_checkpoint}});
}

json eval_to_json(const afdet::data::EvalResult& r) {
  json ap = json::object();
  for (std::size_t t = 0; t < r.thresholds.size(); ++t) {
    double sum = 0.0;
    for (const auto& [cid, aps] : r.per_class_ap) sum += aps[t];
    char key[8];
    std::snprintf(key, sizeof key, "%.2f", r.thresholds[t]);
    ap[key] = r.per_class_ap.empty()
                  ? 0.0
                  : sum / static_cast<double>(r.per_class_ap.size());
  }
  json per_class = json::object();
  for (const auto& [cid, aps] : r.per_class_ap)
    per_class[std::to_string(cid)] = aps;
  return json{{"schema", "afdet.eval.v1"},
              {"thresholds", r.thresholds},
              {"ap_by_threshold", ap},
              {"per_class", per_class},
              {"map50", r.map50},
              {"map_avg", r.map_avg}};
}

void cmd_eval(const RunConfig& cfg, const std::string& checkpoint, bool use_ema) {
  const auto bundle = afdet::load_dataset(cfg);
  afdet::nn::ToyDetector det(cfg.detector_config(), cfg.seed);
  afdet::nn::EmaState ema;
  const auto meta =
      afdet::nn::load_checkpoint(checkpoint, det.trainable(), det.buffers(), &ema);
  if (use_ema) {
    afdet::require(meta.has_ema,
                   "eval: --ema requested but checkpoint '" + checkpoint +
                       "' carries no EMA shadow");
    afdet::nn::ema_swap(ema, det.trainable());
  }
  const auto result = afdet::evaluate_detector(cfg, det, bundle);
  ensure_out_dir(cfg.output_dir);
  emit(eval_to_json(result), cfg.output_dir + "/eval.json");
}

// ----------------------------------------------------------------- bench --

volatile double g_sink = 0.0;

template <typename F>
json time_stage(F&& body, int iters) {
  constexpr int kWarmup = 3;
  std::vector<double> ms;
  ms.reserve(static_cast<std::size_t>(iters));
  for (int i = 0; i < iters + kWarmup; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    g_sink = g_sink + body();
    const auto t1 = std::chrono::steady_clock::now();
    if (i >= kWarmup)
      ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  const std::size_t nn = ms.size();
  const double median =
      nn % 2 ? ms[nn / 2] : 0.5 * (ms[nn / 2 - 1] + ms[nn / 2]);
  const std::size_t p95_idx = std::min(
      nn - 1, static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(nn))) - 1);
  return json{{"median_ms", median}, {"p95_ms", ms[p95_idx]}};
}

void cmd_bench(const RunConfig& cfg, int iters, const std::string& out_path) {
  iters = std::max(iters, 50);
  const int size = cfg.data.image_size;
  const int classes = cfg.data.num_classes;
  const std::int64_t gh = size / afdet::kStride;

  const afdet::TrainSample sample =
      afdet::data::synth_image(size, classes, cfg.seed, 0);
  const auto gts = sample_gts(sample);
  const auto enc =
      afdet::encode<float>(gts, size, size, classes, cfg.targets.alpha);

  afdet::Rng rng = afdet::Rng::stream(cfg.seed, "bench", 0, 0);
  afdet::TensorT<float> heat({classes, gh, gh});
  for (std::int64_t i = 0; i < heat.numel(); ++i)
    heat[i] = static_cast<float>(rng.uniform(0.01, 0.99));
  afdet::TensorT<float> reg({4, gh, gh});
  for (std::int64_t i = 0; i < reg.numel(); ++i)
    reg[i] = static_cast<float>(rng.uniform(4.0, 24.0));

  afdet::nn::ToyDetector det(cfg.detector_config(), cfg.seed);
  afdet::TensorT<float> x({1, 3, size, size});
  for (std::int64_t i = 0; i < x.numel(); ++i)
    x[i] = static_cast<float>(rng.uniform());

  const afdet::AgsConfig ags = cfg.ags_config();
  json stages;
  stages["encode"] = time_stage(
      [&] {
        return afdet::encode<float>(gts, size, size, classes, cfg.targets.alpha)
            .weight_map[0];
      },
      iters);
  stages["decode"] = time_stage(
      [&] {
        const auto dets = afdet::decode(heat, reg, cfg.decode.topk,
                                        cfg.decode.score_thresh, size, size);
        return dets.empty() ? 0.0 : dets.front().score;
      },
      iters);
  stages["loss_fwd_bwd"] = time_stage(
      [&] {
        const auto focal = afdet::focal_loss(heat, enc.class_heatmap);
        std::vector<afdet::TensorT<float>> maps;
        if (ags.enabled) maps = afdet::ags_maps(heat, gts, cfg.targets.alpha);
        const auto rl = afdet::regression_loss(reg, enc,
                                               ags.enabled ? &maps : nullptr, ags);
        return static_cast<double>(focal.value) + rl.value;
      },
      iters);
  stages["detector_forward"] = time_stage(
      [&] {
        afdet::nn::ToyDetector::Cache cache;
        return static_cast<double>(det.forward(x, false, cache).heatmap[0]);
      },
      iters);

  emit(json{{"schema", "afdet.bench.v1"}, {"iterations", iters},
            {"stages", stages}},
       out_path);
}

// ----------------------------------------------------------------- flops --

void cmd_flops(const RunConfig& cfg, const std::string& out_path) {
  const afdet::nn::ToyDetector det(cfg.detector_config(), cfg.seed);
  const int size = cfg.data.image_size;
  const auto descs = det.flops_descs(size, size);

  json rows = json::array();
  for (const auto& d : descs)
    rows.push_back(json{
        {"name", d.name},
        {"kind", d.kind == afdet::nn::LayerDesc::Kind::kConv ? "conv"
                                                             : "elementwise"},
        {"macs", afdet::nn::layer_macs(d)}});
  const std::int64_t grid = size / afdet::kStride;
  emit(json{{"schema", "afdet.flops.v1"},
            {"input_size", size},
            {"rows", rows},
            {"total_macs", afdet::nn::flops_count(descs)},
            {"conv_macs", afdet::nn::conv_flops(descs)},
            {"lite_plain_conv_ratio",
             afdet::nn::lite_plain_conv_ratio(cfg.model.head_width, grid, grid)}},
       out_path);
}

// ---------------------------------------------------------- dump-heatmap --

void cmd_dump_heatmap(const RunConfig& cfg, const std::string& checkpoint,
                      const std::string& image_path, bool use_ema) {
  const int size = cfg.data.image_size;
  afdet::TensorT<float> img =
      image_path.empty()
          ? afdet::data::synth_image(size, cfg.data.num_classes, cfg.seed, 0).image
          : afdet::data::read_image(image_path);
  img = afdet::resize_bilinear(img, size, size);
  if (cfg.data.normalize)
    img = afdet::normalize(img, afdet::kImagenetMean, afdet::kImagenetStd);

  afdet::nn::ToyDetector det(cfg.detector_config(), cfg.seed);
  if (!checkpoint.empty()) {
    afdet::nn::EmaState ema;
    const auto meta = afdet::nn::load_checkpoint(checkpoint, det.trainable(),
                                                 det.buffers(), &ema);
    if (use_ema) {
      afdet::require(meta.has_ema,
                     "dump-heatmap: --ema requested but checkpoint carries no "
                     "EMA shadow");
      afdet::nn::ema_swap(ema, det.trainable());
    }
  }

  afdet::TensorT<float> x({1, 3, size, size});
  std::copy_n(img.data(), img.numel(), x.data());
  afdet::nn::ToyDetector::Cache cache;
  const auto fwd = det.forward(x, false, cache);
  const auto heat = afdet::detail::sample_plane(fwd.heatmap, 0);
  const auto dist = afdet::detail::sample_plane(fwd.distances, 0);

  ensure_out_dir(cfg.output_dir);
  json files = json::array();
  for (int c = 0; c < cfg.data.num_classes; ++c) {
    const std::string path =
        cfg.output_dir + "/heatmap_c" + std::to_string(c) + ".png";
    afdet::data::write_image(gray_image(heat, c), path);
    files.push_back(path);
  }
  afdet::nn::save_tensor_archive<float>(
      cfg.output_dir + "/heatmaps.bin",
      {{"heatmap", &heat}, {"distances", &dist}},
      json{{"image", image_path.empty() ? "synth:0" : image_path}});
  emit(json{{"schema", "afdet.dump-heatmap.v1"},
            {"out", cfg.output_dir},
            {"files", files}});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"afdet: anchor-free toy detector toolkit"};
  app.require_subcommand(1);
  app.footer(
      "Exit codes: 0 success, 1 usage/config error, 2 runtime failure.\n"
      "Environment: AFDET_THREADS caps worker threads (default 1 for "
      "reproducibility).\n\n"
      "Config keys (JSON) and their defaults:\n" +
      afdet::config_help_text());

  CommonOpts opts;
  bool viz = false;
  bool use_ema = false;
  std::string resume, checkpoint, image_path, in_dir;
  std::vector<std::string> files;
  int bench_iters = 50;

  auto* enc = app.add_subcommand("encode", "encode annotations into target maps");
  add_common(enc, opts);
  enc->add_flag("--viz", viz, "also render per-class heatmap PNGs");

  auto* dec = app.add_subcommand("decode", "decode target/heatmap archives into boxes");
  add_common(dec, opts);
  dec->add_option("archives", files, "target archive files (targets_*.bin)");
  dec->add_option("--in", in_dir, "directory to scan for targets_*.bin");

  auto* aug = app.add_subcommand("augment", "write augmented images + annotations");
  add_common(aug, opts);

  auto* trn = app.add_subcommand("train", "run the toy training loop");
  add_common(trn, opts);
  trn->add_option("--resume", resume, "checkpoint to resume from");

  auto* evl = app.add_subcommand("eval", "evaluate a checkpoint (COCO-style mAP)");
  add_common(evl, opts);
  evl->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  evl->add_flag("--ema", use_ema, "evaluate the EMA shadow weights");

  auto* ben = app.add_subcommand("bench", "time encode/decode/loss/forward stages");
  add_common(ben, opts);
  ben->add_option("--iters", bench_iters, "timed iterations per stage (>= 50)");

  auto* flp = app.add_subcommand("flops", "per-layer MAC counts and totals");
  add_common(flp, opts);

  auto* dmp = app.add_subcommand("dump-heatmap", "render predicted heatmaps for one image");
  add_common(dmp, opts);
  dmp->add_option("--checkpoint", checkpoint, "checkpoint file (fresh weights when omitted)");
  dmp->add_option("--image", image_path, "input image (synthetic image 0 when omitted)");
  dmp->add_flag("--ema", use_ema, "use the EMA shadow weights");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitUsage;
  }

  try {
    const RunConfig cfg = resolve(opts);
    if (app.got_subcommand(enc)) cmd_encode(cfg, viz);
    if (app.got_subcommand(dec)) cmd_decode(cfg, files, in_dir);
    if (app.got_subcommand(aug)) cmd_augment(cfg);
    if (app.got_subcommand(trn)) cmd_train(cfg, resume);
    if (app.got_subcommand(evl)) cmd_eval(cfg, checkpoint, use_ema);
    if (app.got_subcommand(ben)) cmd_bench(cfg, bench_iters, opts.out_dir.empty() ? "" : cfg.output_dir + "/bench.json");
    if (app.got_subcommand(flp)) cmd_flops(cfg, opts.out_dir.empty() ? "" : cfg.output_dir + "/flops.json");
    if (app.got_subcommand(dmp)) cmd_dump_heatmap(cfg, checkpoint, image_path, use_ema);
    return kExitOk;
  } catch (const afdet::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
