#pragma once

// Toy training loop: data -> augment -> encode -> focal + AGS-reweighted GIoU
// -> SGD with momentum + EMA, plus JSONL metrics and periodic checkpoints.
// Every random draw comes from a stateless substream keyed by
// (seed, purpose, iteration, slot), so a resumed run replays exactly the tape
// the uninterrupted run would have used.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "afdet/augment.hpp"
#include "afdet/common.hpp"
#include "afdet/config.hpp"
#include "afdet/data/coco.hpp"
#include "afdet/data/eval_map.hpp"
#include "afdet/data/image_io.hpp"
#include "afdet/data/preprocess.hpp"
#include "afdet/data/synth.hpp"
#include "afdet/losses.hpp"
#include "afdet/nn/checkpoint.hpp"
#include "afdet/nn/detector.hpp"
#include "afdet/nn/optim.hpp"
#include "afdet/target_codec.hpp"

namespace afdet {

using data::eval_map;
using data::EvalGt;
using data::EvalResult;
using data::kImagenetMean;
using data::kImagenetStd;
using data::load_coco_subset;
using data::normalize;
using data::read_image;
using data::resize_bilinear;
using data::synth_dataset;

inline constexpr const char* kMetricsSchema = "afdet.metrics.v1";

// Training/eval corpus in memory: raw [0,1] images at their original sizes
// with boxes in original pixel coordinates. Crowd regions are kept only on
// the eval side; the trainer never regresses onto them.
struct DatasetBundle {
  std::vector<TrainSampleT<float>> samples;
  std::vector<std::vector<EvalGt>> eval_gts;
  std::vector<int> image_ids;
};

inline DatasetBundle load_dataset(const RunConfig& cfg) {
  DatasetBundle out;
  if (cfg.data.annotations.empty()) {
    out.samples = synth_dataset(cfg.data.synth_images, cfg.data.image_size,
                                cfg.data.num_classes, cfg.seed);
    for (std::size_t i = 0; i < out.samples.size(); ++i) {
      std::vector<EvalGt> gts;
      const auto& s = out.samples[i];
      for (std::size_t b = 0; b < s.boxes.size(); ++b)
        gts.push_back(EvalGt{s.boxes[b], s.classes[b], false});
      out.eval_gts.push_back(std::move(gts));
      out.image_ids.push_back(static_cast<int>(i));
    }
    return out;
  }

  const data::DatasetIndex index =
      load_coco_subset(cfg.data.annotations, cfg.data.image_dir);
  require(index.num_classes() == cfg.data.num_classes,
          "config: data.num_classes (" + std::to_string(cfg.data.num_classes) +
              ") does not match dataset categories (" +
              std::to_string(index.num_classes()) + ")");
  for (const auto& rec : index.records) {
    TrainSampleT<float> s;
    s.image = read_image(rec.path);
    std::vector<EvalGt> gts;
    for (const auto& ann : rec.boxes) {
      gts.push_back(EvalGt{ann.box, ann.class_id, ann.crowd});
      if (ann.crowd) continue;
      s.boxes.push_back(ann.box);
      s.classes.push_back(ann.class_id);
      s.box_weights.push_back(1.0);
    }
    out.samples.push_back(std::move(s));
    out.eval_gts.push_back(std::move(gts));
    out.image_ids.push_back(rec.id);
  }
  return out;
}

namespace detail {

// Copies sample n of an N x C x h x w tensor into its own C x h x w tensor.
template <typename T>
TensorT<T> sample_plane(const TensorT<T>& batch, std::int64_t n) {
  const std::int64_t c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  TensorT<T> out({c, h, w});
  const std::int64_t stride = c * h * w;
  std::copy_n(batch.data() + n * stride, stride, out.data());
  return out;
}

template <typename T>
void add_scaled_plane(TensorT<T>& batch, std::int64_t n, const TensorT<T>& src,
                      T scale) {
  const std::int64_t stride = src.numel();
  T* dst = batch.data() + n * stride;
  const T* s = src.data();
  for (std::int64_t i = 0; i < stride; ++i) dst[i] += scale * s[i];
}

// Boxes leaving augmentation can be clipped to slivers or carry a mixing
// credit too small to supervise; encode() accepts neither.
template <typename T>
std::vector<GroundTruth> trainable_boxes(const TrainSampleT<T>& s,
                                         double min_box_weight) {
  const double w = static_cast<double>(s.image.dim(2));
  const double h = static_cast<double>(s.image.dim(1));
  std::vector<GroundTruth> gts;
  for (std::size_t i = 0; i < s.boxes.size(); ++i) {
    if (s.box_weights[i] < min_box_weight) continue;
    BBox b = s.boxes[i];
    b.x_min = std::clamp(b.x_min, 0.0, w);
    b.x_max = std::clamp(b.x_max, 0.0, w);
    b.y_min = std::clamp(b.y_min, 0.0, h);
    b.y_max = std::clamp(b.y_max, 0.0, h);
    if (b.width() < 1.0 || b.height() < 1.0) continue;
    gts.push_back(GroundTruth{b, s.classes[i]});
  }
  return gts;
}

inline std::string checkpoint_name(std::int64_t iteration) {
  std::string num = std::to_string(iteration);
  if (num.size() < 6) num.insert(0, 6 - num.size(), '0');
  return "ckpt_" + num + ".bin";
}

}  // namespace detail

struct TrainReport {
  std::int64_t start_iteration = 0;
  std::int64_t iterations = 0;
  LossBreakdown final_loss;
  std::string metrics_path;
  std::string final_checkpoint;
};

// Draws one training sample: pick, optionally augment against a partner,
// resize to the square training resolution, and normalize. All randomness is
// scoped to (seed, iteration, slot).
// Index of the sample used at global draw position `g` (0-based). Draws walk
// the dataset in epoch order, reshuffled each epoch, so any window of
// consecutive batches covers the data evenly -- that keeps batchnorm running
// stats close to the dataset-wide statistics.
inline std::int64_t epoch_shuffled_index(std::uint64_t seed, std::int64_t g,
                                         std::int64_t n) {
  const auto epoch = static_cast<std::uint64_t>(g / n);
  const std::int64_t pos = g % n;
  Rng shuffle = Rng::stream(seed, "epoch", epoch, 0);
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), std::int64_t{0});
  for (std::int64_t j = n - 1; j > 0; --j)
    std::swap(perm[static_cast<std::size_t>(j)],
              perm[static_cast<std::size_t>(shuffle.uniform_int(0, j))]);
  return perm[static_cast<std::size_t>(pos)];
}

inline TrainSampleT<float> draw_train_sample(
    const RunConfig& cfg, const std::vector<TrainSampleT<float>>& pool,
    std::int64_t iteration, int slot) {
  const auto n = static_cast<std::int64_t>(pool.size());
  Rng pick = Rng::stream(cfg.seed, "batch", static_cast<std::uint64_t>(iteration),
                         static_cast<std::uint64_t>(slot));
  const std::int64_t g = (iteration - 1) * cfg.train.batch_size + slot;
  const std::int64_t idx = epoch_shuffled_index(cfg.seed, g, n);
  TrainSampleT<float> s = pool[static_cast<std::size_t>(idx)];

  const int size = cfg.data.image_size;
  s = resize_bilinear(s, size, size);
  if (cfg.augment.enabled) {
    std::int64_t pidx = pick.uniform_int(0, n - 1);
    if (pidx == idx && n > 1) pidx = (idx + 1) % n;
    TrainSampleT<float> partner =
        resize_bilinear(pool[static_cast<std::size_t>(pidx)], size, size);
    Rng aug = Rng::stream(cfg.seed, "augment",
                          static_cast<std::uint64_t>(iteration),
                          static_cast<std::uint64_t>(slot));
    s = augment_pipeline(s, n > 1 ? &partner : nullptr, cfg.augment, aug);
    s = resize_bilinear(s, size, size);
  }
  if (cfg.data.normalize) s.image = normalize(s.image, kImagenetMean, kImagenetStd);
  return s;
}

// One optimizer step over a freshly drawn batch. Returns the batch-mean loss
// breakdown; gradients, SGD, and EMA all happen inside.
inline LossBreakdown train_step(const RunConfig& cfg, nn::ToyDetector& det,
                                nn::EmaState& ema,
                                const std::vector<TrainSampleT<float>>& pool,
                                std::int64_t iteration) {
  const int size = cfg.data.image_size;
  const int batch = cfg.train.batch_size;
  const int classes = cfg.data.num_classes;

  std::vector<TrainSampleT<float>> drawn;
  drawn.reserve(static_cast<std::size_t>(batch));
  for (int slot = 0; slot < batch; ++slot)
    drawn.push_back(draw_train_sample(cfg, pool, iteration, slot));

  TensorT<float> x({batch, 3, size, size});
  for (int nsl = 0; nsl < batch; ++nsl)
    std::copy_n(drawn[static_cast<std::size_t>(nsl)].image.data(),
                3LL * size * size, x.data() + nsl * 3LL * size * size);

  nn::ToyDetector::Cache cache;
  const auto out = det.forward(x, true, cache);

  TensorT<float> grad_heat(out.heatmap.shape());
  TensorT<float> grad_dist(out.distances.shape());
  const float inv_batch = 1.0f / static_cast<float>(batch);
  const AgsConfig ags_cfg = cfg.ags_config();

  float loc_sum = 0.0f, reg_sum = 0.0f;
  for (int nsl = 0; nsl < batch; ++nsl) {
    const auto& sample = drawn[static_cast<std::size_t>(nsl)];
    const auto gts = detail::trainable_boxes(sample, cfg.augment.min_box_weight);
    const auto enc = encode<float>(gts, size, size, classes, cfg.targets.alpha);

    TensorT<float> pred_heat = detail::sample_plane(out.heatmap, nsl);
    clamp_predictions(pred_heat);
    const auto focal = focal_loss(pred_heat, enc.class_heatmap);
    loc_sum += focal.value;
    detail::add_scaled_plane(grad_heat, nsl, focal.grad,
                             static_cast<float>(cfg.loss.w_loc) * inv_batch);

    const TensorT<float> pred_dist = detail::sample_plane(out.distances, nsl);
    std::vector<TensorT<float>> maps;
    if (ags_cfg.enabled) {
      const TensorT<float> logits = detail::sample_plane(out.loc_logits, nsl);
      maps = ags_maps(logits, gts, cfg.targets.alpha);
    }
    const auto reg = regression_loss(pred_dist, enc,
                                     ags_cfg.enabled ? &maps : nullptr, ags_cfg);
    reg_sum += reg.value;
    detail::add_scaled_plane(grad_dist, nsl, reg.grad,
                             static_cast<float>(cfg.loss.w_reg) * inv_batch);
  }

  det.zero_grad();
  det.backward(grad_heat, grad_dist, cache, true);

  const double lr = nn::lr_schedule(iteration, cfg.optimizer.lr,
                                cfg.optimizer.milestones, cfg.optimizer.gamma);
  nn::sgd_step(det.trainable(), lr, cfg.optimizer.momentum,
           cfg.optimizer.weight_decay);
  if (cfg.ema.enabled) nn::ema_update(ema, det.trainable());

  return total_loss(loc_sum * inv_batch, reg_sum * inv_batch,
                    static_cast<float>(cfg.loss.w_loc),
                    static_cast<float>(cfg.loss.w_reg));
}

// Re-estimates batchnorm running statistics under the current weights:
// forward-only training-mode passes over the unaugmented dataset in identity
// order. No parameters change. Groups smaller than two samples are skipped
// because training-mode batchnorm needs a real batch.
inline void bn_refresh(const RunConfig& cfg, nn::ToyDetector& det,
                       const std::vector<TrainSampleT<float>>& pool) {
  const int size = cfg.data.image_size;
  const auto n = static_cast<std::int64_t>(pool.size());
  std::vector<TensorT<float>> imgs;
  imgs.reserve(pool.size());
  for (const auto& s : pool) {
    TrainSampleT<float> r = resize_bilinear(s, size, size);
    imgs.push_back(cfg.data.normalize
                       ? normalize(r.image, kImagenetMean, kImagenetStd)
                       : r.image);
  }
  for (int pass = 0; pass < cfg.train.bn_refresh_passes; ++pass) {
    for (std::int64_t b0 = 0; b0 + 2 <= n; b0 += cfg.train.batch_size) {
      const auto bn = std::min<std::int64_t>(cfg.train.batch_size, n - b0);
      if (bn < 2) break;
      TensorT<float> x({bn, 3, size, size});
      for (std::int64_t i = 0; i < bn; ++i)
        std::copy_n(imgs[static_cast<std::size_t>(b0 + i)].data(),
                    3LL * size * size, x.data() + i * 3LL * size * size);
      nn::ToyDetector::Cache cache;
      det.forward(x, true, cache);
    }
  }
}

// Full training run. `resume_from` (optional) must be a checkpoint written by
// the same config; metrics for the replayed prefix are not re-emitted.
inline TrainReport train_run(const RunConfig& cfg,
                             const std::string& resume_from = "") {
  cfg.validate();
  const DatasetBundle bundle = load_dataset(cfg);
  require(!bundle.samples.empty(), "train: dataset is empty");

  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(cfg.output_dir, ec);
  if (ec)
    throw RuntimeFailure("train: cannot create output dir '" + cfg.output_dir +
                         "': " + ec.message());

  nn::ToyDetector det(cfg.detector_config(), cfg.seed);
  nn::EmaState ema;
  ema.decay = cfg.ema.decay;

  const std::string hash = std::to_string(cfg.hash());
  std::int64_t start = 0;
  if (!resume_from.empty()) {
    const auto meta = nn::load_checkpoint(resume_from, det.trainable(),
                                      det.buffers(),
                                      cfg.ema.enabled ? &ema : nullptr);
    require(meta.config_hash == hash,
            "train: checkpoint '" + resume_from +
                "' was written by a different config");
    start = meta.iteration;
  }
  if (cfg.ema.enabled && ema.empty()) ema.init_from(det.trainable());

  data::detail::write_file_atomic(cfg.output_dir + "/config.json", cfg.to_json().dump(2) + "\n");

  TrainReport report;
  report.start_iteration = start;
  report.iterations = cfg.train.iterations;
  report.metrics_path = cfg.output_dir + "/metrics.jsonl";

  std::string metrics;
  const auto flush = [&] { data::detail::write_file_atomic(report.metrics_path, metrics); };
  const auto save = [&](std::int64_t it, const std::string& name) {
    const std::string path = cfg.output_dir + "/" + name;
    nn::save_checkpoint(path, det.trainable(), det.buffers(),
                    cfg.ema.enabled ? &ema : nullptr, it, hash);
    return path;
  };

  for (std::int64_t it = start + 1; it <= cfg.train.iterations; ++it) {
    const LossBreakdown loss = train_step(cfg, det, ema, bundle.samples, it);
    nlohmann::json row;
    row["schema"] = kMetricsSchema;
    row["iter"] = it;
    row["lr"] = nn::lr_schedule(it, cfg.optimizer.lr, cfg.optimizer.milestones,
                            cfg.optimizer.gamma);
    row["loss_loc"] = loss.loc;
    row["loss_reg"] = loss.reg;
    row["loss_total"] = loss.total;
    metrics += row.dump() + "\n";
    report.final_loss = loss;

    if (it % cfg.train.checkpoint_interval == 0 || it == cfg.train.iterations) {
      save(it, detail::checkpoint_name(it));
      flush();
    }
  }
  if (cfg.train.bn_refresh_passes > 0) bn_refresh(cfg, det, bundle.samples);
  report.final_checkpoint = save(cfg.train.iterations, "ckpt_final.bin");
  flush();
  return report;
}

// Inference + decode over a bundle: detections come back per image, sorted by
// descending score and mapped to original pixel coordinates.
inline std::vector<std::vector<Detection>> run_inference(
    const RunConfig& cfg, nn::ToyDetector& det, const DatasetBundle& bundle) {
  const int size = cfg.data.image_size;
  std::vector<std::vector<Detection>> out;
  out.reserve(bundle.samples.size());
  for (const auto& raw : bundle.samples) {
    const double orig_w = static_cast<double>(raw.image.dim(2));
    const double orig_h = static_cast<double>(raw.image.dim(1));
    TensorT<float> img = resize_bilinear(raw.image, size, size);
    if (cfg.data.normalize) img = normalize(img, kImagenetMean, kImagenetStd);

    TensorT<float> x({1, 3, size, size});
    std::copy_n(img.data(), img.numel(), x.data());
    nn::ToyDetector::Cache cache;
    const auto fwd = det.forward(x, false, cache);

    auto dets = decode(detail::sample_plane(fwd.heatmap, 0),
                       detail::sample_plane(fwd.distances, 0), cfg.decode.topk,
                       cfg.decode.score_thresh, size, size);
    const double sx = orig_w / size, sy = orig_h / size;
    for (auto& d : dets) {
      d.box.x_min *= sx;
      d.box.x_max *= sx;
      d.box.y_min *= sy;
      d.box.y_max *= sy;
    }
    out.push_back(std::move(dets));
  }
  return out;
}

inline EvalResult evaluate_detector(const RunConfig& cfg, nn::ToyDetector& det,
                                    const DatasetBundle& bundle) {
  return eval_map(run_inference(cfg, det, bundle), bundle.eval_gts);
}

}  // namespace afdet
