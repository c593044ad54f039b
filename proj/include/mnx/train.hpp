// Training loop (SGD with momentum, cosine decay to lr/100, global gradient
// norm clipped at 10) and batched inference / evaluation helpers.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "mnx/data.hpp"
#include "mnx/loss.hpp"
#include "mnx/metrics.hpp"
#include "mnx/model.hpp"
#include "mnx/weights_io.hpp"

namespace mnx::inline MNX_ABI {

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::int64_t step, const std::string& what)
      : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

struct TrainOptions {
  int epochs = 1;
  std::int64_t max_steps = 0;  // stop early after this many steps; 0 = run all epochs
  int batch_size = 8;
  double lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double clip_norm = 10.0;
  double final_lr_fraction = 0.01;
  std::uint64_t shuffle_seed = 0;
  std::string log_csv;         // per-epoch "epoch,steps,lr,loss,cls,box" when set
  std::string checkpoint_dir;  // epoch_<k>.mnxw after every epoch when set
  std::function<void(std::int64_t step, double loss)> on_step;
};

struct EpochLog {
  int epoch = 0;
  std::int64_t steps = 0;  // cumulative
  double lr = 0.0;         // at the last step of the epoch
  double loss = 0.0, cls = 0.0, box = 0.0;  // means over the epoch's steps
};

struct TrainResult {
  std::vector<double> step_loss;
  std::vector<EpochLog> epochs;
  double seconds = 0.0;
};

inline double cosine_lr(double lr, double final_fraction, std::int64_t step, std::int64_t total) {
  if (total <= 1) return lr;
  const double t = static_cast<double>(step) / static_cast<double>(total - 1);
  const double lo = lr * final_fraction;
  return lo + 0.5 * (lr - lo) * (1.0 + std::cos(std::numbers::pi * t));
}

// Stacks samples[idx] into one [B,3,H,W] batch.
inline Tensor stack_images(const Dataset& ds, const std::vector<std::size_t>& idx) {
  const Shape s = ds.samples.at(idx.front()).image.shape();
  const std::int64_t per = numel(s);
  Tensor out({static_cast<std::int64_t>(idx.size()), s[0], s[1], s[2]});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Tensor& im = ds.samples[idx[b]].image;
    detail::require(im.shape() == s, "stack_images: images differ in size; letterbox the dataset first");
    std::copy(im.data().begin(), im.data().end(), out.ptr() + static_cast<std::int64_t>(b) * per);
  }
  return out;
}

inline std::vector<Tensor*> trainable(Model& m) {
  std::vector<Tensor*> ps;
  m.visit([&](const std::string&, Tensor& t, bool buffer) {
    if (!buffer) ps.push_back(&t);
  });
  return ps;
}

inline TrainResult train(Model& model, const Dataset& data, const TrainOptions& opt) {
  if (data.samples.empty()) throw DatasetError("train: dataset is empty");
  if (opt.batch_size < 1 || opt.epochs < 1) throw ConfigError("train: batch_size and epochs must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  const std::int64_t n = static_cast<std::int64_t>(data.samples.size());
  const std::int64_t per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
  std::int64_t total = per_epoch * opt.epochs;
  if (opt.max_steps > 0) total = std::min(total, opt.max_steps);

  auto params = trainable(model);
  for (Tensor* p : params) p->set_requires_grad(true);
  std::vector<std::vector<double>> velocity(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) velocity[i].assign(static_cast<std::size_t>(params[i]->numel()), 0.0);

  std::ofstream csv;
  if (!opt.log_csv.empty()) {
    csv.open(opt.log_csv, std::ios::trunc);
    if (!csv) throw std::runtime_error("train: cannot write log '" + opt.log_csv + "'");
    csv << "epoch,steps,lr,loss,cls,box\n";
  }
  if (!opt.checkpoint_dir.empty()) std::filesystem::create_directories(opt.checkpoint_dir);

  Rng order_rng(opt.shuffle_seed);
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  TrainResult res;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < opt.epochs && step < total; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);
    EpochLog log;
    log.epoch = epoch + 1;
    std::int64_t epoch_steps = 0;
    for (std::int64_t b0 = 0; b0 < n && step < total; b0 += opt.batch_size) {
      const std::int64_t b1 = std::min(n, b0 + opt.batch_size);
      std::vector<std::size_t> idx(order.begin() + b0, order.begin() + b1);
      Tensor images = stack_images(data, idx);
      std::vector<std::vector<GroundTruthBox>> gts;
      for (std::size_t k : idx) gts.push_back(data.samples[k].boxes);

      Tape tape;
      LossParts lp;
      {
        TapeScope scope(tape);
        auto out = model.forward(images, true);
        const auto targets = build_targets(gts, model.cfg.num_classes, images.dim(2), images.dim(3));
        lp = compute_loss(out.head, targets);
      }
      const double loss = lp.total.item();
      if (!std::isfinite(loss)) throw DivergenceError(step, "loss is " + std::to_string(loss));
      tape.backward(lp.total);

      double sq = 0.0;
      for (Tensor* p : params) {
        for (Real g : p->grad()) sq += static_cast<double>(g) * g;
      }
      const double gnorm = std::sqrt(sq);
      if (!std::isfinite(gnorm)) throw DivergenceError(step, "gradient norm is not finite");
      const double clip = gnorm > opt.clip_norm ? opt.clip_norm / gnorm : 1.0;
      const double lr = cosine_lr(opt.lr, opt.final_lr_fraction, step, total);
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto data_span = params[i]->data();
        auto g = params[i]->grad();
        auto& v = velocity[i];
        for (std::size_t k = 0; k < data_span.size(); ++k) {
          const double gk = clip * g[k] + opt.weight_decay * data_span[k];
          v[k] = opt.momentum * v[k] + gk;
          data_span[k] = static_cast<Real>(data_span[k] - lr * v[k]);
        }
        params[i]->drop_grad();
      }

      res.step_loss.push_back(loss);
      log.loss += loss;
      log.cls += lp.cls;
      log.box += lp.box;
      log.lr = lr;
      ++epoch_steps;
      ++step;
      if (opt.on_step) opt.on_step(step, loss);
    }
    log.steps = step;
    if (epoch_steps > 0) {
      log.loss /= static_cast<double>(epoch_steps);
      log.cls /= static_cast<double>(epoch_steps);
      log.box /= static_cast<double>(epoch_steps);
    }
    res.epochs.push_back(log);
    if (csv) {
      csv << log.epoch << ',' << log.steps << ',' << log.lr << ',' << log.loss << ',' << log.cls << ',' << log.box << '\n';
      csv.flush();
    }
    if (!opt.checkpoint_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03d.mnxw", log.epoch);
      save_weights(to_store(model), (std::filesystem::path(opt.checkpoint_dir) / name).string());
    }
  }
  for (Tensor* p : params) p->set_requires_grad(false);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

struct PredictOptions {
  float conf = 0.25f;
  float iou = 0.65f;
  std::size_t max_per_image = 300;
  int batch_size = 8;
};

// Eval-mode detections in network-input coordinates, NMS applied per image.
inline std::vector<Detection> predict(Model& model, const Dataset& data, const PredictOptions& opt = {}) {
  NoGradScope no_grad;
  std::vector<Detection> all;
  const std::size_t n = data.samples.size();
  for (std::size_t b0 = 0; b0 < n; b0 += static_cast<std::size_t>(opt.batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t k = b0; k < std::min(n, b0 + static_cast<std::size_t>(opt.batch_size)); ++k) idx.push_back(k);
    Tensor images = stack_images(data, idx);
    const auto out = model.forward(images, false);
    const auto W = static_cast<float>(images.dim(3)), H = static_cast<float>(images.dim(2));
    for (std::size_t b = 0; b < idx.size(); ++b) {
      auto dets = nms(decode_head(out.head, opt.conf, W, H, static_cast<std::int64_t>(b), data.samples[idx[b]].id), opt.iou);
      if (dets.size() > opt.max_per_image) dets.resize(opt.max_per_image);
      all.insert(all.end(), dets.begin(), dets.end());
    }
  }
  return all;
}

inline MapResult evaluate(Model& model, const Dataset& data, float conf = 0.001f, float iou = 0.65f) {
  PredictOptions opt;
  opt.conf = conf;
  opt.iou = iou;
  opt.max_per_image = 100;
  return evaluate_map(predict(model, data, opt), data.all_boxes());
}

}  // namespace mnx
