// mnx: train / infer / eval / params / bench / selftest / synth.
// Exit codes: 0 ok, 1 failure, 2 bad usage.
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mnx/mnx.hpp"

namespace fs = std::filesystem;
using namespace mnx;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string sidecar(const std::string& weights) { return weights + ".json"; }

// Config from --config when given, else the sidecar written next to the weights.
ModelConfig config_for(const std::string& weights, const std::string& config) {
  if (!config.empty()) return load_config(config);
  const std::string side = sidecar(weights);
  if (!fs::exists(side)) throw UsageError("no config: pass --config or keep '" + side + "' next to the weights");
  return load_config(side);
}

Model load_model(const std::string& weights, const std::string& config) {
  Model m = build_model(config_for(weights, config));
  load_store(m, load_weights(weights));
  return m;
}

Dataset network_dataset(const std::string& dir, const ModelConfig& cfg) {
  Dataset ds = letterbox_dataset(load_dataset(dir), cfg.input_size);
  if (ds.num_classes > cfg.num_classes) {
    throw UsageError("dataset has class ids up to " + std::to_string(ds.num_classes - 1) + " but the model has " +
                     std::to_string(cfg.num_classes) + " classes");
  }
  return ds;
}

std::vector<fs::path> image_inputs(const std::string& p) {
  if (!fs::is_directory(p)) return {fs::path(p)};
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(p)) {
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw UsageError("no .ppm images in '" + p + "'");
  return files;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MambaNeXt-YOLO detector engine"};
  app.require_subcommand(1);

  std::string config, data, out, weights, image, draw, csv, ckpt;
  int epochs = 1, batch = 8, warmup = 20, iters = 100, images = 200, classes = 8, size = 160;
  std::int64_t max_steps = 0;
  double lr = 1e-2;
  float conf = 0.25f, iou_thr = 0.65f;
  std::uint64_t seed = 0;
  bool quick = false, inject = false;

  auto* train_cmd = app.add_subcommand("train", "train on an annotated image directory");
  train_cmd->add_option("--config", config, "model config JSON")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--data", data, "dataset directory (annotations.json + PPM images)")->required();
  train_cmd->add_option("--epochs", epochs, "epochs")->check(CLI::PositiveNumber);
  train_cmd->add_option("--out", out, "output weights (.mnxw); config is written to <out>.json")->required();
  train_cmd->add_option("--batch", batch, "batch size")->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr", lr, "initial learning rate");
  train_cmd->add_option("--max-steps", max_steps, "stop after this many steps (0 = all epochs)");
  train_cmd->add_option("--log", csv, "per-epoch loss CSV");
  train_cmd->add_option("--checkpoints", ckpt, "directory for per-epoch checkpoints");
  train_cmd->add_option("--seed", seed, "shuffle seed");

  auto* infer_cmd = app.add_subcommand("infer", "detect objects in a PPM image or a directory of them");
  infer_cmd->add_option("--weights", weights, "weights (.mnxw)")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--config", config, "config JSON (default <weights>.json)");
  infer_cmd->add_option("--image", image, "P6 PPM image or directory")->required()->check(CLI::ExistingPath);
  infer_cmd->add_option("--conf", conf, "score threshold");
  infer_cmd->add_option("--iou", iou_thr, "NMS IoU threshold");
  infer_cmd->add_option("--out", out, "detections (JSON lines)")->required();
  auto* draw_opt = infer_cmd->add_option("--draw", draw, "write the image with boxes drawn (single image only)");

  auto* eval_cmd = app.add_subcommand("eval", "AP50 and AP50:95 on an annotated directory");
  eval_cmd->add_option("--weights", weights, "weights (.mnxw)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--config", config, "config JSON (default <weights>.json)");
  eval_cmd->add_option("--data", data, "dataset directory")->required();

  auto* params_cmd = app.add_subcommand("params", "parameter and FLOP counts");
  params_cmd->add_option("--config", config, "config JSON (default config when omitted)")->check(CLI::ExistingFile);

  auto* bench_cmd = app.add_subcommand("bench", "batch-1 inference latency");
  bench_cmd->add_option("--config", config, "config JSON")->required()->check(CLI::ExistingFile);
  bench_cmd->add_option("--weights", weights, "weights (random init when omitted)")->check(CLI::ExistingFile);
  bench_cmd->add_option("--warmup", warmup, "warm-up iterations")->check(CLI::NonNegativeNumber);
  bench_cmd->add_option("--iters", iters, "timed iterations")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--csv", csv, "append the CSV row to this file");

  auto* selftest_cmd = app.add_subcommand("selftest", "run the built-in consistency suites");
  selftest_cmd->add_flag("--quick", quick, "skip the full-size 640 px shape check");
  selftest_cmd->add_flag("--inject-scan-fault", inject, "perturb the optimized scan (the scan suite must fail)");

  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic shapes dataset");
  synth_cmd->add_option("--out", out, "output directory")->required();
  synth_cmd->add_option("--images", images, "image count")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--classes", classes, "class count (1-8)")->check(CLI::Range(1, kMaxSynthClasses));
  synth_cmd->add_option("--size", size, "square image side")->check(CLI::Range(32, 4096));
  synth_cmd->add_option("--seed", seed, "generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) {
      const ModelConfig cfg = load_config(config);
      const Dataset ds = network_dataset(data, cfg);
      Model model = build_model(cfg);
      TrainOptions opt;
      opt.epochs = epochs;
      opt.batch_size = batch;
      opt.lr = lr;
      opt.max_steps = max_steps;
      opt.shuffle_seed = seed;
      opt.log_csv = csv;
      opt.checkpoint_dir = ckpt;
      opt.on_step = [](std::int64_t step, double loss) {
        if (step % 10 == 0) std::fprintf(stderr, "step %lld loss %.4f\n", static_cast<long long>(step), loss);
      };
      const auto res = train(model, ds, opt);
      save_weights(to_store(model), out);
      save_config(cfg, sidecar(out));
      for (const auto& e : res.epochs) {
        std::printf("epoch %d  steps %lld  lr %.5f  loss %.4f  cls %.4f  box %.4f\n", e.epoch,
                    static_cast<long long>(e.steps), e.lr, e.loss, e.cls, e.box);
      }
      std::printf("wrote %s (%.1f s)\n", out.c_str(), res.seconds);
      return 0;
    }
    if (*infer_cmd) {
      Model model = load_model(weights, config);
      const auto files = image_inputs(image);
      if (draw_opt->count() && files.size() != 1) throw UsageError("--draw needs a single --image file");
      std::vector<Detection> all;
      NoGradScope no_grad;
      for (std::size_t i = 0; i < files.size(); ++i) {
        const Tensor src = load_image(files[i].string());
        const Letterbox lb = letterbox(src, model.cfg.input_size);
        const auto res = model.forward(reshape(lb.image, {1, 3, model.cfg.input_size, model.cfg.input_size}), false);
        const float S = static_cast<float>(model.cfg.input_size);
        auto dets = nms(decode_head(res.head, conf, S, S, 0, static_cast<std::int64_t>(i)), iou_thr);
        for (auto& d : dets) d.box = clip_box(lb.to_source(d.box), static_cast<float>(src.dim(2)), static_cast<float>(src.dim(1)));
        if (draw_opt->count()) {
          Tensor canvas = src.detach();
          for (const auto& d : dets) draw_box(canvas, d.box, class_color(d.class_id));
          save_image(canvas, draw);
        }
        std::printf("%s: %zu detections\n", files[i].string().c_str(), dets.size());
        all.insert(all.end(), dets.begin(), dets.end());
      }
      save_detections(all, out);
      return 0;
    }
    if (*eval_cmd) {
      Model model = load_model(weights, config);
      const Dataset ds = network_dataset(data, model.cfg);
      const auto r = evaluate(model, ds);
      std::printf("AP50 %.4f\nAP50:95 %.4f\n", r.ap50, r.ap50_95);
      return 0;
    }
    if (*params_cmd) {
      const ModelConfig cfg = config.empty() ? ModelConfig{} : load_config(config);
      const auto c = count_params_flops(cfg);
      std::printf("backbone  %s\nneck      %s\nhead      %s\ntotal     %s  (%lld params, %lld FLOPs at %d px)\n",
                  format_cost(c.backbone).c_str(), format_cost(c.neck).c_str(), format_cost(c.head).c_str(),
                  format_cost(c.total()).c_str(), static_cast<long long>(c.total().params),
                  static_cast<long long>(c.total().flops), cfg.input_size);
      std::printf("published reference: 7.1M params, 22.4G FLOPs (stage widths not published; see README)\n");
      return 0;
    }
    if (*bench_cmd) {
      Model model = weights.empty() ? build_model(load_config(config)) : load_model(weights, config);
      const auto s = bench(model, fs::path(config).stem().string(), warmup, iters);
      std::printf("%s\n%s\n", kBenchCsvHeader, bench_csv_row(s).c_str());
      std::printf("median %.3f ms over %d iterations\n%s\n", s.median_ms, s.iterations, hardware_note().c_str());
      if (!csv.empty()) {
        const bool fresh = !fs::exists(csv);
        std::ofstream f(csv, std::ios::app);
        if (!f) throw std::runtime_error("cannot write '" + csv + "'");
        if (fresh) f << kBenchCsvHeader << '\n';
        f << bench_csv_row(s) << '\n';
      }
      return 0;
    }
    if (*selftest_cmd) {
      SelftestOptions o;
      o.full_model_shapes = !quick;
      o.inject_scan_fault = inject;
      return print_selftest(run_selftest(o), std::cout) ? 0 : 1;
    }
    if (*synth_cmd) {
      save_dataset(synth_dataset(images, classes, size, seed), out);
      std::printf("wrote %d images to %s\n", images, out.c_str());
      return 0;
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
