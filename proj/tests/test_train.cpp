#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "mnx/bench.hpp"
#include "mnx/train.hpp"
#include "oracles.hpp"

using namespace mnx;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny(int classes) {
  ModelConfig c;
  c.input_size = 64;
  c.width_mult = 0.125;
  c.d_state = 4;
  c.num_classes = classes;
  return c;
}

std::string bytes_of(Model& m) { return serialize_weights(to_store(m)); }

}  // namespace

TEST_CASE("cosine schedule runs from lr to lr/100") {
  CHECK(cosine_lr(1e-2, 0.01, 0, 100) == Catch::Approx(1e-2));
  CHECK(cosine_lr(1e-2, 0.01, 99, 100) == Catch::Approx(1e-4));
  double prev = 1.0;
  for (int s = 0; s < 100; ++s) {
    const double lr = cosine_lr(1e-2, 0.01, s, 100);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("lr = 0 leaves every parameter unchanged") {
  const Dataset ds = synth_dataset(4, 2, 64, 1);
  Model m = build_model(tiny(2));
  std::vector<std::pair<std::string, Tensor>> before;
  m.visit([&](const std::string& n, Tensor& t, bool buffer) {
    if (!buffer) before.emplace_back(n, t.detach());
  });
  TrainOptions opt;
  opt.lr = 0.0;
  opt.batch_size = 2;
  train(m, ds, opt);
  std::size_t i = 0;
  m.visit([&](const std::string& n, Tensor& t, bool buffer) {
    if (buffer) return;
    INFO(n);
    CHECK(oracle::bitwise_equal(t, before[i++].second));
  });
}

TEST_CASE("single-image overfit: loss falls at least tenfold in 200 steps") {
  const Dataset ds = synth_dataset(1, 2, 64, 3);
  Model m = build_model(tiny(2));
  TrainOptions opt;
  opt.epochs = 200;
  opt.batch_size = 1;
  const auto r = train(m, ds, opt);
  REQUIRE(r.step_loss.size() == 200);
  const double first = r.step_loss.front();
  double last = 0.0;
  for (std::size_t k = 190; k < 200; ++k) last += r.step_loss[k] / 10.0;
  INFO("first " << first << " last10 " << last);
  CHECK(last * 10.0 <= first);
}

TEST_CASE("training is bit-reproducible and writes logs and checkpoints") {
  const Dataset ds = synth_dataset(6, 3, 64, 5);
  const fs::path dir = fs::temp_directory_path() / "mnx_test_train";
  fs::remove_all(dir);
  TrainOptions opt;
  opt.epochs = 2;
  opt.batch_size = 4;
  opt.shuffle_seed = 9;
  opt.log_csv = (dir / "log.csv").string();
  opt.checkpoint_dir = (dir / "ckpt").string();
  fs::create_directories(dir);
  Model a = build_model(tiny(3));
  const auto ra = train(a, ds, opt);
  opt.log_csv.clear();
  opt.checkpoint_dir.clear();
  Model b = build_model(tiny(3));
  const auto rb = train(b, ds, opt);
  CHECK(bytes_of(a) == bytes_of(b));
  CHECK(ra.step_loss == rb.step_loss);
  CHECK(ra.step_loss.size() == 4);

  std::ifstream csv(dir / "log.csv");
  std::string header, row;
  std::getline(csv, header);
  CHECK(header == "epoch,steps,lr,loss,cls,box");
  int rows = 0;
  while (std::getline(csv, row)) ++rows;
  CHECK(rows == 2);
  CHECK(fs::exists(dir / "ckpt" / "epoch_001.mnxw"));
  std::ifstream ck(dir / "ckpt" / "epoch_002.mnxw", std::ios::binary);
  const std::string saved((std::istreambuf_iterator<char>(ck)), std::istreambuf_iterator<char>());
  CHECK(saved == bytes_of(a));
  fs::remove_all(dir);
}

TEST_CASE("a NaN loss aborts with the step index") {
  const Dataset ds = synth_dataset(4, 2, 64, 1);
  Model m = build_model(tiny(2));
  TrainOptions opt;
  opt.batch_size = 2;
  opt.epochs = 3;
  opt.on_step = [&](std::int64_t step, double) {
    if (step == 3) m.head.levels[0].cls_out.bias[0] = std::numeric_limits<float>::quiet_NaN();
  };
  try {
    train(m, ds, opt);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(e.step() == 3);
  }
  CHECK_THROWS_AS(train(m, Dataset{}, opt), DatasetError);
}

TEST_CASE("predict and evaluate run end to end") {
  const Dataset ds = synth_dataset(3, 2, 64, 2);
  Model m = build_model(tiny(2));
  PredictOptions po;
  po.conf = 0.001f;
  po.max_per_image = 5;
  const auto dets = predict(m, ds, po);
  CHECK(dets.size() <= 15);
  for (const auto& d : dets) {
    CHECK(d.box.x1 >= 0);
    CHECK(d.box.x2 <= 64);
  }
  const auto r = evaluate(m, ds);
  CHECK(r.ap50 >= 0.0);
  CHECK(r.ap50 <= 1.0);
}

TEST_CASE("bench statistics and CSV") {
  const auto one = summarize_latencies({4.0}, "c", 64);
  CHECK(one.iterations == 1);
  CHECK(one.fps == 250.0);
  CHECK(one.p95_ms == 4.0);
  const auto s = summarize_latencies({5, 1, 3, 2, 4}, "c", 64);
  CHECK(s.median_ms == 3.0);
  CHECK(s.mean_ms == 3.0);
  CHECK(s.p95_ms == 5.0);
  CHECK(std::string(kBenchCsvHeader) == "config,input,mean_ms,p95_ms,fps");
  CHECK(bench_csv_row(one) == "c,64,4.000,4.000,250.000");

  Model m = build_model(tiny(2));
  const auto b = bench(m, "tiny", 1, 2);
  CHECK(b.iterations == 2);
  CHECK(b.fps > 0.0);
}

TEST_CASE("FPS does not increase with input size") {
  double prev = std::numeric_limits<double>::infinity();
  for (int size : {160, 320, 640}) {
    ModelConfig c = tiny(2);
    c.input_size = size;
    Model m = build_model(c);
    const auto s = bench(m, "tiny", 1, 3);
    CHECK(s.fps <= prev);
    prev = s.fps;
  }
}
