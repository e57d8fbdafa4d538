#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>

#include "diffkd/all.hpp"

using namespace diffkd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("diffkd_harness_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ExperimentConfig tiny_config(const fs::path& dir) {
  ExperimentConfig c;
  c.seed = 3;
  c.data.classes = 10;
  c.data.image_size = 8;
  c.data.train_samples = 300;
  c.data.eval_samples = 100;
  c.data.modes_per_class = 2;
  c.teacher.arch = "resnet8w4";
  c.teacher.epochs = 2;
  c.teacher.checkpoint = (dir / "teacher.pt").string();
  c.student_arch = "resnet8w4";
  c.schedule.epochs = 4;
  c.schedule.batch_size = 64;
  c.schedule.milestones = {2, 3};
  c.diffkd.nfe = 2;
  c.heads = {HeadConfig{HeadTap::feature, true, 8, DistanceKind::mse},
             HeadConfig{HeadTap::logits, false, 0, DistanceKind::kl}};
  c.logging.interval = 1;
  c.logging.metrics = (dir / "metrics.jsonl").string();
  c.logging.checkpoint = (dir / "student.pt").string();
  return c;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename E>
std::string error_message(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const E& e) {
    return e.what();
  }
  return "<no error>";
}

}  // namespace

TEST(Config, RoundTripsThroughToml) {
  auto c = tiny_config("/tmp/x");
  c.optimizer.kind = "adamw";
  c.schedule.kind = "cosine";
  c.diffkd.temperature = 4.0;
  const auto text = to_toml(c);
  const auto back = parse_config(text);
  EXPECT_EQ(to_toml(back), text);
  EXPECT_EQ(back.heads.size(), 2u);
  EXPECT_EQ(back.heads[0].latent_channels, 8);
  EXPECT_EQ(back.heads[1].distance, DistanceKind::kl);
  EXPECT_EQ(back.diffkd.temperature, 4.0);
}

TEST(Config, ShippedConfigsParse) {
  for (const auto& entry : fs::directory_iterator(fs::path(DIFFKD_SOURCE_DIR) / "configs")) {
    if (entry.path().extension() == ".toml") {
      EXPECT_NO_THROW(load_config(entry.path())) << entry.path();
    }
  }
}

TEST(Config, DefaultsMatchTheMethod) {
  const auto c = parse_config("[[heads]]\ntap = \"feature\"\n");
  EXPECT_EQ(c.diffkd.lambda_diff, 1.0);
  EXPECT_EQ(c.diffkd.lambda_ae, 1.0);
  EXPECT_EQ(c.diffkd.lambda_kd, 1.0);
  EXPECT_EQ(c.diffkd.total_timesteps, 1000);
  EXPECT_EQ(c.diffkd.initial_timestep, 500);
  EXPECT_EQ(c.diffkd.nfe, 5);
  EXPECT_EQ(c.logging.interval, 50);
  EXPECT_EQ(c.heads[0].distance, DistanceKind::mse);
}

TEST(Config, RejectsBadDocuments) {
  EXPECT_NE(error_message<ConfigError>([] { parse_config("[[heads]]\ntap=\"feature\"\n[data]\nbogus = 1\n"); })
                .find("bogus"),
            std::string::npos);
  EXPECT_THROW(parse_config("[nonsense]\n"), ConfigError);
  EXPECT_THROW(parse_config("[[heads]]\ntap=\"feature\"\n[schedule]\nepochs = \"ten\"\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = 1\nseed = 2\n[[heads]]\ntap=\"feature\"\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = 1\n"), ConfigError);  // lambda_kd > 0 without heads
  EXPECT_THROW(parse_config("[[heads]]\ntap = \"logits\"\nuse_autoencoder = true\nlatent_channels = 4\n"),
               ConfigError);
  EXPECT_NE(error_message<ConfigError>([] { parse_config("strategy = \"B2\"\n[[heads]]\ntap=\"feature\"\n"); })
                .find("not executable"),
            std::string::npos);
  EXPECT_THROW(load_config("/nonexistent/dir/cfg.toml"), IoError);
}

TEST(Data, SyntheticClassMeansMatchPrototypes) {
  DataConfig cfg;
  cfg.modes_per_class = 1;
  cfg.distractor = 0.0;
  cfg.signal = 2.0;
  cfg.train_samples = 5000;
  auto set = make_synthetic(cfg);
  EXPECT_EQ(set.train.size(), 5000);
  EXPECT_EQ(set.eval.size(), 2000);
  EXPECT_EQ(set.train.images.sizes(), (std::vector<int64_t>{5000, 3, 16, 16}));
  // Oracle: the class-conditional mean is signal * prototype; noise std 1 over 500
  // samples leaves a standard error of about 0.045 per pixel.
  for (int64_t k = 0; k < cfg.classes; ++k) {
    auto mask = set.train.labels.eq(k);
    EXPECT_EQ(mask.sum().item<int64_t>(), 500);
    auto mean = set.train.images.index({mask}).mean(0);
    auto expected = cfg.signal * set.prototypes[k][0];
    auto err = (mean - expected).abs();
    EXPECT_LT(err.mean().item<double>(), 0.06) << "class " << k;
    EXPECT_LT(err.max().item<double>(), 0.25) << "class " << k;
  }
}

TEST(Data, SameSeedGivesIdenticalFirstBatch) {
  DataConfig cfg;
  cfg.train_samples = 400;
  auto a = load_dataset(cfg);
  auto b = load_dataset(cfg);
  DataStream sa(a.train, 32, true, 2, 11), sb(b.train, 32, true, 2, 11), sc(a.train, 32, true, 2, 12);
  auto ba = sa.epoch(0).front(), bb = sb.epoch(0).front();
  EXPECT_TRUE(torch::equal(ba.images, bb.images));
  EXPECT_TRUE(torch::equal(ba.labels, bb.labels));
  EXPECT_FALSE(torch::equal(ba.images, sc.epoch(0).front().images));
  EXPECT_FALSE(torch::equal(ba.images, sa.epoch(1).front().images));
  EXPECT_EQ(sa.batches_per_epoch(), 13);
}

TEST(Data, CropAndFlipPreservesShape) {
  DataConfig cfg;
  cfg.train_samples = 64;
  auto d = load_dataset(cfg);
  DataStream s(d.train, 64, true, 4, 0);
  EXPECT_EQ(s.epoch(0).front().images.sizes(), d.train.images.sizes());
}

TEST(Data, CifarBinarySubsetIsBalanced) {
  auto dir = scratch("cifar");
  auto write = [&](const std::string& name, int64_t records) {
    std::ofstream out(dir / name, std::ios::binary);
    std::vector<char> pixels(3072, 7);
    for (int64_t i = 0; i < records; ++i) {
      out.put(static_cast<char>(i % 10));
      out.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
    }
  };
  for (int b = 1; b <= 5; ++b) write("data_batch_" + std::to_string(b) + ".bin", 40);
  write("test_batch.bin", 30);
  DataConfig cfg;
  cfg.dataset = DatasetKind::cifar10;
  cfg.data_dir = dir.string();
  cfg.subset_size = 50;
  auto d = load_dataset(cfg);
  EXPECT_EQ(d.train.size(), 50);
  EXPECT_EQ(d.eval.size(), 30);
  EXPECT_EQ(d.train.images.sizes(), (std::vector<int64_t>{50, 3, 32, 32}));
  EXPECT_TRUE(torch::equal(torch::bincount(d.train.labels), torch::full({10}, 5, torch::kLong)));
  cfg.subset_size = 55;
  EXPECT_THROW(load_dataset(cfg), ConfigError);
}

TEST(Data, MissingCifarDirectoryHintsAtDownload) {
  DataConfig cfg;
  cfg.dataset = DatasetKind::cifar10;
  cfg.data_dir = "/nonexistent/cifar";
  const auto msg = error_message<IoError>([&] { load_dataset(cfg); });
  EXPECT_NE(msg.find("/nonexistent/cifar"), std::string::npos);
  EXPECT_NE(msg.find("cifar-10-binary"), std::string::npos);
}

TEST(Schedule, StepDecayAndCosine) {
  OptimizerConfig opt;
  ScheduleConfig s;
  s.epochs = 20;
  EXPECT_DOUBLE_EQ(learning_rate_at(opt, s, 0, 20), 0.05);
  EXPECT_NEAR(learning_rate_at(opt, s, 10, 20), 0.005, 1e-15);
  EXPECT_NEAR(learning_rate_at(opt, s, 19, 20), 0.0005, 1e-15);
  s.kind = "cosine";
  EXPECT_DOUBLE_EQ(learning_rate_at(opt, s, 0, 20), 0.05);
  EXPECT_NEAR(learning_rate_at(opt, s, 10, 20), 0.025, 1e-15);
}

class TrainingRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(scratch("train"));
    auto cfg = tiny_config(*dir_);
    result_ = new TrainResult(train(cfg));
  }
  static void TearDownTestSuite() {
    delete result_;
    delete dir_;
  }
  static fs::path* dir_;
  static TrainResult* result_;
};

fs::path* TrainingRun::dir_ = nullptr;
TrainResult* TrainingRun::result_ = nullptr;

TEST_F(TrainingRun, TeacherWeightsNeverChange) {
  EXPECT_EQ(result_->teacher_hash_before, result_->teacher_hash_after);
  auto teacher = load_model(tiny_config(*dir_).teacher.checkpoint, "resnet8w4");
  EXPECT_EQ(weights_hash(*teacher), result_->teacher_hash_before);
}

TEST_F(TrainingRun, LoggedTotalEqualsWeightedSum) {
  const auto cfg = tiny_config(*dir_);
  auto records = read_metrics(cfg.logging.metrics);
  int64_t checked = 0, last_step = 0;
  for (const auto& r : records) {
    EXPECT_GE(r.step, last_step);
    last_step = r.step;
    if (!r.losses) continue;
    const double expect = r.losses->weighted_sum(cfg.diffkd);
    EXPECT_LE(std::abs(r.losses->total - expect), 1e-6 * std::abs(expect));
    EXPECT_TRUE(r.gamma_stats.has_value());
    ++checked;
  }
  EXPECT_EQ(checked, 4 * 5);  // 300 samples / 64 per batch, 4 epochs, every step logged
}

TEST_F(TrainingRun, CheckpointHoldsEveryComponent) {
  const auto cfg = tiny_config(*dir_);
  auto header = peek_checkpoint(cfg.logging.checkpoint);
  EXPECT_EQ(header.format_version, kCheckpointFormat);
  EXPECT_EQ(header.role, "student");
  EXPECT_EQ(header.epoch, 3);
  EXPECT_EQ(parse_config(header.config).seed, cfg.seed);
  auto ar = open_checkpoint(cfg.logging.checkpoint);
  torch::serialize::InputArchive sub;
  for (const char* key : {"model", "diffkd", "optimizer"}) EXPECT_TRUE(ar.try_read(key, sub)) << key;
  torch::Tensor rng;
  EXPECT_TRUE(ar.try_read("rng_state", rng));
  auto loaded = load_run(cfg.logging.checkpoint);
  EXPECT_EQ(weights_hash(*loaded.run.diffkd), weights_hash(*load_run(cfg.logging.checkpoint).run.diffkd));
  EXPECT_EQ(loaded.run.diffkd->size(), 2u);
}

TEST_F(TrainingRun, ResumeContinuesTheSameCurve) {
  auto dir = scratch("resume");
  auto cfg = tiny_config(*dir_);
  cfg.logging.metrics = (dir / "metrics.jsonl").string();
  cfg.logging.checkpoint = (dir / "student.pt").string();
  TrainOptions first;
  first.stop_after_epochs = 2;
  train(cfg, first);
  EXPECT_EQ(peek_checkpoint(cfg.logging.checkpoint).epoch, 1);
  TrainOptions second;
  second.resume_from = cfg.logging.checkpoint;
  auto resumed = train(cfg, second);

  auto full = read_metrics(tiny_config(*dir_).logging.metrics);
  auto pieced = read_metrics(cfg.logging.metrics);
  ASSERT_EQ(full.size(), pieced.size());
  for (size_t i = 0; i < full.size(); ++i) {
    EXPECT_EQ(full[i].step, pieced[i].step);
    if (full[i].losses) {
      ASSERT_TRUE(pieced[i].losses.has_value());
      EXPECT_NEAR(pieced[i].losses->total, full[i].losses->total, 1e-5 * std::abs(full[i].losses->total))
          << "step " << full[i].step;
    }
  }
  EXPECT_NEAR(resumed.eval.top1, result_->eval.top1, 1e-9);
}

TEST_F(TrainingRun, ZeroWeightsReduceToPlainTraining) {
  auto dir = scratch("identity");
  auto with_heads = tiny_config(*dir_);
  with_heads.diffkd.lambda_diff = with_heads.diffkd.lambda_ae = with_heads.diffkd.lambda_kd = 0;
  with_heads.logging.metrics = (dir / "a.jsonl").string();
  with_heads.logging.checkpoint = (dir / "a.pt").string();
  auto plain = with_heads;
  plain.heads.clear();
  plain.logging.metrics = (dir / "b.jsonl").string();
  plain.logging.checkpoint = (dir / "b.pt").string();
  auto ra = train(with_heads);
  auto rb = train(plain);
  EXPECT_EQ(ra.eval.top1, rb.eval.top1);
  EXPECT_EQ(ra.eval.top5, rb.eval.top5);
  EXPECT_EQ(weights_hash(*load_model(with_heads.logging.checkpoint, "")),
            weights_hash(*load_model(plain.logging.checkpoint, "")));
  auto la = read_metrics(with_heads.logging.metrics), lb = read_metrics(plain.logging.metrics);
  ASSERT_EQ(la.size(), lb.size());
  for (size_t i = 0; i < la.size(); ++i) {
    if (la[i].losses) EXPECT_EQ(la[i].losses->task, lb[i].losses->task);
  }
}

TEST_F(TrainingRun, EvaluationIsIdempotentAndContained) {
  const auto cfg = tiny_config(*dir_);
  CheckpointHeader header;
  load_model(cfg.teacher.checkpoint, "", &header);
  auto again = evaluate(cfg.teacher.checkpoint);
  EXPECT_NEAR(again.top1, header.recorded.top1, 0.01);
  EXPECT_GE(again.top5, again.top1);
  auto student = evaluate(cfg.logging.checkpoint);
  EXPECT_EQ(student.top1, result_->eval.top1);
  EXPECT_GE(student.top5, student.top1);
}

TEST_F(TrainingRun, ArchMismatchIsCheckpointError) {
  const auto cfg = tiny_config(*dir_);
  EXPECT_THROW(load_model(cfg.teacher.checkpoint, "resnet14"), CheckpointError);
  EXPECT_THROW(peek_checkpoint(*dir_ / "absent.pt"), CheckpointError);
}

TEST_F(TrainingRun, ConstantPredictorScoresChance) {
  const auto cfg = tiny_config(*dir_);
  ResNet model(parse_arch("resnet8w4"), 10, 3);
  {
    torch::NoGradGuard g;
    model->fc->weight.zero_();
    model->fc->bias.zero_();
    model->fc->bias[3] = 1.0;
  }
  torch::serialize::OutputArchive ar, sub;
  CheckpointHeader h;
  h.role = "teacher";
  h.arch = "resnet8w4";
  h.num_classes = 10;
  h.config = to_toml(cfg);
  write_header(ar, h);
  model->save(sub);
  ar.write("model", sub);
  const auto path = *dir_ / "constant.pt";
  save_archive(ar, path);
  auto ev = evaluate(path);
  EXPECT_DOUBLE_EQ(ev.top1, 10.0);
  EXPECT_GE(ev.top5, ev.top1);
}
