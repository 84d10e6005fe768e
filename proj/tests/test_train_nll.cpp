#include "fixtures.hpp"
#include "pqg/train_nll.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

namespace pqg {
namespace {

GeneratorConfig small_config(double dropout) {
  GeneratorConfig c;
  c.embed_dim = 8;
  c.hidden = 8;
  c.dropout = dropout;
  c.init_seed = 4;
  return c;
}

struct ToyData {
  std::vector<GroundedConversation> grounded = testing::toy_conversations(6, 12, 3, 2);
  std::vector<Conversation> train = testing::student_view(grounded);
  Vocabulary vocab = build_vocabulary(grounded, VocabOptions{1, 50, false});
};

TEST(NllTrainer, ConstantDevMetricHalvesLearningRateOnce) {
  ToyData s;
  Generator<double> gen(s.vocab, small_config(0.0));
  NllTrainConfig cfg;
  cfg.epochs = 5;
  NllTrainer<double> t(gen, cfg);
  std::vector<double> metric{5.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0};
  int calls = 0;
  t.set_dev_metric([&](const Generator<double>&) { return metric[static_cast<std::size_t>(calls++)]; });
  t.fit(s.train, {});
  int annealed = 0;
  for (const auto& r : t.curve()) annealed += r.annealed;
  EXPECT_EQ(annealed, 0);
  EXPECT_DOUBLE_EQ(t.optimizer().lr(), 1e-3);

  // Epoch 2 is the best; epochs 3-6 make the four-epoch plateau.
  t.run_epoch(s.train, {});
  EXPECT_TRUE(t.curve().back().annealed);
  EXPECT_DOUBLE_EQ(t.optimizer().lr(), 5e-4);
  EXPECT_DOUBLE_EQ(t.curve().back().lr, 1e-3);
  t.run_epoch(s.train, {});
  t.run_epoch(s.train, {});
  EXPECT_EQ(t.scheduler().reductions(), 1);
  EXPECT_EQ(t.best_epoch(), 2);
}

TEST(NllTrainer, BestDevCheckpointIsKept) {
  ToyData s;
  Generator<double> gen(s.vocab, small_config(0.0));
  NllTrainConfig cfg;
  cfg.epochs = 3;
  NllTrainer<double> t(gen, cfg);
  std::vector<double> metric{3.0, 1.0, 2.0};
  int calls = 0;
  t.set_dev_metric([&](const Generator<double>&) { return metric[static_cast<std::size_t>(calls++)]; });
  nlohmann::json at_epoch2;
  Checkpoint best = t.fit(s.train, {}, [&](const EpochRecord& r) {
    if (r.epoch == 2) at_epoch2 = store_to_json(gen.params());
  });
  EXPECT_EQ(best.epoch, 2);
  EXPECT_EQ(best.params, at_epoch2);
  EXPECT_NE(store_to_json(gen.params()), at_epoch2);
}

TEST(NllTrainer, ResumedRunMatchesUninterruptedRun) {
  ToyData s;
  Generator<double> gen(s.vocab, small_config(0.3));
  NllTrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_conversations = 2;
  NllTrainer<double> t(gen, cfg);
  t.run_epoch(s.train, s.train);
  t.run_epoch(s.train, s.train);

  const Checkpoint saved = Checkpoint::from_json(nlohmann::json::parse(t.state().to_json().dump()));
  auto gen2 = Generator<double>::from_checkpoint(saved);
  auto t2 = NllTrainer<double>::resume(*gen2, saved);
  EXPECT_EQ(t2.epoch(), 2);

  const auto a = t.run_epoch(s.train, s.train);
  const auto b = t2.run_epoch(s.train, s.train);
  EXPECT_EQ(a.train_nll, b.train_nll);
  EXPECT_EQ(a.dev_pplx, b.dev_pplx);
  EXPECT_EQ(store_to_json(gen.params()), store_to_json(gen2->params()));
}

TEST(NllTrainer, NonFiniteLossAborts) {
  ToyData s;
  Generator<double> gen(s.vocab, small_config(0.0));
  gen.output_bias().value()(5, 0) = std::numeric_limits<double>::quiet_NaN();
  NllTrainer<double> t(gen, NllTrainConfig{});
  try {
    t.run_epoch(s.train, {});
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    EXPECT_NE(std::string(e.what()).find("toy"), std::string::npos);
  }
}

TEST(NllTrainer, WritesOneMetricsLinePerEpoch) {
  ToyData s;
  Generator<double> gen(s.vocab, small_config(0.0));
  NllTrainConfig cfg;
  cfg.epochs = 3;
  NllTrainer<double> t(gen, cfg);
  const auto path = std::filesystem::temp_directory_path() / "pqg_test_metrics.jsonl";
  std::filesystem::remove(path);
  t.set_metrics_log(path);
  t.fit(s.train, s.train);
  std::ifstream in(path);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("epoch").get<int>(), ++n);
    for (const char* k : {"train_nll", "dev_pplx", "lr"}) EXPECT_TRUE(j.contains(k)) << k;
  }
  EXPECT_EQ(n, 3);
}

TEST(NllTrainer, TrainingReducesLoss) {
  ToyData s;
  Generator<double> gen(s.vocab, small_config(0.0));
  NllTrainConfig cfg;
  cfg.epochs = 15;
  cfg.lr = 1e-2;
  cfg.batch_conversations = 2;
  NllTrainer<double> t(gen, cfg);
  t.fit(s.train, s.train);
  EXPECT_LT(t.curve().back().train_nll, 0.75 * t.curve().front().train_nll);
}

}  // namespace
}  // namespace pqg
