#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "pg_oracle.hpp"
#include "pqg/rl.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

namespace pqg {
namespace {

using LD = long double;

class MarkerReward : public RewardModel {
 public:
  explicit MarkerReward(std::string marker) : marker_(std::move(marker)) {}
  RewardBreakdown score(const Tokens& q, const GroundedConversation&, std::size_t) const override {
    RewardBreakdown r;
    r.informativeness = std::find(q.begin(), q.end(), marker_) != q.end() ? 1.0 : 0.0;
    r.blended = r.informativeness;
    return r;
  }

 private:
  std::string marker_;
};

// Reward depending on the question length only.
class LengthReward : public RewardModel {
 public:
  RewardBreakdown score(const Tokens& q, const GroundedConversation&, std::size_t) const override {
    RewardBreakdown r;
    r.blended = 1.0 / (1.0 + static_cast<double>(q.size()));
    return r;
  }
};

GeneratorConfig gen_config(int e, int h, double dropout) {
  GeneratorConfig c;
  c.embed_dim = e;
  c.hidden = h;
  c.dropout = dropout;
  c.init_seed = 6;
  return c;
}

TEST(SelfCriticalLoss, Arithmetic) {
  Graph<double> g;
  DecodeResult<double> d;
  d.total_logprob = -3.0;
  d.logprob = g.scalar(-3.0);
  EXPECT_NEAR(self_critical_loss(d, 0.7, 0.5).scalar(), 0.6, 1e-12);
  EXPECT_EQ(self_critical_loss(d, 0.5, 0.5).scalar(), 0.0);
  d.total_logprob = -std::numeric_limits<double>::infinity();
  EXPECT_THROW(self_critical_loss(d, 0.7, 0.5), std::runtime_error);
  DecodeResult<double> untracked;
  EXPECT_THROW(self_critical_loss(untracked, 0.7, 0.5), std::invalid_argument);
}

TEST(CombinedLoss, MixesWithLambda2) {
  Graph<double> g;
  EXPECT_NEAR(combined_loss(g.scalar(1.0), g.scalar(2.0), 0.98).scalar(), 1.02, 1e-12);
  EXPECT_EQ(combined_loss(g.scalar(1.0), g.scalar(2.0), 0.0).scalar(), 2.0);
  EXPECT_EQ(combined_loss(g.scalar(1.0), g.scalar(2.0), 1.0).scalar(), 1.0);
  EXPECT_THROW(combined_loss(g.scalar(1.0), g.scalar(2.0), 1.01), std::invalid_argument);
}

TEST(SelfCriticalLoss, ZeroAdvantageGivesZeroLossAndGradient) {
  auto convs = testing::toy_conversations(2, 3, 2, 2);
  Generator<double> gen(build_vocabulary(convs, VocabOptions{1, 50, false}), gen_config(4, 3, 0.0));
  gen.output_bias().value()(Vocabulary::kEos, 0) = -30.0;
  gen.output_bias().value()(20, 0) = 30.0;  // sampling and greedy agree almost surely
  std::mt19937_64 rng(1);
  LengthReward rm;
  gen.params().zero_grad();
  Graph<double> g;
  const auto ctx = gen.context(g, gen.encode_conversation(g, convs[0].student(), 1), 1);
  auto sampled = gen.decode(g, ctx, DecodeMode::sampled, 4, &rng);
  DecodeResult<double> greedy;
  {
    Graph<double>::NoGrad guard(g);
    greedy = gen.decode(g, ctx, DecodeMode::greedy, 4);
    EXPECT_FALSE(greedy.logprob.has_value());
  }
  ASSERT_EQ(sampled.ids, greedy.ids);
  Expr<double> loss =
      self_critical_loss(sampled, rm.score(sampled.tokens, convs[0], 1).blended, rm.score(greedy.tokens, convs[0], 1).blended);
  EXPECT_EQ(loss.scalar(), 0.0);
  g.backward(loss);
  EXPECT_EQ(gen.params().grad_norm(), 0.0);
}

TEST(CombinedLoss, GradientsMatchFiniteDifferences) {
  auto convs = testing::toy_conversations(2, 14, 3, 2);
  auto students = testing::student_view(convs);
  Generator<LD> gen(build_vocabulary(convs, VocabOptions{1, 50, false}), gen_config(3, 2, 0.0));
  auto examples = all_examples(students);
  // Fix the sampled sequences once; rewards are constants.
  std::vector<Ids> samples;
  std::vector<bool> ended;
  std::mt19937_64 rng(3);
  for (const auto& ex : examples) {
    Graph<LD> g(false);
    auto res = gen.decode(g, gen.context(g, gen.encode_conversation(g, *ex.conversation, ex.turn), ex.turn),
                          DecodeMode::sampled, 4, &rng);
    samples.push_back(res.ids);
    ended.push_back(res.ended);
  }
  auto loss = [&](Graph<LD>& g) {
    std::vector<Expr<LD>> terms;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const auto& ex = examples[i];
      auto ctx = gen.context(g, gen.encode_conversation(g, *ex.conversation, ex.turn), ex.turn);
      DecodeResult<LD> d;
      d.logprob = gen.sequence_logprob(g, ctx, samples[i], ended[i]);
      d.total_logprob = static_cast<double>(d.logprob->scalar());
      terms.push_back(self_critical_loss(d, 0.25 * static_cast<double>(i % 4), 0.4));
    }
    Expr<LD> rl = (LD(1) / static_cast<LD>(terms.size())) * sum(terms);
    return combined_loss(rl, nll_loss<LD>(g, gen, examples).loss, 0.7);
  };
  auto rep = testing::check_gradients<LD>(gen.params(), loss, 150, 5);
  EXPECT_LT(rep.max_rel_error, 1e-6) << rep.worst;
  EXPECT_GT(rep.nonzero, 60);
}

TEST(PolicyGradient, MonteCarloMatchesEnumeration) {
  auto cmp = testing::compare_policy_gradients(20000, 4);
  EXPECT_NEAR(cmp.total_probability, 1.0, 1e-9);
  EXPECT_GT(cmp.sequences, 300u);
  EXPECT_GT(cmp.max_abs_exact, 1e-3);
  // Monte-Carlo error at 2e4 samples; the acceptance run uses 1e5 and 1e-3.
  EXPECT_LT(cmp.max_abs_diff, 3e-3);
}

TEST(PolicyGradient, SelfCriticalBaselineReducesGradientVariance) {
  testing::PgToy toy;
  const double b = toy.greedy_baseline();
  ASSERT_GE(b, 0.3);
  auto norms = [&](double baseline) {
    std::vector<double> out;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      std::mt19937_64 rng(seed);
      toy.gen.params().zero_grad();
      Graph<double> g;
      auto res = toy.gen.decode(g, toy.gen.encode_context(g, toy.topic, toy.history), DecodeMode::sampled,
                                toy.max_len, &rng);
      g.backward(self_critical_loss(res, toy.reward(res.ids, res.ended), baseline));
      out.push_back(toy.gen.params().grad_norm());
    }
    return out;
  };
  auto variance = [](const std::vector<double>& v) {
    double m = 0, s = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
  };
  EXPECT_LT(variance(norms(b)), variance(norms(0.0)));
}

struct RlData {
  std::vector<GroundedConversation> grounded = testing::toy_conversations(6, 12, 3, 2);
  std::vector<Conversation> students = testing::student_view(grounded);
  Vocabulary vocab = build_vocabulary(grounded, VocabOptions{1, 50, false});
};

TEST(Finetune, LambdaTwoZeroFollowsNllTrajectoryBitwise) {
  RlData d;
  Generator<double> a(d.vocab, gen_config(8, 8, 0.3));
  Generator<double> b(d.vocab, gen_config(8, 8, 0.3));
  NllTrainConfig nc;
  nc.batch_conversations = 2;
  nc.lr = 3e-3;
  nc.seed = 9;
  NllTrainer<double> nll(a, nc);
  nll.run_epoch(d.students, {});

  RLConfig rc;
  rc.lambda2 = 0.0;
  rc.batch_conversations = 2;
  rc.lr = 3e-3;
  rc.seed = 9;
  rc.max_len = 5;
  LengthReward rm;
  RLTrainer<double> rl(b, rm, rc);
  rl.run_epoch(d.grounded, {});
  EXPECT_EQ(store_to_json(a.params()), store_to_json(b.params()));
}

TEST(Finetune, CriticParametersAreUntouched) {
  RlData d;
  CriticConfig cc;
  cc.teacher.embed_dim = 4;
  cc.teacher.hidden = 3;
  cc.teacher.char_dim = 2;
  cc.teacher.char_filters = 3;
  Critic<double> critic(build_vocabulary(d.grounded, VocabOptions{1, 1000, true}), cc);
  const auto before = store_to_json(critic.params());
  BlendedReward rm(critic.answerer(), critic, 0.5);
  Generator<double> gen(d.vocab, gen_config(6, 5, 0.1));
  RLConfig rc;
  rc.epochs = 2;
  rc.max_len = 6;
  rc.lr = 1e-2;
  RLTrainer<double> rl(gen, rm, rc);
  const auto gen_before = store_to_json(gen.params());
  rl.fit(d.grounded, d.grounded);
  EXPECT_EQ(store_to_json(critic.params()), before);
  EXPECT_NE(store_to_json(gen.params()), gen_before);
}

TEST(Finetune, TracesSatisfyLossIdentities) {
  RlData d;
  Generator<double> gen(d.vocab, gen_config(6, 5, 0.0));
  RLConfig rc;
  rc.lambda2 = 0.9;
  rc.batch_conversations = 3;
  rc.max_len = 6;
  LengthReward rm;
  RLTrainer<double> rl(gen, rm, rc);
  rl.keep_traces(true);
  const auto path = std::filesystem::temp_directory_path() / "pqg_test_rl_trace.jsonl";
  std::filesystem::remove(path);
  rl.set_trace_log(path);
  rl.run_epoch(d.grounded, {});
  std::map<int, std::vector<const RLStepTrace*>> by_step;
  for (const auto& t : rl.traces()) by_step[t.step].push_back(&t);
  EXPECT_EQ(rl.traces().size(), count_turns(d.grounded));
  for (const auto& [step, ts] : by_step) {
    double mean_rl = 0.0;
    for (const auto* t : ts) {
      EXPECT_EQ(t->advantage, t->sampled_reward - t->greedy_reward);
      mean_rl += t->loss_rl / static_cast<double>(ts.size());
    }
    EXPECT_NEAR(ts.front()->loss, 0.9 * mean_rl + 0.1 * ts.front()->loss_nll, 1e-12);
  }
  std::ifstream in(path);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    for (const char* k : {"sampled", "sampled_reward", "greedy", "greedy_reward", "advantage", "loss_rl", "loss_nll", "loss"}) {
      EXPECT_TRUE(j.contains(k)) << k;
    }
    ++lines;
  }
  EXPECT_EQ(lines, rl.traces().size());
}

TEST(Finetune, ScriptedMarkerRewardIsLearned) {
  RlData d;
  Generator<double> gen(d.vocab, gen_config(8, 8, 0.0));
  ASSERT_TRUE(d.vocab.contains("album"));
  MarkerReward rm("album");
  RLConfig rc;
  rc.lambda2 = 1.0;
  rc.lr = 2e-2;
  rc.epochs = 25;
  rc.max_len = 5;
  rc.batch_conversations = 2;
  RLTrainer<double> rl(gen, rm, rc);
  const double before = greedy_reward(gen, rm, d.grounded, rc.max_len).reward;
  rl.fit(d.grounded, d.grounded);
  const double after = greedy_reward(gen, rm, d.grounded, rc.max_len).reward;
  EXPECT_LT(before, 0.5);
  EXPECT_GE(after, 0.95);
}

TEST(Finetune, ReturnsBestDevCheckpoint) {
  RlData d;
  Generator<double> gen(d.vocab, gen_config(6, 5, 0.0));
  RLConfig rc;
  rc.epochs = 4;
  rc.lr = 1e-2;
  rc.max_len = 5;
  MarkerReward rm("band");
  RLTrainer<double> rl(gen, rm, rc);
  Checkpoint best = rl.fit(d.grounded, d.grounded);
  int arg = 0;
  for (std::size_t i = 0; i < rl.curve().size(); ++i) {
    if (rl.curve()[i].dev.reward > rl.curve()[static_cast<std::size_t>(arg)].dev.reward) arg = static_cast<int>(i);
  }
  EXPECT_EQ(best.epoch, arg + 1);
  auto restored = Generator<double>::from_checkpoint(best);
  EXPECT_DOUBLE_EQ(greedy_reward(*restored, rm, d.grounded, rc.max_len).reward, rl.curve()[static_cast<std::size_t>(arg)].dev.reward);
}

TEST(RLConfig, RejectsOutOfRangeLambdas) {
  RlData d;
  Generator<double> gen(d.vocab, gen_config(4, 3, 0.0));
  LengthReward rm;
  RLConfig rc;
  rc.lambda1 = 1.2;
  EXPECT_THROW(RLTrainer<double>(gen, rm, rc), std::invalid_argument);
  rc.lambda1 = 0.5;
  rc.lambda2 = -0.5;
  EXPECT_THROW(RLTrainer<double>(gen, rm, rc), std::invalid_argument);
  EXPECT_EQ(RLConfig::from_json(RLConfig{}.to_json()).to_json(), RLConfig{}.to_json());
}

}  // namespace
}  // namespace pqg
