#include "fixtures.hpp"
#include "pqg/eval.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

using namespace pqg;

namespace {

// Longest common subsequence by plain recursion; fine for short inputs.
std::size_t lcs_brute(const Tokens& a, std::size_t i, const Tokens& b, std::size_t j) {
  if (i == a.size() || j == b.size()) return 0;
  if (a[i] == b[j]) return 1 + lcs_brute(a, i + 1, b, j + 1);
  return std::max(lcs_brute(a, i + 1, b, j), lcs_brute(a, i, b, j + 1));
}

Tokens random_tokens(std::mt19937_64& rng, int max_len) {
  const int len = static_cast<int>(rng() % static_cast<std::uint64_t>(max_len + 1));
  Tokens t;
  for (int i = 0; i < len; ++i) t.push_back(std::string(1, static_cast<char>('a' + rng() % 4)));
  return t;
}

// I is the question length mod 3 over 2, S is 1 when the question mentions the
// topic entity.
class ScriptedReward : public RewardModel {
 public:
  RewardBreakdown score(const Tokens& q, const GroundedConversation& c, std::size_t) const override {
    if (q.empty()) throw std::runtime_error("empty question");
    RewardBreakdown r;
    r.informativeness = static_cast<double>(q.size() % 3) / 2.0;
    const auto first = tokenize(c.student().topic().entity_title).front();
    r.specificity = std::find(q.begin(), q.end(), first) != q.end() ? 1.0 : 0.0;
    r.predicted_answer.text = "x";
    return r;
  }
};

class RepeatFirst : public QuestionModel {
 public:
  std::string name() const override { return "repeat"; }
  Tokens question(const Conversation& conv, std::size_t) const override { return conv.turns().front().question; }
};

class Silent : public QuestionModel {
 public:
  std::string name() const override { return "silent"; }
  Tokens question(const Conversation&, std::size_t) const override { return {}; }
};

}  // namespace

TEST(Rouge, WorkedExample) {
  EXPECT_DOUBLE_EQ(rouge_l_f1({"a", "b", "c", "d"}, {"a", "c", "d", "e"}), 0.75);
  EXPECT_DOUBLE_EQ(rouge_l_f1({"a"}, {"a"}), 1.0);
  EXPECT_DOUBLE_EQ(rouge_l_f1({"a"}, {"b"}), 0.0);
  EXPECT_DOUBLE_EQ(rouge_l_f1({}, {"b"}), 0.0);
  EXPECT_DOUBLE_EQ(rouge_l_f1({"b"}, {}), 0.0);
}

TEST(Rouge, MatchesBruteForce) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 500; ++t) {
    Tokens a = random_tokens(rng, 7), b = random_tokens(rng, 7);
    const double lcs = static_cast<double>(lcs_brute(a, 0, b, 0));
    const double want = (a.empty() || b.empty() || lcs == 0)
                            ? 0.0
                            : 2.0 * lcs / static_cast<double>(a.size() + b.size());
    ASSERT_NEAR(rouge_l_f1(a, b), want, 1e-12);
    ASSERT_NEAR(rouge_l_f1(a, b), rouge_l_f1(b, a), 1e-12);
  }
}

TEST(Repetition, HandCounted) {
  std::vector<Tokens> qs{{"who", "is", "she"}, {"who", "is", "he"}, {"what", "now"}};
  std::vector<std::vector<Tokens>> hist{{}, {{"who", "is", "she"}}, {{"who", "is", "she"}, {"who", "is", "he"}}};
  // unigrams: 8 total; repeated: who, is (second) = 2
  EXPECT_DOUBLE_EQ(ngram_repetition(qs, hist, 1), 2.0 / 8.0);
  // bigrams: 2 + 2 + 1 = 5; repeated: "who is" = 1
  EXPECT_DOUBLE_EQ(ngram_repetition(qs, hist, 2), 1.0 / 5.0);
  EXPECT_DOUBLE_EQ(ngram_repetition(qs, hist, 3), 0.0);
  EXPECT_DOUBLE_EQ(ngram_repetition(qs, hist, 4), 0.0);
  EXPECT_THROW(ngram_repetition(qs, hist, 0), std::invalid_argument);
  hist.pop_back();
  EXPECT_THROW(ngram_repetition(qs, hist, 1), std::invalid_argument);
}

TEST(Repetition, MatchesStringOracle) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 100; ++t) {
    std::vector<Tokens> qs;
    std::vector<std::vector<Tokens>> hist;
    for (int c = 0; c < 3; ++c) {
      std::vector<Tokens> prev;
      for (int j = 0; j < 4; ++j) {
        Tokens q = random_tokens(rng, 6);
        qs.push_back(q);
        hist.push_back(prev);
        prev.push_back(q);
      }
    }
    for (int n = 1; n <= 4; ++n) {
      long total = 0, rep = 0;
      for (std::size_t i = 0; i < qs.size(); ++i) {
        for (std::size_t k = 0; k + static_cast<std::size_t>(n) <= qs[i].size(); ++k) {
          std::string gram;
          for (int m = 0; m < n; ++m) gram += qs[i][k + static_cast<std::size_t>(m)] + "|";
          bool found = false;
          for (const auto& h : hist[i]) {
            for (std::size_t s = 0; s + static_cast<std::size_t>(n) <= h.size() && !found; ++s) {
              std::string other;
              for (int m = 0; m < n; ++m) other += h[s + static_cast<std::size_t>(m)] + "|";
              found = other == gram;
            }
          }
          ++total;
          rep += found;
        }
      }
      const double want = total ? static_cast<double>(rep) / static_cast<double>(total) : 0.0;
      ASSERT_NEAR(ngram_repetition(qs, hist, n), want, 1e-12);
    }
  }
}

TEST(Evaluate, ScriptedSystems) {
  auto convs = pqg::testing::toy_conversations(6, 3, 4, 2);
  ReferenceQuestions ref;
  RepeatFirst rep;
  Silent silent;
  ScriptedReward rm;
  auto report = evaluate_corpus<double>({&ref, &rep, &silent}, rm, convs);
  ASSERT_EQ(report.systems.size(), 3u);

  long turns = 0;
  double info = 0.0, spec = 0.0;
  for (const auto& c : convs) {
    for (std::size_t j = 0; j < c.size(); ++j) {
      auto r = rm.score(c.turns()[j].question, c, j);
      info += r.informativeness;
      spec += r.specificity;
      ++turns;
    }
  }
  const auto& r = report.system("reference");
  EXPECT_EQ(r.turns, turns);
  EXPECT_EQ(r.failed, 0);
  EXPECT_NEAR(r.info, info / static_cast<double>(turns), 1e-12);
  EXPECT_NEAR(r.spec, spec / static_cast<double>(turns), 1e-12);
  EXPECT_FALSE(r.rouge_l.has_value());
  EXPECT_FALSE(r.pplx.has_value());

  // Repeating the first question: every n-gram after turn 0 is a repeat.
  const auto& p = report.system("repeat");
  ASSERT_TRUE(p.rouge_l.has_value());
  long tok_total = 0, tok_rep = 0;
  double rouge = 0.0;
  for (const auto& c : convs) {
    const auto& q0 = c.turns()[0].question;
    for (std::size_t j = 0; j < c.size(); ++j) {
      tok_total += static_cast<long>(q0.size());
      if (j > 0) tok_rep += static_cast<long>(q0.size());
      rouge += rouge_l_f1(q0, c.turns()[j].question);
    }
  }
  EXPECT_NEAR(p.repetition.at(1), static_cast<double>(tok_rep) / static_cast<double>(tok_total), 1e-12);
  EXPECT_NEAR(*p.rouge_l, rouge / static_cast<double>(turns), 1e-12);
  EXPECT_EQ(p.repetition.size(), static_cast<std::size_t>(kMaxRepetitionN));

  const auto& s = report.system("silent");
  EXPECT_EQ(s.turns, 0);
  EXPECT_EQ(s.failed, turns);
  EXPECT_EQ(report.records.size(), static_cast<std::size_t>(2 * turns));
}

TEST(Evaluate, OutputsAreDeterministic) {
  auto convs = pqg::testing::toy_conversations(4, 7, 3, 2);
  auto vocab = build_vocabulary(convs, VocabOptions{1, 5000, false});
  GeneratorConfig gc;
  gc.embed_dim = 6;
  gc.hidden = 5;
  gc.dropout = 0.0;
  Generator<double> gen(vocab, gc);
  GeneratorQuestions<double> greedy(gen, "greedy", DecodeMode::greedy, 8);
  GeneratorQuestions<double> sampled(gen, "sampled", DecodeMode::sampled, 8, 4);
  ReferenceQuestions ref;
  ScriptedReward rm;
  std::map<std::string, const Generator<double>*> scorers{{"greedy", &gen}};

  auto a = evaluate_corpus<double>({&greedy, &sampled, &ref}, rm, convs, scorers);
  auto b = evaluate_corpus<double>({&sampled, &greedy, &ref}, rm, convs, scorers);
  EXPECT_EQ(a.system("sampled").to_json(), b.system("sampled").to_json());
  ASSERT_TRUE(a.system("greedy").pplx.has_value());
  EXPECT_NEAR(*a.system("greedy").pplx, std::exp(corpus_nll(gen, convs).per_token()), 1e-9);
  EXPECT_FALSE(a.system("sampled").pplx.has_value());

  const auto dir = std::filesystem::temp_directory_path() / "pqg_eval_test";
  std::filesystem::remove_all(dir);
  write_report(a, dir / "one");
  write_report(evaluate_corpus<double>({&greedy, &sampled, &ref}, rm, convs, scorers), dir / "two");
  for (const char* f : {"report.json", "report.md", "repetition.csv"}) {
    std::ifstream x(dir / "one" / f), y(dir / "two" / f);
    std::string sx((std::istreambuf_iterator<char>(x)), {}), sy((std::istreambuf_iterator<char>(y)), {});
    EXPECT_FALSE(sx.empty()) << f;
    EXPECT_EQ(sx, sy) << f;
  }
  std::ifstream csv(dir / "one" / "repetition.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "n,system,proportion");
  auto j = nlohmann::json::parse(std::ifstream(dir / "one" / "report.json"));
  EXPECT_EQ(j["systems"].size(), 3u);
  EXPECT_TRUE(j["turns"][0].contains("predicted_answer"));
  std::filesystem::remove_all(dir);
}

namespace {

class Abstainer : public Answerer {
 public:
  AnswerSpan answer(const Tokens&, const TeacherContext& ctx) const override {
    const long L = static_cast<long>(ctx.length());
    return make_answer(ctx, L, L);
  }
};

// Specificity from question length, so it varies across questions.
class LengthSpecificity : public SpecificityModel {
 public:
  double specificity(const Tokens& q, const TopicSpec&, std::span<const QAPair>) const override {
    return 1.0 / (1.0 + static_cast<double>(q.size()));
  }
};

class Verbatim : public QuestionModel {
 public:
  std::string name() const override { return "verbatim"; }
  Tokens question(const Conversation& conv, std::size_t turn) const override { return conv.turns().at(turn).question; }
};

}  // namespace

TEST(Evaluate, VerbatimModelMatchesReference) {
  auto convs = pqg::testing::toy_conversations(8, 11, 4, 1);
  LexicalAnswerer answerer;
  LengthSpecificity spec;
  BlendedReward rm(answerer, spec, 0.5);
  ReferenceQuestions ref;
  Verbatim verbatim;
  auto report = evaluate_corpus<double>({&verbatim, &ref}, rm, convs);
  const auto& v = report.system("verbatim");
  const auto& r = report.system("reference");
  EXPECT_EQ(v.info, r.info);
  EXPECT_EQ(v.spec, r.spec);
  EXPECT_GT(r.info, 0.0);
  ASSERT_TRUE(v.rouge_l.has_value());
  EXPECT_DOUBLE_EQ(*v.rouge_l, 1.0);
  EXPECT_EQ(v.repetition, r.repetition);
}

TEST(Evaluate, AbstainingAnswererGivesZeroInformativeness) {
  auto convs = pqg::testing::toy_conversations(8, 12, 4, 1);
  Abstainer answerer;
  LengthSpecificity spec;
  BlendedReward rm(answerer, spec, 0.5);
  ReferenceQuestions ref;
  RepeatFirst rep;
  auto report = evaluate_corpus<double>({&ref, &rep}, rm, convs);
  for (const auto& s : report.systems) {
    EXPECT_EQ(s.info, 0.0) << s.name;
    EXPECT_GT(s.spec, 0.0) << s.name;
  }
  for (const auto& t : report.records) EXPECT_EQ(t.informativeness, 0.0);
}

TEST(Repetition, NonIncreasingWhenQuestionsAreLongEnough) {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 200; ++t) {
    std::vector<Tokens> qs;
    std::vector<std::vector<Tokens>> hist;
    for (int c = 0; c < 4; ++c) {
      std::vector<Tokens> prev;
      for (int j = 0; j < 5; ++j) {
        Tokens q;
        for (int k = 0; k < 6; ++k) q.push_back(std::string(1, static_cast<char>('a' + rng() % 3)));
        qs.push_back(q);
        hist.push_back(prev);
        prev.push_back(q);
      }
    }
    for (int n = 1; n < 6; ++n) ASSERT_GE(ngram_repetition(qs, hist, n), ngram_repetition(qs, hist, n + 1) - 1e-12);
  }
}
