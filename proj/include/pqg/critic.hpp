#pragma once

// Rewards for generated questions.
//
// Informativeness asks the teacher to answer the question and measures how
// much of the predicted answer is new relative to earlier answers. Specificity
// is the probability, under a classifier trained against frequent and
// in-conversation negatives, that the question is the true next question.
// The classifier shares its word embeddings and question encoder with the
// answering network; both live in one parameter store.

#include "pqg/checkpoint.hpp"
#include "pqg/encoder.hpp"
#include "pqg/log.hpp"
#include "pqg/optim.hpp"
#include "pqg/teacher.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pqg {

// ---------------------------------------------------------------------------
// Informativeness

// Fraction of positions of `a` whose token occurs anywhere in `a_prev`.
inline double unigram_precision(const Tokens& a, const Tokens& a_prev) {
  if (a.empty()) throw std::invalid_argument("unigram_precision: empty answer");
  const std::set<std::string> prev(a_prev.begin(), a_prev.end());
  std::size_t hits = 0;
  for (const auto& t : a) hits += prev.count(t);
  return static_cast<double>(hits) / static_cast<double>(a.size());
}

using OverlapFn = std::function<double(const Tokens&, const Tokens&)>;

// 1 - max over earlier answers of overlap(a, a_k); 1 with no earlier answers.
// An empty answer reveals nothing and scores 0.
inline double answer_informativeness(const Tokens& a, std::span<const QAPair> history,
                                     const OverlapFn& overlap = unigram_precision) {
  if (a.empty()) return 0.0;
  double worst = 0.0;
  for (const auto& qa : history) worst = std::max(worst, overlap(a, qa.answer));
  return 1.0 - worst;
}

struct Informativeness {
  double value = 0.0;
  AnswerSpan answer;
};

inline Informativeness question_informativeness(const Tokens& q, const TeacherContext& ctx, const Answerer& answerer,
                                                const OverlapFn& overlap = unigram_precision) {
  Informativeness out;
  out.answer = answerer.answer(q, ctx);
  out.value = out.answer.abstained ? 0.0 : answer_informativeness(out.answer.tokens, ctx.history, overlap);
  return out;
}

// ---------------------------------------------------------------------------
// Specificity and the blended reward

class SpecificityModel {
 public:
  virtual ~SpecificityModel() = default;
  virtual double specificity(const Tokens& q, const TopicSpec& topic, std::span<const QAPair> history) const = 0;
};

struct RewardBreakdown {
  double informativeness = 0.0;
  double specificity = 0.0;
  double blended = 0.0;
  AnswerSpan predicted_answer;

  nlohmann::json to_json() const {
    return {{"informativeness", informativeness},
            {"specificity", specificity},
            {"blended", blended},
            {"predicted_answer", predicted_answer.to_json()}};
  }
};

inline void check_unit_interval(double x, const char* name) {
  if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0, 1]");
}

inline double blend(double informativeness, double specificity, double lambda1) {
  check_unit_interval(lambda1, "lambda1");
  return lambda1 * informativeness + (1.0 - lambda1) * specificity;
}

inline RewardBreakdown reward(const Tokens& q, const TeacherContext& ctx, const Answerer& answerer,
                              const SpecificityModel& spec, double lambda1) {
  check_unit_interval(lambda1, "lambda1");
  RewardBreakdown r;
  auto info = question_informativeness(q, ctx, answerer);
  r.informativeness = info.value;
  r.predicted_answer = std::move(info.answer);
  r.specificity = spec.specificity(q, *ctx.topic, ctx.history);
  r.blended = blend(r.informativeness, r.specificity, lambda1);
  return r;
}

// One line of the reward audit log.
inline nlohmann::json audit_record(const std::string& id, std::size_t turn, const Tokens& q, const RewardBreakdown& r) {
  return {{"conversation", id},
          {"turn", turn},
          {"question", join(q)},
          {"predicted_answer", r.predicted_answer.text},
          {"I", r.informativeness},
          {"S", r.specificity},
          {"R", r.blended}};
}

// Scores questions in a conversation context.
class RewardModel {
 public:
  virtual ~RewardModel() = default;
  virtual RewardBreakdown score(const Tokens& q, const GroundedConversation& conv, std::size_t turn) const = 0;
};

class BlendedReward : public RewardModel {
 public:
  BlendedReward(const Answerer& answerer, const SpecificityModel& spec, double lambda1)
      : answerer_(&answerer), spec_(&spec), lambda1_(lambda1) {
    check_unit_interval(lambda1, "lambda1");
  }
  // An empty question is neither answerable nor specific and scores 0.
  RewardBreakdown score(const Tokens& q, const GroundedConversation& conv, std::size_t turn) const override {
    if (q.empty()) {
      RewardBreakdown r;
      r.predicted_answer.abstained = true;
      return r;
    }
    return reward(q, TeacherContext::of(conv, turn), *answerer_, *spec_, lambda1_);
  }

 private:
  const Answerer* answerer_;
  const SpecificityModel* spec_;
  double lambda1_;
};

// ---------------------------------------------------------------------------
// Specificity classifier

// Topic + history are encoded as in the generator; the question states attend
// bidirectionally against [topic summary, conversation states], the result is
// max-pooled over question positions and scored by an affine layer.
template <typename T>
class SpecificityHead {
 public:
  SpecificityHead() = default;
  template <typename Rng>
  SpecificityHead(ParameterStore<T>& store, const std::string& name, Parameter<T>& embedding,
                  const BidafTeacher<T>& teacher, int layers, Rng& rng)
      : teacher_(&teacher) {
    const Index d = teacher.question_dim();
    encoder_ = HierarchicalEncoder<T>(store, name + ".enc", embedding,
                                      EncoderDims{embedding.cols(), d / 2, layers}, rng);
    sim_ = TrilinearSimilarity<T>(store, name + ".biattn", d, rng);
    score_ = Linear<T>(store, name + ".score", 4 * d, 1, rng);
  }

  Linear<T>& scorer() { return score_; }

  Expr<T> logit(Graph<T>& g, const Tokens& q, const TopicSpec& topic, std::span<const QAPair> history,
                const Vocabulary& vocab, const Dropout* drop = nullptr) const {
    auto enc = encoder_.encode(g, topic, history, history.size(), vocab, drop);
    std::vector<Expr<T>> mem{enc.topic_summary};
    mem.insert(mem.end(), enc.conv_states.begin(), enc.conv_states.end());
    Expr<T> qs = teacher_->encode_question(g, q, drop);
    Expr<T> G = bidirectional_attention(g, sim_, qs, concat_cols(mem));
    return score_(g, apply_dropout(max_over_cols(G), drop));
  }

 private:
  const BidafTeacher<T>* teacher_ = nullptr;
  HierarchicalEncoder<T> encoder_;
  TrilinearSimilarity<T> sim_;
  Linear<T> score_;
};

struct CriticConfig {
  TeacherConfig teacher;
  int spec_layers = 1;
  std::uint64_t init_seed = 1;

  nlohmann::json to_json() const {
    return {{"teacher", teacher.to_json()}, {"spec_layers", spec_layers}, {"init_seed", init_seed}};
  }
  static CriticConfig from_json(const nlohmann::json& j) {
    CriticConfig c;
    c.teacher = TeacherConfig::from_json(j.at("teacher"));
    c.spec_layers = j.at("spec_layers").get<int>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    return c;
  }
};

// Teacher + specificity classifier over one parameter store.
template <typename T = double>
class Critic : public SpecificityModel {
 public:
  Critic(Vocabulary vocab, CriticConfig cfg) : vocab_(std::move(vocab)), cfg_(cfg) {
    std::mt19937_64 rng(cfg_.init_seed);
    emb_ = &params_.add_uniform("emb", static_cast<Index>(vocab_.size()), cfg_.teacher.embed_dim, 0.1, rng);
    teacher_ = std::make_unique<BidafTeacher<T>>(params_, "qa", vocab_, *emb_, cfg_.teacher, rng);
    head_ = std::make_unique<SpecificityHead<T>>(params_, "spec", *emb_, *teacher_, cfg_.spec_layers, rng);
    answerer_ = std::make_unique<NeuralAnswerer<T>>(*teacher_);
  }
  Critic(const Critic&) = delete;
  Critic& operator=(const Critic&) = delete;

  const Vocabulary& vocab() const { return vocab_; }
  const CriticConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }
  const BidafTeacher<T>& teacher() const { return *teacher_; }
  SpecificityHead<T>& head() { return *head_; }
  const Answerer& answerer() const { return *answerer_; }

  Expr<T> specificity_logit(Graph<T>& g, const Tokens& q, const TopicSpec& topic, std::span<const QAPair> history,
                            const Dropout* drop = nullptr) const {
    if (q.empty()) return g.scalar(T(-1e30));  // an empty question is never the true one
    return head_->logit(g, q, topic, history, vocab_, drop);
  }

  double specificity(const Tokens& q, const TopicSpec& topic, std::span<const QAPair> history) const override {
    Graph<T> g(false);
    const T z = specificity_logit(g, q, topic, history).scalar();
    return static_cast<double>(T(1) / (T(1) + std::exp(-z)));
  }

  Checkpoint to_checkpoint() const {
    Checkpoint c;
    c.kind = "critic";
    c.config = cfg_.to_json();
    c.vocab = vocab_;
    c.params = store_to_json(params_);
    return c;
  }

  static std::unique_ptr<Critic> from_checkpoint(const Checkpoint& c) {
    if (c.kind != "critic") throw std::runtime_error("checkpoint is not a critic (kind=" + c.kind + ")");
    auto critic = std::make_unique<Critic>(c.vocab, CriticConfig::from_json(c.config));
    store_from_json(critic->params_, c.params);
    return critic;
  }

 private:
  Vocabulary vocab_;
  CriticConfig cfg_;
  ParameterStore<T> params_;
  Parameter<T>* emb_ = nullptr;
  std::unique_ptr<BidafTeacher<T>> teacher_;
  std::unique_ptr<SpecificityHead<T>> head_;
  std::unique_ptr<NeuralAnswerer<T>> answerer_;
};

// ---------------------------------------------------------------------------
// Joint training

struct SpecExample {
  const GroundedConversation* conversation = nullptr;
  std::size_t turn = 0;
  Tokens question;
  bool positive = false;
};

// The true question of every turn plus one frequent and one in-conversation
// negative where available.
template <typename Rng>
std::vector<SpecExample> make_spec_examples(std::span<const GroundedConversation* const> convs,
                                            const std::vector<Tokens>& pool, Rng& rng) {
  if (pool.empty()) throw std::invalid_argument("specificity training needs a non-empty frequent-question pool");
  std::vector<SpecExample> out;
  for (const GroundedConversation* c : convs) {
    for (std::size_t j = 0; j < c->size(); ++j) {
      out.push_back({c, j, c->turns()[j].question, true});
      auto neg = sample_negatives(*c, j, pool, rng);
      if (neg.frequent) out.push_back({c, j, *neg.frequent, false});
      if (neg.in_conversation) out.push_back({c, j, *neg.in_conversation, false});
    }
  }
  return out;
}

struct BinaryScores {
  long tp = 0, fp = 0, fn = 0, tn = 0;
  double precision() const { return tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0; }
  double recall() const { return tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0; }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
  void add(bool predicted, bool actual) {
    if (predicted && actual) ++tp;
    else if (predicted) ++fp;
    else if (actual) ++fn;
    else ++tn;
  }
};

struct CriticTrainConfig {
  int epochs = 10;
  int batch_conversations = 8;
  double lr = 1e-3;
  double clip = 5.0;
  int patience = 3;
  double anneal_factor = 0.5;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const {
    return {{"epochs", epochs}, {"batch_conversations", batch_conversations}, {"lr", lr}, {"clip", clip},
            {"patience", patience}, {"anneal_factor", anneal_factor}, {"seed", seed}};
  }
  static CriticTrainConfig from_json(const nlohmann::json& j) {
    CriticTrainConfig c;
    c.epochs = j.at("epochs").get<int>();
    c.batch_conversations = j.at("batch_conversations").get<int>();
    c.lr = j.at("lr").get<double>();
    c.clip = j.at("clip").get<double>();
    c.patience = j.at("patience").get<int>();
    c.anneal_factor = j.at("anneal_factor").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  }
};

struct CriticEval {
  double spec_f1 = 0.0;
  double spec_accuracy = 0.0;
  double qa_f1 = 0.0;
  double bce = 0.0;
  double qa_loss = 0.0;  // mean span cross-entropy
  long spec_examples = 0;
  double selection() const { return 0.5 * (spec_f1 + qa_f1); }
  double loss() const { return bce + qa_loss; }
  nlohmann::json to_json() const {
    return {{"spec_f1", spec_f1}, {"spec_accuracy", spec_accuracy}, {"qa_f1", qa_f1}, {"bce", bce},
            {"qa_loss", qa_loss}, {"spec_examples", spec_examples}};
  }
};

struct CriticEpochRecord {
  int epoch = 0;
  double train_qa = 0.0;
  double train_bce = 0.0;
  double lr = 0.0;
  CriticEval dev;
  nlohmann::json to_json() const {
    return {{"epoch", epoch}, {"train_qa", train_qa}, {"train_bce", train_bce}, {"lr", lr}, {"dev", dev.to_json()}};
  }
};

template <typename T>
CriticEval evaluate_critic(const Critic<T>& critic, const std::vector<SpecExample>& spec,
                           const std::vector<GroundedConversation>& qa_convs, bool with_qa = true) {
  CriticEval ev;
  BinaryScores s;
  double bce = 0.0;
  for (const auto& ex : spec) {
    Graph<T> g(false);
    const auto history = std::span<const QAPair>(ex.conversation->turns().data(), ex.turn);
    const T z = critic.specificity_logit(g, ex.question, ex.conversation->topic(), history).scalar();
    bce += static_cast<double>(bce_with_logit(g.scalar(z), ex.positive ? T(1) : T(0)).scalar());
    s.add(z > T(0), ex.positive);
  }
  ev.spec_examples = static_cast<long>(spec.size());
  if (!spec.empty()) {
    ev.bce = bce / static_cast<double>(spec.size());
    ev.spec_accuracy = static_cast<double>(s.tp + s.tn) / static_cast<double>(spec.size());
  }
  ev.spec_f1 = s.f1();
  if (with_qa) {
    double f1 = 0.0, loss = 0.0;
    long n = 0;
    for (const auto& c : qa_convs) {
      for (std::size_t j = 0; j < c.size(); ++j) {
        f1 += answer_f1(critic.teacher().answer(c.turns()[j].question, TeacherContext::of(c, j)), c.turns()[j]);
        Graph<T> g(false);
        const QAExample ex{&c, j};
        loss += static_cast<double>(qa_loss(g, critic.teacher(), std::span<const QAExample>(&ex, 1)).scalar());
        ++n;
      }
    }
    ev.qa_f1 = n ? f1 / static_cast<double>(n) : 0.0;
    ev.qa_loss = n ? loss / static_cast<double>(n) : 0.0;
  }
  return ev;
}

// Joint training of the answerer (span cross-entropy) and the specificity
// classifier (binary cross-entropy); the batch loss is the sum of the two
// batch means. Negatives are resampled every epoch; dev negatives are drawn
// once with a fixed seed. The learning rate anneals on the dev loss; the kept
// checkpoint is the one with the best mean of specificity F1 and QA F1.
template <typename T = double>
class CriticTrainer {
 public:
  CriticTrainer(Critic<T>& critic, CriticTrainConfig cfg)
      : critic_(critic), cfg_(cfg), opt_(AdamConfig{cfg.lr}), sched_(cfg.patience, cfg.anneal_factor), rng_(cfg.seed) {}

  const std::vector<CriticEpochRecord>& curve() const { return curve_; }
  Adam<T>& optimizer() { return opt_; }
  const std::optional<Checkpoint>& best() const { return best_; }
  const CriticEval& best_eval() const { return best_eval_; }
  void set_metrics_log(std::filesystem::path p) { metrics_log_ = std::move(p); }

  // Optimizes one batch; returns {qa loss, bce loss} before the update.
  std::pair<double, double> step(std::span<const QAExample> qa, std::span<const SpecExample> spec) {
    critic_.params().zero_grad();
    Dropout drop{critic_.config().teacher.dropout, &rng_};
    Graph<T> g;
    std::vector<Expr<T>> parts;
    double qa_value = 0.0, bce_value = 0.0;
    if (!qa.empty()) {
      Expr<T> l = qa_loss(g, critic_.teacher(), qa, &drop);
      qa_value = static_cast<double>(l.scalar());
      parts.push_back(l);
    }
    if (!spec.empty()) {
      std::vector<Expr<T>> terms;
      for (const auto& ex : spec) {
        const auto history = std::span<const QAPair>(ex.conversation->turns().data(), ex.turn);
        Expr<T> z = critic_.specificity_logit(g, ex.question, ex.conversation->topic(), history, &drop);
        terms.push_back(bce_with_logit(z, ex.positive ? T(1) : T(0)));
      }
      Expr<T> l = (T(1) / static_cast<T>(terms.size())) * sum(terms);
      bce_value = static_cast<double>(l.scalar());
      parts.push_back(l);
    }
    if (parts.empty()) return {0.0, 0.0};
    Expr<T> loss = sum(parts);
    if (!std::isfinite(static_cast<double>(loss.scalar()))) throw std::runtime_error("train_critic: non-finite loss");
    g.backward(loss);
    if (cfg_.clip > 0) critic_.params().clip_grad_norm(static_cast<T>(cfg_.clip));
    opt_.step(critic_.params());
    return {qa_value, bce_value};
  }

  CriticEpochRecord run_epoch(const std::vector<GroundedConversation>& train, const std::vector<Tokens>& pool,
                              const std::vector<SpecExample>& dev_spec, const std::vector<GroundedConversation>& dev) {
    if (train.empty()) throw std::invalid_argument("train_critic: empty training set");
    if (pool.empty()) throw std::invalid_argument("train_critic: empty negative pool");
    CriticEpochRecord rec;
    rec.epoch = static_cast<int>(curve_.size()) + 1;
    rec.lr = opt_.lr();
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng_);
    double qa_sum = 0.0, bce_sum = 0.0;
    int batches = 0;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(cfg_.batch_conversations)) {
      std::vector<const GroundedConversation*> convs;
      std::vector<QAExample> qa;
      for (std::size_t k = i; k < std::min(order.size(), i + static_cast<std::size_t>(cfg_.batch_conversations)); ++k) {
        const GroundedConversation* c = &train[order[k]];
        convs.push_back(c);
        for (std::size_t j = 0; j < c->size(); ++j) qa.push_back({c, j});
      }
      auto spec = make_spec_examples(std::span<const GroundedConversation* const>(convs), pool, rng_);
      auto [q, b] = step(qa, spec);
      qa_sum += q;
      bce_sum += b;
      ++batches;
    }
    rec.train_qa = qa_sum / batches;
    rec.train_bce = bce_sum / batches;
    rec.dev = evaluate_critic(critic_, dev_spec, dev);
    if (!best_ || rec.dev.selection() > best_eval_.selection()) {
      best_eval_ = rec.dev;
      best_ = critic_.to_checkpoint();
      best_->epoch = rec.epoch;
      best_->extra["dev"] = rec.dev.to_json();
    }
    sched_.observe(rec.dev.loss(), opt_);
    curve_.push_back(rec);
    if (metrics_log_) {
      std::ofstream out(*metrics_log_, std::ios::app);
      out << rec.to_json().dump() << '\n';
    }
    return rec;
  }

  Checkpoint fit(const std::vector<GroundedConversation>& train, const std::vector<GroundedConversation>& dev,
                 const std::function<void(const CriticEpochRecord&)>& on_epoch = {}) {
    const auto pool = mine_frequent_questions(train);
    if (pool.empty()) throw std::invalid_argument("train_critic: no question occurs twice in the training set");
    std::mt19937_64 dev_rng(cfg_.seed + 7919);
    std::vector<const GroundedConversation*> dev_ptrs;
    for (const auto& c : dev) dev_ptrs.push_back(&c);
    const auto dev_spec = make_spec_examples(std::span<const GroundedConversation* const>(dev_ptrs), pool, dev_rng);
    for (int e = 0; e < cfg_.epochs; ++e) {
      auto rec = run_epoch(train, pool, dev_spec, dev);
      log::info("critic epoch ", rec.epoch, " qa ", rec.train_qa, " bce ", rec.train_bce, " dev spec_f1 ",
                rec.dev.spec_f1, " qa_f1 ", rec.dev.qa_f1);
      if (on_epoch) on_epoch(rec);
    }
    if (!best_) throw std::runtime_error("train_critic: no epochs were run");
    return *best_;
  }

 private:
  Critic<T>& critic_;
  CriticTrainConfig cfg_;
  Adam<T> opt_;
  PlateauScheduler sched_;
  std::mt19937_64 rng_;
  std::optional<std::filesystem::path> metrics_log_;
  std::vector<CriticEpochRecord> curve_;
  std::optional<Checkpoint> best_;
  CriticEval best_eval_;
};

}  // namespace pqg
