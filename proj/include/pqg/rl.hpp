#pragma once

// Self-critical policy-gradient finetuning of the question generator.
//
// Each training question is replaced by a sample from the current policy; the
// greedy decode of the same context, scored by the same reward model, is the
// baseline. The policy-gradient loss is mixed with the usual NLL loss.

#include "pqg/critic.hpp"
#include "pqg/log.hpp"
#include "pqg/optim.hpp"
#include "pqg/qgen.hpp"
#include "pqg/train_nll.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pqg {

// -(sample_reward - greedy_reward) * log P(sample). Rewards are constants.
template <typename T>
Expr<T> self_critical_loss(const DecodeResult<T>& sampled, double sample_reward, double greedy_reward) {
  if (!sampled.logprob) throw std::invalid_argument("self_critical_loss: sample carries no differentiable log-probability");
  if (!std::isfinite(sampled.total_logprob)) throw std::runtime_error("self_critical_loss: non-finite log-probability");
  if (!std::isfinite(sample_reward) || !std::isfinite(greedy_reward)) {
    throw std::runtime_error("self_critical_loss: non-finite reward");
  }
  const T advantage = static_cast<T>(sample_reward) - static_cast<T>(greedy_reward);
  return (-advantage) * *sampled.logprob;
}

template <typename T>
Expr<T> combined_loss(Expr<T> rl_loss, Expr<T> nll, double lambda2) {
  check_unit_interval(lambda2, "lambda2");
  return static_cast<T>(lambda2) * rl_loss + static_cast<T>(1.0 - lambda2) * nll;
}

struct RLConfig {
  double lambda1 = 0.5;
  double lambda2 = 0.98;
  double lr = 1e-4;
  int epochs = 10;
  int max_len = 20;
  int batch_conversations = 8;
  double clip = 5.0;
  std::uint64_t seed = 1;

  void validate() const {
    check_unit_interval(lambda1, "lambda1");
    check_unit_interval(lambda2, "lambda2");
    if (max_len < 1) throw std::invalid_argument("max_len must be at least 1");
    if (batch_conversations < 1) throw std::invalid_argument("batch_conversations must be positive");
  }

  nlohmann::json to_json() const {
    return {{"lambda1", lambda1}, {"lambda2", lambda2}, {"lr", lr}, {"epochs", epochs}, {"max_len", max_len},
            {"batch_conversations", batch_conversations}, {"clip", clip}, {"seed", seed}};
  }
  static RLConfig from_json(const nlohmann::json& j) {
    RLConfig c;
    c.lambda1 = j.at("lambda1").get<double>();
    c.lambda2 = j.at("lambda2").get<double>();
    c.lr = j.at("lr").get<double>();
    c.epochs = j.at("epochs").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.batch_conversations = j.at("batch_conversations").get<int>();
    c.clip = j.at("clip").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  }
};

struct RLStepTrace {
  int step = 0;
  std::string conversation;
  std::size_t turn = 0;
  std::string sampled;
  double sampled_reward = 0.0;
  std::string greedy;
  double greedy_reward = 0.0;
  double advantage = 0.0;
  double loss_rl = 0.0;     // this example's policy-gradient term
  double loss_nll = 0.0;    // batch NLL per pair
  double loss = 0.0;        // batch combined loss

  nlohmann::json to_json() const {
    return {{"step", step},         {"conversation", conversation}, {"turn", turn},
            {"sampled", sampled},   {"sampled_reward", sampled_reward}, {"greedy", greedy},
            {"greedy_reward", greedy_reward}, {"advantage", advantage}, {"loss_rl", loss_rl},
            {"loss_nll", loss_nll}, {"loss", loss}};
  }
};

struct RewardSummary {
  double reward = 0.0;
  double informativeness = 0.0;
  double specificity = 0.0;
  long scored = 0;
  long failed = 0;
  nlohmann::json to_json() const {
    return {{"reward", reward}, {"info", informativeness}, {"spec", specificity}, {"scored", scored}, {"failed", failed}};
  }
};

// Mean reward of greedy decodes over every turn of `convs`.
template <typename T>
RewardSummary greedy_reward(const Generator<T>& gen, const RewardModel& rm, const std::vector<GroundedConversation>& convs,
                            int max_len) {
  RewardSummary s;
  for (const auto& c : convs) {
    Graph<T> g(false);
    auto enc = gen.encode_conversation(g, c.student(), c.size() - 1);
    for (std::size_t j = 0; j < c.size(); ++j) {
      auto q = gen.decode(g, gen.context(g, enc, j), DecodeMode::greedy, max_len);
      try {
        auto r = rm.score(q.tokens, c, j);
        s.reward += r.blended;
        s.informativeness += r.informativeness;
        s.specificity += r.specificity;
        ++s.scored;
      } catch (const std::exception& e) {
        ++s.failed;
        log::warn("reward failed for ", c.id(), " turn ", j, ": ", e.what());
      }
    }
  }
  if (s.scored) {
    s.reward /= static_cast<double>(s.scored);
    s.informativeness /= static_cast<double>(s.scored);
    s.specificity /= static_cast<double>(s.scored);
  }
  return s;
}

struct RLEpochRecord {
  int epoch = 0;
  double train_reward = 0.0;   // mean sampled reward
  double train_advantage = 0.0;
  double train_nll = 0.0;
  long skipped = 0;
  RewardSummary dev;
  nlohmann::json to_json() const {
    return {{"epoch", epoch},         {"train_reward", train_reward}, {"train_advantage", train_advantage},
            {"train_nll", train_nll}, {"skipped", skipped},           {"dev", dev.to_json()}};
  }
};

// The NLL half of every step draws dropout masks and batch order from the
// same engine, in the same order, as NllTrainer with the same seed; decoding
// uses a separate engine and no dropout.
template <typename T = double>
class RLTrainer {
 public:
  RLTrainer(Generator<T>& gen, const RewardModel& rm, RLConfig cfg)
      : gen_(gen), rm_(rm), cfg_(cfg), opt_(AdamConfig{cfg.lr}), rng_(cfg.seed), sample_rng_(cfg.seed ^ 0x9e3779b97f4a7c15ULL) {
    cfg_.validate();
  }

  const RLConfig& config() const { return cfg_; }
  Adam<T>& optimizer() { return opt_; }
  const std::vector<RLEpochRecord>& curve() const { return curve_; }
  const std::vector<RLStepTrace>& traces() const { return traces_; }
  const std::optional<Checkpoint>& best() const { return best_; }
  void set_trace_log(std::filesystem::path p) { trace_log_ = std::move(p); }
  void set_metrics_log(std::filesystem::path p) { metrics_log_ = std::move(p); }
  void keep_traces(bool keep) { keep_traces_ = keep; }

  struct StepResult {
    double loss = 0.0;
    double nll = 0.0;
    double reward = 0.0;
    double advantage = 0.0;
    long scored = 0;
    long skipped = 0;
  };

  // One optimizer step over `batch`, whose conversations index `grounded`
  // through `student` (the student views of `grounded`, same order).
  StepResult step(std::span<const NllExample> batch, const std::vector<Conversation>& student,
                  const std::vector<GroundedConversation>& grounded) {
    gen_.params().zero_grad();
    ++step_;
    StepResult out;
    Dropout drop{gen_.config().dropout, &rng_};
    Graph<T> g;
    NllLoss<T> nll = nll_loss(g, gen_, batch, &drop);
    out.nll = static_cast<double>(nll.loss.scalar());

    std::vector<Expr<T>> terms;
    std::vector<RLStepTrace> traces;
    std::map<const Conversation*, ConversationEncoding<T>> encodings;
    for (const auto& ex : batch) {
      const Conversation* sc = ex.conversation;
      const GroundedConversation& gc = grounded.at(static_cast<std::size_t>(sc - student.data()));
      auto it = encodings.find(sc);
      if (it == encodings.end()) it = encodings.emplace(sc, gen_.encode_conversation(g, *sc, sc->size() - 1)).first;
      const EncodedContext<T> ctx = gen_.context(g, it->second, ex.turn);
      DecodeResult<T> sampled = gen_.decode(g, ctx, DecodeMode::sampled, cfg_.max_len, &sample_rng_);
      DecodeResult<T> greedy;
      {
        typename Graph<T>::NoGrad guard(g);
        greedy = gen_.decode(g, ctx, DecodeMode::greedy, cfg_.max_len);
      }
      RLStepTrace tr;
      tr.step = step_;
      tr.conversation = gc.id();
      tr.turn = ex.turn;
      tr.sampled = join(sampled.tokens);
      tr.greedy = join(greedy.tokens);
      try {
        tr.sampled_reward = rm_.score(sampled.tokens, gc, ex.turn).blended;
        tr.greedy_reward = rm_.score(greedy.tokens, gc, ex.turn).blended;
        Expr<T> l = self_critical_loss(sampled, tr.sampled_reward, tr.greedy_reward);
        tr.advantage = tr.sampled_reward - tr.greedy_reward;
        tr.loss_rl = static_cast<double>(l.scalar());
        terms.push_back(l);
        traces.push_back(std::move(tr));
      } catch (const std::exception& e) {
        ++out.skipped;
        log::warn("skipping ", gc.id(), " turn ", ex.turn, ": ", e.what());
      }
    }

    Expr<T> rl = terms.empty() ? g.scalar(T(0)) : (T(1) / static_cast<T>(terms.size())) * sum(terms);
    Expr<T> loss = combined_loss(rl, nll.loss, cfg_.lambda2);
    out.loss = static_cast<double>(loss.scalar());
    if (!std::isfinite(out.loss)) throw NonFiniteLoss("finetune: non-finite loss at step " + std::to_string(step_));
    g.backward(loss);
    if (cfg_.clip > 0) gen_.params().clip_grad_norm(static_cast<T>(cfg_.clip));
    opt_.step(gen_.params());

    out.scored = static_cast<long>(traces.size());
    for (auto& tr : traces) {
      tr.loss_nll = out.nll;
      tr.loss = out.loss;
      out.reward += tr.sampled_reward;
      out.advantage += tr.advantage;
      emit(tr);
    }
    return out;
  }

  RLEpochRecord run_epoch(const std::vector<GroundedConversation>& train, const std::vector<GroundedConversation>& dev) {
    if (train.empty()) throw std::invalid_argument("finetune: empty training set");
    std::vector<Conversation> student;
    student.reserve(train.size());
    for (const auto& c : train) student.push_back(c.student());
    RLEpochRecord rec;
    rec.epoch = static_cast<int>(curve_.size()) + 1;
    long scored = 0, pairs = 0;
    for (const auto& batch : conversation_batches(student, cfg_.batch_conversations, rng_)) {
      auto r = step(batch, student, train);
      rec.train_reward += r.reward;
      rec.train_advantage += r.advantage;
      rec.train_nll += r.nll * static_cast<double>(batch.size());
      rec.skipped += r.skipped;
      scored += r.scored;
      pairs += static_cast<long>(batch.size());
    }
    if (scored) {
      rec.train_reward /= static_cast<double>(scored);
      rec.train_advantage /= static_cast<double>(scored);
    }
    rec.train_nll /= static_cast<double>(pairs);
    rec.dev = greedy_reward(gen_, rm_, dev.empty() ? train : dev, cfg_.max_len);
    if (!best_ || rec.dev.reward > best_reward_) {
      best_reward_ = rec.dev.reward;
      best_ = gen_.to_checkpoint();
      best_->epoch = rec.epoch;
      best_->extra["rl"] = cfg_.to_json();
      best_->extra["dev_reward"] = rec.dev.to_json();
    }
    curve_.push_back(rec);
    if (metrics_log_) {
      std::ofstream out(*metrics_log_, std::ios::app);
      out << rec.to_json().dump() << '\n';
    }
    return rec;
  }

  Checkpoint fit(const std::vector<GroundedConversation>& train, const std::vector<GroundedConversation>& dev,
                 const std::function<void(const RLEpochRecord&)>& on_epoch = {}) {
    while (static_cast<int>(curve_.size()) < cfg_.epochs) {
      auto rec = run_epoch(train, dev);
      log::info("finetune epoch ", rec.epoch, " reward ", rec.train_reward, " nll ", rec.train_nll, " dev reward ",
                rec.dev.reward, " info ", rec.dev.informativeness, " spec ", rec.dev.specificity);
      if (on_epoch) on_epoch(rec);
    }
    if (!best_) throw std::runtime_error("finetune: no epochs were run");
    return *best_;
  }

 private:
  void emit(const RLStepTrace& tr) {
    if (trace_log_) {
      if (!trace_out_) trace_out_.emplace(*trace_log_, std::ios::app);
      *trace_out_ << tr.to_json().dump() << '\n';
      trace_out_->flush();
    }
    if (keep_traces_) traces_.push_back(tr);
  }

  Generator<T>& gen_;
  const RewardModel& rm_;
  RLConfig cfg_;
  Adam<T> opt_;
  std::mt19937_64 rng_;
  std::mt19937_64 sample_rng_;
  int step_ = 0;
  std::vector<RLEpochRecord> curve_;
  std::vector<RLStepTrace> traces_;
  bool keep_traces_ = false;
  std::optional<std::filesystem::path> trace_log_;
  std::optional<std::ofstream> trace_out_;
  std::optional<std::filesystem::path> metrics_log_;
  std::optional<Checkpoint> best_;
  double best_reward_ = 0.0;
};

}  // namespace pqg
