#pragma once

// Maximum-likelihood training of the question generator: Adam, plateau
// learning-rate annealing on dev perplexity, best-dev selection and
// resumable state.

#include "pqg/log.hpp"
#include "pqg/optim.hpp"
#include "pqg/qgen.hpp"

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
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pqg {

struct NllTrainConfig {
  int epochs = 30;
  int batch_conversations = 8;  // conversations per optimizer step
  double lr = 1e-3;
  double clip = 5.0;            // global gradient-norm cap, 0 disables
  int patience = 3;
  double anneal_factor = 0.5;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const {
    return {{"epochs", epochs}, {"batch_conversations", batch_conversations},
            {"lr", lr},         {"clip", clip},
            {"patience", patience}, {"anneal_factor", anneal_factor},
            {"seed", seed}};
  }
  static NllTrainConfig from_json(const nlohmann::json& j) {
    NllTrainConfig c;
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

struct EpochRecord {
  int epoch = 0;
  double train_nll = 0.0;  // mean per-pair loss over the epoch's batches
  double dev_pplx = 0.0;
  double lr = 0.0;         // learning rate in effect during the epoch
  bool annealed = false;   // learning rate was reduced after this epoch

  nlohmann::json to_json() const {
    return {{"epoch", epoch}, {"train_nll", train_nll}, {"dev_pplx", dev_pplx}, {"lr", lr}, {"annealed", annealed}};
  }
};

struct NonFiniteLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
double perplexity(const Generator<T>& gen, const std::vector<Conversation>& convs) {
  return std::exp(corpus_nll(gen, convs).per_token());
}

// Splits `examples` into batches of whole conversations in shuffled order.
inline std::vector<std::vector<NllExample>> conversation_batches(const std::vector<Conversation>& convs,
                                                                 int per_batch, std::mt19937_64& rng) {
  if (per_batch < 1) throw std::invalid_argument("batch size must be positive");
  std::vector<std::size_t> order(convs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<NllExample>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(per_batch)) {
    std::vector<NllExample> b;
    for (std::size_t k = i; k < std::min(order.size(), i + static_cast<std::size_t>(per_batch)); ++k) {
      const Conversation& c = convs[order[k]];
      for (std::size_t j = 0; j < c.size(); ++j) b.push_back({&c, j});
    }
    out.push_back(std::move(b));
  }
  return out;
}

template <typename T = double>
class NllTrainer {
 public:
  using DevMetric = std::function<double(const Generator<T>&)>;

  NllTrainer(Generator<T>& gen, NllTrainConfig cfg)
      : gen_(gen), cfg_(cfg), opt_(AdamConfig{cfg.lr}), sched_(cfg.patience, cfg.anneal_factor), rng_(cfg.seed) {}

  // Replaces dev perplexity as the monitored metric (lower is better).
  void set_dev_metric(DevMetric m) { dev_metric_ = std::move(m); }
  void set_metrics_log(std::filesystem::path p) { metrics_log_ = std::move(p); }

  const NllTrainConfig& config() const { return cfg_; }
  Adam<T>& optimizer() { return opt_; }
  const PlateauScheduler& scheduler() const { return sched_; }
  std::mt19937_64& rng() { return rng_; }
  int epoch() const { return epoch_; }
  const std::vector<EpochRecord>& curve() const { return curve_; }
  double best_dev() const { return best_dev_; }
  int best_epoch() const { return best_epoch_; }
  const std::optional<Checkpoint>& best() const { return best_; }

  // One optimizer step on `batch`; returns the per-pair loss before the update.
  double step(std::span<const NllExample> batch) {
    gen_.params().zero_grad();
    Dropout drop{gen_.config().dropout, &rng_};
    Graph<T> g;
    NllLoss<T> l = nll_loss(g, gen_, batch, &drop);
    const double value = static_cast<double>(l.loss.scalar());
    if (!std::isfinite(value)) throw NonFiniteLoss(diagnose(batch, value));
    g.backward(l.loss);
    if (cfg_.clip > 0) gen_.params().clip_grad_norm(static_cast<T>(cfg_.clip));
    opt_.step(gen_.params());
    return value;
  }

  EpochRecord run_epoch(const std::vector<Conversation>& train, const std::vector<Conversation>& dev) {
    if (train.empty()) throw std::invalid_argument("train_nll: empty training set");
    EpochRecord rec;
    rec.epoch = epoch_ + 1;
    rec.lr = opt_.lr();
    double total = 0.0;
    long pairs = 0;
    for (const auto& batch : conversation_batches(train, cfg_.batch_conversations, rng_)) {
      total += step(batch) * static_cast<double>(batch.size());
      pairs += static_cast<long>(batch.size());
    }
    rec.train_nll = total / static_cast<double>(pairs);
    rec.dev_pplx = dev_metric_ ? dev_metric_(gen_) : perplexity(gen_, dev.empty() ? train : dev);
    ++epoch_;
    if (rec.dev_pplx < best_dev_) {
      best_dev_ = rec.dev_pplx;
      best_epoch_ = epoch_;
      best_ = gen_.to_checkpoint();
      best_->epoch = epoch_;
    }
    rec.annealed = sched_.observe(rec.dev_pplx, opt_);
    if (rec.annealed) log::info("epoch ", epoch_, ": learning rate annealed to ", opt_.lr());
    curve_.push_back(rec);
    if (metrics_log_) {
      std::ofstream out(*metrics_log_, std::ios::app);
      out << rec.to_json().dump() << '\n';
    }
    return rec;
  }

  // Runs the remaining epochs and returns the best-dev generator checkpoint.
  Checkpoint fit(const std::vector<Conversation>& train, const std::vector<Conversation>& dev,
                 const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    while (epoch_ < cfg_.epochs) {
      auto rec = run_epoch(train, dev);
      log::info("epoch ", rec.epoch, " train_nll ", rec.train_nll, " dev_pplx ", rec.dev_pplx, " lr ", rec.lr);
      if (on_epoch) on_epoch(rec);
    }
    if (!best_) throw std::runtime_error("train_nll: no epochs were run");
    return *best_;
  }

  // Full training state, including optimizer, scheduler and RNG.
  Checkpoint state() const {
    Checkpoint c = gen_.to_checkpoint();
    c.optimizer = opt_.to_json();
    c.scheduler = sched_.to_json();
    c.epoch = epoch_;
    c.rng_state = rng_to_string(rng_);
    c.extra["trainer"] = cfg_.to_json();
    c.extra["best_dev"] = std::isfinite(best_dev_) ? nlohmann::json(best_dev_) : nlohmann::json();
    c.extra["best_epoch"] = best_epoch_;
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& r : curve_) curve.push_back(r.to_json());
    c.extra["curve"] = curve;
    if (best_) c.extra["best"] = best_->to_json();
    return c;
  }

  // Restores a trainer for `gen`, which must already hold the parameters of `c`.
  static NllTrainer resume(Generator<T>& gen, const Checkpoint& c) {
    if (!c.extra.contains("trainer")) throw std::runtime_error("checkpoint holds no trainer state");
    NllTrainer t(gen, NllTrainConfig::from_json(c.extra.at("trainer")));
    t.opt_ = Adam<T>::from_json(c.optimizer);
    t.sched_ = PlateauScheduler::from_json(c.scheduler);
    t.epoch_ = c.epoch;
    rng_from_string(t.rng_, c.rng_state);
    if (!c.extra.at("best_dev").is_null()) t.best_dev_ = c.extra.at("best_dev").get<double>();
    t.best_epoch_ = c.extra.at("best_epoch").get<int>();
    for (const auto& r : c.extra.at("curve")) {
      t.curve_.push_back(EpochRecord{r.at("epoch").get<int>(), r.at("train_nll").get<double>(),
                                     r.at("dev_pplx").get<double>(), r.at("lr").get<double>(),
                                     r.at("annealed").get<bool>()});
    }
    if (c.extra.contains("best")) t.best_ = Checkpoint::from_json(c.extra.at("best"));
    return t;
  }

 private:
  std::string diagnose(std::span<const NllExample> batch, double value) const {
    std::ostringstream os;
    os << "non-finite training loss " << value << " at epoch " << epoch_ + 1 << " (lr " << opt_.lr()
       << ", step " << opt_.step_count() << ", params finite: " << (gen_.params().all_finite() ? "yes" : "no")
       << "); conversations:";
    std::set<std::string> ids;
    for (const auto& ex : batch) ids.insert(ex.conversation->id());
    for (const auto& id : ids) os << ' ' << id;
    return os.str();
  }

  Generator<T>& gen_;
  NllTrainConfig cfg_;
  Adam<T> opt_;
  PlateauScheduler sched_;
  std::mt19937_64 rng_;
  DevMetric dev_metric_;
  std::optional<std::filesystem::path> metrics_log_;
  int epoch_ = 0;
  double best_dev_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = 0;
  std::optional<Checkpoint> best_;
  std::vector<EpochRecord> curve_;
};

}  // namespace pqg
