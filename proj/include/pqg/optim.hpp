#pragma once

#include "pqg/params.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <limits>
#include <map>
#include <string>

namespace pqg {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moments are keyed by parameter name so that the
// optimizer state can be written into and restored from a checkpoint.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  long step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

  void step(ParameterStore<T>& store) {
    ++step_;
    const T b1 = static_cast<T>(cfg_.beta1);
    const T b2 = static_cast<T>(cfg_.beta2);
    const T c1 = T(1) - std::pow(b1, static_cast<T>(step_));
    const T c2 = T(1) - std::pow(b2, static_cast<T>(step_));
    const T lr = static_cast<T>(cfg_.lr);
    const T eps = static_cast<T>(cfg_.eps);
    store.for_each([&](Parameter<T>& p) {
      auto& st = state_[p.name()];
      if (st.m.size() == 0) {
        st.m = Matrix<T>::Zero(p.rows(), p.cols());
        st.v = Matrix<T>::Zero(p.rows(), p.cols());
      }
      const Matrix<T>& g = p.grad();
      st.m = b1 * st.m + (T(1) - b1) * g;
      st.v = b2 * st.v + (T(1) - b2) * g.cwiseProduct(g);
      for (Index r = 0; r < p.rows(); ++r) {
        if (!p.row_trainable(r)) continue;
        for (Index c = 0; c < p.cols(); ++c) {
          const T mhat = st.m(r, c) / c1;
          const T vhat = st.v(r, c) / c2;
          p.value()(r, c) -= lr * mhat / (std::sqrt(vhat) + eps);
        }
      }
    });
  }

  nlohmann::json to_json() const {
    nlohmann::json moments = nlohmann::json::object();
    for (const auto& [name, st] : state_) {
      moments[name] = {{"m", matrix_to_json(st.m)}, {"v", matrix_to_json(st.v)}};
    }
    return {{"lr", cfg_.lr},       {"beta1", cfg_.beta1}, {"beta2", cfg_.beta2},
            {"eps", cfg_.eps},     {"step", step_},       {"moments", moments}};
  }

  static Adam from_json(const nlohmann::json& j) {
    AdamConfig cfg;
    cfg.lr = j.at("lr").get<double>();
    cfg.beta1 = j.at("beta1").get<double>();
    cfg.beta2 = j.at("beta2").get<double>();
    cfg.eps = j.at("eps").get<double>();
    Adam a(cfg);
    a.step_ = j.at("step").get<long>();
    for (const auto& [name, mv] : j.at("moments").items()) {
      a.state_[name] = State{matrix_from_json<T>(mv.at("m")), matrix_from_json<T>(mv.at("v"))};
    }
    return a;
  }

 private:
  struct State {
    Matrix<T> m;
    Matrix<T> v;
  };
  AdamConfig cfg_;
  long step_ = 0;
  std::map<std::string, State> state_;
};

// Multiplies the learning rate by `factor` once the monitored metric has
// failed to improve for more than `patience` consecutive epochs, then starts
// counting again. Lower metric values are better.
class PlateauScheduler {
 public:
  PlateauScheduler(int patience = 3, double factor = 0.5) : patience_(patience), factor_(factor) {}

  // Records one epoch's metric; returns true when the learning rate was
  // reduced as a consequence.
  template <typename Opt>
  bool observe(double metric, Opt& optimizer) {
    if (metric < best_) {
      best_ = metric;
      bad_epochs_ = 0;
      return false;
    }
    ++bad_epochs_;
    if (bad_epochs_ > patience_) {
      optimizer.set_lr(optimizer.lr() * factor_);
      bad_epochs_ = 0;
      ++reductions_;
      return true;
    }
    return false;
  }

  double best() const { return best_; }
  int bad_epochs() const { return bad_epochs_; }
  int reductions() const { return reductions_; }

  nlohmann::json to_json() const {
    return {{"patience", patience_}, {"factor", factor_}, {"best", best_is_set() ? nlohmann::json(best_) : nlohmann::json()},
            {"bad_epochs", bad_epochs_}, {"reductions", reductions_}};
  }
  static PlateauScheduler from_json(const nlohmann::json& j) {
    PlateauScheduler s(j.at("patience").get<int>(), j.at("factor").get<double>());
    if (!j.at("best").is_null()) s.best_ = j.at("best").get<double>();
    s.bad_epochs_ = j.at("bad_epochs").get<int>();
    s.reductions_ = j.at("reductions").get<int>();
    return s;
  }

 private:
  bool best_is_set() const { return best_ != std::numeric_limits<double>::infinity(); }

  int patience_;
  double factor_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
  int reductions_ = 0;
};

}  // namespace pqg
