#pragma once

// Exact self-critical policy gradient by enumerating every sequence a tiny
// generator can emit, against a Monte-Carlo estimate from sampled decodes.

#include "pqg/rl.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <vector>

namespace pqg::testing {

struct PgComparison {
  double max_abs_diff = 0.0;
  double max_abs_exact = 0.0;
  double total_probability = 0.0;
  std::size_t sequences = 0;
  std::size_t coordinates = 0;
};

inline std::vector<double> flat_grad(const ParameterStore<double>& store) {
  std::vector<double> out;
  store.for_each([&](const Parameter<double>& p) {
    for (Index c = 0; c < p.cols(); ++c) {
      for (Index r = 0; r < p.rows(); ++r) out.push_back(p.grad()(r, c));
    }
  });
  return out;
}

struct PgToy {
  Vocabulary vocab = Vocabulary::from_counts({{"a", 1}, {"b", 1}, {"c", 1}}, 1, 3);
  Generator<double> gen;
  TopicSpec topic{"a b", "c a b", "b"};
  std::vector<QAPair> history;
  int max_len = 2;

  static GeneratorConfig config() {
    GeneratorConfig c;
    c.embed_dim = 3;
    c.hidden = 2;
    c.dropout = 0.0;
    c.init_seed = 13;
    return c;
  }
  PgToy() : gen(vocab, config()) {
    // Spread the initial policy so that every length carries probability mass.
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd(0.0, 1.0);
    auto& b = gen.output_bias().value();
    for (Index i = 0; i < b.rows(); ++i) b(i, 0) = nd(rng);
    b(Vocabulary::kEos, 0) += 1.0;
  }

  double reward(const Ids& ids, bool ended) const {
    double r = ended ? 0.5 : 0.3;
    for (int id : ids) r += vocab.token(id) == "a" ? 0.4 : (vocab.token(id) == "c" ? 0.1 : 0.0);
    return r;
  }

  double greedy_baseline() {
    Graph<double> g(false);
    auto res = gen.decode(g, gen.encode_context(g, topic, history), DecodeMode::greedy, max_len);
    return reward(res.ids, res.ended);
  }
};

// Gradient of -(R(s) - b) log P(s) summed exactly over all sequences s,
// weighted by P(s).
inline std::vector<double> exact_policy_gradient(PgToy& toy, double b, double* total_probability,
                                                 std::size_t* count) {
  const int V = toy.vocab.size();
  std::vector<double> acc;
  double mass = 0.0;
  std::size_t n = 0;
  std::function<void(Ids&)> visit = [&](Ids& prefix) {
    for (bool ended : {true, false}) {
      if (!ended && static_cast<int>(prefix.size()) != toy.max_len) continue;
      if (ended && static_cast<int>(prefix.size()) >= toy.max_len) continue;
      toy.gen.params().zero_grad();
      Graph<double> g;
      Expr<double> lp = toy.gen.sequence_logprob(g, toy.gen.encode_context(g, toy.topic, toy.history), prefix, ended);
      g.backward(lp);
      const double p = std::exp(lp.scalar());
      const double w = -p * (toy.reward(prefix, ended) - b);
      auto grad = flat_grad(toy.gen.params());
      if (acc.empty()) acc.assign(grad.size(), 0.0);
      for (std::size_t i = 0; i < grad.size(); ++i) acc[i] += w * grad[i];
      mass += p;
      ++n;
    }
    if (static_cast<int>(prefix.size()) < toy.max_len) {
      for (int tok = 0; tok < V; ++tok) {
        if (tok == Vocabulary::kEos) continue;
        prefix.push_back(tok);
        visit(prefix);
        prefix.pop_back();
      }
    }
  };
  Ids empty;
  visit(empty);
  if (total_probability) *total_probability = mass;
  if (count) *count = n;
  return acc;
}

// Mean over `samples` decodes of the gradient of self_critical_loss. Each
// distinct sequence is differentiated once and weighted by its count.
inline std::vector<double> monte_carlo_policy_gradient(PgToy& toy, double b, long samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::map<std::pair<Ids, bool>, long> counts;
  constexpr long kChunk = 500;
  for (long done = 0; done < samples; done += kChunk) {
    Graph<double> g(false);
    const auto ctx = toy.gen.encode_context(g, toy.topic, toy.history);
    for (long i = done; i < std::min(samples, done + kChunk); ++i) {
      auto res = toy.gen.decode(g, ctx, DecodeMode::sampled, toy.max_len, &rng);
      ++counts[{res.ids, res.ended}];
    }
  }
  std::vector<double> acc;
  for (const auto& [key, n] : counts) {
    // sequence_logprob agrees with the tracked decode log-probability (checked
    // in test_qgen).
    toy.gen.params().zero_grad();
    Graph<double> g;
    const auto ctx = toy.gen.encode_context(g, toy.topic, toy.history);
    DecodeResult<double> res;
    res.ids = key.first;
    res.ended = key.second;
    Expr<double> lp = toy.gen.sequence_logprob(g, ctx, key.first, key.second);
    res.total_logprob = lp.scalar();
    res.logprob = lp;
    Expr<double> loss = self_critical_loss(res, toy.reward(key.first, key.second), b);
    g.backward(loss);
    auto grad = flat_grad(toy.gen.params());
    if (acc.empty()) acc.assign(grad.size(), 0.0);
    for (std::size_t i = 0; i < grad.size(); ++i) acc[i] += static_cast<double>(n) / static_cast<double>(samples) * grad[i];
  }
  return acc;
}

inline PgComparison compare_policy_gradients(long samples, std::uint64_t seed) {
  PgToy toy;
  const double b = toy.greedy_baseline();
  PgComparison out;
  auto exact = exact_policy_gradient(toy, b, &out.total_probability, &out.sequences);
  auto mc = monte_carlo_policy_gradient(toy, b, samples, seed);
  out.coordinates = exact.size();
  for (std::size_t i = 0; i < exact.size(); ++i) {
    out.max_abs_diff = std::max(out.max_abs_diff, std::abs(exact[i] - mc[i]));
    out.max_abs_exact = std::max(out.max_abs_exact, std::abs(exact[i]));
  }
  return out;
}

}  // namespace pqg::testing
