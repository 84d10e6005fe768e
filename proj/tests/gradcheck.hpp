#pragma once

// Five-point finite-difference gradient checking against the autodiff tape.

#include "pqg/autodiff.hpp"
#include "pqg/params.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace pqg::testing {

struct GradCheckReport {
  int checked = 0;
  int nonzero = 0;
  double max_rel_error = 0.0;
  std::string worst;
};

template <typename T>
std::string sci(T x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6e", static_cast<double>(x));
  return buf;
}

template <typename T>
double relative_error(T analytic, T numeric, T floor = T(1e-7)) {
  const T denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return static_cast<double>(std::abs(analytic - numeric) / denom);
}

// Errors are relative, with magnitudes below `floor` treated as `floor` (the
// five-point stencil resolves about 1e-14 on an O(10) loss).
//
// `loss` builds a scalar loss on the given graph. Half of the checked
// coordinates are drawn from those with a non-zero analytic gradient, the rest
// uniformly from every trainable coordinate (catching missing paths).
template <typename T>
GradCheckReport check_gradients(ParameterStore<T>& store, const std::function<Expr<T>(Graph<T>&)>& loss,
                                int coords, std::uint64_t seed, T eps = T(1e-4)) {
  store.zero_grad();
  {
    Graph<T> g;
    g.backward(loss(g));
  }
  struct Coord {
    Parameter<T>* p;
    Index r, c;
  };
  std::vector<Coord> all, nonzero;
  store.for_each([&](Parameter<T>& p) {
    for (Index c = 0; c < p.cols(); ++c) {
      for (Index r = 0; r < p.rows(); ++r) {
        if (!p.row_trainable(r)) continue;
        all.push_back({&p, r, c});
        if (p.grad()(r, c) != T(0)) nonzero.push_back({&p, r, c});
      }
    }
  });
  std::mt19937_64 rng(seed);
  std::vector<Coord> picked;
  std::shuffle(nonzero.begin(), nonzero.end(), rng);
  for (std::size_t i = 0; i < nonzero.size() && static_cast<int>(picked.size()) < coords / 2; ++i) picked.push_back(nonzero[i]);
  std::uniform_int_distribution<std::size_t> pick_any(0, all.size() - 1);
  while (static_cast<int>(picked.size()) < coords && !all.empty()) picked.push_back(all[pick_any(rng)]);

  auto eval = [&]() {
    Graph<T> g(false);
    return loss(g).scalar();
  };
  GradCheckReport rep;
  for (const auto& k : picked) {
    const T analytic = k.p->grad()(k.r, k.c);
    T& x = k.p->value()(k.r, k.c);
    const T saved = x;
    auto at = [&](T delta) {
      x = saved + delta;
      return eval();
    };
    const T numeric = (-at(2 * eps) + 8 * at(eps) - 8 * at(-eps) + at(-2 * eps)) / (T(12) * eps);
    x = saved;
    const double err = relative_error(analytic, numeric);
    ++rep.checked;
    if (analytic != T(0)) ++rep.nonzero;
    if (err > rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst = k.p->name() + "(" + std::to_string(k.r) + "," + std::to_string(k.c) + ") analytic=" +
                  sci(analytic) + " numeric=" + sci(numeric);
    }
  }
  return rep;
}

}  // namespace pqg::testing
