#pragma once

#include "pqg/autodiff.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <map>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pqg {

// Named collection of parameters with stable addresses. Iteration order is
// the lexicographic order of names, so serialization and gradient-norm
// accumulation are deterministic.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Matrix<T> value) {
    if (params_.count(name) != 0) throw std::invalid_argument("duplicate parameter " + name);
    auto p = std::make_unique<Parameter<T>>(name, std::move(value));
    Parameter<T>& ref = *p;
    params_.emplace(name, std::move(p));
    return ref;
  }

  // Uniform(-scale, scale) initialization from the given engine.
  template <typename Rng>
  Parameter<T>& add_uniform(const std::string& name, Index rows, Index cols, double scale, Rng& rng) {
    std::uniform_real_distribution<double> dist(-scale, scale);
    Matrix<T> m(rows, cols);
    for (Index j = 0; j < cols; ++j) {
      for (Index i = 0; i < rows; ++i) m(i, j) = static_cast<T>(dist(rng));
    }
    return add(name, std::move(m));
  }

  // Glorot-uniform initialization.
  template <typename Rng>
  Parameter<T>& add_glorot(const std::string& name, Index rows, Index cols, Rng& rng) {
    const double scale = std::sqrt(6.0 / static_cast<double>(rows + cols));
    return add_uniform(name, rows, cols, scale, rng);
  }

  Parameter<T>& add_zeros(const std::string& name, Index rows, Index cols) {
    return add(name, Matrix<T>::Zero(rows, cols));
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Parameter<T>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
    return *it->second;
  }
  const Parameter<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
    return *it->second;
  }

  template <typename F>
  void for_each(F&& f) {
    for (auto& [name, p] : params_) f(*p);
  }
  template <typename F>
  void for_each(F&& f) const {
    for (const auto& [name, p] : params_) f(static_cast<const Parameter<T>&>(*p));
  }

  std::size_t size() const { return params_.size(); }

  Index num_scalars() const {
    Index n = 0;
    for (const auto& [name, p] : params_) n += p->value().size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p->zero_grad();
  }

  T grad_norm() const {
    T sq = T(0);
    for (const auto& [name, p] : params_) sq += p->grad().squaredNorm();
    return std::sqrt(sq);
  }

  void scale_grads(T factor) {
    for (auto& [name, p] : params_) p->grad() *= factor;
  }

  // Rescales gradients so their global L2 norm is at most max_norm.
  void clip_grad_norm(T max_norm) {
    if (max_norm <= T(0)) return;
    const T norm = grad_norm();
    if (norm > max_norm) scale_grads(max_norm / norm);
  }

  void copy_values_from(const ParameterStore& other) {
    for (auto& [name, p] : params_) {
      const auto& src = other.get(name).value();
      if (src.rows() != p->rows() || src.cols() != p->cols()) {
        throw std::invalid_argument("shape mismatch copying parameter " + name);
      }
      p->value() = src;
    }
  }

  bool all_finite() const {
    for (const auto& [name, p] : params_) {
      if (!p->value().allFinite()) return false;
    }
    return true;
  }

 private:
  std::map<std::string, std::unique_ptr<Parameter<T>>> params_;
};

// Dense matrix <-> JSON. Doubles serialize through nlohmann's shortest
// round-trip formatting, so a save/load cycle is bit-exact.
template <typename T>
nlohmann::json matrix_to_json(const Matrix<T>& m) {
  std::vector<double> data(static_cast<std::size_t>(m.size()));
  for (Index j = 0; j < m.cols(); ++j) {
    for (Index i = 0; i < m.rows(); ++i) {
      data[static_cast<std::size_t>(j * m.rows() + i)] = static_cast<double>(m(i, j));
    }
  }
  return nlohmann::json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

template <typename T>
Matrix<T> matrix_from_json(const nlohmann::json& j) {
  const Index rows = j.at("rows").get<Index>();
  const Index cols = j.at("cols").get<Index>();
  const auto& data = j.at("data");
  if (static_cast<Index>(data.size()) != rows * cols) throw std::runtime_error("matrix data size mismatch");
  Matrix<T> m(rows, cols);
  for (Index c = 0; c < cols; ++c) {
    for (Index r = 0; r < rows; ++r) m(r, c) = static_cast<T>(data[static_cast<std::size_t>(c * rows + r)].get<double>());
  }
  return m;
}

template <typename T>
nlohmann::json store_to_json(const ParameterStore<T>& store) {
  nlohmann::json out = nlohmann::json::object();
  store.for_each([&](const Parameter<T>& p) { out[p.name()] = matrix_to_json(p.value()); });
  return out;
}

// Loads values into an already-constructed store; every parameter must be
// present with a matching shape.
template <typename T>
void store_from_json(ParameterStore<T>& store, const nlohmann::json& j) {
  store.for_each([&](Parameter<T>& p) {
    if (!j.contains(p.name())) throw std::runtime_error("checkpoint is missing parameter " + p.name());
    Matrix<T> m = matrix_from_json<T>(j.at(p.name()));
    if (m.rows() != p.rows() || m.cols() != p.cols()) {
      throw std::runtime_error("checkpoint shape mismatch for parameter " + p.name());
    }
    p.value() = std::move(m);
  });
}

}  // namespace pqg
