#pragma once

// Self-describing checkpoint container shared by the generator and the
// critic: model kind, configuration, vocabulary, parameters, optimizer and
// scheduler state, epoch counter and the training RNG state. Stored as a
// single JSON document.

#include "pqg/vocab.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace pqg {

struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  std::string kind;             // "generator" or "critic"
  nlohmann::json config;        // model + training configuration
  nlohmann::json run_config;    // full run configuration, when produced by the CLI
  Vocabulary vocab;
  nlohmann::json params = nlohmann::json::object();
  nlohmann::json optimizer;     // null when absent
  nlohmann::json scheduler;     // null when absent
  int epoch = 0;
  std::string rng_state;        // serialized std::mt19937_64, may be empty
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const {
    return {{"format", "pqg-checkpoint"}, {"version", kFormatVersion}, {"kind", kind},
            {"config", config},           {"run_config", run_config},  {"vocab", vocab.to_json()},
            {"params", params},           {"optimizer", optimizer},    {"scheduler", scheduler},
            {"epoch", epoch},             {"rng_state", rng_state},    {"extra", extra}};
  }

  static Checkpoint from_json(const nlohmann::json& j) {
    if (j.value("format", std::string()) != "pqg-checkpoint") throw std::runtime_error("not a pqg checkpoint");
    if (j.at("version").get<int>() != kFormatVersion) throw std::runtime_error("unsupported checkpoint version");
    Checkpoint c;
    c.kind = j.at("kind").get<std::string>();
    c.config = j.at("config");
    c.run_config = j.value("run_config", nlohmann::json());
    c.vocab = Vocabulary::from_json(j.at("vocab"));
    c.params = j.at("params");
    c.optimizer = j.value("optimizer", nlohmann::json());
    c.scheduler = j.value("scheduler", nlohmann::json());
    c.epoch = j.at("epoch").get<int>();
    c.rng_state = j.value("rng_state", std::string());
    c.extra = j.value("extra", nlohmann::json::object());
    return c;
  }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp);
      if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
      out << to_json().dump();
    }
    std::filesystem::rename(tmp, path);
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
    return from_json(nlohmann::json::parse(in));
  }
};

inline std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void rng_from_string(std::mt19937_64& rng, const std::string& s) {
  if (s.empty()) return;
  std::istringstream is(s);
  is >> rng;
  if (!is) throw std::runtime_error("corrupt RNG state in checkpoint");
}

}  // namespace pqg
