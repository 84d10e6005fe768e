#pragma once

// Run configuration: one flat table of dotted keys with typed defaults, read
// from a "key = value" file and overridable per key.

#include "pqg/critic.hpp"
#include "pqg/qgen.hpp"
#include "pqg/rl.hpp"
#include "pqg/train_nll.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

namespace pqg {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class RunConfig {
 public:
  RunConfig() {
    // data
    values_["data.source"] = "bundled";  // "bundled" or "import"
    values_["data.train"] = "toy/train.jsonl";
    values_["data.test"] = "toy/test.jsonl";
    values_["data.quac_train"] = "quac/train_v0.2.json";
    values_["data.quac_dev"] = "quac/val_v0.2.json";
    values_["seed"] = 1;
    values_["out"] = "runs/default";
    values_["device"] = "cpu";
    values_["split.dev_target"] = 1000;
    values_["vocab.min_count"] = 2;
    values_["vocab.finetune_top_k"] = 1000;
    // generator
    const GeneratorConfig g;
    values_["gen.embed_dim"] = g.embed_dim;
    values_["gen.hidden"] = g.hidden;
    values_["gen.layers"] = g.layers;
    values_["gen.dropout"] = g.dropout;
    const NllTrainConfig q;
    values_["qg.epochs"] = q.epochs;
    values_["qg.batch_conversations"] = q.batch_conversations;
    values_["qg.lr"] = q.lr;
    values_["qg.clip"] = q.clip;
    values_["qg.patience"] = q.patience;
    values_["qg.anneal_factor"] = q.anneal_factor;
    // teacher and critic
    const TeacherConfig t;
    values_["teacher.embed_dim"] = t.embed_dim;
    values_["teacher.hidden"] = t.hidden;
    values_["teacher.char_dim"] = t.char_dim;
    values_["teacher.char_filters"] = t.char_filters;
    values_["teacher.char_width"] = t.char_width;
    values_["teacher.history_depth"] = t.history_depth;
    values_["teacher.span_cap"] = t.span_cap;
    values_["teacher.dropout"] = t.dropout;
    const CriticTrainConfig c;
    values_["critic.epochs"] = c.epochs;
    values_["critic.batch_conversations"] = c.batch_conversations;
    values_["critic.lr"] = c.lr;
    values_["critic.clip"] = c.clip;
    values_["critic.patience"] = c.patience;
    values_["critic.anneal_factor"] = c.anneal_factor;
    // finetuning
    const RLConfig r;
    values_["rl.lambda1"] = r.lambda1;
    values_["rl.lambda2"] = r.lambda2;
    values_["rl.lr"] = r.lr;
    values_["rl.epochs"] = r.epochs;
    values_["rl.max_len"] = r.max_len;
    values_["rl.batch_conversations"] = r.batch_conversations;
    values_["rl.clip"] = r.clip;
    // evaluation
    values_["eval.part"] = "test";
    values_["eval.decode"] = "greedy";
    values_["eval.max_len"] = r.max_len;
  }

  // Parses `value` with the type of the key's default.
  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    auto& slot = it->second;
    try {
      std::size_t used = 0;
      if (slot.is_string()) {
        slot = value;
        return;
      } else if (slot.is_number_float()) {
        slot = std::stod(value, &used);
      } else if (slot.is_number_integer()) {
        slot = std::stoll(value, &used);
      }
      if (used != value.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::logic_error&) {
      throw ConfigError("bad value '" + value + "' for config key '" + key + "'");
    }
  }

  // Lines of "key = value"; '#' starts a comment.
  void load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
      }
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  const nlohmann::json& at(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }
  std::string str(const std::string& key) const { return at(key).get<std::string>(); }
  double num(const std::string& key) const { return at(key).get<double>(); }
  long integer(const std::string& key) const { return at(key).get<long>(); }
  std::uint64_t seed() const { return at("seed").get<std::uint64_t>(); }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
  }
  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    for (const auto& [k, v] : j.items()) {
      if (!c.values_.count(k)) throw ConfigError("unknown config key '" + k + "'");
      c.values_[k] = v;
    }
    return c;
  }

  GeneratorConfig generator() const {
    GeneratorConfig g;
    g.embed_dim = static_cast<int>(integer("gen.embed_dim"));
    g.hidden = static_cast<int>(integer("gen.hidden"));
    g.layers = static_cast<int>(integer("gen.layers"));
    g.dropout = num("gen.dropout");
    g.max_len = static_cast<int>(integer("eval.max_len"));
    g.init_seed = seed();
    return g;
  }
  NllTrainConfig qg() const {
    NllTrainConfig q;
    q.epochs = static_cast<int>(integer("qg.epochs"));
    q.batch_conversations = static_cast<int>(integer("qg.batch_conversations"));
    q.lr = num("qg.lr");
    q.clip = num("qg.clip");
    q.patience = static_cast<int>(integer("qg.patience"));
    q.anneal_factor = num("qg.anneal_factor");
    q.seed = seed();
    return q;
  }
  CriticConfig critic() const {
    CriticConfig c;
    c.teacher.embed_dim = static_cast<int>(integer("teacher.embed_dim"));
    c.teacher.hidden = static_cast<int>(integer("teacher.hidden"));
    c.teacher.char_dim = static_cast<int>(integer("teacher.char_dim"));
    c.teacher.char_filters = static_cast<int>(integer("teacher.char_filters"));
    c.teacher.char_width = static_cast<int>(integer("teacher.char_width"));
    c.teacher.history_depth = static_cast<int>(integer("teacher.history_depth"));
    c.teacher.span_cap = static_cast<int>(integer("teacher.span_cap"));
    c.teacher.dropout = num("teacher.dropout");
    c.init_seed = seed();
    return c;
  }
  CriticTrainConfig critic_training() const {
    CriticTrainConfig c;
    c.epochs = static_cast<int>(integer("critic.epochs"));
    c.batch_conversations = static_cast<int>(integer("critic.batch_conversations"));
    c.lr = num("critic.lr");
    c.clip = num("critic.clip");
    c.patience = static_cast<int>(integer("critic.patience"));
    c.anneal_factor = num("critic.anneal_factor");
    c.seed = seed();
    return c;
  }
  RLConfig rl() const {
    RLConfig r;
    r.lambda1 = num("rl.lambda1");
    r.lambda2 = num("rl.lambda2");
    r.lr = num("rl.lr");
    r.epochs = static_cast<int>(integer("rl.epochs"));
    r.max_len = static_cast<int>(integer("rl.max_len"));
    r.batch_conversations = static_cast<int>(integer("rl.batch_conversations"));
    r.clip = num("rl.clip");
    r.seed = seed();
    return r;
  }

 private:
  std::map<std::string, nlohmann::json> values_;
};

}  // namespace pqg
