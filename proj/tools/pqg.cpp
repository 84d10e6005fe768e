// pqg: command-line driver for the question-generation pipeline.

#include "pqg/pipeline.hpp"
#include "pqg/synthetic.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>

#ifndef PQG_DEFAULT_DATA_ROOT
#define PQG_DEFAULT_DATA_ROOT "data"
#endif

namespace {

enum Exit { kOk = 0, kUsage = 1, kDependency = 2, kRuntime = 3 };

std::filesystem::path data_root() {
  if (const char* env = std::getenv("PQG_DATA_ROOT"); env && *env) return env;
  return PQG_DEFAULT_DATA_ROOT;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conversational question generation pipeline"};
  app.require_subcommand(1, 1);

  std::string config_path, out, device;
  std::optional<std::uint64_t> seed;
  std::optional<int> max_len;
  std::optional<double> lambda1, lambda2;
  std::vector<std::string> overrides;
  bool quiet = false;
  app.add_option("--config", config_path, "Config file of 'key = value' lines")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Random seed");
  app.add_option("--out", out, "Output directory");
  app.add_option("--device", device, "Compute device (cpu)");
  app.add_option("--max-len", max_len, "Maximum generated question length");
  app.add_option("--lambda1", lambda1, "Informativeness weight in the blended reward");
  app.add_option("--lambda2", lambda2, "Weight of the reinforcement term in the finetuning loss");
  app.add_option("--set", overrides, "Override a config key: key=value (repeatable)");
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  auto* import_cmd = app.add_subcommand("import", "Convert QuAC JSON into the JSONL conversation format");
  auto* split_cmd = app.add_subcommand("split", "Entity-disjoint train/dev split plus the test partition");
  auto* qg_cmd = app.add_subcommand("train-qg", "Train the question generator with NLL");
  auto* critic_cmd = app.add_subcommand("train-critic", "Train the answerer and specificity classifier");
  auto* ft_cmd = app.add_subcommand("finetune", "Reinforcement finetuning against the critic rewards");
  auto* eval_cmd = app.add_subcommand("evaluate", "Score generated and reference questions");
  auto* rep_cmd = app.add_subcommand("analyze-repetition", "Repeated n-gram curves from the evaluation report");
  auto* score_cmd = app.add_subcommand("score-question", "Print the reward breakdown of one question");
  auto* toy_cmd = app.add_subcommand("make-toy", "Write a synthetic toy corpus as JSONL");

  std::string part = "dev", conversation, question;
  std::size_t turn = 0;
  score_cmd->add_option("--part", part, "Partition: train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}));
  score_cmd->add_option("--conversation", conversation, "Conversation id")->required();
  score_cmd->add_option("--turn", turn, "Zero-based turn index")->required();
  score_cmd->add_option("--question", question, "Question text")->required();

  int toy_n = 50;
  std::uint64_t toy_seed = 1;
  std::string toy_path, toy_prefix = "toy";
  toy_cmd->add_option("--conversations", toy_n, "Number of conversations")->check(CLI::PositiveNumber);
  toy_cmd->add_option("--corpus-seed", toy_seed, "Generator seed");
  toy_cmd->add_option("--prefix", toy_prefix, "Conversation id prefix");
  toy_cmd->add_option("path", toy_path, "Output JSONL file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  if (quiet) pqg::log::set_level(pqg::log::Level::warn);

  if (toy_cmd->parsed()) {
    try {
      pqg::write_corpus(toy_path, pqg::synthetic::toy_corpus(toy_n, toy_seed, toy_prefix));
      return kOk;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kRuntime;
    }
  }

  pqg::RunConfig cfg;
  try {
    if (!config_path.empty()) cfg.load_file(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw pqg::ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.set("seed", std::to_string(*seed));
    if (!out.empty()) cfg.set("out", out);
    if (!device.empty()) cfg.set("device", device);
    if (max_len) {
      cfg.set("rl.max_len", std::to_string(*max_len));
      cfg.set("eval.max_len", std::to_string(*max_len));
    }
    if (lambda1) cfg.set("rl.lambda1", CLI::detail::to_string(*lambda1));
    if (lambda2) cfg.set("rl.lambda2", CLI::detail::to_string(*lambda2));
    cfg.rl().validate();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    pqg::Pipeline p(cfg, data_root());
    if (import_cmd->parsed()) {
      std::cout << p.import_data().dump(2) << '\n';
    } else if (split_cmd->parsed()) {
      std::cout << p.split().dump(2) << '\n';
    } else if (qg_cmd->parsed()) {
      p.train_qg();
    } else if (critic_cmd->parsed()) {
      p.train_critic();
    } else if (ft_cmd->parsed()) {
      p.finetune();
    } else if (eval_cmd->parsed()) {
      std::cout << p.evaluate().to_markdown();
    } else if (rep_cmd->parsed()) {
      std::cout << p.analyze_repetition().dump(2) << '\n';
    } else if (score_cmd->parsed()) {
      std::cout << p.score_question(part, conversation, turn, question).to_json().dump(2) << '\n';
    }
  } catch (const pqg::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const pqg::DependencyError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDependency;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}
