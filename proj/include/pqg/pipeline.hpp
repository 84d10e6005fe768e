#pragma once

// Pipeline stages over one output directory. Every stage writes its artifacts
// to <out>/<stage>/ next to a run_config.json and records itself in
// <out>/manifest.json.

#include "pqg/config.hpp"
#include "pqg/corpus.hpp"
#include "pqg/critic.hpp"
#include "pqg/eval.hpp"
#include "pqg/log.hpp"
#include "pqg/qgen.hpp"
#include "pqg/rl.hpp"
#include "pqg/train_nll.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pqg {

struct DependencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<const char*, 7> kStages{"import",   "split",    "train-qg",          "train-critic",
                                                    "finetune", "evaluate", "analyze-repetition"};

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

class Pipeline {
 public:
  Pipeline(RunConfig cfg, std::filesystem::path data_root)
      : cfg_(std::move(cfg)), data_root_(std::move(data_root)), out_(cfg_.str("out")) {
    if (cfg_.str("device") != "cpu") throw ConfigError("unsupported device '" + cfg_.str("device") + "' (only cpu)");
  }

  const RunConfig& config() const { return cfg_; }
  const std::filesystem::path& out() const { return out_; }
  std::filesystem::path stage_dir(const std::string& stage) const { return out_ / stage; }

  // QuAC train and dev files become the train and test partitions.
  nlohmann::json import_data() {
    const auto dir = begin_stage("import");
    nlohmann::json stats = nlohmann::json::object();
    for (const auto& [part, key] : {std::pair{"train", "data.quac_train"}, std::pair{"test", "data.quac_dev"}}) {
      const auto src = data_root_ / cfg_.str(key);
      if (!std::filesystem::exists(src)) {
        throw DependencyError("QuAC file " + src.string() + " not found; download QuAC or set PQG_DATA_ROOT");
      }
      auto convs = import_quac(src);
      write_corpus(dir / (std::string(part) + ".jsonl"), convs);
      stats[part] = corpus_stats(convs);
    }
    std::ofstream(dir / "stats.json") << stats.dump(2) << '\n';
    finish_stage("import", {"train.jsonl", "test.jsonl", "stats.json"});
    return stats;
  }

  nlohmann::json split() {
    std::filesystem::path train_src, test_src;
    if (cfg_.str("data.source") == "import") {
      train_src = stage_dir("import") / "train.jsonl";
      test_src = stage_dir("import") / "test.jsonl";
      require(train_src, "import");
    } else if (cfg_.str("data.source") == "bundled") {
      train_src = data_root_ / cfg_.str("data.train");
      test_src = data_root_ / cfg_.str("data.test");
      if (!std::filesystem::exists(train_src)) {
        throw DependencyError("corpus " + train_src.string() + " not found; set PQG_DATA_ROOT");
      }
    } else {
      throw ConfigError("data.source must be 'bundled' or 'import'");
    }
    auto all = load_teacher_corpus(train_src);
    auto test = load_teacher_corpus(test_src);
    auto [train, dev] = split_by_entity(all, static_cast<std::size_t>(cfg_.integer("split.dev_target")), cfg_.seed());
    const auto dir = begin_stage("split");
    write_corpus(dir / "train.jsonl", train);
    write_corpus(dir / "dev.jsonl", dev);
    write_corpus(dir / "test.jsonl", test);
    nlohmann::json m{{"seed", cfg_.seed()},
                     {"train", corpus_stats(train)},
                     {"dev", corpus_stats(dev)},
                     {"test", corpus_stats(test)}};
    std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
    finish_stage("split", {"train.jsonl", "dev.jsonl", "test.jsonl", "manifest.json"});
    return m;
  }

  // Student-side only: the knowledge field is never loaded here.
  Checkpoint train_qg() {
    auto train = load_student_corpus(split_file("train"));
    auto dev = load_student_corpus(split_file("dev"));
    auto vocab = build_vocabulary(train, vocab_options(false));
    const auto dir = begin_stage("train-qg");
    Generator<double> gen(vocab, cfg_.generator());
    NllTrainer<double> trainer(gen, cfg_.qg());
    trainer.set_metrics_log(dir / "metrics.jsonl");
    Checkpoint best = trainer.fit(train, dev);
    best.run_config = cfg_.to_json();
    best.save(dir / "generator.json");
    finish_stage("train-qg", {"generator.json", "metrics.jsonl"});
    return best;
  }

  Checkpoint train_critic() {
    auto train = load_teacher_corpus(split_file("train"));
    auto dev = load_teacher_corpus(split_file("dev"));
    auto vocab = build_vocabulary(train, vocab_options(true));
    const auto dir = begin_stage("train-critic");
    Critic<double> critic(vocab, cfg_.critic());
    CriticTrainer<double> trainer(critic, cfg_.critic_training());
    trainer.set_metrics_log(dir / "metrics.jsonl");
    Checkpoint best = trainer.fit(train, dev);
    best.run_config = cfg_.to_json();
    best.save(dir / "critic.json");
    finish_stage("train-critic", {"critic.json", "metrics.jsonl"});
    return best;
  }

  Checkpoint finetune() {
    auto gen = load_generator("train-qg");
    auto critic = load_critic();
    auto train = load_teacher_corpus(split_file("train"));
    auto dev = load_teacher_corpus(split_file("dev"));
    const RLConfig rc = cfg_.rl();
    BlendedReward rm(critic->answerer(), *critic, rc.lambda1);
    const auto dir = begin_stage("finetune");
    RLTrainer<double> trainer(*gen, rm, rc);
    trainer.set_metrics_log(dir / "metrics.jsonl");
    trainer.set_trace_log(dir / "traces.jsonl");
    Checkpoint best = trainer.fit(train, dev);
    best.run_config = cfg_.to_json();
    best.save(dir / "generator.json");
    finish_stage("finetune", {"generator.json", "metrics.jsonl", "traces.jsonl"});
    return best;
  }

  // Systems: "nll" (train-qg), "finetuned" when the finetune stage has run,
  // and the reference questions.
  EvalReport evaluate() {
    auto nll = load_generator("train-qg");
    auto critic = load_critic();
    std::unique_ptr<Generator<double>> tuned;
    if (std::filesystem::exists(stage_dir("finetune") / "generator.json")) tuned = load_generator("finetune");
    const auto part = cfg_.str("eval.part");
    auto convs = load_teacher_corpus(split_file(part));
    const auto mode = decode_mode();
    const int max_len = static_cast<int>(cfg_.integer("eval.max_len"));
    BlendedReward rm(critic->answerer(), *critic, cfg_.num("rl.lambda1"));
    GeneratorQuestions<double> nll_q(*nll, "nll", mode, max_len, cfg_.seed());
    std::vector<const QuestionModel*> models{&nll_q};
    std::map<std::string, const Generator<double>*> scorers{{"nll", nll.get()}};
    std::unique_ptr<GeneratorQuestions<double>> tuned_q;
    if (tuned) {
      tuned_q = std::make_unique<GeneratorQuestions<double>>(*tuned, "finetuned", mode, max_len, cfg_.seed());
      models.push_back(tuned_q.get());
      scorers["finetuned"] = tuned.get();
    }
    ReferenceQuestions ref;
    models.push_back(&ref);
    auto report = evaluate_corpus<double>(models, rm, convs, scorers);
    const auto dir = begin_stage("evaluate");
    write_report(report, dir);
    finish_stage("evaluate", {"report.json", "report.md", "repetition.csv"});
    return report;
  }

  // Repetition curves recomputed from the per-turn questions of the
  // evaluation report.
  nlohmann::json analyze_repetition() {
    const auto src = stage_dir("evaluate") / "report.json";
    require(src, "evaluate");
    const auto report = nlohmann::json::parse(read_text(src));
    std::map<std::string, std::vector<Tokens>> questions;
    std::map<std::string, std::vector<std::vector<Tokens>>> histories;
    std::map<std::pair<std::string, std::string>, std::vector<Tokens>> seen;
    for (const auto& t : report.at("turns")) {
      const auto sys = t.at("system").get<std::string>();
      auto& prev = seen[{sys, t.at("conversation").get<std::string>()}];
      Tokens q = split_ws(t.at("question").get<std::string>());
      questions[sys].push_back(q);
      histories[sys].push_back(prev);
      prev.push_back(std::move(q));
    }
    nlohmann::json out = nlohmann::json::object();
    std::ostringstream csv;
    csv << "n,system,proportion\n";
    for (const auto& s : report.at("systems")) {
      const auto sys = s.at("name").get<std::string>();
      nlohmann::json curve = nlohmann::json::array();
      for (int n = 1; n <= kMaxRepetitionN; ++n) {
        const double p = ngram_repetition(questions[sys], histories[sys], n);
        curve.push_back(p);
        csv << n << ',' << sys << ',' << p << '\n';
      }
      out[sys] = curve;
    }
    const auto dir = begin_stage("analyze-repetition");
    std::ofstream(dir / "repetition.json") << out.dump(2) << '\n';
    std::ofstream(dir / "repetition.csv") << csv.str();
    finish_stage("analyze-repetition", {"repetition.json", "repetition.csv"});
    return out;
  }

  RewardBreakdown score_question(const std::string& part, const std::string& conversation, std::size_t turn,
                                 const std::string& question) {
    auto critic = load_critic();
    auto convs = load_teacher_corpus(split_file(part));
    for (const auto& c : convs) {
      if (c.id() != conversation) continue;
      if (turn >= c.size()) {
        throw std::out_of_range("turn " + std::to_string(turn) + " out of range for " + conversation + " (" +
                                std::to_string(c.size()) + " turns)");
      }
      BlendedReward rm(critic->answerer(), *critic, cfg_.num("rl.lambda1"));
      return rm.score(tokenize(question), c, turn);
    }
    throw std::out_of_range("no conversation '" + conversation + "' in the " + part + " partition");
  }

  nlohmann::json manifest() const {
    const auto p = out_ / "manifest.json";
    if (!std::filesystem::exists(p)) return {{"stages", nlohmann::json::array()}};
    return nlohmann::json::parse(read_text(p));
  }

 private:
  static nlohmann::json corpus_stats(const std::vector<GroundedConversation>& convs) {
    return {{"dialogues", convs.size()}, {"qa_pairs", count_turns(convs)}, {"entities", count_entities(convs)}};
  }

  static Tokens split_ws(const std::string& s) {
    Tokens out;
    std::istringstream is(s);
    for (std::string w; is >> w;) out.push_back(w);
    return out;
  }

  static void require(const std::filesystem::path& p, const std::string& stage) {
    if (!std::filesystem::exists(p)) {
      throw DependencyError("missing " + p.string() + "; run '" + stage + "' first");
    }
  }

  std::filesystem::path split_file(const std::string& part) const {
    if (part != "train" && part != "dev" && part != "test") throw ConfigError("unknown partition '" + part + "'");
    auto p = stage_dir("split") / (part + ".jsonl");
    require(p, "split");
    return p;
  }

  VocabOptions vocab_options(bool knowledge) const {
    return VocabOptions{cfg_.integer("vocab.min_count"), static_cast<std::size_t>(cfg_.integer("vocab.finetune_top_k")),
                        knowledge};
  }

  std::unique_ptr<Generator<double>> load_generator(const std::string& stage) const {
    const auto p = stage_dir(stage) / "generator.json";
    require(p, stage);
    return Generator<double>::from_checkpoint(Checkpoint::load(p));
  }

  std::unique_ptr<Critic<double>> load_critic() const {
    const auto p = stage_dir("train-critic") / "critic.json";
    require(p, "train-critic");
    return Critic<double>::from_checkpoint(Checkpoint::load(p));
  }

  DecodeMode decode_mode() const {
    const auto m = cfg_.str("eval.decode");
    if (m == "greedy") return DecodeMode::greedy;
    if (m == "sampled") return DecodeMode::sampled;
    throw ConfigError("eval.decode must be 'greedy' or 'sampled'");
  }

  std::filesystem::path begin_stage(const std::string& stage) {
    const auto dir = stage_dir(stage);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
  }

  void finish_stage(const std::string& stage, std::vector<std::string> artifacts) {
    const auto dir = stage_dir(stage);
    std::ofstream(dir / "run_config.json") << cfg_.to_json().dump(2) << '\n';
    artifacts.push_back("run_config.json");
    auto m = manifest();
    nlohmann::json stages = nlohmann::json::array();
    for (const char* name : kStages) {
      if (name == stage) {
        nlohmann::json files = nlohmann::json::array();
        for (const auto& a : artifacts) files.push_back(stage + "/" + a);
        stages.push_back({{"stage", stage}, {"artifacts", files}});
        continue;
      }
      for (const auto& s : m.at("stages")) {
        if (s.at("stage") == name) stages.push_back(s);
      }
    }
    m["stages"] = stages;
    m["run_config"] = cfg_.to_json();
    std::ofstream(out_ / "manifest.json") << m.dump(2) << '\n';
  }

  RunConfig cfg_;
  std::filesystem::path data_root_;
  std::filesystem::path out_;
};

}  // namespace pqg
