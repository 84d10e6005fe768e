#pragma once

// Corpus metrics and comparison reports: perplexity, ROUGE-L F1, mean
// informativeness and specificity, and n-gram repetition against earlier
// questions of the same conversation.

#include "pqg/critic.hpp"
#include "pqg/log.hpp"
#include "pqg/qgen.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace pqg {

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l_f1(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) {
    log::debug("rouge_l_f1: empty input scored 0");
    return 0.0;
  }
  const double lcs = static_cast<double>(lcs_length(hyp, ref));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(hyp.size());
  const double r = lcs / static_cast<double>(ref.size());
  return 2 * p * r / (p + r);
}

// Share of the n-grams of all questions that already occur in an earlier
// question of the same conversation, pooled over the corpus. histories[i] are
// the questions before questions[i].
inline double ngram_repetition(const std::vector<Tokens>& questions, const std::vector<std::vector<Tokens>>& histories,
                               int n) {
  if (n < 1) throw std::invalid_argument("ngram_repetition: n must be at least 1");
  if (questions.size() != histories.size()) throw std::invalid_argument("ngram_repetition: size mismatch");
  const auto un = static_cast<std::size_t>(n);
  long total = 0, repeated = 0;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    std::set<Tokens> seen;
    for (const auto& h : histories[i]) {
      for (std::size_t k = 0; k + un <= h.size(); ++k) seen.emplace(h.begin() + static_cast<long>(k), h.begin() + static_cast<long>(k + un));
    }
    const Tokens& q = questions[i];
    for (std::size_t k = 0; k + un <= q.size(); ++k) {
      ++total;
      repeated += seen.count(Tokens(q.begin() + static_cast<long>(k), q.begin() + static_cast<long>(k + un)));
    }
  }
  return total ? static_cast<double>(repeated) / static_cast<double>(total) : 0.0;
}

// Produces the question for turn `turn` of a conversation, given the
// student-side view of everything before it.
class QuestionModel {
 public:
  virtual ~QuestionModel() = default;
  virtual std::string name() const = 0;
  virtual Tokens question(const Conversation& conv, std::size_t turn) const = 0;
};

class ReferenceQuestions : public QuestionModel {
 public:
  std::string name() const override { return "reference"; }
  Tokens question(const Conversation& conv, std::size_t turn) const override { return conv.turns().at(turn).question; }
};

template <typename T = double>
class GeneratorQuestions : public QuestionModel {
 public:
  GeneratorQuestions(const Generator<T>& gen, std::string name, DecodeMode mode, int max_len, std::uint64_t seed = 1)
      : gen_(&gen), name_(std::move(name)), mode_(mode), max_len_(max_len), seed_(seed) {}
  std::string name() const override { return name_; }
  Tokens question(const Conversation& conv, std::size_t turn) const override {
    Graph<T> g(false);
    auto enc = gen_->encode_conversation(g, conv, turn);
    // Sampled decoding reseeds per turn so results do not depend on order.
    std::mt19937_64 rng(seed_ ^ (std::hash<std::string>{}(conv.id()) + 0x9e3779b97f4a7c15ULL * (turn + 1)));
    return gen_->decode(g, gen_->context(g, enc, turn), mode_, max_len_, &rng).tokens;
  }
  const Generator<T>& generator() const { return *gen_; }

 private:
  const Generator<T>* gen_;
  std::string name_;
  DecodeMode mode_;
  int max_len_;
  std::uint64_t seed_;
};

struct TurnRecord {
  std::string conversation;
  std::size_t turn = 0;
  std::string system;
  std::string question;
  std::string predicted_answer;
  double informativeness = 0.0;
  double specificity = 0.0;
  std::optional<double> rouge_l;
  nlohmann::json to_json() const {
    nlohmann::json j{{"conversation", conversation}, {"turn", turn}, {"system", system}, {"question", question},
                     {"predicted_answer", predicted_answer}, {"I", informativeness}, {"S", specificity}};
    j["rouge_l"] = rouge_l ? nlohmann::json(*rouge_l) : nlohmann::json();
    return j;
  }
};

inline constexpr int kMaxRepetitionN = 10;

struct SystemScores {
  std::string name;
  std::optional<double> pplx;
  std::optional<double> rouge_l;
  double info = 0.0;
  double spec = 0.0;
  long turns = 0;
  long failed = 0;
  std::map<int, double> repetition;  // n -> proportion

  nlohmann::json to_json() const {
    nlohmann::json rep = nlohmann::json::object();
    for (const auto& [n, p] : repetition) rep[std::to_string(n)] = p;
    return {{"name", name},
            {"pplx", pplx ? nlohmann::json(*pplx) : nlohmann::json()},
            {"rouge_l", rouge_l ? nlohmann::json(*rouge_l) : nlohmann::json()},
            {"info", info},
            {"spec", spec},
            {"turns", turns},
            {"failed", failed},
            {"repetition", rep}};
  }
};

struct EvalReport {
  std::vector<SystemScores> systems;
  std::vector<TurnRecord> records;

  const SystemScores& system(const std::string& name) const {
    for (const auto& s : systems) {
      if (s.name == name) return s;
    }
    throw std::out_of_range("no system named " + name);
  }

  nlohmann::json to_json() const {
    nlohmann::json sys = nlohmann::json::array(), recs = nlohmann::json::array();
    for (const auto& s : systems) sys.push_back(s.to_json());
    for (const auto& r : records) recs.push_back(r.to_json());
    return {{"systems", sys}, {"turns", recs}};
  }

  std::string to_markdown() const {
    auto cell = [](const std::optional<double>& v, const char* fmt) {
      if (!v) return std::string("-");
      char buf[32];
      std::snprintf(buf, sizeof buf, fmt, *v);
      return std::string(buf);
    };
    std::ostringstream os;
    os << "| system | pplx | rouge-l | info | spec | turns | failed |\n";
    os << "|---|---|---|---|---|---|---|\n";
    for (const auto& s : systems) {
      os << "| " << s.name << " | " << cell(s.pplx, "%.2f") << " | " << cell(s.rouge_l, "%.4f") << " | "
         << cell(s.info, "%.4f") << " | " << cell(s.spec, "%.4f") << " | " << s.turns << " | " << s.failed << " |\n";
    }
    os << "\n| n |";
    for (const auto& s : systems) os << ' ' << s.name << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < systems.size(); ++i) os << "---|";
    os << '\n';
    for (int n = 1; n <= kMaxRepetitionN; ++n) {
      os << "| " << n << " |";
      for (const auto& s : systems) os << ' ' << cell(s.repetition.at(n), "%.4f") << " |";
      os << '\n';
    }
    return os.str();
  }

  std::string repetition_csv() const {
    std::ostringstream os;
    os << "n,system,proportion\n";
    for (const auto& s : systems) {
      for (const auto& [n, p] : s.repetition) os << n << ',' << s.name << ',' << p << '\n';
    }
    return os.str();
  }
};

// Scores every turn of `convs` for each model. Models see the reference
// history; rewards are computed against the teacher-side context. ROUGE-L is
// reported for every system except the reference itself; perplexity when
// `scorer` is given for that system.
template <typename T = double>
EvalReport evaluate_corpus(const std::vector<const QuestionModel*>& models, const RewardModel& rm,
                           const std::vector<GroundedConversation>& convs,
                           const std::map<std::string, const Generator<T>*>& scorers = {}) {
  EvalReport report;
  for (const QuestionModel* m : models) {
    SystemScores s;
    s.name = m->name();
    const bool is_reference = dynamic_cast<const ReferenceQuestions*>(m) != nullptr;
    double rouge = 0.0;
    std::vector<Tokens> questions;
    std::vector<std::vector<Tokens>> histories;
    for (const auto& c : convs) {
      std::vector<Tokens> generated;
      for (std::size_t j = 0; j < c.size(); ++j) {
        TurnRecord rec;
        rec.conversation = c.id();
        rec.turn = j;
        rec.system = s.name;
        try {
          Tokens q = m->question(c.student(), j);
          rec.question = join(q);
          auto r = rm.score(q, c, j);
          rec.informativeness = r.informativeness;
          rec.specificity = r.specificity;
          rec.predicted_answer = r.predicted_answer.text;
          if (!is_reference) {
            rec.rouge_l = rouge_l_f1(q, c.turns()[j].question);
            rouge += *rec.rouge_l;
          }
          s.info += rec.informativeness;
          s.spec += rec.specificity;
          ++s.turns;
          questions.push_back(q);
          histories.push_back(generated);
          generated.push_back(std::move(q));
          report.records.push_back(std::move(rec));
        } catch (const std::exception& e) {
          ++s.failed;
          log::warn("evaluate: ", s.name, " failed on ", c.id(), " turn ", j, ": ", e.what());
        }
      }
    }
    if (s.turns) {
      s.info /= static_cast<double>(s.turns);
      s.spec /= static_cast<double>(s.turns);
      if (!is_reference) s.rouge_l = rouge / static_cast<double>(s.turns);
    }
    for (int n = 1; n <= kMaxRepetitionN; ++n) s.repetition[n] = ngram_repetition(questions, histories, n);
    if (auto it = scorers.find(s.name); it != scorers.end()) {
      s.pplx = std::exp(corpus_nll(*it->second, convs).per_token());
    }
    report.systems.push_back(std::move(s));
  }
  return report;
}

inline void write_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "report.json") << report.to_json().dump(2) << '\n';
  std::ofstream(dir / "report.md") << report.to_markdown();
  std::ofstream(dir / "repetition.csv") << report.repetition_csv();
}

}  // namespace pqg
