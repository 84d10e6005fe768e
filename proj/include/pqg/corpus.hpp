#pragma once

// Conversation data model, JSONL corpus I/O, entity-disjoint splitting and
// the question pools used for negative sampling.
//
// Two views of a conversation exist. `Conversation` is what the question
// generator (the student) sees: topic and question/answer turns, with no
// knowledge text anywhere in the type. `GroundedConversation` adds the hidden
// knowledge passage and is only handed to the answering side.

#include "pqg/log.hpp"
#include "pqg/text.hpp"
#include "pqg/vocab.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace pqg {

struct TopicSpec {
  std::string entity_title;
  std::string background;
  std::string section_title;
};

// Byte offsets [begin, end) into the knowledge text.
struct CharSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool operator==(const CharSpan&) const = default;
};

struct QAPair {
  std::string question_text;
  std::string answer_text;
  Tokens question;
  Tokens answer;
  std::optional<CharSpan> span;  // empty: the teacher abstained

  bool abstained() const { return !span.has_value(); }
};

class Conversation {
 public:
  Conversation() = default;
  Conversation(std::string id, TopicSpec topic, std::vector<QAPair> turns)
      : id_(std::move(id)), topic_(std::move(topic)), turns_(std::move(turns)) {}

  const std::string& id() const { return id_; }
  const TopicSpec& topic() const { return topic_; }
  const std::vector<QAPair>& turns() const { return turns_; }
  std::size_t size() const { return turns_.size(); }

 private:
  std::string id_;
  TopicSpec topic_;
  std::vector<QAPair> turns_;
};

class GroundedConversation {
 public:
  GroundedConversation() = default;
  GroundedConversation(Conversation conv, std::string knowledge)
      : conv_(std::move(conv)), knowledge_(std::move(knowledge)), passage_(tokenize_with_offsets(knowledge_)) {}

  const Conversation& student() const { return conv_; }
  const std::string& id() const { return conv_.id(); }
  const TopicSpec& topic() const { return conv_.topic(); }
  const std::vector<QAPair>& turns() const { return conv_.turns(); }
  std::size_t size() const { return conv_.size(); }

  const std::string& knowledge() const { return knowledge_; }
  const TokenOffsets& passage() const { return passage_; }

 private:
  Conversation conv_;
  std::string knowledge_;
  TokenOffsets passage_;
};

enum class Side { student, teacher };

struct DatasetSplit {
  std::vector<GroundedConversation> train;
  std::vector<GroundedConversation> dev;
  std::vector<GroundedConversation> test;
};

struct CorpusError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace corpus_detail {

inline TopicSpec parse_topic(const nlohmann::json& rec) {
  TopicSpec t{rec.at("entity").get<std::string>(), rec.at("background").get<std::string>(),
              rec.at("section_title").get<std::string>()};
  if (tokenize(t.entity_title).empty() || tokenize(t.background).empty() || tokenize(t.section_title).empty()) {
    throw CorpusError("topic fields must be non-empty");
  }
  return t;
}

// Parses the turns of a record. With `knowledge` present, spans are checked
// against it and the answer must tokenize like the span text.
inline std::vector<QAPair> parse_turns(const nlohmann::json& rec, const std::string* knowledge) {
  const auto& turns = rec.at("turns");
  if (!turns.is_array() || turns.empty()) throw CorpusError("conversation has no turns");
  std::vector<QAPair> out;
  for (const auto& t : turns) {
    QAPair p;
    p.question_text = t.at("q").get<std::string>();
    p.answer_text = t.at("a").get<std::string>();
    p.question = tokenize(p.question_text);
    p.answer = tokenize(p.answer_text);
    if (p.question.empty()) throw CorpusError("empty question");
    const auto& span = t.at("span");
    if (!span.is_null()) {
      if (!span.is_array() || span.size() != 2) throw CorpusError("span must be [start, end] or null");
      const long b = span[0].get<long>();
      const long e = span[1].get<long>();
      if (b < 0 || e < b) throw CorpusError("span has end < start or negative start");
      p.span = CharSpan{static_cast<std::size_t>(b), static_cast<std::size_t>(e)};
      if (knowledge) {
        if (p.span->end > knowledge->size()) throw CorpusError("span exceeds knowledge length");
        const Tokens span_toks = tokenize(std::string_view(*knowledge).substr(p.span->begin, p.span->end - p.span->begin));
        if (span_toks != p.answer) throw CorpusError("answer text does not match its span");
        if (span_toks.empty()) throw CorpusError("span covers no tokens");
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

template <typename F>
void for_each_line(const std::filesystem::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open corpus file " + path.string());
  std::string line;
  std::size_t lineno = 0;
  bool any = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    any = true;
    f(line, lineno);
  }
  if (!any) throw CorpusError("corpus file is empty: " + path.string());
}

inline std::string record_id(const nlohmann::json& rec, std::size_t lineno) {
  if (rec.is_object() && rec.contains("id") && rec["id"].is_string()) return rec["id"].get<std::string>();
  return "line " + std::to_string(lineno);
}

}  // namespace corpus_detail

// Student-side loader: the knowledge field of each record is never read.
inline std::vector<Conversation> load_student_corpus(const std::filesystem::path& path) {
  std::vector<Conversation> out;
  corpus_detail::for_each_line(path, [&](const std::string& line, std::size_t lineno) {
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
      out.emplace_back(rec.at("id").get<std::string>(), corpus_detail::parse_topic(rec),
                       corpus_detail::parse_turns(rec, nullptr));
    } catch (const std::exception& e) {
      log::warn("rejected record ", corpus_detail::record_id(rec, lineno), ": ", e.what());
    }
  });
  return out;
}

inline std::vector<GroundedConversation> load_teacher_corpus(const std::filesystem::path& path) {
  std::vector<GroundedConversation> out;
  corpus_detail::for_each_line(path, [&](const std::string& line, std::size_t lineno) {
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
      const auto& k = rec.at("knowledge");
      if (!k.is_string() || k.get<std::string>().empty()) throw CorpusError("teacher side requires knowledge text");
      std::string knowledge = k.get<std::string>();
      auto turns = corpus_detail::parse_turns(rec, &knowledge);
      out.emplace_back(Conversation(rec.at("id").get<std::string>(), corpus_detail::parse_topic(rec), std::move(turns)),
                       std::move(knowledge));
    } catch (const std::exception& e) {
      log::warn("rejected record ", corpus_detail::record_id(rec, lineno), ": ", e.what());
    }
  });
  return out;
}

template <Side S>
auto load_corpus(const std::filesystem::path& path) {
  if constexpr (S == Side::student) {
    return load_student_corpus(path);
  } else {
    return load_teacher_corpus(path);
  }
}

inline nlohmann::json to_record(const GroundedConversation& c) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : c.turns()) {
    nlohmann::json span = t.span ? nlohmann::json::array({t.span->begin, t.span->end}) : nlohmann::json();
    turns.push_back({{"q", t.question_text}, {"a", t.answer_text}, {"span", span}});
  }
  return {{"id", c.id()},
          {"entity", c.topic().entity_title},
          {"background", c.topic().background},
          {"section_title", c.topic().section_title},
          {"knowledge", c.knowledge()},
          {"turns", turns}};
}

inline void write_corpus(const std::filesystem::path& path, const std::vector<GroundedConversation>& convs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot write " + path.string());
  for (const auto& c : convs) out << to_record(c).dump() << '\n';
}

inline std::size_t count_turns(const std::vector<GroundedConversation>& convs) {
  std::size_t n = 0;
  for (const auto& c : convs) n += c.size();
  return n;
}

inline std::size_t count_entities(const std::vector<GroundedConversation>& convs) {
  std::set<std::string> e;
  for (const auto& c : convs) e.insert(c.topic().entity_title);
  return e.size();
}

// ---------------------------------------------------------------------------
// QuAC import

namespace corpus_detail {
// Byte offset of the code point with index `cp` in UTF-8 `s`.
inline std::size_t codepoint_to_byte(const std::string& s, std::size_t cp) {
  std::size_t count = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if ((static_cast<unsigned char>(s[i]) & 0xC0) != 0x80) {
      if (count == cp) return i;
      ++count;
    }
  }
  if (count == cp) return s.size();
  throw CorpusError("character offset beyond text");
}
inline std::size_t codepoint_length(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}
}  // namespace corpus_detail

// Converts a QuAC json file (data -> paragraphs -> qas) into conversations.
// The trailing CANNOTANSWER marker is stripped from the context; code-point
// answer offsets become byte offsets.
inline std::vector<GroundedConversation> import_quac(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open QuAC file " + path.string());
  nlohmann::json doc = nlohmann::json::parse(in);
  std::vector<GroundedConversation> out;
  for (const auto& article : doc.at("data")) {
    TopicSpec topic{article.at("title").get<std::string>(), article.value("background", std::string()),
                    article.value("section_title", std::string())};
    for (const auto& para : article.at("paragraphs")) {
      const std::string id = para.value("id", std::string());
      try {
        std::string context = para.at("context").get<std::string>();
        static const std::string marker = "CANNOTANSWER";
        std::size_t cut = context.size();
        if (context.size() >= marker.size() && context.compare(context.size() - marker.size(), marker.size(), marker) == 0) {
          cut = context.size() - marker.size();
          while (cut > 0 && context[cut - 1] == ' ') --cut;
        }
        std::string knowledge = context.substr(0, cut);
        std::vector<QAPair> turns;
        for (const auto& qa : para.at("qas")) {
          QAPair p;
          p.question_text = qa.at("question").get<std::string>();
          const auto& ans = qa.contains("orig_answer") ? qa.at("orig_answer") : qa.at("answers").at(0);
          p.answer_text = ans.at("text").get<std::string>();
          p.question = tokenize(p.question_text);
          p.answer = tokenize(p.answer_text);
          if (p.answer_text != marker) {
            const std::size_t start_cp = ans.at("answer_start").get<std::size_t>();
            const std::size_t b = corpus_detail::codepoint_to_byte(context, start_cp);
            const std::size_t e = corpus_detail::codepoint_to_byte(context, start_cp + corpus_detail::codepoint_length(p.answer_text));
            if (e > knowledge.size()) throw CorpusError("answer span runs into the abstention marker");
            p.span = CharSpan{b, e};
          }
          turns.push_back(std::move(p));
        }
        if (turns.empty()) throw CorpusError("dialogue without questions");
        if (tokenize(topic.background).empty() || tokenize(topic.section_title).empty()) {
          throw CorpusError("missing topic metadata");
        }
        out.emplace_back(Conversation(id, topic, std::move(turns)), std::move(knowledge));
      } catch (const std::exception& e) {
        log::warn("rejected QuAC dialogue ", id, ": ", e.what());
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

// Entity-disjoint train/dev split of `convs`. Entities are shuffled with
// `seed` and greedily packed into dev while the dev size stays within 10% of
// `dev_target`.
inline std::pair<std::vector<GroundedConversation>, std::vector<GroundedConversation>> split_by_entity(
    const std::vector<GroundedConversation>& convs, std::size_t dev_target, std::uint64_t seed) {
  if (dev_target == 0 || dev_target * 2 > convs.size()) {
    throw std::invalid_argument("dev_target must be positive and at most half of the corpus");
  }
  std::map<std::string, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < convs.size(); ++i) buckets[convs[i].topic().entity_title].push_back(i);
  std::vector<std::string> entities;
  for (const auto& [e, idx] : buckets) entities.push_back(e);
  std::mt19937_64 rng(seed);
  std::shuffle(entities.begin(), entities.end(), rng);

  const double upper = static_cast<double>(dev_target) * 1.1;
  const double lower = static_cast<double>(dev_target) * 0.9;
  std::set<std::string> dev_entities;
  std::size_t dev_count = 0;
  for (const auto& e : entities) {
    if (static_cast<double>(dev_count) >= lower && dev_count >= dev_target) break;
    const std::size_t n = buckets[e].size();
    if (static_cast<double>(dev_count + n) > upper) continue;
    dev_entities.insert(e);
    dev_count += n;
    if (dev_count >= dev_target) break;
  }
  if (static_cast<double>(dev_count) < lower) {
    throw std::runtime_error("could not pack a dev partition within 10% of the target size");
  }
  std::pair<std::vector<GroundedConversation>, std::vector<GroundedConversation>> out;
  for (const auto& c : convs) {
    (dev_entities.count(c.topic().entity_title) ? out.second : out.first).push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary and question pools

struct VocabOptions {
  long min_count = 2;
  std::size_t finetune_top_k = 1000;
  bool include_knowledge = false;
};

namespace corpus_detail {

template <typename Conv>
void count_student_tokens(const Conv& c, std::map<std::string, long>& counts) {
  auto add = [&](const Tokens& t) {
    for (const auto& w : t) ++counts[w];
  };
  add(tokenize(c.topic().entity_title));
  add(tokenize(c.topic().background));
  add(tokenize(c.topic().section_title));
  for (const auto& t : c.turns()) {
    add(t.question);
    add(t.answer);
  }
}

}  // namespace corpus_detail

inline Vocabulary build_vocabulary(const std::vector<GroundedConversation>& train, const VocabOptions& opt) {
  if (train.empty()) throw std::invalid_argument("build_vocabulary: empty training set");
  std::map<std::string, long> counts;
  for (const auto& c : train) {
    corpus_detail::count_student_tokens(c, counts);
    if (opt.include_knowledge) {
      for (const auto& w : c.passage().tokens) ++counts[w];
    }
  }
  return Vocabulary::from_counts(counts, opt.min_count, opt.finetune_top_k);
}

// Student-side corpora carry no knowledge text; include_knowledge must be off.
inline Vocabulary build_vocabulary(const std::vector<Conversation>& train, const VocabOptions& opt) {
  if (train.empty()) throw std::invalid_argument("build_vocabulary: empty training set");
  if (opt.include_knowledge) throw std::invalid_argument("build_vocabulary: student corpus has no knowledge text");
  std::map<std::string, long> counts;
  for (const auto& c : train) corpus_detail::count_student_tokens(c, counts);
  return Vocabulary::from_counts(counts, opt.min_count, opt.finetune_top_k);
}

// Questions whose tokenized form occurs at least twice in `train`, each once,
// ordered by descending frequency then lexicographically.
template <typename ConvRange>
std::vector<Tokens> mine_frequent_questions(const ConvRange& train) {
  std::map<Tokens, long> counts;
  for (const auto& c : train) {
    for (const auto& t : c.turns()) ++counts[t.question];
  }
  std::vector<std::pair<Tokens, long>> frequent;
  for (auto& [q, n] : counts) {
    if (n >= 2) frequent.emplace_back(q, n);
  }
  std::stable_sort(frequent.begin(), frequent.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<Tokens> out;
  out.reserve(frequent.size());
  for (auto& [q, n] : frequent) out.push_back(q);
  return out;
}

struct Negatives {
  std::optional<Tokens> frequent;
  std::optional<Tokens> in_conversation;
};

// One frequent-pool negative and one negative drawn from the other questions
// of the same conversation. Neither ever equals the true question.
template <typename Conv, typename Rng>
Negatives sample_negatives(const Conv& conv, std::size_t turn_idx, const std::vector<Tokens>& pool, Rng& rng) {
  if (turn_idx >= conv.turns().size()) throw std::out_of_range("sample_negatives: turn index out of range");
  if (pool.empty()) throw std::invalid_argument("sample_negatives: empty frequent-question pool");
  const Tokens& positive = conv.turns()[turn_idx].question;
  Negatives out;

  std::vector<std::size_t> pool_idx;
  pool_idx.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i] != positive) pool_idx.push_back(i);
  }
  if (!pool_idx.empty()) {
    std::uniform_int_distribution<std::size_t> d(0, pool_idx.size() - 1);
    out.frequent = pool[pool_idx[d(rng)]];
  } else {
    log::debug("no frequent negative for ", conv.id(), " turn ", turn_idx);
  }

  std::vector<std::size_t> others;
  for (std::size_t j = 0; j < conv.turns().size(); ++j) {
    if (j != turn_idx && conv.turns()[j].question != positive) others.push_back(j);
  }
  if (!others.empty()) {
    std::uniform_int_distribution<std::size_t> d(0, others.size() - 1);
    out.in_conversation = conv.turns()[others[d(rng)]].question;
  } else {
    log::debug("no in-conversation negative for ", conv.id(), " turn ", turn_idx);
  }
  return out;
}

}  // namespace pqg
