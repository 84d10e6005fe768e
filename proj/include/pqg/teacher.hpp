#pragma once

// The answering side. An answerer sees the hidden knowledge passage, the
// conversation so far and a question, and returns a span of the passage or
// abstains by selecting a CANNOTANSWER token appended to the passage.
//
// BidafTeacher is a reading-comprehension network in the BiDAF-with-self-
// attention style: word + character-CNN token features, BiGRU encoders,
// trilinear bidirectional attention, a residual self-attention block and
// start/end scorers. LexicalAnswerer is a parameter-free overlap heuristic.

#include "pqg/corpus.hpp"
#include "pqg/encoder.hpp"
#include "pqg/layers.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pqg {

inline constexpr const char* kCannotAnswer = "CANNOTANSWER";

// Token indices are inclusive and index the passage with the abstention token
// appended at position L; abstained <=> start == end == L.
struct AnswerSpan {
  long start = -1;
  long end = -1;
  bool abstained = false;
  Tokens tokens;     // passage tokens of the span, empty when abstained
  std::string text;  // knowledge substring, or CANNOTANSWER

  nlohmann::json to_json() const {
    return {{"start", start}, {"end", end}, {"abstained", abstained}, {"text", text}};
  }
};

// What the teacher sees when answering the question that follows `history`.
struct TeacherContext {
  const TopicSpec* topic = nullptr;
  std::span<const QAPair> history;
  const std::string* knowledge = nullptr;
  const TokenOffsets* passage = nullptr;

  static TeacherContext of(const GroundedConversation& c, std::size_t turn) {
    if (turn > c.size()) throw std::out_of_range("teacher context: turn out of range");
    return {&c.topic(), std::span<const QAPair>(c.turns().data(), turn), &c.knowledge(), &c.passage()};
  }
  std::size_t length() const { return passage->tokens.size(); }
};

inline AnswerSpan make_answer(const TeacherContext& ctx, long start, long end) {
  const long L = static_cast<long>(ctx.length());
  AnswerSpan a;
  a.start = start;
  a.end = end;
  if (start == L && end == L) {
    a.abstained = true;
    a.text = kCannotAnswer;
    return a;
  }
  if (start < 0 || end < start || end >= L) throw std::out_of_range("answer span outside the passage");
  const auto& p = *ctx.passage;
  a.tokens.assign(p.tokens.begin() + start, p.tokens.begin() + end + 1);
  const std::size_t b = p.spans[static_cast<std::size_t>(start)].first;
  const std::size_t e = p.spans[static_cast<std::size_t>(end)].second;
  a.text = ctx.knowledge->substr(b, e - b);
  return a;
}

// Gold token span of a reference answer: {L, L} for abstentions.
inline std::pair<long, long> gold_token_span(const TeacherContext& ctx, const QAPair& qa) {
  const long L = static_cast<long>(ctx.length());
  if (qa.abstained()) return {L, L};
  if (qa.span->end > ctx.knowledge->size() || qa.span->begin > qa.span->end) {
    throw std::out_of_range("gold span outside the knowledge text");
  }
  auto r = token_range(*ctx.passage, qa.span->begin, qa.span->end);
  if (r.first < 0) throw std::out_of_range("gold span covers no passage token");
  return r;
}

// Highest-scoring (start, end) with start <= end < L and end - start < cap,
// or the abstention pair (L, L). Scores are start[i] + end[j]. Ties go to the
// lower start, then the lower end.
template <typename T>
std::pair<long, long> select_span(const Matrix<T>& start_logits, const Matrix<T>& end_logits, int cap) {
  const long n = static_cast<long>(start_logits.rows());
  if (n < 1 || end_logits.rows() != n) throw std::invalid_argument("select_span: logits must have length L + 1");
  if (cap < 1) throw std::invalid_argument("select_span: span cap must be positive");
  const long L = n - 1;
  std::pair<long, long> best{L, L};
  T best_score = start_logits(L, 0) + end_logits(L, 0);
  bool abstain = true;
  for (long i = 0; i < L; ++i) {
    for (long j = i; j < std::min(L, i + cap); ++j) {
      const T s = start_logits(i, 0) + end_logits(j, 0);
      // The abstention pair has the highest start, so it loses ties.
      if (s > best_score || (abstain && s == best_score)) {
        best = {i, j};
        best_score = s;
        abstain = false;
      }
    }
  }
  return best;
}

class Answerer {
 public:
  virtual ~Answerer() = default;
  virtual AnswerSpan answer(const Tokens& question, const TeacherContext& ctx) const = 0;
};

// Picks the passage sentence sharing the most word types with the question
// (ignoring punctuation), and abstains when no sentence shares any.
class LexicalAnswerer : public Answerer {
 public:
  AnswerSpan answer(const Tokens& question, const TeacherContext& ctx) const override {
    if (question.empty()) throw std::invalid_argument("answer: empty question");
    const auto& toks = ctx.passage->tokens;
    const long L = static_cast<long>(toks.size());
    std::set<std::string> q;
    for (const auto& t : question) {
      if (!is_punct_token(t)) q.insert(t);
    }
    long best_start = L, best_end = L;
    int best = 0;
    long s = 0;
    for (long i = 0; i <= L; ++i) {
      const bool boundary = i == L || toks[static_cast<std::size_t>(i)] == "." || toks[static_cast<std::size_t>(i)] == "?" ||
                            toks[static_cast<std::size_t>(i)] == "!";
      if (!boundary) continue;
      const long e = std::min(i, L - 1);
      if (e >= s) {
        std::set<std::string> seen;
        for (long k = s; k <= e; ++k) {
          if (q.count(toks[static_cast<std::size_t>(k)])) seen.insert(toks[static_cast<std::size_t>(k)]);
        }
        if (static_cast<int>(seen.size()) > best) {
          best = static_cast<int>(seen.size());
          best_start = s;
          best_end = e;
        }
      }
      s = i + 1;
    }
    return make_answer(ctx, best_start, best_end);
  }

 private:
  static bool is_punct_token(const std::string& t) { return t.size() == 1 && text_detail::is_punct(static_cast<unsigned char>(t[0])); }
};

struct TeacherConfig {
  int embed_dim = 100;
  int hidden = 100;
  int char_dim = 16;
  int char_filters = 100;
  int char_width = 5;
  int history_depth = 1;  // previous answers marked in the passage
  int span_cap = 30;
  double dropout = 0.2;

  nlohmann::json to_json() const {
    return {{"embed_dim", embed_dim},       {"hidden", hidden},       {"char_dim", char_dim},
            {"char_filters", char_filters}, {"char_width", char_width}, {"history_depth", history_depth},
            {"span_cap", span_cap},         {"dropout", dropout}};
  }
  static TeacherConfig from_json(const nlohmann::json& j) {
    TeacherConfig c;
    c.embed_dim = j.at("embed_dim").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.char_dim = j.at("char_dim").get<int>();
    c.char_filters = j.at("char_filters").get<int>();
    c.char_width = j.at("char_width").get<int>();
    c.history_depth = j.at("history_depth").get<int>();
    c.span_cap = j.at("span_cap").get<int>();
    c.dropout = j.at("dropout").get<double>();
    return c;
  }
};

template <typename T>
struct SpanLogits {
  Expr<T> start;  // (L + 1) x 1
  Expr<T> end;
};

template <typename T>
Expr<T> span_cross_entropy(const SpanLogits<T>& lg, std::pair<long, long> gold) {
  return neg_log_softmax_pick(lg.start, static_cast<Index>(gold.first)) +
         neg_log_softmax_pick(lg.end, static_cast<Index>(gold.second));
}

template <typename T>
class BidafTeacher {
 public:
  static constexpr int kCharPad = 256;

  BidafTeacher() = default;

  // Registers parameters under `name` in `store`; `embedding` is the shared
  // word-embedding table (|V| x embed_dim).
  template <typename Rng>
  BidafTeacher(ParameterStore<T>& store, const std::string& name, const Vocabulary& vocab, Parameter<T>& embedding,
               TeacherConfig cfg, Rng& rng)
      : vocab_(&vocab), emb_(&embedding), cfg_(cfg) {
    if (embedding.cols() != cfg.embed_dim) throw std::invalid_argument("teacher: embedding width mismatch");
    const Index h = cfg.hidden;
    const Index tok = cfg.embed_dim + cfg.char_filters;
    char_emb_ = &store.add_uniform(name + ".char_emb", kCharPad + 1, cfg.char_dim, 0.1, rng);
    char_conv_ = Linear<T>(store, name + ".char_conv", Index(cfg.char_width) * cfg.char_dim, cfg.char_filters, rng);
    passage_rnn_ = BiGru<T>(store, name + ".passage", tok + cfg.history_depth, h, rng);
    question_rnn_ = BiGru<T>(store, name + ".question", tok, h, rng);
    biattn_ = TrilinearSimilarity<T>(store, name + ".biattn", 2 * h, rng);
    merge_ = Linear<T>(store, name + ".merge", 8 * h, 2 * h, rng);
    self_rnn_ = BiGru<T>(store, name + ".self_rnn", 2 * h, h, rng);
    self_sim_ = TrilinearSimilarity<T>(store, name + ".self_sim", 2 * h, rng);
    self_merge_ = Linear<T>(store, name + ".self_merge", 6 * h, 2 * h, rng);
    start_rnn_ = BiGru<T>(store, name + ".start_rnn", 2 * h, h, rng);
    start_ = Linear<T>(store, name + ".start", 2 * h, 1, rng);
    end_rnn_ = BiGru<T>(store, name + ".end_rnn", 4 * h, h, rng);
    end_ = Linear<T>(store, name + ".end", 2 * h, 1, rng);
  }

  const TeacherConfig& config() const { return cfg_; }
  Index question_dim() const { return 2 * cfg_.hidden; }

  // Max-pooled character CNN feature of one token (char_filters x 1).
  Expr<T> char_feature(Graph<T>& g, const std::string& token) const {
    std::vector<int> ids;
    for (unsigned char c : token) ids.push_back(c);
    while (static_cast<int>(ids.size()) < cfg_.char_width) ids.push_back(kCharPad);
    std::vector<Expr<T>> windows;
    for (std::size_t i = 0; i + static_cast<std::size_t>(cfg_.char_width) <= ids.size(); ++i) {
      std::vector<Expr<T>> w;
      for (int k = 0; k < cfg_.char_width; ++k) w.push_back(g.lookup(*char_emb_, ids[i + static_cast<std::size_t>(k)]));
      windows.push_back(concat_rows(w));
    }
    return max_over_cols(relu(char_conv_(g, concat_cols(windows))));
  }

  // Question states (2H x m) from the question BiGRU.
  Expr<T> encode_question(Graph<T>& g, const Tokens& question, const Dropout* drop = nullptr) const {
    if (question.empty()) throw std::invalid_argument("teacher: empty question");
    std::map<std::string, Expr<T>> cache;
    Seq<T> xs;
    for (const auto& t : question) xs.push_back(apply_dropout(token_feature(g, t, vocab_->id(t), cache), drop));
    return concat_cols(question_rnn_(g, xs).states);
  }

  SpanLogits<T> span_logits(Graph<T>& g, const TeacherContext& ctx, const Tokens& question,
                            const Dropout* drop = nullptr) const {
    const Expr<T> q = encode_question(g, question, drop);
    const auto& toks = ctx.passage->tokens;
    const std::size_t L = toks.size();
    if (L == 0) throw std::invalid_argument("teacher: empty knowledge passage");

    // Previous-answer markers, one feature per remembered turn.
    Matrix<T> marks = Matrix<T>::Zero(cfg_.history_depth, static_cast<Index>(L + 1));
    for (int d = 0; d < cfg_.history_depth; ++d) {
      if (ctx.history.size() < static_cast<std::size_t>(d + 1)) break;
      const QAPair& prev = ctx.history[ctx.history.size() - 1 - static_cast<std::size_t>(d)];
      if (prev.abstained() || prev.span->end > ctx.knowledge->size()) continue;
      auto r = token_range(*ctx.passage, prev.span->begin, prev.span->end);
      for (long k = r.first; k >= 0 && k <= r.second; ++k) marks(d, k) = T(1);
    }

    std::map<std::string, Expr<T>> cache;
    Seq<T> xs;
    for (std::size_t i = 0; i <= L; ++i) {
      const bool abstain = i == L;
      const std::string& t = abstain ? std::string(kCannotAnswer) : toks[i];
      const int id = abstain ? vocab_->id(sym::cannot_answer) : vocab_->id(t);
      Expr<T> f = apply_dropout(token_feature(g, t, id, cache), drop);
      xs.push_back(concat_rows<T>({f, g.constant(marks.col(static_cast<Index>(i)))}));
    }
    Expr<T> c = concat_cols(passage_rnn_(g, xs).states);                         // 2H x n
    Expr<T> att = relu(merge_(g, bidirectional_attention(g, biattn_, c, q)));     // 2H x n

    // Residual self-attention; a position never attends to itself.
    Expr<T> s = concat_cols(self_rnn_(g, columns(att, drop)).states);
    const Index n = static_cast<Index>(L + 1);
    Matrix<T> mask = Matrix<T>::Zero(n, n);
    mask.diagonal().setConstant(T(-1e30));
    Expr<T> sim = self_sim_(g, s, s) + g.constant(mask);
    Expr<T> self = matmul(s, softmax_cols(transpose(sim)));
    Expr<T> x = att + relu(self_merge_(g, concat_rows<T>({s, self, cmul(s, self)})));

    Expr<T> hs = concat_cols(start_rnn_(g, columns(x, drop)).states);
    Expr<T> start = transpose(start_(g, hs));
    Expr<T> he = concat_cols(end_rnn_(g, columns(concat_rows<T>({x, hs}), drop)).states);
    Expr<T> end = transpose(end_(g, he));
    return {start, end};
  }

  AnswerSpan answer(const Tokens& question, const TeacherContext& ctx) const {
    Graph<T> g(false);
    auto lg = span_logits(g, ctx, question);
    auto [i, j] = select_span(lg.start.value(), lg.end.value(), cfg_.span_cap);
    return make_answer(ctx, i, j);
  }

  // Start plus end cross-entropy of the gold span.
  Expr<T> example_loss(Graph<T>& g, const TeacherContext& ctx, const Tokens& question, std::pair<long, long> gold,
                       const Dropout* drop = nullptr) const {
    const long L = static_cast<long>(ctx.length());
    if (gold.first < 0 || gold.second < gold.first || gold.second > L || (gold.second == L && gold.first != L)) {
      throw std::out_of_range("qa_loss: gold span out of range");
    }
    return span_cross_entropy(span_logits(g, ctx, question, drop), gold);
  }

 private:
  Expr<T> token_feature(Graph<T>& g, const std::string& tok, int id, std::map<std::string, Expr<T>>& cache) const {
    auto it = cache.find(tok);
    if (it == cache.end()) it = cache.emplace(tok, char_feature(g, tok)).first;
    return concat_rows<T>({g.lookup(*emb_, id), it->second});
  }

  static Seq<T> columns(Expr<T> m, const Dropout* drop) {
    Seq<T> out;
    for (Index j = 0; j < m.cols(); ++j) out.push_back(apply_dropout(col(m, j), drop));
    return out;
  }

  const Vocabulary* vocab_ = nullptr;
  Parameter<T>* emb_ = nullptr;
  TeacherConfig cfg_;
  Parameter<T>* char_emb_ = nullptr;
  Linear<T> char_conv_;
  BiGru<T> passage_rnn_;
  BiGru<T> question_rnn_;
  TrilinearSimilarity<T> biattn_;
  Linear<T> merge_;
  BiGru<T> self_rnn_;
  TrilinearSimilarity<T> self_sim_;
  Linear<T> self_merge_;
  BiGru<T> start_rnn_;
  Linear<T> start_;
  BiGru<T> end_rnn_;
  Linear<T> end_;
};

// One training example for the answerer: question `turn` of `conversation`.
struct QAExample {
  const GroundedConversation* conversation = nullptr;
  std::size_t turn = 0;
};

// Mean over the batch of start + end span cross-entropy; abstentions are the
// gold span (L, L) on the appended token.
template <typename T>
Expr<T> qa_loss(Graph<T>& g, const BidafTeacher<T>& teacher, std::span<const QAExample> batch,
                const Dropout* drop = nullptr) {
  if (batch.empty()) throw std::invalid_argument("qa_loss: empty batch");
  std::vector<Expr<T>> terms;
  for (const auto& ex : batch) {
    const auto ctx = TeacherContext::of(*ex.conversation, ex.turn);
    const QAPair& qa = ex.conversation->turns().at(ex.turn);
    terms.push_back(teacher.example_loss(g, ctx, qa.question, gold_token_span(ctx, qa), drop));
  }
  return (T(1) / static_cast<T>(terms.size())) * sum(terms);
}

// Answerer adapter over a trained network.
template <typename T>
class NeuralAnswerer : public Answerer {
 public:
  explicit NeuralAnswerer(const BidafTeacher<T>& teacher) : teacher_(&teacher) {}
  AnswerSpan answer(const Tokens& question, const TeacherContext& ctx) const override {
    return teacher_->answer(question, ctx);
  }

 private:
  const BidafTeacher<T>* teacher_;
};

// Token-level F1 between a predicted and a gold answer; two abstentions
// score 1, an abstention against a span scores 0.
inline double answer_f1(const AnswerSpan& pred, const QAPair& gold) {
  if (pred.abstained || gold.abstained()) return pred.abstained && gold.abstained() ? 1.0 : 0.0;
  std::map<std::string, int> g;
  for (const auto& t : gold.answer) ++g[t];
  int common = 0;
  for (const auto& t : pred.tokens) {
    auto it = g.find(t);
    if (it != g.end() && it->second > 0) {
      ++common;
      --it->second;
    }
  }
  if (common == 0) return 0.0;
  const double p = static_cast<double>(common) / static_cast<double>(pred.tokens.size());
  const double r = static_cast<double>(common) / static_cast<double>(gold.answer.size());
  return 2 * p * r / (p + r);
}

}  // namespace pqg
