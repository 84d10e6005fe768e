#pragma once

// Question generator: hierarchical encoder over the shared topic and the
// conversation so far, and an attentional LSTM decoder whose output
// projection is tied to the input embedding table.

#include "pqg/checkpoint.hpp"
#include "pqg/encoder.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pqg {

struct GeneratorConfig {
  int embed_dim = 100;
  int hidden = 256;
  int layers = 1;
  double dropout = 0.3;
  int max_len = 30;
  std::uint64_t init_seed = 1;

  nlohmann::json to_json() const {
    return {{"embed_dim", embed_dim}, {"hidden", hidden},   {"layers", layers},
            {"dropout", dropout},     {"max_len", max_len}, {"init_seed", init_seed}};
  }
  static GeneratorConfig from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    c.embed_dim = j.at("embed_dim").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.layers = j.at("layers").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.max_len = j.at("max_len").get<int>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    return c;
  }
};

enum class DecodeMode { greedy, sampled };

inline const char* to_string(DecodeMode m) { return m == DecodeMode::greedy ? "greedy" : "sampled"; }

template <typename T>
struct DecodeResult {
  Ids ids;                              // generated tokens, without the end symbol
  Tokens tokens;
  std::vector<double> token_logprobs;   // one per emitted step, including the end symbol if emitted
  double total_logprob = 0.0;
  DecodeMode mode = DecodeMode::greedy;
  bool ended = false;                   // true when the end symbol was produced
  std::optional<Expr<T>> logprob;       // differentiable total log-probability (tracked graphs only)
};

// Per-conversation teacher-forcing statistics.
struct NllStats {
  double total = 0.0;  // summed token negative log-likelihood
  long tokens = 0;     // target tokens, end symbols included
  long pairs = 0;      // question/answer pairs
  double per_pair() const { return pairs ? total / static_cast<double>(pairs) : 0.0; }
  double per_token() const { return tokens ? total / static_cast<double>(tokens) : 0.0; }
  NllStats& operator+=(const NllStats& o) {
    total += o.total;
    tokens += o.tokens;
    pairs += o.pairs;
    return *this;
  }
};

template <typename T = double>
class Generator {
 public:
  Generator(Vocabulary vocab, GeneratorConfig cfg) : vocab_(std::move(vocab)), cfg_(cfg) {
    if (cfg_.embed_dim < 1 || cfg_.hidden < 1) throw std::invalid_argument("generator dimensions must be positive");
    std::mt19937_64 rng(cfg_.init_seed);
    const Index e = cfg_.embed_dim;
    const Index h = cfg_.hidden;
    emb_ = &params_.add_uniform("qg.emb", vocab_.size(), e, 0.1, rng);
    emb_->set_row_mask(vocab_.finetune_mask());
    encoder_ = HierarchicalEncoder<T>(params_, "qg.enc", *emb_, EncoderDims{e, h, cfg_.layers}, rng);
    for (int l = 0; l < cfg_.layers; ++l) {
      dec_init_.emplace_back(params_, "qg.dec_init.l" + std::to_string(l), 4 * h, h, rng);
    }
    dec_rnn_ = LstmStack<T>(params_, "qg.dec", e + 2 * h, h, cfg_.layers, rng);
    dec_attn_ = MlpAttention<T>(params_, "qg.dec_attn", 2 * h, h, h, rng);
    out_ = Linear<T>(params_, "qg.out", h + 2 * h, e, rng);
    out_bias_ = &params_.add_zeros("qg.out_bias", vocab_.size(), 1);
  }

  Generator(const Generator&) = delete;
  Generator& operator=(const Generator&) = delete;

  const Vocabulary& vocab() const { return vocab_; }
  const GeneratorConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }
  Parameter<T>& embedding() { return *emb_; }
  Parameter<T>& output_bias() { return *out_bias_; }
  const HierarchicalEncoder<T>& encoder() const { return encoder_; }

  ConversationEncoding<T> encode_conversation(Graph<T>& g, const Conversation& conv, std::size_t num_turns,
                                              const Dropout* drop = nullptr) const {
    return encoder_.encode(g, conv.topic(), conv.turns(), num_turns, vocab_, drop);
  }

  EncodedContext<T> encode_context(Graph<T>& g, const TopicSpec& topic, const std::vector<QAPair>& history,
                                   const Dropout* drop = nullptr) const {
    auto enc = encoder_.encode(g, topic, history, history.size(), vocab_, drop);
    return encoder_.context(g, enc, history.size());
  }

  EncodedContext<T> context(Graph<T>& g, const ConversationEncoding<T>& enc, std::size_t completed) const {
    return encoder_.context(g, enc, completed);
  }

  // Decoder state for one context; the memory projection is shared by every
  // step.
  struct DecoderState {
    Expr<T> memory;
    Expr<T> projected;
    Expr<T> topic;
    std::vector<LstmState<T>> rnn;
  };

  DecoderState start(Graph<T>& g, const EncodedContext<T>& ctx) const {
    DecoderState st;
    std::vector<Expr<T>> cols{ctx.topic_summary};
    cols.insert(cols.end(), ctx.turn_vectors.begin(), ctx.turn_vectors.end());
    st.memory = concat_cols(cols);
    st.projected = dec_attn_.project_memory(g, st.memory);
    st.topic = ctx.topic_summary;
    st.rnn = dec_rnn_.zero_state(g);
    Expr<T> init_in = concat_rows<T>({ctx.conversation_summary, ctx.topic_summary});
    for (std::size_t l = 0; l < st.rnn.size(); ++l) st.rnn[l].h = tanh(dec_init_[l](g, init_in));
    return st;
  }

  // Consumes the previous token and returns next-token logits (|V| x 1).
  Expr<T> step(Graph<T>& g, DecoderState& st, int prev_id, const Dropout* drop = nullptr) const {
    Expr<T> x = apply_dropout(g.lookup(*emb_, prev_id), drop);
    Expr<T> h = dec_rnn_.step(g, concat_rows<T>({x, st.topic}), st.rnn, drop);
    auto att = dec_attn_.attend(g, st.memory, st.projected, h);
    Expr<T> o = tanh(out_(g, concat_rows<T>({h, att.context})));
    o = apply_dropout(o, drop);
    return matmul(g.param(*emb_), o) + g.param(*out_bias_);
  }

  // Summed negative log-likelihood of `question` followed by the end symbol.
  Expr<T> teacher_forced_nll(Graph<T>& g, const EncodedContext<T>& ctx, const Ids& question,
                             const Dropout* drop = nullptr) const {
    DecoderState st = start(g, ctx);
    std::vector<Expr<T>> terms;
    int prev = Vocabulary::kBos;
    for (std::size_t t = 0; t <= question.size(); ++t) {
      const int target = t < question.size() ? question[t] : Vocabulary::kEos;
      terms.push_back(neg_log_softmax_pick(step(g, st, prev, drop), target));
      prev = target;
    }
    return sum(terms);
  }

  // Log-probability of a token sequence; `with_end` appends the end symbol.
  Expr<T> sequence_logprob(Graph<T>& g, const EncodedContext<T>& ctx, const Ids& ids, bool with_end = true) const {
    DecoderState st = start(g, ctx);
    std::vector<Expr<T>> terms;
    int prev = Vocabulary::kBos;
    const std::size_t n = ids.size() + (with_end ? 1 : 0);
    for (std::size_t t = 0; t < n; ++t) {
      const int target = t < ids.size() ? ids[t] : Vocabulary::kEos;
      terms.push_back(neg_log_softmax_pick(step(g, st, prev), target));
      prev = target;
    }
    if (terms.empty()) return g.scalar(T(0));
    return T(-1) * sum(terms);
  }

  // Greedy (argmax, ties to the lowest id) or sampled decoding. Sampling draws
  // from the full softmax at temperature 1.
  template <typename Rng = std::mt19937_64>
  DecodeResult<T> decode(Graph<T>& g, const EncodedContext<T>& ctx, DecodeMode mode, int max_len,
                         Rng* rng = nullptr) const {
    if (max_len < 1) throw std::invalid_argument("decode: max_len must be at least 1");
    if (mode == DecodeMode::sampled && !rng) throw std::invalid_argument("decode: sampled mode requires an rng");
    DecodeResult<T> res;
    res.mode = mode;
    DecoderState st = start(g, ctx);
    std::vector<Expr<T>> terms;
    int prev = Vocabulary::kBos;
    for (int t = 0; t < max_len; ++t) {
      Expr<T> logits = step(g, st, prev);
      const int tok = mode == DecodeMode::greedy ? argmax(logits.value()) : sample(logits.value(), *rng);
      Expr<T> nll = neg_log_softmax_pick(logits, tok);
      terms.push_back(nll);
      res.token_logprobs.push_back(-static_cast<double>(nll.scalar()));
      if (tok == Vocabulary::kEos) {
        res.ended = true;
        break;
      }
      res.ids.push_back(tok);
      res.tokens.push_back(vocab_.token(tok));
      prev = tok;
    }
    Expr<T> total = T(-1) * sum(terms);
    res.total_logprob = static_cast<double>(total.scalar());
    if (g.needs_grad(total)) res.logprob = total;
    return res;
  }

  // Summed NLL over every turn of `conv`, encoding the conversation once.
  Expr<T> conversation_nll(Graph<T>& g, const Conversation& conv, NllStats& stats, const Dropout* drop = nullptr) const {
    auto enc = encode_conversation(g, conv, conv.size() - 1, drop);
    std::vector<Expr<T>> terms;
    for (std::size_t j = 0; j < conv.size(); ++j) {
      const Ids q = vocab_.encode(conv.turns()[j].question);
      terms.push_back(teacher_forced_nll(g, context(g, enc, j), q, drop));
      stats.tokens += static_cast<long>(q.size()) + 1;
      stats.pairs += 1;
    }
    Expr<T> total = sum(terms);
    stats.total += static_cast<double>(total.scalar());
    return total;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint c;
    c.kind = "generator";
    c.config = cfg_.to_json();
    c.vocab = vocab_;
    c.params = store_to_json(params_);
    return c;
  }

  static std::unique_ptr<Generator> from_checkpoint(const Checkpoint& c) {
    if (c.kind != "generator") throw std::runtime_error("checkpoint is not a generator (kind=" + c.kind + ")");
    auto gen = std::make_unique<Generator>(c.vocab, GeneratorConfig::from_json(c.config));
    store_from_json(gen->params_, c.params);
    return gen;
  }

  static int argmax(const Matrix<T>& logits) {
    Index best = 0;
    for (Index i = 1; i < logits.rows(); ++i) {
      if (logits(i, 0) > logits(best, 0)) best = i;
    }
    return static_cast<int>(best);
  }

  template <typename Rng>
  static int sample(const Matrix<T>& logits, Rng& rng) {
    const T mx = logits.maxCoeff();
    Vector<double> p(logits.rows());
    for (Index i = 0; i < logits.rows(); ++i) p(i) = std::exp(static_cast<double>(logits(i, 0) - mx));
    p /= p.sum();
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double u = u01(rng);
    double acc = 0.0;
    Index last_nonzero = 0;
    for (Index i = 0; i < p.size(); ++i) {
      if (p(i) <= 0.0) continue;
      last_nonzero = i;
      acc += p(i);
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(last_nonzero);
  }

 private:
  Vocabulary vocab_;
  GeneratorConfig cfg_;
  ParameterStore<T> params_;
  Parameter<T>* emb_ = nullptr;
  Parameter<T>* out_bias_ = nullptr;
  HierarchicalEncoder<T> encoder_;
  std::vector<Linear<T>> dec_init_;
  LstmStack<T> dec_rnn_;
  MlpAttention<T> dec_attn_;
  Linear<T> out_;
};

// A (conversation, turn) pair: predict turns[turn].question from the turns
// before it.
struct NllExample {
  const Conversation* conversation = nullptr;
  std::size_t turn = 0;
};

template <typename T>
struct NllLoss {
  Expr<T> loss;     // summed NLL divided by the number of question/answer pairs
  NllStats stats;
};

// NLL over a batch of examples, normalized per question/answer pair. Examples
// from the same conversation share one encoding.
template <typename T>
NllLoss<T> nll_loss(Graph<T>& g, const Generator<T>& gen, std::span<const NllExample> batch,
                    const Dropout* drop = nullptr) {
  if (batch.empty()) throw std::invalid_argument("nll_loss: empty batch");
  std::map<const Conversation*, std::size_t> needed;
  std::vector<const Conversation*> order;
  for (const auto& ex : batch) {
    if (!ex.conversation || ex.turn >= ex.conversation->size()) throw std::out_of_range("nll_loss: bad example");
    auto [it, inserted] = needed.emplace(ex.conversation, ex.turn);
    if (inserted) order.push_back(ex.conversation);
    it->second = std::max(it->second, ex.turn);
  }
  std::map<const Conversation*, ConversationEncoding<T>> encodings;
  for (const Conversation* c : order) encodings.emplace(c, gen.encode_conversation(g, *c, needed[c], drop));

  NllLoss<T> out;
  std::vector<Expr<T>> terms;
  for (const auto& ex : batch) {
    const Ids q = gen.vocab().encode(ex.conversation->turns()[ex.turn].question);
    terms.push_back(gen.teacher_forced_nll(g, gen.context(g, encodings.at(ex.conversation), ex.turn), q, drop));
    out.stats.tokens += static_cast<long>(q.size()) + 1;
    out.stats.pairs += 1;
  }
  Expr<T> total = sum(terms);
  out.stats.total = static_cast<double>(total.scalar());
  out.loss = (T(1) / static_cast<T>(out.stats.pairs)) * total;
  return out;
}

inline std::vector<NllExample> all_examples(const std::vector<Conversation>& convs) {
  std::vector<NllExample> out;
  for (const auto& c : convs) {
    for (std::size_t j = 0; j < c.size(); ++j) out.push_back({&c, j});
  }
  return out;
}

// Teacher-forced NLL statistics of every reference question in `convs`
// (no dropout, no gradient).
template <typename T, typename ConvRange>
NllStats corpus_nll(const Generator<T>& gen, const ConvRange& convs) {
  NllStats stats;
  for (const auto& c : convs) {
    Graph<T> g(false);
    const Conversation& conv = [&]() -> const Conversation& {
      if constexpr (std::is_same_v<std::decay_t<decltype(c)>, GroundedConversation>) {
        return c.student();
      } else {
        return c;
      }
    }();
    gen.conversation_nll(g, conv, stats);
  }
  return stats;
}

}  // namespace pqg
