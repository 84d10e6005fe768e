#pragma once

// Hierarchical topic + conversation encoder used by the question generator
// and by the specificity classifier.
//
//   topic tokens  --BiLSTM-->  states --MLP self-attn (key: final states)--> topic summary
//   each turn     --BiLSTM, initialized from the topic summary--> turn vector
//   turn vectors  --LSTM (conversation order)--> states --MLP self-attn--> conversation summary
//
// The section title is encoded as turn 0, so a context for the j-th question
// holds j + 1 turn vectors. Turn vectors depend only on their own turn and the
// conversation LSTM is unidirectional, so one encoding of a whole conversation
// serves every turn of it.

#include "pqg/corpus.hpp"
#include "pqg/layers.hpp"

#include <random>
#include <span>
#include <vector>

namespace pqg {

template <typename Rng>
struct DropoutSpec {
  double rate = 0.0;
  Rng* rng = nullptr;
};
using Dropout = DropoutSpec<std::mt19937_64>;

template <typename T>
Expr<T> apply_dropout(Expr<T> x, const Dropout* d) {
  if (!d || !d->rng || d->rate <= 0.0) return x;
  return dropout(x, d->rate, *d->rng);
}

// Unidirectional LSTM stack.
template <typename T>
class LstmStack {
 public:
  LstmStack() = default;
  template <typename Rng>
  LstmStack(ParameterStore<T>& store, const std::string& name, Index in, Index hidden, int layers, Rng& rng) {
    if (layers < 1) throw std::invalid_argument("LstmStack needs at least one layer");
    for (int l = 0; l < layers; ++l) {
      cells_.emplace_back(store, name + ".l" + std::to_string(l), l == 0 ? in : hidden, hidden, rng);
    }
  }
  std::size_t layers() const { return cells_.size(); }
  Index hidden() const { return cells_.front().hidden(); }

  std::vector<LstmState<T>> zero_state(Graph<T>& g) const {
    std::vector<LstmState<T>> s;
    for (const auto& c : cells_) s.push_back(c.zero_state(g));
    return s;
  }
  // Advances every layer one step; returns the top layer's output.
  Expr<T> step(Graph<T>& g, Expr<T> x, std::vector<LstmState<T>>& state, const Dropout* drop = nullptr) const {
    Expr<T> in = x;
    for (std::size_t l = 0; l < cells_.size(); ++l) {
      if (l > 0) in = apply_dropout(in, drop);
      state[l] = cells_[l].step(g, in, state[l]);
      in = state[l].h;
    }
    return in;
  }

 private:
  std::vector<LstmCell<T>> cells_;
};

// Bidirectional LSTM stack; the initial hidden states, if given, seed layer 0.
template <typename T>
class BiLstmStack {
 public:
  BiLstmStack() = default;
  template <typename Rng>
  BiLstmStack(ParameterStore<T>& store, const std::string& name, Index in, Index hidden, int layers, Rng& rng) {
    if (layers < 1) throw std::invalid_argument("BiLstmStack needs at least one layer");
    for (int l = 0; l < layers; ++l) {
      layers_.emplace_back(store, name + ".l" + std::to_string(l), l == 0 ? in : 2 * hidden, hidden, rng);
    }
  }
  Index out_dim() const { return layers_.front().out_dim(); }

  BiOutput<T> operator()(Graph<T>& g, const Seq<T>& xs, const Expr<T>* h0_fwd = nullptr,
                         const Expr<T>* h0_bwd = nullptr, const Dropout* drop = nullptr) const {
    BiOutput<T> out = layers_.front()(g, xs, h0_fwd, h0_bwd);
    for (std::size_t l = 1; l < layers_.size(); ++l) {
      Seq<T> in;
      for (const auto& s : out.states) in.push_back(apply_dropout(s, drop));
      out = layers_[l](g, in);
    }
    return out;
  }

 private:
  std::vector<BiLstm<T>> layers_;
};

template <typename T>
struct EncodedContext {
  Expr<T> topic_summary;               // attention summary of the topic, 2H
  std::vector<Expr<T>> turn_vectors;   // index 0 is the section-title pseudo-turn
  Expr<T> conversation_summary;        // attention summary of the conversation states, 2H
};

template <typename T>
struct ConversationEncoding {
  Expr<T> topic_summary;
  std::vector<Expr<T>> turn_vectors;   // pseudo-turn + every encoded turn
  std::vector<Expr<T>> conv_states;    // conversation LSTM output per turn vector
};

struct EncoderDims {
  Index embed = 100;
  Index hidden = 256;
  int layers = 1;
};

// Token-id builders for the encoder inputs.
inline Ids topic_input_ids(const TopicSpec& topic, const Vocabulary& v) {
  Ids ids{v.id(sym::topic_open)};
  for (const auto& t : tokenize(topic.entity_title)) ids.push_back(v.id(t));
  ids.push_back(v.id(sym::topic_close));
  ids.push_back(v.id(sym::bg_open));
  for (const auto& t : tokenize(topic.background)) ids.push_back(v.id(t));
  ids.push_back(v.id(sym::bg_close));
  return ids;
}

inline Ids section_input_ids(const TopicSpec& topic, const Vocabulary& v) {
  Ids ids{v.id(sym::section_open)};
  for (const auto& t : tokenize(topic.section_title)) ids.push_back(v.id(t));
  ids.push_back(v.id(sym::section_close));
  return ids;
}

inline Ids turn_input_ids(const QAPair& qa, const Vocabulary& v) {
  Ids ids{v.id(sym::q_open)};
  for (const auto& t : qa.question) ids.push_back(v.id(t));
  ids.push_back(v.id(sym::q_close));
  ids.push_back(v.id(sym::a_open));
  for (const auto& t : qa.answer) ids.push_back(v.id(t));
  ids.push_back(v.id(sym::a_close));
  return ids;
}

template <typename T>
class HierarchicalEncoder {
 public:
  HierarchicalEncoder() = default;

  template <typename Rng>
  HierarchicalEncoder(ParameterStore<T>& store, const std::string& name, Parameter<T>& embedding, EncoderDims dims,
                      Rng& rng)
      : emb_(&embedding), dims_(dims) {
    const Index h = dims.hidden;
    topic_rnn_ = BiLstmStack<T>(store, name + ".topic", dims.embed, h, dims.layers, rng);
    topic_attn_ = MlpAttention<T>(store, name + ".topic_attn", 2 * h, 2 * h, h, rng);
    pair_init_fwd_ = Linear<T>(store, name + ".pair_init_fwd", 2 * h, h, rng);
    pair_init_bwd_ = Linear<T>(store, name + ".pair_init_bwd", 2 * h, h, rng);
    pair_rnn_ = BiLstmStack<T>(store, name + ".pair", dims.embed, h, dims.layers, rng);
    conv_rnn_ = LstmStack<T>(store, name + ".conv", 2 * h, 2 * h, dims.layers, rng);
    conv_attn_ = MlpAttention<T>(store, name + ".conv_attn", 2 * h, 2 * h, h, rng);
  }

  Index summary_dim() const { return 2 * dims_.hidden; }

  Seq<T> embed(Graph<T>& g, const Ids& ids, const Dropout* drop) const {
    Seq<T> xs;
    xs.reserve(ids.size());
    for (int id : ids) xs.push_back(apply_dropout(g.lookup(*emb_, id), drop));
    return xs;
  }

  // Encodes the topic, the pseudo-turn and the first `num_turns` turns.
  ConversationEncoding<T> encode(Graph<T>& g, const TopicSpec& topic, std::span<const QAPair> turns,
                                 std::size_t num_turns, const Vocabulary& vocab, const Dropout* drop = nullptr) const {
    if (num_turns > turns.size()) throw std::out_of_range("encode: more turns requested than available");
    const Ids topic_ids = topic_input_ids(topic, vocab);
    if (topic_ids.size() <= 4) throw std::invalid_argument("encode: empty topic");

    ConversationEncoding<T> enc;
    BiOutput<T> tout = topic_rnn_(g, embed(g, topic_ids, drop), nullptr, nullptr, drop);
    Expr<T> tmem = concat_cols(tout.states);
    enc.topic_summary = topic_attn_(g, tmem, tout.final_concat()).context;

    const Expr<T> h0f = tanh(pair_init_fwd_(g, enc.topic_summary));
    const Expr<T> h0b = tanh(pair_init_bwd_(g, enc.topic_summary));
    auto encode_turn = [&](const Ids& ids) {
      return pair_rnn_(g, embed(g, ids, drop), &h0f, &h0b, drop).final_concat();
    };
    enc.turn_vectors.push_back(encode_turn(section_input_ids(topic, vocab)));
    for (std::size_t j = 0; j < num_turns; ++j) enc.turn_vectors.push_back(encode_turn(turn_input_ids(turns[j], vocab)));

    auto state = conv_rnn_.zero_state(g);
    for (const auto& v : enc.turn_vectors) enc.conv_states.push_back(conv_rnn_.step(g, apply_dropout(v, drop), state, drop));
    return enc;
  }

  // Context for the question that follows `completed` turns.
  EncodedContext<T> context(Graph<T>& g, const ConversationEncoding<T>& enc, std::size_t completed) const {
    if (completed + 1 > enc.turn_vectors.size()) throw std::out_of_range("context: turn not encoded");
    EncodedContext<T> ctx;
    ctx.topic_summary = enc.topic_summary;
    ctx.turn_vectors.assign(enc.turn_vectors.begin(), enc.turn_vectors.begin() + static_cast<long>(completed + 1));
    std::vector<Expr<T>> states(enc.conv_states.begin(), enc.conv_states.begin() + static_cast<long>(completed + 1));
    ctx.conversation_summary = conv_attn_(g, concat_cols(states), states.back()).context;
    return ctx;
  }

 private:
  Parameter<T>* emb_ = nullptr;
  EncoderDims dims_;
  BiLstmStack<T> topic_rnn_;
  MlpAttention<T> topic_attn_;
  Linear<T> pair_init_fwd_;
  Linear<T> pair_init_bwd_;
  BiLstmStack<T> pair_rnn_;
  LstmStack<T> conv_rnn_;
  MlpAttention<T> conv_attn_;
};

}  // namespace pqg
