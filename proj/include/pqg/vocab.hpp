#pragma once

#include "pqg/text.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace pqg {

using Ids = std::vector<int>;

// Special symbols, in id order. Tags delimit the parts of model inputs.
namespace sym {
inline constexpr const char* pad = "<pad>";
inline constexpr const char* unk = "<unk>";
inline constexpr const char* bos = "<s>";
inline constexpr const char* eos = "</s>";
inline constexpr const char* topic_open = "<title>";
inline constexpr const char* topic_close = "</title>";
inline constexpr const char* bg_open = "<background>";
inline constexpr const char* bg_close = "</background>";
inline constexpr const char* section_open = "<section>";
inline constexpr const char* section_close = "</section>";
inline constexpr const char* q_open = "<q>";
inline constexpr const char* q_close = "</q>";
inline constexpr const char* a_open = "<a>";
inline constexpr const char* a_close = "</a>";
inline constexpr const char* cannot_answer = "<cannotanswer>";

inline const std::vector<std::string>& all() {
  static const std::vector<std::string> v{pad,      unk,           bos,          eos,   topic_open,
                                          topic_close, bg_open,    bg_close,     section_open,
                                          section_close, q_open,   q_close,      a_open,
                                          a_close,  cannot_answer};
  return v;
}
}  // namespace sym

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;

  Vocabulary() {
    for (const auto& s : sym::all()) add(s);
    finetune_.assign(tokens_.size(), true);
  }

  // Builds a vocabulary from token frequencies. Tokens with count < min_count
  // are left out (they encode to <unk>); the finetune set is the special
  // symbols plus the top_k most frequent kept tokens, ties broken by
  // lexicographic order.
  static Vocabulary from_counts(const std::map<std::string, long>& counts, long min_count, std::size_t top_k) {
    std::vector<std::pair<std::string, long>> ranked;
    for (const auto& [tok, n] : counts) {
      if (n >= min_count && !is_special(tok)) ranked.emplace_back(tok, n);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocabulary v;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
      v.add(ranked[i].first);
      v.finetune_.push_back(i < top_k);
    }
    return v;
  }

  static bool is_special(const std::string& tok) {
    const auto& s = sym::all();
    return std::find(s.begin(), s.end(), tok) != s.end();
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  int num_specials() const { return static_cast<int>(sym::all().size()); }

  int id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& tok) const { return index_.count(tok) != 0; }
  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("vocabulary id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  Ids encode(const Tokens& toks) const {
    Ids out;
    out.reserve(toks.size());
    for (const auto& t : toks) out.push_back(id(t));
    return out;
  }
  Tokens decode(const Ids& ids) const {
    Tokens out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(token(i));
    return out;
  }

  bool finetune(int id) const { return finetune_.at(static_cast<std::size_t>(id)); }
  const std::vector<bool>& finetune_mask() const { return finetune_; }
  std::vector<int> finetune_set() const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i) {
      if (finetune_[static_cast<std::size_t>(i)]) out.push_back(i);
    }
    return out;
  }

  nlohmann::json to_json() const {
    std::vector<int> ft = finetune_set();
    return {{"tokens", tokens_}, {"finetune", ft}};
  }
  static Vocabulary from_json(const nlohmann::json& j) {
    Vocabulary v;
    const auto toks = j.at("tokens").get<std::vector<std::string>>();
    if (toks.size() < sym::all().size()) throw std::runtime_error("vocabulary is missing special symbols");
    for (std::size_t i = 0; i < sym::all().size(); ++i) {
      if (toks[i] != sym::all()[i]) throw std::runtime_error("vocabulary special symbols out of order");
    }
    for (std::size_t i = sym::all().size(); i < toks.size(); ++i) v.add(toks[i]);
    v.finetune_.assign(v.tokens_.size(), false);
    for (int id : j.at("finetune").get<std::vector<int>>()) v.finetune_.at(static_cast<std::size_t>(id)) = true;
    return v;
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_ && finetune_ == o.finetune_; }

 private:
  void add(const std::string& tok) {
    if (index_.count(tok)) throw std::invalid_argument("duplicate vocabulary token " + tok);
    index_.emplace(tok, static_cast<int>(tokens_.size()));
    tokens_.push_back(tok);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::vector<bool> finetune_;
};

}  // namespace pqg
