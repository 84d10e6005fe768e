#pragma once

// Templated conversation generators: the bundled toy corpus and a corpus on
// which the true next question is decidable from the history alone.

#include "pqg/corpus.hpp"

#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace pqg::synthetic {

namespace detail {

inline QAPair pair(const std::string& q, const std::string& knowledge, const std::string& answer) {
  QAPair p;
  p.question_text = q;
  p.question = tokenize(q);
  if (answer.empty()) {
    p.answer_text = "CANNOTANSWER";
    p.answer = tokenize(p.answer_text);
    return p;
  }
  const auto pos = knowledge.find(answer);
  if (pos == std::string::npos) throw std::logic_error("synthetic answer not in knowledge: " + answer);
  p.answer_text = answer;
  p.answer = tokenize(answer);
  p.span = CharSpan{pos, pos + answer.size()};
  return p;
}

template <typename Rng>
const std::string& pick(const std::vector<std::string>& v, Rng& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

inline const std::vector<std::string>& first_names() {
  static const std::vector<std::string> v{"Ada", "Bo", "Cy", "Di", "Eli", "Fay", "Gil", "Ivy", "Jo", "Kit",
                                          "Lu", "Max", "Ned", "Ola", "Pia", "Rex", "Sam", "Tia", "Uma", "Vic"};
  return v;
}
inline const std::vector<std::string>& last_names() {
  static const std::vector<std::string> v{"Vale", "Carter", "Moss", "Lark", "Roan", "Dune", "Hart", "Stone",
                                          "Reed", "Lane", "Park", "Ford", "Quill", "Marsh", "Wren"};
  return v;
}

}  // namespace detail

// Musician biographies. Each conversation asks about a random subset of the
// attributes in random order. Most also contain a generic follow-up that the
// teacher cannot answer, and some ask about awards, which are never listed.
inline std::vector<GroundedConversation> toy_corpus(int n, std::uint64_t seed, const std::string& prefix = "toy") {
  using detail::pick;
  static const std::vector<std::string> cities{"Leeds", "Dublin", "Austin", "Lyon", "Perth", "Osaka", "Oslo", "Quito"};
  static const std::vector<std::string> bands{"The Owls", "Red Sky", "Blue Fern", "Iron Bell", "Pale Kings", "Low Tide"};
  static const std::vector<std::string> albums{"Night Road", "Glass Sea", "Slow Fire", "Paper Moon", "Cold Harbor"};
  static const std::vector<std::string> genres{"folk", "jazz", "punk", "soul", "blues"};
  static const std::vector<std::string> labels{"Arc Records", "Halo Music", "Stoneway"};
  static const std::vector<std::string> sections{"Early life", "Career", "Later years", "Personal life"};
  std::mt19937_64 rng(seed);
  std::vector<GroundedConversation> out;
  for (int i = 0; i < n; ++i) {
    const std::string e = pick(detail::first_names(), rng) + " " + pick(detail::last_names(), rng);
    const std::string city = pick(cities, rng), band = pick(bands, rng), album = pick(albums, rng);
    const std::string genre = pick(genres, rng), label = pick(labels, rng);
    const std::string year = std::to_string(1960 + static_cast<int>(rng() % 40));
    const std::string k = e + " was born in " + city + ". In " + year + " " + e + " joined " + band +
                          ". The first album was " + album + ", released on " + label + ". " + e +
                          " is known for " + genre + " music.";
    std::vector<QAPair> all{detail::pair("Where was " + e + " born?", k, city),
                            detail::pair("What band did " + e + " join?", k, band),
                            detail::pair("When did " + e + " join the band?", k, year),
                            detail::pair("What was the first album?", k, album),
                            detail::pair("Which label released it?", k, label),
                            detail::pair("What genre is " + e + " known for?", k, genre),
                            detail::pair("Did " + e + " win any awards?", k, "")};
    std::shuffle(all.begin() + 1, all.end(), rng);
    const std::size_t turns = 3 + static_cast<std::size_t>(rng() % 3);
    all.resize(turns);
    if (std::bernoulli_distribution(0.7)(rng)) {
      const auto at = 1 + static_cast<long>(rng() % (turns - 1));
      all.insert(all.begin() + at, detail::pair("Are there any other interesting aspects about this article?", k, ""));
      all.pop_back();
    }
    TopicSpec topic{e, e + " is a " + genre + " musician from " + city + ".", pick(sections, rng)};
    out.emplace_back(Conversation(prefix + "-" + std::to_string(i), topic, std::move(all)), k);
  }
  return out;
}

// Four-turn conversations whose question wording is fixed by the turn index,
// so the true next question is decidable from the length of the history.
// Every question recurs across conversations and lands in the frequent pool.
inline std::vector<GroundedConversation> separable_corpus(int n, std::uint64_t seed) {
  using detail::pick;
  static const std::vector<std::string> sections{"Early life", "Career", "Retirement", "Family"};
  static const std::vector<std::string> places{"Leeds", "Dublin", "Austin", "Lyon", "Perth", "Osaka"};
  static const std::vector<std::string> things{"a prize", "a tour", "a record", "a film", "a book"};
  static const std::vector<std::string> people{"a teacher", "a singer", "a painter", "a pilot"};
  std::mt19937_64 rng(seed);
  std::vector<GroundedConversation> out;
  for (int i = 0; i < n; ++i) {
    const std::string e = pick(detail::first_names(), rng) + " " + pick(detail::last_names(), rng);
    const std::string place = pick(places, rng), thing = pick(things, rng), partner = pick(people, rng);
    const std::string year = std::to_string(1950 + static_cast<int>(rng() % 50));
    const std::string k = e + " grew up in " + place + ". In " + year + " " + e + " made " + thing + ". " + e +
                          " married " + partner + ".";
    std::vector<QAPair> turns{detail::pair("Where did it all start?", k, place),
                              detail::pair("And after that?", k, "made " + thing),
                              detail::pair("When was this?", k, year),
                              detail::pair("Who did they marry?", k, partner)};
    TopicSpec topic{e, e + " is a public figure.", pick(sections, rng)};
    out.emplace_back(Conversation("sep-" + std::to_string(i), topic, std::move(turns)), k);
  }
  return out;
}

}  // namespace pqg::synthetic
