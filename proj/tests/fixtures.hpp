#pragma once

// Small templated conversations with valid knowledge spans.

#include "pqg/corpus.hpp"

#include <random>
#include <string>
#include <vector>

namespace pqg::testing {

inline QAPair make_pair(const std::string& q, const std::string& knowledge, const std::string& answer) {
  QAPair p;
  p.question_text = q;
  p.question = tokenize(q);
  if (answer.empty()) {
    p.answer_text = "CANNOTANSWER";
    p.answer = tokenize(p.answer_text);
    return p;
  }
  const auto pos = knowledge.find(answer);
  if (pos == std::string::npos) throw std::logic_error("fixture answer not in knowledge: " + answer);
  p.answer_text = answer;
  p.answer = tokenize(answer);
  p.span = CharSpan{pos, pos + answer.size()};
  return p;
}

inline std::vector<GroundedConversation> toy_conversations(int n, std::uint64_t seed, int max_turns = 4,
                                                           int min_turns = 1) {
  static const std::vector<std::string> names{"Ada Vale", "Bo Carter", "Cy Moss", "Di Lark", "Eli Roan", "Fay Dune",
                                              "Gil Hart", "Ivy Stone", "Jo Reed", "Kit Lane", "Lu Park", "Max Ford"};
  static const std::vector<std::string> cities{"Leeds", "Dublin", "Austin", "Lyon", "Perth", "Osaka"};
  static const std::vector<std::string> bands{"The Owls", "Red Sky", "Blue Fern", "Iron Bell"};
  static const std::vector<std::string> albums{"Night Road", "Glass Sea", "Slow Fire", "Paper Moon"};
  static const std::vector<std::string> genres{"folk", "jazz", "punk", "soul"};
  static const std::vector<std::string> sections{"Early life", "Career", "Later years"};
  std::mt19937_64 rng(seed);
  auto pick = [&](const std::vector<std::string>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  std::vector<GroundedConversation> out;
  for (int i = 0; i < n; ++i) {
    const std::string e = names[static_cast<std::size_t>(i) % names.size()];
    const std::string city = pick(cities), band = pick(bands), album = pick(albums), genre = pick(genres);
    const std::string year = std::to_string(1960 + static_cast<int>(rng() % 40));
    const std::string k = e + " was born in " + city + ". " + e + " joined " + band + " in " + year +
                          ". The first album was " + album + ". " + e + " is known for " + genre + " music.";
    std::vector<QAPair> all{make_pair("Where was " + e + " born?", k, city),
                            make_pair("What band did " + e + " join?", k, band),
                            make_pair("When did " + e + " join?", k, year),
                            make_pair("What was the first album?", k, album),
                            make_pair("What else?", k, ""),
                            make_pair("What genre?", k, genre)};
    std::shuffle(all.begin() + 1, all.end(), rng);
    const int turns = min_turns + static_cast<int>(rng() % static_cast<std::uint64_t>(max_turns - min_turns + 1));
    all.resize(static_cast<std::size_t>(turns));
    TopicSpec topic{e, e + " is a " + genre + " singer.", pick(sections)};
    out.emplace_back(Conversation("toy" + std::to_string(i), topic, std::move(all)), k);
  }
  return out;
}

inline std::vector<Conversation> student_view(const std::vector<GroundedConversation>& convs) {
  std::vector<Conversation> out;
  for (const auto& c : convs) out.push_back(c.student());
  return out;
}

}  // namespace pqg::testing
