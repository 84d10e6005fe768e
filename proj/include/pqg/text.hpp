#pragma once

// Deterministic tokenizer: ASCII letters are lowercased, every ASCII
// punctuation character becomes its own token, whitespace separates tokens
// and is otherwise dropped. Bytes >= 0x80 are treated as word characters so
// UTF-8 sequences stay intact.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace pqg {

using Tokens = std::vector<std::string>;

struct TokenOffsets {
  Tokens tokens;
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // [begin, end) byte offsets
};

namespace text_detail {
inline bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
inline bool is_punct(unsigned char c) {
  return c < 0x80 && !is_space(c) && !((c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z')) &&
         c >= 0x21 && c != 0x7f;
}
inline char lower(unsigned char c) { return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : static_cast<char>(c); }
}  // namespace text_detail

inline TokenOffsets tokenize_with_offsets(std::string_view text) {
  using namespace text_detail;
  TokenOffsets out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_space(c) || c < 0x20 || c == 0x7f) {
      ++i;
      continue;
    }
    if (is_punct(c)) {
      out.tokens.emplace_back(1, static_cast<char>(c));
      out.spans.emplace_back(i, i + 1);
      ++i;
      continue;
    }
    const std::size_t start = i;
    std::string tok;
    while (i < n) {
      const auto d = static_cast<unsigned char>(text[i]);
      if (is_space(d) || is_punct(d) || d < 0x20 || d == 0x7f) break;
      tok.push_back(lower(d));
      ++i;
    }
    out.tokens.push_back(std::move(tok));
    out.spans.emplace_back(start, i);
  }
  return out;
}

inline Tokens tokenize(std::string_view text) { return tokenize_with_offsets(text).tokens; }

inline std::string join(const Tokens& tokens, std::string_view sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += sep;
    out += tokens[i];
  }
  return out;
}

// Indices of the tokens overlapping the byte range [begin, end). Returns
// {first, last} inclusive, or {-1, -1} when no token overlaps.
inline std::pair<long, long> token_range(const TokenOffsets& toks, std::size_t begin, std::size_t end) {
  long first = -1;
  long last = -1;
  for (std::size_t t = 0; t < toks.spans.size(); ++t) {
    const auto [b, e] = toks.spans[t];
    if (b < end && e > begin) {
      if (first < 0) first = static_cast<long>(t);
      last = static_cast<long>(t);
    }
  }
  return {first, last};
}

}  // namespace pqg
