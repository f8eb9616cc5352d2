#include "redguard/text.hpp"

#include <algorithm>
#include <unordered_set>

#include "redguard/error.hpp"
#include "redguard/util.hpp"

namespace redguard {

bool is_word_byte(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c >= 0x80;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (unsigned char c : text) {
    if (is_word_byte(c)) {
      current.push_back(static_cast<char>(c));
    } else if (!current.empty()) {
      out.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

std::vector<std::string> lower_words(std::string_view text) {
  auto words = split_words(text);
  for (auto& w : words) w = lowercase(w);
  return words;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (auto& w : lower_words(text)) {
    if (seen.insert(w).second) out.push_back(std::move(w));
  }
  if (out.empty()) {
    throw Error(ErrorKind::EmptyTokens, "no word characters in \"" + std::string(text) + "\"");
  }
  return out;
}

}  // namespace redguard
