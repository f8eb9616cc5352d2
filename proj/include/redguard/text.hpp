#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace redguard {

// Word characters are ASCII letters and digits plus any non-ASCII byte, so
// UTF-8 words are kept whole. Everything else separates words.
bool is_word_byte(unsigned char c);

// Words in order of appearance, original case, duplicates kept.
std::vector<std::string> split_words(std::string_view text);

// Lowercased words in order of appearance, duplicates kept.
std::vector<std::string> lower_words(std::string_view text);

// The token set Tok(text): lowercased, deduplicated, first occurrence wins.
// Throws EmptyTokens when the text has no word characters.
std::vector<std::string> tokenize(std::string_view text);

}  // namespace redguard
