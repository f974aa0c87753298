#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "finedeb/dataprep.hpp"

namespace finedeb {

// Fixed special-token ids.
inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kCls = 2;
inline constexpr int kSep = 3;
inline constexpr int kMask = 4;
inline constexpr std::size_t kNumSpecials = 5;

// Lowercases and splits on whitespace/punctuation; punctuation is dropped.
std::vector<std::string> tokenize_words(const std::string& s);

class Vocabulary {
 public:
  // Words from the corpora with count >= min_count, plus every target word
  // from every tuple set regardless of count. Non-special ids are assigned
  // in lexicographic order.
  static Vocabulary build(const std::vector<Corpus>& corpora,
                          const std::vector<WordTupleSet>& word_tuple_sets,
                          std::size_t min_count);

  static Vocabulary from_words(const std::vector<std::string>& sorted_words);

  int id_of(const std::string& word) const;  // kUnk when absent
  bool contains(const std::string& word) const;
  const std::string& word_of(int id) const;
  std::size_t size() const { return words_.size(); }

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::unordered_map<std::string, int> ids_;
  std::vector<std::string> words_;
};

struct TokenSequence {
  std::vector<int> ids;               // length max_len
  std::vector<int> attention_mask;    // 1 for real tokens, 0 for padding
  std::size_t cls_position = 0;
  std::optional<std::pair<std::size_t, std::size_t>> target_span;  // [start,end)

  std::size_t real_len() const {
    std::size_t n = 0;
    for (int m : attention_mask) n += static_cast<std::size_t>(m);
    return n;
  }
};

// [CLS] tokens... [SEP] padded to max_len; over-length input is truncated so
// [SEP] stays the last non-pad token.
TokenSequence encode(const std::string& sentence, const Vocabulary& vocab,
                     std::size_t max_len);

// Decodes non-special tokens back to a space-joined lowercase string.
std::string decode(const TokenSequence& seq, const Vocabulary& vocab);

// Encodes both sides of a pair with target spans located. Errors if a target
// would be truncated away or maps to [UNK].
std::pair<TokenSequence, TokenSequence> encode_pair(const DebiasPair& pair,
                                                    const Vocabulary& vocab,
                                                    std::size_t max_len);

}  // namespace finedeb
