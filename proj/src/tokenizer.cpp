#include "finedeb/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "finedeb/common.hpp"

namespace finedeb {

namespace {

const std::vector<std::string> kSpecialWords = {"[PAD]", "[UNK]", "[CLS]",
                                                "[SEP]", "[MASK]"};

bool is_word_char(unsigned char c) {
  // Bytes >= 0x80 (UTF-8 continuation/lead) count as word characters.
  return std::isalnum(c) || c >= 0x80;
}

}  // namespace

std::vector<std::string> tokenize_words(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_word_char(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& sorted_words) {
  Vocabulary v;
  v.words_ = kSpecialWords;
  for (const auto& w : sorted_words) v.words_.push_back(w);
  for (std::size_t i = 0; i < v.words_.size(); ++i)
    if (!v.ids_.emplace(v.words_[i], static_cast<int>(i)).second)
      fail("Vocabulary: duplicate token '" + v.words_[i] + "'");
  return v;
}

Vocabulary Vocabulary::build(const std::vector<Corpus>& corpora,
                             const std::vector<WordTupleSet>& word_tuple_sets,
                             std::size_t min_count) {
  if (corpora.empty()) fail("build_vocab: at least one corpus required");
  std::map<std::string, std::size_t> counts;
  for (const auto& c : corpora)
    for (const auto& s : c.sentences)
      for (auto& w : tokenize_words(s)) ++counts[w];
  std::map<std::string, bool> keep;  // ordered -> lexicographic ids
  for (const auto& [w, n] : counts)
    if (n >= min_count) keep[w] = true;
  for (const auto& set : word_tuple_sets)
    for (const auto& tup : set.tuples)
      for (const auto& target : tup)
        for (auto& w : tokenize_words(target)) keep[w] = true;
  std::vector<std::string> words;
  words.reserve(keep.size());
  for (const auto& [w, _] : keep) words.push_back(w);
  return from_words(words);
}

int Vocabulary::id_of(const std::string& word) const {
  auto it = ids_.find(word);
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(const std::string& word) const {
  return ids_.count(word) > 0;
}

const std::string& Vocabulary::word_of(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size())
    fail("Vocabulary::word_of: id " + std::to_string(id) + " out of range");
  return words_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("Vocabulary::save: cannot open " + path);
  out << "#vocab v1 size=" << words_.size() << "\n";
  for (const auto& w : words_) out << w << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("Vocabulary::load: cannot open " + path);
  std::string header;
  if (!std::getline(in, header) || header.rfind("#vocab v1 size=", 0) != 0)
    fail("Vocabulary::load: bad header in " + path);
  const std::size_t size = std::stoull(header.substr(15));
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    words.push_back(line);
  }
  if (words.size() != size)
    fail("Vocabulary::load: token count " + std::to_string(words.size()) +
         " does not match header size " + std::to_string(size));
  if (words.size() < kNumSpecials ||
      !std::equal(kSpecialWords.begin(), kSpecialWords.end(), words.begin()))
    fail("Vocabulary::load: special tokens missing or reordered in " + path);
  Vocabulary v;
  v.words_ = std::move(words);
  for (std::size_t i = 0; i < v.words_.size(); ++i)
    if (!v.ids_.emplace(v.words_[i], static_cast<int>(i)).second)
      fail("Vocabulary::load: duplicate token '" + v.words_[i] + "'");
  return v;
}

TokenSequence encode(const std::string& sentence, const Vocabulary& vocab,
                     std::size_t max_len) {
  if (sentence.empty()) fail("encode: empty sentence");
  if (max_len < 8) fail("encode: max_len must be >= 8");
  auto words = tokenize_words(sentence);
  if (words.empty()) fail("encode: sentence has no tokens: '" + sentence + "'");
  if (words.size() > max_len - 2) words.resize(max_len - 2);
  TokenSequence seq;
  seq.ids.reserve(max_len);
  seq.ids.push_back(kCls);
  for (const auto& w : words) seq.ids.push_back(vocab.id_of(w));
  seq.ids.push_back(kSep);
  seq.attention_mask.assign(seq.ids.size(), 1);
  seq.ids.resize(max_len, kPad);
  seq.attention_mask.resize(max_len, 0);
  return seq;
}

std::string decode(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (seq.attention_mask[i] == 0) continue;
    const int id = seq.ids[i];
    if (id == kCls || id == kSep || id == kPad) continue;
    if (!out.empty()) out += ' ';
    out += vocab.word_of(id);
  }
  return out;
}

namespace {

// Locates the character offset at which target_a sits in sentence_a such that
// replacing it by target_b yields sentence_b.
std::size_t locate_target(const DebiasPair& p) {
  std::size_t pos = 0;
  while ((pos = p.sentence_a.find(p.target_a, pos)) != std::string::npos) {
    std::string candidate = p.sentence_a;
    candidate.replace(pos, p.target_a.size(), p.target_b);
    if (candidate == p.sentence_b) return pos;
    ++pos;
  }
  fail("encode_pair: sentences do not differ by the stated targets: '" +
       p.sentence_a + "' / '" + p.sentence_b + "'");
}

TokenSequence encode_with_span(const std::string& sentence,
                               const std::string& target, std::size_t char_pos,
                               const Vocabulary& vocab, std::size_t max_len) {
  const auto prefix_tokens = tokenize_words(sentence.substr(0, char_pos));
  const auto target_tokens = tokenize_words(target);
  if (target_tokens.empty()) fail("encode_pair: target has no tokens: '" + target + "'");
  for (const auto& t : target_tokens)
    if (!vocab.contains(t))
      fail("encode_pair: target token '" + t +
           "' not in vocabulary (stale vocab?)");
  TokenSequence seq = encode(sentence, vocab, max_len);
  const std::size_t start = 1 + prefix_tokens.size();  // after [CLS]
  const std::size_t end = start + target_tokens.size();
  if (end + 1 > max_len || end >= seq.real_len())
    fail("encode_pair: target truncated away by max_len " +
         std::to_string(max_len));
  for (std::size_t i = 0; i < target_tokens.size(); ++i)
    if (seq.ids[start + i] != vocab.id_of(target_tokens[i]))
      fail("encode_pair: target span mismatch in '" + sentence + "'");
  seq.target_span = {start, end};
  return seq;
}

}  // namespace

std::pair<TokenSequence, TokenSequence> encode_pair(const DebiasPair& pair,
                                                    const Vocabulary& vocab,
                                                    std::size_t max_len) {
  const std::size_t pos = locate_target(pair);
  auto a = encode_with_span(pair.sentence_a, pair.target_a, pos, vocab, max_len);
  auto b = encode_with_span(pair.sentence_b, pair.target_b, pos, vocab, max_len);
  return {std::move(a), std::move(b)};
}

}  // namespace finedeb
