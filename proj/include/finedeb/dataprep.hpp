#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace finedeb {

struct Demographic {
  std::string name;        // gender, race, religion
  std::size_t class_count;  // >= 2
};

struct WordTupleSet {
  Demographic demographic;
  std::vector<std::string> class_labels;             // length class_count
  std::vector<std::vector<std::string>> tuples;      // each length class_count
};

struct SentenceTemplate {
  Demographic demographic;
  std::string text;  // contains exactly one "____"
  std::string source_id;
};

struct DebiasPair {
  std::string sentence_a, sentence_b;
  std::string target_a, target_b;
  std::string class_a, class_b;
  std::string template_id;
  std::size_t tuple_index;
};

struct Corpus {
  std::vector<std::string> sentences;
  std::string source_path;
  std::size_t truncated_count = 0;  // lines cut to the max token length
};

inline constexpr const char* kPlaceholder = "____";

// Word-list TSV: header of class labels, one tuple per row. Duplicate rows
// are dropped with a count returned through dedup_count when non-null.
WordTupleSet load_word_lists(const std::string& path, const Demographic& demo,
                             std::size_t* dedup_count = nullptr);

std::vector<SentenceTemplate> load_templates(const std::string& path,
                                             const Demographic& demo);

// Full pairwise enumeration: template order, then tuple order, then class
// pairs with a_index < b_index. sample_size draws a seeded uniform sample
// without replacement, preserving canonical order.
std::vector<DebiasPair> generate_pairs(
    const std::vector<SentenceTemplate>& templates, const WordTupleSet& tuples,
    std::uint64_t seed, std::optional<std::size_t> sample_size = std::nullopt);

// One sentence per line, UTF-8; blank lines skipped; lines longer than
// max_len whitespace tokens are truncated and counted.
Corpus load_corpus(const std::string& path, std::size_t max_len);

void write_pairs_tsv(const std::string& path, const std::vector<DebiasPair>& pairs);
std::vector<DebiasPair> read_pairs_tsv(const std::string& path);

std::string substitute_placeholder(const std::string& template_text,
                                   const std::string& target);

}  // namespace finedeb
