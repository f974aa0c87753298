#include "finedeb/dataprep.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "finedeb/common.hpp"

namespace finedeb {

namespace {

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::vector<std::string> split_tabs(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find('\t', start);
    if (pos == std::string::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

bool is_blank(const std::string& s) {
  return s.find_first_not_of(" \t\r\n") == std::string::npos;
}

bool valid_utf8(const std::string& s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t extra;
    if (c < 0x80) extra = 0;
    else if ((c & 0xE0) == 0xC0) extra = 1;
    else if ((c & 0xF0) == 0xE0) extra = 2;
    else if ((c & 0xF8) == 0xF0) extra = 3;
    else return false;
    for (std::size_t j = 1; j <= extra; ++j) {
      if (i + j >= s.size()) return false;
      if ((static_cast<unsigned char>(s[i + j]) & 0xC0) != 0x80) return false;
    }
    i += extra + 1;
  }
  return true;
}

std::string filename_of(const std::string& path) {
  const std::size_t pos = path.find_last_of("/\\");
  return pos == std::string::npos ? path : path.substr(pos + 1);
}

std::size_t count_placeholders(const std::string& text) {
  std::size_t count = 0, pos = 0;
  while ((pos = text.find(kPlaceholder, pos)) != std::string::npos) {
    ++count;
    pos += 4;
  }
  return count;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

}  // namespace

std::string substitute_placeholder(const std::string& template_text,
                                   const std::string& target) {
  const std::size_t pos = template_text.find(kPlaceholder);
  if (pos == std::string::npos)
    fail("substitute_placeholder: no placeholder in template");
  std::string out = template_text;
  out.replace(pos, 4, target);
  return out;
}

WordTupleSet load_word_lists(const std::string& path, const Demographic& demo,
                             std::size_t* dedup_count) {
  if (demo.class_count < 2) fail("load_word_lists: class_count must be >= 2");
  const auto lines = read_lines(path);
  if (lines.empty()) fail("load_word_lists: empty file " + path);
  const auto header = split_tabs(lines[0]);
  if (header.size() != demo.class_count)
    fail("load_word_lists: header of " + path + " has " +
         std::to_string(header.size()) + " labels, expected " +
         std::to_string(demo.class_count));
  WordTupleSet set;
  set.demographic = demo;
  set.class_labels = header;
  std::set<std::vector<std::string>> seen;
  std::size_t dedup = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (is_blank(lines[i])) continue;
    auto fields = split_tabs(lines[i]);
    if (fields.size() != demo.class_count)
      fail("load_word_lists: line " + std::to_string(i + 1) + " of " + path +
           " has " + std::to_string(fields.size()) + " fields, expected " +
           std::to_string(demo.class_count));
    for (const auto& f : fields)
      if (is_blank(f))
        fail("load_word_lists: empty field on line " + std::to_string(i + 1) +
             " of " + path);
    if (!seen.insert(fields).second) {
      ++dedup;
      continue;
    }
    set.tuples.push_back(std::move(fields));
  }
  if (set.tuples.empty()) fail("load_word_lists: no tuples in " + path);
  if (dedup_count) *dedup_count = dedup;
  return set;
}

std::vector<SentenceTemplate> load_templates(const std::string& path,
                                             const Demographic& demo) {
  const auto lines = read_lines(path);
  std::vector<SentenceTemplate> out;
  const std::string fname = filename_of(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (is_blank(lines[i])) continue;
    const std::size_t n = count_placeholders(lines[i]);
    if (n == 0)
      fail("load_templates: no placeholder on line " + std::to_string(i + 1) +
           " of " + path);
    if (n > 1)
      fail("load_templates: multiple placeholders on line " +
           std::to_string(i + 1) + " of " + path);
    std::string without = lines[i];
    without.erase(without.find(kPlaceholder), 4);
    if (is_blank(without))
      fail("load_templates: template is empty besides the placeholder, line " +
           std::to_string(i + 1) + " of " + path);
    out.push_back({demo, lines[i], fname + ":" + std::to_string(i + 1)});
  }
  if (out.empty()) fail("load_templates: no templates in " + path);
  return out;
}

std::vector<DebiasPair> generate_pairs(
    const std::vector<SentenceTemplate>& templates, const WordTupleSet& tuples,
    std::uint64_t seed, std::optional<std::size_t> sample_size) {
  for (const auto& t : templates)
    if (t.demographic.name != tuples.demographic.name)
      fail("generate_pairs: template demographic '" + t.demographic.name +
           "' does not match word list '" + tuples.demographic.name + "'");
  const std::size_t k = tuples.demographic.class_count;
  std::vector<DebiasPair> pairs;
  pairs.reserve(templates.size() * tuples.tuples.size() * k * (k - 1) / 2);
  for (const auto& tmpl : templates) {
    for (std::size_t m = 0; m < tuples.tuples.size(); ++m) {
      const auto& tup = tuples.tuples[m];
      for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = a + 1; b < k; ++b) {
          DebiasPair p;
          p.sentence_a = substitute_placeholder(tmpl.text, tup[a]);
          p.sentence_b = substitute_placeholder(tmpl.text, tup[b]);
          p.target_a = tup[a];
          p.target_b = tup[b];
          p.class_a = tuples.class_labels[a];
          p.class_b = tuples.class_labels[b];
          p.template_id = tmpl.source_id;
          p.tuple_index = m;
          pairs.push_back(std::move(p));
        }
      }
    }
  }
  if (!sample_size) return pairs;
  if (*sample_size > pairs.size())
    fail("generate_pairs: sample_size " + std::to_string(*sample_size) +
         " exceeds full enumeration count " + std::to_string(pairs.size()));
  Rng rng(seed);
  auto idx = rng.permutation(pairs.size());
  idx.resize(*sample_size);
  std::sort(idx.begin(), idx.end());  // keep canonical order
  std::vector<DebiasPair> sampled;
  sampled.reserve(*sample_size);
  for (auto i : idx) sampled.push_back(std::move(pairs[i]));
  return sampled;
}

Corpus load_corpus(const std::string& path, std::size_t max_len) {
  const auto lines = read_lines(path);
  Corpus c;
  c.source_path = path;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (is_blank(lines[i])) continue;
    if (!valid_utf8(lines[i]))
      fail("load_corpus: invalid UTF-8 on line " + std::to_string(i + 1) +
           " of " + path);
    auto words = split_ws(lines[i]);
    if (words.size() > max_len) {
      words.resize(max_len);
      ++c.truncated_count;
      std::string joined;
      for (std::size_t j = 0; j < words.size(); ++j) {
        if (j) joined += ' ';
        joined += words[j];
      }
      c.sentences.push_back(std::move(joined));
    } else {
      c.sentences.push_back(lines[i]);
    }
  }
  if (c.sentences.empty()) fail("load_corpus: no sentences in " + path);
  return c;
}

void write_pairs_tsv(const std::string& path, const std::vector<DebiasPair>& pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("write_pairs_tsv: cannot open " + path);
  out << "template_id\ttuple_index\tclass_a\tclass_b\ttarget_a\ttarget_b\tsentence_a\tsentence_b\n";
  for (const auto& p : pairs)
    out << p.template_id << '\t' << p.tuple_index << '\t' << p.class_a << '\t'
        << p.class_b << '\t' << p.target_a << '\t' << p.target_b << '\t'
        << p.sentence_a << '\t' << p.sentence_b << '\n';
}

std::vector<DebiasPair> read_pairs_tsv(const std::string& path) {
  const auto lines = read_lines(path);
  if (lines.empty()) fail("read_pairs_tsv: empty file " + path);
  std::vector<DebiasPair> pairs;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (is_blank(lines[i])) continue;
    auto f = split_tabs(lines[i]);
    if (f.size() != 8)
      fail("read_pairs_tsv: line " + std::to_string(i + 1) + " has " +
           std::to_string(f.size()) + " fields, expected 8");
    DebiasPair p;
    p.template_id = f[0];
    p.tuple_index = static_cast<std::size_t>(std::stoull(f[1]));
    p.class_a = f[2];
    p.class_b = f[3];
    p.target_a = f[4];
    p.target_b = f[5];
    p.sentence_a = f[6];
    p.sentence_b = f[7];
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace finedeb
