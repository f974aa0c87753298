#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "finedeb/model.hpp"
#include "finedeb/tokenizer.hpp"

namespace finedeb {

struct StereoSetExample {
  std::string context;  // contains one literal BLANK
  std::string stereotype, anti_stereotype, unrelated;
  std::string demographic;
};

struct CrowSPair {
  std::string sent_more;  // stereotypical
  std::string sent_less;
  std::string demographic;
};

struct SeatTest {
  std::string name;
  std::vector<std::string> targets_x, targets_y;
  std::vector<std::string> attributes_a, attributes_b;
};

struct SeatResult {
  std::string name;
  double effect_size = 0.0;
  double p_value = 1.0;
};

struct StereoSetScores {
  double lms = 0.0, ss = 0.0, icat = 0.0;
};

struct MetricReport {
  std::string demographic;
  double lms = 0.0, ss = 0.0, icat = 0.0;
  double crows_score = 0.0;
  std::size_t crows_skipped = 0;
  std::vector<SeatResult> seat;
  double seat_avg_abs = 0.0;
};

// Replaces BLANK with as many [MASK] tokens as the fill has, runs one forward
// pass and returns the mean log-probability of the fill tokens at those
// positions.
double score_fill(const Checkpoint& model, const Vocabulary& vocab,
                  const std::string& context, const std::string& fill);

StereoSetScores stereoset_eval(const Checkpoint& model, const Vocabulary& vocab,
                               const std::vector<StereoSetExample>& examples);

// icat = lms * min(ss, 100 - ss) / 50
double compute_icat(double lms, double ss);

// Hold-one-out pseudo-log-likelihood: mask each shared word position in turn
// and sum the log-probability of the true token.
double pll_score(const Checkpoint& model, const Vocabulary& vocab,
                 const std::string& sentence,
                 const std::vector<std::size_t>& shared_word_positions);

// Shared positions are the common token prefix/suffix of the pair. Pairs with
// no shared tokens are skipped and counted.
double crows_eval(const Checkpoint& model, const Vocabulary& vocab,
                  const std::vector<CrowSPair>& pairs,
                  std::size_t* skipped = nullptr);

// Effect size and one-sided permutation p over raw embedding vectors.
SeatResult seat_from_embeddings(const std::string& name,
                                const std::vector<std::vector<double>>& x,
                                const std::vector<std::vector<double>>& y,
                                const std::vector<std::vector<double>>& a,
                                const std::vector<std::vector<double>>& b,
                                std::uint64_t seed);

// Sentence representations are [CLS] embeddings from the model.
SeatResult seat_effect_size(const Checkpoint& model, const Vocabulary& vocab,
                            const SeatTest& test, std::uint64_t seed);

double aggregate_seat(const std::vector<double>& effect_sizes);

std::vector<StereoSetExample> load_stereoset_tsv(const std::string& path);
std::vector<CrowSPair> load_crows_tsv(const std::string& path);
SeatTest load_seat_file(const std::string& path);

// Exact-enumeration threshold for the permutation test; larger partitions are
// sampled (10,000 seeded draws).
inline constexpr std::uint64_t kSeatExactLimit = 12870;
inline constexpr std::size_t kSeatSamples = 10000;

}  // namespace finedeb
