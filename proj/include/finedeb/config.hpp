#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "finedeb/model.hpp"
#include "finedeb/training.hpp"

namespace finedeb {

// Line-oriented `key = value` config with dotted keys. Flags override file
// values; the effective config is written back into the run directory.
struct ExperimentConfig {
  // paths
  std::string word_lists_path;
  std::string templates_path;
  std::string corpus_path;
  std::string stereoset_path;
  std::string crows_path;
  std::vector<std::string> seat_paths;

  std::string demographic_name = "gender";
  std::size_t demographic_classes = 2;

  ModelConfig model;  // vocab_size filled in after build-vocab
  std::size_t vocab_min_count = 1;

  TrainConfig pretrain;
  TrainConfig debias;
  TrainConfig lm;

  std::size_t debias_sample_size = 0;  // 0 = full enumeration
  double lm_corpus_fraction = 1.0;     // first ceil(f*N) of the shuffled corpus

  std::vector<std::size_t> sweep_debias_sizes;
  std::vector<double> sweep_lm_fractions;

  std::uint64_t seed = 0;

  void validate_paths() const;  // referenced input paths must exist
  std::map<std::string, std::string> to_map() const;
  std::string serialize() const;       // canonical key order
  std::uint64_t digest() const;

  static ExperimentConfig from_map(const std::map<std::string, std::string>& kv);
  static ExperimentConfig load(const std::string& path);
  void apply_override(const std::string& key, const std::string& value);
};

ExperimentConfig default_config();

}  // namespace finedeb
