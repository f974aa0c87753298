#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "finedeb/dataprep.hpp"
#include "finedeb/model.hpp"
#include "finedeb/tensor.hpp"
#include "finedeb/tokenizer.hpp"

namespace finedeb {

inline constexpr int kIgnoreIndex = -100;

enum class Distance { mse, cosine };

struct TrainConfig {
  std::size_t batch_size = 64;
  double lr = 1e-4;
  std::size_t max_epochs = 30;  // debias default; LM phases use 100
  std::size_t patience = 5;
  double min_delta = 1e-4;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;
  Distance distance = Distance::mse;
  double mask_rate = 0.15;

  void validate() const;
};

struct TrainReport {
  std::vector<double> train_losses;  // per epoch
  std::vector<double> val_losses;    // per epoch
  double initial_val_loss = 0.0;     // before any update
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
  double wall_time_sec = 0.0;
  std::uint64_t encoder_hash_pre = 0, encoder_hash_post = 0;
  std::uint64_t head_hash_pre = 0, head_hash_post = 0;

  // <prefix>.log (per-epoch lines) and <prefix>.summary (key=value).
  void write(const std::string& path_prefix) const;
};

// Mean over the pair batch of D(S1-S2, W1-W2). The batch interleaves pair
// sides: sequence 2i is side a of pair i, 2i+1 side b; all carry target
// spans.
Tensor debias_loss(const EncoderParams& enc, const ModelConfig& cfg,
                   const Batch& pair_batch, Distance distance);

// Independently masks each non-special token with probability mask_rate,
// re-drawing until at least one position is masked per sequence. Targets are
// the original ids at masked positions, kIgnoreIndex elsewhere.
std::pair<Batch, std::vector<int>> mask_batch(const Batch& batch,
                                              double mask_rate,
                                              std::uint64_t seed);

Tensor mlm_loss(const EncoderParams& enc, const LMHeadParams& head,
                const ModelConfig& cfg, const Batch& masked_batch,
                const std::vector<int>& targets);

// Phase 0: joint encoder+head masked-LM training (the stand-in for a
// pretrained model).
Checkpoint pretrain_mlm(const ModelConfig& model_cfg, const TrainConfig& cfg,
                        const Corpus& corpus, const Vocabulary& vocab,
                        TrainReport* report = nullptr);

// Phase 1: optimizes debias_loss over encoder parameters only; the LM head
// stays bit-identical (hash-attested in the report).
Checkpoint train_debias(const Checkpoint& pretrained,
                        const std::vector<DebiasPair>& pairs,
                        const Vocabulary& vocab, const TrainConfig& cfg,
                        TrainReport* report = nullptr);

// Phase 2: optimizes mlm_loss over the LM head only; encoder frozen.
Checkpoint train_lm_head(const Checkpoint& debiased, const Corpus& corpus,
                         const Vocabulary& vocab, const TrainConfig& cfg,
                         TrainReport* report = nullptr);

}  // namespace finedeb
