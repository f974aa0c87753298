#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "finedeb/tensor.hpp"
#include "finedeb/tokenizer.hpp"

namespace finedeb {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t max_len = 64;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 128;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
};

struct EncoderParams {
  Tensor token_embedding;     // V x d
  Tensor position_embedding;  // max_len x d
  std::vector<LayerParams> layers;
  Tensor final_gain, final_bias;

  std::vector<Tensor> all() const;
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::uint64_t hash() const;
};

struct LMHeadParams {
  Tensor projection;  // d x V, untied from the token embedding
  Tensor bias;        // V

  std::vector<Tensor> all() const;
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::uint64_t hash() const;
};

enum class Phase { pretrained, debiased, finetuned };

std::string phase_name(Phase p);
Phase phase_from_name(const std::string& s);

struct Checkpoint {
  ModelConfig config;
  Phase phase = Phase::pretrained;
  EncoderParams encoder;
  LMHeadParams head;
};

// Seeded Gaussian init (mean 0, std 0.02), zero biases, unit layer-norm
// gains. Deterministic per seed.
std::pair<EncoderParams, LMHeadParams> init_params(const ModelConfig& config);

struct Batch {
  std::vector<TokenSequence> seqs;

  std::vector<int> flat_ids() const;
  // Additive key mask per flattened position: 0 real, large-negative pad.
  std::vector<double> additive_key_mask() const;
};

// Pre-norm transformer encoder stack -> hidden states (B*L, d_model).
Tensor forward_hidden(const EncoderParams& enc, const ModelConfig& cfg,
                      const Batch& batch);
Tensor forward_logits(const EncoderParams& enc, const LMHeadParams& head,
                      const ModelConfig& cfg, const Batch& batch);

// Sentence representation: final-layer hidden state at position 0 of
// sequence seq_index. Shape (1, d_model).
Tensor cls_embedding(const Tensor& hidden, const ModelConfig& cfg,
                     std::size_t seq_index);
// Mean of the final-layer hidden states over the sequence's target span.
Tensor span_embedding(const Tensor& hidden, const ModelConfig& cfg,
                      const Batch& batch, std::size_t seq_index);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint clone_checkpoint(const Checkpoint& ckpt);

}  // namespace finedeb
