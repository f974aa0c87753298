#include "finedeb/training.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>

#include "finedeb/common.hpp"

namespace finedeb {

void TrainConfig::validate() const {
  if (batch_size < 1) fail("TrainConfig: batch_size must be >= 1");
  if (!(validation_fraction > 0.0 && validation_fraction < 0.5))
    fail("TrainConfig: validation_fraction must be in (0, 0.5)");
  if (!(mask_rate > 0.0 && mask_rate <= 1.0))
    fail("TrainConfig: mask_rate must be in (0, 1]");
  if (max_epochs == 0) fail("TrainConfig: max_epochs must be >= 1");
}

void TrainReport::write(const std::string& path_prefix) const {
  {
    std::ofstream log(path_prefix + ".log");
    if (!log) fail("TrainReport::write: cannot open " + path_prefix + ".log");
    log << "initial val=" << initial_val_loss << "\n";
    for (std::size_t e = 0; e < train_losses.size(); ++e)
      log << "epoch " << e << " train=" << train_losses[e]
          << " val=" << val_losses[e] << "\n";
  }
  std::ofstream sum(path_prefix + ".summary");
  if (!sum) fail("TrainReport::write: cannot open " + path_prefix + ".summary");
  sum << "best_epoch=" << best_epoch << "\n"
      << "best_val_loss=" << best_val_loss << "\n"
      << "initial_val_loss=" << initial_val_loss << "\n"
      << "stopped_early=" << (stopped_early ? "true" : "false") << "\n"
      << "wall_time_sec=" << wall_time_sec << "\n"
      << "encoder_hash_pre=" << encoder_hash_pre << "\n"
      << "encoder_hash_post=" << encoder_hash_post << "\n"
      << "head_hash_pre=" << head_hash_pre << "\n"
      << "head_hash_post=" << head_hash_post << "\n";
}

Tensor debias_loss(const EncoderParams& enc, const ModelConfig& cfg,
                   const Batch& pair_batch, Distance distance) {
  if (pair_batch.seqs.empty()) fail("debias_loss: empty batch");
  if (pair_batch.seqs.size() % 2 != 0)
    fail("debias_loss: batch must interleave pair sides (even size)");
  Tensor hidden = forward_hidden(enc, cfg, pair_batch);
  const std::size_t n_pairs = pair_batch.seqs.size() / 2;
  std::vector<Tensor> sent_diffs, word_diffs;
  sent_diffs.reserve(n_pairs);
  word_diffs.reserve(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    Tensor s1 = cls_embedding(hidden, cfg, 2 * i);
    Tensor s2 = cls_embedding(hidden, cfg, 2 * i + 1);
    Tensor w1 = span_embedding(hidden, cfg, pair_batch, 2 * i);
    Tensor w2 = span_embedding(hidden, cfg, pair_batch, 2 * i + 1);
    sent_diffs.push_back(sub(s1, s2));
    word_diffs.push_back(sub(w1, w2));
  }
  Tensor u = stack_rows(sent_diffs);
  Tensor w = stack_rows(word_diffs);
  return distance == Distance::mse ? mse(u, w) : cosine_distance(u, w);
}

std::pair<Batch, std::vector<int>> mask_batch(const Batch& batch,
                                              double mask_rate,
                                              std::uint64_t seed) {
  if (!(mask_rate > 0.0 && mask_rate <= 1.0))
    fail("mask_batch: mask_rate must be in (0, 1]");
  if (batch.seqs.empty()) fail("mask_batch: empty batch");
  Rng rng(seed);
  Batch masked = batch;
  std::vector<int> targets(batch.seqs.size() * batch.seqs[0].ids.size(),
                           kIgnoreIndex);
  for (std::size_t s = 0; s < batch.seqs.size(); ++s) {
    const auto& ids = batch.seqs[s].ids;
    std::vector<std::size_t> maskable;
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] >= static_cast<int>(kNumSpecials)) maskable.push_back(i);
    if (maskable.empty())
      fail("mask_batch: sequence " + std::to_string(s) + " has no maskable tokens");
    std::vector<std::size_t> chosen;
    while (chosen.empty()) {
      for (auto i : maskable)
        if (rng.next_double() < mask_rate) chosen.push_back(i);
    }
    const std::size_t base = s * ids.size();
    for (auto i : chosen) {
      targets[base + i] = ids[i];
      masked.seqs[s].ids[i] = kMask;
    }
  }
  return {std::move(masked), std::move(targets)};
}

Tensor mlm_loss(const EncoderParams& enc, const LMHeadParams& head,
                const ModelConfig& cfg, const Batch& masked_batch,
                const std::vector<int>& targets) {
  bool any = false;
  for (int t : targets)
    if (t != kIgnoreIndex) any = true;
  if (!any) fail("mlm_loss: no masked positions");
  Tensor logits = forward_logits(enc, head, cfg, masked_batch);
  return cross_entropy(logits, targets, kIgnoreIndex);
}

namespace {

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.push_back(p.values());
  return out;
}

void restore(std::vector<Tensor>& params, const std::vector<std::vector<double>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].values() = snap[i];
}

void set_requires_grad(const std::vector<Tensor>& params, bool rg) {
  for (const auto& p : params) p.node()->requires_grad = rg;
}

struct LoopCallbacks {
  std::size_t n_train = 0;
  // Loss over train-set rows given by idx; gradients flow.
  std::function<Tensor(const std::vector<std::size_t>&)> train_loss;
  // Deterministic full-validation loss.
  std::function<double()> val_loss;
};

// Shared epoch loop: seeded shuffling, Adam, early stopping, best-checkpoint
// restore.
void run_training(const TrainConfig& cfg, std::vector<Tensor> opt_params,
                  const LoopCallbacks& cb, TrainReport& rep) {
  const auto t0 = std::chrono::steady_clock::now();
  AdamState adam;
  adam.lr = cfg.lr;
  adam.init(opt_params);

  rep.initial_val_loss = cb.val_loss();
  double best = rep.initial_val_loss;
  auto best_snap = snapshot(opt_params);
  std::size_t since_best = 0;
  rep.best_epoch = 0;
  Rng shuffle_rng(derive_seed(cfg.seed, "epoch-shuffle"));
  Rng mask_seed_rng(derive_seed(cfg.seed, "batch-mask"));

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    auto order = shuffle_rng.permutation(cb.n_train);
    double train_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      for (auto& p : opt_params) p.zero_grad();
      Tensor loss = cb.train_loss(idx);
      backward(loss);
      adam_step(opt_params, adam);
      train_sum += loss.item();
      ++n_batches;
    }
    rep.train_losses.push_back(train_sum / static_cast<double>(n_batches));
    const double val = cb.val_loss();
    rep.val_losses.push_back(val);
    if (val < best - cfg.min_delta) {
      best = val;
      rep.best_epoch = epoch;
      best_snap = snapshot(opt_params);
      since_best = 0;
    } else {
      ++since_best;
      if (since_best >= cfg.patience) {
        rep.stopped_early = true;
        break;
      }
    }
  }
  restore(opt_params, best_snap);
  rep.best_val_loss = best;
  rep.wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct MlmData {
  std::vector<TokenSequence> train, val;
};

MlmData encode_and_split(const Corpus& corpus, const Vocabulary& vocab,
                         const ModelConfig& mcfg, const TrainConfig& cfg) {
  std::vector<TokenSequence> all;
  all.reserve(corpus.sentences.size());
  for (const auto& s : corpus.sentences) all.push_back(encode(s, vocab, mcfg.max_len));
  Rng rng(derive_seed(cfg.seed, "train-val-split"));
  auto order = rng.permutation(all.size());
  std::size_t n_val = static_cast<std::size_t>(
      cfg.validation_fraction * static_cast<double>(all.size()));
  if (n_val == 0) n_val = 1;
  if (n_val >= all.size()) fail("training: corpus too small for validation split");
  MlmData data;
  for (std::size_t i = 0; i < all.size() - n_val; ++i)
    data.train.push_back(all[order[i]]);
  for (std::size_t i = all.size() - n_val; i < all.size(); ++i)
    data.val.push_back(all[order[i]]);
  return data;
}

double eval_mlm_val(const EncoderParams& enc, const LMHeadParams& head,
                    const ModelConfig& mcfg, const TrainConfig& cfg,
                    const std::vector<TokenSequence>& val) {
  // Fixed mask pattern so epochs are comparable.
  const std::uint64_t val_seed = derive_seed(cfg.seed, "val-mask");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t start = 0; start < val.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(val.size(), start + cfg.batch_size);
    Batch b;
    for (std::size_t i = start; i < end; ++i) b.seqs.push_back(val[i]);
    auto [masked, targets] = mask_batch(b, cfg.mask_rate, val_seed + start);
    Tensor loss = mlm_loss(enc, head, mcfg, masked, targets);
    sum += loss.item() * static_cast<double>(end - start);
    n += end - start;
  }
  return sum / static_cast<double>(n);
}

Checkpoint run_mlm_phase(const Checkpoint& start_ckpt, const Corpus& corpus,
                         const Vocabulary& vocab, const TrainConfig& cfg,
                         bool train_encoder, bool train_head, Phase out_phase,
                         TrainReport* report) {
  cfg.validate();
  start_ckpt.config.validate();
  if (vocab.size() != start_ckpt.config.vocab_size)
    fail("training: vocabulary size does not match model config");
  Checkpoint ckpt = clone_checkpoint(start_ckpt);
  const ModelConfig& mcfg = ckpt.config;
  auto data = encode_and_split(corpus, vocab, mcfg, cfg);
  if (data.train.size() < cfg.batch_size)
    fail("training: corpus train split (" + std::to_string(data.train.size()) +
         " sentences) smaller than one batch of " + std::to_string(cfg.batch_size));

  TrainReport rep;
  rep.encoder_hash_pre = ckpt.encoder.hash();
  rep.head_hash_pre = ckpt.head.hash();

  set_requires_grad(ckpt.encoder.all(), train_encoder);
  set_requires_grad(ckpt.head.all(), train_head);
  std::vector<Tensor> opt_params;
  if (train_encoder)
    for (auto& p : ckpt.encoder.all()) opt_params.push_back(p);
  if (train_head)
    for (auto& p : ckpt.head.all()) opt_params.push_back(p);

  Rng mask_rng(derive_seed(cfg.seed, "train-mask"));
  LoopCallbacks cb;
  cb.n_train = data.train.size();
  cb.train_loss = [&](const std::vector<std::size_t>& idx) {
    Batch b;
    for (auto i : idx) b.seqs.push_back(data.train[i]);
    auto [masked, targets] = mask_batch(b, cfg.mask_rate, mask_rng.next_u64());
    return mlm_loss(ckpt.encoder, ckpt.head, mcfg, masked, targets);
  };
  cb.val_loss = [&] {
    return eval_mlm_val(ckpt.encoder, ckpt.head, mcfg, cfg, data.val);
  };
  run_training(cfg, opt_params, cb, rep);

  set_requires_grad(ckpt.encoder.all(), true);
  set_requires_grad(ckpt.head.all(), true);
  rep.encoder_hash_post = ckpt.encoder.hash();
  rep.head_hash_post = ckpt.head.hash();
  if (!train_encoder && rep.encoder_hash_post != rep.encoder_hash_pre)
    fail("training: freeze contract violated for encoder");
  if (!train_head && rep.head_hash_post != rep.head_hash_pre)
    fail("training: freeze contract violated for LM head");
  ckpt.phase = out_phase;
  if (report) *report = std::move(rep);
  return ckpt;
}

}  // namespace

Checkpoint pretrain_mlm(const ModelConfig& model_cfg, const TrainConfig& cfg,
                        const Corpus& corpus, const Vocabulary& vocab,
                        TrainReport* report) {
  model_cfg.validate();
  Checkpoint init;
  init.config = model_cfg;
  init.phase = Phase::pretrained;
  auto [enc, head] = init_params(model_cfg);
  init.encoder = std::move(enc);
  init.head = std::move(head);
  return run_mlm_phase(init, corpus, vocab, cfg, /*train_encoder=*/true,
                       /*train_head=*/true, Phase::pretrained, report);
}

Checkpoint train_debias(const Checkpoint& pretrained,
                        const std::vector<DebiasPair>& pairs,
                        const Vocabulary& vocab, const TrainConfig& cfg,
                        TrainReport* report) {
  cfg.validate();
  if (pretrained.phase != Phase::pretrained)
    fail("train_debias: expected a pretrained checkpoint, got phase " +
         phase_name(pretrained.phase));
  if (pairs.empty()) fail("train_debias: empty pair set");
  Checkpoint ckpt = clone_checkpoint(pretrained);
  const ModelConfig& mcfg = ckpt.config;

  std::vector<std::pair<TokenSequence, TokenSequence>> encoded;
  encoded.reserve(pairs.size());
  for (const auto& p : pairs) encoded.push_back(encode_pair(p, vocab, mcfg.max_len));

  Rng split_rng(derive_seed(cfg.seed, "train-val-split"));
  auto order = split_rng.permutation(encoded.size());
  std::size_t n_val = static_cast<std::size_t>(
      cfg.validation_fraction * static_cast<double>(encoded.size()));
  if (n_val == 0) n_val = 1;
  if (n_val >= encoded.size())
    fail("train_debias: too few pairs for a validation split");
  std::vector<std::pair<TokenSequence, TokenSequence>> train, val;
  for (std::size_t i = 0; i < encoded.size() - n_val; ++i)
    train.push_back(encoded[order[i]]);
  for (std::size_t i = encoded.size() - n_val; i < encoded.size(); ++i)
    val.push_back(encoded[order[i]]);

  TrainReport rep;
  rep.encoder_hash_pre = ckpt.encoder.hash();
  rep.head_hash_pre = ckpt.head.hash();
  set_requires_grad(ckpt.encoder.all(), true);
  set_requires_grad(ckpt.head.all(), false);
  std::vector<Tensor> opt_params = ckpt.encoder.all();

  auto batch_of = [&](const std::vector<std::pair<TokenSequence, TokenSequence>>& src,
                      const std::vector<std::size_t>& idx) {
    Batch b;
    for (auto i : idx) {
      b.seqs.push_back(src[i].first);
      b.seqs.push_back(src[i].second);
    }
    return b;
  };

  LoopCallbacks cb;
  cb.n_train = train.size();
  cb.train_loss = [&](const std::vector<std::size_t>& idx) {
    return debias_loss(ckpt.encoder, mcfg, batch_of(train, idx), cfg.distance);
  };
  cb.val_loss = [&] {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t start = 0; start < val.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(val.size(), start + cfg.batch_size);
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < end; ++i) idx.push_back(i);
      Tensor loss = debias_loss(ckpt.encoder, mcfg, batch_of(val, idx), cfg.distance);
      sum += loss.item() * static_cast<double>(end - start);
      n += end - start;
    }
    return sum / static_cast<double>(n);
  };
  run_training(cfg, opt_params, cb, rep);

  set_requires_grad(ckpt.head.all(), true);
  rep.encoder_hash_post = ckpt.encoder.hash();
  rep.head_hash_post = ckpt.head.hash();
  if (rep.head_hash_post != rep.head_hash_pre)
    fail("train_debias: freeze contract violated for LM head");
  ckpt.phase = Phase::debiased;
  if (report) *report = std::move(rep);
  return ckpt;
}

Checkpoint train_lm_head(const Checkpoint& debiased, const Corpus& corpus,
                         const Vocabulary& vocab, const TrainConfig& cfg,
                         TrainReport* report) {
  // Accepts a pretrained checkpoint too: the LM-only baseline retrains the
  // head directly on top of the pretrained encoder.
  if (debiased.phase != Phase::debiased && debiased.phase != Phase::pretrained)
    fail("train_lm_head: expected a debiased or pretrained checkpoint, got phase " +
         phase_name(debiased.phase));
  return run_mlm_phase(debiased, corpus, vocab, cfg, /*train_encoder=*/false,
                       /*train_head=*/true, Phase::finetuned, report);
}

}  // namespace finedeb
