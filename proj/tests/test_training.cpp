#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "finedeb/common.hpp"
#include "finedeb/model.hpp"
#include "finedeb/tokenizer.hpp"
#include "finedeb/training.hpp"

using namespace finedeb;

namespace {

Corpus corpus_of(std::vector<std::string> sentences) {
  Corpus c;
  c.sentences = std::move(sentences);
  c.source_path = "<mem>";
  return c;
}

WordTupleSet gender_tuples() {
  WordTupleSet s;
  s.demographic = {"gender", 2};
  s.class_labels = {"male", "female"};
  s.tuples = {{"man", "woman"}, {"boy", "girl"}};
  return s;
}

Vocabulary toy_vocab() {
  return Vocabulary::build(
      {corpus_of({"the man went to the lake", "the woman went to the lake",
                  "the boy sat by the door", "the girl sat by the door",
                  "a bird flew over the house", "the house stood on a hill"})},
      {gender_tuples()}, 1);
}

ModelConfig toy_model_config(std::size_t vocab_size) {
  ModelConfig cfg;
  cfg.vocab_size = vocab_size;
  cfg.max_len = 12;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.seed = 3;
  return cfg;
}

DebiasPair pair_of(const std::string& tmpl, const std::string& ta,
                   const std::string& tb) {
  DebiasPair p;
  p.sentence_a = substitute_placeholder(tmpl, ta);
  p.sentence_b = substitute_placeholder(tmpl, tb);
  p.target_a = ta;
  p.target_b = tb;
  p.class_a = "male";
  p.class_b = "female";
  p.template_id = "mem:1";
  p.tuple_index = 0;
  return p;
}

Batch batch_from_pairs(const std::vector<DebiasPair>& pairs,
                       const Vocabulary& vocab, std::size_t max_len) {
  Batch b;
  for (const auto& p : pairs) {
    auto [a, bb] = encode_pair(p, vocab, max_len);
    b.seqs.push_back(a);
    b.seqs.push_back(bb);
  }
  return b;
}

}  // namespace

TEST_CASE("debias loss is zero for identical pair sides") {
  auto vocab = toy_vocab();
  auto cfg = toy_model_config(vocab.size());
  auto [enc, head] = init_params(cfg);
  auto b = batch_from_pairs({pair_of("the ____ went to the lake", "man", "man")},
                            vocab, cfg.max_len);
  CHECK(debias_loss(enc, cfg, b, Distance::mse).item() == 0.0);
}

TEST_CASE("debias loss is exactly symmetric under side swap") {
  auto vocab = toy_vocab();
  auto cfg = toy_model_config(vocab.size());
  auto [enc, head] = init_params(cfg);
  auto pairs = std::vector<DebiasPair>{
      pair_of("the ____ went to the lake", "man", "woman"),
      pair_of("the ____ sat by the door", "boy", "girl")};
  auto b = batch_from_pairs(pairs, vocab, cfg.max_len);
  Batch swapped = b;
  std::swap(swapped.seqs[0], swapped.seqs[1]);
  std::swap(swapped.seqs[2], swapped.seqs[3]);
  for (Distance d : {Distance::mse, Distance::cosine})
    CHECK(debias_loss(enc, cfg, b, d).item() ==
          debias_loss(enc, cfg, swapped, d).item());
  CHECK(debias_loss(enc, cfg, b, Distance::mse).item() > 0.0);
}

TEST_CASE("debias loss requires target spans") {
  auto vocab = toy_vocab();
  auto cfg = toy_model_config(vocab.size());
  auto [enc, head] = init_params(cfg);
  Batch b;
  b.seqs.push_back(encode("the man went to the lake", vocab, cfg.max_len));
  b.seqs.push_back(encode("the woman went to the lake", vocab, cfg.max_len));
  CHECK_THROWS_AS((void)debias_loss(enc, cfg, b, Distance::mse), FinedebError);
}

TEST_CASE("masking hits the configured fraction of non-special tokens") {
  auto vocab = toy_vocab();
  std::string long_sentence;
  for (int i = 0; i < 30; ++i)
    long_sentence += (i ? " " : "") + std::string(i % 2 ? "lake" : "house");
  Batch b;
  for (int i = 0; i < 400; ++i)
    b.seqs.push_back(encode(long_sentence, vocab, 32));

  auto [masked, targets] = mask_batch(b, 0.15, 99);
  REQUIRE(targets.size() == b.seqs.size() * 32);
  std::size_t maskable = 0, masked_count = 0;
  for (std::size_t s = 0; s < b.seqs.size(); ++s) {
    bool any = false;
    for (std::size_t p = 0; p < 32; ++p) {
      const std::size_t i = s * 32 + p;
      const int orig = b.seqs[s].ids[p];
      if (orig >= static_cast<int>(kNumSpecials)) ++maskable;
      if (masked.seqs[s].ids[p] == kMask) {
        ++masked_count;
        any = true;
        CHECK(targets[i] == orig);
        CHECK(orig >= static_cast<int>(kNumSpecials));
      } else {
        CHECK(masked.seqs[s].ids[p] == orig);
        CHECK(targets[i] == kIgnoreIndex);
      }
    }
    CHECK(any);  // every sequence has at least one masked position
  }
  const double rate = static_cast<double>(masked_count) / maskable;
  CHECK(rate > 0.13);
  CHECK(rate < 0.17);

  // deterministic per seed
  auto [m2, t2] = mask_batch(b, 0.15, 99);
  CHECK(t2 == targets);
  auto [m3, t3] = mask_batch(b, 0.15, 100);
  CHECK(t3 != targets);
}

TEST_CASE("masking a batch with no maskable tokens fails") {
  auto vocab = toy_vocab();
  Batch b;
  TokenSequence s;
  s.ids.assign(8, kPad);
  s.attention_mask.assign(8, 0);
  s.ids[0] = kCls;
  s.ids[1] = kSep;
  s.attention_mask[0] = s.attention_mask[1] = 1;
  b.seqs.push_back(s);
  CHECK_THROWS_AS(mask_batch(b, 0.15, 1), FinedebError);
}

TEST_CASE("uniform logits give ln V masked loss") {
  auto vocab = toy_vocab();
  auto cfg = toy_model_config(vocab.size());
  auto [enc, head] = init_params(cfg);
  std::fill(head.projection.values().begin(), head.projection.values().end(), 0.0);
  std::fill(head.bias.values().begin(), head.bias.values().end(), 0.0);

  Batch b;
  b.seqs.push_back(encode("the man went to the lake", vocab, cfg.max_len));
  auto [masked, targets] = mask_batch(b, 0.3, 7);
  auto loss = mlm_loss(enc, head, cfg, masked, targets);
  CHECK(loss.item() ==
        doctest::Approx(std::log(static_cast<double>(vocab.size()))).epsilon(1e-12));
}

TEST_CASE("debias training freezes the LM head and tags the phase") {
  auto vocab = toy_vocab();
  auto cfg = toy_model_config(vocab.size());
  auto [enc, head] = init_params(cfg);
  Checkpoint pre{cfg, Phase::pretrained, enc, head};

  std::vector<DebiasPair> pairs;
  for (const char* tmpl : {"the ____ went to the lake", "the ____ sat by the door",
                           "a ____ stood on a hill", "the ____ flew over the house"}) {
    pairs.push_back(pair_of(tmpl, "man", "woman"));
    pairs.push_back(pair_of(tmpl, "boy", "girl"));
  }
  TrainConfig tc;
  tc.batch_size = 4;
  tc.max_epochs = 2;
  tc.validation_fraction = 0.25;
  tc.seed = 11;

  TrainReport rep;
  auto out = train_debias(pre, pairs, vocab, tc, &rep);
  CHECK(out.phase == Phase::debiased);
  CHECK(rep.head_hash_pre == rep.head_hash_post);
  CHECK(out.head.hash() == head.hash());
  CHECK(out.encoder.hash() != enc.hash());
  CHECK(rep.train_losses.size() == 2);
  CHECK(rep.val_losses.size() == 2);

  // phase contract: a non-pretrained checkpoint is rejected
  CHECK_THROWS_AS(train_debias(out, pairs, vocab, tc, nullptr), FinedebError);
}

TEST_CASE("LM-head training freezes the encoder") {
  auto vocab = toy_vocab();
  auto cfg = toy_model_config(vocab.size());
  auto [enc, head] = init_params(cfg);
  Checkpoint pre{cfg, Phase::debiased, enc, head};

  auto corpus = corpus_of({"the man went to the lake", "the woman went to the lake",
                           "the boy sat by the door", "the girl sat by the door",
                           "a bird flew over the house", "the house stood on a hill",
                           "the man sat by the door", "a bird went to the lake"});
  TrainConfig tc;
  tc.batch_size = 4;
  tc.max_epochs = 2;
  tc.seed = 13;

  TrainReport rep;
  auto out = train_lm_head(pre, corpus, vocab, tc, &rep);
  CHECK(out.phase == Phase::finetuned);
  CHECK(rep.encoder_hash_pre == rep.encoder_hash_post);
  CHECK(out.encoder.hash() == enc.hash());
  CHECK(out.head.hash() != head.hash());

  // the LM-only baseline path: a pretrained checkpoint is also accepted
  Checkpoint base{cfg, Phase::pretrained, enc, head};
  auto out2 = train_lm_head(base, corpus, vocab, tc, nullptr);
  CHECK(out2.phase == Phase::finetuned);
  CHECK(out2.encoder.hash() == enc.hash());

  // but a finetuned one is not
  CHECK_THROWS_AS(train_lm_head(out, corpus, vocab, tc, nullptr), FinedebError);
}

TEST_CASE("joint pretraining reduces the loss and is deterministic") {
  auto vocab = toy_vocab();
  auto cfg = toy_model_config(vocab.size());
  auto corpus = corpus_of({"the man went to the lake", "the woman went to the lake",
                           "the boy sat by the door", "the girl sat by the door",
                           "a bird flew over the house", "the house stood on a hill",
                           "the man sat by the door", "a bird went to the lake",
                           "the woman stood on a hill", "the girl went to the lake"});
  TrainConfig tc;
  tc.batch_size = 4;
  tc.lr = 5e-3;
  tc.max_epochs = 20;
  tc.patience = 20;
  tc.seed = 17;

  TrainReport rep;
  auto ck = pretrain_mlm(cfg, tc, corpus, vocab, &rep);
  CHECK(ck.phase == Phase::pretrained);
  // a corpus this small overfits, so improvement shows up in the train loss
  CHECK(rep.train_losses.back() < rep.train_losses.front());
  // the pre-update state counts as the epoch-0 candidate
  CHECK(rep.best_val_loss ==
        std::min(rep.initial_val_loss,
                 *std::min_element(rep.val_losses.begin(), rep.val_losses.end())));
  CHECK(rep.wall_time_sec > 0.0);

  auto ck2 = pretrain_mlm(cfg, tc, corpus, vocab, nullptr);
  CHECK(ck2.encoder.hash() == ck.encoder.hash());
  CHECK(ck2.head.hash() == ck.head.hash());
}

TEST_CASE("early stopping restores the best epoch") {
  auto vocab = toy_vocab();
  auto cfg = toy_model_config(vocab.size());
  auto corpus = corpus_of({"the man went to the lake", "the woman went to the lake",
                           "the boy sat by the door", "the girl sat by the door",
                           "a bird flew over the house", "the house stood on a hill"});
  TrainConfig tc;
  tc.batch_size = 4;
  tc.lr = 0.3;  // large enough to bounce and trigger patience
  tc.max_epochs = 50;
  tc.patience = 2;
  tc.seed = 19;

  TrainReport rep;
  (void)pretrain_mlm(cfg, tc, corpus, vocab, &rep);
  if (rep.stopped_early) {
    CHECK(rep.val_losses.size() < 50);
    CHECK(rep.best_epoch < rep.val_losses.size());
    CHECK(rep.val_losses[rep.best_epoch] == rep.best_val_loss);
  }
}

TEST_CASE("train config validation") {
  TrainConfig tc;
  CHECK_NOTHROW(tc.validate());
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), FinedebError);
  tc = TrainConfig{};
  tc.batch_size = 3;  // debias batches must pair up
  tc.validation_fraction = 1.5;
  CHECK_THROWS_AS(tc.validate(), FinedebError);
  tc = TrainConfig{};
  tc.mask_rate = 0.0;
  CHECK_THROWS_AS(tc.validate(), FinedebError);
}
