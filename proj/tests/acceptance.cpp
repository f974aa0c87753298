// Acceptance gate: nine pass/fail checks covering metric arithmetic, pair
// generation, gradient correctness, freeze contracts, the end-to-end toy
// debiasing run and determinism. Prints one line per criterion and exits
// nonzero if any fails.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "finedeb/common.hpp"
#include "finedeb/config.hpp"
#include "finedeb/dataprep.hpp"
#include "finedeb/metrics.hpp"
#include "finedeb/model.hpp"
#include "finedeb/pipeline.hpp"
#include "finedeb/tensor.hpp"
#include "finedeb/tokenizer.hpp"
#include "finedeb/training.hpp"

using namespace finedeb;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int index, const std::string& name, bool ok,
            const std::string& detail = "") {
  std::cout << (ok ? "[PASS] " : "[FAIL] ") << index << " " << name;
  if (!detail.empty()) std::cout << " (" << detail << ")";
  std::cout << "\n" << std::flush;
  if (!ok) ++g_failures;
}

std::string data_path(const std::string& name) {
  return std::string(FINEDEB_DATA_DIR) + "/" + name;
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> read_kv(const std::string& path) {
  std::ifstream in(path);
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

// ---- criterion 1: ICAT arithmetic over the eight published gender rows ----

bool check_icat_rows() {
  const double rows[8][3] = {
      {84.17, 60.28, 66.86}, {85.01, 59.01, 69.69}, {77.70, 53.27, 72.62},
      {83.08, 59.61, 67.11}, {83.04, 60.66, 65.34}, {80.63, 57.25, 68.94},
      {84.09, 59.34, 68.38}, {84.20, 59.37, 68.42}};
  for (const auto& r : rows)
    if (std::abs(compute_icat(r[0], r[1]) - r[2]) > 0.01) return false;
  return true;
}

// ---- criterion 2: SEAT aggregation over the published per-test rows ----

bool check_seat_rows() {
  const std::vector<double> gender = {0.931, 0.090, -0.124, 0.937, 0.783, 0.858};
  const std::vector<double> race = {-0.079, 0.690, 0.778, 0.469,
                                    0.901,  0.887, 0.539};
  return std::abs(aggregate_seat(gender) - 0.620) <= 0.005 &&
         std::abs(aggregate_seat(race) - 0.620) <= 0.005;
}

// ---- criterion 3: pair counts and the counterfactual property ----

bool check_pair_generation() {
  Rng rng(123);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t T = 1 + rng.uniform_int(10);
    const std::size_t M = 1 + rng.uniform_int(10);
    const std::size_t ks[] = {2, 5, 7};
    const std::size_t k = ks[rng.uniform_int(3)];

    Demographic demo{"d", k};
    WordTupleSet set;
    set.demographic = demo;
    for (std::size_t c = 0; c < k; ++c)
      set.class_labels.push_back("c" + std::to_string(c));
    for (std::size_t t = 0; t < M; ++t) {
      std::vector<std::string> tup;
      for (std::size_t c = 0; c < k; ++c)
        tup.push_back("w" + std::to_string(t) + "_" + std::to_string(c));
      set.tuples.push_back(tup);
    }
    std::vector<SentenceTemplate> templates;
    std::map<std::string, std::string> text_of;
    for (std::size_t t = 0; t < T; ++t) {
      const std::string text = "s" + std::to_string(t) + " ____ end";
      const std::string id = "mem:" + std::to_string(t);
      templates.push_back({demo, text, id});
      text_of[id] = text;
    }

    const auto pairs = generate_pairs(templates, set, 9);
    if (pairs.size() != T * M * k * (k - 1) / 2) return false;
    for (const auto& p : pairs) {
      const auto& text = text_of.at(p.template_id);
      if (p.sentence_a != substitute_placeholder(text, p.target_a)) return false;
      if (p.sentence_b != substitute_placeholder(text, p.target_b)) return false;
      if (p.class_a == p.class_b) return false;
      if (p.target_a == p.target_b) return false;
    }
  }
  return true;
}

// ---- criterion 4: finite-difference gradient checks ----

// Square with a deliberately wrong derivative (3x instead of 2x); the
// negative control for the checker.
Tensor buggy_square(const Tensor& a) {
  auto n = std::make_shared<detail::Node>();
  n->shape = a.shape();
  n->values.resize(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i)
    n->values[i] = a.values()[i] * a.values()[i];
  n->parents = {a.node()};
  n->requires_grad = a.requires_grad();
  auto an = a.node();
  detail::Node* o = n.get();
  if (n->requires_grad)
    n->backward_fn = [an, o] {
      an->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i)
        an->grad[i] += o->grad[i] * 3.0 * an->values[i];
    };
  return Tensor(std::move(n));
}

TokenSequence seq_of(std::vector<int> body, std::size_t max_len) {
  TokenSequence s;
  s.ids.assign(max_len, kPad);
  s.attention_mask.assign(max_len, 0);
  s.ids[0] = kCls;
  std::size_t i = 1;
  for (int id : body) s.ids[i++] = id;
  s.ids[i++] = kSep;
  for (std::size_t j = 0; j < i; ++j) s.attention_mask[j] = 1;
  return s;
}

bool check_gradients(std::string& detail) {
  ModelConfig cfg;
  cfg.vocab_size = 20;
  cfg.max_len = 8;
  cfg.d_model = 4;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 8;
  cfg.seed = 2;
  auto [enc, head] = init_params(cfg);

  Batch masked;
  masked.seqs.push_back(seq_of({kMask, 7, kMask}, cfg.max_len));
  masked.seqs.push_back(seq_of({9, kMask, 11, 12}, cfg.max_len));
  std::vector<int> targets(2 * cfg.max_len, kIgnoreIndex);
  targets[1] = 6;
  targets[3] = 8;
  targets[cfg.max_len + 2] = 10;

  std::vector<Tensor> mlm_params = enc.all();
  for (auto& p : head.all()) mlm_params.push_back(p);
  auto mlm_f = [&] { return mlm_loss(enc, head, cfg, masked, targets); };
  const double mlm_err = finite_diff_check(mlm_f, mlm_params, 1e-5);

  Batch pair;
  pair.seqs.push_back(seq_of({5, 9, 13}, cfg.max_len));
  pair.seqs.push_back(seq_of({5, 10, 13}, cfg.max_len));
  pair.seqs[0].target_span = {{2, 3}};
  pair.seqs[1].target_span = {{2, 3}};
  std::vector<Tensor> deb_params = enc.all();
  auto deb_f = [&] { return debias_loss(enc, cfg, pair, Distance::mse); };
  const double deb_err = finite_diff_check(deb_f, deb_params, 1e-5);

  auto p = Tensor::from({3}, {0.7, -1.3, 0.4}, true);
  std::vector<Tensor> bad_params = {p};
  auto bad_f = [&] { return sum(buggy_square(p)); };
  const double bad_err = finite_diff_check(bad_f, bad_params, 1e-5);

  std::ostringstream os;
  os << "mlm=" << mlm_err << " debias=" << deb_err << " control=" << bad_err;
  detail = os.str();
  return mlm_err <= 1e-4 && deb_err <= 1e-4 && bad_err > 1e-2;
}

// ---- criterion 8: metric oracles on micro-fixtures ----

Corpus corpus_of(std::vector<std::string> sentences) {
  Corpus c;
  c.sentences = std::move(sentences);
  c.source_path = "<mem>";
  return c;
}

double mean_cos(const std::vector<double>& w,
                const std::vector<std::vector<double>>& set) {
  double acc = 0;
  for (const auto& a : set) {
    double dot = 0, nw = 0, na = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      dot += w[i] * a[i];
      nw += w[i] * w[i];
      na += a[i] * a[i];
    }
    acc += dot / (std::sqrt(nw) * std::sqrt(na));
  }
  return acc / static_cast<double>(set.size());
}

bool check_metric_oracles() {
  auto vocab = Vocabulary::build(
      {corpus_of({"the man was strong", "the woman was gentle",
                  "a banana lay on the table", "the king sat down"})},
      {}, 1);
  ModelConfig mcfg;
  mcfg.vocab_size = vocab.size();
  mcfg.max_len = 10;
  mcfg.d_model = 8;
  mcfg.n_layers = 1;
  mcfg.n_heads = 2;
  mcfg.d_ff = 16;
  mcfg.seed = 9;
  auto [enc, head] = init_params(mcfg);
  Checkpoint ckpt{mcfg, Phase::pretrained, enc, head};

  // StereoSet vs a brute-force recomputation from per-fill scores
  std::vector<StereoSetExample> ex = {
      {"the man was BLANK", "strong", "gentle", "banana", "gender"},
      {"the woman was BLANK", "gentle", "strong", "table", "gender"},
      {"the king was BLANK", "strong", "gentle", "lay", "gender"},
      {"the BLANK sat down", "man", "woman", "banana", "gender"},
  };
  const auto scores = stereoset_eval(ckpt, vocab, ex);
  double ss_wins = 0, lms_wins = 0;
  for (const auto& e : ex) {
    const double st = score_fill(ckpt, vocab, e.context, e.stereotype);
    const double an = score_fill(ckpt, vocab, e.context, e.anti_stereotype);
    const double un = score_fill(ckpt, vocab, e.context, e.unrelated);
    ss_wins += st > an ? 1.0 : st < an ? 0.0 : 0.5;
    lms_wins += (st > un ? 1.0 : st < un ? 0.0 : 0.5) * 0.5 +
                (an > un ? 1.0 : an < un ? 0.0 : 0.5) * 0.5;
  }
  if (scores.ss != 100.0 * ss_wins / 4.0) return false;
  if (scores.lms != 100.0 * lms_wins / 4.0) return false;
  if (scores.icat != compute_icat(scores.lms, scores.ss)) return false;

  // CrowS vs a brute-force recomputation over the shared positions
  std::vector<CrowSPair> pairs = {
      {"the man was strong", "the woman was strong", "gender"},
      {"the king was gentle", "the man was gentle", "gender"},
  };
  double wins = 0;
  for (const auto& pr : pairs) {
    const double more = pll_score(ckpt, vocab, pr.sent_more, {0, 2, 3});
    const double less = pll_score(ckpt, vocab, pr.sent_less, {0, 2, 3});
    wins += more > less ? 1.0 : more < less ? 0.0 : 0.5;
  }
  if (crows_eval(ckpt, vocab, pairs, nullptr) != 100.0 * wins / 2.0) return false;

  // hand-scored: a zeroed head cannot prefer anything
  auto flat = ckpt;
  std::fill(flat.head.projection.values().begin(),
            flat.head.projection.values().end(), 0.0);
  std::fill(flat.head.bias.values().begin(), flat.head.bias.values().end(), 0.0);
  const auto tied = stereoset_eval(flat, vocab, ex);
  if (tied.ss != 50.0 || tied.lms != 50.0) return false;
  if (crows_eval(flat, vocab, pairs, nullptr) != 50.0) return false;

  // SEAT effect size on the hand-derived planar example
  const double s2 = std::sqrt(2.0);
  std::vector<std::vector<double>> X = {{1, 0}, {0, 1}};
  std::vector<std::vector<double>> Y = {{1, 1}, {-1, 1}};
  std::vector<std::vector<double>> A = {{1, 0}};
  std::vector<std::vector<double>> B = {{0, 1}};
  auto r = seat_from_embeddings("hand", X, Y, A, B, 1);
  const std::vector<double> s = {1.0, -1.0, 0.0, -s2};
  double mean = 0;
  for (double v : s) mean += v;
  mean /= 4.0;
  double var = 0;
  for (double v : s) var += (v - mean) * (v - mean);
  var /= 3.0;
  const double want = (0.0 - (-s2 / 2.0)) / std::sqrt(var);
  return std::abs(r.effect_size - want) <= 1e-9;
}

bool check_permutation_p() {
  Rng rng(33);
  const std::size_t d = 5, n_side = 9;  // C(18,9) exceeds the exact limit
  auto draw = [&](std::size_t n, double shift) {
    std::vector<std::vector<double>> out(n, std::vector<double>(d));
    for (auto& v : out)
      for (auto& x : v) x = rng.normal() + shift;
    return out;
  };
  auto X = draw(n_side, 0.3), Y = draw(n_side, -0.1);
  auto A = draw(4, 0.5), B = draw(4, -0.5);
  auto r = seat_from_embeddings("sampled", X, Y, A, B, 7);

  std::vector<double> s;
  for (const auto& w : X) s.push_back(mean_cos(w, A) - mean_cos(w, B));
  for (const auto& w : Y) s.push_back(mean_cos(w, A) - mean_cos(w, B));
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n_side; ++i) mx += s[i];
  for (std::size_t i = n_side; i < 2 * n_side; ++i) my += s[i];
  const double observed =
      mx / static_cast<double>(n_side) - my / static_cast<double>(n_side);

  std::size_t ge = 0, total = 0;
  std::vector<std::size_t> comb(n_side);
  for (std::size_t i = 0; i < n_side; ++i) comb[i] = i;
  bool more = true;
  while (more) {
    std::vector<char> in_x(2 * n_side, 0);
    for (auto i : comb) in_x[i] = 1;
    double sx = 0, sy = 0;
    for (std::size_t i = 0; i < 2 * n_side; ++i) (in_x[i] ? sx : sy) += s[i];
    if ((sx - sy) / static_cast<double>(n_side) > observed) ++ge;
    ++total;
    more = false;
    for (std::size_t i = n_side; i-- > 0;) {
      if (comb[i] < n_side + i) {
        ++comb[i];
        for (std::size_t j = i + 1; j < n_side; ++j) comb[j] = comb[j - 1] + 1;
        more = true;
        break;
      }
    }
  }
  if (total != 48620) return false;
  const double exact = static_cast<double>(ge) / static_cast<double>(total);
  const double se = std::sqrt(exact * (1.0 - exact) /
                              static_cast<double>(kSeatSamples));
  return std::abs(r.p_value - exact) <= 3.0 * se + 1e-12;
}

// ---- end-to-end toy runs for criteria 5, 6, 7 and 9 ----

ExperimentConfig toy_config() {
  auto cfg = ExperimentConfig::load(std::string(FINEDEB_DATA_DIR) +
                                    "/../configs/toy.cfg");
  cfg.word_lists_path = data_path("gender.tsv");
  cfg.templates_path = data_path("gender.templates.txt");
  cfg.corpus_path = data_path("corpus.txt");
  cfg.stereoset_path = data_path("stereoset.tsv");
  cfg.crows_path = data_path("crows.tsv");
  cfg.seat_paths = {data_path("seat_gender.txt")};
  cfg.validate_paths();
  return cfg;
}

void full_run(const ExperimentConfig& cfg, const std::string& dir) {
  run_gen_pairs(cfg, dir);
  run_build_vocab(cfg, dir);
  run_pretrain(cfg, dir);
  run_debias(cfg, dir);
  run_finetune_lm(cfg, dir);
  run_eval(cfg, dir, dir + "/pretrained.ckpt");
  run_eval(cfg, dir, dir + "/finetuned.ckpt");
}

void baseline_run(const ExperimentConfig& cfg, const std::string& dir) {
  run_gen_pairs(cfg, dir);
  run_build_vocab(cfg, dir);
  run_pretrain(cfg, dir);
  run_finetune_lm(cfg, dir);  // no debias stage in between
  run_eval(cfg, dir, dir + "/finetuned.ckpt");
}

}  // namespace

int main() {
  report(1, "icat-arithmetic: eight published (LMS,SS) rows within 0.01",
         check_icat_rows());
  report(2, "seat-aggregation: published per-demographic averages within 0.005",
         check_seat_rows());
  report(3, "pair-generation: 200 random shapes, exact counts and counterfactuals",
         check_pair_generation());
  {
    std::string detail;
    const bool ok = check_gradients(detail);
    report(4, "gradient-check: debias and mlm losses within 1e-4, control caught",
           ok, detail);
  }

  const auto base = fs::temp_directory_path() /
                    ("acceptance_" + std::to_string(::getpid()));
  fs::remove_all(base);
  const std::string run_a = (base / "a" / "run").string();
  const std::string run_b = (base / "b" / "run").string();
  const std::string run_base = (base / "baseline" / "run").string();

  int rc = 1;
  try {
    const auto cfg = toy_config();

    const auto t0 = std::chrono::steady_clock::now();
    full_run(cfg, run_a);
    const double run_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    full_run(cfg, run_b);
    baseline_run(cfg, run_base);

    {
      const auto deb = read_kv(run_a + "/debias.summary");
      const auto lm = read_kv(run_a + "/finetune_lm.summary");
      const bool ok = !deb.at("head_hash_pre").empty() &&
                      deb.at("head_hash_pre") == deb.at("head_hash_post") &&
                      !lm.at("encoder_hash_pre").empty() &&
                      lm.at("encoder_hash_pre") == lm.at("encoder_hash_post");
      report(5, "freeze-contracts: head fixed in debias, encoder fixed in lm phase",
             ok);
    }

    const auto rows = read_result_rows(run_a + "/results.csv");
    const auto base_rows = read_result_rows(run_base + "/results.csv");
    if (rows.size() != 2 || rows[0].phase != "pretrained" ||
        rows[1].phase != "finetuned" || base_rows.size() != 1 ||
        base_rows[0].phase != "finetuned-baseline")
      fail("unexpected results.csv layout");
    const double ss_pre = rows[0].ss, ss_fin = rows[1].ss;
    const double lms_pre = rows[0].lms, lms_fin = rows[1].lms;
    const double ss_base = base_rows[0].ss;

    {
      const double moved = std::abs(ss_pre - 50.0) - std::abs(ss_fin - 50.0);
      std::ostringstream os;
      os << "ss " << ss_pre << " -> " << ss_fin << ", lms " << lms_pre << " -> "
         << lms_fin << ", " << run_sec << " s";
      report(6, "toy-debiasing: ss toward 50 by >= 3, lms drop <= 15, <= 600 s",
             moved >= 3.0 && lms_pre - lms_fin <= 15.0 && run_sec <= 600.0,
             os.str());
    }
    {
      std::ostringstream os;
      os << "baseline ss " << ss_pre << " -> " << ss_base;
      report(7, "baseline-sanity: lm-only run changes ss less than debiasing",
             std::abs(ss_base - ss_pre) < std::abs(ss_fin - ss_pre), os.str());
    }

    report(8, "metric-oracles: brute-force and hand-scored fixtures, p within 3 se",
           check_metric_oracles() && check_permutation_p());

    {
      bool ok = true;
      for (const char* f : {"pretrained.ckpt", "debiased.ckpt", "finetuned.ckpt",
                            "results.csv"}) {
        const auto ba = read_bytes(run_a + "/" + f);
        ok = ok && !ba.empty() && ba == read_bytes(run_b + "/" + f);
      }
      const auto loaded = load_checkpoint(run_a + "/finetuned.ckpt");
      const auto resaved = (base / "resaved.ckpt").string();
      save_checkpoint(resaved, loaded);
      ok = ok && read_bytes(resaved) == read_bytes(run_a + "/finetuned.ckpt");
      report(9, "determinism: rerun bit-identical, save/load/save byte-identical",
             ok);
    }

    rc = g_failures == 0 ? 0 : 1;
    std::cout << (rc == 0 ? "all criteria passed"
                          : std::to_string(g_failures) + " criteria failed")
              << "\n";
  } catch (const std::exception& e) {
    std::cerr << "acceptance aborted: " << e.what() << "\n";
    rc = 1;
  }
  fs::remove_all(base);
  return rc;
}
