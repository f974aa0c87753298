#include "finedeb/pipeline.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "finedeb/common.hpp"
#include "finedeb/dataprep.hpp"
#include "finedeb/training.hpp"

namespace fs = std::filesystem;

namespace finedeb {

namespace {

std::string digest_str(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << cfg.digest();
  return os.str();
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write " + path);
  out << content;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Returns true when the artifact already exists under the same config digest
// (stage is a no-op). A digest mismatch is an error: the artifact belongs to
// a different configuration.
bool stage_done(const ExperimentConfig& cfg, const std::string& artifact) {
  if (!fs::exists(artifact)) return false;
  const std::string dpath = artifact + ".digest";
  if (!fs::exists(dpath))
    fail("resume: artifact " + artifact + " has no digest file");
  const std::string have = read_text(dpath);
  if (have != digest_str(cfg))
    fail("resume: config digest mismatch for " + artifact +
         " (artifact " + have + ", config " + digest_str(cfg) + ")");
  return true;
}

void mark_done(const ExperimentConfig& cfg, const std::string& artifact) {
  write_text(artifact + ".digest", digest_str(cfg));
}

void ensure_dir(const std::string& dir) { fs::create_directories(dir); }

void write_effective_config(const ExperimentConfig& cfg, const std::string& out_dir) {
  write_text(out_dir + "/effective.cfg", cfg.serialize());
}

Demographic demographic_of(const ExperimentConfig& cfg) {
  return {cfg.demographic_name, cfg.demographic_classes};
}

Corpus lm_corpus_slice(const ExperimentConfig& cfg, const Corpus& full) {
  if (cfg.lm_corpus_fraction >= 1.0) return full;
  if (cfg.lm_corpus_fraction <= 0.0) fail("lm.corpus_fraction must be in (0,1]");
  Rng rng(derive_seed(cfg.seed, "lm-corpus-slice"));
  auto order = rng.permutation(full.sentences.size());
  const std::size_t n = static_cast<std::size_t>(std::ceil(
      cfg.lm_corpus_fraction * static_cast<double>(full.sentences.size())));
  Corpus out;
  out.source_path = full.source_path;
  for (std::size_t i = 0; i < n; ++i) out.sentences.push_back(full.sentences[order[i]]);
  return out;
}

ModelConfig model_config_for(const ExperimentConfig& cfg, const Vocabulary& vocab) {
  ModelConfig m = cfg.model;
  m.vocab_size = vocab.size();
  m.seed = derive_seed(cfg.seed, "model-init");
  m.validate();
  return m;
}

TrainConfig stage_train_config(TrainConfig t, const ExperimentConfig& cfg,
                               const char* stage) {
  t.seed = derive_seed(cfg.seed, stage);
  return t;
}

std::string require_artifact(const std::string& path, const std::string& phase) {
  if (!fs::exists(path))
    fail("missing upstream checkpoint " + path + "; run the '" + phase +
         "' stage first");
  return path;
}

double round4(double v) { return std::round(v * 10000.0) / 10000.0; }

std::string fmt4(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

}  // namespace

std::string run_gen_pairs(const ExperimentConfig& cfg, const std::string& out_dir) {
  ensure_dir(out_dir);
  write_effective_config(cfg, out_dir);
  const std::string artifact = out_dir + "/pairs.tsv";
  if (stage_done(cfg, artifact)) return artifact;
  const auto demo = demographic_of(cfg);
  const auto tuples = load_word_lists(cfg.word_lists_path, demo);
  const auto templates = load_templates(cfg.templates_path, demo);
  std::optional<std::size_t> sample;
  if (cfg.debias_sample_size > 0) sample = cfg.debias_sample_size;
  const auto pairs =
      generate_pairs(templates, tuples, derive_seed(cfg.seed, "gen-pairs"), sample);
  write_pairs_tsv(artifact, pairs);
  mark_done(cfg, artifact);
  return artifact;
}

std::string run_build_vocab(const ExperimentConfig& cfg, const std::string& out_dir) {
  ensure_dir(out_dir);
  write_effective_config(cfg, out_dir);
  const std::string artifact = out_dir + "/vocab.txt";
  if (stage_done(cfg, artifact)) return artifact;
  const auto corpus = load_corpus(cfg.corpus_path, cfg.model.max_len);
  const auto tuples = load_word_lists(cfg.word_lists_path, demographic_of(cfg));
  const auto vocab = Vocabulary::build({corpus}, {tuples}, cfg.vocab_min_count);
  vocab.save(artifact);
  mark_done(cfg, artifact);
  return artifact;
}

std::string run_pretrain(const ExperimentConfig& cfg, const std::string& out_dir) {
  ensure_dir(out_dir);
  write_effective_config(cfg, out_dir);
  const std::string artifact = out_dir + "/pretrained.ckpt";
  if (stage_done(cfg, artifact)) return artifact;
  const auto vocab =
      Vocabulary::load(require_artifact(out_dir + "/vocab.txt", "build-vocab"));
  const auto corpus = load_corpus(cfg.corpus_path, cfg.model.max_len);
  TrainReport report;
  const auto ckpt =
      pretrain_mlm(model_config_for(cfg, vocab),
                   stage_train_config(cfg.pretrain, cfg, "pretrain"), corpus,
                   vocab, &report);
  save_checkpoint(artifact, ckpt);
  report.write(out_dir + "/pretrain");
  mark_done(cfg, artifact);
  return artifact;
}

std::string run_debias(const ExperimentConfig& cfg, const std::string& out_dir) {
  ensure_dir(out_dir);
  write_effective_config(cfg, out_dir);
  const std::string artifact = out_dir + "/debiased.ckpt";
  if (stage_done(cfg, artifact)) return artifact;
  const auto vocab =
      Vocabulary::load(require_artifact(out_dir + "/vocab.txt", "build-vocab"));
  const auto pretrained =
      load_checkpoint(require_artifact(out_dir + "/pretrained.ckpt", "pretrain"));
  const auto pairs =
      read_pairs_tsv(require_artifact(out_dir + "/pairs.tsv", "gen-pairs"));
  TrainReport report;
  const auto ckpt =
      train_debias(pretrained, pairs, vocab,
                   stage_train_config(cfg.debias, cfg, "debias"), &report);
  save_checkpoint(artifact, ckpt);
  report.write(out_dir + "/debias");
  mark_done(cfg, artifact);
  return artifact;
}

std::string run_finetune_lm(const ExperimentConfig& cfg, const std::string& out_dir) {
  ensure_dir(out_dir);
  write_effective_config(cfg, out_dir);
  const std::string artifact = out_dir + "/finetuned.ckpt";
  if (stage_done(cfg, artifact)) return artifact;
  const auto vocab =
      Vocabulary::load(require_artifact(out_dir + "/vocab.txt", "build-vocab"));
  std::string upstream = out_dir + "/debiased.ckpt";
  if (!fs::exists(upstream)) {
    // LM-finetuning-only baseline: head finetuning straight off pretraining.
    upstream = require_artifact(out_dir + "/pretrained.ckpt", "pretrain");
  }
  const auto base = load_checkpoint(upstream);
  const auto full_corpus = load_corpus(cfg.corpus_path, cfg.model.max_len);
  const auto corpus = lm_corpus_slice(cfg, full_corpus);
  TrainReport report;
  const auto ckpt = train_lm_head(
      base, corpus, vocab, stage_train_config(cfg.lm, cfg, "finetune-lm"), &report);
  save_checkpoint(artifact, ckpt);
  report.write(out_dir + "/finetune_lm");
  mark_done(cfg, artifact);
  return artifact;
}

MetricReport run_eval(const ExperimentConfig& cfg, const std::string& out_dir,
                      const std::string& ckpt_path) {
  ensure_dir(out_dir);
  const auto vocab =
      Vocabulary::load(require_artifact(out_dir + "/vocab.txt", "build-vocab"));
  if (!fs::exists(ckpt_path))
    fail("missing checkpoint " + ckpt_path + " for eval");
  const auto ckpt = load_checkpoint(ckpt_path);

  MetricReport rep;
  rep.demographic = cfg.demographic_name;

  auto stereo_all = load_stereoset_tsv(cfg.stereoset_path);
  std::vector<StereoSetExample> stereo;
  for (auto& e : stereo_all)
    if (e.demographic == cfg.demographic_name) stereo.push_back(e);
  if (stereo.empty())
    fail("eval: no StereoSet examples for demographic " + cfg.demographic_name);
  const auto s = stereoset_eval(ckpt, vocab, stereo);
  rep.lms = s.lms;
  rep.ss = s.ss;
  rep.icat = s.icat;

  auto crows_all = load_crows_tsv(cfg.crows_path);
  std::vector<CrowSPair> crows;
  for (auto& p : crows_all)
    if (p.demographic == cfg.demographic_name) crows.push_back(p);
  if (crows.empty())
    fail("eval: no CrowS pairs for demographic " + cfg.demographic_name);
  rep.crows_score = crows_eval(ckpt, vocab, crows, &rep.crows_skipped);

  std::vector<double> effects;
  for (const auto& path : cfg.seat_paths) {
    const auto test = load_seat_file(path);
    auto r = seat_effect_size(ckpt, vocab, test, derive_seed(cfg.seed, "seat"));
    effects.push_back(r.effect_size);
    rep.seat.push_back(std::move(r));
  }
  if (!effects.empty()) rep.seat_avg_abs = aggregate_seat(effects);

  ResultRow row;
  row.run_id = fs::path(out_dir).filename().string();
  row.phase = phase_name(ckpt.phase);
  if (fs::path(ckpt_path).filename() == "finetuned.ckpt" &&
      !fs::exists(out_dir + "/debiased.ckpt"))
    row.phase = "finetuned-baseline";
  row.demographic = rep.demographic;
  row.lms = round4(rep.lms);
  row.ss = round4(rep.ss);
  row.icat = round4(rep.icat);
  row.crows = round4(rep.crows_score);
  row.seat_avg_abs = round4(rep.seat_avg_abs);
  row.config_digest = digest_str(cfg);
  append_result_row(out_dir + "/results.csv", row);
  return rep;
}

void run_sweep(const ExperimentConfig& cfg, const std::string& out_dir) {
  if (cfg.sweep_debias_sizes.empty() || cfg.sweep_lm_fractions.empty())
    fail("sweep: sweep.debias_sizes and sweep.lm_fractions must be non-empty");
  ensure_dir(out_dir);
  for (auto ds : cfg.sweep_debias_sizes) {
    for (auto f : cfg.sweep_lm_fractions) {
      ExperimentConfig cell = cfg;
      cell.debias_sample_size = ds;
      cell.lm_corpus_fraction = f;
      cell.sweep_debias_sizes.clear();
      cell.sweep_lm_fractions.clear();
      std::ostringstream dir;
      dir << out_dir << "/cell_ds" << ds << "_f" << f;
      const std::string cell_dir = dir.str();
      run_gen_pairs(cell, cell_dir);
      run_build_vocab(cell, cell_dir);
      run_pretrain(cell, cell_dir);
      run_debias(cell, cell_dir);
      run_finetune_lm(cell, cell_dir);
      run_eval(cell, cell_dir, cell_dir + "/finetuned.ckpt");
    }
  }
}

namespace {
constexpr const char* kCsvHeader =
    "run_id,phase,demographic,lms,ss,icat,crows,seat_avg_abs,config_digest";
}

void append_result_row(const std::string& csv_path, const ResultRow& row) {
  const bool fresh = !fs::exists(csv_path);
  std::ofstream out(csv_path, std::ios::binary | std::ios::app);
  if (!out) fail("cannot open " + csv_path);
  if (fresh) out << kCsvHeader << "\n";
  out << row.run_id << ',' << row.phase << ',' << row.demographic << ','
      << fmt4(row.lms) << ',' << fmt4(row.ss) << ',' << fmt4(row.icat) << ','
      << fmt4(row.crows) << ',' << fmt4(row.seat_avg_abs) << ','
      << row.config_digest << "\n";
}

std::vector<ResultRow> read_result_rows(const std::string& csv_path) {
  std::ifstream in(csv_path, std::ios::binary);
  if (!in) fail("cannot open " + csv_path);
  std::string line;
  std::vector<ResultRow> rows;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line != kCsvHeader) fail("results csv: unexpected header");
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != 9) fail("results csv: bad row: " + line);
    ResultRow r;
    r.run_id = f[0];
    r.phase = f[1];
    r.demographic = f[2];
    r.lms = std::stod(f[3]);
    r.ss = std::stod(f[4]);
    r.icat = std::stod(f[5]);
    r.crows = std::stod(f[6]);
    r.seat_avg_abs = std::stod(f[7]);
    r.config_digest = f[8];
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string render_report(const std::string& results_csv) {
  const auto rows = read_result_rows(results_csv);
  std::ostringstream os;
  os << std::left << std::setw(24) << "run" << std::setw(20) << "phase"
     << std::setw(10) << "demo" << std::right << std::setw(8) << "LMS"
     << std::setw(8) << "SS" << std::setw(8) << "ICAT" << std::setw(8) << "CrowS"
     << std::setw(10) << "SEAT" << "\n";
  os << std::string(96, '-') << "\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(24) << r.run_id << std::setw(20) << r.phase
       << std::setw(10) << r.demographic << std::right << std::fixed
       << std::setprecision(2) << std::setw(8) << r.lms << std::setw(8) << r.ss
       << std::setw(8) << r.icat << std::setw(8) << r.crows << std::setw(10)
       << std::setprecision(3) << r.seat_avg_abs << "\n";
  }
  return os.str();
}

}  // namespace finedeb
