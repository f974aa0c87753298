#pragma once

#include <string>
#include <vector>

#include "finedeb/config.hpp"
#include "finedeb/metrics.hpp"

namespace finedeb {

struct ResultRow {
  std::string run_id;
  std::string phase;
  std::string demographic;
  double lms = 0.0, ss = 0.0, icat = 0.0;
  double crows = 0.0;
  double seat_avg_abs = 0.0;
  std::string config_digest;
};

// Each stage writes its artifact plus a `.digest` sibling carrying the
// effective config digest. Rerunning a completed stage with the same digest
// is a no-op; a different digest is an error.

std::string run_gen_pairs(const ExperimentConfig& cfg, const std::string& out_dir);
std::string run_build_vocab(const ExperimentConfig& cfg, const std::string& out_dir);
std::string run_pretrain(const ExperimentConfig& cfg, const std::string& out_dir);
std::string run_debias(const ExperimentConfig& cfg, const std::string& out_dir);
// Consumes debiased.ckpt when present, otherwise falls back to
// pretrained.ckpt (the LM-finetuning-only baseline).
std::string run_finetune_lm(const ExperimentConfig& cfg, const std::string& out_dir);

MetricReport run_eval(const ExperimentConfig& cfg, const std::string& out_dir,
                      const std::string& ckpt_path);

void run_sweep(const ExperimentConfig& cfg, const std::string& out_dir);

std::string render_report(const std::string& results_csv);

void append_result_row(const std::string& csv_path, const ResultRow& row);
std::vector<ResultRow> read_result_rows(const std::string& csv_path);

}  // namespace finedeb
