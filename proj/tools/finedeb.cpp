// FineDeb pipeline driver: pairwise debiasing data generation, three-phase
// training, bias/LM evaluation, sweeps and reports.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "finedeb/common.hpp"
#include "finedeb/pipeline.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "run";
  std::vector<std::string> overrides;
  bool seed_set = false;
  std::uint64_t seed = 0;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "Config file (key = value lines)");
  cmd->add_option("--out", o.out_dir, "Run directory");
  cmd->add_option("--set", o.overrides, "Override config entries as key=value");
  cmd->add_option("--seed", o.seed, "Global seed")->each([&o](const std::string&) {
    o.seed_set = true;
  });
}

finedeb::ExperimentConfig build_config(const CommonOpts& o) {
  auto cfg = o.config_path.empty() ? finedeb::default_config()
                                   : finedeb::ExperimentConfig::load(o.config_path);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      finedeb::fail("--set expects key=value, got '" + kv + "'");
    cfg.apply_override(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed_set) cfg.seed = o.seed;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FineDeb two-phase language-model debiasing pipeline"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string ckpt_path;
  std::string results_path;

  auto* gen = app.add_subcommand("gen-pairs", "Generate the pairwise debiasing dataset");
  add_common(gen, opts);
  auto* bv = app.add_subcommand("build-vocab", "Build the word-level vocabulary");
  add_common(bv, opts);
  auto* pre = app.add_subcommand("pretrain", "Phase 0: masked-LM pretraining");
  add_common(pre, opts);
  auto* deb = app.add_subcommand("debias", "Phase 1: contextual debiasing");
  add_common(deb, opts);
  auto* ft = app.add_subcommand("finetune-lm", "Phase 2: LM-head finetuning");
  add_common(ft, opts);
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on all metrics");
  add_common(ev, opts);
  ev->add_option("--ckpt", ckpt_path, "Checkpoint to evaluate");
  auto* sw = app.add_subcommand("sweep", "Cross debias sizes x LM fractions");
  add_common(sw, opts);
  auto* rp = app.add_subcommand("report", "Render results.csv as an aligned table");
  add_common(rp, opts);
  rp->add_option("--results", results_path, "Path to results.csv");

  CLI11_PARSE(app, argc, argv);

  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    using namespace finedeb;
    if (stage == "report") {
      const std::string path =
          results_path.empty() ? opts.out_dir + "/results.csv" : results_path;
      std::cout << render_report(path);
      return 0;
    }
    auto cfg = build_config(opts);
    if (stage == "gen-pairs") {
      std::cout << run_gen_pairs(cfg, opts.out_dir) << "\n";
    } else if (stage == "build-vocab") {
      std::cout << run_build_vocab(cfg, opts.out_dir) << "\n";
    } else if (stage == "pretrain") {
      std::cout << run_pretrain(cfg, opts.out_dir) << "\n";
    } else if (stage == "debias") {
      std::cout << run_debias(cfg, opts.out_dir) << "\n";
    } else if (stage == "finetune-lm") {
      std::cout << run_finetune_lm(cfg, opts.out_dir) << "\n";
    } else if (stage == "eval") {
      if (ckpt_path.empty()) ckpt_path = opts.out_dir + "/finetuned.ckpt";
      const auto rep = run_eval(cfg, opts.out_dir, ckpt_path);
      std::cout << "demographic=" << rep.demographic << " LMS=" << rep.lms
                << " SS=" << rep.ss << " ICAT=" << rep.icat
                << " CrowS=" << rep.crows_score
                << " SEAT_avg_abs=" << rep.seat_avg_abs << "\n";
    } else if (stage == "sweep") {
      run_sweep(cfg, opts.out_dir);
    }
  } catch (const std::exception& e) {
    std::cerr << "ERROR:" << stage << ":" << e.what() << "\n";
    return 1;
  }
  return 0;
}
