// pmjdot: generate corpora, train, evaluate checkpoints and run ablations.
#include "pmjdot/experiment.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace pmjdot;

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::string out = "out";
};

ExperimentConfig resolve_config(const CommonFlags& flags) {
  ExperimentConfig cfg = flags.config_path.empty() ? ExperimentConfig{} : load_experiment_config(flags.config_path);
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.mode) cfg.mode = ablation_mode_from_string(*flags.mode);
  cfg.validate();
  return cfg;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "Experiment configuration (JSON)");
  cmd->add_option("--seed", flags.seed, "Override the experiment seed");
  cmd->add_option("--mode", flags.mode, "Override the ablation mode (v1..v5)");
  cmd->add_option("--out", flags.out, "Output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PM-JDOT cross-domain alignment laboratory"};
  app.require_subcommand(1);

  CommonFlags gen_flags;
  auto* gen = app.add_subcommand("generate", "Write a synthetic corpus from the config's data spec");
  add_common(gen, gen_flags);

  CommonFlags train_flags;
  std::string resume;
  int stop_after = -1;
  bool verbose = false;
  auto* train = app.add_subcommand("train", "Train and evaluate one experiment");
  add_common(train, train_flags);
  train->add_option("--resume", resume, "Continue from a checkpoint written by train");
  train->add_option("--stop-after", stop_after, "Stop (with a checkpoint) after this many completed epochs");
  train->add_flag("-v,--verbose", verbose, "Per-epoch progress on stderr");

  CommonFlags eval_flags;
  std::string checkpoint_path, corpus_path;
  int k = 0;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Retrieval report from a checkpoint and a corpus");
  add_common(evaluate_cmd, eval_flags);
  evaluate_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  evaluate_cmd->add_option("--corpus", corpus_path, "Corpus CSV (defaults to the checkpoint config's corpus)");
  evaluate_cmd->add_option("--k", k, "Cutoff for Prec@k and mAP@k (defaults to the checkpoint config)");

  CommonFlags ablate_flags;
  std::string modes_arg = "v1,v2,v3,v4,v5", seeds_arg = "0,1,2";
  bool ablate_verbose = false;
  auto* ablate_cmd = app.add_subcommand("ablate", "Sweep ablation modes and seeds, emit a combined CSV");
  add_common(ablate_cmd, ablate_flags);
  ablate_cmd->add_option("--modes", modes_arg, "Comma-separated modes");
  ablate_cmd->add_option("--seeds", seeds_arg, "Comma-separated seeds");
  ablate_cmd->add_flag("-v,--verbose", ablate_verbose, "Per-epoch progress on stderr");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      ExperimentConfig cfg = resolve_config(gen_flags);
      if (gen_flags.seed) cfg.data.seed = *gen_flags.seed;
      fs::create_directories(gen_flags.out);
      const fs::path path = fs::path(gen_flags.out) / "corpus.csv";
      save_corpus(generate(cfg.data), path.string());
      std::cout << path.string() << "\n";
    } else if (*train) {
      const ExperimentConfig cfg = resolve_config(train_flags);
      RunOptions opts;
      opts.out_dir = train_flags.out;
      opts.resume_from = resume;
      opts.stop_after_epoch = stop_after;
      opts.verbose = verbose;
      RunResult r = run_experiment(cfg, corpus_for(cfg), opts);
      std::cout << kMetricsCsvHeader << "\n" << metrics_csv_rows(cfg, {r.history.back()});
    } else if (*evaluate_cmd) {
      Checkpoint cp = load_checkpoint(checkpoint_path);
      ExperimentConfig cfg = experiment_config_from_json(cp.config);
      const LabeledCorpus corpus = corpus_path.empty() ? corpus_for(cfg) : load_corpus(corpus_path);
      const RetrievalReport report = evaluate_state(cp.state, corpus, k > 0 ? k : cfg.eval_k);
      fs::create_directories(eval_flags.out);
      std::ofstream((fs::path(eval_flags.out) / "report.json").string()) << to_json(report).dump() << "\n";
      std::cout << "prec_at_k,map_at_k,map\n" << csv_summary(report) << "\n";
    } else if (*ablate_cmd) {
      const ExperimentConfig cfg = resolve_config(ablate_flags);
      std::vector<AblationMode> modes;
      for (const auto& m : split_list(modes_arg)) modes.push_back(ablation_mode_from_string(m));
      std::vector<std::uint64_t> seeds;
      for (const auto& s : split_list(seeds_arg)) seeds.push_back(std::stoull(s));
      auto runs = ablate(cfg, modes, seeds, ablate_flags.out, ablate_verbose);
      std::cout << "mode,seed,prec_at_k,map_at_k,map\n";
      for (const auto& r : runs)
        std::cout << to_string(r.mode) << "," << r.seed << "," << csv_summary(r.result.final_report) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "pmjdot: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
