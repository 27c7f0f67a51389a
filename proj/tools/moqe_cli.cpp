// SPDX-License-Identifier: Apache-2.0
// moqe: dataset generation and the staged training / evaluation pipeline.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "moqe/config.hpp"
#include "moqe/errors.hpp"
#include "moqe/pipeline.hpp"

namespace {

using namespace moqe;

RunConfig resolve_config(const std::string& config_path, const std::string& kind) {
  if (!config_path.empty()) return RunConfig::load(config_path);
  return parse_modality(kind) == Modality::nlp ? default_nlp_config() : default_cv_config();
}

int gen_data(const std::string& config_path, const std::string& kind, std::optional<Index> subsets,
             std::optional<std::uint64_t> seed, const std::filesystem::path& out) {
  RunConfig cfg = resolve_config(config_path, kind);
  if (config_path.empty()) cfg.data.kind = parse_modality(kind);
  if (subsets) cfg.data.subsets = *subsets;
  if (seed) cfg.seed = *seed;
  if (cfg.data.subsets < 2) throw ConfigError("--subsets must be >= 2");
  const Dataset all = generate_run_data(cfg);
  std::filesystem::create_directories(out);
  const Manifest m = save_dataset(all, to_string(cfg.data.kind), out);
  std::ofstream(out / "resolved_config.json") << cfg.to_json().dump(2) << "\n";
  std::cout << "wrote " << m.subsets.size() << " subsets, " << all.size() << " samples to " << out.string() << "\n"
            << "digest " << m.digest << "\n";
  return 0;
}

int pipeline(const std::string& stage, const std::string& config_path, const std::string& kind,
             std::string run_dir, const std::string& runs_root, bool force) {
  const RunConfig cfg = resolve_config(config_path, kind);
  if (run_dir.empty()) run_dir = default_run_dir(runs_root, cfg.seed).string();
  Pipeline p(cfg, run_dir, force);
  std::cout << "run directory " << p.dir().string() << "\n";
  if (stage == "all") {
    p.run_all();
  } else {
    const Stage s = parse_stage(stage);
    p.run(s);
    if (s == Stage::eval) {
      std::ifstream table(p.dir() / "eval_table.txt");
      std::cout << table.rdbuf();
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture of quantized experts: data, training, evaluation and serving benchmarks"};
  app.require_subcommand(1);

  std::string kind = "cv", config_path, out, stage, run_dir, runs_root = "runs";
  std::optional<Index> subsets;
  std::optional<std::uint64_t> seed;
  bool force = false;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset split into subsets");
  gen->add_option("--kind", kind, "cv or nlp")->check(CLI::IsMember({"cv", "nlp"}));
  gen->add_option("--subsets", subsets, "Number of subsets");
  gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--config", config_path, "Run config JSON (data section is used)");
  gen->add_option("--out", out, "Output directory")->required();

  CLI::App* pipe = app.add_subcommand("pipeline", "Run one pipeline stage, or all");
  pipe->add_option("stage", stage, "data | train-base | quantize | label | train-router | eval | bench | all")->required();
  pipe->add_option("--config", config_path, "Run config JSON; shipped defaults when omitted");
  pipe->add_option("--kind", kind, "Default config when --config is omitted")->check(CLI::IsMember({"cv", "nlp"}));
  pipe->add_option("--run-dir", run_dir, "Run directory; a new timestamped one when omitted");
  pipe->add_option("--runs-root", runs_root, "Parent of new run directories");
  pipe->add_flag("--force", force, "Allow overwriting completed stages");

  CLI::App* show = app.add_subcommand("config", "Print a fully-resolved config");
  show->add_option("--kind", kind, "cv or nlp")->check(CLI::IsMember({"cv", "nlp"}));
  show->add_option("--config", config_path, "Config to resolve");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return gen_data(config_path, kind, subsets, seed, out);
    if (*pipe) return pipeline(stage, config_path, kind, run_dir, runs_root, force);
    if (*show) {
      std::cout << resolve_config(config_path, kind).to_json().dump(2) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 1;
}
