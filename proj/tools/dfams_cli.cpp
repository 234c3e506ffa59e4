// Pipeline driver: generate -> probe -> train -> eval, plus e2e ablations.
#include "dfams/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, const std::string& out_default) {
  cmd->add_option("--config", c.config, "INI configuration file");
  cmd->add_option("--seed", c.seed, "global seed (overrides [pipeline] seed)");
  cmd->add_option("--out", c.out, "output path")->default_val(out_default);
}

dfams::PipelineConfig load(const Common& c) {
  dfams::PipelineConfig cfg = c.config.empty() ? dfams::PipelineConfig{} : dfams::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

void report(const dfams::CommandOutput& out) {
  std::cout << out.summary;
  if (!out.summary.empty() && out.summary.back() != '\n') std::cout << '\n';
  for (const auto& p : out.written) std::cerr << "wrote " << p.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DFAMS federated routing pipeline"};
  app.require_subcommand(1);

  Common gen_c, probe_c, train_c, eval_c, e2e_c, cfg_c;
  auto* gen = app.add_subcommand("generate", "write a synthetic federated scenario");
  add_common(gen, gen_c, "scenario.jsonl");

  struct Inputs {
    std::string scenario, model, selection, aligner;
  } probe_in, train_in, eval_in;
  auto* probe = app.add_subcommand("probe", "train the probe model and select neuron groups");
  add_common(probe, probe_c, "probe");
  probe->add_option("--scenario", probe_in.scenario, "scenario file")->default_val("scenario.jsonl");
  probe->add_option("--model", probe_in.model, "existing model checkpoint (skips probe training)");

  auto* train = app.add_subcommand("train", "extract DIF and train the aligner");
  add_common(train, train_c, "train");
  train->add_option("--scenario", train_in.scenario, "scenario file")->default_val("scenario.jsonl");
  train->add_option("--model", train_in.model, "model checkpoint")->default_val("probe/model.bin");
  train->add_option("--selection", train_in.selection, "neuron selection")->default_val("probe/selection.json");

  auto* eval = app.add_subcommand("eval", "route the test split and report metrics");
  add_common(eval, eval_c, "eval");
  eval->add_option("--scenario", eval_in.scenario, "scenario file")->default_val("scenario.jsonl");
  eval->add_option("--model", eval_in.model, "model checkpoint")->default_val("probe/model.bin");
  eval->add_option("--selection", eval_in.selection, "neuron selection")->default_val("probe/selection.json");
  eval->add_option("--aligner", eval_in.aligner, "aligner checkpoint")->default_val("train/aligner.bin");

  int seeds = 1;
  auto* e2e = app.add_subcommand("e2e", "full pipeline with ablation variants and sweeps");
  add_common(e2e, e2e_c, "e2e");
  e2e->add_option("--seeds", seeds, "number of consecutive seeds (medians reported)")->default_val(1);

  auto* show = app.add_subcommand("config", "print the effective configuration");
  add_common(show, cfg_c, "");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      report(dfams::cmd_generate(load(gen_c), gen_c.out));
    } else if (*probe) {
      std::optional<fs::path> ckpt;
      if (!probe_in.model.empty()) ckpt = probe_in.model;
      report(dfams::cmd_probe(load(probe_c), probe_in.scenario, ckpt, probe_c.out));
    } else if (*train) {
      report(dfams::cmd_train(load(train_c), train_in.scenario, train_in.selection, train_in.model, train_c.out));
    } else if (*eval) {
      report(dfams::cmd_eval(load(eval_c), eval_in.scenario, eval_in.aligner, eval_in.model, eval_in.selection,
                              eval_c.out));
    } else if (*e2e) {
      report(dfams::cmd_e2e(load(e2e_c), seeds, e2e_c.out));
    } else if (*show) {
      const auto cfg = load(cfg_c);
      cfg.validate();
      std::cout << dfams::format_config(cfg);
    }
  } catch (const dfams::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return dfams::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
