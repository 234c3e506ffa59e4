#pragma once

#include "dfams/alignment.hpp"
#include "dfams/attribution.hpp"
#include "dfams/dif.hpp"
#include "dfams/fedsim.hpp"
#include "dfams/model.hpp"
#include "dfams/routing.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dfams {

struct AttributionConfig {
  int t_layers = 2;
  int group_size = 8;
  int top_groups = 4;
  double omega_self = 1.0;
  double omega_pair = 1.0;
  int pair_scope = 8;
  CurvatureMethod curvature = CurvatureMethod::gauss_newton;
  HessianScope hessian_scope = HessianScope::averaged;
  bool layer_mass_abs = true;
  TokenPooling pooling = TokenPooling::mean;
  int probe_size = 1000;
  int shapley_samples = 128;  // probe samples used for the attribution pass
  int probe_epochs = 12;
  double probe_lr = 3e-3;
  int probe_batch_size = 32;

  void validate(const ModelConfig& model) const;
};

struct EvalConfig {
  double validation_fraction = 0.15;  // carved from the training queries
  bool calibrate_tau = true;
  int k = 10;
  int embedding_dim = 32;  // retrieval embedding table
  double threshold_lr = 0.5;
  int threshold_iterations = 300;
  bool sweeps = true;
  std::vector<int> sweep_prototypes{1, 2, 3, 4, 6};
  std::vector<int> sweep_top_n{1, 2, 3, 5};

  void validate() const;
};

/// Every tunable of the pipeline. One global seed fans out to per-stage seeds;
/// the seed fields of the nested configs are overwritten from it.
struct PipelineConfig {
  std::uint64_t seed = 1;
  ScenarioSpec scenario;
  ModelConfig model;
  AttributionConfig attribution;
  AlignerConfig aligner;
  RoutingConfig routing;
  EvalConfig eval;

  PipelineConfig();
  void validate() const;
  /// Copies derived stage seeds and scenario-dependent sizes into the nested configs.
  PipelineConfig resolved() const;
};

/// INI text with sections [pipeline], [scenario], [model], [attribution],
/// [aligner], [routing], [eval]. Unknown keys are configuration errors.
PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config(const std::filesystem::path& path);
std::string format_config(const PipelineConfig& cfg);

/// Re-raises a stage failure with the stage name prefixed to the message.
template <typename F>
auto run_stage(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(e.kind(), std::string("[") + stage + "] " + e.what());
  }
}

// ---- stage building blocks -------------------------------------------------

std::vector<ProbeSample> probe_samples(const std::vector<Query>& queries);

struct ProbeResult {
  ModelState model;
  ProbeTrainReport train_report;  // empty when a checkpoint was supplied
  std::vector<ProbeSample> probe;
  ShapleyMap map;
  NeuronSelection selection;
};

ProbeResult run_probe(const PipelineConfig& cfg, const Scenario& sc, const ModelState* checkpoint = nullptr);

NeuronSelection random_baseline_selection(const PipelineConfig& cfg);
NeuronSelection full_baseline_selection(const PipelineConfig& cfg, const NeuronSelection& shapley);

struct TrainValSplit {
  std::vector<Query> train;
  std::vector<Query> validation;
};
TrainValSplit split_validation(const std::vector<Query>& train, double fraction, std::uint64_t seed);

struct DIFMatrix {
  RowMat z;
  std::vector<int> labels;
};
DIFMatrix dif_matrix(const ModelState& model, const NeuronSelection& sel, const std::vector<Query>& queries,
                     TokenPooling pooling);

/// Embedding space used for routing: either a trained aligner or the frozen
/// DIF (standardized with training statistics, then unit-normalized).
struct RoutingSpace {
  std::optional<AlignerState> aligner;
  Vec mean, inv_sd;
  PrototypeBook book;

  RowMat embed(const RowMat& z) const;
};

RoutingSpace frozen_space(const DIFMatrix& train, const AlignerConfig& cfg);
RoutingSpace aligned_space(const AlignerTrainResult& trained);

/// Threshold maximizing validation abstention accuracy; ties resolve to the
/// median candidate. Returns the midpoint between neighbouring max-scores.
double calibrate_tau(const std::vector<double>& max_scores, const std::vector<bool>& is_others);

struct Retriever {
  EmbeddingTable table;
  std::map<int, DenseIndex> indices;
  DenseIndex merged;
  std::map<int, int> doc_kb;
};
Retriever build_retriever(const Scenario& sc, const PipelineConfig& cfg);

struct RunOutcome {
  EvalReport report;
  double tau = 0.0;
  std::vector<nlohmann::json> decisions;
};

/// Routes every query through `space`, retrieves and scores the outcome.
RunOutcome run_routing(const RoutingSpace& space, const RoutingConfig& routing, const RowMat& test_z,
                       const std::vector<Query>& test, const Retriever& retriever, int k);

/// Calibrates tau on the validation embeddings (when enabled), then routes the test split.
RunOutcome evaluate_space(const RoutingSpace& space, RoutingConfig routing, const EvalConfig& eval,
                          const RowMat& val_z, const std::vector<Query>& val, const RowMat& test_z,
                          const std::vector<Query>& test, const Retriever& retriever);

/// Single index over every document, always retrieving; predicted KBs are the
/// sources of the top-k documents.
RunOutcome evaluate_merged(const std::vector<Query>& test, const Retriever& retriever, int k);

/// One-vs-rest logistic regression per KB on aligned embeddings; KBs with
/// probability above 1/2 share the slots evenly, none means abstain.
RunOutcome evaluate_threshold_classifier(const RoutingSpace& space, const RowMat& train_z,
                                         const std::vector<int>& train_labels, const RowMat& test_z,
                                         const std::vector<Query>& test, const Retriever& retriever,
                                         const PipelineConfig& cfg);

// ---- end to end -------------------------------------------------------------

struct VariantRow {
  std::string variant;
  EvalReport report;
  double tau = 0.0;
};

struct SweepPoint {
  std::string parameter;  // "prototypes_per_class" or "top_n"
  int value = 0;
  EvalReport report;
};

struct E2EResult {
  std::uint64_t seed = 0;
  std::vector<VariantRow> variants;  // the seven ablation rows first
  std::vector<VariantRow> baselines;
  std::vector<SweepPoint> sweeps;
  std::vector<nlohmann::json> decisions;  // full DFAMS, test split
  NeuronSelection selection;
  double seconds = 0.0;

  const VariantRow& row(const std::string& name) const;
  double sweep_value(const std::string& parameter, int value) const;
};

E2EResult run_e2e(const PipelineConfig& cfg);

/// Machine-readable metric records (one JSON object per line), free of timing.
std::string metric_records(const E2EResult& r);
/// Plain-text comparison table for one or more seeds (medians).
std::string ablation_table(const std::vector<E2EResult>& runs);
/// Tab-separated sweep table with per-seed values and the median.
std::string sweep_table(const std::vector<E2EResult>& runs);

double median(std::vector<double> v);

// ---- file-based commands ----------------------------------------------------

struct CommandOutput {
  std::string summary;  // human-readable, printed by the CLI
  std::vector<std::filesystem::path> written;
};

CommandOutput cmd_generate(const PipelineConfig& cfg, const std::filesystem::path& out);
CommandOutput cmd_probe(const PipelineConfig& cfg, const std::filesystem::path& scenario,
                        const std::optional<std::filesystem::path>& model_ckpt, const std::filesystem::path& out_dir);
CommandOutput cmd_train(const PipelineConfig& cfg, const std::filesystem::path& scenario,
                        const std::filesystem::path& selection, const std::filesystem::path& model_ckpt,
                        const std::filesystem::path& out_dir);
CommandOutput cmd_eval(const PipelineConfig& cfg, const std::filesystem::path& scenario,
                       const std::filesystem::path& aligner_ckpt, const std::filesystem::path& model_ckpt,
                       const std::filesystem::path& selection, const std::filesystem::path& out_dir);
CommandOutput cmd_e2e(const PipelineConfig& cfg, int seeds, const std::filesystem::path& out_dir);

}  // namespace dfams
