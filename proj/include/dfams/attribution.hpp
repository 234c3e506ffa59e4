#pragma once

#include "dfams/common.hpp"
#include "dfams/model.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dfams {

struct ProbeSample {
  std::string id;
  TokenSeq tokens;
  int kb_label = 0;
};

enum class CurvatureMethod {
  none,               // H treated as zero: first-order term only
  gauss_newton,       // J^T (diag(p) - p p^T) J from the logit Jacobian
  finite_difference,  // central differences of analytic gradients
};

enum class HessianScope {
  averaged,    // one curvature estimate over the whole probe set
  per_sample,  // curvature of each sample's own loss
};

struct ShapleyOptions {
  double omega_self = 1.0;
  double omega_pair = 1.0;
  /// Width of the contiguous neuron windows whose parameters interact in the
  /// cross term; 0 disables cross terms.
  int pair_scope = 20;
  CurvatureMethod method = CurvatureMethod::gauss_newton;
  HessianScope scope = HessianScope::averaged;
  double fd_step = 1e-5;
};

struct ShapleyMap {
  RowMat phi;  // [num_layers x ffn_dim]
  std::size_t sample_count = 0;
  ShapleyOptions options;
};

/// Per-parameter second-order contribution
///   phi_j = -g_j t_j - 1/2 w_self t_j^2 H_jj - 1/2 t_j w_pair sum_{k != j} H_jk t_k,
/// where `cross[j]` already holds sum_{k != j} H_jk t_k.
std::vector<double> parameter_shapley(std::span<const double> theta, std::span<const double> grad,
                                      std::span<const double> hdiag, std::span<const double> cross,
                                      double omega_self, double omega_pair);

/// Curvature restricted to the FFN up-projection parameters, indexed like
/// ffn_parameter_ids(): H_jj and the in-window sum over k != j of H_jk t_k.
struct CurvatureTerms {
  std::vector<double> diag;
  std::vector<double> cross;
};

/// Flat ids of every W1 entry and b1 entry, layer by layer.
std::vector<std::size_t> ffn_parameter_ids(const ModelState& model);

CurvatureTerms curvature_terms(const ModelState& model, const std::vector<LabeledSeq>& samples,
                               const ShapleyOptions& opts);

/// Neuron-level map of one sample: each neuron's score is the sum of |phi|
/// over its incoming W1 column and its bias.
RowMat shapley_sample_map(const ModelState& model, const LabeledSeq& sample, const CurvatureTerms& curvature,
                          const ShapleyOptions& opts);

ShapleyMap shapley_scores(const ModelState& model, const std::vector<ProbeSample>& probe,
                          const ShapleyOptions& opts = {});

std::vector<int> select_layers(const ShapleyMap& map, int t_layers, bool use_abs = true);

struct NeuronRange {
  int start = 0;
  int end = 0;  // exclusive
  double score = 0.0;
  int size() const { return end - start; }
};

struct LayerGroups {
  int layer = 0;
  std::vector<NeuronRange> groups;  // ordered by score, highest first
};

struct NeuronSelection {
  std::vector<LayerGroups> layers;  // ascending layer index
  int group_size = 20;
  int groups_per_layer = 10;

  std::vector<int> selected_layers() const;
  std::size_t dimension() const;
  std::uint64_t fingerprint() const;
  /// Throws a compatibility error when the selection does not fit the model.
  void check_compatible(const ModelConfig& cfg) const;
};

struct WindowScore {
  int start = 0;
  int end = 0;
  double score = 0.0;
};

/// Contiguous windows [m*G, (m+1)*G) of one layer. A short final window is
/// scored by its mean times G so it competes on equal footing.
std::vector<WindowScore> window_scores(const ShapleyMap& map, int layer, int group_size);

NeuronSelection select_groups(const ShapleyMap& map, const std::vector<int>& layers, int group_size,
                              int top_groups);

/// Baselines: random layers and windows; every window of the given layers.
NeuronSelection random_selection(const ModelConfig& cfg, int t_layers, int group_size, int top_groups,
                                 std::uint64_t seed);
NeuronSelection full_layer_selection(const ModelConfig& cfg, const std::vector<int>& layers, int group_size);

void save_shapley_map(const ShapleyMap& map, const std::filesystem::path& path);
ShapleyMap load_shapley_map(const std::filesystem::path& path);
/// Tab-separated (layer, window_start, score) rows for heatmaps.
std::string heatmap_table(const ShapleyMap& map, int group_size);

nlohmann::json to_json(const NeuronSelection& sel);
NeuronSelection selection_from_json(const nlohmann::json& j);
void save_selection(const NeuronSelection& sel, const std::filesystem::path& path);
NeuronSelection load_selection(const std::filesystem::path& path);

}  // namespace dfams
