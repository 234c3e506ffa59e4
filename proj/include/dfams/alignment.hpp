#pragma once

#include "dfams/common.hpp"
#include "dfams/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace dfams {

/// Which prototypes may serve as the positive set C(i).
enum class PositiveScope {
  own_class,  // nearest prototypes owned by the sample's class
  any,        // nearest prototypes in the whole book
};

struct AlignerConfig {
  int input_dim = 0;
  int hidden_dim = 512;
  int output_dim = 64;
  double dropout_rate = 0.1;
  double lr = 2e-4;
  double weight_decay = 0.01;
  int batch_size = 64;
  double tau_cl = 0.07;
  double tau_pcl = 0.07;
  double lambda = 0.95;  // weight of L_CL; L_PCL gets 1 - lambda
  int epochs_total = 6;
  int epochs_cl_only = 4;
  int prototypes_per_class = 3;
  bool include_positive_in_denominator = false;
  bool trainable_prototypes = false;
  PositiveScope positive_scope = PositiveScope::own_class;
  int pcl_positives = 1;
  int kmeans_restarts = 10;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Three affine layers: Linear -> LayerNorm -> SiLU -> Dropout, twice, then
/// Linear and L2 normalization.
class AlignerState {
 public:
  AlignerState() = default;
  explicit AlignerState(const AlignerConfig& cfg);

  const AlignerConfig& config() const { return cfg_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  long steps = 0;

  struct Cache {
    RowMat z, h1, n1, a1, m1, h2, n2, a2, m2, o;
    Vec inv_sd1, inv_sd2;  // per row
    Vec norm;              // per row output norm
    RowMat r;
  };

  /// Rows of z are DIF vectors. Dropout is applied only when `rng` is given.
  RowMat forward(const RowMat& z, Rng* rng = nullptr, Cache* cache = nullptr) const;
  /// Gradient of the loss w.r.t. params given dL/dr for every row.
  std::vector<double> backward(const Cache& cache, const RowMat& dr) const;

  ConstRowMatMap mat(const char* name) const;
  ConstVecMap vec(const char* name) const;

 private:
  struct Slot {
    std::size_t offset;
    int rows, cols;
  };
  const Slot& slot(const char* name) const;
  RowMatMap mat_mut(const char* name);
  void build_layout();

  AlignerConfig cfg_;
  std::vector<double> params_;
  std::map<std::string, Slot> slots_;
};

/// Inference-mode projection of a single DIF vector to a unit vector.
Vec align(const AlignerState& aligner, const Vec& z);
RowMat align_batch(const AlignerState& aligner, const RowMat& z);

struct LossGrad {
  double loss = 0.0;
  RowMat grad;  // same shape as the embeddings
};

/// Supervised contrastive loss summed over anchors; anchors without a
/// same-label partner contribute zero.
LossGrad supcon_loss(const RowMat& r, const std::vector<int>& labels, double tau);

struct Prototype {
  Vec mu;
  int kb_id = 0;
  int local_index = 0;
};

struct PrototypeBook {
  std::vector<Prototype> prototypes;
  double inertia = 0.0;

  std::size_t size() const { return prototypes.size(); }
  RowMat matrix() const;
  std::map<int, int> counts() const;
  int dimension() const;
};

struct KMeansResult {
  std::vector<int> assignment;
  RowMat centroids;  // unnormalized cluster means
  double inertia = 0.0;
  std::vector<double> inertia_history;  // of the winning restart
  int iterations = 0;
};

/// Lloyd's algorithm followed by single-point (Hartigan) refinement. Runs start
/// from farthest-point seeding at several first points plus D^2-sampled
/// seedings; the lowest-inertia run wins. k is capped at the number of
/// distinct rows.
KMeansResult kmeans(const RowMat& x, int k, std::uint64_t seed, int restarts = 10, int max_iter = 100);

/// Per-class KMeans with centroids renormalized to unit length.
PrototypeBook init_prototypes(const RowMat& r, const std::vector<int>& labels, int m, std::uint64_t seed,
                              int restarts = 10);

struct PclOptions {
  double tau = 0.07;
  bool include_positive_in_denominator = false;
  PositiveScope scope = PositiveScope::own_class;
  int positives = 1;
};

struct PclResult {
  double loss = 0.0;
  RowMat grad_r;
  RowMat grad_mu;  // [num_prototypes x dim]
};

PclResult pcl_loss(const RowMat& r, const std::vector<int>& labels, const PrototypeBook& book,
                   const PclOptions& opts);

struct EpochLog {
  int epoch = 0;
  double l_cl = 0.0;
  double l_pcl = 0.0;
  double l_total = 0.0;
  double lr = 0.0;
};

struct TrainReport {
  std::vector<EpochLog> epochs;
  double final_inertia = 0.0;
  long steps = 0;
};

struct AlignerTrainResult {
  AlignerState aligner;
  PrototypeBook book;
  TrainReport report;
};

/// Two-stage training: L_CL alone for epochs_cl_only epochs, then
/// (1 - lambda) L_PCL + lambda L_CL against prototypes clustered from the
/// stage-one embeddings; prototypes are refit by clustering at the end.
AlignerTrainResult train_aligner(const RowMat& z, const std::vector<int>& labels, const AlignerConfig& cfg);

/// Mean same-class cosine minus mean cross-class cosine.
double class_margin(const RowMat& r, const std::vector<int>& labels);

std::string format_train_log(const TrainReport& report);

void save_aligner(const AlignerState& aligner, const PrototypeBook& book, std::uint64_t selection_fingerprint,
                  const std::filesystem::path& path);
struct AlignerCheckpoint {
  AlignerState aligner;
  PrototypeBook book;
  std::uint64_t selection_fingerprint = 0;
};
AlignerCheckpoint load_aligner(const std::filesystem::path& path);

}  // namespace dfams
