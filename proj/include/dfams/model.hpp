#pragma once

#include "dfams/common.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace dfams {

struct ModelConfig {
  int num_layers = 4;
  int model_dim = 32;
  int ffn_dim = 128;
  int num_heads = 2;
  int vocab_size = 64;
  int max_seq_len = 16;
  int num_classes = 5;
  std::uint64_t seed = 7;

  /// Throws a configuration error naming the first offending field.
  void validate() const;
  int head_dim() const { return model_dim / num_heads; }
};

/// Location of one named tensor inside the flat parameter vector.
struct TensorSlot {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;  // 1 for vectors
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

/// Parameter layout shared by ModelState and GradientRecord.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& cfg);

  const std::vector<TensorSlot>& slots() const { return slots_; }
  const TensorSlot& slot(const std::string& name) const;
  std::size_t total() const { return total_; }

  // Flat indices of FFN up-projection parameters.
  std::size_t w1_index(int layer, int row, int neuron) const;
  std::size_t b1_index(int layer, int neuron) const;
  bool is_ffn_up(std::size_t id) const;

 private:
  void add(const std::string& name, int rows, int cols);
  std::vector<TensorSlot> slots_;
  std::map<std::string, std::size_t> by_name_;
  std::size_t total_ = 0;
  int model_dim_ = 0;
  int ffn_dim_ = 0;
};

std::string layer_tensor(int layer, const char* name);

/// Pre-norm transformer encoder with a classification head on the
/// mean-pooled final hidden state. Parameters live in one flat vector;
/// tensors are row-major views into it.
class ModelState {
 public:
  explicit ModelState(const ModelConfig& cfg);

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  RowMatMap mat(const std::string& name);
  ConstRowMatMap mat(const std::string& name) const;
  VecMap vec(const std::string& name);
  ConstVecMap vec(const std::string& name) const;

  std::uint64_t checksum() const { return dfams::checksum(params_); }

 private:
  ModelConfig config_;
  ParamLayout layout_;
  std::vector<double> params_;
};

struct ActivationTrace {
  std::vector<RowMat> ffn_act;    // per layer [seq_len x ffn_dim]
  std::vector<RowMat> ffn_input;  // per layer [seq_len x model_dim], normalized attention-sublayer output
  Vec logits;
  int seq_len = 0;
};

struct GradientRecord {
  std::vector<double> grad;  // laid out like ModelState::params()
  double loss = 0.0;
};

enum class HessianMethod { finite_difference, gauss_newton };

struct HessianRecord {
  std::map<std::size_t, double> diagonal;
  std::map<std::pair<std::size_t, std::size_t>, double> pairs;
  HessianMethod method = HessianMethod::finite_difference;
};

struct LabeledSeq {
  TokenSeq tokens;
  int label = 0;
};

ModelState init_model(const ModelConfig& config);

ActivationTrace forward(const ModelState& model, const TokenSeq& tokens);

/// Cross-entropy on the class head and its exact reverse-mode gradient.
GradientRecord loss_and_grad(const ModelState& model, const TokenSeq& tokens, int label);

/// Jacobian of the logits w.r.t. all parameters, one row per class, plus the
/// softmax probabilities. Used for Gauss-Newton curvature.
struct LogitJacobian {
  RowMat jac;  // [num_classes x num_params]
  Vec probs;
};
LogitJacobian logit_jacobian(const ModelState& model, const TokenSeq& tokens);

/// Curvature terms of the dataset-averaged loss. Finite differences take
/// H_jk ~ [g_k(theta + h e_j) - g_k(theta - h e_j)] / 2h.
HessianRecord hessian_terms(const ModelState& model, const std::vector<LabeledSeq>& dataset,
                            const std::vector<std::size_t>& params,
                            const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                            HessianMethod method = HessianMethod::finite_difference, double step = 1e-5);

/// Gradient of an arbitrary objective at theta.
using GradientFn = std::function<std::vector<double>(const std::vector<double>&)>;

/// Central finite-difference curvature of any objective given its gradient.
HessianRecord finite_difference_hessian(const GradientFn& grad, const std::vector<double>& theta,
                                        const std::vector<std::size_t>& params,
                                        const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                                        double step = 1e-5);

struct ProbeTrainOptions {
  int epochs = 30;
  double lr = 3e-3;
  int batch_size = 32;
  std::uint64_t seed = 1;
};

struct ProbeTrainReport {
  std::vector<double> epoch_loss;
  double final_accuracy = 0.0;
};

/// Trains all model parameters on the labelled probing data with Adam.
ModelState train_probe_model(ModelState model, const std::vector<LabeledSeq>& dataset,
                             const ProbeTrainOptions& opts, ProbeTrainReport* report = nullptr);

int predict(const ModelState& model, const TokenSeq& tokens);
double accuracy(const ModelState& model, const std::vector<LabeledSeq>& dataset);

void save_model(const ModelState& model, const std::filesystem::path& path);
ModelState load_model(const std::filesystem::path& path);

}  // namespace dfams
