#pragma once

#include "dfams/attribution.hpp"
#include "dfams/model.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dfams {

enum class TokenPooling { mean, max };

struct DIFVector {
  Vec values;
  std::uint64_t selection_fingerprint = 0;
};

/// Token-pooled activations of the selected neuron groups, concatenated by
/// ascending layer and, within a layer, in the selection's group order
/// (highest score first).
DIFVector extract_dif(const ModelState& model, const NeuronSelection& sel, const TokenSeq& tokens,
                      TokenPooling pooling = TokenPooling::mean);

struct DIFInput {
  std::string id;
  TokenSeq tokens;
  int kb_label = 0;
};

struct DIFRecord {
  std::string id;
  int kb_label = 0;
  DIFVector dif;
};

std::vector<DIFRecord> batch_extract(const ModelState& model, const NeuronSelection& sel,
                                     const std::vector<DIFInput>& dataset, TokenPooling pooling = TokenPooling::mean);

/// Line-delimited DIF dataset: a header line with the selection fingerprint
/// and dimension, then one {id, kb_label, vector} record per line.
struct DIFDataset {
  std::uint64_t selection_fingerprint = 0;
  std::size_t dimension = 0;
  std::vector<DIFRecord> records;
};

std::string format_dif_dataset(const DIFDataset& ds);
DIFDataset parse_dif_dataset(const std::string& text);
void save_dif_dataset(const DIFDataset& ds, const std::filesystem::path& path);
DIFDataset load_dif_dataset(const std::filesystem::path& path);

}  // namespace dfams
