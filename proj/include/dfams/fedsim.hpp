#pragma once

#include "dfams/common.hpp"
#include "dfams/routing.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace dfams {

struct ScenarioSpec {
  int num_kbs = 4;
  int subdomains_per_kb = 3;
  int docs_per_subdomain = 20;
  double vocab_overlap = 0.3;  // shared slice size relative to a core slice
  int train_size = 2000;
  int test_size = 500;
  double others_fraction = 0.15;
  double multi_source_fraction = 0.1;
  int vocab_size = 256;
  int core_tokens = 12;        // per (kb, subdomain)
  int background_tokens = 48;  // Others / function-word vocabulary
  int doc_keywords = 4;
  int doc_length = 24;
  int query_length = 10;
  double doc_focus = 0.5;         // doc tokens drawn from the doc's keywords
  double query_doc_focus = 0.55;  // query tokens copied from the generating doc
  double query_background = 0.2;  // query tokens drawn from the background slice
  double others_shared = 0.3;     // Others tokens drawn from the shared slices
  std::uint64_t seed = 1;

  int shared_per_subdomain() const;
  int required_vocab() const;
  void validate() const;
};

struct Document {
  int doc_id = 0;
  int subdomain = 0;
  TokenSeq tokens;
};

struct KnowledgeBase {
  int kb_id = 0;
  std::vector<Document> documents;
  std::vector<std::vector<int>> subdomain_core;  // generator-internal, for oracles
};

enum class Split { train, test, probe };

struct Query {
  std::string query_id;
  TokenSeq tokens;
  std::set<int> gold_kbs;   // empty = Others
  std::set<int> gold_docs;
  Split split = Split::train;

  bool is_others() const { return gold_kbs.empty(); }
  /// Class label for single-source and Others queries.
  int label() const;
};

struct Scenario {
  ScenarioSpec spec;
  std::vector<KnowledgeBase> kbs;
  std::vector<Query> train_queries;
  std::vector<Query> test_queries;
  std::vector<int> background_vocab;
  std::vector<std::vector<int>> shared_vocab;  // per subdomain index

  const KnowledgeBase& kb(int kb_id) const;
  std::size_t document_count() const;
};

Scenario generate_scenario(const ScenarioSpec& spec);

/// Fresh single-source and Others queries whose token sequences differ from
/// every train and test query.
std::vector<Query> generate_probe_queries(const Scenario& sc, int count, std::uint64_t seed);

std::string format_scenario(const Scenario& sc);
Scenario parse_scenario(const std::string& text);
void save_scenario(const Scenario& sc, const std::filesystem::path& path);
Scenario load_scenario(const std::filesystem::path& path);

struct EmbeddingTable {
  RowMat table;  // [vocab x dim]
};

EmbeddingTable make_embedding_table(int vocab, int dim, std::uint64_t seed);
/// Mean of token embeddings, normalized; zero vector for an empty sequence.
Vec embed_tokens(const EmbeddingTable& emb, const TokenSeq& tokens);

struct DenseIndex {
  int kb_id = 0;
  std::vector<int> doc_ids;
  RowMat vectors;  // one unit row per doc
  std::vector<std::string> warnings;
};

DenseIndex build_index(const KnowledgeBase& kb, const EmbeddingTable& emb);
DenseIndex build_index(const KnowledgeBase& kb, int vocab, int dim, std::uint64_t embedding_seed);

struct Retrieved {
  int doc_id = 0;
  int kb_id = 0;
  double score = 0.0;
};

/// Top-k by cosine similarity, ties to the lower doc_id.
std::vector<Retrieved> retrieve(const DenseIndex& index, const Vec& qvec, int k);

/// Retrieves w_k documents from each KB and merges by score (ties keep the
/// lower kb_id first), so every per-KB ranking is preserved.
std::vector<Retrieved> federated_retrieve(const std::map<int, DenseIndex>& indices, const RoutingDecision& decision,
                                          const Vec& qvec);

struct QueryOutcome {
  std::string query_id;
  bool abstained = false;
  std::vector<int> positive_kbs;    // by slot count, largest first
  std::vector<int> retrieved_docs;  // merged ranking
};

QueryOutcome make_outcome(const std::string& query_id, const RoutingDecision& d, const std::vector<Retrieved>& results);

struct EvalReport {
  double cls_acc = 0.0;           // exact set for single-source
  double cls_acc_coverage = 0.0;  // superset rule for single-source as well
  double recall_at_k = 0.0;
  double abstention_acc = 0.0;
  int k = 10;
  int total_queries = 0;
  int recall_queries = 0;
  std::map<std::pair<int, int>, int> confusion;  // (gold class, predicted class)

  nlohmann::json to_json() const;
};

EvalReport evaluate(const std::vector<Query>& queries, const std::vector<QueryOutcome>& outcomes, int k = 10);

}  // namespace dfams
