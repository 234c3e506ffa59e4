#pragma once

#include "dfams/alignment.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <vector>

namespace dfams {

struct RoutingConfig {
  double tau = 0.8;
  int top_n = 3;
  int total_slots = 10;
  bool redistribute_remainder = false;
  /// When false every query is routed; used by the no-triggering ablation.
  bool adaptive_triggering = true;

  void validate() const;
};

struct RoutingDecision {
  bool abstained = false;
  Vec scores;
  std::vector<int> top_set;     // prototype indices, highest score first
  std::map<int, int> weights;   // kb_id -> slots, one entry per KB in the book
  int total() const;
  std::vector<int> positive_kbs() const;
};

/// Cosine similarity of a unit query to every prototype, in book order.
Vec score(const Vec& q, const PrototypeBook& book);

/// Abstain when max s < tau; otherwise split T slots over the KBs owning the
/// top-N prototypes in proportion to their summed (non-negative) scores,
/// rounding down.
RoutingDecision route(const Vec& s, const PrototypeBook& book, const RoutingConfig& cfg);

nlohmann::json decision_record(const std::string& query_id, const RoutingDecision& d);

}  // namespace dfams
