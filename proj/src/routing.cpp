#include "dfams/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dfams {

void RoutingConfig::validate() const {
  if (!(tau > -1.0 && tau <= 1.0)) fail(ErrorKind::config, "routing.tau must lie in (-1, 1]");
  if (top_n < 1) fail(ErrorKind::config, "routing.top_n must be at least 1");
  if (total_slots < 1) fail(ErrorKind::config, "routing.total_slots must be at least 1");
}

int RoutingDecision::total() const {
  int t = 0;
  for (const auto& [kb, w] : weights) t += w;
  return t;
}

std::vector<int> RoutingDecision::positive_kbs() const {
  std::vector<int> out;
  for (const auto& [kb, w] : weights)
    if (w > 0) out.push_back(kb);
  return out;
}

Vec score(const Vec& q, const PrototypeBook& book) {
  if (q.size() != book.dimension())
    fail(ErrorKind::compatibility, "query dimension " + std::to_string(q.size()) + " does not match prototypes (" +
                                       std::to_string(book.dimension()) + ")");
  Vec s(static_cast<Eigen::Index>(book.size()));
  for (std::size_t i = 0; i < book.size(); ++i) s(static_cast<Eigen::Index>(i)) = q.dot(book.prototypes[i].mu);
  return s;
}

RoutingDecision route(const Vec& s, const PrototypeBook& book, const RoutingConfig& cfg) {
  cfg.validate();
  if (static_cast<std::size_t>(s.size()) != book.size())
    fail(ErrorKind::compatibility, "score vector length does not match the prototype book");
  if (s.size() == 0) fail(ErrorKind::input, "cannot route against an empty prototype book");
  if (cfg.top_n > s.size())
    fail(ErrorKind::config, "routing.top_n exceeds the number of prototypes (" + std::to_string(s.size()) + ")");
  if (!all_finite({s.data(), static_cast<std::size_t>(s.size())})) fail(ErrorKind::numerical, "non-finite routing scores");

  RoutingDecision d;
  d.scores = s;
  for (const auto& p : book.prototypes) d.weights[p.kb_id] = 0;
  if (cfg.adaptive_triggering && s.maxCoeff() < cfg.tau) {
    d.abstained = true;
    return d;
  }

  std::vector<int> order(static_cast<std::size_t>(s.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return s(a) > s(b); });
  d.top_set.assign(order.begin(), order.begin() + cfg.top_n);

  std::map<int, double> mass;
  double denom = 0.0;
  for (int i : d.top_set) {
    const double v = std::max(0.0, s(i));
    mass[book.prototypes[static_cast<std::size_t>(i)].kb_id] += v;
    denom += v;
  }
  if (!(denom > 0.0))
    fail(ErrorKind::degenerate, "all top-" + std::to_string(cfg.top_n) + " prototype scores are non-positive");

  std::vector<std::pair<double, int>> remainders;
  int used = 0;
  for (const auto& [kb, m] : mass) {
    const double share = m / denom * cfg.total_slots;
    const int w = static_cast<int>(std::floor(share));
    d.weights[kb] = w;
    used += w;
    if (m > 0.0) remainders.emplace_back(share - w, kb);
  }
  if (cfg.redistribute_remainder && !remainders.empty()) {
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; used < cfg.total_slots; ++i, ++used) ++d.weights[remainders[i % remainders.size()].second];
  }
  return d;
}

nlohmann::json decision_record(const std::string& query_id, const RoutingDecision& d) {
  nlohmann::json top = nlohmann::json::array();
  for (int i : d.top_set) top.push_back({{"prototype", i}, {"score", d.scores(i)}});
  nlohmann::json w = nlohmann::json::object();
  for (const auto& [kb, slots] : d.weights) w[std::to_string(kb)] = slots;
  return {{"query_id", query_id}, {"abstained", d.abstained}, {"top", top}, {"weights", w}};
}

}  // namespace dfams
