#include "doctest.h"

#include "dfams/routing.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <set>

using namespace dfams;

namespace {

PrototypeBook owned_book(const std::vector<int>& owners, int dim = 4) {
  PrototypeBook b;
  for (std::size_t i = 0; i < owners.size(); ++i) {
    Vec mu = Vec::Zero(dim);
    mu(static_cast<Eigen::Index>(i % static_cast<std::size_t>(dim))) = 1.0;
    b.prototypes.push_back({mu, owners[i], 0});
  }
  return b;
}

Vec vec_of(std::initializer_list<double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace

TEST_CASE("route: worked allocation example") {
  const auto book = owned_book({1, 1, 2, 3});
  RoutingConfig cfg;
  cfg.tau = 0.3;
  cfg.top_n = 3;
  cfg.total_slots = 10;
  const auto d = route(vec_of({0.9, 0.6, 0.5, 0.2}), book, cfg);
  CHECK_FALSE(d.abstained);
  CHECK(d.top_set == std::vector<int>{0, 1, 2});
  CHECK(d.weights.at(1) == 7);
  CHECK(d.weights.at(2) == 2);
  CHECK(d.weights.at(3) == 0);
  CHECK(d.total() == 9);

  cfg.redistribute_remainder = true;
  const auto r = route(vec_of({0.9, 0.6, 0.5, 0.2}), book, cfg);
  CHECK(r.total() == 10);
  CHECK(r.weights.at(1) == 8);  // 7.5 vs 2.5: equal fractions, lower kb id first
  CHECK(r.weights.at(2) == 2);
}

TEST_CASE("route: abstention, full allocation and ties") {
  const auto book = owned_book({1, 2, 3});
  RoutingConfig cfg;
  cfg.tau = 0.3;
  const auto a = route(vec_of({0.25, 0.1, 0.0}), book, cfg);
  CHECK(a.abstained);
  CHECK(a.total() == 0);

  cfg.top_n = 1;
  const auto one = route(vec_of({0.2, 0.9, 0.1}), book, cfg);
  CHECK(one.weights.at(2) == 10);
  CHECK(one.total() == 10);

  const auto tie = route(vec_of({0.5, 0.5, 0.5}), book, cfg);
  CHECK(tie.top_set == std::vector<int>{0});

  cfg.adaptive_triggering = false;
  CHECK_FALSE(route(vec_of({-0.5, 0.1, -0.2}), book, cfg).abstained);
}

TEST_CASE("route: degenerate and invalid inputs") {
  const auto book = owned_book({1, 2, 3});
  RoutingConfig cfg;
  cfg.tau = -0.5;
  cfg.top_n = 2;
  try {
    route(vec_of({-0.1, -0.2, -0.3}), book, cfg);
    FAIL("expected degenerate denominator");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::degenerate);
  }
  // negative member of the top set is clamped to zero
  const auto d = route(vec_of({0.4, -0.2, -0.3}), book, cfg);
  CHECK(d.weights.at(1) == 10);
  cfg.top_n = 4;
  CHECK_THROWS_AS(route(vec_of({0.4, 0.2, 0.3}), book, cfg), Error);
  cfg.top_n = 1;
  CHECK_THROWS_AS(route(vec_of({0.4, 0.2}), book, cfg), Error);
  cfg.total_slots = 0;
  CHECK_THROWS_AS(route(vec_of({0.4, 0.2, 0.3}), book, cfg), Error);
}

TEST_CASE("score: self similarity, orthogonality and direct recomputation") {
  Rng rng(6);
  PrototypeBook book;
  for (int i = 0; i < 5; ++i) {
    Vec mu(6);
    for (int k = 0; k < 6; ++k) mu(k) = rng.normal();
    book.prototypes.push_back({mu.normalized(), i % 2 + 1, i});
  }
  CHECK(score(book.prototypes[3].mu, book)(3) == doctest::Approx(1.0).epsilon(1e-9));
  Vec q(6);
  for (int k = 0; k < 6; ++k) q(k) = rng.normal();
  q.normalize();
  const Vec s = score(q, book);
  for (int i = 0; i < 5; ++i) {
    double dot = 0.0;
    for (int k = 0; k < 6; ++k) dot += q(k) * book.prototypes[static_cast<std::size_t>(i)].mu(k);
    CHECK(s(i) == doctest::Approx(dot).epsilon(1e-14));
  }
  const auto axis = owned_book({1, 2}, 4);
  Vec orth = Vec::Zero(4);
  orth(3) = 1.0;
  CHECK(score(orth, axis).isZero());
  CHECK_THROWS_AS(score(Vec::Ones(3), axis), Error);
}

TEST_CASE("route equals the exhaustive oracle on every 3-prototype score grid") {
  const std::vector<int> owners{1, 1, 2};
  const auto book = owned_book(owners, 3);
  const double levels[5] = {0.0, 0.25, 0.5, 0.75, 1.0};
  int checked = 0;
  for (double tau : {0.1, 0.5, 0.8})
    for (int n = 1; n <= 3; ++n)
      for (int t : {1, 3, 10})
        for (int a = 0; a < 5; ++a)
          for (int b = 0; b < 5; ++b)
            for (int c = 0; c < 5; ++c) {
              const std::vector<double> s{levels[a], levels[b], levels[c]};
              RoutingConfig cfg;
              cfg.tau = tau;
              cfg.top_n = n;
              cfg.total_slots = t;
              const auto expect = oracle::allocate(s, owners, tau, n, t);
              bool degenerate = false;
              for (const auto& [kb, w] : expect.weights) degenerate |= w < 0;
              if (degenerate) {
                CHECK_THROWS_AS(route(vec_of({s[0], s[1], s[2]}), book, cfg), Error);
                continue;
              }
              const auto got = route(vec_of({s[0], s[1], s[2]}), book, cfg);
              CHECK(got.abstained == expect.abstained);
              std::vector<int> top = got.top_set;
              std::sort(top.begin(), top.end());
              CHECK(top == expect.top);
              for (int kb : {1, 2}) {
                const int want = expect.weights.count(kb) ? expect.weights.at(kb) : 0;
                CHECK(got.weights.at(kb) == want);
              }
              ++checked;
            }
  CHECK(checked > 1000);
}

TEST_CASE("route fuzz: slot budget, abstention predicate, ownership and scale invariance") {
  Rng rng(99);
  for (int trial = 0; trial < 10000; ++trial) {
    const int np = 1 + static_cast<int>(rng.below(8));
    std::vector<int> owners;
    for (int i = 0; i < np; ++i) owners.push_back(1 + static_cast<int>(rng.below(4)));
    const auto book = owned_book(owners, 8);
    Vec s(np);
    for (int i = 0; i < np; ++i) s(i) = rng.uniform(-1.0, 1.0);
    RoutingConfig cfg;
    cfg.tau = rng.uniform(-0.5, 0.9);
    cfg.top_n = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(np)));
    cfg.total_slots = 1 + static_cast<int>(rng.below(20));
    cfg.redistribute_remainder = rng.bernoulli(0.5);
    RoutingDecision d;
    try {
      d = route(s, book, cfg);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::degenerate);
      CHECK(s.maxCoeff() >= cfg.tau);
      continue;
    }
    CHECK(d.abstained == (s.maxCoeff() < cfg.tau));
    CHECK(d.total() <= cfg.total_slots);
    if (d.abstained) CHECK(d.total() == 0);
    std::set<int> owning;
    for (int i : d.top_set) owning.insert(owners[static_cast<std::size_t>(i)]);
    for (const auto& [kb, w] : d.weights) {
      CHECK(w >= 0);
      if (w > 0) CHECK(owning.count(kb) == 1);
    }
    bool all_positive = !d.abstained;
    for (int i : d.top_set) all_positive &= s(i) > 0.0;
    if (cfg.redistribute_remainder && all_positive) CHECK(d.total() == cfg.total_slots);

    // powers of two scale exactly
    const double c = std::ldexp(1.0, static_cast<int>(rng.below(5)) - 2);
    RoutingConfig scaled = cfg;
    scaled.tau = cfg.tau * c;
    if (scaled.tau <= -1.0 || scaled.tau > 1.0) continue;
    const Vec sc = s * c;
    const auto e = route(sc, book, scaled);
    CHECK(e.abstained == d.abstained);
    CHECK(e.top_set == d.top_set);
    CHECK(e.weights == d.weights);
  }
}

TEST_CASE("decision record lists every KB") {
  const auto book = owned_book({1, 1, 2, 3});
  RoutingConfig cfg;
  cfg.tau = 0.3;
  const auto rec = decision_record("q7", route(vec_of({0.9, 0.6, 0.5, 0.2}), book, cfg));
  CHECK(rec["query_id"] == "q7");
  CHECK(rec["abstained"] == false);
  CHECK(rec["weights"]["1"] == 7);
  CHECK(rec["weights"]["3"] == 0);
  CHECK(rec["top"].size() == 3);
}
