#include "doctest.h"

#include "dfams/fedsim.hpp"
#include "dfams/rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

using namespace dfams;

namespace {

ScenarioSpec small_spec(std::uint64_t seed = 3) {
  ScenarioSpec s;
  s.docs_per_subdomain = 6;
  s.train_size = 200;
  s.test_size = 100;
  s.seed = seed;
  return s;
}

RoutingDecision weights(std::map<int, int> w) {
  RoutingDecision d;
  d.weights = std::move(w);
  return d;
}

Query gold(const std::string& id, std::set<int> kbs, std::set<int> docs) {
  Query q;
  q.query_id = id;
  q.gold_kbs = std::move(kbs);
  q.gold_docs = std::move(docs);
  return q;
}

QueryOutcome outcome(const std::string& id, bool abstained, std::vector<int> kbs, std::vector<int> docs = {}) {
  return {id, abstained, std::move(kbs), std::move(docs)};
}

}  // namespace

TEST_CASE("scenario: zero overlap keeps knowledge bases lexically disjoint") {
  auto spec = small_spec();
  spec.vocab_overlap = 0.0;
  const auto sc = generate_scenario(spec);
  for (const auto& a : sc.kbs) {
    std::set<int> own;
    for (const auto& core : a.subdomain_core) own.insert(core.begin(), core.end());
    for (const auto& b : sc.kbs) {
      if (a.kb_id == b.kb_id) continue;
      for (const auto& core : b.subdomain_core)
        for (int t : core) CHECK(own.count(t) == 0);
      for (const auto& d : b.documents)
        for (int t : d.tokens) CHECK(own.count(t) == 0);
    }
  }
}

TEST_CASE("scenario: split composition and gold consistency") {
  auto spec = small_spec();
  spec.others_fraction = 0.3;
  spec.multi_source_fraction = 0.2;
  const auto sc = generate_scenario(spec);
  CHECK(sc.train_queries.size() == 200);
  CHECK(sc.test_queries.size() == 100);
  int train_others = 0;
  for (const auto& q : sc.train_queries) {
    CHECK(q.gold_kbs.size() <= 1);
    train_others += q.is_others();
  }
  CHECK(std::abs(train_others - 60) <= 1);
  int others = 0, multi = 0;
  for (const auto& q : sc.test_queries) {
    others += q.is_others();
    multi += q.gold_kbs.size() > 1;
    if (q.is_others()) CHECK(q.gold_docs.empty());
    for (int d : q.gold_docs) {
      bool owned = false;
      for (int kb : q.gold_kbs)
        for (const auto& doc : sc.kb(kb).documents) owned |= doc.doc_id == d;
      CHECK(owned);
    }
    for (int t : q.tokens) CHECK((t >= 0 && t < spec.vocab_size));
  }
  CHECK(std::abs(others - 30) <= 1);
  CHECK(std::abs(multi - 20) <= 1);

  spec.multi_source_fraction = 0.0;
  for (const auto& q : generate_scenario(spec).test_queries) CHECK(q.gold_kbs.size() <= 1);
}

TEST_CASE("scenario: determinism, file round trip and validation") {
  const auto a = format_scenario(generate_scenario(small_spec(5)));
  CHECK(a == format_scenario(generate_scenario(small_spec(5))));
  CHECK(a != format_scenario(generate_scenario(small_spec(6))));
  CHECK(format_scenario(parse_scenario(a)) == a);

  const auto path = std::filesystem::temp_directory_path() / "dfams_scenario.jsonl";
  save_scenario(generate_scenario(small_spec(5)), path);
  CHECK(format_scenario(load_scenario(path)) == a);
  std::filesystem::remove(path);

  auto bad = small_spec();
  bad.vocab_size = 100;
  try {
    generate_scenario(bad);
    FAIL("expected configuration error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
    CHECK(std::string(e.what()).find("vocab_size") != std::string::npos);
  }
  bad = small_spec();
  bad.others_fraction = 1.5;
  CHECK_THROWS_AS(generate_scenario(bad), Error);
  CHECK_THROWS_AS(parse_scenario("{\"kind\":\"doc\"}\n"), Error);
}

TEST_CASE("probe queries are disjoint from train and test") {
  const auto sc = generate_scenario(small_spec());
  const auto probe = generate_probe_queries(sc, 80, 11);
  CHECK(probe.size() == 80);
  std::set<TokenSeq> seen;
  for (const auto& q : sc.train_queries) seen.insert(q.tokens);
  for (const auto& q : sc.test_queries) seen.insert(q.tokens);
  for (const auto& q : probe) {
    CHECK(seen.count(q.tokens) == 0);
    CHECK(q.split == Split::probe);
    CHECK(q.gold_kbs.size() <= 1);
  }
}

TEST_CASE("dense index: embeddings and ranking") {
  const auto emb = make_embedding_table(20, 6, 4);
  KnowledgeBase kb;
  kb.kb_id = 2;
  kb.documents = {{10, 0, {3, 4, 5}}, {11, 0, {3, 4, 5}}, {12, 1, {7}}, {13, 1, {}}, {14, 0, {1, 9, 9, 2}}};
  const auto idx = build_index(kb, emb);
  CHECK(idx.doc_ids == std::vector<int>{10, 11, 12, 14});
  CHECK(idx.warnings.size() == 1);
  CHECK(idx.vectors.row(0) == idx.vectors.row(1));
  CHECK((idx.vectors.row(2) - emb.table.row(7).normalized()).norm() < 1e-12);
  for (Eigen::Index i = 0; i < idx.vectors.rows(); ++i) CHECK(idx.vectors.row(i).norm() == doctest::Approx(1.0));

  const auto first = retrieve(idx, idx.vectors.row(3).transpose(), 2);
  CHECK(first[0].doc_id == 14);
  const auto dup = retrieve(idx, idx.vectors.row(0).transpose(), 4);
  CHECK(dup[0].doc_id == 10);  // tie with 11 goes to the lower id
  CHECK(dup[1].doc_id == 11);
  CHECK(retrieve(idx, idx.vectors.row(0).transpose(), 50).size() == 4);
  CHECK_THROWS_AS(retrieve(idx, Vec::Ones(3), 2), Error);
}

TEST_CASE("retrieve matches a brute-force ranking") {
  Rng rng(12);
  const auto emb = make_embedding_table(40, 8, 9);
  for (int trial = 0; trial < 20; ++trial) {
    KnowledgeBase kb;
    kb.kb_id = 1;
    for (int d = 0; d < 8; ++d) {
      Document doc{d * 3, 0, {}};
      for (int t = 0; t < 5; ++t) doc.tokens.push_back(static_cast<int>(rng.below(40)));
      kb.documents.push_back(doc);
    }
    const auto idx = build_index(kb, emb);
    Vec q(8);
    for (int i = 0; i < 8; ++i) q(i) = rng.normal();
    q.normalize();
    std::vector<std::pair<double, int>> expect;
    for (const auto& d : kb.documents) expect.emplace_back(-embed_tokens(emb, d.tokens).dot(q), d.doc_id);
    std::sort(expect.begin(), expect.end());
    const auto got = retrieve(idx, q, 8);
    REQUIRE(got.size() == 8);
    for (int i = 0; i < 8; ++i) CHECK(got[static_cast<std::size_t>(i)].doc_id == expect[static_cast<std::size_t>(i)].second);
  }
}

TEST_CASE("federated retrieval") {
  auto sc = generate_scenario(small_spec());
  const auto emb = make_embedding_table(sc.spec.vocab_size, 16, 2);
  std::map<int, DenseIndex> indices;
  for (const auto& kb : sc.kbs) indices[kb.kb_id] = build_index(kb, emb);
  const Vec q = embed_tokens(emb, sc.test_queries[0].tokens);

  const auto r = federated_retrieve(indices, weights({{1, 7}, {2, 2}, {3, 0}, {4, 0}}), q);
  CHECK(r.size() == 9);
  CHECK(std::count_if(r.begin(), r.end(), [](const Retrieved& x) { return x.kb_id == 1; }) == 7);
  CHECK(std::count_if(r.begin(), r.end(), [](const Retrieved& x) { return x.kb_id == 2; }) == 2);
  for (std::size_t i = 1; i < r.size(); ++i) CHECK(r[i - 1].score >= r[i].score);

  auto abstain = weights({{1, 7}});
  abstain.abstained = true;
  CHECK(federated_retrieve(indices, abstain, q).empty());

  const auto single = federated_retrieve(indices, weights({{3, 10}}), q);
  const auto plain = retrieve(indices.at(3), q, 10);
  REQUIRE(single.size() == plain.size());
  for (std::size_t i = 0; i < plain.size(); ++i) CHECK(single[i].doc_id == plain[i].doc_id);

  CHECK_THROWS_AS(federated_retrieve(indices, weights({{9, 1}}), q), Error);

  // merged baseline: one KB holding every document
  KnowledgeBase merged;
  merged.kb_id = 1;
  for (const auto& kb : sc.kbs) merged.documents.insert(merged.documents.end(), kb.documents.begin(), kb.documents.end());
  const auto midx = build_index(merged, emb);
  const auto fed = federated_retrieve({{1, midx}}, weights({{1, 10}}), q);
  const auto direct = retrieve(midx, q, 10);
  for (std::size_t i = 0; i < direct.size(); ++i) CHECK(fed[i].doc_id == direct[i].doc_id);
}

TEST_CASE("evaluate: metric definitions") {
  std::vector<Query> qs{gold("a", {1}, {5, 6}), gold("b", {1}, {7}), gold("c", {1, 2}, {8, 9}), gold("o", {}, {})};
  std::vector<QueryOutcome> outs{outcome("a", false, {1}, {5, 1, 2}), outcome("b", false, {1, 2}, {7}),
                                 outcome("c", false, {2, 1}, {8}), outcome("o", false, {3})};
  const auto r = evaluate(qs, outs);
  CHECK(r.recall_queries == 3);
  CHECK(r.recall_at_k == doctest::Approx((0.5 + 1.0 + 0.5) / 3.0));
  CHECK(r.cls_acc == doctest::Approx(2.0 / 4.0));           // a, c
  CHECK(r.cls_acc_coverage == doctest::Approx(3.0 / 4.0));  // a, b, c
  CHECK(r.abstention_acc == doctest::Approx(3.0 / 4.0));

  // all abstained with 30% Others
  std::vector<Query> many;
  std::vector<QueryOutcome> none;
  for (int i = 0; i < 10; ++i) {
    const auto id = std::to_string(i);
    many.push_back(i < 3 ? gold(id, {}, {}) : gold(id, {1}, {i}));
    none.push_back(outcome(id, true, {}));
  }
  const auto ab = evaluate(many, none);
  CHECK(ab.abstention_acc == doctest::Approx(0.30));
  CHECK(ab.cls_acc == doctest::Approx(0.30));
  CHECK(ab.recall_at_k == 0.0);

  outs.pop_back();
  try {
    evaluate(qs, outs);
    FAIL("expected incompleteness error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("o") != std::string::npos);
  }
}

TEST_CASE("recall is non-decreasing in k") {
  Rng rng(5);
  std::vector<Query> qs;
  std::vector<QueryOutcome> outs;
  for (int i = 0; i < 30; ++i) {
    std::set<int> g{static_cast<int>(rng.below(20)), static_cast<int>(rng.below(20))};
    qs.push_back(gold(std::to_string(i), {1}, g));
    std::vector<int> ranking(20);
    std::iota(ranking.begin(), ranking.end(), 0);
    rng.shuffle(ranking);
    outs.push_back(outcome(std::to_string(i), false, {1}, ranking));
  }
  double prev = 0.0;
  for (int k = 1; k <= 20; ++k) {
    const double r = evaluate(qs, outs, k).recall_at_k;
    CHECK(r >= prev);
    prev = r;
  }
  CHECK(prev == doctest::Approx(1.0));
}
