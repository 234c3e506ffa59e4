#include "dfams/fedsim.hpp"

#include "dfams/container.hpp"
#include "dfams/rng.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace dfams {

namespace {

struct VocabLayout {
  std::vector<int> background;
  std::vector<std::vector<std::vector<int>>> core;  // [kb index][subdomain]
  std::vector<std::vector<int>> shared;             // [subdomain]
};

std::vector<int> range_of(int start, int count) {
  std::vector<int> v(static_cast<std::size_t>(count));
  std::iota(v.begin(), v.end(), start);
  return v;
}

VocabLayout layout_for(const ScenarioSpec& s) {
  VocabLayout v;
  int next = 0;
  v.background = range_of(next, s.background_tokens);
  next += s.background_tokens;
  v.core.resize(static_cast<std::size_t>(s.num_kbs));
  for (int k = 0; k < s.num_kbs; ++k)
    for (int d = 0; d < s.subdomains_per_kb; ++d) {
      v.core[static_cast<std::size_t>(k)].push_back(range_of(next, s.core_tokens));
      next += s.core_tokens;
    }
  for (int d = 0; d < s.subdomains_per_kb; ++d) {
    v.shared.push_back(range_of(next, s.shared_per_subdomain()));
    next += s.shared_per_subdomain();
  }
  return v;
}

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[static_cast<std::size_t>(rng.below(v.size()))];
}

class Generator {
 public:
  Generator(const ScenarioSpec& spec, const std::vector<KnowledgeBase>& kbs)
      : spec_(spec), layout_(layout_for(spec)), kbs_(kbs) {}

  // core slice of a subdomain joined with that subdomain's shared slice
  std::vector<int> topic_vocab(int kb_index, int sub) const {
    auto v = layout_.core[static_cast<std::size_t>(kb_index)][static_cast<std::size_t>(sub)];
    const auto& sh = layout_.shared[static_cast<std::size_t>(sub)];
    v.insert(v.end(), sh.begin(), sh.end());
    return v;
  }

  int doc_token(const Document& d, int kb_index, Rng& rng) const {
    const double u = rng.uniform();
    if (u < spec_.query_background) return pick(layout_.background, rng);
    if (u < spec_.query_background + spec_.query_doc_focus) return pick(d.tokens, rng);
    return pick(topic_vocab(kb_index, d.subdomain), rng);
  }

  Query single(Rng& rng) const {
    const int k = static_cast<int>(rng.below(kbs_.size()));
    const auto& kb = kbs_[static_cast<std::size_t>(k)];
    const auto& doc = pick(kb.documents, rng);
    Query q;
    for (int t = 0; t < spec_.query_length; ++t) q.tokens.push_back(doc_token(doc, k, rng));
    q.gold_kbs = {kb.kb_id};
    q.gold_docs = {doc.doc_id};
    return q;
  }

  Query multi(Rng& rng) const {
    const int a = static_cast<int>(rng.below(kbs_.size()));
    int b = static_cast<int>(rng.below(kbs_.size() - 1));
    if (b >= a) ++b;
    const auto& da = pick(kbs_[static_cast<std::size_t>(a)].documents, rng);
    const auto& db = pick(kbs_[static_cast<std::size_t>(b)].documents, rng);
    Query q;
    for (int t = 0; t < spec_.query_length; ++t)
      q.tokens.push_back(rng.bernoulli(0.5) ? doc_token(da, a, rng) : doc_token(db, b, rng));
    q.gold_kbs = {kbs_[static_cast<std::size_t>(a)].kb_id, kbs_[static_cast<std::size_t>(b)].kb_id};
    q.gold_docs = {da.doc_id, db.doc_id};
    return q;
  }

  Query others(Rng& rng) const {
    std::vector<int> pool;
    for (const auto& s : layout_.shared) pool.insert(pool.end(), s.begin(), s.end());
    Query q;
    for (int t = 0; t < spec_.query_length; ++t)
      q.tokens.push_back(!pool.empty() && rng.uniform() < spec_.others_shared ? pick(pool, rng)
                                                                              : pick(layout_.background, rng));
    return q;
  }

 private:
  const ScenarioSpec& spec_;
  VocabLayout layout_;
  const std::vector<KnowledgeBase>& kbs_;
};

int rounded(double fraction, int n) { return static_cast<int>(std::lround(fraction * n)); }

std::string split_name(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::test:
      return "test";
    case Split::probe:
      return "probe";
  }
  return "train";
}

Split split_from(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  if (s == "probe") return Split::probe;
  fail(ErrorKind::io, "unknown query split '" + s + "'");
}

std::string numbered(const std::string& prefix, std::size_t i) {
  std::ostringstream out;
  out << prefix << '-' << std::setw(5) << std::setfill('0') << i;
  return out.str();
}

void finish_split(std::vector<Query>& qs, Split split, const std::string& prefix, Rng& rng) {
  rng.shuffle(qs);
  for (std::size_t i = 0; i < qs.size(); ++i) {
    qs[i].split = split;
    qs[i].query_id = numbered(prefix, i);
  }
}

}  // namespace

int ScenarioSpec::shared_per_subdomain() const { return static_cast<int>(std::lround(vocab_overlap * core_tokens)); }

int ScenarioSpec::required_vocab() const {
  return background_tokens + num_kbs * subdomains_per_kb * core_tokens + subdomains_per_kb * shared_per_subdomain();
}

void ScenarioSpec::validate() const {
  auto need = [](bool ok, const std::string& field, const std::string& what) {
    if (!ok) fail(ErrorKind::config, "scenario." + field + " " + what);
  };
  auto fraction = [&](double v, const std::string& field) { need(v >= 0.0 && v <= 1.0, field, "must lie in [0, 1]"); };
  need(num_kbs >= 2, "num_kbs", "must be at least 2");
  need(subdomains_per_kb >= 1, "subdomains_per_kb", "must be at least 1");
  need(docs_per_subdomain >= 1, "docs_per_subdomain", "must be at least 1");
  fraction(vocab_overlap, "vocab_overlap");
  fraction(others_fraction, "others_fraction");
  fraction(multi_source_fraction, "multi_source_fraction");
  fraction(doc_focus, "doc_focus");
  fraction(query_doc_focus, "query_doc_focus");
  fraction(query_background, "query_background");
  fraction(others_shared, "others_shared");
  need(query_doc_focus + query_background <= 1.0, "query_doc_focus", "plus query_background must not exceed 1");
  need(others_fraction + multi_source_fraction <= 1.0, "multi_source_fraction", "plus others_fraction must not exceed 1");
  need(train_size >= 1, "train_size", "must be positive");
  need(test_size >= 1, "test_size", "must be positive");
  need(core_tokens >= 1, "core_tokens", "must be positive");
  need(background_tokens >= 1, "background_tokens", "must be positive");
  need(doc_keywords >= 1 && doc_keywords <= core_tokens, "doc_keywords", "must lie in [1, core_tokens]");
  need(doc_length >= 1, "doc_length", "must be positive");
  need(query_length >= 1, "query_length", "must be positive");
  need(required_vocab() <= vocab_size, "vocab_size",
       "is too small: the slices need " + std::to_string(required_vocab()) + " tokens");
}

int Query::label() const {
  if (gold_kbs.empty()) return kOthersLabel;
  if (gold_kbs.size() != 1) fail(ErrorKind::input, "query " + query_id + " is multi-source and has no single label");
  return *gold_kbs.begin();
}

const KnowledgeBase& Scenario::kb(int kb_id) const {
  for (const auto& k : kbs)
    if (k.kb_id == kb_id) return k;
  fail(ErrorKind::compatibility, "unknown knowledge base " + std::to_string(kb_id));
}

std::size_t Scenario::document_count() const {
  std::size_t n = 0;
  for (const auto& k : kbs) n += k.documents.size();
  return n;
}

Scenario generate_scenario(const ScenarioSpec& spec) {
  spec.validate();
  Scenario sc;
  sc.spec = spec;
  const auto layout = layout_for(spec);
  sc.background_vocab = layout.background;
  sc.shared_vocab = layout.shared;

  Rng doc_rng(derive_seed(spec.seed, "documents"));
  int next_doc = 0;
  for (int k = 0; k < spec.num_kbs; ++k) {
    KnowledgeBase kb;
    kb.kb_id = k + 1;
    kb.subdomain_core = layout.core[static_cast<std::size_t>(k)];
    for (int s = 0; s < spec.subdomains_per_kb; ++s) {
      const auto& core = layout.core[static_cast<std::size_t>(k)][static_cast<std::size_t>(s)];
      auto topic = core;
      topic.insert(topic.end(), layout.shared[static_cast<std::size_t>(s)].begin(),
                   layout.shared[static_cast<std::size_t>(s)].end());
      for (int d = 0; d < spec.docs_per_subdomain; ++d) {
        auto pool = core;
        doc_rng.shuffle(pool);
        pool.resize(static_cast<std::size_t>(spec.doc_keywords));
        Document doc;
        doc.doc_id = next_doc++;
        doc.subdomain = s;
        for (int t = 0; t < spec.doc_length; ++t)
          doc.tokens.push_back(doc_rng.uniform() < spec.doc_focus ? pick(pool, doc_rng) : pick(topic, doc_rng));
        kb.documents.push_back(std::move(doc));
      }
    }
    sc.kbs.push_back(std::move(kb));
  }

  const Generator gen(spec, sc.kbs);
  Rng train_rng(derive_seed(spec.seed, "train-queries"));
  const int train_others = rounded(spec.others_fraction, spec.train_size);
  for (int i = 0; i < spec.train_size; ++i)
    sc.train_queries.push_back(i < train_others ? gen.others(train_rng) : gen.single(train_rng));
  finish_split(sc.train_queries, Split::train, "train", train_rng);

  Rng test_rng(derive_seed(spec.seed, "test-queries"));
  const int test_others = rounded(spec.others_fraction, spec.test_size);
  const int test_multi = std::min(spec.test_size - test_others, rounded(spec.multi_source_fraction, spec.test_size));
  for (int i = 0; i < spec.test_size; ++i) {
    if (i < test_others)
      sc.test_queries.push_back(gen.others(test_rng));
    else if (i < test_others + test_multi)
      sc.test_queries.push_back(gen.multi(test_rng));
    else
      sc.test_queries.push_back(gen.single(test_rng));
  }
  finish_split(sc.test_queries, Split::test, "test", test_rng);
  return sc;
}

std::vector<Query> generate_probe_queries(const Scenario& sc, int count, std::uint64_t seed) {
  if (count < 1) fail(ErrorKind::config, "probe size must be positive");
  std::set<TokenSeq> taken;
  for (const auto& q : sc.train_queries) taken.insert(q.tokens);
  for (const auto& q : sc.test_queries) taken.insert(q.tokens);
  const Generator gen(sc.spec, sc.kbs);
  Rng rng(seed);
  const int others = rounded(sc.spec.others_fraction, count);
  std::vector<Query> out;
  int attempts = 0;
  while (static_cast<int>(out.size()) < count) {
    if (++attempts > 100 * count) fail(ErrorKind::degenerate, "cannot draw enough probe queries disjoint from train/test");
    Query q = static_cast<int>(out.size()) < others ? gen.others(rng) : gen.single(rng);
    if (!taken.insert(q.tokens).second) continue;
    out.push_back(std::move(q));
  }
  finish_split(out, Split::probe, "probe", rng);
  return out;
}

// ---------------------------------------------------------------------------
// Scenario file

namespace {

nlohmann::json spec_json(const ScenarioSpec& s) {
  return {{"num_kbs", s.num_kbs},
          {"subdomains_per_kb", s.subdomains_per_kb},
          {"docs_per_subdomain", s.docs_per_subdomain},
          {"vocab_overlap", s.vocab_overlap},
          {"train_size", s.train_size},
          {"test_size", s.test_size},
          {"others_fraction", s.others_fraction},
          {"multi_source_fraction", s.multi_source_fraction},
          {"vocab_size", s.vocab_size},
          {"core_tokens", s.core_tokens},
          {"background_tokens", s.background_tokens},
          {"doc_keywords", s.doc_keywords},
          {"doc_length", s.doc_length},
          {"query_length", s.query_length},
          {"doc_focus", s.doc_focus},
          {"query_doc_focus", s.query_doc_focus},
          {"query_background", s.query_background},
          {"others_shared", s.others_shared},
          {"seed", s.seed}};
}

ScenarioSpec spec_from(const nlohmann::json& j) {
  ScenarioSpec s;
  s.num_kbs = j.at("num_kbs");
  s.subdomains_per_kb = j.at("subdomains_per_kb");
  s.docs_per_subdomain = j.at("docs_per_subdomain");
  s.vocab_overlap = j.at("vocab_overlap");
  s.train_size = j.at("train_size");
  s.test_size = j.at("test_size");
  s.others_fraction = j.at("others_fraction");
  s.multi_source_fraction = j.at("multi_source_fraction");
  s.vocab_size = j.at("vocab_size");
  s.core_tokens = j.at("core_tokens");
  s.background_tokens = j.at("background_tokens");
  s.doc_keywords = j.at("doc_keywords");
  s.doc_length = j.at("doc_length");
  s.query_length = j.at("query_length");
  s.doc_focus = j.at("doc_focus");
  s.query_doc_focus = j.at("query_doc_focus");
  s.query_background = j.at("query_background");
  s.others_shared = j.at("others_shared");
  s.seed = j.at("seed");
  return s;
}

nlohmann::json query_json(const Query& q) {
  return {{"kind", "query"},
          {"query_id", q.query_id},
          {"split", split_name(q.split)},
          {"tokens", q.tokens},
          {"gold_kbs", q.gold_kbs},
          {"gold_docs", q.gold_docs}};
}

}  // namespace

std::string format_scenario(const Scenario& sc) {
  std::ostringstream out;
  out << nlohmann::json{{"kind", "scenario"},
                        {"spec", spec_json(sc.spec)},
                        {"documents", sc.document_count()},
                        {"train_queries", sc.train_queries.size()},
                        {"test_queries", sc.test_queries.size()}}
             .dump()
      << '\n';
  for (const auto& kb : sc.kbs) {
    out << nlohmann::json{{"kind", "kb"}, {"kb_id", kb.kb_id}, {"subdomain_core", kb.subdomain_core}}.dump() << '\n';
    for (const auto& d : kb.documents)
      out << nlohmann::json{{"kind", "doc"}, {"kb_id", kb.kb_id}, {"doc_id", d.doc_id}, {"subdomain", d.subdomain},
                            {"tokens", d.tokens}}
                 .dump()
          << '\n';
  }
  for (const auto& q : sc.train_queries) out << query_json(q).dump() << '\n';
  for (const auto& q : sc.test_queries) out << query_json(q).dump() << '\n';
  return out.str();
}

Scenario parse_scenario(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  Scenario sc;
  std::size_t line_no = 0;
  try {
    if (!std::getline(in, line)) fail(ErrorKind::io, "empty scenario file");
    ++line_no;
    const auto header = nlohmann::json::parse(line);
    if (header.at("kind") != "scenario") fail(ErrorKind::io, "scenario file must start with a scenario header");
    sc.spec = spec_from(header.at("spec"));
    sc.spec.validate();
    const auto layout = layout_for(sc.spec);
    sc.background_vocab = layout.background;
    sc.shared_vocab = layout.shared;
    std::set<int> doc_ids;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      const std::string kind = j.at("kind");
      if (kind == "kb") {
        KnowledgeBase kb;
        kb.kb_id = j.at("kb_id");
        kb.subdomain_core = j.at("subdomain_core").get<std::vector<std::vector<int>>>();
        sc.kbs.push_back(std::move(kb));
      } else if (kind == "doc") {
        if (sc.kbs.empty() || sc.kbs.back().kb_id != j.at("kb_id"))
          fail(ErrorKind::io, "document outside its knowledge-base block");
        Document d;
        d.doc_id = j.at("doc_id");
        d.subdomain = j.at("subdomain");
        d.tokens = j.at("tokens").get<TokenSeq>();
        if (!doc_ids.insert(d.doc_id).second) fail(ErrorKind::io, "duplicate doc_id " + std::to_string(d.doc_id));
        sc.kbs.back().documents.push_back(std::move(d));
      } else if (kind == "query") {
        Query q;
        q.query_id = j.at("query_id");
        q.split = split_from(j.at("split"));
        q.tokens = j.at("tokens").get<TokenSeq>();
        q.gold_kbs = j.at("gold_kbs").get<std::set<int>>();
        q.gold_docs = j.at("gold_docs").get<std::set<int>>();
        (q.split == Split::test ? sc.test_queries : sc.train_queries).push_back(std::move(q));
      } else {
        fail(ErrorKind::io, "unknown record kind '" + kind + "'");
      }
    }
    if (header.at("documents") != sc.document_count() || header.at("train_queries") != sc.train_queries.size() ||
        header.at("test_queries") != sc.test_queries.size())
      fail(ErrorKind::io, "scenario record counts do not match the header");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, "malformed scenario at line " + std::to_string(line_no) + ": " + e.what());
  }
  return sc;
}

void save_scenario(const Scenario& sc, const std::filesystem::path& path) { write_file(path, format_scenario(sc)); }

Scenario load_scenario(const std::filesystem::path& path) { return parse_scenario(read_file(path)); }

// ---------------------------------------------------------------------------
// Retrieval

EmbeddingTable make_embedding_table(int vocab, int dim, std::uint64_t seed) {
  if (vocab < 1 || dim < 1) fail(ErrorKind::config, "embedding table needs positive vocab and dim");
  Rng rng(seed);
  EmbeddingTable e;
  e.table.resize(vocab, dim);
  for (Eigen::Index i = 0; i < e.table.size(); ++i) e.table.data()[i] = rng.normal();
  return e;
}

Vec embed_tokens(const EmbeddingTable& emb, const TokenSeq& tokens) {
  Vec v = Vec::Zero(emb.table.cols());
  if (tokens.empty()) return v;
  for (int t : tokens) {
    if (t < 0 || t >= emb.table.rows()) fail(ErrorKind::input, "token id " + std::to_string(t) + " outside the embedding table");
    v += emb.table.row(t).transpose();
  }
  v /= static_cast<double>(tokens.size());
  const double n = v.norm();
  if (n > 0.0) v /= n;
  return v;
}

DenseIndex build_index(const KnowledgeBase& kb, const EmbeddingTable& emb) {
  if (kb.documents.empty()) fail(ErrorKind::input, "knowledge base " + std::to_string(kb.kb_id) + " has no documents");
  DenseIndex idx;
  idx.kb_id = kb.kb_id;
  std::vector<Vec> rows;
  for (const auto& d : kb.documents) {
    if (d.tokens.empty()) {
      idx.warnings.push_back("skipped empty document " + std::to_string(d.doc_id));
      continue;
    }
    idx.doc_ids.push_back(d.doc_id);
    rows.push_back(embed_tokens(emb, d.tokens));
  }
  idx.vectors.resize(static_cast<Eigen::Index>(rows.size()), emb.table.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) idx.vectors.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return idx;
}

DenseIndex build_index(const KnowledgeBase& kb, int vocab, int dim, std::uint64_t embedding_seed) {
  return build_index(kb, make_embedding_table(vocab, dim, embedding_seed));
}

std::vector<Retrieved> retrieve(const DenseIndex& index, const Vec& qvec, int k) {
  if (k < 1) fail(ErrorKind::input, "retrieve needs k >= 1");
  if (qvec.size() != index.vectors.cols()) fail(ErrorKind::compatibility, "query vector dimension does not match the index");
  const Vec s = index.vectors * qvec;
  std::vector<Retrieved> all;
  for (std::size_t i = 0; i < index.doc_ids.size(); ++i)
    all.push_back({index.doc_ids[i], index.kb_id, s(static_cast<Eigen::Index>(i))});
  const auto keep = std::min<std::size_t>(all.size(), static_cast<std::size_t>(k));
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(),
                    [](const Retrieved& a, const Retrieved& b) {
                      return a.score != b.score ? a.score > b.score : a.doc_id < b.doc_id;
                    });
  all.resize(keep);
  return all;
}

std::vector<Retrieved> federated_retrieve(const std::map<int, DenseIndex>& indices, const RoutingDecision& decision,
                                          const Vec& qvec) {
  std::vector<Retrieved> merged;
  if (decision.abstained) return merged;
  for (const auto& [kb, w] : decision.weights) {
    if (w <= 0) continue;
    auto it = indices.find(kb);
    if (it == indices.end()) fail(ErrorKind::compatibility, "routing weight for unknown knowledge base " + std::to_string(kb));
    const auto part = retrieve(it->second, qvec, w);
    merged.insert(merged.end(), part.begin(), part.end());
  }
  // stable: equal scores keep ascending-kb then per-KB order
  std::stable_sort(merged.begin(), merged.end(), [](const Retrieved& a, const Retrieved& b) { return a.score > b.score; });
  return merged;
}

// ---------------------------------------------------------------------------
// Metrics

QueryOutcome make_outcome(const std::string& query_id, const RoutingDecision& d, const std::vector<Retrieved>& results) {
  QueryOutcome o;
  o.query_id = query_id;
  o.abstained = d.abstained;
  std::vector<std::pair<int, int>> kbs;
  for (const auto& [kb, w] : d.weights)
    if (w > 0) kbs.emplace_back(-w, kb);
  std::sort(kbs.begin(), kbs.end());
  for (const auto& [negw, kb] : kbs) o.positive_kbs.push_back(kb);
  for (const auto& r : results) o.retrieved_docs.push_back(r.doc_id);
  return o;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json conf = nlohmann::json::array();
  for (const auto& [key, n] : confusion) conf.push_back({{"gold", key.first}, {"predicted", key.second}, {"count", n}});
  return {{"cls_acc", cls_acc},
          {"cls_acc_coverage", cls_acc_coverage},
          {"recall_at_k", recall_at_k},
          {"k", k},
          {"abstention_acc", abstention_acc},
          {"total_queries", total_queries},
          {"recall_queries", recall_queries},
          {"confusion", conf}};
}

EvalReport evaluate(const std::vector<Query>& queries, const std::vector<QueryOutcome>& outcomes, int k) {
  if (k < 1) fail(ErrorKind::input, "recall cutoff must be positive");
  std::map<std::string, const QueryOutcome*> by_id;
  for (const auto& o : outcomes) by_id[o.query_id] = &o;
  std::vector<std::string> missing;
  for (const auto& q : queries)
    if (!by_id.count(q.query_id)) missing.push_back(q.query_id);
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < missing.size() && i < 10; ++i) list += (i ? ", " : "") + missing[i];
    if (missing.size() > 10) list += ", ...";
    fail(ErrorKind::input, std::to_string(missing.size()) + " test queries have no outcome: " + list);
  }
  if (queries.empty()) fail(ErrorKind::input, "no queries to evaluate");

  EvalReport r;
  r.k = k;
  r.total_queries = static_cast<int>(queries.size());
  int exact = 0, coverage = 0, abstain_ok = 0;
  double recall_sum = 0.0;
  for (const auto& q : queries) {
    const auto& o = *by_id.at(q.query_id);
    const std::set<int> predicted(o.positive_kbs.begin(), o.positive_kbs.end());
    bool ok_exact = false, ok_cover = false;
    if (q.is_others()) {
      ok_exact = ok_cover = o.abstained;
    } else if (!o.abstained) {
      ok_cover = std::includes(predicted.begin(), predicted.end(), q.gold_kbs.begin(), q.gold_kbs.end());
      ok_exact = q.gold_kbs.size() > 1 ? ok_cover : predicted == q.gold_kbs;
    }
    exact += ok_exact;
    coverage += ok_cover;
    abstain_ok += (q.is_others() == o.abstained);

    if (!q.gold_docs.empty()) {
      ++r.recall_queries;
      int hit = 0;
      for (std::size_t i = 0; i < o.retrieved_docs.size() && i < static_cast<std::size_t>(k); ++i)
        hit += static_cast<int>(q.gold_docs.count(o.retrieved_docs[i]));
      recall_sum += static_cast<double>(hit) / static_cast<double>(q.gold_docs.size());
    }

    const int gold = q.gold_kbs.size() > 1 ? -1 : (q.is_others() ? kOthersLabel : *q.gold_kbs.begin());
    const int pred = o.abstained || o.positive_kbs.empty() ? kOthersLabel : o.positive_kbs.front();
    ++r.confusion[{gold, pred}];
  }
  r.cls_acc = static_cast<double>(exact) / r.total_queries;
  r.cls_acc_coverage = static_cast<double>(coverage) / r.total_queries;
  r.abstention_acc = static_cast<double>(abstain_ok) / r.total_queries;
  r.recall_at_k = r.recall_queries > 0 ? recall_sum / r.recall_queries : 0.0;
  return r;
}

}  // namespace dfams
