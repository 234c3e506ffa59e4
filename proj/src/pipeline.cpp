#include "dfams/pipeline.hpp"
#include "dfams/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace dfams {

std::vector<ProbeSample> probe_samples(const std::vector<Query>& queries) {
  std::vector<ProbeSample> out;
  out.reserve(queries.size());
  for (const auto& q : queries) out.push_back({q.query_id, q.tokens, q.label()});
  return out;
}

ProbeResult run_probe(const PipelineConfig& cfg_in, const Scenario& sc, const ModelState* checkpoint) {
  const PipelineConfig cfg = cfg_in.resolved();
  cfg.validate();
  const auto& a = cfg.attribution;
  ProbeResult res{checkpoint ? *checkpoint : init_model(cfg.model), {}, {}, {}, {}};
  const auto& mc = res.model.config();
  if (checkpoint && (mc.vocab_size < sc.spec.vocab_size || mc.num_classes != sc.spec.num_kbs + 1 ||
                     mc.max_seq_len < sc.spec.query_length))
    fail(ErrorKind::compatibility, "model checkpoint does not fit the scenario (vocabulary, classes or sequence length)");

  const auto queries = generate_probe_queries(sc, a.probe_size, derive_seed(cfg.seed, "probe-queries"));
  res.probe = probe_samples(queries);
  if (!checkpoint) {
    std::vector<LabeledSeq> data;
    for (const auto& p : res.probe) data.push_back({p.tokens, p.kb_label});
    const ProbeTrainOptions opts{a.probe_epochs, a.probe_lr, a.probe_batch_size, derive_seed(cfg.seed, "probe-train")};
    res.model = train_probe_model(res.model, data, opts, &res.train_report);
  }
  const std::vector<ProbeSample> subset(res.probe.begin(), res.probe.begin() + a.shapley_samples);
  ShapleyOptions so;
  so.omega_self = a.omega_self;
  so.omega_pair = a.omega_pair;
  so.pair_scope = a.pair_scope;
  so.method = a.curvature;
  so.scope = a.hessian_scope;
  res.map = shapley_scores(res.model, subset, so);
  const auto layers = select_layers(res.map, a.t_layers, a.layer_mass_abs);
  res.selection = select_groups(res.map, layers, a.group_size, a.top_groups);
  return res;
}

NeuronSelection random_baseline_selection(const PipelineConfig& cfg_in) {
  const PipelineConfig cfg = cfg_in.resolved();
  const auto& a = cfg.attribution;
  return random_selection(cfg.model, a.t_layers, a.group_size, a.top_groups, derive_seed(cfg.seed, "random-selection"));
}

NeuronSelection full_baseline_selection(const PipelineConfig& cfg_in, const NeuronSelection& shapley) {
  const PipelineConfig cfg = cfg_in.resolved();
  return full_layer_selection(cfg.model, shapley.selected_layers(), cfg.attribution.group_size);
}

TrainValSplit split_validation(const std::vector<Query>& train, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);
  const auto nval = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(train.size())));
  std::vector<bool> is_val(train.size(), false);
  for (std::size_t i = 0; i < nval; ++i) is_val[idx[i]] = true;
  TrainValSplit out;
  for (std::size_t i = 0; i < train.size(); ++i) (is_val[i] ? out.validation : out.train).push_back(train[i]);
  return out;
}

DIFMatrix dif_matrix(const ModelState& model, const NeuronSelection& sel, const std::vector<Query>& queries,
                     TokenPooling pooling) {
  std::vector<DIFInput> inputs;
  inputs.reserve(queries.size());
  for (const auto& q : queries) inputs.push_back({q.query_id, q.tokens, q.gold_kbs.size() > 1 ? -1 : q.label()});
  const auto records = batch_extract(model, sel, inputs, pooling);
  DIFMatrix m;
  m.z.resize(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(sel.dimension()));
  for (std::size_t i = 0; i < records.size(); ++i) {
    m.z.row(static_cast<Eigen::Index>(i)) = records[i].dif.values.transpose();
    m.labels.push_back(records[i].kb_label);
  }
  return m;
}

RowMat RoutingSpace::embed(const RowMat& z) const {
  if (aligner) return align_batch(*aligner, z);
  if (z.cols() != mean.size()) fail(ErrorKind::compatibility, "DIF dimension does not match the frozen statistics");
  RowMat r = (z.rowwise() - mean.transpose()).array().rowwise() * inv_sd.transpose().array();
  for (Eigen::Index i = 0; i < r.rows(); ++i) {
    const double n = r.row(i).norm();
    if (n > 0.0) r.row(i) /= n;
  }
  return r;
}

namespace {

RowMat rows_of(const RowMat& x, const std::vector<Eigen::Index>& rows) {
  RowMat out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return out;
}

PrototypeBook kb_prototypes(const RowMat& r, const std::vector<int>& labels, const AlignerConfig& cfg,
                            std::uint64_t seed) {
  std::vector<Eigen::Index> rows;
  std::vector<int> kb;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] > 0) {
      rows.push_back(static_cast<Eigen::Index>(i));
      kb.push_back(labels[i]);
    }
  return init_prototypes(rows_of(r, rows), kb, cfg.prototypes_per_class, seed, cfg.kmeans_restarts);
}

}  // namespace

RoutingSpace frozen_space(const DIFMatrix& train, const AlignerConfig& cfg) {
  if (train.z.rows() < 2) fail(ErrorKind::input, "frozen DIF statistics need at least 2 training rows");
  RoutingSpace s;
  s.mean = train.z.colwise().mean().transpose();
  const RowMat centered = train.z.rowwise() - s.mean.transpose();
  s.inv_sd = Vec(train.z.cols());
  for (Eigen::Index j = 0; j < train.z.cols(); ++j) {
    const double sd = std::sqrt(centered.col(j).squaredNorm() / static_cast<double>(train.z.rows()));
    s.inv_sd(j) = sd > 1e-12 ? 1.0 / sd : 0.0;  // constant features carry no signal
  }
  s.book = kb_prototypes(s.embed(train.z), train.labels, cfg, derive_seed(cfg.seed, "frozen-prototypes"));
  return s;
}

RoutingSpace aligned_space(const AlignerTrainResult& trained) {
  RoutingSpace s;
  s.aligner = trained.aligner;
  s.book = trained.book;
  return s;
}

double calibrate_tau(const std::vector<double>& max_scores, const std::vector<bool>& is_others) {
  if (max_scores.size() != is_others.size() || max_scores.empty())
    fail(ErrorKind::input, "threshold calibration needs one label per validation score");
  std::vector<std::pair<double, bool>> v;
  for (std::size_t i = 0; i < max_scores.size(); ++i) v.emplace_back(max_scores[i], is_others[i]);
  std::sort(v.begin(), v.end());
  // Candidate c places the threshold between v[c-1] and v[c]: the first c abstain.
  const std::size_t n = v.size();
  long correct = 0;
  for (const auto& [s, o] : v) correct += o ? 0 : 1;  // c = 0: nothing abstains
  long best = correct;
  std::vector<std::size_t> ties{0};
  for (std::size_t c = 1; c <= n; ++c) {
    correct += v[c - 1].second ? 1 : -1;
    if (c < n && v[c].first == v[c - 1].first) continue;  // cannot split equal scores
    if (correct > best) {
      best = correct;
      ties = {c};
    } else if (correct == best) {
      ties.push_back(c);
    }
  }
  const std::size_t c = ties[(ties.size() - 1) / 2];
  double tau;
  if (c == 0)
    tau = v.front().first - 1e-6;
  else if (c == n)
    tau = v.back().first + 1e-6;
  else
    tau = 0.5 * (v[c - 1].first + v[c].first);
  return std::clamp(tau, -1.0 + 1e-9, 1.0);
}

Retriever build_retriever(const Scenario& sc, const PipelineConfig& cfg_in) {
  const PipelineConfig cfg = cfg_in.resolved();
  Retriever r;
  r.table = make_embedding_table(sc.spec.vocab_size, cfg.eval.embedding_dim, derive_seed(cfg.seed, "retrieval-embedding"));
  KnowledgeBase all;
  for (const auto& kb : sc.kbs) {
    r.indices[kb.kb_id] = build_index(kb, r.table);
    for (const auto& d : kb.documents) {
      all.documents.push_back(d);
      r.doc_kb[d.doc_id] = kb.kb_id;
    }
  }
  r.merged = build_index(all, r.table);
  return r;
}

namespace {

// Top-N prototypes all scoring <= 0 leaves no mass to split; the query then
// goes wholly to the best prototype's KB.
RoutingDecision top_one(const Vec& s, const PrototypeBook& book, const RoutingConfig& cfg) {
  RoutingDecision d;
  d.scores = s;
  for (const auto& p : book.prototypes) d.weights[p.kb_id] = 0;
  Eigen::Index best = 0;
  s.maxCoeff(&best);
  d.top_set = {static_cast<int>(best)};
  d.weights[book.prototypes[static_cast<std::size_t>(best)].kb_id] = cfg.total_slots;
  return d;
}

RunOutcome finish(const std::vector<Query>& test, const std::vector<QueryOutcome>& outcomes, int k,
                  std::vector<nlohmann::json> decisions, double tau) {
  RunOutcome out;
  out.report = evaluate(test, outcomes, k);
  out.decisions = std::move(decisions);
  out.tau = tau;
  return out;
}

}  // namespace

RunOutcome run_routing(const RoutingSpace& space, const RoutingConfig& routing, const RowMat& test_z,
                       const std::vector<Query>& test, const Retriever& retriever, int k) {
  if (test_z.rows() != static_cast<Eigen::Index>(test.size())) fail(ErrorKind::input, "DIF rows do not match queries");
  const RowMat r = space.embed(test_z);
  std::vector<QueryOutcome> outcomes;
  std::vector<nlohmann::json> decisions;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const Vec s = score(r.row(static_cast<Eigen::Index>(i)).transpose(), space.book);
    RoutingDecision d;
    bool fallback = false;
    try {
      d = route(s, space.book, routing);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::degenerate) throw;
      d = top_one(s, space.book, routing);
      fallback = true;
    }
    const auto results = federated_retrieve(retriever.indices, d, embed_tokens(retriever.table, test[i].tokens));
    outcomes.push_back(make_outcome(test[i].query_id, d, results));
    auto rec = decision_record(test[i].query_id, d);
    if (fallback) rec["fallback"] = "top1";
    decisions.push_back(std::move(rec));
  }
  return finish(test, outcomes, k, std::move(decisions), routing.tau);
}

RunOutcome evaluate_space(const RoutingSpace& space, RoutingConfig routing, const EvalConfig& eval,
                          const RowMat& val_z, const std::vector<Query>& val, const RowMat& test_z,
                          const std::vector<Query>& test, const Retriever& retriever) {
  if (eval.calibrate_tau && routing.adaptive_triggering) {
    const RowMat r = space.embed(val_z);
    std::vector<double> best;
    std::vector<bool> others;
    for (Eigen::Index i = 0; i < r.rows(); ++i) {
      best.push_back(score(r.row(i).transpose(), space.book).maxCoeff());
      others.push_back(val[static_cast<std::size_t>(i)].is_others());
    }
    routing.tau = calibrate_tau(best, others);
  }
  return run_routing(space, routing, test_z, test, retriever, eval.k);
}

RunOutcome evaluate_merged(const std::vector<Query>& test, const Retriever& retriever, int k) {
  std::vector<QueryOutcome> outcomes;
  std::vector<nlohmann::json> decisions;
  for (const auto& q : test) {
    const auto res = retrieve(retriever.merged, embed_tokens(retriever.table, q.tokens), k);
    std::map<int, int> count;
    QueryOutcome o{q.query_id, false, {}, {}};
    for (const auto& r : res) {
      ++count[retriever.doc_kb.at(r.doc_id)];
      o.retrieved_docs.push_back(r.doc_id);
    }
    std::vector<std::pair<int, int>> order;
    for (const auto& [kb, n] : count) order.emplace_back(-n, kb);
    std::sort(order.begin(), order.end());
    nlohmann::json w = nlohmann::json::object();
    for (const auto& [negn, kb] : order) {
      o.positive_kbs.push_back(kb);
      w[std::to_string(kb)] = -negn;
    }
    decisions.push_back({{"query_id", q.query_id}, {"abstained", false}, {"weights", w}});
    outcomes.push_back(std::move(o));
  }
  return finish(test, outcomes, k, std::move(decisions), -1.0);
}

RunOutcome evaluate_threshold_classifier(const RoutingSpace& space, const RowMat& train_z,
                                         const std::vector<int>& train_labels, const RowMat& test_z,
                                         const std::vector<Query>& test, const Retriever& retriever,
                                         const PipelineConfig& cfg) {
  const RowMat x = space.embed(train_z);
  const RowMat xt = space.embed(test_z);
  const auto n = static_cast<double>(x.rows());
  std::vector<int> kbs;
  for (const auto& [kb, c] : space.book.counts()) kbs.push_back(kb);

  std::vector<Vec> w;
  std::vector<double> b;
  for (int kb : kbs) {
    Vec y(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) y(i) = train_labels[static_cast<std::size_t>(i)] == kb ? 1.0 : 0.0;
    Vec wk = Vec::Zero(x.cols());
    double bk = 0.0;
    for (int it = 0; it < cfg.eval.threshold_iterations; ++it) {
      const Vec z = (x * wk).array() + bk;
      const Vec err = (1.0 / (1.0 + (-z.array()).exp())).matrix() - y;
      wk -= cfg.eval.threshold_lr * (x.transpose() * err) / n;
      bk -= cfg.eval.threshold_lr * err.sum() / n;
    }
    w.push_back(wk);
    b.push_back(bk);
  }

  std::vector<QueryOutcome> outcomes;
  std::vector<nlohmann::json> decisions;
  const int slots = cfg.routing.total_slots;
  for (std::size_t q = 0; q < test.size(); ++q) {
    std::vector<std::pair<double, int>> positive;
    for (std::size_t j = 0; j < kbs.size(); ++j) {
      const double p = 1.0 / (1.0 + std::exp(-(xt.row(static_cast<Eigen::Index>(q)).dot(w[j]) + b[j])));
      if (p > 0.5) positive.emplace_back(-p, kbs[j]);
    }
    std::sort(positive.begin(), positive.end());
    RoutingDecision d;
    for (int kb : kbs) d.weights[kb] = 0;
    d.abstained = positive.empty();
    const int share = positive.empty() ? 0 : slots / static_cast<int>(positive.size());
    const int extra = positive.empty() ? 0 : slots % static_cast<int>(positive.size());
    for (std::size_t j = 0; j < positive.size(); ++j) d.weights[positive[j].second] = share + (static_cast<int>(j) < extra);
    const auto results = federated_retrieve(retriever.indices, d, embed_tokens(retriever.table, test[q].tokens));
    outcomes.push_back(make_outcome(test[q].query_id, d, results));
    nlohmann::json wj = nlohmann::json::object();
    for (const auto& [kb, v] : d.weights) wj[std::to_string(kb)] = v;
    decisions.push_back({{"query_id", test[q].query_id}, {"abstained", d.abstained}, {"weights", wj}});
  }
  return finish(test, outcomes, cfg.eval.k, std::move(decisions), 0.5);
}

// ---------------------------------------------------------------------------
// End to end

const VariantRow& E2EResult::row(const std::string& name) const {
  for (const auto* rows : {&variants, &baselines})
    for (const auto& r : *rows)
      if (r.variant == name) return r;
  fail(ErrorKind::input, "no variant named " + name);
}

double E2EResult::sweep_value(const std::string& parameter, int value) const {
  for (const auto& p : sweeps)
    if (p.parameter == parameter && p.value == value) return p.report.cls_acc;
  fail(ErrorKind::input, "no sweep point " + parameter + "=" + std::to_string(value));
}

double median(std::vector<double> v) {
  if (v.empty()) fail(ErrorKind::input, "median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

namespace {

struct Views {
  DIFMatrix train, val, test;
};

}  // namespace

E2EResult run_e2e(const PipelineConfig& cfg_in) {
  const auto start = std::chrono::steady_clock::now();
  const PipelineConfig cfg = cfg_in.resolved();
  run_stage("config", [&] { cfg.validate(); });
  E2EResult out;
  out.seed = cfg.seed;

  const Scenario sc = run_stage("generate", [&] { return generate_scenario(cfg.scenario); });
  const ProbeResult probe = run_stage("probe", [&] { return run_probe(cfg, sc); });
  out.selection = probe.selection;
  const auto split = split_validation(sc.train_queries, cfg.eval.validation_fraction, derive_seed(cfg.seed, "validation"));
  const Retriever retriever = run_stage("index", [&] { return build_retriever(sc, cfg); });
  const auto& test = sc.test_queries;

  const auto pooling = cfg.attribution.pooling;
  auto views = [&](const NeuronSelection& sel) {
    return run_stage("dif", [&] {
      return Views{dif_matrix(probe.model, sel, split.train, pooling), dif_matrix(probe.model, sel, split.validation, pooling),
                   dif_matrix(probe.model, sel, test, pooling)};
    });
  };
  const Views shapley = views(probe.selection);
  const Views random = views(random_baseline_selection(cfg));
  const Views full = views(full_baseline_selection(cfg, probe.selection));

  auto train = [&](const Views& v, const AlignerConfig& a) {
    return run_stage("train", [&] { return aligned_space(train_aligner(v.train.z, v.train.labels, a)); });
  };
  auto eval = [&](const RoutingSpace& space, const Views& v, const RoutingConfig& rc) {
    return run_stage("eval", [&] {
      return evaluate_space(space, rc, cfg.eval, v.val.z, split.validation, v.test.z, test, retriever);
    });
  };
  auto add = [](std::vector<VariantRow>& rows, const std::string& name, const RunOutcome& o) {
    rows.push_back({name, o.report, o.tau});
  };

  const RoutingSpace dfams = train(shapley, cfg.aligner);
  const RunOutcome main = eval(dfams, shapley, cfg.routing);
  out.decisions = main.decisions;
  add(out.variants, "DFAMS", main);
  add(out.variants, "random-selection", eval(train(random, cfg.aligner), random, cfg.routing));
  add(out.variants, "full-layer", eval(train(full, cfg.aligner), full, cfg.routing));
  AlignerConfig no_inter = cfg.aligner;
  no_inter.lambda = 0.0;
  no_inter.epochs_cl_only = 0;
  add(out.variants, "w/o inter-KB", eval(train(shapley, no_inter), shapley, cfg.routing));
  AlignerConfig no_intra = cfg.aligner;
  no_intra.lambda = 1.0;
  add(out.variants, "w/o intra-KB", eval(train(shapley, no_intra), shapley, cfg.routing));
  RoutingConfig no_trigger = cfg.routing;
  no_trigger.adaptive_triggering = false;
  add(out.variants, "w/o triggering", eval(dfams, shapley, no_trigger));
  RoutingConfig single = cfg.routing;
  single.top_n = 1;
  add(out.variants, "w/o semantic routing", eval(dfams, shapley, single));

  add(out.baselines, "frozen DFAMS", eval(frozen_space(shapley.train, cfg.aligner), shapley, cfg.routing));
  add(out.baselines, "frozen random", eval(frozen_space(random.train, cfg.aligner), random, cfg.routing));
  add(out.baselines, "merged index", run_stage("eval", [&] { return evaluate_merged(test, retriever, cfg.eval.k); }));
  add(out.baselines, "per-KB threshold", run_stage("eval", [&] {
        return evaluate_threshold_classifier(dfams, shapley.train.z, shapley.train.labels, shapley.test.z, test,
                                             retriever, cfg);
      }));

  if (cfg.eval.sweeps) {
    for (int m : cfg.eval.sweep_prototypes) {
      if (m == cfg.aligner.prototypes_per_class) {
        out.sweeps.push_back({"prototypes_per_class", m, main.report});
        continue;
      }
      AlignerConfig a = cfg.aligner;
      a.prototypes_per_class = m;
      out.sweeps.push_back({"prototypes_per_class", m, eval(train(shapley, a), shapley, cfg.routing).report});
    }
    for (int n : cfg.eval.sweep_top_n) {
      RoutingConfig rc = cfg.routing;
      rc.top_n = n;
      out.sweeps.push_back({"top_n", n, n == cfg.routing.top_n ? main.report : eval(dfams, shapley, rc).report});
    }
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

namespace {

nlohmann::json metrics_json(const EvalReport& r) {
  return {{"cls_acc", r.cls_acc},
          {"cls_acc_coverage", r.cls_acc_coverage},
          {"recall_at_k", r.recall_at_k},
          {"k", r.k},
          {"abstention_acc", r.abstention_acc},
          {"queries", r.total_queries},
          {"recall_queries", r.recall_queries}};
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

}  // namespace

std::string metric_records(const E2EResult& r) {
  std::string out;
  out += nlohmann::json{{"record", "selection"},
                        {"seed", r.seed},
                        {"fingerprint", hex64(r.selection.fingerprint())},
                        {"layers", r.selection.selected_layers()},
                        {"dimension", r.selection.dimension()}}
             .dump() +
         "\n";
  for (const auto* rows : {&r.variants, &r.baselines})
    for (const auto& v : *rows) {
      auto j = metrics_json(v.report);
      j["record"] = rows == &r.variants ? "variant" : "baseline";
      j["seed"] = r.seed;
      j["variant"] = v.variant;
      j["tau"] = v.tau;
      out += j.dump() + "\n";
    }
  for (const auto& p : r.sweeps) {
    auto j = metrics_json(p.report);
    j["record"] = "sweep";
    j["seed"] = r.seed;
    j["parameter"] = p.parameter;
    j["value"] = p.value;
    out += j.dump() + "\n";
  }
  return out;
}

std::string ablation_table(const std::vector<E2EResult>& runs) {
  if (runs.empty()) return {};
  std::string out = "median over " + std::to_string(runs.size()) + " seed(s), percentages\n";
  out += pad("variant", 24) + pad("Cls Acc", 10) + pad("Cls Acc*", 10) + pad("Recall@10", 11) + "Abstain Acc\n";
  auto line = [&](const std::string& name) {
    std::vector<double> a, c, rec, ab;
    for (const auto& r : runs) {
      const auto& rep = r.row(name).report;
      a.push_back(rep.cls_acc);
      c.push_back(rep.cls_acc_coverage);
      rec.push_back(rep.recall_at_k);
      ab.push_back(rep.abstention_acc);
    }
    out += pad(name, 24) + pad(pct(median(a)), 10) + pad(pct(median(c)), 10) + pad(pct(median(rec)), 11) +
           pct(median(ab)) + "\n";
  };
  for (const auto& v : runs.front().variants) line(v.variant);
  out += std::string(66, '-') + "\n";
  for (const auto& v : runs.front().baselines) line(v.variant);
  out += "Cls Acc* counts a single-source query correct when its KB is covered\n";
  return out;
}

std::string sweep_table(const std::vector<E2EResult>& runs) {
  if (runs.empty() || runs.front().sweeps.empty()) return {};
  std::string out = "parameter\tvalue\tmetric";
  for (const auto& r : runs) out += "\tseed_" + std::to_string(r.seed);
  out += "\tmedian\n";
  for (std::size_t i = 0; i < runs.front().sweeps.size(); ++i) {
    const auto& p = runs.front().sweeps[i];
    for (const char* metric : {"cls_acc", "recall_at_k"}) {
      out += p.parameter + "\t" + std::to_string(p.value) + "\t" + metric;
      std::vector<double> vals;
      for (const auto& r : runs) {
        const auto& rep = r.sweeps.at(i).report;
        vals.push_back(std::string(metric) == "cls_acc" ? rep.cls_acc : rep.recall_at_k);
        out += "\t" + pct(vals.back());
      }
      out += "\t" + pct(median(vals)) + "\n";
    }
  }
  return out;
}

}  // namespace dfams
