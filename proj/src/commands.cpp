#include "dfams/container.hpp"
#include "dfams/pipeline.hpp"
#include "dfams/rng.hpp"

#include <sstream>

namespace dfams {

namespace fs = std::filesystem;

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create output directory " + dir.string() + ": " + ec.message());
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::exists(p)) fail(ErrorKind::io, std::string(what) + " not found: " + p.string());
}

fs::path emit(CommandOutput& out, const fs::path& path, const std::string& content) {
  write_file(path, content);
  out.written.push_back(path);
  return path;
}

std::string lines(const std::vector<nlohmann::json>& records) {
  std::string s;
  for (const auto& r : records) s += r.dump() + "\n";
  return s;
}

Scenario read_scenario(const fs::path& p) {
  require_file(p, "scenario file");
  return load_scenario(p);
}

}  // namespace

CommandOutput cmd_generate(const PipelineConfig& cfg_in, const fs::path& out_path) {
  const PipelineConfig cfg = cfg_in.resolved();
  run_stage("config", [&] { cfg.validate(); });
  const Scenario sc = run_stage("generate", [&] { return generate_scenario(cfg.scenario); });
  if (out_path.has_parent_path()) ensure_dir(out_path.parent_path());
  CommandOutput out;
  save_scenario(sc, out_path);
  out.written.push_back(out_path);

  int others = 0, multi = 0;
  for (const auto& q : sc.test_queries) {
    others += q.is_others();
    multi += q.gold_kbs.size() > 1;
  }
  const nlohmann::json summary{{"kbs", sc.kbs.size()},
                               {"documents", sc.document_count()},
                               {"train_queries", sc.train_queries.size()},
                               {"test_queries", sc.test_queries.size()},
                               {"test_others", others},
                               {"test_multi_source", multi}};
  out.summary = summary.dump();
  return out;
}

CommandOutput cmd_probe(const PipelineConfig& cfg_in, const fs::path& scenario, const std::optional<fs::path>& model_ckpt,
                        const fs::path& out_dir) {
  const PipelineConfig cfg = cfg_in.resolved();
  run_stage("config", [&] { cfg.validate(); });
  const Scenario sc = run_stage("load", [&] { return read_scenario(scenario); });
  std::optional<ModelState> ckpt;
  if (model_ckpt) ckpt = run_stage("load", [&] {
      require_file(*model_ckpt, "model checkpoint");
      return load_model(*model_ckpt);
    });
  const ProbeResult res = run_stage("probe", [&] { return run_probe(cfg, sc, ckpt ? &*ckpt : nullptr); });

  ensure_dir(out_dir);
  CommandOutput out;
  if (!ckpt) {
    save_model(res.model, out_dir / "model.bin");
    out.written.push_back(out_dir / "model.bin");
  }
  save_shapley_map(res.map, out_dir / "shapley.bin");
  out.written.push_back(out_dir / "shapley.bin");
  save_selection(res.selection, out_dir / "selection.json");
  out.written.push_back(out_dir / "selection.json");
  emit(out, out_dir / "heatmap.tsv", heatmap_table(res.map, cfg.attribution.group_size));

  nlohmann::json report{{"probe_samples", res.probe.size()},
                        {"shapley_samples", res.map.sample_count},
                        {"layers", res.selection.selected_layers()},
                        {"dimension", res.selection.dimension()},
                        {"fingerprint", hex64(res.selection.fingerprint())},
                        {"model_checksum", hex64(res.model.checksum())},
                        {"epoch_loss", res.train_report.epoch_loss},
                        {"probe_accuracy", res.train_report.final_accuracy}};
  emit(out, out_dir / "probe_report.json", report.dump(2) + "\n");
  out.summary = report.dump();
  return out;
}

CommandOutput cmd_train(const PipelineConfig& cfg_in, const fs::path& scenario, const fs::path& selection,
                        const fs::path& model_ckpt, const fs::path& out_dir) {
  const PipelineConfig cfg = cfg_in.resolved();
  run_stage("config", [&] { cfg.validate(); });
  const Scenario sc = run_stage("load", [&] { return read_scenario(scenario); });
  const ModelState model = run_stage("load", [&] {
    require_file(model_ckpt, "model checkpoint");
    return load_model(model_ckpt);
  });
  const NeuronSelection sel = run_stage("load", [&] {
    require_file(selection, "selection file");
    return load_selection(selection);
  });
  run_stage("train", [&] { sel.check_compatible(model.config()); });

  const auto split = split_validation(sc.train_queries, cfg.eval.validation_fraction, derive_seed(cfg.seed, "validation"));
  const DIFMatrix m = run_stage("dif", [&] { return dif_matrix(model, sel, split.train, cfg.attribution.pooling); });
  DIFDataset ds;
  ds.selection_fingerprint = sel.fingerprint();
  ds.dimension = sel.dimension();
  for (std::size_t i = 0; i < split.train.size(); ++i)
    ds.records.push_back({split.train[i].query_id, m.labels[i], {m.z.row(static_cast<Eigen::Index>(i)).transpose(), ds.selection_fingerprint}});

  const AlignerTrainResult trained = run_stage("train", [&] { return train_aligner(m.z, m.labels, cfg.aligner); });
  ensure_dir(out_dir);
  CommandOutput out;
  save_dif_dataset(ds, out_dir / "dif_train.jsonl");
  out.written.push_back(out_dir / "dif_train.jsonl");
  save_aligner(trained.aligner, trained.book, sel.fingerprint(), out_dir / "aligner.bin");
  out.written.push_back(out_dir / "aligner.bin");
  emit(out, out_dir / "train_log.jsonl", format_train_log(trained.report));

  const auto& last = trained.report.epochs.back();
  out.summary = nlohmann::json{{"samples", m.z.rows()},
                               {"dimension", m.z.cols()},
                               {"epochs", trained.report.epochs.size()},
                               {"final_l_total", last.l_total},
                               {"final_inertia", trained.report.final_inertia},
                               {"prototypes", trained.book.size()}}
                    .dump();
  return out;
}

CommandOutput cmd_eval(const PipelineConfig& cfg_in, const fs::path& scenario, const fs::path& aligner_ckpt,
                       const fs::path& model_ckpt, const fs::path& selection, const fs::path& out_dir) {
  const PipelineConfig cfg = cfg_in.resolved();
  run_stage("config", [&] { cfg.validate(); });
  const Scenario sc = run_stage("load", [&] { return read_scenario(scenario); });
  const ModelState model = run_stage("load", [&] {
    require_file(model_ckpt, "model checkpoint");
    return load_model(model_ckpt);
  });
  const NeuronSelection sel = run_stage("load", [&] {
    require_file(selection, "selection file");
    return load_selection(selection);
  });
  const AlignerCheckpoint ckpt = run_stage("load", [&] {
    require_file(aligner_ckpt, "aligner checkpoint");
    return load_aligner(aligner_ckpt);
  });
  run_stage("eval", [&] {
    sel.check_compatible(model.config());
    if (ckpt.selection_fingerprint != sel.fingerprint())
      fail(ErrorKind::compatibility, "aligner was trained on selection " + hex64(ckpt.selection_fingerprint) +
                                         ", got " + hex64(sel.fingerprint()));
    if (static_cast<std::size_t>(ckpt.aligner.config().input_dim) != sel.dimension())
      fail(ErrorKind::compatibility, "aligner input dimension does not match the selection");
  });

  const auto split = split_validation(sc.train_queries, cfg.eval.validation_fraction, derive_seed(cfg.seed, "validation"));
  const auto pooling = cfg.attribution.pooling;
  const DIFMatrix train = run_stage("dif", [&] { return dif_matrix(model, sel, split.train, pooling); });
  const DIFMatrix val = run_stage("dif", [&] { return dif_matrix(model, sel, split.validation, pooling); });
  const DIFMatrix test = run_stage("dif", [&] { return dif_matrix(model, sel, sc.test_queries, pooling); });
  const Retriever retriever = run_stage("index", [&] { return build_retriever(sc, cfg); });

  RoutingSpace space;
  space.aligner = ckpt.aligner;
  space.book = ckpt.book;
  std::vector<std::pair<std::string, RunOutcome>> rows;
  run_stage("eval", [&] {
    rows.emplace_back("DFAMS", evaluate_space(space, cfg.routing, cfg.eval, val.z, split.validation, test.z,
                                              sc.test_queries, retriever));
    rows.emplace_back("frozen DFAMS", evaluate_space(frozen_space(train, cfg.aligner), cfg.routing, cfg.eval, val.z,
                                                     split.validation, test.z, sc.test_queries, retriever));
    rows.emplace_back("merged index", evaluate_merged(sc.test_queries, retriever, cfg.eval.k));
    rows.emplace_back("per-KB threshold", evaluate_threshold_classifier(space, train.z, train.labels, test.z,
                                                                        sc.test_queries, retriever, cfg));
  });

  ensure_dir(out_dir);
  CommandOutput out;
  std::string records, table;
  for (const auto& [name, o] : rows) {
    auto j = o.report.to_json();
    j["record"] = "report";
    j["method"] = name;
    j["tau"] = o.tau;
    records += j.dump() + "\n";
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-18s cls_acc %6.2f  coverage %6.2f  recall@%d %6.2f  abstain %6.2f  (tau %.4f)\n",
                  name.c_str(), 100 * o.report.cls_acc, 100 * o.report.cls_acc_coverage, o.report.k,
                  100 * o.report.recall_at_k, 100 * o.report.abstention_acc, o.tau);
    table += buf;
  }
  emit(out, out_dir / "report.jsonl", records);
  emit(out, out_dir / "report.txt", table);
  emit(out, out_dir / "decisions.jsonl", lines(rows.front().second.decisions));
  out.summary = table;
  return out;
}

CommandOutput cmd_e2e(const PipelineConfig& cfg, int seeds, const fs::path& out_dir) {
  if (seeds < 1) fail(ErrorKind::config, "seeds must be at least 1");
  run_stage("config", [&] { cfg.validate(); });
  std::vector<E2EResult> runs;
  std::string records;
  for (int i = 0; i < seeds; ++i) {
    PipelineConfig c = cfg;
    c.seed = cfg.seed + static_cast<std::uint64_t>(i);
    runs.push_back(run_e2e(c));
    records += metric_records(runs.back());
  }
  ensure_dir(out_dir);
  CommandOutput out;
  emit(out, out_dir / "config.ini", format_config(cfg));
  emit(out, out_dir / "metrics.jsonl", records);
  const std::string table = ablation_table(runs);
  emit(out, out_dir / "ablation.txt", table);
  if (const auto sweep = sweep_table(runs); !sweep.empty()) emit(out, out_dir / "sweep.tsv", sweep);
  emit(out, out_dir / "decisions.jsonl", lines(runs.front().decisions));
  std::ostringstream timing;
  for (const auto& r : runs) timing << "seed " << r.seed << ": " << r.seconds << " s\n";
  out.summary = table + timing.str();
  return out;
}

}  // namespace dfams
