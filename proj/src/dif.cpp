#include "dfams/dif.hpp"

#include "dfams/container.hpp"

#include <nlohmann/json.hpp>

#include <sstream>

namespace dfams {

DIFVector extract_dif(const ModelState& model, const NeuronSelection& sel, const TokenSeq& tokens,
                      TokenPooling pooling) {
  sel.check_compatible(model.config());
  const auto trace = forward(model, tokens);
  DIFVector out;
  out.selection_fingerprint = sel.fingerprint();
  out.values.resize(static_cast<Eigen::Index>(sel.dimension()));
  Eigen::Index pos = 0;
  for (const auto& lg : sel.layers) {
    const RowMat& act = trace.ffn_act[lg.layer];
    for (const auto& g : lg.groups) {
      const auto block = act.middleCols(g.start, g.size());
      if (pooling == TokenPooling::mean) {
        out.values.segment(pos, g.size()) = block.colwise().mean().transpose();
      } else {
        out.values.segment(pos, g.size()) = block.colwise().maxCoeff().transpose();
      }
      pos += g.size();
    }
  }
  if (!all_finite({out.values.data(), static_cast<std::size_t>(out.values.size())}))
    fail(ErrorKind::numerical, "non-finite DIF vector");
  return out;
}

std::vector<DIFRecord> batch_extract(const ModelState& model, const NeuronSelection& sel,
                                     const std::vector<DIFInput>& dataset, TokenPooling pooling) {
  if (dataset.empty()) fail(ErrorKind::input, "DIF extraction dataset is empty");
  std::vector<DIFRecord> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset) {
    try {
      out.push_back({s.id, s.kb_label, extract_dif(model, sel, s.tokens, pooling)});
    } catch (const Error& e) {
      throw Error(e.kind(), std::string(e.what()) + " (sample " + s.id + ")");
    }
  }
  return out;
}

std::string format_dif_dataset(const DIFDataset& ds) {
  std::ostringstream out;
  out << nlohmann::json{{"kind", "dif_dataset"},
                        {"selection_fingerprint", hex64(ds.selection_fingerprint)},
                        {"dimension", ds.dimension},
                        {"count", ds.records.size()}}
             .dump()
      << '\n';
  for (const auto& r : ds.records) {
    if (static_cast<std::size_t>(r.dif.values.size()) != ds.dimension)
      fail(ErrorKind::compatibility, "record " + r.id + " has the wrong DIF dimension");
    std::vector<double> v(r.dif.values.data(), r.dif.values.data() + r.dif.values.size());
    out << nlohmann::json{{"id", r.id}, {"kb_label", r.kb_label}, {"vector", v}}.dump() << '\n';
  }
  return out.str();
}

DIFDataset parse_dif_dataset(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  DIFDataset ds;
  try {
    if (!std::getline(in, line)) fail(ErrorKind::io, "empty DIF dataset");
    const auto header = nlohmann::json::parse(line);
    if (header.at("kind") != "dif_dataset") fail(ErrorKind::io, "not a DIF dataset");
    ds.selection_fingerprint = std::stoull(header.at("selection_fingerprint").get<std::string>(), nullptr, 16);
    ds.dimension = header.at("dimension");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      DIFRecord r;
      r.id = j.at("id");
      r.kb_label = j.at("kb_label");
      const auto v = j.at("vector").get<std::vector<double>>();
      if (v.size() != ds.dimension) fail(ErrorKind::compatibility, "record " + r.id + " has the wrong DIF dimension");
      r.dif.values = ConstVecMap(v.data(), static_cast<Eigen::Index>(v.size()));
      r.dif.selection_fingerprint = ds.selection_fingerprint;
      ds.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, std::string("malformed DIF dataset: ") + e.what());
  }
  return ds;
}

void save_dif_dataset(const DIFDataset& ds, const std::filesystem::path& path) {
  write_file(path, format_dif_dataset(ds));
}

DIFDataset load_dif_dataset(const std::filesystem::path& path) { return parse_dif_dataset(read_file(path)); }

}  // namespace dfams
