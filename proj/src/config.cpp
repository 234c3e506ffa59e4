#include "dfams/container.hpp"
#include "dfams/pipeline.hpp"
#include "dfams/rng.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <functional>
#include <sstream>

namespace dfams {

namespace {

[[noreturn]] void bad_value(const std::string& name, const std::string& raw, const char* what) {
  fail(ErrorKind::config, name + ": cannot parse '" + raw + "' as " + what);
}

template <typename T>
T parse_number(const std::string& name, const std::string& raw, const char* what) {
  T v{};
  const char* end = raw.data() + raw.size();
  auto [ptr, ec] = std::from_chars(raw.data(), end, v);
  if (ec != std::errc() || ptr != end) bad_value(name, raw, what);
  return v;
}

std::string text(int v) { return std::to_string(v); }
std::string text(std::uint64_t v) { return std::to_string(v); }
std::string text(bool v) { return v ? "true" : "false"; }
std::string text(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, ptr};
}
std::string text(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

void read(const std::string& n, const std::string& raw, int& v) { v = parse_number<int>(n, raw, "an integer"); }
void read(const std::string& n, const std::string& raw, std::uint64_t& v) {
  v = parse_number<std::uint64_t>(n, raw, "an unsigned integer");
}
void read(const std::string& n, const std::string& raw, double& v) { v = parse_number<double>(n, raw, "a real number"); }
void read(const std::string& n, const std::string& raw, bool& v) {
  if (raw == "true" || raw == "1")
    v = true;
  else if (raw == "false" || raw == "0")
    v = false;
  else
    bad_value(n, raw, "a boolean");
}
void read(const std::string& n, const std::string& raw, std::vector<int>& v) {
  v.clear();
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto a = item.find_first_not_of(' '), b = item.find_last_not_of(' ');
    if (a == std::string::npos) bad_value(n, raw, "a comma-separated integer list");
    v.push_back(parse_number<int>(n, item.substr(a, b - a + 1), "a comma-separated integer list"));
  }
  if (v.empty()) bad_value(n, raw, "a non-empty integer list");
}

template <typename E>
struct EnumNames {
  std::vector<std::pair<E, const char*>> names;
};

const EnumNames<CurvatureMethod> kCurvature{{{CurvatureMethod::none, "none"},
                                             {CurvatureMethod::gauss_newton, "gauss_newton"},
                                             {CurvatureMethod::finite_difference, "finite_difference"}}};
const EnumNames<HessianScope> kScope{{{HessianScope::averaged, "averaged"}, {HessianScope::per_sample, "per_sample"}}};
const EnumNames<TokenPooling> kPooling{{{TokenPooling::mean, "mean"}, {TokenPooling::max, "max"}}};
const EnumNames<PositiveScope> kPositive{{{PositiveScope::own_class, "own_class"}, {PositiveScope::any, "any"}}};

template <typename E>
const EnumNames<E>& names_of();
template <>
const EnumNames<CurvatureMethod>& names_of() { return kCurvature; }
template <>
const EnumNames<HessianScope>& names_of() { return kScope; }
template <>
const EnumNames<TokenPooling>& names_of() { return kPooling; }
template <>
const EnumNames<PositiveScope>& names_of() { return kPositive; }

template <typename E>
  requires std::is_enum_v<E>
std::string text(E v) {
  for (const auto& [e, n] : names_of<E>().names)
    if (e == v) return n;
  return "?";
}

template <typename E>
  requires std::is_enum_v<E>
void read(const std::string& n, const std::string& raw, E& v) {
  std::string options;
  for (const auto& [e, name] : names_of<E>().names) {
    if (raw == name) {
      v = e;
      return;
    }
    options += (options.empty() ? "" : "|") + std::string(name);
  }
  fail(ErrorKind::config, n + ": expected one of " + options + ", got '" + raw + "'");
}

struct Field {
  std::string section;
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <typename T>
Field bind(const char* section, const char* key, T& ref) {
  const std::string name = std::string(section) + "." + key;
  return {section, key, [&ref] { return text(ref); }, [&ref, name](const std::string& raw) { read(name, raw, ref); }};
}

#define FIELD(section, obj, member) out.push_back(bind(section, #member, obj.member))

// Fields derived from other sections (model.vocab_size, model.num_classes,
// aligner.input_dim, per-stage seeds) are not configurable.
std::vector<Field> fields(PipelineConfig& c) {
  std::vector<Field> out;
  FIELD("pipeline", c, seed);

  auto& s = c.scenario;
  FIELD("scenario", s, num_kbs);
  FIELD("scenario", s, subdomains_per_kb);
  FIELD("scenario", s, docs_per_subdomain);
  FIELD("scenario", s, vocab_overlap);
  FIELD("scenario", s, train_size);
  FIELD("scenario", s, test_size);
  FIELD("scenario", s, others_fraction);
  FIELD("scenario", s, multi_source_fraction);
  FIELD("scenario", s, vocab_size);
  FIELD("scenario", s, core_tokens);
  FIELD("scenario", s, background_tokens);
  FIELD("scenario", s, doc_keywords);
  FIELD("scenario", s, doc_length);
  FIELD("scenario", s, query_length);
  FIELD("scenario", s, doc_focus);
  FIELD("scenario", s, query_doc_focus);
  FIELD("scenario", s, query_background);
  FIELD("scenario", s, others_shared);

  auto& m = c.model;
  FIELD("model", m, num_layers);
  FIELD("model", m, model_dim);
  FIELD("model", m, ffn_dim);
  FIELD("model", m, num_heads);
  FIELD("model", m, max_seq_len);

  auto& a = c.attribution;
  FIELD("attribution", a, t_layers);
  FIELD("attribution", a, group_size);
  FIELD("attribution", a, top_groups);
  FIELD("attribution", a, omega_self);
  FIELD("attribution", a, omega_pair);
  FIELD("attribution", a, pair_scope);
  FIELD("attribution", a, curvature);
  FIELD("attribution", a, hessian_scope);
  FIELD("attribution", a, layer_mass_abs);
  FIELD("attribution", a, pooling);
  FIELD("attribution", a, probe_size);
  FIELD("attribution", a, shapley_samples);
  FIELD("attribution", a, probe_epochs);
  FIELD("attribution", a, probe_lr);
  FIELD("attribution", a, probe_batch_size);

  auto& al = c.aligner;
  FIELD("aligner", al, hidden_dim);
  FIELD("aligner", al, output_dim);
  FIELD("aligner", al, dropout_rate);
  FIELD("aligner", al, lr);
  FIELD("aligner", al, weight_decay);
  FIELD("aligner", al, batch_size);
  FIELD("aligner", al, tau_cl);
  FIELD("aligner", al, tau_pcl);
  FIELD("aligner", al, lambda);
  FIELD("aligner", al, epochs_total);
  FIELD("aligner", al, epochs_cl_only);
  FIELD("aligner", al, prototypes_per_class);
  FIELD("aligner", al, include_positive_in_denominator);
  FIELD("aligner", al, trainable_prototypes);
  FIELD("aligner", al, positive_scope);
  FIELD("aligner", al, pcl_positives);
  FIELD("aligner", al, kmeans_restarts);

  auto& r = c.routing;
  FIELD("routing", r, tau);
  FIELD("routing", r, top_n);
  FIELD("routing", r, total_slots);
  FIELD("routing", r, redistribute_remainder);
  FIELD("routing", r, adaptive_triggering);

  auto& e = c.eval;
  FIELD("eval", e, validation_fraction);
  FIELD("eval", e, calibrate_tau);
  FIELD("eval", e, k);
  FIELD("eval", e, embedding_dim);
  FIELD("eval", e, threshold_lr);
  FIELD("eval", e, threshold_iterations);
  FIELD("eval", e, sweeps);
  FIELD("eval", e, sweep_prototypes);
  FIELD("eval", e, sweep_top_n);
  return out;
}

#undef FIELD

}  // namespace

void AttributionConfig::validate(const ModelConfig& model) const {
  auto need = [](bool ok, const std::string& field, const std::string& what) {
    if (!ok) fail(ErrorKind::config, "attribution." + field + " " + what);
  };
  need(t_layers >= 1, "t_layers", "must be at least 1");
  need(t_layers <= model.num_layers, "t_layers", "exceeds model.num_layers (" + std::to_string(model.num_layers) + ")");
  need(group_size >= 1 && group_size <= model.ffn_dim, "group_size", "must lie in [1, model.ffn_dim]");
  const int windows = (model.ffn_dim + group_size - 1) / std::max(group_size, 1);
  need(top_groups >= 1 && top_groups <= windows, "top_groups",
       "must lie in [1, " + std::to_string(windows) + "] for this group_size");
  need(std::isfinite(omega_self) && std::isfinite(omega_pair), "omega_self", "and omega_pair must be finite");
  need(pair_scope >= 0, "pair_scope", "must be non-negative");
  need(probe_size >= 2, "probe_size", "must be at least 2");
  need(shapley_samples >= 1 && shapley_samples <= probe_size, "shapley_samples", "must lie in [1, probe_size]");
  need(probe_epochs >= 1, "probe_epochs", "must be at least 1");
  need(probe_lr > 0.0, "probe_lr", "must be positive");
  need(probe_batch_size >= 1, "probe_batch_size", "must be at least 1");
}

void EvalConfig::validate() const {
  auto need = [](bool ok, const std::string& field, const std::string& what) {
    if (!ok) fail(ErrorKind::config, "eval." + field + " " + what);
  };
  need(validation_fraction > 0.0 && validation_fraction < 1.0, "validation_fraction", "must lie in (0, 1)");
  need(k >= 1, "k", "must be at least 1");
  need(embedding_dim >= 1, "embedding_dim", "must be positive");
  need(threshold_lr > 0.0, "threshold_lr", "must be positive");
  need(threshold_iterations >= 1, "threshold_iterations", "must be at least 1");
  for (int m : sweep_prototypes) need(m >= 1, "sweep_prototypes", "values must be at least 1");
  for (int n : sweep_top_n) need(n >= 1, "sweep_top_n", "values must be at least 1");
}

PipelineConfig::PipelineConfig() {
  // Desk-scale aligner; see README for the deviations from the full-scale values.
  aligner.hidden_dim = 128;
  aligner.output_dim = 32;
  aligner.lr = 2e-3;
  aligner.epochs_total = 12;
  aligner.epochs_cl_only = 8;
}

PipelineConfig PipelineConfig::resolved() const {
  PipelineConfig c = *this;
  c.scenario.seed = derive_seed(seed, "scenario");
  c.model.seed = derive_seed(seed, "model");
  c.aligner.seed = derive_seed(seed, "aligner");
  c.model.vocab_size = scenario.vocab_size;
  c.model.num_classes = scenario.num_kbs + 1;
  c.model.max_seq_len = std::max(model.max_seq_len, scenario.query_length);
  return c;
}

void PipelineConfig::validate() const {
  const PipelineConfig c = resolved();
  c.scenario.validate();
  c.model.validate();
  c.attribution.validate(c.model);
  AlignerConfig a = c.aligner;
  a.input_dim = std::max(a.input_dim, 1);
  a.validate();
  c.routing.validate();
  c.eval.validate();
  const int prototypes = c.aligner.prototypes_per_class * c.scenario.num_kbs;
  if (c.routing.top_n > prototypes)
    fail(ErrorKind::config, "routing.top_n exceeds the number of prototypes (" + std::to_string(prototypes) + ")");
  for (int n : c.eval.sweep_top_n)
    if (n > prototypes) fail(ErrorKind::config, "eval.sweep_top_n value " + std::to_string(n) + " exceeds the prototype count");
  for (int m : c.eval.sweep_prototypes)
    if (m * c.scenario.num_kbs < c.routing.top_n)
      fail(ErrorKind::config, "eval.sweep_prototypes value " + std::to_string(m) + " leaves fewer prototypes than routing.top_n");
}

PipelineConfig parse_config(const std::string& content) {
  boost::property_tree::ptree tree;
  std::istringstream in(content);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    fail(ErrorKind::config, std::string("config: ") + e.what());
  }
  PipelineConfig cfg;
  auto table = fields(cfg);
  for (const auto& [section, body] : tree) {
    if (body.empty()) fail(ErrorKind::config, "config key '" + section + "' must appear inside a section");
    for (const auto& [key, value] : body) {
      auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.section == section && f.key == key; });
      if (it == table.end()) fail(ErrorKind::config, "unknown config key " + section + "." + key);
      it->set(value.get_value<std::string>());
    }
  }
  return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorKind::io, "config file not found: " + path.string());
  return parse_config(read_file(path));
}

std::string format_config(const PipelineConfig& cfg_in) {
  PipelineConfig cfg = cfg_in;
  std::string out, section;
  for (const auto& f : fields(cfg)) {
    if (f.section != section) {
      out += (out.empty() ? "[" : "\n[") + f.section + "]\n";
      section = f.section;
    }
    out += f.key + " = " + f.get() + "\n";
  }
  return out;
}

}  // namespace dfams
