#include "dfams/attribution.hpp"

#include "dfams/container.hpp"
#include "dfams/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dfams {

namespace {

// Position of W1(row, neuron) / b1(neuron) inside one layer's block of the
// FFN parameter list.
struct FfnBlock {
  int d = 0;
  int f = 0;
  std::size_t per_layer() const { return static_cast<std::size_t>(d) * f + f; }
  std::size_t w1(int layer, int row, int neuron) const {
    return layer * per_layer() + static_cast<std::size_t>(row) * f + neuron;
  }
  std::size_t b1(int layer, int neuron) const {
    return layer * per_layer() + static_cast<std::size_t>(d) * f + neuron;
  }
};

FfnBlock block_of(const ModelConfig& c) { return {c.model_dim, c.ffn_dim}; }

template <typename Fn>
void for_each_window(int ffn_dim, int width, Fn&& fn) {
  for (int start = 0; start < ffn_dim; start += width) fn(start, std::min(ffn_dim, start + width));
}

template <typename Fn>
void for_each_window_param(const FfnBlock& b, int layer, int start, int end, Fn&& fn) {
  for (int r = 0; r < b.d; ++r)
    for (int j = start; j < end; ++j) fn(b.w1(layer, r, j));
  for (int j = start; j < end; ++j) fn(b.b1(layer, j));
}

std::vector<LabeledSeq> to_labeled(const std::vector<ProbeSample>& probe) {
  std::vector<LabeledSeq> out;
  out.reserve(probe.size());
  for (const auto& p : probe) out.push_back({p.tokens, p.kb_label});
  return out;
}

void add_gauss_newton(const ModelState& model, const LabeledSeq& s, const ShapleyOptions& opts,
                      const std::vector<double>& theta, double weight, CurvatureTerms& out) {
  const auto& cfg = model.config();
  const FfnBlock b = block_of(cfg);
  const auto lj = logit_jacobian(model, s.tokens);
  const Mat A = Mat(lj.probs.asDiagonal()) - lj.probs * lj.probs.transpose();
  for (int l = 0; l < cfg.num_layers; ++l) {
    const auto offset = static_cast<Eigen::Index>(model.layout().slot(layer_tensor(l, "w1")).offset);
    const auto n = static_cast<Eigen::Index>(b.per_layer());
    const Mat J = lj.jac.middleCols(offset, n);
    const Mat AJ = A * J;
    const Eigen::RowVectorXd diag = (J.array() * AJ.array()).colwise().sum();
    const std::size_t base = l * b.per_layer();
    for (Eigen::Index i = 0; i < n; ++i) out.diag[base + i] += weight * diag(i);
    if (opts.pair_scope <= 0) continue;
    for_each_window(cfg.ffn_dim, opts.pair_scope, [&](int start, int end) {
      Vec v = Vec::Zero(J.rows());
      for_each_window_param(b, l, start, end, [&](std::size_t id) {
        v += J.col(static_cast<Eigen::Index>(id - base)) * theta[id];
      });
      for_each_window_param(b, l, start, end, [&](std::size_t id) {
        const auto c = static_cast<Eigen::Index>(id - base);
        out.cross[id] += weight * (AJ.col(c).dot(v) - diag(c) * theta[id]);
      });
    });
  }
}

CurvatureTerms finite_difference_terms(const ModelState& model, const std::vector<LabeledSeq>& samples,
                                       const ShapleyOptions& opts, const std::vector<std::size_t>& ids,
                                       const std::vector<double>& theta) {
  const auto& cfg = model.config();
  const FfnBlock b = block_of(cfg);
  CurvatureTerms out{std::vector<double>(ids.size(), 0.0), std::vector<double>(ids.size(), 0.0)};
  ModelState work = model;
  auto mean_grad = [&]() {
    std::vector<double> acc(work.params().size(), 0.0);
    for (const auto& s : samples) {
      const auto r = loss_and_grad(work, s.tokens, s.label);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += r.grad[i];
    }
    for (auto& v : acc) v /= static_cast<double>(samples.size());
    return acc;
  };
  const double h = opts.fd_step;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = ids[i];
    const double orig = work.params()[id];
    work.params()[id] = orig + h;
    const auto gp = mean_grad();
    work.params()[id] = orig - h;
    const auto gm = mean_grad();
    work.params()[id] = orig;
    out.diag[i] = (gp[id] - gm[id]) / (2.0 * h);
  }
  if (opts.pair_scope <= 0) return out;
  // Hessian-vector products along theta restricted to each window.
  for (int l = 0; l < cfg.num_layers; ++l) {
    for_each_window(cfg.ffn_dim, opts.pair_scope, [&](int start, int end) {
      std::vector<std::size_t> local;
      for_each_window_param(b, l, start, end, [&](std::size_t i) { local.push_back(i); });
      for (auto i : local) work.params()[ids[i]] = model.params()[ids[i]] + h * theta[i];
      const auto gp = mean_grad();
      for (auto i : local) work.params()[ids[i]] = model.params()[ids[i]] - h * theta[i];
      const auto gm = mean_grad();
      for (auto i : local) work.params()[ids[i]] = model.params()[ids[i]];
      for (auto i : local) out.cross[i] = (gp[ids[i]] - gm[ids[i]]) / (2.0 * h) - out.diag[i] * theta[i];
    });
  }
  return out;
}

}  // namespace

std::vector<double> parameter_shapley(std::span<const double> theta, std::span<const double> grad,
                                      std::span<const double> hdiag, std::span<const double> cross,
                                      double omega_self, double omega_pair) {
  std::vector<double> phi(theta.size());
  for (std::size_t j = 0; j < theta.size(); ++j) {
    const double t = theta[j];
    phi[j] = -grad[j] * t - 0.5 * omega_self * t * t * hdiag[j] - 0.5 * t * omega_pair * cross[j];
  }
  return phi;
}

std::vector<std::size_t> ffn_parameter_ids(const ModelState& model) {
  const auto& cfg = model.config();
  std::vector<std::size_t> ids;
  ids.reserve(cfg.num_layers * block_of(cfg).per_layer());
  for (int l = 0; l < cfg.num_layers; ++l) {
    const auto& w1 = model.layout().slot(layer_tensor(l, "w1"));
    const auto& b1 = model.layout().slot(layer_tensor(l, "b1"));
    for (std::size_t i = 0; i < w1.size(); ++i) ids.push_back(w1.offset + i);
    for (std::size_t i = 0; i < b1.size(); ++i) ids.push_back(b1.offset + i);
  }
  return ids;
}

CurvatureTerms curvature_terms(const ModelState& model, const std::vector<LabeledSeq>& samples,
                               const ShapleyOptions& opts) {
  const auto ids = ffn_parameter_ids(model);
  if (opts.method == CurvatureMethod::none || samples.empty())
    return {std::vector<double>(ids.size(), 0.0), std::vector<double>(ids.size(), 0.0)};
  std::vector<double> theta(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) theta[i] = model.params()[ids[i]];
  if (opts.method == CurvatureMethod::finite_difference) return finite_difference_terms(model, samples, opts, ids, theta);

  CurvatureTerms out{std::vector<double>(ids.size(), 0.0), std::vector<double>(ids.size(), 0.0)};
  const double w = 1.0 / static_cast<double>(samples.size());
  for (const auto& s : samples) add_gauss_newton(model, s, opts, theta, w, out);
  return out;
}

RowMat shapley_sample_map(const ModelState& model, const LabeledSeq& sample, const CurvatureTerms& curvature,
                          const ShapleyOptions& opts) {
  const auto& cfg = model.config();
  const FfnBlock b = block_of(cfg);
  const auto ids = ffn_parameter_ids(model);
  const auto g = loss_and_grad(model, sample.tokens, sample.label);
  std::vector<double> theta(ids.size()), grad(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    theta[i] = model.params()[ids[i]];
    grad[i] = g.grad[ids[i]];
  }
  const auto phi = parameter_shapley(theta, grad, curvature.diag, curvature.cross, opts.omega_self,
                                     opts.pair_scope > 0 ? opts.omega_pair : 0.0);
  RowMat out = RowMat::Zero(cfg.num_layers, cfg.ffn_dim);
  for (int l = 0; l < cfg.num_layers; ++l)
    for (int j = 0; j < cfg.ffn_dim; ++j) {
      double s = std::abs(phi[b.b1(l, j)]);
      for (int r = 0; r < cfg.model_dim; ++r) s += std::abs(phi[b.w1(l, r, j)]);
      if (!std::isfinite(s))
        fail(ErrorKind::numerical,
             "non-finite Shapley score at layer " + std::to_string(l) + ", neuron " + std::to_string(j));
      out(l, j) = s;
    }
  return out;
}

ShapleyMap shapley_scores(const ModelState& model, const std::vector<ProbeSample>& probe, const ShapleyOptions& opts) {
  if (probe.empty()) fail(ErrorKind::input, "probe set is empty");
  const auto& cfg = model.config();
  const auto samples = to_labeled(probe);
  ShapleyMap map;
  map.options = opts;
  map.sample_count = samples.size();
  map.phi = RowMat::Zero(cfg.num_layers, cfg.ffn_dim);
  CurvatureTerms shared;
  if (opts.scope == HessianScope::averaged) shared = curvature_terms(model, samples, opts);
  for (const auto& s : samples) {
    if (opts.scope == HessianScope::averaged) {
      map.phi += shapley_sample_map(model, s, shared, opts);
    } else {
      map.phi += shapley_sample_map(model, s, curvature_terms(model, {s}, opts), opts);
    }
  }
  map.phi /= static_cast<double>(samples.size());
  return map;
}

std::vector<int> select_layers(const ShapleyMap& map, int t_layers, bool use_abs) {
  const int L = static_cast<int>(map.phi.rows());
  if (t_layers < 1 || t_layers > L)
    fail(ErrorKind::input, "t_layers must be in [1, " + std::to_string(L) + "], got " + std::to_string(t_layers));
  std::vector<double> mass(L);
  for (int l = 0; l < L; ++l) mass[l] = use_abs ? map.phi.row(l).cwiseAbs().sum() : map.phi.row(l).sum();
  std::vector<int> order(L);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return mass[a] > mass[b]; });
  order.resize(t_layers);
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<WindowScore> window_scores(const ShapleyMap& map, int layer, int group_size) {
  if (group_size <= 0) fail(ErrorKind::input, "group_size must be positive");
  if (layer < 0 || layer >= map.phi.rows()) fail(ErrorKind::input, "layer " + std::to_string(layer) + " out of range");
  std::vector<WindowScore> out;
  const int F = static_cast<int>(map.phi.cols());
  for_each_window(F, group_size, [&](int start, int end) {
    const double sum = map.phi.row(layer).segment(start, end - start).cwiseAbs().sum();
    const double score = (end - start == group_size) ? sum : sum / (end - start) * group_size;
    out.push_back({start, end, score});
  });
  return out;
}

NeuronSelection select_groups(const ShapleyMap& map, const std::vector<int>& layers, int group_size, int top_groups) {
  if (group_size <= 0) fail(ErrorKind::input, "group_size must be positive");
  if (top_groups <= 0) fail(ErrorKind::input, "top_groups must be positive");
  const int F = static_cast<int>(map.phi.cols());
  if (static_cast<long>(top_groups) * group_size > F)
    fail(ErrorKind::input, "top_groups x group_size exceeds ffn_dim");
  NeuronSelection sel;
  sel.group_size = group_size;
  sel.groups_per_layer = top_groups;
  std::vector<int> sorted = layers;
  std::sort(sorted.begin(), sorted.end());
  for (int layer : sorted) {
    auto windows = window_scores(map, layer, group_size);
    std::stable_sort(windows.begin(), windows.end(),
                     [](const WindowScore& a, const WindowScore& b) { return a.score > b.score; });
    LayerGroups lg;
    lg.layer = layer;
    for (int i = 0; i < top_groups; ++i) lg.groups.push_back({windows[i].start, windows[i].end, windows[i].score});
    sel.layers.push_back(std::move(lg));
  }
  return sel;
}

NeuronSelection random_selection(const ModelConfig& cfg, int t_layers, int group_size, int top_groups,
                                 std::uint64_t seed) {
  if (t_layers < 1 || t_layers > cfg.num_layers) fail(ErrorKind::input, "t_layers out of range");
  if (group_size <= 0 || top_groups <= 0) fail(ErrorKind::input, "group_size and top_groups must be positive");
  const int full_windows = cfg.ffn_dim / group_size;
  if (top_groups > full_windows) fail(ErrorKind::input, "not enough full windows for a random selection");
  Rng rng(seed);
  std::vector<int> layers(cfg.num_layers);
  std::iota(layers.begin(), layers.end(), 0);
  rng.shuffle(layers);
  layers.resize(t_layers);
  std::sort(layers.begin(), layers.end());
  NeuronSelection sel;
  sel.group_size = group_size;
  sel.groups_per_layer = top_groups;
  for (int layer : layers) {
    std::vector<int> windows(full_windows);
    std::iota(windows.begin(), windows.end(), 0);
    rng.shuffle(windows);
    LayerGroups lg;
    lg.layer = layer;
    for (int i = 0; i < top_groups; ++i) lg.groups.push_back({windows[i] * group_size, (windows[i] + 1) * group_size, 0.0});
    sel.layers.push_back(std::move(lg));
  }
  return sel;
}

NeuronSelection full_layer_selection(const ModelConfig& cfg, const std::vector<int>& layers, int group_size) {
  if (group_size <= 0) fail(ErrorKind::input, "group_size must be positive");
  NeuronSelection sel;
  sel.group_size = group_size;
  sel.groups_per_layer = (cfg.ffn_dim + group_size - 1) / group_size;
  std::vector<int> sorted = layers;
  std::sort(sorted.begin(), sorted.end());
  for (int layer : sorted) {
    LayerGroups lg;
    lg.layer = layer;
    for_each_window(cfg.ffn_dim, group_size, [&](int s, int e) { lg.groups.push_back({s, e, 0.0}); });
    sel.layers.push_back(std::move(lg));
  }
  return sel;
}

std::vector<int> NeuronSelection::selected_layers() const {
  std::vector<int> out;
  for (const auto& l : layers) out.push_back(l.layer);
  return out;
}

std::size_t NeuronSelection::dimension() const {
  std::size_t n = 0;
  for (const auto& l : layers)
    for (const auto& g : l.groups) n += static_cast<std::size_t>(g.size());
  return n;
}

std::uint64_t NeuronSelection::fingerprint() const {
  Fnv1a h;
  h.update("neuron-selection/v1");
  h.update_value(group_size);
  for (const auto& l : layers) {
    h.update_value(l.layer);
    h.update_value(l.groups.size());
    for (const auto& g : l.groups) {
      h.update_value(g.start);
      h.update_value(g.end);
    }
  }
  return h.digest();
}

void NeuronSelection::check_compatible(const ModelConfig& cfg) const {
  if (layers.empty()) fail(ErrorKind::compatibility, "neuron selection is empty");
  int prev = -1;
  for (const auto& l : layers) {
    if (l.layer < 0 || l.layer >= cfg.num_layers)
      fail(ErrorKind::compatibility, "selected layer " + std::to_string(l.layer) + " does not exist in the model");
    if (l.layer <= prev) fail(ErrorKind::compatibility, "selected layers must be strictly ascending");
    prev = l.layer;
    std::vector<std::pair<int, int>> ranges;
    for (const auto& g : l.groups) {
      if (g.start < 0 || g.end > cfg.ffn_dim || g.start >= g.end)
        fail(ErrorKind::compatibility, "neuron range [" + std::to_string(g.start) + "," + std::to_string(g.end) +
                                           ") does not fit ffn_dim " + std::to_string(cfg.ffn_dim));
      ranges.emplace_back(g.start, g.end);
    }
    std::sort(ranges.begin(), ranges.end());
    for (std::size_t i = 1; i < ranges.size(); ++i)
      if (ranges[i].first < ranges[i - 1].second) fail(ErrorKind::compatibility, "overlapping neuron ranges");
  }
}

void save_shapley_map(const ShapleyMap& map, const std::filesystem::path& path) {
  Container c;
  c.kind = "shapley_map";
  c.meta = {{"sample_count", map.sample_count},
            {"omega_self", map.options.omega_self},
            {"omega_pair", map.options.omega_pair},
            {"pair_scope", map.options.pair_scope},
            {"method", static_cast<int>(map.options.method)},
            {"scope", static_cast<int>(map.options.scope)}};
  NamedTensor t;
  t.name = "phi";
  t.shape = {static_cast<std::uint64_t>(map.phi.rows()), static_cast<std::uint64_t>(map.phi.cols())};
  t.data.assign(map.phi.data(), map.phi.data() + map.phi.size());
  c.tensors.push_back(std::move(t));
  save_container(c, path);
}

ShapleyMap load_shapley_map(const std::filesystem::path& path) {
  const auto c = load_container(path, "shapley_map");
  const auto& t = c.tensor("phi");
  if (t.shape.size() != 2) fail(ErrorKind::io, "shapley map tensor must be 2-D");
  ShapleyMap m;
  m.phi = RowMat(static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
  std::copy(t.data.begin(), t.data.end(), m.phi.data());
  m.sample_count = c.meta.at("sample_count");
  m.options.omega_self = c.meta.at("omega_self");
  m.options.omega_pair = c.meta.at("omega_pair");
  m.options.pair_scope = c.meta.at("pair_scope");
  m.options.method = static_cast<CurvatureMethod>(c.meta.at("method").get<int>());
  m.options.scope = static_cast<HessianScope>(c.meta.at("scope").get<int>());
  return m;
}

std::string heatmap_table(const ShapleyMap& map, int group_size) {
  std::ostringstream out;
  out << "layer\twindow_start\tscore\n";
  out.precision(17);
  for (int l = 0; l < map.phi.rows(); ++l)
    for (const auto& w : window_scores(map, l, group_size)) out << l << '\t' << w.start << '\t' << w.score << '\n';
  return out.str();
}

nlohmann::json to_json(const NeuronSelection& sel) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : sel.layers) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : l.groups) groups.push_back({{"start", g.start}, {"end", g.end}, {"score", g.score}});
    layers.push_back({{"layer", l.layer}, {"groups", groups}});
  }
  return {{"group_size", sel.group_size},
          {"groups_per_layer", sel.groups_per_layer},
          {"fingerprint", hex64(sel.fingerprint())},
          {"layers", layers}};
}

NeuronSelection selection_from_json(const nlohmann::json& j) {
  NeuronSelection sel;
  sel.group_size = j.at("group_size");
  sel.groups_per_layer = j.at("groups_per_layer");
  for (const auto& l : j.at("layers")) {
    LayerGroups lg;
    lg.layer = l.at("layer");
    for (const auto& g : l.at("groups")) lg.groups.push_back({g.at("start"), g.at("end"), g.at("score")});
    sel.layers.push_back(std::move(lg));
  }
  if (j.contains("fingerprint") && j.at("fingerprint").get<std::string>() != hex64(sel.fingerprint()))
    fail(ErrorKind::compatibility, "neuron selection fingerprint does not match its contents");
  return sel;
}

void save_selection(const NeuronSelection& sel, const std::filesystem::path& path) {
  write_file(path, to_json(sel).dump(2) + "\n");
}

NeuronSelection load_selection(const std::filesystem::path& path) {
  try {
    return selection_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, path.string() + ": " + e.what());
  }
}

}  // namespace dfams
