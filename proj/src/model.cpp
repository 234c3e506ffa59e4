#include "dfams/model.hpp"

#include "dfams/container.hpp"
#include "dfams/optim.hpp"
#include "dfams/rng.hpp"

#include <cmath>
#include <numeric>

namespace dfams {

namespace {

constexpr double kLnEps = 1e-5;

void check_positive(int v, const char* field) {
  if (v <= 0) fail(ErrorKind::config, std::string("ModelConfig.") + field + " must be positive");
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * std::exp(-0.5 * x * x) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
}

struct LayerNormCache {
  RowMat xhat;
  Vec rstd;
};

RowMat layer_norm(const RowMat& x, const ConstVecMap& gamma, const ConstVecMap& beta, LayerNormCache& cache) {
  const auto n = x.cols();
  cache.xhat.resize(x.rows(), n);
  cache.rstd.resize(x.rows());
  RowMat y(x.rows(), n);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    cache.rstd(r) = rstd;
    cache.xhat.row(r) = (x.row(r).array() - mean) * rstd;
    y.row(r) = cache.xhat.row(r).array() * gamma.transpose().array() + beta.transpose().array();
  }
  return y;
}

// Returns dx; accumulates dgamma/dbeta.
RowMat layer_norm_backward(const RowMat& dy, const LayerNormCache& cache, const ConstVecMap& gamma, VecMap dgamma,
                           VecMap dbeta) {
  const double n = static_cast<double>(dy.cols());
  RowMat dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    dgamma += (dy.row(r).array() * cache.xhat.row(r).array()).matrix().transpose();
    dbeta += dy.row(r).transpose();
    const Eigen::RowVectorXd dxhat = dy.row(r).array() * gamma.transpose().array();
    const double mean_dxhat = dxhat.sum() / n;
    const double mean_dxhat_xhat = dxhat.dot(cache.xhat.row(r)) / n;
    dx.row(r) = cache.rstd(r) * (dxhat.array() - mean_dxhat - cache.xhat.row(r).array() * mean_dxhat_xhat);
  }
  return dx;
}

struct LayerCache {
  RowMat x_in;
  LayerNormCache ln1;
  RowMat a1, q, k, v;
  std::vector<RowMat> probs;
  RowMat ctx, h;
  LayerNormCache ln2;
  RowMat u, pre, act;
};

struct ForwardCache {
  TokenSeq tokens;
  std::vector<LayerCache> layers;
  LayerNormCache lnf;
  RowMat yf;
  Vec pooled;
  Vec logits;
};

void validate_tokens(const ModelConfig& cfg, const TokenSeq& tokens) {
  if (tokens.empty()) fail(ErrorKind::input, "empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
    fail(ErrorKind::input, "sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                               std::to_string(cfg.max_seq_len));
  for (int t : tokens)
    if (t < 0 || t >= cfg.vocab_size) fail(ErrorKind::input, "token id " + std::to_string(t) + " out of range");
}

ForwardCache run_forward(const ModelState& m, const TokenSeq& tokens) {
  const auto& cfg = m.config();
  validate_tokens(cfg, tokens);
  const int S = static_cast<int>(tokens.size());
  const int d = cfg.model_dim;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardCache c;
  c.tokens = tokens;
  auto tok = m.mat("tok_emb");
  auto pos = m.mat("pos_emb");
  RowMat x(S, d);
  for (int p = 0; p < S; ++p) x.row(p) = tok.row(tokens[p]) + pos.row(p);

  c.layers.resize(cfg.num_layers);
  for (int l = 0; l < cfg.num_layers; ++l) {
    auto& L = c.layers[l];
    L.x_in = x;
    L.a1 = layer_norm(x, m.vec(layer_tensor(l, "ln1_g")), m.vec(layer_tensor(l, "ln1_b")), L.ln1);
    L.q = L.a1 * m.mat(layer_tensor(l, "wq"));
    L.k = L.a1 * m.mat(layer_tensor(l, "wk"));
    L.v = L.a1 * m.mat(layer_tensor(l, "wv"));
    L.ctx.resize(S, d);
    L.probs.resize(cfg.num_heads);
    for (int hh = 0; hh < cfg.num_heads; ++hh) {
      const auto qh = L.q.middleCols(hh * dh, dh);
      const auto kh = L.k.middleCols(hh * dh, dh);
      RowMat scores = (qh * kh.transpose()) * scale;
      for (int r = 0; r < S; ++r) {
        const double mx = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - mx).exp();
        scores.row(r) /= scores.row(r).sum();
      }
      L.ctx.middleCols(hh * dh, dh) = scores * L.v.middleCols(hh * dh, dh);
      L.probs[hh] = std::move(scores);
    }
    L.h = L.x_in + L.ctx * m.mat(layer_tensor(l, "wo"));
    L.u = layer_norm(L.h, m.vec(layer_tensor(l, "ln2_g")), m.vec(layer_tensor(l, "ln2_b")), L.ln2);
    // Accumulated in input-dimension order so each pre-activation equals the
    // plain dot product h . W1[:,j] + b1[j] bit for bit.
    const auto w1 = m.mat(layer_tensor(l, "w1"));
    L.pre.setZero(S, cfg.ffn_dim);
    for (int p = 0; p < S; ++p) {
      for (int k = 0; k < d; ++k) L.pre.row(p) += L.u(p, k) * w1.row(k);
    }
    L.pre.rowwise() += m.vec(layer_tensor(l, "b1")).transpose();
    L.act = L.pre.unaryExpr([](double z) { return gelu(z); });
    RowMat f = L.act * m.mat(layer_tensor(l, "w2"));
    f.rowwise() += m.vec(layer_tensor(l, "b2")).transpose();
    x = L.h + f;
  }
  c.yf = layer_norm(x, m.vec("lnf_g"), m.vec("lnf_b"), c.lnf);
  c.pooled = c.yf.colwise().mean().transpose();
  c.logits = m.mat("head_w").transpose() * c.pooled + Vec(m.vec("head_b"));
  return c;
}

std::vector<double> run_backward(const ModelState& m, const ForwardCache& c, const Vec& dlogits) {
  const auto& cfg = m.config();
  const auto& lay = m.layout();
  std::vector<double> grad(lay.total(), 0.0);
  auto gmat = [&](const std::string& name) {
    const auto& s = lay.slot(name);
    return RowMatMap(grad.data() + s.offset, s.rows, s.cols);
  };
  auto gvec = [&](const std::string& name) {
    const auto& s = lay.slot(name);
    return VecMap(grad.data() + s.offset, static_cast<Eigen::Index>(s.size()));
  };

  const int S = static_cast<int>(c.tokens.size());
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  gmat("head_w") += c.pooled * dlogits.transpose();
  gvec("head_b") += dlogits;
  const Vec dpooled = m.mat("head_w") * dlogits;
  RowMat dyf(S, cfg.model_dim);
  for (int p = 0; p < S; ++p) dyf.row(p) = dpooled.transpose() / static_cast<double>(S);
  RowMat dx = layer_norm_backward(dyf, c.lnf, m.vec("lnf_g"), gvec("lnf_g"), gvec("lnf_b"));

  for (int l = cfg.num_layers - 1; l >= 0; --l) {
    const auto& L = c.layers[l];
    // FFN sublayer
    gvec(layer_tensor(l, "b2")) += dx.colwise().sum().transpose();
    gmat(layer_tensor(l, "w2")) += L.act.transpose() * dx;
    RowMat dpre = dx * m.mat(layer_tensor(l, "w2")).transpose();
    dpre.array() *= L.pre.unaryExpr([](double z) { return gelu_grad(z); }).array();
    gvec(layer_tensor(l, "b1")) += dpre.colwise().sum().transpose();
    gmat(layer_tensor(l, "w1")) += L.u.transpose() * dpre;
    const RowMat du = dpre * m.mat(layer_tensor(l, "w1")).transpose();
    RowMat dh_res = dx + layer_norm_backward(du, L.ln2, m.vec(layer_tensor(l, "ln2_g")),
                                             gvec(layer_tensor(l, "ln2_g")), gvec(layer_tensor(l, "ln2_b")));
    // attention sublayer
    gmat(layer_tensor(l, "wo")) += L.ctx.transpose() * dh_res;
    const RowMat dctx = dh_res * m.mat(layer_tensor(l, "wo")).transpose();
    RowMat dq(S, cfg.model_dim), dk(S, cfg.model_dim), dv(S, cfg.model_dim);
    for (int hh = 0; hh < cfg.num_heads; ++hh) {
      const auto& P = L.probs[hh];
      const auto dctx_h = dctx.middleCols(hh * dh, dh);
      const RowMat dP = dctx_h * L.v.middleCols(hh * dh, dh).transpose();
      dv.middleCols(hh * dh, dh) = P.transpose() * dctx_h;
      RowMat dS(S, S);
      for (int r = 0; r < S; ++r) {
        const double inner = dP.row(r).dot(P.row(r));
        dS.row(r) = P.row(r).array() * (dP.row(r).array() - inner);
      }
      dS *= scale;
      dq.middleCols(hh * dh, dh) = dS * L.k.middleCols(hh * dh, dh);
      dk.middleCols(hh * dh, dh) = dS.transpose() * L.q.middleCols(hh * dh, dh);
    }
    gmat(layer_tensor(l, "wq")) += L.a1.transpose() * dq;
    gmat(layer_tensor(l, "wk")) += L.a1.transpose() * dk;
    gmat(layer_tensor(l, "wv")) += L.a1.transpose() * dv;
    const RowMat da1 = dq * m.mat(layer_tensor(l, "wq")).transpose() +
                       dk * m.mat(layer_tensor(l, "wk")).transpose() +
                       dv * m.mat(layer_tensor(l, "wv")).transpose();
    dx = dh_res + layer_norm_backward(da1, L.ln1, m.vec(layer_tensor(l, "ln1_g")), gvec(layer_tensor(l, "ln1_g")),
                                      gvec(layer_tensor(l, "ln1_b")));
  }
  auto dtok = gmat("tok_emb");
  auto dpos = gmat("pos_emb");
  for (int p = 0; p < S; ++p) {
    dtok.row(c.tokens[p]) += dx.row(p);
    dpos.row(p) += dx.row(p);
  }
  return grad;
}

Vec softmax(const Vec& logits) {
  Vec p = (logits.array() - logits.maxCoeff()).exp();
  return p / p.sum();
}

double cross_entropy(const Vec& logits, int label) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return lse - logits(label);
}

}  // namespace

void ModelConfig::validate() const {
  check_positive(num_layers, "num_layers");
  check_positive(model_dim, "model_dim");
  check_positive(ffn_dim, "ffn_dim");
  check_positive(num_heads, "num_heads");
  check_positive(vocab_size, "vocab_size");
  check_positive(max_seq_len, "max_seq_len");
  check_positive(num_classes, "num_classes");
  if (model_dim % num_heads != 0)
    fail(ErrorKind::config, "ModelConfig.model_dim (" + std::to_string(model_dim) +
                                ") must be divisible by num_heads (" + std::to_string(num_heads) + ")");
  if (ffn_dim < model_dim) fail(ErrorKind::config, "ModelConfig.ffn_dim must be >= model_dim");
}

std::string layer_tensor(int layer, const char* name) { return "layer" + std::to_string(layer) + "." + name; }

ParamLayout::ParamLayout(const ModelConfig& cfg) : model_dim_(cfg.model_dim), ffn_dim_(cfg.ffn_dim) {
  const int d = cfg.model_dim;
  add("tok_emb", cfg.vocab_size, d);
  add("pos_emb", cfg.max_seq_len, d);
  for (int l = 0; l < cfg.num_layers; ++l) {
    add(layer_tensor(l, "ln1_g"), d, 1);
    add(layer_tensor(l, "ln1_b"), d, 1);
    add(layer_tensor(l, "wq"), d, d);
    add(layer_tensor(l, "wk"), d, d);
    add(layer_tensor(l, "wv"), d, d);
    add(layer_tensor(l, "wo"), d, d);
    add(layer_tensor(l, "ln2_g"), d, 1);
    add(layer_tensor(l, "ln2_b"), d, 1);
    add(layer_tensor(l, "w1"), d, cfg.ffn_dim);
    add(layer_tensor(l, "b1"), cfg.ffn_dim, 1);
    add(layer_tensor(l, "w2"), cfg.ffn_dim, d);
    add(layer_tensor(l, "b2"), d, 1);
  }
  add("lnf_g", d, 1);
  add("lnf_b", d, 1);
  add("head_w", d, cfg.num_classes);
  add("head_b", cfg.num_classes, 1);
}

void ParamLayout::add(const std::string& name, int rows, int cols) {
  by_name_[name] = slots_.size();
  slots_.push_back({name, total_, rows, cols});
  total_ += static_cast<std::size_t>(rows) * cols;
}

const TensorSlot& ParamLayout::slot(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) fail(ErrorKind::input, "unknown tensor " + name);
  return slots_[it->second];
}

std::size_t ParamLayout::w1_index(int layer, int row, int neuron) const {
  return slot(layer_tensor(layer, "w1")).offset + static_cast<std::size_t>(row) * ffn_dim_ + neuron;
}

std::size_t ParamLayout::b1_index(int layer, int neuron) const {
  return slot(layer_tensor(layer, "b1")).offset + neuron;
}

bool ParamLayout::is_ffn_up(std::size_t id) const {
  for (const auto& s : slots_) {
    if (id >= s.offset && id < s.offset + s.size()) {
      const auto dot = s.name.find('.');
      if (dot == std::string::npos) return false;
      const auto leaf = s.name.substr(dot + 1);
      return leaf == "w1" || leaf == "b1";
    }
  }
  return false;
}

ModelState::ModelState(const ModelConfig& cfg) : config_(cfg), layout_((cfg.validate(), cfg)), params_(layout_.total(), 0.0) {}

RowMatMap ModelState::mat(const std::string& name) {
  const auto& s = layout_.slot(name);
  return RowMatMap(params_.data() + s.offset, s.rows, s.cols);
}
ConstRowMatMap ModelState::mat(const std::string& name) const {
  const auto& s = layout_.slot(name);
  return ConstRowMatMap(params_.data() + s.offset, s.rows, s.cols);
}
VecMap ModelState::vec(const std::string& name) {
  const auto& s = layout_.slot(name);
  return VecMap(params_.data() + s.offset, static_cast<Eigen::Index>(s.size()));
}
ConstVecMap ModelState::vec(const std::string& name) const {
  const auto& s = layout_.slot(name);
  return ConstVecMap(params_.data() + s.offset, static_cast<Eigen::Index>(s.size()));
}

ModelState init_model(const ModelConfig& config) {
  ModelState m(config);
  Rng rng(config.seed);
  for (const auto& s : m.layout().slots()) {
    const auto leaf = s.name.substr(s.name.find('.') == std::string::npos ? 0 : s.name.find('.') + 1);
    double* p = m.params().data() + s.offset;
    if (leaf == "ln1_g" || leaf == "ln2_g" || leaf == "lnf_g") {
      std::fill(p, p + s.size(), 1.0);
    } else if (s.cols == 1) {
      // biases and layer-norm shifts start at zero
    } else if (leaf == "tok_emb") {
      for (std::size_t i = 0; i < s.size(); ++i) p[i] = rng.uniform(-1.0, 1.0);
    } else if (leaf == "pos_emb") {
      for (std::size_t i = 0; i < s.size(); ++i) p[i] = 0.1 * rng.uniform(-1.0, 1.0);
    } else {
      const double a = std::sqrt(6.0 / (s.rows + s.cols));
      for (std::size_t i = 0; i < s.size(); ++i) p[i] = rng.uniform(-a, a);
    }
  }
  return m;
}

ActivationTrace forward(const ModelState& model, const TokenSeq& tokens) {
  ForwardCache c = run_forward(model, tokens);
  ActivationTrace t;
  t.seq_len = static_cast<int>(tokens.size());
  t.logits = c.logits;
  t.ffn_act.reserve(c.layers.size());
  t.ffn_input.reserve(c.layers.size());
  for (auto& L : c.layers) {
    t.ffn_act.push_back(std::move(L.act));
    t.ffn_input.push_back(std::move(L.u));
  }
  return t;
}

GradientRecord loss_and_grad(const ModelState& model, const TokenSeq& tokens, int label) {
  if (label < 0 || label >= model.config().num_classes)
    fail(ErrorKind::input, "label " + std::to_string(label) + " out of range");
  ForwardCache c = run_forward(model, tokens);
  Vec dlogits = softmax(c.logits);
  dlogits(label) -= 1.0;
  GradientRecord r;
  r.loss = cross_entropy(c.logits, label);
  r.grad = run_backward(model, c, dlogits);
  return r;
}

LogitJacobian logit_jacobian(const ModelState& model, const TokenSeq& tokens) {
  ForwardCache c = run_forward(model, tokens);
  const int C = model.config().num_classes;
  LogitJacobian out;
  out.probs = softmax(c.logits);
  out.jac.resize(C, static_cast<Eigen::Index>(model.layout().total()));
  for (int k = 0; k < C; ++k) {
    Vec e = Vec::Zero(C);
    e(k) = 1.0;
    auto g = run_backward(model, c, e);
    out.jac.row(k) = ConstVecMap(g.data(), static_cast<Eigen::Index>(g.size())).transpose();
  }
  return out;
}

HessianRecord finite_difference_hessian(const GradientFn& grad, const std::vector<double>& theta,
                                        const std::vector<std::size_t>& params,
                                        const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                                        double step) {
  HessianRecord rec;
  rec.method = HessianMethod::finite_difference;
  // Perturb each distinct "row" parameter once and read every column it needs.
  std::map<std::size_t, std::vector<std::size_t>> needed;
  for (auto j : params) needed[j].push_back(j);
  for (auto [j, k] : pairs) needed[j].push_back(k);
  std::vector<double> work = theta;
  for (const auto& [j, cols] : needed) {
    if (j >= theta.size()) fail(ErrorKind::input, "parameter id " + std::to_string(j) + " out of range");
    for (auto k : cols)
      if (k >= theta.size()) fail(ErrorKind::input, "parameter id " + std::to_string(k) + " out of range");
    work[j] = theta[j] + step;
    const auto gp = grad(work);
    work[j] = theta[j] - step;
    const auto gm = grad(work);
    work[j] = theta[j];
    for (auto k : cols) {
      const double h = (gp[k] - gm[k]) / (2.0 * step);
      if (!std::isfinite(h)) fail(ErrorKind::numerical, "non-finite curvature at parameter " + std::to_string(j));
      if (k == j) rec.diagonal[j] = h;
      if (std::find(pairs.begin(), pairs.end(), std::make_pair(j, k)) != pairs.end()) rec.pairs[{j, k}] = h;
    }
  }
  return rec;
}

HessianRecord hessian_terms(const ModelState& model, const std::vector<LabeledSeq>& dataset,
                            const std::vector<std::size_t>& params,
                            const std::vector<std::pair<std::size_t, std::size_t>>& pairs, HessianMethod method,
                            double step) {
  if (dataset.empty()) fail(ErrorKind::input, "hessian_terms needs a non-empty dataset");
  const auto& lay = model.layout();
  auto check_id = [&](std::size_t id) {
    if (id >= lay.total() || !lay.is_ffn_up(id))
      fail(ErrorKind::input, "parameter id " + std::to_string(id) + " is not an FFN up-projection parameter");
  };
  for (auto j : params) check_id(j);
  for (auto [j, k] : pairs) {
    check_id(j);
    check_id(k);
  }

  if (method == HessianMethod::finite_difference) {
    GradientFn g = [&](const std::vector<double>& theta) {
      ModelState probe = model;
      probe.params() = theta;
      std::vector<double> acc(theta.size(), 0.0);
      for (const auto& s : dataset) {
        auto r = loss_and_grad(probe, s.tokens, s.label);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += r.grad[i];
      }
      for (auto& v : acc) v /= static_cast<double>(dataset.size());
      return acc;
    };
    return finite_difference_hessian(g, model.params(), params, pairs, step);
  }

  HessianRecord rec;
  rec.method = HessianMethod::gauss_newton;
  const double inv_n = 1.0 / static_cast<double>(dataset.size());
  for (const auto& s : dataset) {
    const auto lj = logit_jacobian(model, s.tokens);
    const Mat A = Mat(lj.probs.asDiagonal()) - lj.probs * lj.probs.transpose();
    auto entry = [&](std::size_t j, std::size_t k) {
      return lj.jac.col(static_cast<Eigen::Index>(j)).dot(A * lj.jac.col(static_cast<Eigen::Index>(k)));
    };
    for (auto j : params) rec.diagonal[j] += inv_n * entry(j, j);
    for (auto [j, k] : pairs) rec.pairs[{j, k}] += inv_n * entry(j, k);
  }
  return rec;
}

int predict(const ModelState& model, const TokenSeq& tokens) {
  const auto c = run_forward(model, tokens);
  Eigen::Index best;
  c.logits.maxCoeff(&best);
  return static_cast<int>(best);
}

double accuracy(const ModelState& model, const std::vector<LabeledSeq>& dataset) {
  if (dataset.empty()) return 0.0;
  int hit = 0;
  for (const auto& s : dataset) hit += predict(model, s.tokens) == s.label;
  return static_cast<double>(hit) / static_cast<double>(dataset.size());
}

ModelState train_probe_model(ModelState model, const std::vector<LabeledSeq>& dataset, const ProbeTrainOptions& opts,
                             ProbeTrainReport* report) {
  if (dataset.empty()) fail(ErrorKind::input, "probe training set is empty");
  if (opts.epochs < 1) fail(ErrorKind::input, "epochs must be >= 1");
  if (opts.batch_size < 1) fail(ErrorKind::input, "batch_size must be >= 1");
  for (const auto& s : dataset)
    if (s.label < 0 || s.label >= model.config().num_classes)
      fail(ErrorKind::input, "label " + std::to_string(s.label) + " out of range");

  Rng rng(opts.seed);
  AdamW opt(model.params().size());
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  const long steps_per_epoch = static_cast<long>((dataset.size() + opts.batch_size - 1) / opts.batch_size);
  const long total_steps = steps_per_epoch * opts.epochs;
  std::vector<double> grad(model.params().size());
  ProbeTrainReport rep;
  long step = 0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = dataset[order[i]];
        auto r = loss_and_grad(model, s.tokens, s.label);
        batch_loss += r.loss;
        for (std::size_t p = 0; p < grad.size(); ++p) grad[p] += r.grad[p];
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (auto& g : grad) g *= inv;
      if (!std::isfinite(batch_loss))
        fail(ErrorKind::numerical, "probe training diverged (NaN loss) at epoch " + std::to_string(epoch));
      epoch_loss += batch_loss;
      opt.step(model.params(), grad, cosine_lr(opts.lr, step++, total_steps));
    }
    rep.epoch_loss.push_back(epoch_loss / static_cast<double>(dataset.size()));
  }
  if (report) {
    rep.final_accuracy = accuracy(model, dataset);
    *report = std::move(rep);
  }
  return model;
}

namespace {
nlohmann::json config_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers}, {"model_dim", c.model_dim}, {"ffn_dim", c.ffn_dim},
          {"num_heads", c.num_heads},   {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
          {"num_classes", c.num_classes}, {"seed", c.seed}};
}
}  // namespace

void save_model(const ModelState& model, const std::filesystem::path& path) {
  Container c;
  c.kind = "model";
  c.meta = {{"config", config_json(model.config())}, {"checksum", hex64(model.checksum())}};
  for (const auto& s : model.layout().slots()) {
    NamedTensor t;
    t.name = s.name;
    t.shape = s.cols == 1 ? std::vector<std::uint64_t>{static_cast<std::uint64_t>(s.rows)}
                          : std::vector<std::uint64_t>{static_cast<std::uint64_t>(s.rows),
                                                       static_cast<std::uint64_t>(s.cols)};
    t.data.assign(model.params().begin() + static_cast<std::ptrdiff_t>(s.offset),
                  model.params().begin() + static_cast<std::ptrdiff_t>(s.offset + s.size()));
    c.tensors.push_back(std::move(t));
  }
  save_container(c, path);
}

ModelState load_model(const std::filesystem::path& path) {
  const Container c = load_container(path, "model");
  const auto& j = c.meta.at("config");
  ModelConfig cfg;
  cfg.num_layers = j.at("num_layers");
  cfg.model_dim = j.at("model_dim");
  cfg.ffn_dim = j.at("ffn_dim");
  cfg.num_heads = j.at("num_heads");
  cfg.vocab_size = j.at("vocab_size");
  cfg.max_seq_len = j.at("max_seq_len");
  cfg.num_classes = j.at("num_classes");
  cfg.seed = j.at("seed");
  ModelState m(cfg);
  for (const auto& s : m.layout().slots()) {
    const auto& t = c.tensor(s.name);
    if (t.data.size() != s.size()) fail(ErrorKind::io, "tensor " + s.name + " has wrong size");
    std::copy(t.data.begin(), t.data.end(), m.params().begin() + static_cast<std::ptrdiff_t>(s.offset));
  }
  if (!all_finite(m.params())) fail(ErrorKind::io, "checkpoint contains non-finite parameters");
  return m;
}

}  // namespace dfams
