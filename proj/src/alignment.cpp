#include "dfams/alignment.hpp"

#include "dfams/container.hpp"
#include "dfams/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>

namespace dfams {

namespace {

constexpr double kLnEps = 1e-5;

const char* const kNames[] = {"w1", "b1", "g1", "be1", "w2", "b2", "g2", "be2", "w3", "b3"};

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Row-wise layer norm; returns the normalized values before gain and bias.
RowMat layer_norm_rows(const RowMat& x, Vec& inv_sd) {
  RowMat out(x.rows(), x.cols());
  inv_sd.resize(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    inv_sd(i) = 1.0 / std::sqrt(var + kLnEps);
    out.row(i) = (x.row(i).array() - mean) * inv_sd(i);
  }
  return out;
}

// Given dL/dy for y = g * xhat + b, accumulates gain/bias gradients and
// returns dL/dx.
RowMat layer_norm_backward(const RowMat& xhat, const Vec& inv_sd, const ConstVecMap& g, const RowMat& dy,
                           double* dg, double* db) {
  const auto n = xhat.cols();
  RowMat dx(xhat.rows(), n);
  for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      dg[j] += dy(i, j) * xhat(i, j);
      db[j] += dy(i, j);
    }
    const Eigen::RowVectorXd dxhat = dy.row(i).array() * g.transpose().array();
    const double m1 = dxhat.mean();
    const double m2 = (dxhat.array() * xhat.row(i).array()).mean();
    dx.row(i) = inv_sd(i) * (dxhat.array() - m1 - xhat.row(i).array() * m2);
  }
  return dx;
}

double logsumexp(const double* v, const std::vector<int>& idx) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int a : idx) mx = std::max(mx, v[a]);
  double s = 0.0;
  for (int a : idx) s += std::exp(v[a] - mx);
  return mx + std::log(s);
}

}  // namespace

void AlignerConfig::validate() const {
  auto need = [](bool ok, const std::string& field, const std::string& what) {
    if (!ok) fail(ErrorKind::config, "aligner." + field + " " + what);
  };
  need(input_dim > 0, "input_dim", "must be positive");
  need(hidden_dim > 0, "hidden_dim", "must be positive");
  need(output_dim > 1, "output_dim", "must be at least 2");
  need(dropout_rate >= 0.0 && dropout_rate < 1.0, "dropout_rate", "must lie in [0, 1)");
  need(lr > 0.0, "lr", "must be positive");
  need(weight_decay >= 0.0, "weight_decay", "must be non-negative");
  need(batch_size >= 2, "batch_size", "must be at least 2");
  need(tau_cl > 0.0, "tau_cl", "must be positive");
  need(tau_pcl > 0.0, "tau_pcl", "must be positive");
  need(lambda >= 0.0 && lambda <= 1.0, "lambda", "must lie in [0, 1]");
  need(epochs_total >= 1, "epochs_total", "must be at least 1");
  need(epochs_cl_only >= 0 && epochs_cl_only <= epochs_total, "epochs_cl_only", "must lie in [0, epochs_total]");
  need(prototypes_per_class >= 1, "prototypes_per_class", "must be at least 1");
  need(pcl_positives >= 1, "pcl_positives", "must be at least 1");
  need(kmeans_restarts >= 1, "kmeans_restarts", "must be at least 1");
}

// ---------------------------------------------------------------------------
// MLP

void AlignerState::build_layout() {
  const int in = cfg_.input_dim, h = cfg_.hidden_dim, out = cfg_.output_dim;
  const std::pair<int, int> shapes[] = {{in, h}, {1, h}, {1, h}, {1, h}, {h, h},
                                        {1, h},  {1, h}, {1, h}, {h, out}, {1, out}};
  std::size_t off = 0;
  slots_.clear();
  for (int i = 0; i < 10; ++i) {
    slots_[kNames[i]] = {off, shapes[i].first, shapes[i].second};
    off += static_cast<std::size_t>(shapes[i].first) * shapes[i].second;
  }
  params_.assign(off, 0.0);
}

AlignerState::AlignerState(const AlignerConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  build_layout();
  Rng rng(derive_seed(cfg.seed, "aligner-init"));
  for (const char* w : {"w1", "w2", "w3"}) {
    const Slot& s = slot(w);
    const double a = std::sqrt(6.0 / (s.rows + s.cols));
    for (std::size_t i = 0; i < static_cast<std::size_t>(s.rows) * s.cols; ++i)
      params_[s.offset + i] = rng.uniform(-a, a);
  }
  for (const char* g : {"g1", "g2"}) {
    const Slot& s = slot(g);
    std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(s.offset), s.cols, 1.0);
  }
}

const AlignerState::Slot& AlignerState::slot(const char* name) const {
  auto it = slots_.find(name);
  if (it == slots_.end()) fail(ErrorKind::input, std::string("unknown aligner tensor ") + name);
  return it->second;
}

ConstRowMatMap AlignerState::mat(const char* name) const {
  const Slot& s = slot(name);
  return ConstRowMatMap(params_.data() + s.offset, s.rows, s.cols);
}

RowMatMap AlignerState::mat_mut(const char* name) {
  const Slot& s = slot(name);
  return RowMatMap(params_.data() + s.offset, s.rows, s.cols);
}

ConstVecMap AlignerState::vec(const char* name) const {
  const Slot& s = slot(name);
  return ConstVecMap(params_.data() + s.offset, static_cast<Eigen::Index>(s.rows) * s.cols);
}

RowMat AlignerState::forward(const RowMat& z, Rng* rng, Cache* cache) const {
  if (z.cols() != cfg_.input_dim)
    fail(ErrorKind::compatibility, "aligner expects DIF dimension " + std::to_string(cfg_.input_dim) + ", got " +
                                       std::to_string(z.cols()));
  Cache local;
  Cache& c = cache ? *cache : local;
  const double keep = 1.0 - cfg_.dropout_rate;
  auto dropout_mask = [&](Eigen::Index rows, Eigen::Index cols) {
    RowMat m = RowMat::Ones(rows, cols);
    if (rng && cfg_.dropout_rate > 0.0)
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
    return m;
  };

  c.z = z;
  // h1/h2 hold the layer-norm outputs, i.e. the SiLU inputs
  const RowMat pre1 = (z * mat("w1")).rowwise() + vec("b1").transpose();
  c.n1 = layer_norm_rows(pre1, c.inv_sd1);
  c.h1 = (c.n1.array().rowwise() * vec("g1").transpose().array()).rowwise() + vec("be1").transpose().array();
  c.a1 = c.h1.unaryExpr([](double x) { return x * sigmoid(x); });
  c.m1 = dropout_mask(c.a1.rows(), c.a1.cols());
  const RowMat d1 = c.a1.cwiseProduct(c.m1);

  c.h2 = (d1 * mat("w2")).rowwise() + vec("b2").transpose();
  c.n2 = layer_norm_rows(c.h2, c.inv_sd2);
  c.h2 = (c.n2.array().rowwise() * vec("g2").transpose().array()).rowwise() + vec("be2").transpose().array();
  c.a2 = c.h2.unaryExpr([](double x) { return x * sigmoid(x); });
  c.m2 = dropout_mask(c.a2.rows(), c.a2.cols());
  const RowMat d2 = c.a2.cwiseProduct(c.m2);

  c.o = (d2 * mat("w3")).rowwise() + vec("b3").transpose();
  c.norm = c.o.rowwise().norm();
  for (Eigen::Index i = 0; i < c.norm.size(); ++i)
    if (!(c.norm(i) > 0.0) || !std::isfinite(c.norm(i))) fail(ErrorKind::numerical, "aligner output has zero or non-finite norm");
  c.r = c.o.array().colwise() / c.norm.array();
  return c.r;
}

std::vector<double> AlignerState::backward(const Cache& c, const RowMat& dr) const {
  std::vector<double> grad(params_.size(), 0.0);
  auto gmat = [&](const char* n) {
    const Slot& s = slot(n);
    return RowMatMap(grad.data() + s.offset, s.rows, s.cols);
  };
  auto gptr = [&](const char* n) { return grad.data() + slot(n).offset; };

  // r = o / |o|
  RowMat d_o(c.o.rows(), c.o.cols());
  for (Eigen::Index i = 0; i < c.o.rows(); ++i) {
    const double dot = c.r.row(i).dot(dr.row(i));
    d_o.row(i) = (dr.row(i) - dot * c.r.row(i)) / c.norm(i);
  }
  const RowMat d2 = c.a2.cwiseProduct(c.m2);
  gmat("w3") = d2.transpose() * d_o;
  gmat("b3") = d_o.colwise().sum();
  RowMat da2 = (d_o * mat("w3").transpose()).cwiseProduct(c.m2);
  auto silu_grad = [](double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
  };
  RowMat dy2 = da2.cwiseProduct(c.h2.unaryExpr(silu_grad));
  const RowMat dh2 = layer_norm_backward(c.n2, c.inv_sd2, vec("g2"), dy2, gptr("g2"), gptr("be2"));

  const RowMat d1 = c.a1.cwiseProduct(c.m1);
  gmat("w2") = d1.transpose() * dh2;
  gmat("b2") = dh2.colwise().sum();
  RowMat da1 = (dh2 * mat("w2").transpose()).cwiseProduct(c.m1);
  RowMat dy1 = da1.cwiseProduct(c.h1.unaryExpr(silu_grad));
  const RowMat dh1 = layer_norm_backward(c.n1, c.inv_sd1, vec("g1"), dy1, gptr("g1"), gptr("be1"));

  gmat("w1") = c.z.transpose() * dh1;
  gmat("b1") = dh1.colwise().sum();
  return grad;
}

Vec align(const AlignerState& aligner, const Vec& z) {
  RowMat row = z.transpose();
  return aligner.forward(row).row(0).transpose();
}

RowMat align_batch(const AlignerState& aligner, const RowMat& z) { return aligner.forward(z); }

// ---------------------------------------------------------------------------
// Losses

LossGrad supcon_loss(const RowMat& r, const std::vector<int>& labels, double tau) {
  const auto n = static_cast<int>(r.rows());
  if (n < 2) fail(ErrorKind::input, "contrastive batch needs at least 2 embeddings");
  if (static_cast<int>(labels.size()) != n) fail(ErrorKind::input, "label count does not match batch size");
  if (!(tau > 0.0)) fail(ErrorKind::config, "tau_cl must be positive");
  const RowMat sim = (r * r.transpose()) / tau;
  LossGrad out;
  out.grad = RowMat::Zero(r.rows(), r.cols());
  RowMat coef = RowMat::Zero(n, n);  // dL/d(sim_ia * tau)
  int anchors = 0;
  std::vector<int> others;
  for (int i = 0; i < n; ++i) {
    others.clear();
    int npos = 0;
    for (int a = 0; a < n; ++a)
      if (a != i) {
        others.push_back(a);
        if (labels[a] == labels[i]) ++npos;
      }
    if (npos == 0) continue;
    ++anchors;
    const double* row = sim.data() + static_cast<std::ptrdiff_t>(i) * n;
    const double lse = logsumexp(row, others);
    double pos_sum = 0.0;
    for (int a : others) {
      const double q = std::exp(row[a] - lse);
      const bool pos = labels[a] == labels[i];
      if (pos) pos_sum += row[a];
      coef(i, a) = (q - (pos ? 1.0 / npos : 0.0)) / tau;
    }
    out.loss += lse - pos_sum / npos;
  }
  if (anchors == 0) fail(ErrorKind::degenerate, "contrastive batch has no same-label pair");
  // sim_ia = r_i . r_a contributes to both embeddings
  out.grad = coef * r + coef.transpose() * r;
  return out;
}

RowMat PrototypeBook::matrix() const {
  if (prototypes.empty()) return RowMat(0, 0);
  RowMat m(static_cast<Eigen::Index>(prototypes.size()), prototypes.front().mu.size());
  for (std::size_t i = 0; i < prototypes.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = prototypes[i].mu.transpose();
  return m;
}

std::map<int, int> PrototypeBook::counts() const {
  std::map<int, int> c;
  for (const auto& p : prototypes) ++c[p.kb_id];
  return c;
}

int PrototypeBook::dimension() const {
  return prototypes.empty() ? 0 : static_cast<int>(prototypes.front().mu.size());
}

PclResult pcl_loss(const RowMat& r, const std::vector<int>& labels, const PrototypeBook& book,
                   const PclOptions& opts) {
  const int np = static_cast<int>(book.size());
  if (np < 2) fail(ErrorKind::degenerate, "prototype book needs at least 2 prototypes");
  if (r.cols() != book.dimension()) fail(ErrorKind::compatibility, "embedding and prototype dimensions differ");
  if (static_cast<Eigen::Index>(labels.size()) != r.rows()) fail(ErrorKind::input, "label count does not match batch");
  if (!(opts.tau > 0.0)) fail(ErrorKind::config, "tau_pcl must be positive");
  const RowMat mu = book.matrix();
  const RowMat sim = r * mu.transpose() / opts.tau;
  PclResult out;
  out.grad_r = RowMat::Zero(r.rows(), r.cols());
  RowMat coef = RowMat::Zero(r.rows(), np);  // dL/d(r_i . mu_j)

  std::vector<int> candidates, ranked, positives, denom;
  std::vector<char> is_pos(static_cast<std::size_t>(np));
  for (Eigen::Index i = 0; i < r.rows(); ++i) {
    candidates.clear();
    for (int j = 0; j < np; ++j)
      if (opts.scope == PositiveScope::any || book.prototypes[static_cast<std::size_t>(j)].kb_id == labels[i])
        candidates.push_back(j);
    if (candidates.empty())
      fail(ErrorKind::input, "class " + std::to_string(labels[i]) + " owns no prototype");
    const double* row = sim.data() + i * np;
    // Highest similarity first; stable sort keeps the lower index on ties.
    ranked = candidates;
    std::stable_sort(ranked.begin(), ranked.end(), [&](int a, int b) { return row[a] > row[b]; });
    const int k = std::min<int>(opts.positives, static_cast<int>(ranked.size()));
    positives.assign(ranked.begin(), ranked.begin() + k);
    std::fill(is_pos.begin(), is_pos.end(), 0);
    for (int p : positives) is_pos[static_cast<std::size_t>(p)] = 1;
    denom.clear();
    for (int j = 0; j < np; ++j)
      if (opts.include_positive_in_denominator || !is_pos[static_cast<std::size_t>(j)]) denom.push_back(j);
    if (denom.empty()) fail(ErrorKind::degenerate, "no negative prototypes for PCL");
    const double lse = logsumexp(row, denom);
    const double inv_k = 1.0 / k;
    for (int p : positives) {
      out.loss += -(row[p] - lse) * inv_k;
      coef(i, p) -= inv_k / opts.tau;
    }
    // each positive term carries +lse, so the softmax weight sums to one overall
    for (int j : denom) coef(i, j) += std::exp(row[j] - lse) / opts.tau;
  }
  out.grad_r = coef * mu;
  out.grad_mu = coef.transpose() * r;
  return out;
}

// ---------------------------------------------------------------------------
// Clustering

namespace {

struct LloydRun {
  std::vector<int> assignment;
  RowMat centroids;
  double inertia = 0.0;
  std::vector<double> history;
  int iterations = 0;
};

double squared_distance(const RowMat& x, Eigen::Index i, const RowMat& c, Eigen::Index j) {
  return (x.row(i) - c.row(j)).squaredNorm();
}

LloydRun lloyd_from(const RowMat& x, const std::vector<Eigen::Index>& seeds, int max_iter) {
  const auto n = x.rows();
  const auto k = static_cast<Eigen::Index>(seeds.size());
  LloydRun run;
  run.centroids.resize(k, x.cols());
  for (Eigen::Index j = 0; j < k; ++j) run.centroids.row(j) = x.row(seeds[static_cast<std::size_t>(j)]);
  run.assignment.assign(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      double bd = squared_distance(x, i, run.centroids, 0);
      for (Eigen::Index j = 1; j < k; ++j) {
        const double d = squared_distance(x, i, run.centroids, j);
        if (d < bd) {
          bd = d;
          best = j;
        }
      }
      if (run.assignment[static_cast<std::size_t>(i)] != best) {
        run.assignment[static_cast<std::size_t>(i)] = static_cast<int>(best);
        changed = true;
      }
    }
    if (!changed) break;
    ++run.iterations;
    RowMat sums = RowMat::Zero(k, x.cols());
    std::vector<int> count(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int a = run.assignment[static_cast<std::size_t>(i)];
      sums.row(a) += x.row(i);
      ++count[static_cast<std::size_t>(a)];
    }
    for (Eigen::Index j = 0; j < k; ++j)
      if (count[static_cast<std::size_t>(j)] > 0) run.centroids.row(j) = sums.row(j) / count[static_cast<std::size_t>(j)];
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) inertia += squared_distance(x, i, run.centroids, run.assignment[static_cast<std::size_t>(i)]);
    run.history.push_back(inertia);
  }
  run.inertia = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) run.inertia += squared_distance(x, i, run.centroids, run.assignment[static_cast<std::size_t>(i)]);
  return run;
}

std::vector<Eigen::Index> farthest_point_seeds(const RowMat& x, Eigen::Index first, int k) {
  std::vector<Eigen::Index> seeds{first};
  Vec nearest(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) nearest(i) = (x.row(i) - x.row(first)).squaredNorm();
  while (static_cast<int>(seeds.size()) < k) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < x.rows(); ++i)
      if (nearest(i) > nearest(best)) best = i;
    seeds.push_back(best);
    for (Eigen::Index i = 0; i < x.rows(); ++i) nearest(i) = std::min(nearest(i), (x.row(i) - x.row(best)).squaredNorm());
  }
  return seeds;
}

// D^2-weighted random seeding.
std::vector<Eigen::Index> sampled_seeds(const RowMat& x, int k, Rng& rng) {
  std::vector<Eigen::Index> seeds{static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(x.rows())))};
  Vec nearest(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) nearest(i) = (x.row(i) - x.row(seeds[0])).squaredNorm();
  while (static_cast<int>(seeds.size()) < k) {
    double u = rng.uniform() * nearest.sum();
    Eigen::Index pick = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (nearest(i) <= 0.0) continue;
      pick = i;
      u -= nearest(i);
      if (u < 0.0) break;
    }
    seeds.push_back(pick);
    for (Eigen::Index i = 0; i < x.rows(); ++i) nearest(i) = std::min(nearest(i), (x.row(i) - x.row(pick)).squaredNorm());
  }
  return seeds;
}

// Single-point moves that lower the inertia (Hartigan's criterion); leaves a
// Lloyd fixpoint that no one-point reassignment can improve.
void hartigan_refine(const RowMat& x, LloydRun& run) {
  const auto k = run.centroids.rows();
  std::vector<int> count(static_cast<std::size_t>(k), 0);
  for (int a : run.assignment) ++count[static_cast<std::size_t>(a)];
  bool moved = true;
  while (moved) {
    moved = false;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const int a = run.assignment[static_cast<std::size_t>(i)];
      const int na = count[static_cast<std::size_t>(a)];
      if (na <= 1) continue;
      const double cost_out = na / (na - 1.0) * (x.row(i) - run.centroids.row(a)).squaredNorm();
      int best = a;
      double best_delta = 0.0;
      for (Eigen::Index b = 0; b < k; ++b) {
        if (b == a) continue;
        const int nb = count[static_cast<std::size_t>(b)];
        const double delta = nb / (nb + 1.0) * (x.row(i) - run.centroids.row(b)).squaredNorm() - cost_out;
        if (delta < best_delta - 1e-12) {
          best_delta = delta;
          best = static_cast<int>(b);
        }
      }
      if (best == a) continue;
      const int nb = count[static_cast<std::size_t>(best)];
      run.centroids.row(a) = (run.centroids.row(a) * na - x.row(i)) / (na - 1.0);
      run.centroids.row(best) = (run.centroids.row(best) * nb + x.row(i)) / (nb + 1.0);
      --count[static_cast<std::size_t>(a)];
      ++count[static_cast<std::size_t>(best)];
      run.assignment[static_cast<std::size_t>(i)] = best;
      run.inertia += best_delta;
      run.history.push_back(run.inertia);
      moved = true;
    }
  }
  // recompute exactly to drop the incremental round-off
  run.inertia = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    run.inertia += squared_distance(x, i, run.centroids, run.assignment[static_cast<std::size_t>(i)]);
}

int distinct_rows(const RowMat& x) {
  std::set<std::vector<double>> seen;
  for (Eigen::Index i = 0; i < x.rows(); ++i) seen.insert(std::vector<double>(x.row(i).data(), x.row(i).data() + x.cols()));
  return static_cast<int>(seen.size());
}

}  // namespace

KMeansResult kmeans(const RowMat& x, int k, std::uint64_t seed, int restarts, int max_iter) {
  if (x.rows() == 0) fail(ErrorKind::input, "kmeans on an empty point set");
  if (k < 1) fail(ErrorKind::config, "kmeans k must be at least 1");
  k = std::min(k, distinct_rows(x));
  const auto n = x.rows();
  std::vector<Eigen::Index> firsts(static_cast<std::size_t>(n));
  std::iota(firsts.begin(), firsts.end(), 0);
  Rng rng(seed);
  rng.shuffle(firsts);
  firsts.resize(std::min<std::size_t>(firsts.size(), static_cast<std::size_t>(std::max(1, restarts))));

  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  auto consider = [&](const std::vector<Eigen::Index>& seeds) {
    auto run = lloyd_from(x, seeds, max_iter);
    hartigan_refine(x, run);
    if (run.inertia < best.inertia - 1e-12) {
      best.assignment = std::move(run.assignment);
      best.centroids = std::move(run.centroids);
      best.inertia = run.inertia;
      best.inertia_history = std::move(run.history);
      best.iterations = run.iterations;
    }
  };
  for (auto first : firsts) consider(farthest_point_seeds(x, first, k));
  for (int r = 0; r < restarts; ++r) consider(sampled_seeds(x, k, rng));
  return best;
}

PrototypeBook init_prototypes(const RowMat& r, const std::vector<int>& labels, int m, std::uint64_t seed,
                              int restarts) {
  if (static_cast<Eigen::Index>(labels.size()) != r.rows()) fail(ErrorKind::input, "label count does not match embeddings");
  if (m < 1) fail(ErrorKind::config, "prototypes_per_class must be at least 1");
  std::map<int, std::vector<Eigen::Index>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kOthersLabel) fail(ErrorKind::input, "Others samples never receive prototypes");
    by_class[labels[i]].push_back(static_cast<Eigen::Index>(i));
  }
  if (by_class.empty()) fail(ErrorKind::input, "no embeddings to cluster");
  PrototypeBook book;
  for (const auto& [cls, rows] : by_class) {
    RowMat x(static_cast<Eigen::Index>(rows.size()), r.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = r.row(rows[i]);
    const auto km = kmeans(x, m, derive_seed(seed, "kmeans-class-" + std::to_string(cls)), restarts);
    book.inertia += km.inertia;
    for (Eigen::Index j = 0; j < km.centroids.rows(); ++j) {
      Vec mu = km.centroids.row(j).transpose();
      double norm = mu.norm();
      if (!(norm > 1e-12)) {
        // antipodal members cancel out; fall back to the first member point
        for (std::size_t i = 0; i < km.assignment.size(); ++i)
          if (km.assignment[i] == j) {
            mu = x.row(static_cast<Eigen::Index>(i)).transpose();
            break;
          }
        norm = mu.norm();
        if (!(norm > 1e-12)) fail(ErrorKind::degenerate, "class " + std::to_string(cls) + " has a zero prototype");
      }
      book.prototypes.push_back({mu / norm, cls, static_cast<int>(j)});
    }
  }
  return book;
}

// ---------------------------------------------------------------------------
// Training

double class_margin(const RowMat& r, const std::vector<int>& labels) {
  const RowMat sim = r * r.transpose();
  double same = 0.0, cross = 0.0;
  long ns = 0, nc = 0;
  for (Eigen::Index i = 0; i < r.rows(); ++i)
    for (Eigen::Index j = i + 1; j < r.rows(); ++j) {
      if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) {
        same += sim(i, j);
        ++ns;
      } else {
        cross += sim(i, j);
        ++nc;
      }
    }
  if (ns == 0 || nc == 0) fail(ErrorKind::input, "margin needs both same-class and cross-class pairs");
  return same / ns - cross / nc;
}

namespace {

RowMat gather_rows(const RowMat& x, const std::vector<std::size_t>& idx) {
  RowMat out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

bool has_pair(const std::vector<int>& labels) {
  std::set<int> seen;
  for (int l : labels)
    if (!seen.insert(l).second) return true;
  return false;
}

PrototypeBook refit(const AlignerState& aligner, const RowMat& z, const std::vector<int>& labels,
                    const AlignerConfig& cfg, const std::string& tag) {
  std::vector<std::size_t> keep;
  std::vector<int> kept_labels;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != kOthersLabel) {
      keep.push_back(i);
      kept_labels.push_back(labels[i]);
    }
  return init_prototypes(align_batch(aligner, gather_rows(z, keep)), kept_labels, cfg.prototypes_per_class,
                         derive_seed(cfg.seed, tag), cfg.kmeans_restarts);
}

}  // namespace

AlignerTrainResult train_aligner(const RowMat& z, const std::vector<int>& labels, const AlignerConfig& cfg_in) {
  AlignerConfig cfg = cfg_in;
  if (cfg.input_dim == 0) cfg.input_dim = static_cast<int>(z.cols());
  cfg.validate();
  if (z.rows() != static_cast<Eigen::Index>(labels.size())) fail(ErrorKind::input, "label count does not match DIF rows");
  if (z.cols() != cfg.input_dim) fail(ErrorKind::compatibility, "DIF dimension does not match aligner input_dim");
  std::map<int, int> support;
  for (int l : labels)
    if (l != kOthersLabel) ++support[l];
  if (support.size() < 2) fail(ErrorKind::input, "aligner training needs at least 2 knowledge-base classes");
  for (const auto& [cls, count] : support)
    if (count < cfg.prototypes_per_class)
      fail(ErrorKind::input, "class " + std::to_string(cls) + " has " + std::to_string(count) +
                                 " samples, fewer than prototypes_per_class");

  AlignerTrainResult res;
  res.aligner = AlignerState(cfg);
  AlignerState& net = res.aligner;
  AdamW opt(net.params().size(), cfg.weight_decay);
  std::unique_ptr<AdamW> proto_opt;
  Rng rng(derive_seed(cfg.seed, "aligner-train"));

  const auto n = static_cast<std::size_t>(z.rows());
  const auto batches_per_epoch = static_cast<long>((n + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size));
  const long total_steps = batches_per_epoch * cfg.epochs_total;
  PclOptions pcl_opts{cfg.tau_pcl, cfg.include_positive_in_denominator, cfg.positive_scope, cfg.pcl_positives};
  PrototypeBook book;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs_total; ++epoch) {
    const bool stage_two = epoch >= cfg.epochs_cl_only;
    if (stage_two && book.size() == 0) {
      book = refit(net, z, labels, cfg, "prototype-init");
      if (cfg.trainable_prototypes) proto_opt = std::make_unique<AdamW>(book.size() * static_cast<std::size_t>(book.dimension()), 0.0);
    }
    rng.shuffle(order);
    EpochLog log;
    log.epoch = epoch + 1;
    log.lr = cosine_lr(cfg.lr, net.steps, total_steps);
    int counted = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + static_cast<std::size_t>(cfg.batch_size))));
      std::vector<int> bl;
      for (auto i : idx) bl.push_back(labels[i]);
      const double lr = cosine_lr(cfg.lr, net.steps, total_steps);
      ++net.steps;
      if (idx.size() < 2 || !has_pair(bl)) continue;

      AlignerState::Cache cache;
      const RowMat r = net.forward(gather_rows(z, idx), &rng, &cache);
      const auto cl = supcon_loss(r, bl, cfg.tau_cl);
      double pcl_value = 0.0;
      RowMat dr = stage_two ? RowMat(cfg.lambda * cl.grad) : cl.grad;
      RowMat dmu;
      if (stage_two) {
        std::vector<Eigen::Index> rows;
        std::vector<int> pl;
        for (std::size_t i = 0; i < idx.size(); ++i)
          if (bl[i] != kOthersLabel) {
            rows.push_back(static_cast<Eigen::Index>(i));
            pl.push_back(bl[i]);
          }
        if (!rows.empty()) {
          RowMat rp(static_cast<Eigen::Index>(rows.size()), r.cols());
          for (std::size_t i = 0; i < rows.size(); ++i) rp.row(static_cast<Eigen::Index>(i)) = r.row(rows[i]);
          const auto pcl = pcl_loss(rp, pl, book, pcl_opts);
          pcl_value = pcl.loss;
          for (std::size_t i = 0; i < rows.size(); ++i) dr.row(rows[i]) += (1.0 - cfg.lambda) * pcl.grad_r.row(static_cast<Eigen::Index>(i));
          dmu = (1.0 - cfg.lambda) * pcl.grad_mu;
        }
      }
      const double total = stage_two ? (1.0 - cfg.lambda) * pcl_value + cfg.lambda * cl.loss : cl.loss;
      if (!std::isfinite(total))
        fail(ErrorKind::numerical, "aligner loss diverged at step " + std::to_string(net.steps));
      const auto grad = net.backward(cache, dr);
      opt.step(net.params(), grad, lr);
      if (!all_finite(net.params()))
        fail(ErrorKind::numerical, "aligner parameters became non-finite at step " + std::to_string(net.steps));
      if (proto_opt && dmu.size() > 0) {
        RowMat mu = book.matrix();
        proto_opt->step({mu.data(), static_cast<std::size_t>(mu.size())}, {dmu.data(), static_cast<std::size_t>(dmu.size())}, lr);
        for (std::size_t j = 0; j < book.size(); ++j) {
          const Vec row = mu.row(static_cast<Eigen::Index>(j)).transpose();
          book.prototypes[j].mu = row / row.norm();
        }
      }
      log.l_cl += cl.loss;
      log.l_pcl += pcl_value;
      log.l_total += total;
      ++counted;
    }
    if (counted > 0) {
      log.l_cl /= counted;
      log.l_pcl /= counted;
      log.l_total /= counted;
    }
    res.report.epochs.push_back(log);
  }
  res.book = refit(net, z, labels, cfg, "prototype-final");
  res.report.final_inertia = res.book.inertia;
  res.report.steps = net.steps;
  return res;
}

std::string format_train_log(const TrainReport& report) {
  std::ostringstream out;
  for (const auto& e : report.epochs)
    out << nlohmann::json{{"epoch", e.epoch}, {"l_cl", e.l_cl}, {"l_pcl", e.l_pcl}, {"l_total", e.l_total}, {"lr", e.lr}}.dump()
        << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

nlohmann::json config_json(const AlignerConfig& c) {
  return {{"input_dim", c.input_dim},
          {"hidden_dim", c.hidden_dim},
          {"output_dim", c.output_dim},
          {"dropout_rate", c.dropout_rate},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"tau_cl", c.tau_cl},
          {"tau_pcl", c.tau_pcl},
          {"lambda", c.lambda},
          {"epochs_total", c.epochs_total},
          {"epochs_cl_only", c.epochs_cl_only},
          {"prototypes_per_class", c.prototypes_per_class},
          {"include_positive_in_denominator", c.include_positive_in_denominator},
          {"trainable_prototypes", c.trainable_prototypes},
          {"positive_scope", c.positive_scope == PositiveScope::any ? "any" : "own_class"},
          {"pcl_positives", c.pcl_positives},
          {"kmeans_restarts", c.kmeans_restarts},
          {"seed", c.seed}};
}

AlignerConfig config_from_json(const nlohmann::json& j) {
  AlignerConfig c;
  c.input_dim = j.at("input_dim");
  c.hidden_dim = j.at("hidden_dim");
  c.output_dim = j.at("output_dim");
  c.dropout_rate = j.at("dropout_rate");
  c.lr = j.at("lr");
  c.weight_decay = j.at("weight_decay");
  c.batch_size = j.at("batch_size");
  c.tau_cl = j.at("tau_cl");
  c.tau_pcl = j.at("tau_pcl");
  c.lambda = j.at("lambda");
  c.epochs_total = j.at("epochs_total");
  c.epochs_cl_only = j.at("epochs_cl_only");
  c.prototypes_per_class = j.at("prototypes_per_class");
  c.include_positive_in_denominator = j.at("include_positive_in_denominator");
  c.trainable_prototypes = j.at("trainable_prototypes");
  c.positive_scope = j.at("positive_scope") == "any" ? PositiveScope::any : PositiveScope::own_class;
  c.pcl_positives = j.at("pcl_positives");
  c.kmeans_restarts = j.at("kmeans_restarts");
  c.seed = j.at("seed");
  return c;
}

}  // namespace

void save_aligner(const AlignerState& aligner, const PrototypeBook& book, std::uint64_t selection_fingerprint,
                  const std::filesystem::path& path) {
  Container c;
  c.kind = "aligner";
  nlohmann::json owners = nlohmann::json::array();
  for (const auto& p : book.prototypes) owners.push_back({p.kb_id, p.local_index});
  c.meta = {{"config", config_json(aligner.config())},
            {"selection_fingerprint", hex64(selection_fingerprint)},
            {"prototype_owners", owners},
            {"inertia", book.inertia},
            {"steps", aligner.steps}};
  c.tensors.push_back({"params", {aligner.params().size()}, aligner.params()});
  const RowMat mu = book.matrix();
  c.tensors.push_back({"prototypes",
                       {static_cast<std::uint64_t>(mu.rows()), static_cast<std::uint64_t>(mu.cols())},
                       std::vector<double>(mu.data(), mu.data() + mu.size())});
  save_container(c, path);
}

AlignerCheckpoint load_aligner(const std::filesystem::path& path) {
  const Container c = load_container(path, "aligner");
  AlignerCheckpoint out;
  try {
    out.aligner = AlignerState(config_from_json(c.meta.at("config")));
    out.aligner.steps = c.meta.at("steps");
    out.selection_fingerprint = std::stoull(c.meta.at("selection_fingerprint").get<std::string>(), nullptr, 16);
    out.book.inertia = c.meta.at("inertia");
    const auto& params = c.tensor("params");
    if (params.data.size() != out.aligner.params().size())
      fail(ErrorKind::compatibility, "aligner checkpoint parameter count does not match its config");
    out.aligner.params() = params.data;
    const auto& protos = c.tensor("prototypes");
    const auto& owners = c.meta.at("prototype_owners");
    if (protos.shape.size() != 2 || protos.shape[0] != owners.size())
      fail(ErrorKind::compatibility, "aligner checkpoint prototype table is inconsistent");
    const auto dim = static_cast<Eigen::Index>(protos.shape[1]);
    for (std::size_t i = 0; i < owners.size(); ++i) {
      Prototype p;
      p.mu = ConstVecMap(protos.data.data() + i * static_cast<std::size_t>(dim), dim);
      p.kb_id = owners[i].at(0);
      p.local_index = owners[i].at(1);
      out.book.prototypes.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, std::string("malformed aligner checkpoint: ") + e.what());
  }
  return out;
}

}  // namespace dfams
