#include "doctest.h"

#include "dfams/alignment.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <cmath>
#include <filesystem>

using namespace dfams;

namespace {

RowMat random_unit_rows(int n, int d, Rng& rng) {
  RowMat r(n, d);
  for (int i = 0; i < r.size(); ++i) r.data()[i] = rng.normal();
  r.rowwise().normalize();
  return r;
}

std::vector<double> flat(const RowMat& m) { return {m.data(), m.data() + m.size()}; }

RowMat unflat(const std::vector<double>& v, Eigen::Index rows, Eigen::Index cols) {
  return ConstRowMatMap(v.data(), rows, cols);
}

PrototypeBook book_from(const RowMat& mu, const std::vector<int>& owners) {
  PrototypeBook b;
  for (Eigen::Index i = 0; i < mu.rows(); ++i) b.prototypes.push_back({mu.row(i).transpose(), owners[static_cast<std::size_t>(i)], 0});
  return b;
}

// Two well separated classes plus an Others cluster, each class with 3 sub-clusters.
void separated_dataset(int per_class, int dim, std::uint64_t seed, RowMat& z, std::vector<int>& labels) {
  Rng rng(seed);
  const int classes = 3;
  RowMat centers(classes * 3, dim);
  for (int i = 0; i < centers.size(); ++i) centers.data()[i] = rng.normal();
  z.resize(classes * per_class, dim);
  labels.clear();
  for (int c = 0; c < classes; ++c)
    for (int i = 0; i < per_class; ++i) {
      const int row = c * per_class + i;
      const int sub = static_cast<int>(rng.below(3));
      for (int k = 0; k < dim; ++k) z(row, k) = 2.0 * centers(c * 3 + sub, k) + 0.5 * rng.normal();
      labels.push_back(c);  // class 0 is Others
    }
}

AlignerConfig small_aligner(int in) {
  AlignerConfig c;
  c.input_dim = in;
  c.hidden_dim = 32;
  c.output_dim = 8;
  c.lr = 3e-3;
  c.batch_size = 32;
  c.epochs_total = 8;
  c.epochs_cl_only = 5;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("supcon: symmetric batch gives 4 ln 3") {
  RowMat r = RowMat::Zero(4, 3);
  r.col(0).setOnes();
  const auto out = supcon_loss(r, {1, 1, 2, 2}, 0.07);
  CHECK(out.loss == doctest::Approx(4.0 * std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("supcon: bound, invariances and exact gradients") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = random_unit_rows(6, 5, rng);
    std::vector<int> labels;
    for (int i = 0; i < 6; ++i) labels.push_back(static_cast<int>(rng.below(3)));
    labels[1] = labels[0];
    const auto out = supcon_loss(r, labels, 0.07);
    CHECK(out.loss >= 0.0);

    // direct evaluation of the sum over anchors
    double direct = 0.0;
    for (int i = 0; i < 6; ++i) {
      double denom = 0.0;
      for (int a = 0; a < 6; ++a)
        if (a != i) denom += std::exp(r.row(i).dot(r.row(a)) / 0.07);
      int np = 0;
      double s = 0.0;
      for (int p = 0; p < 6; ++p)
        if (p != i && labels[p] == labels[i]) {
          ++np;
          s += std::log(std::exp(r.row(i).dot(r.row(p)) / 0.07) / denom);
        }
      if (np > 0) direct -= s / np;
    }
    CHECK(out.loss == doctest::Approx(direct).epsilon(1e-10));

    std::vector<int> renamed;
    for (int l : labels) renamed.push_back(10 + 7 * l);
    CHECK(supcon_loss(r, renamed, 0.07).loss == doctest::Approx(out.loss).epsilon(1e-13));

    RowMat shuffled(6, 5);
    std::vector<int> sl(6);
    const int perm[6] = {3, 5, 0, 1, 4, 2};
    for (int i = 0; i < 6; ++i) {
      shuffled.row(i) = r.row(perm[i]);
      sl[i] = labels[perm[i]];
    }
    CHECK(supcon_loss(shuffled, sl, 0.07).loss == doctest::Approx(out.loss).epsilon(1e-13));

    const auto num = testutil::numeric_gradient5(
        [&](const std::vector<double>& v) { return supcon_loss(unflat(v, 6, 5), labels, 0.07).loss; }, flat(r), 1e-4);
    CHECK(testutil::max_relative_error(flat(out.grad), num) < 1e-6);
  }
}

TEST_CASE("supcon errors") {
  RowMat one = RowMat::Ones(1, 3);
  CHECK_THROWS_AS(supcon_loss(one, {1}, 0.07), Error);
  RowMat two = RowMat::Identity(2, 3);
  try {
    supcon_loss(two, {1, 2}, 0.07);
    FAIL("expected degenerate batch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::degenerate);
  }
}

TEST_CASE("pcl: literal and standard denominators") {
  RowMat mu(2, 2);
  mu << 1.0, 0.0, 0.0, 1.0;
  const auto book = book_from(mu, {1, 2});
  RowMat r(1, 2);
  r << 1.0, 0.0;
  PclOptions opts;
  opts.tau = 1.0;
  CHECK(pcl_loss(r, {1}, book, opts).loss == doctest::Approx(-1.0).epsilon(1e-12));
  opts.include_positive_in_denominator = true;
  CHECK(pcl_loss(r, {1}, book, opts).loss == doctest::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 1.0))).epsilon(1e-12));
  CHECK(pcl_loss(r, {1}, book, opts).loss == doctest::Approx(0.3133).epsilon(1e-4));
}

TEST_CASE("pcl: nearest-prototype ties go to the lower index") {
  RowMat mu(3, 2);
  mu << 1.0, 0.0, 0.0, 1.0, -1.0, 0.0;
  const auto book = book_from(mu, {1, 1, 2});
  RowMat r(1, 2);
  r << M_SQRT1_2, M_SQRT1_2;
  PclOptions opts;
  opts.tau = 1.0;
  const auto out = pcl_loss(r, {1}, book, opts);
  // positive is prototype 0: its coefficient pulls r towards mu_0
  const double s0 = M_SQRT1_2, s1 = M_SQRT1_2, s2 = -M_SQRT1_2;
  CHECK(out.loss == doctest::Approx(-(s0 - std::log(std::exp(s1) + std::exp(s2)))).epsilon(1e-12));
  CHECK(out.grad_mu(0, 0) < 0.0);
  CHECK(out.grad_mu(1, 0) > 0.0);
}

TEST_CASE("pcl gradients match finite differences") {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = random_unit_rows(5, 4, rng);
    const auto mu = random_unit_rows(4, 4, rng);
    const std::vector<int> owners{1, 1, 2, 3};
    std::vector<int> labels;
    for (int i = 0; i < 5; ++i) labels.push_back(1 + static_cast<int>(rng.below(3)));
    for (bool standard : {false, true})
      for (auto scope : {PositiveScope::own_class, PositiveScope::any}) {
        PclOptions opts;
        opts.tau = 0.07;
        opts.include_positive_in_denominator = standard;
        opts.scope = scope;
        const auto out = pcl_loss(r, labels, book_from(mu, owners), opts);
        const auto nr = testutil::numeric_gradient5(
            [&](const std::vector<double>& v) { return pcl_loss(unflat(v, 5, 4), labels, book_from(mu, owners), opts).loss; },
            flat(r), 1e-4);
        CHECK(testutil::max_relative_error(flat(out.grad_r), nr) < 1e-6);
        const auto nm = testutil::numeric_gradient5(
            [&](const std::vector<double>& v) { return pcl_loss(r, labels, book_from(unflat(v, 4, 4), owners), opts).loss; },
            flat(mu), 1e-4);
        CHECK(testutil::max_relative_error(flat(out.grad_mu), nm) < 1e-6);
      }
  }
}

TEST_CASE("pcl errors") {
  RowMat mu(1, 2);
  mu << 1.0, 0.0;
  RowMat r(1, 2);
  r << 1.0, 0.0;
  CHECK_THROWS_AS(pcl_loss(r, {1}, book_from(mu, {1}), PclOptions{}), Error);
  RowMat mu2(2, 2);
  mu2 << 1.0, 0.0, 0.0, 1.0;
  CHECK_THROWS_AS(pcl_loss(r, {3}, book_from(mu2, {1, 2}), PclOptions{}), Error);
}

TEST_CASE("kmeans: trivial and degenerate classes") {
  RowMat pts(3, 2);
  pts << 1.0, 0.0, 0.0, 1.0, -1.0, 0.0;
  auto book = init_prototypes(pts, {4, 4, 4}, 3, 1);
  REQUIRE(book.size() == 3);
  CHECK(book.inertia == doctest::Approx(0.0));
  for (int i = 0; i < 3; ++i) {
    bool found = false;
    for (const auto& p : book.prototypes) found |= (p.mu.transpose() - pts.row(i)).norm() < 1e-12;
    CHECK(found);
  }
  RowMat same = RowMat::Ones(5, 2) * M_SQRT1_2;
  book = init_prototypes(same, {2, 2, 2, 2, 2}, 3, 1);
  CHECK(book.size() == 1);
  CHECK(book.prototypes[0].mu.norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(init_prototypes(same, {0, 2, 2, 2, 2}, 3, 1), Error);
}

TEST_CASE("kmeans matches the brute-force partition oracle") {
  Rng rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 5 + static_cast<int>(rng.below(4));
    const int k = 2 + static_cast<int>(rng.below(2));
    RowMat x(n, 3);
    for (int i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    const auto km = kmeans(x, k, 7);
    const auto best = oracle::best_partition(x, k);
    CHECK(km.inertia == doctest::Approx(best.inertia).epsilon(1e-10));
    CHECK(oracle::canonical(km.assignment) == best.assignment);
  }
}

TEST_CASE("kmeans: inertia is non-increasing and the fixpoint is stable") {
  Rng rng(2);
  RowMat x(60, 4);
  for (int i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  const auto km = kmeans(x, 5, 3, 1);
  for (std::size_t i = 1; i < km.inertia_history.size(); ++i)
    CHECK(km.inertia_history[i] <= km.inertia_history[i - 1] + 1e-12);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < km.centroids.rows(); ++j)
      if ((x.row(i) - km.centroids.row(j)).squaredNorm() < (x.row(i) - km.centroids.row(best)).squaredNorm()) best = j;
    CHECK(best == km.assignment[static_cast<std::size_t>(i)]);
  }
}

TEST_CASE("aligner: unit outputs, purity and exact backprop") {
  AlignerConfig cfg;
  cfg.input_dim = 6;
  cfg.hidden_dim = 7;
  cfg.output_dim = 4;
  cfg.seed = 5;
  const AlignerState net(cfg);
  Rng rng(1);
  Vec z(6);
  for (int i = 0; i < 6; ++i) z(i) = rng.normal();
  const Vec r = align(net, z);
  CHECK(std::abs(r.norm() - 1.0) < 1e-9);
  CHECK(align(net, z) == r);
  CHECK((align(net, 2.0 * z) - r).norm() > 0.0);
  CHECK_THROWS_AS(align(net, Vec::Ones(5)), Error);

  RowMat zb(3, 6);
  for (int i = 0; i < zb.size(); ++i) zb.data()[i] = rng.normal();
  RowMat w(3, 4);
  for (int i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  AlignerState::Cache cache;
  net.forward(zb, nullptr, &cache);
  const auto grad = net.backward(cache, w);
  AlignerState probe = net;
  const auto num = testutil::numeric_gradient(
      [&](const std::vector<double>& p) {
        probe.params() = p;
        return probe.forward(zb).cwiseProduct(w).sum();
      },
      net.params(), 1e-6);
  CHECK(testutil::max_relative_error(grad, num) < 1e-6);
}

TEST_CASE("train_aligner separates classes and honours the schedule") {
  RowMat z;
  std::vector<int> labels;
  separated_dataset(80, 12, 4, z, labels);
  auto cfg = small_aligner(12);
  const auto res = train_aligner(z, labels, cfg);
  CHECK(res.report.epochs.size() == 8);
  CHECK(class_margin(align_batch(res.aligner, z), labels) >= 0.3);
  for (const auto& p : res.book.prototypes) {
    CHECK(p.kb_id != kOthersLabel);
    CHECK(std::abs(p.mu.norm() - 1.0) < 1e-9);
  }
  for (const auto& [kb, count] : res.book.counts()) CHECK((count >= 1 && count <= 3));
  for (int e = 0; e < 5; ++e) CHECK(res.report.epochs[e].l_pcl == 0.0);
  CHECK(res.report.epochs.back().l_pcl != 0.0);

  const auto again = train_aligner(z, labels, cfg);
  CHECK(again.aligner.params() == res.aligner.params());
  CHECK(again.report.epochs.back().l_total == res.report.epochs.back().l_total);

  cfg.lambda = 1.0;
  const auto cl_only = train_aligner(z, labels, cfg);
  for (const auto& e : cl_only.report.epochs) CHECK(std::abs(e.l_total - e.l_cl) <= 1e-12);
  CHECK(cl_only.report.epochs.back().l_pcl != 0.0);

  cfg.lambda = 0.95;
  cfg.epochs_cl_only = cfg.epochs_total;
  const auto no_stage_two = train_aligner(z, labels, cfg);
  for (const auto& e : no_stage_two.report.epochs) CHECK(e.l_pcl == 0.0);
  CHECK(no_stage_two.book.size() > 0);

  cfg.epochs_cl_only = 5;
  cfg.trainable_prototypes = true;
  const auto trainable = train_aligner(z, labels, cfg);
  for (const auto& p : trainable.book.prototypes) CHECK(std::abs(p.mu.norm() - 1.0) < 1e-9);
}

TEST_CASE("train_aligner input validation") {
  RowMat z;
  std::vector<int> labels;
  separated_dataset(10, 4, 1, z, labels);
  auto cfg = small_aligner(4);
  cfg.epochs_cl_only = 9;
  CHECK_THROWS_AS(train_aligner(z, labels, cfg), Error);
  cfg = small_aligner(4);
  cfg.prototypes_per_class = 11;
  CHECK_THROWS_AS(train_aligner(z, labels, cfg), Error);
  cfg = small_aligner(4);
  cfg.tau_cl = 0.0;
  CHECK_THROWS_AS(train_aligner(z, labels, cfg), Error);
  std::vector<int> single(labels.size(), 1);
  CHECK_THROWS_AS(train_aligner(z, single, small_aligner(4)), Error);
}

TEST_CASE("aligner checkpoint round trip") {
  RowMat z;
  std::vector<int> labels;
  separated_dataset(20, 6, 2, z, labels);
  auto cfg = small_aligner(6);
  cfg.epochs_total = 2;
  cfg.epochs_cl_only = 1;
  const auto res = train_aligner(z, labels, cfg);
  const auto path = std::filesystem::temp_directory_path() / "dfams_aligner.bin";
  save_aligner(res.aligner, res.book, 0xabcdefULL, path);
  const auto back = load_aligner(path);
  CHECK(back.selection_fingerprint == 0xabcdefULL);
  CHECK(back.aligner.params() == res.aligner.params());
  CHECK(back.book.matrix() == res.book.matrix());
  CHECK(back.book.counts() == res.book.counts());
  CHECK(align_batch(back.aligner, z) == align_batch(res.aligner, z));
  std::filesystem::remove(path);
  CHECK(format_train_log(res.report).find("\"l_pcl\"") != std::string::npos);
}
