#include "doctest.h"

#include "dfams/model.hpp"
#include "dfams/rng.hpp"
#include "test_util.hpp"

#include <cmath>
#include <filesystem>

using namespace dfams;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 3) {
  ModelConfig c;
  c.num_layers = 2;
  c.model_dim = 8;
  c.ffn_dim = 16;
  c.num_heads = 2;
  c.vocab_size = 10;
  c.max_seq_len = 6;
  c.num_classes = 3;
  c.seed = seed;
  return c;
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

// Separable toy task: the label is the block (of 4 token ids) that most tokens come from.
std::vector<LabeledSeq> separable_dataset(int n, int classes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<LabeledSeq> out;
  for (int i = 0; i < n; ++i) {
    LabeledSeq s;
    s.label = static_cast<int>(rng.below(classes));
    const int len = 3 + static_cast<int>(rng.below(4));
    for (int p = 0; p < len; ++p) s.tokens.push_back(s.label * 4 + static_cast<int>(rng.below(4)));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_CASE("init_model is deterministic and seed sensitive") {
  ModelConfig c;
  c.seed = 7;
  CHECK(init_model(c).checksum() == init_model(c).checksum());
  ModelConfig c8 = c;
  c8.seed = 8;
  CHECK(init_model(c).checksum() != init_model(c8).checksum());
  CHECK(all_finite(init_model(c).params()));
}

TEST_CASE("invalid model config names the field") {
  ModelConfig c;
  c.model_dim = 33;
  c.num_heads = 2;
  try {
    init_model(c);
    FAIL("expected configuration error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
    CHECK(std::string(e.what()).find("model_dim") != std::string::npos);
  }
  ModelConfig z;
  z.vocab_size = 0;
  CHECK_THROWS_AS(init_model(z), Error);
}

TEST_CASE("forward: shapes, purity and input validation") {
  const auto m = init_model(tiny_config());
  const TokenSeq toks{1, 4, 2, 9};
  const auto a = forward(m, toks);
  REQUIRE(a.ffn_act.size() == 2);
  CHECK(a.ffn_act[0].rows() == 4);
  CHECK(a.ffn_act[0].cols() == 16);
  CHECK(a.logits.size() == 3);
  const auto b = forward(m, toks);
  for (int l = 0; l < 2; ++l) CHECK(a.ffn_act[l] == b.ffn_act[l]);
  CHECK(a.logits == b.logits);

  CHECK_THROWS_AS(forward(m, TokenSeq{}), Error);
  CHECK_THROWS_AS(forward(m, TokenSeq{10}), Error);
  CHECK_THROWS_AS(forward(m, TokenSeq(7, 1)), Error);
}

TEST_CASE("forward: zeroed up-projection gives Act(0) at that layer") {
  auto m = init_model(tiny_config());
  m.mat(layer_tensor(1, "w1")).setZero();
  m.vec(layer_tensor(1, "b1")).setZero();
  const auto t = forward(m, TokenSeq{3, 3, 5});
  CHECK((t.ffn_act[1].array() == 0.0).all());
}

TEST_CASE("forward: activation equals Act(h . W1[:,j] + b1[j]) recomputed independently") {
  const auto m = init_model(tiny_config(11));
  const auto t = forward(m, TokenSeq{0, 7, 7, 2, 5});
  for (int l = 0; l < 2; ++l) {
    const auto w1 = m.mat(layer_tensor(l, "w1"));
    const auto b1 = m.vec(layer_tensor(l, "b1"));
    for (int p = 0; p < t.seq_len; ++p)
      for (int j = 0; j < 16; ++j) {
        double s = 0.0;
        for (int k = 0; k < 8; ++k) s += t.ffn_input[l](p, k) * w1(k, j);
        s += b1(j);
        CHECK(t.ffn_act[l](p, j) == gelu_ref(s));
      }
  }
}

TEST_CASE("loss_and_grad: uniform logits give ln(num_classes)") {
  auto m = init_model(tiny_config());
  m.mat("head_w").setZero();
  m.vec("head_b").setZero();
  const auto r = loss_and_grad(m, TokenSeq{1, 2, 3}, 1);
  CHECK(r.loss == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  CHECK_THROWS_AS(loss_and_grad(m, TokenSeq{1}, 3), Error);
}

TEST_CASE("loss_and_grad matches central finite differences on every parameter") {
  for (std::uint64_t seed : {1u, 2u}) {
    const auto m = init_model(tiny_config(seed));
    const TokenSeq toks{1, 5, 9, 0, 3};
    const int label = 2;
    const auto r = loss_and_grad(m, toks, label);
    const auto numeric = testutil::numeric_gradient(
        [&](const std::vector<double>& p) {
          ModelState q = m;
          q.params() = p;
          return loss_and_grad(q, toks, label).loss;
        },
        m.params(), 1e-5);
    CHECK(testutil::max_relative_error(r.grad, numeric) < 1e-5);
  }
}

TEST_CASE("loss_and_grad: a step against the head gradient of the correct class lowers loss") {
  auto m = init_model(tiny_config(4));
  const TokenSeq toks{2, 6, 1};
  const int label = 0;
  const auto r = loss_and_grad(m, toks, label);
  const auto& slot = m.layout().slot("head_w");
  auto head = m.mat("head_w");
  Vec dir(slot.rows);
  for (int k = 0; k < slot.rows; ++k) dir(k) = -r.grad[slot.offset + static_cast<std::size_t>(k) * slot.cols + label];
  head.col(label) += 0.05 * dir / dir.norm();
  CHECK(loss_and_grad(m, toks, label).loss < r.loss);
}

TEST_CASE("finite-difference Hessian of the toy quadratic") {
  // L = 1/2 (t1^2 + 2 t2^2)
  GradientFn g = [](const std::vector<double>& t) { return std::vector<double>{t[0], 2.0 * t[1]}; };
  const auto h = finite_difference_hessian(g, {1.0, 1.0}, {0, 1}, {{0, 1}, {1, 0}});
  CHECK(h.diagonal.at(0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(h.diagonal.at(1) == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(std::abs(h.pairs.at({0, 1})) < 1e-9);

  // linear objective: no curvature
  GradientFn lin = [](const std::vector<double>&) { return std::vector<double>{3.0, -1.5}; };
  const auto hl = finite_difference_hessian(lin, {0.2, 0.7}, {0, 1}, {});
  CHECK(std::abs(hl.diagonal.at(0)) < 1e-9);
  CHECK(std::abs(hl.diagonal.at(1)) < 1e-9);
}

TEST_CASE("hessian_terms on the model: symmetry and id validation") {
  const auto m = init_model(tiny_config(5));
  const std::vector<LabeledSeq> data{{{1, 2, 3}, 0}, {{4, 4, 8, 9}, 2}};
  const auto& lay = m.layout();
  const std::size_t a = lay.w1_index(0, 2, 3), b = lay.w1_index(0, 5, 4), c = lay.b1_index(1, 7);
  const auto h = hessian_terms(m, data, {a, c}, {{a, b}, {b, a}, {a, c}, {c, a}});
  CHECK(std::abs(h.pairs.at({a, b}) - h.pairs.at({b, a})) < 1e-6);
  CHECK(std::abs(h.pairs.at({a, c}) - h.pairs.at({c, a})) < 1e-6);
  CHECK(std::isfinite(h.diagonal.at(a)));

  const auto gn = hessian_terms(m, data, {a, c}, {{a, b}, {b, a}}, HessianMethod::gauss_newton);
  CHECK(gn.method == HessianMethod::gauss_newton);
  CHECK(gn.diagonal.at(a) >= 0.0);
  CHECK(gn.pairs.at({a, b}) == doctest::Approx(gn.pairs.at({b, a})));

  CHECK_THROWS_AS(hessian_terms(m, data, {lay.slot("tok_emb").offset}, {}), Error);
  CHECK_THROWS_AS(hessian_terms(m, {}, {a}, {}), Error);
}

TEST_CASE("train_probe_model fits a separable task deterministically") {
  auto cfg = tiny_config(9);
  cfg.vocab_size = 12;
  const auto data = separable_dataset(120, 3, 21);
  ProbeTrainOptions opts;
  opts.epochs = 50;
  opts.lr = 3e-3;
  opts.seed = 5;
  ProbeTrainReport rep;
  const auto trained = train_probe_model(init_model(cfg), data, opts, &rep);
  CHECK(rep.final_accuracy >= 0.95);
  CHECK(rep.epoch_loss.size() == 50);
  CHECK(rep.epoch_loss.back() < rep.epoch_loss.front());
  const auto again = train_probe_model(init_model(cfg), data, opts);
  CHECK(trained.checksum() == again.checksum());

  opts.epochs = 0;
  CHECK_THROWS_AS(train_probe_model(init_model(cfg), data, opts), Error);
}

TEST_CASE("model checkpoint round trip is bit exact") {
  const auto m = init_model(tiny_config(13));
  const auto path = std::filesystem::temp_directory_path() / "dfams_model_roundtrip.bin";
  save_model(m, path);
  const auto back = load_model(path);
  CHECK(back.params() == m.params());
  CHECK(back.config().ffn_dim == 16);
  std::filesystem::remove(path);
}
