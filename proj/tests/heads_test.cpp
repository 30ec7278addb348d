#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"
#include "vql/core/rng.hpp"
#include "vql/heads/heads.hpp"
#include "vql/synth/scene.hpp"

using namespace vql;
using namespace vql::heads;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

VectorXd random_vector(Eigen::Index n, Rng& rng) { return random_matrix(n, 1, rng).col(0); }

HeadConfig small_head(Variant v) {
  HeadConfig cfg;
  cfg.variant = v;
  cfg.num_heads = 2;
  cfg.num_layers = 1;
  cfg.c_out = 4;
  cfg.ffn_mult = 2;
  cfg.feature_dim = 5;
  cfg.title_dim = 3;
  return cfg;
}

features::ProposalSet proposal_set(const MatrixXd& feats) {
  features::ProposalSet ps;
  ps.frame_width = 80;
  ps.frame_height = 64;
  ps.features = feats;
  for (Eigen::Index j = 0; j < feats.rows(); ++j) {
    ps.proposals.push_back({Box{2.0 + 3.0 * j, 4.0 + j, 10.0, 8.0}, 0.5});
  }
  return ps;
}

constexpr Variant kAllVariants[] = {Variant::kSiam, Variant::kSelfAttention, Variant::kCrossAttention,
                                    Variant::kCocoConcat, Variant::kCocoCond};

}  // namespace

TEST_CASE("conditional projection worked example") {
  ConditionalGenerator<double> g(2, 2, 2);
  for (int o = 0; o < 2; ++o) {
    for (int i = 0; i < 2; ++i) {
      for (int c = 0; c < 2; ++c) g.at(o, i, c) = 0.1 * (4 * o + 2 * i + c);
    }
  }
  const VectorXd q = (VectorXd(2) << 1, 2).finished();
  const MatrixXd x = (MatrixXd(1, 2) << 1, 1).finished();
  const MatrixXd m = g.contract(q);
  CHECK(m(0, 0) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(m(0, 1) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(m(1, 0) == doctest::Approx(1.4).epsilon(1e-12));
  CHECK(m(1, 1) == doctest::Approx(2.0).epsilon(1e-12));
  const MatrixXd out = conditional_projection(g, q, x);
  CHECK(out(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(out(0, 1) == doctest::Approx(3.4).epsilon(1e-12));
}

TEST_CASE("conditional projection matches the loop oracle on random configurations") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const int co = static_cast<int>(rng.integer(1, 7)), ci = static_cast<int>(rng.integer(1, 7));
    const int cc = static_cast<int>(rng.integer(1, 7)), n = static_cast<int>(rng.integer(1, 6));
    ConditionalGenerator<double> g(co, ci, cc);
    g.weight = random_matrix(g.weight.rows(), g.weight.cols(), rng);
    const VectorXd q = random_vector(cc, rng);
    const MatrixXd xs = random_matrix(n, ci, rng);
    const MatrixXd expected = oracle::contraction(g, q, xs);
    CHECK((conditional_projection(g, q, xs) - expected).cwiseAbs().maxCoeff() <= 1e-10);

    ad::Tape<double> tape;
    const auto recorded = conditional_projection(tape.constant(g.weight), tape.constant(MatrixXd(q.transpose())),
                                                 tape.constant(xs), co);
    CHECK((recorded.value() - expected).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("conditional projection special cases") {
  Rng rng(3);
  const MatrixXd xs = random_matrix(4, 3, rng);
  // Identity map: W[o][i][0] = [o == i], q = [1].
  ConditionalGenerator<double> id(3, 3, 1);
  for (int o = 0; o < 3; ++o) id.at(o, o, 0) = 1.0;
  CHECK(conditional_projection(id, VectorXd(VectorXd::Ones(1)), xs) == xs);

  ConditionalGenerator<double> g(2, 3, 4);
  g.weight = random_matrix(g.weight.rows(), g.weight.cols(), rng);
  CHECK(conditional_projection(g, VectorXd(VectorXd::Zero(4)), xs).isZero(0.0));

  // Linear in q and in x.
  const VectorXd q1 = random_vector(4, rng), q2 = random_vector(4, rng);
  const MatrixXd x2 = random_matrix(4, 3, rng);
  const MatrixXd lhs_q = conditional_projection(g, VectorXd(2.0 * q1 - 0.5 * q2), xs);
  const MatrixXd rhs_q = 2.0 * conditional_projection(g, q1, xs) - 0.5 * conditional_projection(g, q2, xs);
  CHECK((lhs_q - rhs_q).cwiseAbs().maxCoeff() <= 1e-12);
  const MatrixXd lhs_x = conditional_projection(g, q1, MatrixXd(3.0 * xs + x2));
  const MatrixXd rhs_x = 3.0 * conditional_projection(g, q1, xs) + conditional_projection(g, q1, x2);
  CHECK((lhs_x - rhs_x).cwiseAbs().maxCoeff() <= 1e-12);

  CHECK_THROWS_AS(conditional_projection(g, VectorXd(VectorXd::Zero(3)), xs), NumericError);
}

TEST_CASE("set attention matches a loop oracle on a two-element set") {
  Rng rng(17);
  ad::ParamStore<double> store;
  init_attention_params(store, "a", 4, 8, 1, false, rng);
  // Perturb norms and biases so every term participates.
  for (auto& [name, p] : store) p.value += 0.1 * random_matrix(p.value.rows(), p.value.cols(), rng);
  const MatrixXd x = random_matrix(2, 4, rng);
  for (int heads : {1, 2}) {
    const MatrixXd got = set_attention(store, "a", x, 1, heads);
    CHECK((got - oracle::attention_block(store, "a0.", x, heads)).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("set attention is permutation equivariant") {
  Rng rng(5);
  ad::ParamStore<double> store;
  init_attention_params(store, "a", 8, 16, 2, false, rng);
  const MatrixXd x = random_matrix(6, 8, rng);
  const MatrixXd y = set_attention(store, "a", x, 2, 4);
  std::vector<int> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 50; ++trial) {
    rng.shuffle(perm);
    MatrixXd xp(6, 8);
    for (int i = 0; i < 6; ++i) xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
    const MatrixXd yp = set_attention(store, "a", xp, 2, 4);
    for (int i = 0; i < 6; ++i) CHECK((yp.row(i) - y.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("blocks with zeroed output projections are the identity") {
  Rng rng(8);
  ad::ParamStore<double> store;
  init_attention_params(store, "a", 4, 8, 3, false, rng);
  for (int l = 0; l < 3; ++l) {
    for (const char* n : {".out.w", ".out.b", ".ffn2.w", ".ffn2.b"}) store.value("a" + std::to_string(l) + n).setZero();
  }
  const MatrixXd x = random_matrix(5, 4, rng);
  CHECK(set_attention(store, "a", x, 3, 2) == x);
}

TEST_CASE("per-proposal scores follow the proposals under permutation") {
  Rng rng(12);
  for (Variant v : kAllVariants) {
    HeadModel<double> head(small_head(v), 4);
    const MatrixXd feats = random_matrix(7, 5, rng);
    const VectorXd q = random_vector(5, rng);
    const VectorXd s = head.score(q, nullptr, proposal_set(feats)).scores;
    std::vector<int> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    for (int trial = 0; trial < 50; ++trial) {
      rng.shuffle(perm);
      MatrixXd fp(7, 5);
      for (int i = 0; i < 7; ++i) fp.row(i) = feats.row(perm[static_cast<std::size_t>(i)]);
      const VectorXd sp = head.score(q, nullptr, proposal_set(fp)).scores;
      for (int i = 0; i < 7; ++i) CHECK(std::abs(sp(i) - s(perm[static_cast<std::size_t>(i)])) <= 1e-10);
    }
  }
}

TEST_CASE("siam scores identical directions at sigmoid of the temperature") {
  HeadConfig cfg = small_head(Variant::kSiam);
  cfg.use_box_refine = false;
  HeadModel<double> head(cfg, 1);
  const double tau = head.params().value("siam.temperature")(0, 0);
  Rng rng(4);
  const VectorXd q = random_vector(5, rng);
  MatrixXd feats(3, 5);
  feats.row(0) = q.transpose();
  feats.row(1) = 2.5 * q.transpose();
  feats.row(2) = random_vector(5, rng).transpose();
  const auto out = head.score(q, nullptr, proposal_set(feats));
  CHECK(out.scores(0) == doctest::Approx(1.0 / (1.0 + std::exp(-tau))).epsilon(1e-12));
  CHECK(out.scores(1) == doctest::Approx(out.scores(0)).epsilon(1e-12));
  // Rescaling every feature leaves cosine scores unchanged.
  const auto scaled = head.score(VectorXd(3.0 * q), nullptr, proposal_set(MatrixXd(7.0 * feats)));
  CHECK((scaled.scores - out.scores).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("a zero classifier scores one half everywhere") {
  Rng rng(6);
  for (Variant v : kAllVariants) {
    if (v == Variant::kSiam) continue;
    HeadModel<double> head(small_head(v), 9);
    head.params().value("cls.w").setZero();
    head.params().value("cls.b").setZero();
    const auto out = head.score(random_vector(5, rng), nullptr, proposal_set(random_matrix(4, 5, rng)));
    CHECK(out.scores.isApproxToConstant(0.5, 0.0));
  }
}

TEST_CASE("without box refinement proposal boxes pass through verbatim") {
  Rng rng(7);
  for (Variant v : kAllVariants) {
    HeadConfig cfg = small_head(v);
    cfg.use_box_refine = false;
    HeadModel<double> head(cfg, 2);
    const auto ps = proposal_set(random_matrix(3, 5, rng));
    const auto out = head.score(random_vector(5, rng), nullptr, ps);
    CHECK_FALSE(out.deltas.has_value());
    for (int j = 0; j < ps.size(); ++j) CHECK(out.boxes[static_cast<std::size_t>(j)] == ps.proposals[static_cast<std::size_t>(j)].box);
  }
}

TEST_CASE("box deltas round trip") {
  const Box from{10, 12, 8, 6}, to{13.5, 9, 11, 4.5};
  const Box back = apply_deltas(from, encode_deltas(from, to));
  CHECK(back.x == doctest::Approx(to.x).epsilon(1e-12));
  CHECK(back.y == doctest::Approx(to.y).epsilon(1e-12));
  CHECK(back.w == doctest::Approx(to.w).epsilon(1e-12));
  CHECK(back.h == doctest::Approx(to.h).epsilon(1e-12));
  CHECK(apply_deltas(from, Eigen::Vector4d::Zero()) == from);
}

TEST_CASE("parameter gradients match finite differences for every variant") {
  Rng rng(99);
  for (Variant v : kAllVariants) {
    for (bool text : {false, true}) {
      HeadConfig cfg = small_head(v);
      cfg.use_text = text;
      HeadModel<double> head(cfg, 21);
      for (auto& [name, p] : head.params()) p.value += 0.05 * random_matrix(p.value.rows(), p.value.cols(), rng);
      head.set_input_normalization(random_vector(5, rng) * 0.1, VectorXd::Constant(5, 1.3));
      const MatrixXd feats = random_matrix(4, 5, rng);
      const VectorXd q = random_vector(5, rng);
      const VectorXd title = random_vector(3, rng);
      const MatrixXd wp = random_matrix(4, 1, rng), wd = random_matrix(4, 4, rng);

      const auto objective = [&](ad::Tape<double>& tape) {
        const auto g = head.forward(tape, q, &title, feats);
        auto l = ad::sum(ad::hadamard(g.probs, tape.constant(wp)));
        if (g.deltas) l = l + ad::sum(ad::hadamard(*g.deltas, tape.constant(wd)));
        return l;
      };
      head.params().zero_grad();
      ad::Tape<double> tape;
      tape.backward(objective(tape));

      int checked = 0;
      for (auto& [name, p] : head.params()) {
        for (Eigen::Index k = 0; k < p.value.size(); k += std::max<Eigen::Index>(1, p.value.size() / 3)) {
          const double orig = p.value.data()[k];
          const double eps = 1e-6;
          p.value.data()[k] = orig + eps;
          ad::Tape<double> t1;
          const double up = objective(t1).value()(0, 0);
          p.value.data()[k] = orig - eps;
          ad::Tape<double> t2;
          const double down = objective(t2).value()(0, 0);
          p.value.data()[k] = orig;
          const double numeric = (up - down) / (2 * eps);
          INFO(to_string(v), " ", name, "[", k, "]");
          CHECK(p.grad.data()[k] == doctest::Approx(numeric).epsilon(1e-5).scale(1e-4));
          ++checked;
        }
      }
      CHECK(checked > 10);
    }
  }
}

TEST_CASE("title prompts and embeddings") {
  CHECK(title_prompt("wallet") == "a photo of a wallet");
  const VectorXd a = embed_title("wallet", 64);
  CHECK(a.norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(a == embed_title("wallet", 64));
  CHECK_THROWS_AS(embed_title("", 64), DataError);

  const auto catalog = synth::title_catalog();
  std::vector<VectorXd> e;
  for (const auto& t : catalog) e.push_back(embed_title(t, 64));
  double worst = -1.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    for (std::size_t j = i + 1; j < e.size(); ++j) worst = std::max(worst, e[i].dot(e[j]));
  }
  CHECK(worst < 0.99);
}

TEST_CASE("head config validation and json") {
  HeadConfig cfg;
  cfg.num_heads = 3;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  CHECK_THROWS_AS(parse_variant("siamese"), ConfigError);
  auto j = to_json(HeadConfig{});
  CHECK(to_json(head_config_from_json(j)) == j);
  j["dropout"] = 0.1;
  CHECK_THROWS_AS(head_config_from_json(j), ConfigError);
}
