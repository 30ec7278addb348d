#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "vql/core/rng.hpp"
#include "vql/synth/scene.hpp"
#include "vql/train/train.hpp"

using namespace vql;
using namespace vql::train;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

features::ProposalSet set_of(const std::vector<Box>& boxes) {
  features::ProposalSet ps;
  ps.frame_width = 80;
  ps.frame_height = 64;
  for (const Box& b : boxes) ps.proposals.push_back({b, 0.5});
  ps.features = MatrixXd::Zero(static_cast<Eigen::Index>(boxes.size()), 2);
  return ps;
}

// Balanced BCE plus smooth-L1 on centre/log-size offsets, spelled out per scalar.
double loss_oracle(const VectorXd& p, const MatrixXd& d, const VectorXd& y, const Box& gt, const std::vector<Box>& boxes,
                   const TrainConfig& cfg) {
  double npos = 0, nneg = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i) (y(i) > 0 ? npos : nneg) += 1;
  const double wpos = npos > 0 && nneg > 0 ? std::min(nneg / npos, cfg.pos_weight_cap) : 1.0;
  double num = 0, den = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double w = y(i) > 0 ? wpos : 1.0;
    const double pc = std::min(std::max(p(i), cfg.clamp_eps), 1 - cfg.clamp_eps);
    num += y(i) > 0 ? -w * std::log(pc) : -w * std::log(1 - pc);
    den += w;
  }
  double box = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y(i) == 0) continue;
    const Box& b = boxes[static_cast<std::size_t>(i)];
    const double t[4] = {(gt.x + gt.w / 2 - (b.x + b.w / 2)) / b.w, (gt.y + gt.h / 2 - (b.y + b.h / 2)) / b.h,
                         std::log(gt.w / b.w), std::log(gt.h / b.h)};
    for (int k = 0; k < 4; ++k) {
      const double a = std::abs(d(i, k) - t[k]);
      box += a < 1.0 ? 0.5 * a * a : a - 0.5;
    }
  }
  if (npos > 0) box /= npos;
  return cfg.cls_weight * num / den + cfg.box_weight * box;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.backbone.channels = {4};
  cfg.backbone.grid = 2;
  cfg.backbone.feature_dim = 8;
  cfg.head.feature_dim = 8;
  cfg.head.c_out = 8;
  cfg.head.num_heads = 2;
  cfg.head.num_layers = 1;
  cfg.head.ffn_mult = 2;
  cfg.batch_size = 2;
  cfg.total_steps = 6;
  cfg.seed = 5;
  return cfg;
}

Dataset tiny_data(int videos = 3) {
  synth::SceneSpec spec;
  spec.num_videos = videos;
  spec.frames_per_video = 32;
  spec.seed = 21;
  return synth::generate(spec);
}

std::vector<const AnnotationRecord*> records_of(const Dataset& d) {
  std::vector<const AnnotationRecord*> out;
  for (const auto& v : d) {
    for (const auto& r : v.records) out.push_back(&r);
  }
  return out;
}

bool same_params(const heads::HeadModel<double>& a, const heads::HeadModel<double>& b) {
  for (const auto& [name, p] : a.params()) {
    if (p.value != b.params().value(name)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("constant one-half scores on a balanced set cost ln 2") {
  TrainConfig cfg;
  const auto ps = set_of({{0, 0, 4, 4}, {10, 10, 4, 4}, {20, 0, 4, 4}, {30, 30, 4, 4}});
  const VectorXd labels = (VectorXd(4) << 1, 0, 1, 0).finished();
  const LossValue v = loss(VectorXd::Constant(4, 0.5), MatrixXd(), labels, std::nullopt, ps, cfg);
  CHECK(v.cls == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(v.box == 0.0);

  const VectorXd perfect = (VectorXd(4) << 1, 0, 1, 0).finished();
  CHECK(loss(perfect, MatrixXd(), labels, std::nullopt, ps, cfg).cls <= -std::log(1 - cfg.clamp_eps) + 1e-15);
}

TEST_CASE("class weights balance positives against negatives") {
  const VectorXd w = bce_weights((VectorXd(5) << 1, 0, 0, 0, 0).finished(), 10.0);
  CHECK(w(0) == 4.0);
  CHECK(w(1) == 1.0);
  CHECK(bce_weights(VectorXd::Zero(30).cwiseMax((VectorXd(30) << 1, VectorXd::Zero(29)).finished()), 10.0)(0) == 10.0);
  CHECK(bce_weights(VectorXd::Ones(3), 10.0) == VectorXd::Ones(3));
}

TEST_CASE("loss matches the scalar oracle on random six-proposal sets") {
  Rng rng(8);
  TrainConfig cfg;
  cfg.box_weight = 0.7;
  cfg.cls_weight = 1.3;
  for (int trial = 0; trial < 50; ++trial) {
    const Box gt{rng.uniform(10, 40), rng.uniform(10, 30), rng.uniform(6, 20), rng.uniform(6, 20)};
    std::vector<Box> boxes;
    VectorXd labels(6), p(6);
    MatrixXd d(6, 4);
    for (int i = 0; i < 6; ++i) {
      const Box b = rng.uniform() < 0.4 ? Box{gt.x + rng.uniform(-1, 1), gt.y + rng.uniform(-1, 1), gt.w * rng.uniform(0.9, 1.1), gt.h}
                                        : Box{rng.uniform(0, 60), rng.uniform(0, 50), rng.uniform(3, 15), rng.uniform(3, 12)};
      boxes.push_back(b);
      labels(i) = iou(b, gt) >= 0.5 ? 1.0 : 0.0;
      p(i) = rng.uniform(0.01, 0.99);
      for (int k = 0; k < 4; ++k) d(i, k) = rng.uniform(-2, 2);
    }
    const auto ps = set_of(boxes);
    const double expected = loss_oracle(p, d, labels, gt, boxes, cfg);
    CHECK(loss(p, d, labels, gt, ps, cfg).total == doctest::Approx(expected).epsilon(1e-10));

    ad::Tape<double> tape;
    heads::HeadModel<double>::Graph g{tape.constant(p), tape.constant(d)};
    CHECK(train::loss(g, labels, gt, ps, cfg).value()(0, 0) == doctest::Approx(expected).epsilon(1e-10));
  }
}

TEST_CASE("recorded loss gradients match finite differences") {
  Rng rng(31);
  TrainConfig cfg;
  const Box gt{20, 20, 10, 12};
  const std::vector<Box> boxes{{20, 20, 10, 12}, {21, 19, 9, 12}, {50, 40, 8, 8}, {5, 5, 6, 6}, {20.5, 21, 10, 11}, {40, 5, 9, 9}};
  const auto ps = set_of(boxes);
  VectorXd labels(6);
  for (int i = 0; i < 6; ++i) labels(i) = iou(boxes[static_cast<std::size_t>(i)], gt) >= 0.5;
  VectorXd p(6);
  MatrixXd d(6, 4);
  for (int i = 0; i < 6; ++i) {
    p(i) = rng.uniform(0.05, 0.95);
    for (int k = 0; k < 4; ++k) d(i, k) = rng.uniform(-1.5, 1.5);
  }
  ad::Tape<double> tape;
  heads::HeadModel<double>::Graph g{tape.constant(p), tape.constant(d)};
  tape.backward(train::loss(g, labels, gt, ps, cfg));
  const double eps = 1e-6;
  for (int i = 0; i < 6; ++i) {
    VectorXd up = p, down = p;
    up(i) += eps;
    down(i) -= eps;
    const double numeric = (loss(up, d, labels, gt, ps, cfg).total - loss(down, d, labels, gt, ps, cfg).total) / (2 * eps);
    CHECK(g.probs.grad()(i, 0) == doctest::Approx(numeric).epsilon(1e-6));
    for (int k = 0; k < 4; ++k) {
      MatrixXd du = d, dd = d;
      du(i, k) += eps;
      dd(i, k) -= eps;
      const double nd = (loss(p, du, labels, gt, ps, cfg).total - loss(p, dd, labels, gt, ps, cfg).total) / (2 * eps);
      CHECK(g.deltas->grad()(i, k) == doctest::Approx(nd).epsilon(1e-6).scale(1e-8));
    }
  }
}

TEST_CASE("schedule and config") {
  Schedule s;
  CHECK(s.lr_at(0) == 0.01);
  CHECK(s.lr_at(1999) == 0.01);
  CHECK(s.lr_at(2000) == doctest::Approx(0.001));
  CHECK(s.lr_at(4000) == doctest::Approx(0.0001));

  const auto j = to_json(TrainConfig{});
  CHECK(to_json(train_config_from_json(j)) == j);
  auto bad = j;
  bad["sampler"]["bps_positve_prob"] = 0.5;
  try {
    train_config_from_json(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("bps_positve_prob") != std::string::npos);
  }
  TrainConfig mismatch;
  mismatch.head.feature_dim = 32;
  CHECK_THROWS_AS(validate(mismatch), ConfigError);
}

TEST_CASE("a zero learning rate leaves parameters unchanged") {
  const TrainConfig cfg = tiny_config();
  heads::HeadModel<double> head(cfg.head, 3);
  const heads::HeadModel<double> before = head;
  for (auto& [name, p] : head.params()) p.grad.setConstant(0.25);
  std::map<std::string, MatrixXd> momentum;
  sgd_step(head, momentum, 0.0, cfg);
  CHECK(same_params(head, before));
  CHECK(momentum.size() == static_cast<std::size_t>(std::distance(head.params().begin(), head.params().end())));

  // One plain step: theta -= lr (g + wd theta) from zero momentum.
  sgd_step(head, momentum, 0.0, cfg);
  heads::HeadModel<double> stepped = before;
  for (auto& [name, p] : stepped.params()) p.grad.setConstant(0.25);
  std::map<std::string, MatrixXd> fresh;
  sgd_step(stepped, fresh, 0.1, cfg);
  for (const auto& [name, p] : stepped.params()) {
    const MatrixXd& theta = before.params().value(name);
    const MatrixXd expected = theta - 0.1 * (MatrixXd::Constant(theta.rows(), theta.cols(), 0.25) + cfg.weight_decay * theta);
    CHECK((p.value - expected).cwiseAbs().maxCoeff() <= 1e-15);
  }
}

TEST_CASE("fit with zero steps returns the initialization") {
  TrainConfig cfg = tiny_config();
  cfg.total_steps = 0;
  const Dataset d = tiny_data();
  const auto fz = make_featurizer(cfg);
  features::FeatureCache cache(fz);
  const Checkpoint ck = fit(d, records_of(d), {}, cache, cfg);
  CHECK(ck.step == 0);
  CHECK(same_params(ck.head, heads::HeadModel<double>(cfg.head, derive_seed(cfg.seed, 1))));
}

TEST_CASE("fit is deterministic and checkpoints round trip bit-exactly") {
  const TrainConfig cfg = tiny_config();
  const Dataset d = tiny_data();
  const auto fz = make_featurizer(cfg);
  features::FeatureCache cache(fz);
  FitLog log;
  const Checkpoint a = fit(d, records_of(d), {}, cache, cfg, &log);
  features::FeatureCache fresh(fz);
  const Checkpoint b = fit(d, records_of(d), {}, fresh, cfg);
  CHECK(log.step_loss.size() == 6);
  CHECK(a.step == 6);

  testing::TempDir dir("train");
  save_checkpoint(a, dir / "a.bin");
  save_checkpoint(b, dir / "b.bin");
  CHECK(testing::slurp(dir / "a.bin") == testing::slurp(dir / "b.bin"));

  const Checkpoint loaded = load_checkpoint(dir / "a.bin");
  save_checkpoint(loaded, dir / "c.bin");
  CHECK(testing::slurp(dir / "a.bin") == testing::slurp(dir / "c.bin"));
  CHECK(loaded.rng_state == a.rng_state);
  CHECK(to_json(loaded.config) == to_json(a.config));

  const auto& rec = *records_of(d)[0];
  const auto& pset = cache.get(d[0].clip.frames[static_cast<std::size_t>(rec.gt_track.start)]);
  const VectorXd q = fz.embed(rec.query.crop);
  const auto before = a.head.score(q, nullptr, pset);
  const auto after = loaded.head.score(q, nullptr, pset);
  CHECK(before.scores == after.scores);
  CHECK(*before.deltas == *after.deltas);

  std::string bytes = testing::slurp(dir / "a.bin");
  bytes.replace(bytes.find("checkpoint-1"), 12, "checkpoint-9");
  testing::spit(dir / "bad.bin", bytes);
  try {
    load_checkpoint(dir / "bad.bin");
    FAIL("expected a version error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
  testing::spit(dir / "short.bin", testing::slurp(dir / "a.bin").substr(0, 200));
  CHECK_THROWS_AS(load_checkpoint(dir / "short.bin"), DataError);
}

TEST_CASE("periodic checkpoints and step hooks fire") {
  TrainConfig cfg = tiny_config();
  cfg.checkpoint_every = 2;
  const Dataset d = tiny_data(2);
  const auto fz = make_featurizer(cfg);
  features::FeatureCache cache(fz);
  std::vector<int> saved;
  int steps = 0;
  FitHooks hooks;
  hooks.on_checkpoint = [&](const Checkpoint& c) { saved.push_back(c.step); };
  hooks.on_step = [&](int, double l) {
    ++steps;
    CHECK(std::isfinite(l));
  };
  fit(d, records_of(d), {}, cache, cfg, nullptr, hooks);
  CHECK(saved == std::vector<int>{2, 4, 6});
  CHECK(steps == 6);
}

TEST_CASE("coco_cond training beats the constant predictor" * doctest::timeout(600)) {
  TrainConfig cfg;
  cfg.total_steps = 2000;
  cfg.seed = 1;
  synth::SceneSpec spec;
  spec.num_videos = 50;
  spec.seed = 50;
  const Dataset d = synth::generate(spec);
  const auto fz = make_featurizer(cfg);
  features::FeatureCache cache(fz);
  FitLog log;
  fit(d, records_of(d), {}, cache, cfg, &log);
  // Mean over the last 100 steps, against ln 2.
  double tail = 0;
  for (std::size_t i = log.step_loss.size() - 100; i < log.step_loss.size(); ++i) tail += log.step_loss[i] / 100;
  MESSAGE("final training loss ", tail);
  CHECK(tail < 0.5 * std::log(2.0));
}
