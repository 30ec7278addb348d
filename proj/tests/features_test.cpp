#include <cmath>

#include "doctest.h"
#include "vql/features/backbone.hpp"
#include "vql/features/proposals.hpp"

using namespace vql;
using namespace vql::features;

namespace {

BackboneConfig small_config() {
  BackboneConfig cfg;
  cfg.channels = {4, 4};
  cfg.grid = 3;
  cfg.samples = 2;
  cfg.feature_dim = 6;
  return cfg;
}

Image uniform_image(int h, int w, double r, double g, double b) {
  Image img(3, h, w);
  img.data.row(0).setConstant(r);
  img.data.row(1).setConstant(g);
  img.data.row(2).setConstant(b);
  return img;
}

void paint(Image& img, const Box& b, double r, double g, double bl) {
  for (int y = static_cast<int>(b.y); y < b.bottom(); ++y) {
    for (int x = static_cast<int>(b.x); x < b.right(); ++x) {
      img.at(0, y, x) = r;
      img.at(1, y, x) = g;
      img.at(2, y, x) = bl;
    }
  }
}

Frame frame_of(const Image& img, int index = 0) { return Frame{"vid", index, to_bytes(img)}; }

}  // namespace

TEST_CASE("pooling a linear ramp gives the ramp at each cell centre") {
  // Bilinear interpolation is exact on affine maps and the samples are symmetric
  // inside each cell, so every cell pools to the ramp value at its centre.
  const int h = 20, w = 24;
  FeatureMap<double> map{h, w, RowMat<double>(1, h * w)};
  const double a = 0.3, b = -0.7, c = 2.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) map.values(0, y * w + x) = a * y + b * x + c;
  }
  const Box box{3.5, 2.0, 12.0, 9.0};
  for (int grid : {1, 3, 4}) {
    const auto taps = pool_taps(box, h, w, grid, 2);
    std::vector<double> pooled(static_cast<std::size_t>(grid * grid), 0.0), mass(pooled.size(), 0.0);
    for (const auto& t : taps) {
      pooled[static_cast<std::size_t>(t.cell)] += t.weight * map.values(0, t.pixel);
      mass[static_cast<std::size_t>(t.cell)] += t.weight;
    }
    for (int gy = 0; gy < grid; ++gy) {
      for (int gx = 0; gx < grid; ++gx) {
        const double cy = box.y + (gy + 0.5) * box.h / grid - 0.5;
        const double cx = box.x + (gx + 0.5) * box.w / grid - 0.5;
        const auto k = static_cast<std::size_t>(gy * grid + gx);
        CHECK(mass[k] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(pooled[k] == doctest::Approx(a * cy + b * cx + c).epsilon(1e-12));
      }
    }
  }
  CHECK_THROWS_AS(pool_taps(Box{30, 30, 4, 4}, h, w, 3, 2), DataError);
}

TEST_CASE("backbone is deterministic in its seed and has the configured output size") {
  const BackboneConfig cfg = small_config();
  Backbone<double> a(cfg, 7), b(cfg, 7), c(cfg, 8);
  Image img = uniform_image(16, 20, 0.2, 0.4, 0.6);
  paint(img, Box{4, 3, 6, 5}, 0.9, 0.1, 0.1);
  const Box box{2, 2, 10, 8};
  const auto fa = a.pool(img, box);
  CHECK(fa.size() == cfg.feature_dim);
  CHECK(fa == b.pool(img, box));
  CHECK(fa != c.pool(img, box));
  CHECK(fa.allFinite());
}

TEST_CASE("a zero affine map gives zero features") {
  Backbone<double> bb(small_config(), 3);
  bb.affine_weight().setZero();
  bb.affine_bias().setZero();
  Image img = uniform_image(12, 12, 0.5, 0.3, 0.1);
  CHECK(bb.pool(img, Box{1, 1, 8, 8}).isZero(0.0));
}

TEST_CASE("input gradient matches finite differences") {
  Backbone<double> bb(small_config(), 11);
  Image img = uniform_image(10, 12, 0.3, 0.5, 0.2);
  paint(img, Box{3, 2, 5, 4}, 0.8, 0.2, 0.6);
  for (int y = 0; y < img.height; ++y) img.at(1, y, 0) += 0.01 * y;
  const Box box{1.5, 1.0, 8.0, 7.5};
  Eigen::VectorXd probe(6);
  probe << 0.4, -1.0, 0.3, 0.9, -0.2, 0.5;
  const Image grad = bb.input_gradient(img, box, probe);
  const double eps = 1e-6;
  int checked = 0;
  for (Eigen::Index p = 0; p < img.data.cols(); p += 7) {
    for (int c = 0; c < 3; ++c) {
      Image up = img, down = img;
      up.data(c, p) += eps;
      down.data(c, p) -= eps;
      const double numeric = (probe.dot(bb.pool(up, box)) - probe.dot(bb.pool(down, box))) / (2 * eps);
      CHECK(grad.data(c, p) == doctest::Approx(numeric).epsilon(1e-5).scale(1e-3));
      ++checked;
    }
  }
  CHECK(checked > 40);
}

TEST_CASE("features are equivariant to integer shifts on a black background") {
  // Zero biases and zero padding keep an all-black surround at zero through
  // every block, so moving content and box together leaves the descriptor alone.
  Backbone<double> bb(small_config(), 5);
  const Box object{6, 5, 5, 4};
  const Box region{4, 3, 9, 8};
  Image base(3, 24, 30);
  paint(base, object, 0.9, 0.4, 0.1);
  const auto ref = bb.pool(base, region);
  for (auto [dx, dy] : {std::pair{3, 0}, std::pair{0, 4}, std::pair{7, 5}}) {
    Image moved(3, 24, 30);
    paint(moved, Box{object.x + dx, object.y + dy, object.w, object.h}, 0.9, 0.4, 0.1);
    const auto shifted = bb.pool(moved, Box{region.x + dx, region.y + dy, region.w, region.h});
    CHECK((shifted - ref).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("heuristic proposals on a uniform frame fall back to the full frame") {
  const ProposalConfig cfg;
  const auto props = propose_heuristic(uniform_image(40, 50, 0.4, 0.4, 0.4), cfg);
  REQUIRE(props.size() == 1);
  CHECK(props[0].box == Box{0, 0, 50, 40});
}

TEST_CASE("heuristic proposals cover painted blobs") {
  const ProposalConfig cfg;
  Image img = uniform_image(64, 80, 0.45, 0.5, 0.55);
  const std::vector<Box> blobs{{5, 6, 10, 8}, {40, 10, 12, 12}, {20, 40, 9, 14}};
  paint(img, blobs[0], 0.9, 0.1, 0.1);
  paint(img, blobs[1], 0.1, 0.8, 0.2);
  paint(img, blobs[2], 0.1, 0.1, 0.9);
  const auto props = propose_heuristic(img, cfg);
  CHECK(props.size() <= static_cast<std::size_t>(cfg.max_proposals));
  for (const Box& g : blobs) {
    double best = 0.0;
    for (const auto& p : props) best = std::max(best, iou(p.box, g));
    CHECK(best >= 0.5);
  }
  for (const auto& p : props) {
    CHECK(p.objectness >= 0.0);
    CHECK(p.objectness <= 1.0);
  }

  ProposalConfig capped = cfg;
  capped.max_proposals = 2;
  CHECK(propose_heuristic(img, capped).size() <= 2);
}

TEST_CASE("jittered proposals with zero jitter return the ground truth verbatim") {
  ProposalConfig cfg;
  cfg.jitter = 0.0;
  cfg.max_proposals = 5;
  const std::vector<Box> gt{{3.25, 4.5, 10, 7}, {30, 20, 6.5, 9}};
  Rng rng(1);
  const auto props = propose_jittered(80, 64, gt, cfg, rng);
  REQUIRE(props.size() == 5);
  CHECK(props[0].box == gt[0]);
  CHECK(props[1].box == gt[1]);
  for (const auto& p : props) {
    CHECK(p.box.x >= 0);
    CHECK(p.box.right() <= 80);
    CHECK(p.box.bottom() <= 64);
  }

  cfg.jitter = 0.2;
  Rng r2(2);
  const auto jittered = propose_jittered(80, 64, gt, cfg, r2);
  CHECK(iou(jittered[0].box, gt[0]) > 0.3);
}

TEST_CASE("featurizer output is consistent with the cache and validation") {
  Featurizer fz(Backbone<double>(small_config(), 2), ProposalConfig{});
  Image img = uniform_image(32, 40, 0.5, 0.5, 0.5);
  paint(img, Box{8, 8, 10, 9}, 0.9, 0.2, 0.1);
  const Frame frame = frame_of(img, 4);
  const ProposalSet fresh = fz.featurize(frame, frame_seed("vid", 4));
  CHECK(fresh.features.cols() == 6);
  CHECK(fresh.features.rows() == fresh.size());
  CHECK(fresh.reserve.size() == static_cast<std::size_t>(ProposalConfig{}.num_reserve));
  CHECK(fresh.frame_index == 4);

  FeatureCache cache(fz);
  const ProposalSet& cached = cache.get(frame);
  CHECK(cached.features == fresh.features);
  CHECK(cached.reserve_features == fresh.reserve_features);
  CHECK(&cache.get(frame) == &cached);
  CHECK(cache.size() == 1);

  const ProposalSet one = select(fresh, {0});
  CHECK(one.size() == 1);
  CHECK(one.features.row(0) == fresh.features.row(0));

  ProposalSet broken = fresh;
  broken.features.conservativeResize(broken.features.rows() + 1, Eigen::NoChange);
  CHECK_THROWS_AS(validate(broken), DataError);
  CHECK_THROWS_AS(validate(ProposalSet{}), DataError);
}
