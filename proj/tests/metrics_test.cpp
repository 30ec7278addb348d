#include <algorithm>

#include "doctest.h"
#include "oracles.hpp"
#include "vql/core/rng.hpp"
#include "vql/metrics/metrics.hpp"

using namespace vql;
using namespace vql::metrics;

namespace {

// Floating-point slack between two summation orders of the same quantity.
constexpr double kOracleTol = 1e-12;

Box random_box(Rng& rng) {
  return Box{static_cast<double>(rng.integer(0, 10)), static_cast<double>(rng.integer(0, 10)),
             static_cast<double>(rng.integer(2, 8)), static_cast<double>(rng.integer(2, 8))};
}

Box near(const Box& g, Rng& rng) { return Box{g.x + rng.integer(-1, 1), g.y + rng.integer(-1, 1), g.w, g.h}; }

ResponseTrack random_track(Rng& rng) {
  ResponseTrack t{static_cast<int>(rng.integer(0, 10)), {}};
  const int len = static_cast<int>(rng.integer(1, 6));
  for (int i = 0; i < len; ++i) t.boxes.push_back(random_box(rng));
  return t;
}

void check_det(const DetEvalResult& a, const DetEvalResult& b) {
  CHECK(a.ap == doctest::Approx(b.ap).epsilon(kOracleTol));
  CHECK(a.ap50 == doctest::Approx(b.ap50).epsilon(kOracleTol));
  CHECK(a.ap75 == doctest::Approx(b.ap75).epsilon(kOracleTol));
  CHECK(a.ar10 == doctest::Approx(b.ar10).epsilon(kOracleTol));
}

}  // namespace

TEST_CASE("average precision worked values") {
  CHECK(average_precision({true}, 1) == 1.0);
  CHECK(average_precision({false, true}, 1) == 0.5);
  CHECK(average_precision({}, 3) == 0.0);
  // hits at ranks 1 and 3 of 2 gts: (1 + 2/3) / 2
  CHECK(average_precision({true, false, true}, 2) == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  // Envelope lifts rank 2's precision: ranks 1 (miss), 2 (hit), 3 (hit) -> (2/3 + 2/3) / 2
  CHECK(average_precision({false, true, true}, 2) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(average_precision({true}, 0), DataError);
  CHECK(coco_thresholds().size() == 10);
}

TEST_CASE("detection AP trivial cases") {
  const std::vector<Box> gts{{0, 0, 4, 4}, {5, 5, 3, 3}};
  const auto perfect = detection_ap({{{gts[0], 0.9}}, {{gts[1], 0.8}}}, gts);
  CHECK(perfect.ap == 1.0);
  CHECK(perfect.ar10 == 1.0);
  const auto none = detection_ap({{}, {}}, gts);
  CHECK(none.ap == 0.0);
  CHECK(none.ar10 == 0.0);
  // A duplicate on the same frame is a false positive.
  const auto dup = detection_ap({{{gts[0], 0.9}, {gts[0], 0.8}}, {}}, gts);
  CHECK(dup.ap50 == 0.5);
}

TEST_CASE("detection AP matches the brute-force oracle") {
  Rng rng(100);
  for (int trial = 0; trial < 100; ++trial) {
    const int frames = static_cast<int>(rng.integer(1, 4));
    std::vector<Box> gts;
    std::vector<std::vector<Detection>> preds(static_cast<std::size_t>(frames));
    int budget = 6;
    for (int f = 0; f < frames; ++f) gts.push_back(random_box(rng));
    while (budget-- > 0) {
      const auto f = static_cast<std::size_t>(rng.integer(0, frames - 1));
      const Box b = rng.uniform() < 0.5 ? near(gts[f], rng) : random_box(rng);
      // Coarse confidences force ties.
      preds[f].push_back({b, std::round(rng.uniform() * 4) / 4});
    }
    check_det(detection_ap(preds, gts), oracle::detection_ap(preds, gts));
  }
}

TEST_CASE("false positives never raise AP and frame order does not matter") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Box> gts;
    std::vector<std::vector<Detection>> preds;
    for (int f = 0; f < 4; ++f) {
      gts.push_back(random_box(rng));
      preds.push_back({{near(gts.back(), rng), rng.uniform()}});
    }
    const auto base = detection_ap(preds, gts);
    auto worse = preds;
    const auto f = static_cast<std::size_t>(rng.integer(0, 3));
    worse[f].push_back({Box{40, 40, 3, 3}, rng.uniform()});
    const auto after = detection_ap(worse, gts);
    CHECK(after.ap <= base.ap + kOracleTol);
    CHECK(after.ap50 <= base.ap50 + kOracleTol);

    std::vector<std::size_t> perm{0, 1, 2, 3};
    rng.shuffle(perm);
    std::vector<Box> pg;
    std::vector<std::vector<Detection>> pp;
    for (auto k : perm) {
      pg.push_back(gts[k]);
      pp.push_back(preds[k]);
    }
    check_det(detection_ap(pp, pg), base);
  }
}

TEST_CASE("vq2d metrics worked values") {
  const ResponseTrack g{10, std::vector<Box>(4, Box{0, 0, 4, 4})};
  const auto perfect = vq2d_metrics({{g, 0.9}}, {g});
  CHECK(perfect.tap25 == 1.0);
  CHECK(perfect.stap25 == 1.0);
  CHECK(perfect.succ == 100.0);
  CHECK(perfect.rec_percent == 100.0);

  const auto empty = vq2d_metrics({{ResponseTrack{}, 0.9}}, {g});
  CHECK(empty.tap25 == 0.0);
  CHECK(empty.succ == 0.0);
  CHECK(empty.rec_percent == 0.0);

  // Half the frames, shifted boxes: tIoU 0.5, each shared frame IoU 3/5.
  const ResponseTrack half{12, std::vector<Box>(2, Box{1, 0, 4, 4})};
  const auto r = vq2d_metrics({{half, 0.5}}, {g});
  CHECK(r.tap25 == 1.0);
  CHECK(r.succ == 100.0);
  CHECK(r.rec_percent == 50.0);
  CHECK(r.stap25 == 1.0);  // tube IoU = 2*12 / (2*20 + 2*16 - 2*12) = 0.5
}

TEST_CASE("vq2d metrics match the brute-force oracle") {
  Rng rng(55);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = static_cast<int>(rng.integer(1, 6));
    std::vector<TrackPrediction> preds;
    std::vector<ResponseTrack> gts;
    for (int i = 0; i < n; ++i) {
      gts.push_back(random_track(rng));
      ResponseTrack p = rng.uniform() < 0.2 ? ResponseTrack{} : random_track(rng);
      if (rng.uniform() < 0.4) p = gts.back();
      preds.push_back({p, std::round(rng.uniform() * 3) / 3});
    }
    const auto r = vq2d_metrics(preds, gts);
    const auto o = oracle::vq2d_metrics(preds, gts);
    CHECK(r.tap25 == doctest::Approx(o.tap25).epsilon(kOracleTol));
    CHECK(r.stap25 == doctest::Approx(o.stap25).epsilon(kOracleTol));
    CHECK(r.succ == doctest::Approx(o.succ).epsilon(kOracleTol));
    CHECK(r.rec_percent == doctest::Approx(o.rec_percent).epsilon(kOracleTol));
    for (int i = 0; i < n; ++i) {
      const auto& p = preds[static_cast<std::size_t>(i)].track;
      const auto& g = gts[static_cast<std::size_t>(i)];
      if (p.size() == 0) continue;
      CHECK(temporal_iou(p, g) == doctest::Approx(oracle::enumerated_temporal_iou(p, g)).epsilon(kOracleTol));
      CHECK(tube_iou(p, g) == doctest::Approx(oracle::raster_tube(p, g)).epsilon(kOracleTol));
    }
  }
}

TEST_CASE("false-positive rate counts negative frames at or above tau") {
  AnnotationRecord a;
  a.gt_track = ResponseTrack{2, std::vector<Box>(3, Box{0, 0, 2, 2})};  // frames 2..4
  a.query.query_frame = 10;
  localize::ScoreTimeline t;
  for (int f = 0; f < 10; f += 2) t.push_back({f, {Box{0, 0, 2, 2}, f == 6 ? 0.6 : (f == 8 ? 0.59 : 0.9)}});
  // Negatives are frames 6 and 8; only 6 reaches 0.6.
  CHECK(fp_rate_on_negatives({t}, {&a}, 0.6) == 0.5);
  CHECK(fp_rate_on_negatives({t}, {&a}, 0.95) == 0.0);
  AnnotationRecord tight = a;
  tight.query.query_frame = 5;
  CHECK(fp_rate_on_negatives({t}, {&tight}, 0.1) == 0.0);
}

TEST_CASE("joins by query id are strict") {
  AnnotationRecord r;
  r.video_id = "v";
  r.query_index = 0;
  r.gt_track = ResponseTrack{3, std::vector<Box>(2, Box{1, 1, 3, 3})};
  r.query.query_frame = 8;
  localize::Prediction p;
  p.video_id = "v";
  p.track = r.gt_track;
  p.peak.detection.confidence = 0.7;
  CHECK(evaluate_vq2d({p}, {r}).succ == 100.0);
  CHECK_THROWS_AS(evaluate_vq2d({p, p}, {r}), DataError);
  CHECK_THROWS_AS(evaluate_vq2d({}, {r}), DataError);
  localize::Prediction stray = p;
  stray.video_id = "w";
  CHECK_THROWS_AS(evaluate_vq2d({p, stray}, {r}), DataError);

  const std::vector<localize::FrameDetections> dets{{"v", 0, 3, {{Box{1, 1, 3, 3}, 0.9}}}};
  const auto det = evaluate_detections(dets, {r});
  CHECK(det.ap50 == 0.5);  // frame 4 has no detections
  CHECK_THROWS_AS(evaluate_detections({{"v", 0, 7, {}}}, {r}), DataError);

  const auto j = to_json(det);
  CHECK(j.contains("AP"));
  CHECK(j.contains("AR@10"));
  CHECK(to_json(Vq2dEvalResult{}).contains("stAP25"));
}
