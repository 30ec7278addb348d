#pragma once

// Brute-force reference computations shared by the unit tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include "vql/core/box.hpp"
#include "vql/core/track.hpp"
#include "vql/heads/heads.hpp"
#include "vql/metrics/metrics.hpp"

namespace vql::oracle {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Cell-count IoU of integer-aligned boxes on a grid.
inline double raster_iou(const Box& a, const Box& b) {
  int inter = 0, uni = 0;
  for (int y = -20; y < 40; ++y) {
    for (int x = -20; x < 40; ++x) {
      const bool in_a = x >= a.x && x < a.right() && y >= a.y && y < a.bottom();
      const bool in_b = x >= b.x && x < b.right() && y >= b.y && y < b.bottom();
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

inline double raster_tube(const ResponseTrack& p, const ResponseTrack& g) {
  double inter = 0, uni = 0;
  for (int f = std::min(p.start, g.start); f <= std::max(p.last(), g.last()); ++f) {
    const auto a = p.box_at(f), b = g.box_at(f);
    if (a && b) {
      const double i = raster_iou(*a, *b);
      const double ua = a->area() + b->area();
      // |A ∪ B| = (|A| + |B|) / (1 + IoU); intersection = IoU |A ∪ B|.
      inter += i * ua / (1.0 + i);
      uni += ua / (1.0 + i);
    } else if (a) {
      uni += a->area();
    } else if (b) {
      uni += b->area();
    }
  }
  return uni == 0 ? 0.0 : inter / uni;
}

// Frames covered by both tracks over frames covered by either.
inline double enumerated_temporal_iou(const ResponseTrack& p, const ResponseTrack& g) {
  int inter = 0, uni = 0;
  for (int f = std::min(p.start, g.start); f <= std::max(p.last(), g.last()); ++f) {
    const bool a = f >= p.start && f <= p.last(), b = f >= g.start && f <= g.last();
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

// M[o][i] = sum_c W[o][i][c] q[c], out[n][o] = sum_i M[o][i] x[n][i], written as plain loops.
inline MatrixXd contraction(const heads::ConditionalGenerator<double>& g, const VectorXd& q, const MatrixXd& xs) {
  MatrixXd out = MatrixXd::Zero(xs.rows(), g.c_out);
  for (Eigen::Index n = 0; n < xs.rows(); ++n) {
    for (int o = 0; o < g.c_out; ++o) {
      for (int i = 0; i < g.c_in; ++i) {
        double m = 0.0;
        for (int c = 0; c < g.c_cond; ++c) m += g.at(o, i, c) * q(c);
        out(n, o) += m * xs(n, i);
      }
    }
  }
  return out;
}

inline MatrixXd layer_norm(const MatrixXd& x, const MatrixXd& g, const MatrixXd& b) {
  MatrixXd y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mean = 0.0, var = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) mean += x(r, c) / x.cols();
    for (Eigen::Index c = 0; c < x.cols(); ++c) var += (x(r, c) - mean) * (x(r, c) - mean) / x.cols();
    for (Eigen::Index c = 0; c < x.cols(); ++c) y(r, c) = (x(r, c) - mean) / std::sqrt(var + 1e-5) * g(0, c) + b(0, c);
  }
  return y;
}

inline MatrixXd affine(const MatrixXd& x, const MatrixXd& w, const MatrixXd& b) {
  MatrixXd y(x.rows(), w.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index o = 0; o < w.cols(); ++o) {
      double s = b(0, o);
      for (Eigen::Index i = 0; i < x.cols(); ++i) s += x(r, i) * w(i, o);
      y(r, o) = s;
    }
  }
  return y;
}

// One pre-norm block: x + out(MHA(ln1 x)), then + ffn2(relu(ffn1(ln2 x))).
inline MatrixXd attention_block(const ad::ParamStore<double>& s, const std::string& b, const MatrixXd& x, int heads) {
  const MatrixXd xn = layer_norm(x, s.value(b + "ln1.g"), s.value(b + "ln1.b"));
  const MatrixXd zero = MatrixXd::Zero(1, x.cols());
  const MatrixXd q = affine(xn, s.value(b + "wq"), zero);
  const MatrixXd k = affine(xn, s.value(b + "wk"), zero);
  const MatrixXd v = affine(xn, s.value(b + "wv"), zero);
  const Eigen::Index dh = x.cols() / heads;
  MatrixXd merged = MatrixXd::Zero(x.rows(), x.cols());
  for (int h = 0; h < heads; ++h) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      std::vector<double> logits(static_cast<std::size_t>(x.rows()));
      for (Eigen::Index j = 0; j < x.rows(); ++j) {
        double dot = 0.0;
        for (Eigen::Index d = 0; d < dh; ++d) dot += q(i, h * dh + d) * k(j, h * dh + d);
        logits[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double& l : logits) z += (l = std::exp(l - mx));
      for (Eigen::Index j = 0; j < x.rows(); ++j) {
        for (Eigen::Index d = 0; d < dh; ++d) merged(i, h * dh + d) += logits[static_cast<std::size_t>(j)] / z * v(j, h * dh + d);
      }
    }
  }
  MatrixXd y = x + affine(merged, s.value(b + "out.w"), s.value(b + "out.b"));
  const MatrixXd hidden =
      affine(layer_norm(y, s.value(b + "ln2.g"), s.value(b + "ln2.b")), s.value(b + "ffn1.w"), s.value(b + "ffn1.b"))
          .cwiseMax(0.0);
  return y + affine(hidden, s.value(b + "ffn2.w"), s.value(b + "ffn2.b"));
}

// Area under the interpolated PR curve: at each recall step, the best precision
// at that recall or beyond, found by scanning every rank.
inline double average_precision(const std::vector<bool>& hits, int num_gt) {
  const std::size_t n = hits.size();
  std::vector<double> recall(n), precision(n);
  int tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += hits[i];
    recall[i] = static_cast<double>(tp) / num_gt;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  double area = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (recall[i] == prev_recall) continue;
    double best = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (recall[j] >= recall[i]) best = std::max(best, precision[j]);
    }
    area += (recall[i] - prev_recall) * best;
    prev_recall = recall[i];
  }
  return area;
}

// Pools, ranks by confidence (ties by frame then rank) and matches greedily.
inline metrics::DetEvalResult detection_ap(const std::vector<std::vector<Detection>>& preds, const std::vector<Box>& gts) {
  struct Flat {
    std::size_t frame, rank;
    Detection det;
  };
  std::vector<Flat> all;
  for (std::size_t f = 0; f < preds.size(); ++f) {
    for (std::size_t r = 0; r < preds[f].size(); ++r) all.push_back({f, r, preds[f][r]});
  }
  std::sort(all.begin(), all.end(), [](const Flat& a, const Flat& b) {
    if (a.det.confidence != b.det.confidence) return a.det.confidence > b.det.confidence;
    return std::tie(a.frame, a.rank) < std::tie(b.frame, b.rank);
  });
  metrics::DetEvalResult out;
  const auto ts = metrics::coco_thresholds();
  for (double t : ts) {
    std::vector<bool> used(gts.size(), false), hits;
    for (const Flat& x : all) {
      const bool hit = !used[x.frame] && iou(x.det.box, gts[x.frame]) >= t;
      used[x.frame] = used[x.frame] || hit;
      hits.push_back(hit);
    }
    const double ap = average_precision(hits, static_cast<int>(gts.size()));
    out.ap += ap / static_cast<double>(ts.size());
    if (t == 0.5) out.ap50 = ap;
    if (std::abs(t - 0.75) < 1e-9) out.ap75 = ap;
    int found = 0;
    for (std::size_t f = 0; f < preds.size(); ++f) {
      std::vector<Detection> sorted = preds[f];
      std::stable_sort(sorted.begin(), sorted.end(),
                       [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
      bool any = false;
      for (std::size_t r = 0; r < sorted.size() && r < 10; ++r) any = any || iou(sorted[r].box, gts[f]) >= t;
      found += any;
    }
    out.ar10 += static_cast<double>(found) / static_cast<double>(gts.size()) / static_cast<double>(ts.size());
  }
  return out;
}

// Query-level metrics from per-query enumeration, queries ranked by confidence.
inline metrics::Vq2dEvalResult vq2d_metrics(const std::vector<metrics::TrackPrediction>& preds,
                                            const std::vector<ResponseTrack>& gts) {
  const std::size_t n = preds.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].confidence > preds[b].confidence; });
  std::vector<bool> th, sh;
  double succ = 0, rec = 0;
  for (std::size_t k : order) {
    const ResponseTrack& p = preds[k].track;
    const bool any = p.size() > 0;
    const double tube = any ? raster_tube(p, gts[k]) : 0.0;
    th.push_back(any && enumerated_temporal_iou(p, gts[k]) >= 0.25);
    sh.push_back(tube >= 0.25);
    succ += tube > 0;
    int got = 0;
    for (int f = gts[k].start; f <= gts[k].last(); ++f) {
      const auto pb = p.box_at(f);
      got += pb && raster_iou(*pb, *gts[k].box_at(f)) >= 0.5;
    }
    rec += static_cast<double>(got) / gts[k].size();
  }
  metrics::Vq2dEvalResult r;
  r.tap25 = average_precision(th, static_cast<int>(n));
  r.stap25 = average_precision(sh, static_cast<int>(n));
  r.succ = 100 * succ / static_cast<double>(n);
  r.rec_percent = 100 * rec / static_cast<double>(n);
  return r;
}

}  // namespace vql::oracle
