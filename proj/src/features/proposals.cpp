#include "vql/features/proposals.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <deque>

namespace vql::features {
namespace {

struct Component {
  int minx, miny, maxx, maxy;
  int area = 0;
  double contrast_sum = 0.0;

  Box box() const {
    return Box{static_cast<double>(minx), static_cast<double>(miny), static_cast<double>(maxx - minx + 1),
               static_cast<double>(maxy - miny + 1)};
  }
  double saliency() const {
    const double mean = contrast_sum / std::max(1, area);
    return (1.0 - std::exp(-area / 25.0)) * std::min(1.0, mean / 0.25);
  }
};

double box_gap(const Box& a, const Box& b) {
  const double gx = std::max({0.0, a.x - b.right(), b.x - a.right()});
  const double gy = std::max({0.0, a.y - b.bottom(), b.y - a.bottom()});
  return std::max(gx, gy);
}

Box union_box(const Box& a, const Box& b) {
  const double x0 = std::min(a.x, b.x), y0 = std::min(a.y, b.y);
  return Box{x0, y0, std::max(a.right(), b.right()) - x0, std::max(a.bottom(), b.bottom()) - y0};
}

Box random_box(int width, int height, Rng& rng) {
  const double w = rng.uniform(0.1, 0.3) * width;
  const double h = rng.uniform(0.1, 0.3) * height;
  return Box{rng.uniform(0.0, width - w), rng.uniform(0.0, height - h), w, h};
}

void sort_by_objectness(std::vector<Proposal>& props) {
  std::stable_sort(props.begin(), props.end(), [](const Proposal& a, const Proposal& b) {
    if (a.objectness != b.objectness) return a.objectness > b.objectness;
    if (a.box.y != b.box.y) return a.box.y < b.box.y;
    return a.box.x < b.box.x;
  });
}

}  // namespace

void validate(const ProposalSet& pset) {
  if (pset.proposals.empty()) throw DataError("proposal set is empty");
  if (pset.features.rows() != pset.size()) throw DataError("proposal set: feature rows do not match proposals");
  if (static_cast<Eigen::Index>(pset.reserve.size()) != pset.reserve_features.rows()) {
    throw DataError("proposal set: reserve features do not match reserve boxes");
  }
}

ProposalSet select(const ProposalSet& pset, const std::vector<int>& rows) {
  ProposalSet out = pset;
  out.proposals.clear();
  out.features.resize(static_cast<Eigen::Index>(rows.size()), pset.features.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.proposals.push_back(pset.proposals.at(static_cast<std::size_t>(rows[k])));
    out.features.row(static_cast<Eigen::Index>(k)) = pset.features.row(rows[k]);
  }
  return out;
}

Eigen::MatrixXd contrast_map(const Image& image, const ProposalConfig& cfg) {
  const int H = image.height, W = image.width;
  // Robust per-channel plane fit a + b x + c y on a 2-pixel lattice.
  std::vector<std::array<double, 3>> planes(3, {0.0, 0.0, 0.0});
  for (int c = 0; c < 3; ++c) planes[c][0] = image.data.row(c).mean();
  Eigen::MatrixXd resid(H, W);
  auto residual_at = [&](int y, int x) {
    double r = 0.0;
    for (int c = 0; c < 3; ++c) {
      r = std::max(r, std::abs(image.at(c, y, x) - (planes[c][0] + planes[c][1] * x + planes[c][2] * y)));
    }
    return r;
  };
  for (int iter = 0; iter < 4; ++iter) {
    Eigen::Matrix3d ata = Eigen::Matrix3d::Zero();
    Eigen::Matrix3d atb = Eigen::Matrix3d::Zero();  // column c holds A^T b for channel c
    const double thr = iter == 0 ? 1e9 : cfg.fit_threshold;
    for (int y = 0; y < H; y += 2) {
      for (int x = 0; x < W; x += 2) {
        if (residual_at(y, x) > thr) continue;
        const Eigen::Vector3d a(1.0, x, y);
        ata += a * a.transpose();
        for (int c = 0; c < 3; ++c) atb.col(c) += a * image.at(c, y, x);
      }
    }
    if (ata(0, 0) < 3.0) break;
    const Eigen::Matrix3d sol = ata.ldlt().solve(atb);
    for (int c = 0; c < 3; ++c) planes[c] = {sol(0, c), sol(1, c), sol(2, c)};
  }
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) resid(y, x) = residual_at(y, x);
  }
  return resid;
}

std::vector<Proposal> propose_heuristic(const Image& image, const ProposalConfig& cfg) {
  const int H = image.height, W = image.width;
  const Eigen::MatrixXd resid = contrast_map(image, cfg);

  std::vector<int> label(static_cast<std::size_t>(H * W), -1);
  std::vector<Component> comps;
  std::deque<std::pair<int, int>> queue;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      if (resid(y, x) <= cfg.contrast_threshold || label[y * W + x] >= 0) continue;
      Component comp{x, y, x, y};
      const int id = static_cast<int>(comps.size());
      label[y * W + x] = id;
      queue.emplace_back(y, x);
      while (!queue.empty()) {
        const auto [cy, cx] = queue.front();
        queue.pop_front();
        comp.area += 1;
        comp.contrast_sum += resid(cy, cx);
        comp.minx = std::min(comp.minx, cx);
        comp.maxx = std::max(comp.maxx, cx);
        comp.miny = std::min(comp.miny, cy);
        comp.maxy = std::max(comp.maxy, cy);
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || nx < 0 || ny >= H || nx >= W) continue;
            if (label[ny * W + nx] >= 0 || resid(ny, nx) <= cfg.contrast_threshold) continue;
            label[ny * W + nx] = id;
            queue.emplace_back(ny, nx);
          }
        }
      }
      comps.push_back(comp);
    }
  }

  std::vector<Proposal> singles;
  for (const Component& c : comps) {
    if (c.area >= cfg.min_area) singles.push_back({c.box(), c.saliency()});
  }
  if (singles.empty()) return {Proposal{Box{0.0, 0.0, static_cast<double>(W), static_cast<double>(H)}, 0.0}};
  sort_by_objectness(singles);

  std::vector<Proposal> unions;
  for (std::size_t i = 0; i < singles.size(); ++i) {
    for (std::size_t j = i + 1; j < singles.size(); ++j) {
      if (box_gap(singles[i].box, singles[j].box) < cfg.merge_gap) {
        unions.push_back({union_box(singles[i].box, singles[j].box),
                          0.5 * std::min(singles[i].objectness, singles[j].objectness)});
      }
    }
  }
  sort_by_objectness(unions);
  std::vector<Proposal> out = singles;
  out.insert(out.end(), unions.begin(), unions.end());
  if (static_cast<int>(out.size()) > cfg.max_proposals) out.resize(static_cast<std::size_t>(cfg.max_proposals));
  return out;
}

std::vector<Proposal> propose_jittered(int width, int height, const std::vector<Box>& gt, const ProposalConfig& cfg,
                                       Rng& rng) {
  std::vector<Proposal> out;
  for (const Box& g : gt) {
    if (static_cast<int>(out.size()) >= cfg.max_proposals) break;
    if (cfg.jitter == 0.0) {
      out.push_back({g, 1.0});
      continue;
    }
    const double j = cfg.jitter;
    Box b{g.x + rng.uniform(-j, j) * g.w, g.y + rng.uniform(-j, j) * g.h, g.w * (1.0 + rng.uniform(-j, j)),
          g.h * (1.0 + rng.uniform(-j, j))};
    if (auto clipped = clip_to_frame(b, width, height)) out.push_back({*clipped, 1.0});
  }
  while (static_cast<int>(out.size()) < cfg.max_proposals) out.push_back({random_box(width, height, rng), rng.uniform()});
  return out;
}

ProposalSet Featurizer::featurize(const Frame& frame, std::uint64_t seed) const {
  return featurize(frame, propose_heuristic(frame.image(), cfg_), seed);
}

ProposalSet Featurizer::featurize(const Frame& frame, const std::vector<Proposal>& proposals, std::uint64_t seed) const {
  ProposalSet out;
  out.frame_index = frame.index;
  out.frame_width = frame.width();
  out.frame_height = frame.height();
  out.proposals = proposals;
  const FeatureMap<double> map = backbone_.feature_map(frame.image());
  const int C = backbone_.feature_dim();
  out.features.resize(out.size(), C);
  for (int j = 0; j < out.size(); ++j) out.features.row(j) = backbone_.pool(map, out.proposals[j].box).transpose();
  Rng rng(seed);
  for (int k = 0; k < cfg_.num_reserve; ++k) out.reserve.push_back({random_box(out.frame_width, out.frame_height, rng), 0.0});
  out.reserve_features.resize(static_cast<Eigen::Index>(out.reserve.size()), C);
  for (std::size_t k = 0; k < out.reserve.size(); ++k) {
    out.reserve_features.row(static_cast<Eigen::Index>(k)) = backbone_.pool(map, out.reserve[k].box).transpose();
  }
  validate(out);
  return out;
}

std::uint64_t frame_seed(const std::string& video_id, int frame_index) {
  return derive_seed(fnv1a64(video_id), static_cast<std::uint64_t>(frame_index));
}

const ProposalSet& FeatureCache::get(const Frame& frame) {
  const auto key = std::make_pair(frame.video_id, frame.index);
  auto it = sets_.find(key);
  if (it == sets_.end()) it = sets_.emplace(key, featurizer_->featurize(frame, frame_seed(frame.video_id, frame.index))).first;
  return it->second;
}

const FeatureVector<double>& FeatureCache::embedding(const std::string& key, const Image& region) {
  auto it = embeddings_.find(key);
  if (it == embeddings_.end()) it = embeddings_.emplace(key, featurizer_->embed(region)).first;
  return it->second;
}

}  // namespace vql::features
