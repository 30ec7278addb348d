#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "vql/synth/scene.hpp"

namespace vql::synth {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Interval {
  int first = 0;
  int last = -1;
  bool contains(int f) const { return f >= first && f <= last; }
};

ObjectInstance random_instance(int id, int height, Rng& rng) {
  ObjectInstance o;
  o.instance_id = id;
  o.shape = static_cast<Shape>(rng.integer(0, kNumShapes - 1));
  o.color = static_cast<int>(rng.integer(0, kNumColors - 1));
  o.texture = static_cast<Texture>(rng.integer(0, kNumTextures - 1));
  const double side = height * rng.uniform(0.16, 0.23);
  const double aspect = rng.uniform(0.8, 1.25);
  o.base_w = std::round(side * std::sqrt(aspect));
  o.base_h = std::round(side / std::sqrt(aspect));
  return o;
}

ObjectInstance make_distractor(const ObjectInstance& target, int id, Rng& rng) {
  ObjectInstance d = target;
  d.instance_id = id;
  d.distractor_of = target.instance_id;
  // Always change colour or texture; sometimes also size.
  if (rng.bernoulli(0.5)) {
    d.color = static_cast<int>((target.color + rng.integer(1, kNumColors - 1)) % kNumColors);
  } else {
    d.texture = static_cast<Texture>((static_cast<int>(target.texture) + rng.integer(1, kNumTextures - 1)) % kNumTextures);
  }
  if (rng.bernoulli(0.3)) {
    const double f = rng.bernoulli(0.5) ? rng.uniform(1.15, 1.3) : rng.uniform(0.78, 0.86);
    d.base_w = std::max(4.0, std::round(target.base_w * f));
    d.base_h = std::max(4.0, std::round(target.base_h * f));
  }
  return d;
}

Interval random_interval(int T, int min_len, int max_len, Rng& rng) {
  const int len = static_cast<int>(rng.integer(min_len, std::max(min_len, max_len)));
  const int first = static_cast<int>(rng.integer(0, std::max(0, T - len)));
  return {first, std::min(T - 1, first + len - 1)};
}

}  // namespace

void validate(const SceneSpec& s) {
  auto fail = [](const std::string& m) { throw ConfigError("scene spec: " + m); };
  if (s.num_videos < 1) fail("num_videos must be >= 1");
  if (s.frames_per_video < 24) fail("frames_per_video must be >= 24");
  if (s.height < 32 || s.width < 32) fail("resolution must be at least 32x32");
  if (s.num_instances < 1) fail("num_instances must be >= 1");
  if (s.distractors_per_target < 0) fail("distractors_per_target must be >= 0");
  if (s.num_instances + s.distractors_per_target > 8) fail("at most 8 objects per scene");
  if (!(s.blur_probability >= 0.0 && s.blur_probability <= 1.0)) fail("blur_probability must be in [0, 1]");
  if (!(s.lighting_jitter >= 0.0 && s.lighting_jitter <= 1.0)) fail("lighting_jitter must be in [0, 1]");
  if (!(s.fps > 0.0)) fail("fps must be positive");
}

json to_json(const SceneSpec& s) {
  return {{"seed", s.seed},
          {"num_videos", s.num_videos},
          {"frames_per_video", s.frames_per_video},
          {"height", s.height},
          {"width", s.width},
          {"num_instances", s.num_instances},
          {"distractors_per_target", s.distractors_per_target},
          {"blur_probability", s.blur_probability},
          {"lighting_jitter", s.lighting_jitter},
          {"fps", s.fps}};
}

SceneSpec scene_spec_from_json(const json& j) {
  SceneSpec s;
  for (const auto& [key, value] : j.items()) {
    if (key == "seed") s.seed = value.get<std::uint64_t>();
    else if (key == "num_videos") s.num_videos = value.get<int>();
    else if (key == "frames_per_video") s.frames_per_video = value.get<int>();
    else if (key == "height") s.height = value.get<int>();
    else if (key == "width") s.width = value.get<int>();
    else if (key == "num_instances") s.num_instances = value.get<int>();
    else if (key == "distractors_per_target") s.distractors_per_target = value.get<int>();
    else if (key == "blur_probability") s.blur_probability = value.get<double>();
    else if (key == "lighting_jitter") s.lighting_jitter = value.get<double>();
    else if (key == "fps") s.fps = value.get<double>();
    else throw ConfigError("unknown scene spec key: " + key);
  }
  validate(s);
  return s;
}

std::string video_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "vid_%04d", index);
  return buf;
}

VideoEntry generate_video(const SceneSpec& spec, int video_index) {
  validate(spec);
  Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(video_index)));
  const int H = spec.height, W = spec.width, T = spec.frames_per_video;
  const int pan_x_max = std::max(2, static_cast<int>(std::lround(0.1 * W)));
  const int pan_y_max = 2;

  SceneState scene;
  scene.height = H;
  scene.width = W;
  scene.margin = pan_x_max;
  scene.background = make_background(H, W, scene.margin, rng);

  // Instances: 0 = target, then distractors, then other instances.
  std::vector<ObjectInstance> instances;
  const ObjectInstance target = random_instance(0, H, rng);
  instances.push_back(target);
  for (int d = 0; d < spec.distractors_per_target; ++d) {
    instances.push_back(make_distractor(target, static_cast<int>(instances.size()), rng));
  }
  for (int k = 1; k < spec.num_instances; ++k) {
    ObjectInstance o = random_instance(static_cast<int>(instances.size()), H, rng);
    while (o.shape == target.shape && o.color == target.color && o.texture == target.texture) {
      o = random_instance(o.instance_id, H, rng);
    }
    instances.push_back(o);
  }

  // Non-overlapping placement that stays fully in view for every camera pose.
  // Greedy placement can paint itself into a corner; start over when it does.
  const int m = scene.margin;
  bool placed_all = false;
  for (int restart = 0; restart < 50 && !placed_all; ++restart) {
    std::vector<Box> placed;
    scene.objects.clear();
    placed_all = true;
    for (const ObjectInstance& inst : instances) {
      PlacedObject po{inst, 0.0, 0.0, false};
      bool ok = false;
      for (int attempt = 0; attempt < 5000 && !ok; ++attempt) {
        const double lo_x = m + pan_x_max, hi_x = W - inst.base_w + m - pan_x_max;
        const double lo_y = m + pan_y_max, hi_y = H - inst.base_h + m - pan_y_max;
        po.world_x = static_cast<double>(rng.integer(static_cast<int>(lo_x), static_cast<int>(hi_x)));
        po.world_y = static_cast<double>(rng.integer(static_cast<int>(lo_y), static_cast<int>(hi_y)));
        const Box padded{po.world_x - 3, po.world_y - 3, inst.base_w + 6, inst.base_h + 6};
        ok = std::none_of(placed.begin(), placed.end(), [&](const Box& b) { return intersection_area(b, padded) > 0.0; });
      }
      if (!ok) {
        placed_all = false;
        break;
      }
      placed.push_back(Box{po.world_x, po.world_y, inst.base_w, inst.base_h});
      scene.objects.push_back(po);
    }
  }
  if (!placed_all) throw DataError("scene too crowded to place all instances");

  // Timeline of the target: an early appearance (crop source), the last
  // appearance (response track), then absence until the query frame.
  const int Q = T - 1 - static_cast<int>(rng.integer(0, 2));
  const int neg_len = static_cast<int>(rng.integer(std::max(2, T / 8), std::max(3, T / 3)));
  const int gt_last = Q - neg_len;
  const int gt_len = static_cast<int>(rng.integer(std::max(3, T / 12), std::max(4, T / 7)));
  const int gt_first = gt_last - gt_len + 1;
  const int gap = std::max(2, T / 16);
  const int early_len = static_cast<int>(rng.integer(2, std::max(2, T / 16)));
  const int early_first = static_cast<int>(rng.integer(0, std::max(0, gt_first - gap - early_len)));
  if (gt_first - gap - early_len < 0) throw DataError("clip too short for the target timeline");

  std::vector<std::vector<Interval>> presence(instances.size());
  presence[0] = {{early_first, early_first + early_len - 1}, {gt_first, gt_last}};
  for (int d = 1; d <= spec.distractors_per_target; ++d) {
    presence[d] = {{static_cast<int>(rng.integer(0, gt_first)), T - 1}};
  }
  for (std::size_t k = 1 + spec.distractors_per_target; k < instances.size(); ++k) {
    const int n = static_cast<int>(rng.integer(1, 2));
    for (int i = 0; i < n; ++i) presence[k].push_back(random_interval(T, T / 8, T / 2, rng));
  }

  VideoEntry entry;
  entry.clip.video_id = video_name(video_index);
  entry.clip.fps = spec.fps;
  entry.clip.frames.reserve(static_cast<std::size_t>(T));

  double pan_x = rng.uniform(-0.5, 0.5) * pan_x_max, pan_y = 0.0, vel_x = 0.0, vel_y = 0.0;
  const double max_step = 0.05 * W;
  std::vector<std::optional<Box>> target_boxes(static_cast<std::size_t>(T));
  for (int f = 0; f < T; ++f) {
    vel_x = std::clamp(0.8 * vel_x + rng.normal() * 0.5, -max_step, max_step);
    vel_y = std::clamp(0.8 * vel_y + rng.normal() * 0.2, -max_step, max_step);
    pan_x = std::clamp(pan_x + vel_x, -static_cast<double>(pan_x_max), static_cast<double>(pan_x_max));
    pan_y = std::clamp(pan_y + vel_y, -static_cast<double>(pan_y_max), static_cast<double>(pan_y_max));
    if (std::abs(pan_x) >= pan_x_max) vel_x = -0.5 * vel_x;
    if (std::abs(pan_y) >= pan_y_max) vel_y = -0.5 * vel_y;
    const CameraPose pose{static_cast<int>(std::lround(pan_x)), static_cast<int>(std::lround(pan_y)), 1.0};

    Photometry photo;
    photo.brightness = 1.0 + spec.lighting_jitter * rng.uniform(-0.5, 0.5);
    for (double& t : photo.tint) t = 1.0 + 0.3 * spec.lighting_jitter * rng.uniform(-0.5, 0.5);
    photo.blur = rng.bernoulli(spec.blur_probability);

    for (std::size_t k = 0; k < scene.objects.size(); ++k) {
      scene.objects[k].present = std::any_of(presence[k].begin(), presence[k].end(),
                                             [f](const Interval& iv) { return iv.contains(f); });
    }
    RenderResult r = render_frame(scene, pose, photo);
    for (const RenderedObject& ro : r.objects) {
      if (ro.instance_id == 0 && ro.visible) target_boxes[static_cast<std::size_t>(f)] = ro.box;
    }
    entry.clip.frames.push_back(Frame{entry.clip.video_id, f, to_bytes(r.image)});
  }

  AnnotationRecord rec;
  rec.video_id = entry.clip.video_id;
  rec.query_index = 0;
  rec.query.query_frame = Q;
  rec.query.crop_frame = early_first + early_len / 2;
  const auto& crop_box = target_boxes[static_cast<std::size_t>(rec.query.crop_frame)];
  if (!crop_box) throw DataError("target not visible at crop frame");
  rec.query.crop_box = *crop_box;
  rec.query.title = target.title();
  rec.gt_track.start = gt_first;
  for (int f = gt_first; f <= gt_last; ++f) {
    const auto& b = target_boxes[static_cast<std::size_t>(f)];
    if (!b) throw DataError("target not visible inside its response track");
    rec.gt_track.boxes.push_back(*b);
  }
  for (int f = gt_last + 1; f <= Q; ++f) {
    if (target_boxes[static_cast<std::size_t>(f)]) throw DataError("target visible after its response track");
  }
  rec.query.crop = extract_crop(entry.clip, rec.query.crop_frame, rec.query.crop_box);
  validate_record(entry.clip, rec);
  entry.records.push_back(std::move(rec));
  return entry;
}

Dataset generate(const SceneSpec& spec, const fs::path& out) {
  validate(spec);
  Dataset data;
  data.reserve(static_cast<std::size_t>(spec.num_videos));
  for (int v = 0; v < spec.num_videos; ++v) data.push_back(generate_video(spec, v));
  if (!out.empty()) {
    try {
      fs::create_directories(out);
    } catch (const fs::filesystem_error& e) {
      throw DataError(std::string("cannot create output directory: ") + e.what());
    }
    save_dataset(data, out);
    std::ofstream js(out / "spec.json", std::ios::trunc);
    if (!js) throw DataError("cannot write spec.json");
    js << to_json(spec).dump(1) << "\n";
  }
  return data;
}

}  // namespace vql::synth
