#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vql/core/dataset.hpp"
#include "vql/core/rng.hpp"

namespace vql::synth {

struct SceneSpec {
  std::uint64_t seed = 0;
  int num_videos = 10;
  int frames_per_video = 80;
  int height = 64;
  int width = 80;
  int num_instances = 3;  // non-distractor instances per scene, including the target
  int distractors_per_target = 2;
  double blur_probability = 0.1;
  double lighting_jitter = 0.2;
  double fps = 10.0;
};

/// Throws ConfigError on count or probability violations.
void validate(const SceneSpec& spec);

nlohmann::json to_json(const SceneSpec& spec);
SceneSpec scene_spec_from_json(const nlohmann::json& j);

enum class Shape { kEllipse, kRectangle, kTriangle, kRing };
enum class Texture { kSolid, kStripesH, kStripesV, kChecker, kDots };

inline constexpr int kNumShapes = 4;
inline constexpr int kNumTextures = 5;
inline constexpr int kNumColors = 8;

const char* shape_name(Shape s);
const char* texture_name(Texture t);
const char* color_name(int color);
std::array<double, 3> color_rgb(int color);

/// Minimum relative size difference for a distractor that differs by size.
inline constexpr double kDistractorSizeMargin = 0.25;

struct ObjectInstance {
  int instance_id = 0;
  Shape shape = Shape::kRectangle;
  int color = 0;
  Texture texture = Texture::kSolid;
  double base_w = 12.0;
  double base_h = 12.0;
  std::optional<int> distractor_of;  // target instance id when this is a distractor

  /// "<color> <texture> <shape>", e.g. "red striped ring".
  std::string title() const;
};

/// True when `d` is a valid distractor of `target`: same shape kind and different
/// in colour, texture or size (by at least kDistractorSizeMargin).
bool is_valid_distractor(const ObjectInstance& target, const ObjectInstance& d);

/// Every (color, texture, shape) title the generator can emit.
std::vector<std::string> title_catalog();

struct CameraPose {
  int pan_x = 0;  // world offset of the view, pixels
  int pan_y = 0;
  double scale = 1.0;  // zoom about the frame centre
};

struct PlacedObject {
  ObjectInstance instance;
  double world_x = 0.0;  // top-left corner in world coordinates
  double world_y = 0.0;
  bool present = true;
};

/// Per-frame photometric state.
struct Photometry {
  double brightness = 1.0;
  std::array<double, 3> tint{1.0, 1.0, 1.0};
  bool blur = false;
};

struct SceneState {
  int height = 64;
  int width = 80;
  int margin = 8;     // world extends `margin` pixels beyond the view on every side
  Image background;   // (height + 2 margin) x (width + 2 margin)
  std::vector<PlacedObject> objects;
};

struct RenderedObject {
  int instance_id = 0;
  std::optional<Box> box;       // tight bound of visible pixels (absent when not visible)
  int full_pixels = 0;          // unoccluded, unclipped pixel count
  int visible_pixels = 0;       // pixels inside the frame
  bool visible = false;         // visible_pixels >= 25% of full_pixels
};

struct RenderResult {
  Image image;
  std::vector<RenderedObject> objects;  // one entry per present object, in scene order
};

/// Visibility threshold as a fraction of the object's unoccluded area.
inline constexpr double kVisibleFraction = 0.25;

/// Pixel mask membership test for an object at the given screen geometry.
bool covers_pixel(const ObjectInstance& inst, double sx, double sy, double sw, double sh, int px, int py);

RenderResult render_frame(const SceneState& scene, const CameraPose& pose, const Photometry& photo);

/// Smooth background texture for a scene (world-sized).
Image make_background(int height, int width, int margin, Rng& rng);

/// Generates one video deterministically from (spec.seed, video index).
VideoEntry generate_video(const SceneSpec& spec, int video_index);

/// Generates every video; writes the dataset layout plus spec.json to `out` when non-empty.
Dataset generate(const SceneSpec& spec, const std::filesystem::path& out = {});

std::string video_name(int index);

}  // namespace vql::synth
