#include <algorithm>
#include <cmath>

#include "vql/synth/scene.hpp"

namespace vql::synth {
namespace {

constexpr std::array<std::array<double, 3>, kNumColors> kPalette{{
    {0.85, 0.15, 0.15},  // red
    {0.15, 0.70, 0.20},  // green
    {0.15, 0.30, 0.85},  // blue
    {0.90, 0.85, 0.15},  // yellow
    {0.80, 0.20, 0.75},  // magenta
    {0.15, 0.80, 0.80},  // cyan
    {0.95, 0.55, 0.10},  // orange
    {0.50, 0.20, 0.80},  // purple
}};
constexpr std::array<const char*, kNumColors> kColorNames{"red", "green", "blue", "yellow",
                                                          "magenta", "cyan", "orange", "purple"};

int texture_bit(Texture t, int lx, int ly) {
  switch (t) {
    case Texture::kSolid:
      return 0;
    case Texture::kStripesH:
      return (ly / 2) % 2;
    case Texture::kStripesV:
      return (lx / 2) % 2;
    case Texture::kChecker:
      return (lx / 2 + ly / 2) % 2;
    case Texture::kDots:
      return (lx % 4 < 2 && ly % 4 < 2) ? 1 : 0;
  }
  return 0;
}

Image box_blur3(const Image& img) {
  Image out(img.channels(), img.height, img.width);
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = std::clamp(y + dy, 0, img.height - 1);
            const int xx = std::clamp(x + dx, 0, img.width - 1);
            acc += img.at(c, yy, xx);
          }
        }
        out.at(c, y, x) = acc / 9.0;
      }
    }
  }
  return out;
}

}  // namespace

const char* shape_name(Shape s) {
  switch (s) {
    case Shape::kEllipse:
      return "ellipse";
    case Shape::kRectangle:
      return "rectangle";
    case Shape::kTriangle:
      return "triangle";
    case Shape::kRing:
      return "ring";
  }
  return "?";
}

const char* texture_name(Texture t) {
  switch (t) {
    case Texture::kSolid:
      return "plain";
    case Texture::kStripesH:
      return "striped";
    case Texture::kStripesV:
      return "barred";
    case Texture::kChecker:
      return "checkered";
    case Texture::kDots:
      return "dotted";
  }
  return "?";
}

const char* color_name(int color) { return kColorNames.at(static_cast<std::size_t>(color)); }
std::array<double, 3> color_rgb(int color) { return kPalette.at(static_cast<std::size_t>(color)); }

std::string ObjectInstance::title() const {
  return std::string(color_name(color)) + " " + texture_name(texture) + " " + shape_name(shape);
}

bool is_valid_distractor(const ObjectInstance& target, const ObjectInstance& d) {
  if (d.shape != target.shape) return false;
  const double rel = std::abs(d.base_w * d.base_h - target.base_w * target.base_h) / (target.base_w * target.base_h);
  return d.color != target.color || d.texture != target.texture || rel >= kDistractorSizeMargin;
}

std::vector<std::string> title_catalog() {
  std::vector<std::string> out;
  for (int c = 0; c < kNumColors; ++c) {
    for (int t = 0; t < kNumTextures; ++t) {
      for (int s = 0; s < kNumShapes; ++s) {
        ObjectInstance o;
        o.color = c;
        o.texture = static_cast<Texture>(t);
        o.shape = static_cast<Shape>(s);
        out.push_back(o.title());
      }
    }
  }
  return out;
}

bool covers_pixel(const ObjectInstance& inst, double sx, double sy, double sw, double sh, int px, int py) {
  const double u = (px + 0.5 - sx) / sw;
  const double v = (py + 0.5 - sy) / sh;
  if (u < 0.0 || u >= 1.0 || v < 0.0 || v >= 1.0) return false;
  const double du = 2.0 * u - 1.0;
  const double dv = 2.0 * v - 1.0;
  const double r2 = du * du + dv * dv;
  switch (inst.shape) {
    case Shape::kRectangle:
      return true;
    case Shape::kEllipse:
      return r2 <= 1.0;
    case Shape::kTriangle:
      return std::abs(u - 0.5) <= 0.5 * v + 1e-12;
    case Shape::kRing:
      return r2 <= 1.0 && r2 >= 0.3;
  }
  return false;
}

Image make_background(int height, int width, int margin, Rng& rng) {
  const int wh = height + 2 * margin;
  const int ww = width + 2 * margin;
  Image bg(3, wh, ww);
  std::array<double, 3> c0{}, c1{};
  const double base0 = rng.uniform(0.38, 0.55);
  const double base1 = rng.uniform(0.38, 0.55);
  for (int c = 0; c < 3; ++c) {
    c0[c] = base0 + rng.uniform(-0.05, 0.05);
    c1[c] = base1 + rng.uniform(-0.05, 0.05);
  }
  const double angle = rng.uniform(0.0, 2.0 * M_PI);
  const double gx = std::cos(angle), gy = std::sin(angle);
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::array<Wave, 3> waves{};
  for (auto& w : waves) w = {rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), rng.uniform(0.0, 2 * M_PI), 0.012};
  const double diag = std::hypot(static_cast<double>(ww), static_cast<double>(wh));
  for (int y = 0; y < wh; ++y) {
    for (int x = 0; x < ww; ++x) {
      const double t = std::clamp(0.5 + ((x - 0.5 * ww) * gx + (y - 0.5 * wh) * gy) / diag, 0.0, 1.0);
      double n = 0.0;
      for (const auto& w : waves) n += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
      for (int c = 0; c < 3; ++c) bg.at(c, y, x) = (1.0 - t) * c0[c] + t * c1[c] + n;
    }
  }
  return bg;
}

RenderResult render_frame(const SceneState& scene, const CameraPose& pose, const Photometry& photo) {
  const int H = scene.height;
  const int W = scene.width;
  if (std::abs(pose.pan_x) > scene.margin || std::abs(pose.pan_y) > scene.margin || !(pose.scale > 0.0)) {
    throw DataError("camera pose outside scene bounds");
  }
  RenderResult out;
  out.image = Image(3, H, W);
  const double cx = 0.5 * W, cy = 0.5 * H;
  const int bh = scene.background.height, bw = scene.background.width;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double wx = (x + 0.5 - cx) / pose.scale + cx + scene.margin + pose.pan_x;
      const double wy = (y + 0.5 - cy) / pose.scale + cy + scene.margin + pose.pan_y;
      const int ix = std::clamp(static_cast<int>(std::floor(wx)), 0, bw - 1);
      const int iy = std::clamp(static_cast<int>(std::floor(wy)), 0, bh - 1);
      for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = scene.background.at(c, iy, ix);
    }
  }

  for (const PlacedObject& obj : scene.objects) {
    if (!obj.present) continue;
    const ObjectInstance& inst = obj.instance;
    const double sx = (obj.world_x - scene.margin - pose.pan_x - cx) * pose.scale + cx;
    const double sy = (obj.world_y - scene.margin - pose.pan_y - cy) * pose.scale + cy;
    const double sw = inst.base_w * pose.scale;
    const double sh = inst.base_h * pose.scale;
    const auto rgb = color_rgb(inst.color);

    RenderedObject ro;
    ro.instance_id = inst.instance_id;
    int minx = W, miny = H, maxx = -1, maxy = -1;
    const int x0 = static_cast<int>(std::floor(sx)) - 1, x1 = static_cast<int>(std::ceil(sx + sw)) + 1;
    const int y0 = static_cast<int>(std::floor(sy)) - 1, y1 = static_cast<int>(std::ceil(sy + sh)) + 1;
    for (int py = y0; py <= y1; ++py) {
      for (int px = x0; px <= x1; ++px) {
        if (!covers_pixel(inst, sx, sy, sw, sh, px, py)) continue;
        ++ro.full_pixels;
        if (px < 0 || py < 0 || px >= W || py >= H) continue;
        ++ro.visible_pixels;
        minx = std::min(minx, px);
        maxx = std::max(maxx, px);
        miny = std::min(miny, py);
        maxy = std::max(maxy, py);
        const int lx = static_cast<int>(std::floor((px + 0.5 - sx) / pose.scale));
        const int ly = static_cast<int>(std::floor((py + 0.5 - sy) / pose.scale));
        const double shade = 1.0 - 0.4 * texture_bit(inst.texture, lx, ly);
        for (int c = 0; c < 3; ++c) out.image.at(c, py, px) = rgb[c] * shade;
      }
    }
    if (ro.visible_pixels > 0) {
      ro.box = Box{static_cast<double>(minx), static_cast<double>(miny), static_cast<double>(maxx - minx + 1),
                   static_cast<double>(maxy - miny + 1)};
    }
    ro.visible = ro.full_pixels > 0 && ro.visible_pixels >= kVisibleFraction * ro.full_pixels;
    out.objects.push_back(ro);
  }

  for (int c = 0; c < 3; ++c) out.image.data.row(c) *= photo.brightness * photo.tint[c];
  if (photo.blur) out.image = box_blur3(out.image);
  out.image.data = out.image.data.cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

}  // namespace vql::synth
