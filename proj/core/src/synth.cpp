#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "tsr/dataset.hpp"
#include "tsr/image.hpp"

namespace tsr {

namespace {

struct Rgb {
  float r, g, b;
};

constexpr Rgb kRed{0.85f, 0.08f, 0.08f};
constexpr Rgb kBlue{0.10f, 0.25f, 0.85f};
constexpr Rgb kYellow{0.95f, 0.85f, 0.10f};
constexpr Rgb kGreen{0.05f, 0.65f, 0.20f};
constexpr Rgb kOrange{0.95f, 0.55f, 0.05f};
constexpr Rgb kPurple{0.55f, 0.10f, 0.75f};
constexpr Rgb kCyan{0.05f, 0.75f, 0.80f};
constexpr Rgb kMagenta{0.90f, 0.10f, 0.60f};
constexpr Rgb kWhite{0.97f, 0.97f, 0.97f};
constexpr Rgb kDark{0.05f, 0.05f, 0.08f};

// Each template fills its patch so the annotation box equals the pasted
// extent; pixels outside the shape keep the background.
bool sign_pixel(int class_id, float u, float v, Rgb& out) {
  const float du = u - 0.5f, dv = v - 0.5f;
  const float r = std::sqrt(du * du + dv * dv);
  switch (class_id) {
    case 1:  // red disc with a white horizontal bar
      if (r > 0.5f) return false;
      out = (std::fabs(dv) <= 0.12f && std::fabs(du) <= 0.32f) ? kWhite : kRed;
      return true;
    case 2:  // blue disc with a white up arrow
      if (r > 0.5f) return false;
      out = kBlue;
      if (std::fabs(du) <= 0.07f && v >= 0.30f && v <= 0.78f) out = kWhite;
      if (v >= 0.20f && v <= 0.50f && std::fabs(du) <= (v - 0.20f) * 0.75f) out = kWhite;
      return true;
    case 3:  // yellow diamond, dark border
      if (std::fabs(du) + std::fabs(dv) > 0.5f) return false;
      out = (std::fabs(du) + std::fabs(dv) > 0.40f) ? kDark : kYellow;
      return true;
    case 4: {  // warning triangle: white core, red border
      if (std::fabs(du) > v * 0.5f) return false;
      const float edge = v * 0.5f - std::fabs(du);
      out = (edge <= 0.09f || v >= 0.86f) ? kRed : kWhite;
      return true;
    }
    case 5:  // blue square with a white cross
      out = (std::fabs(du) <= 0.10f || std::fabs(dv) <= 0.10f) ? kWhite : kBlue;
      return true;
    case 6:  // green disc with a white center dot
      if (r > 0.5f) return false;
      out = r <= 0.18f ? kWhite : kGreen;
      return true;
    case 7:  // orange triangle pointing down
      if (std::fabs(du) > (1.0f - v) * 0.5f) return false;
      out = kOrange;
      return true;
    case 8: {  // purple square with a white square ring
      const float m = std::max(std::fabs(du), std::fabs(dv));
      out = (m >= 0.25f && m <= 0.38f) ? kWhite : kPurple;
      return true;
    }
    case 9:  // cyan disc with a dark ring
      if (r > 0.5f) return false;
      out = (r >= 0.25f && r <= 0.38f) ? kDark : kCyan;
      return true;
    case 10: {  // magenta octagon with a white border band
      const float m = std::fabs(du) + std::fabs(dv);
      if (m > 0.70f) return false;
      out = (m > 0.56f || std::fabs(du) > 0.43f || std::fabs(dv) > 0.43f) ? kWhite : kMagenta;
      return true;
    }
    default:
      throw Error("sign class id out of range: " + std::to_string(class_id));
  }
}

void put_px(Tensor& img, int x, int y, Rgb c) {
  img.at(0, 0, y, x) = c.r;
  img.at(0, 1, y, x) = c.g;
  img.at(0, 2, y, x) = c.b;
}

bool boxes_apart(const BBox& a, const BBox& b, double gap) {
  return a.x_max + gap <= b.x_min || b.x_max + gap <= a.x_min || a.y_max + gap <= b.y_min ||
         b.y_max + gap <= a.y_min;
}

}  // namespace

const std::vector<std::string>& synth_class_names() {
  static const std::vector<std::string> names = {
      "red_circle_bar",   "blue_circle_arrow", "yellow_diamond",  "red_triangle",
      "blue_square_cross", "green_circle_dot",  "orange_triangle", "purple_square_ring",
      "cyan_circle_ring", "magenta_octagon"};
  return names;
}

void draw_sign(Tensor& image, int class_id, int x0, int y0, int side) {
  for (int py = 0; py < side; ++py) {
    for (int px = 0; px < side; ++px) {
      Rgb c;
      if (sign_pixel(class_id, (px + 0.5f) / side, (py + 0.5f) / side, c))
        put_px(image, x0 + px, y0 + py, c);
    }
  }
}

DatasetManifest synth_generate(const SynthConfig& cfg, int count, const std::string& out_dir,
                               DatasetManifest::Split split) {
  if (count < 1) throw Error("synth_generate: count must be >= 1");
  if (cfg.min_size < 8 || cfg.max_size < cfg.min_size)
    throw Error("synth_generate: bad size range");
  if (cfg.num_classes < 1 || cfg.num_classes > 10)
    throw Error("synth_generate: num_classes must be in 1..10");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  std::mt19937 rng(static_cast<std::mt19937::result_type>(cfg.seed));
  DatasetManifest m;
  m.class_names = synth_class_names();
  m.split = split;
  m.base_dir = out_dir;

  const int S = cfg.image_size;
  std::uniform_real_distribution<float> noise(-0.03f, 0.03f);
  std::uniform_int_distribution<int> nsigns(cfg.min_signs, cfg.max_signs);
  std::uniform_int_distribution<int> cls(1, cfg.num_classes);

  for (int i = 0; i < count; ++i) {
    Tensor img(1, 3, S, S);
    // sky-to-ground gradient with pixel noise
    for (int y = 0; y < S; ++y) {
      const float t = float(y) / float(S - 1);
      const Rgb base{0.55f - 0.20f * t, 0.62f - 0.24f * t, 0.70f - 0.37f * t};
      for (int x = 0; x < S; ++x)
        put_px(img, x, y, Rgb{std::clamp(base.r + noise(rng), 0.0f, 1.0f),
                              std::clamp(base.g + noise(rng), 0.0f, 1.0f),
                              std::clamp(base.b + noise(rng), 0.0f, 1.0f)});
    }
    // low-saturation clutter rectangles (buildings, vehicles, fences)
    std::uniform_int_distribution<int> csize(8, std::max(9, S / 3));
    std::uniform_real_distribution<float> gray(0.20f, 0.70f);
    std::uniform_real_distribution<float> tint(-0.05f, 0.05f);
    for (int k = 0; k < cfg.clutter; ++k) {
      const int cw = csize(rng), ch = csize(rng);
      std::uniform_int_distribution<int> px(0, std::max(0, S - cw));
      std::uniform_int_distribution<int> py(0, std::max(0, S - ch));
      const int x0 = px(rng), y0 = py(rng);
      const float g = gray(rng);
      const Rgb c{std::clamp(g + tint(rng), 0.0f, 1.0f), std::clamp(g + tint(rng), 0.0f, 1.0f),
                  std::clamp(g + tint(rng), 0.0f, 1.0f)};
      for (int y = y0; y < std::min(S, y0 + ch); ++y)
        for (int x = x0; x < std::min(S, x0 + cw); ++x) put_px(img, x, y, c);
    }

    DatasetEntry entry;
    char name[32];
    std::snprintf(name, sizeof name, "img_%05d.ppm", i);
    entry.image_path = name;

    const int want = nsigns(rng);
    std::vector<BBox> placed;
    for (int s = 0; s < want; ++s) {
      const int side_max = std::min(cfg.max_size, S - 4);
      std::uniform_int_distribution<int> size_dist(cfg.min_size, side_max);
      const int cid = cls(rng);
      const int side = size_dist(rng);
      bool ok = false;
      for (int attempt = 0; attempt < 60 && !ok; ++attempt) {
        std::uniform_int_distribution<int> pos(2, S - side - 2);
        const int x0 = pos(rng), y0 = pos(rng);
        const BBox box{double(x0), double(y0), double(x0 + side), double(y0 + side)};
        ok = true;
        for (const BBox& p : placed)
          if (!boxes_apart(box, p, 4.0)) {
            ok = false;
            break;
          }
        if (!ok) continue;
        draw_sign(img, cid, x0, y0, side);
        placed.push_back(box);
        Annotation a;
        a.image_id = entry.image_path;
        a.box = box;
        a.class_id = cid;
        a.visibility = Visibility::Visible;
        entry.annotations.push_back(std::move(a));
      }
    }
    save_ppm((fs::path(out_dir) / entry.image_path).string(), img);
    m.entries.push_back(std::move(entry));
  }
  write_manifest((fs::path(out_dir) / "manifest.txt").string(), m);
  return m;
}

}  // namespace tsr
