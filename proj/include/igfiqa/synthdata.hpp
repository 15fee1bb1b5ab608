#pragma once

// Synthetic identity datasets and the quality-degrading augmentations.
//
// Each class is a smooth random pattern made of Gaussian blobs. "Normal"
// classes render the pattern under a per-sample geometric perturbation whose
// magnitude is pose_spread; "duplicate" classes replicate the pattern with
// sub-tolerance pixel noise only, which is the low intra-class variance case
// the quality weights are meant to detect.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "igfiqa/common.hpp"

namespace igfiqa {

class Image {
 public:
  Image() = default;
  explicit Image(std::size_t side, float fill = 0.0f) : side_(side), pixels_(side * side, fill) {}
  Image(std::size_t side, std::vector<float> pixels) : side_(side), pixels_(std::move(pixels)) {
    if (pixels_.size() != side_ * side_) throw StructuralError("image pixel count does not match side^2");
  }

  std::size_t side() const { return side_; }
  std::size_t size() const { return pixels_.size(); }

  float& at(std::size_t r, std::size_t c) { return pixels_[r * side_ + c]; }
  float at(std::size_t r, std::size_t c) const { return pixels_[r * side_ + c]; }

  std::span<float> pixels() { return pixels_; }
  std::span<const float> pixels() const { return pixels_; }

  bool in_unit_range() const {
    for (float p : pixels_)
      if (!(p >= 0.0f && p <= 1.0f)) return false;
    return true;
  }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t side_ = 0;
  std::vector<float> pixels_;
};

// ---------------------------------------------------------------------------
// Augmentations

/// Shrink by `factor` with exact area averaging, then restore to the original
/// side with bilinear interpolation.
inline Image rescale_blur(const Image& img, double factor) {
  if (!(factor > 0.0 && factor <= 1.0)) throw DomainError("rescale_blur factor must lie in (0, 1]");
  const std::size_t side = img.side();
  const std::size_t small = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(side * factor)));
  if (small == side) return img;

  // Area weights: destination cell i covers [i*side/small, (i+1)*side/small).
  const double span = static_cast<double>(side) / static_cast<double>(small);
  std::vector<std::vector<std::pair<std::size_t, double>>> taps(small);
  for (std::size_t i = 0; i < small; ++i) {
    const double lo = i * span, hi = (i + 1) * span;
    double total = 0.0;
    for (auto s = static_cast<std::size_t>(std::floor(lo)); s < side && s < hi; ++s) {
      const double w = std::min<double>(hi, s + 1.0) - std::max<double>(lo, s);
      if (w > 0.0) {
        taps[i].emplace_back(s, w);
        total += w;
      }
    }
    for (auto& t : taps[i]) t.second /= total;
  }

  std::vector<double> rows(small * side, 0.0);
  for (std::size_t i = 0; i < small; ++i)
    for (std::size_t c = 0; c < side; ++c) {
      double acc = 0.0;
      for (auto [r, w] : taps[i]) acc += w * img.at(r, c);
      rows[i * side + c] = acc;
    }
  std::vector<double> shrunk(small * small, 0.0);
  for (std::size_t i = 0; i < small; ++i)
    for (std::size_t j = 0; j < small; ++j) {
      double acc = 0.0;
      for (auto [c, w] : taps[j]) acc += w * rows[i * side + c];
      shrunk[i * small + j] = acc;
    }

  // Bilinear restore with pixel-center alignment and edge clamping.
  auto source = [&](std::size_t x, std::size_t& i0, std::size_t& i1, double& t) {
    double pos = (x + 0.5) * static_cast<double>(small) / static_cast<double>(side) - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(small - 1));
    i0 = static_cast<std::size_t>(std::floor(pos));
    i1 = std::min(i0 + 1, small - 1);
    t = pos - static_cast<double>(i0);
  };
  Image out(side);
  for (std::size_t r = 0; r < side; ++r) {
    std::size_t r0, r1;
    double tr;
    source(r, r0, r1, tr);
    for (std::size_t c = 0; c < side; ++c) {
      std::size_t c0, c1;
      double tc;
      source(c, c0, c1, tc);
      const double top = (1 - tc) * shrunk[r0 * small + c0] + tc * shrunk[r0 * small + c1];
      const double bot = (1 - tc) * shrunk[r1 * small + c0] + tc * shrunk[r1 * small + c1];
      out.at(r, c) = static_cast<float>(std::clamp((1 - tr) * top + tr * bot, 0.0, 1.0));
    }
  }
  return out;
}

struct Rect {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};

inline Image erase_rect(const Image& img, const Rect& rect) {
  if (rect.top + rect.height > img.side() || rect.left + rect.width > img.side())
    throw DomainError("erase rectangle exceeds image bounds");
  Image out = img;
  for (std::size_t r = rect.top; r < rect.top + rect.height; ++r)
    for (std::size_t c = rect.left; c < rect.left + rect.width; ++c) out.at(r, c) = 0.0f;
  return out;
}

inline constexpr double kEraseMinArea = 0.05;
inline constexpr double kEraseMaxArea = 0.30;

/// Rectangle with integer sides whose area fraction lies in [min_area, max_area]
/// and aspect ratio in [1/2, 2] as far as the grid allows.
inline Rect draw_erase_rect(std::size_t side, Rng& rng, double min_area = kEraseMinArea,
                            double max_area = kEraseMaxArea) {
  const double total = static_cast<double>(side * side);
  const double area = uniform(rng, min_area, max_area) * total;
  const double aspect = std::exp(uniform(rng, std::log(0.5), std::log(2.0)));
  auto h = static_cast<std::size_t>(std::clamp<long>(std::lround(std::sqrt(area * aspect)), 1, static_cast<long>(side)));
  auto w = static_cast<std::size_t>(std::clamp<long>(std::lround(area / h), 1, static_cast<long>(side)));
  while (static_cast<double>(h * w) > max_area * total) (w > h ? w : h) -= 1;
  while (static_cast<double>(h * w) < min_area * total) {
    if (w <= h && w < side)
      ++w;
    else if (h < side)
      ++h;
    else
      ++w;
  }
  Rect rect;
  rect.height = h;
  rect.width = w;
  rect.top = uniform_index(rng, side - h + 1);
  rect.left = uniform_index(rng, side - w + 1);
  return rect;
}

inline Image random_erase(const Image& img, Rng& rng) { return erase_rect(img, draw_erase_rect(img.side(), rng)); }

inline Image apply_jitter(const Image& img, double contrast, double brightness) {
  Image out = img;
  for (float& p : out.pixels())
    p = static_cast<float>(std::clamp(contrast * (static_cast<double>(p) - 0.5) + 0.5 + brightness, 0.0, 1.0));
  return out;
}

inline constexpr double kJitterContrastLo = 0.6, kJitterContrastHi = 1.4;
inline constexpr double kJitterBrightness = 0.2;

inline Image color_jitter(const Image& img, Rng& rng) {
  const double a = uniform(rng, kJitterContrastLo, kJitterContrastHi);
  const double b = uniform(rng, -kJitterBrightness, kJitterBrightness);
  return apply_jitter(img, a, b);
}

// Shrink factor range used by augment(); 0.25 maps a 24px image down to 6px.
inline constexpr double kAugmentRescaleLo = 0.25, kAugmentRescaleHi = 0.75;

struct AugmentTrace {
  bool rescaled = false;
  bool erased = false;
  bool jittered = false;
};

/// Each degrading operator fires independently with probability p,
/// in the order rescale, erase, jitter.
inline Image augment(const Image& img, Rng& rng, double p, AugmentTrace* trace = nullptr) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("augment probability must lie in [0, 1]");
  AugmentTrace t;
  Image out = img;
  if (bernoulli(rng, p)) {
    out = rescale_blur(out, uniform(rng, kAugmentRescaleLo, kAugmentRescaleHi));
    t.rescaled = true;
  }
  if (bernoulli(rng, p)) {
    out = random_erase(out, rng);
    t.erased = true;
  }
  if (bernoulli(rng, p)) {
    out = color_jitter(out, rng);
    t.jittered = true;
  }
  if (trace) *trace = t;
  return out;
}

inline Image mirror(const Image& img) {
  Image out(img.side());
  const std::size_t s = img.side();
  for (std::size_t r = 0; r < s; ++r)
    for (std::size_t c = 0; c < s; ++c) out.at(r, s - 1 - c) = img.at(r, c);
  return out;
}

/// Mirror columns with probability 0.5.
inline Image hflip(const Image& img, Rng& rng) { return bernoulli(rng, 0.5) ? mirror(img) : img; }

// ---------------------------------------------------------------------------
// Dataset generation

struct SynthConfig {
  std::uint32_t num_classes = 50;
  std::uint32_t samples_per_class = 40;
  std::uint32_t image_side = 24;
  double duplicate_class_fraction = 0.2;
  double pose_spread = 2.0;
  double degrade_fraction = 0.3;
  // Max pairwise pixel difference inside a duplicate class.
  double duplicate_tolerance = 0.02;
  std::uint64_t seed = 1;
  // Selects an independent sample stream over the same class templates, so a
  // held-out split shares identities with the training split.
  std::uint32_t split = 0;

  void validate() const {
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (samples_per_class < 2) throw ConfigError("samples_per_class must be >= 2");
    if (image_side < 4) throw ConfigError("image_side must be >= 4");
    auto unit = [](double v, const char* name) {
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
    };
    unit(duplicate_class_fraction, "duplicate_class_fraction");
    unit(degrade_fraction, "degrade_fraction");
    unit(duplicate_tolerance, "duplicate_tolerance");
    if (!(pose_spread >= 0.0)) throw ConfigError("pose_spread must be >= 0");
  }
};

enum class ClassFlag : std::uint8_t { kNormal = 0, kDuplicate = 1 };

struct IdentityDataset {
  std::uint32_t num_classes = 0;
  std::uint32_t samples_per_class = 0;
  std::uint32_t image_side = 0;
  std::vector<Image> images;
  std::vector<std::uint32_t> labels;
  std::vector<float> degradation_level;
  std::vector<ClassFlag> class_flags;

  std::size_t size() const { return images.size(); }

  void validate() const {
    if (images.size() != labels.size() || images.size() != degradation_level.size())
      throw StructuralError("dataset arrays have mismatched lengths");
    if (class_flags.size() != num_classes) throw StructuralError("class flag count does not match num_classes");
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (images[i].side() != image_side) throw StructuralError("image side mismatch at sample " + std::to_string(i));
      if (labels[i] >= num_classes) throw StructuralError("label out of range at sample " + std::to_string(i));
      if (!(degradation_level[i] >= 0.0f && degradation_level[i] <= 1.0f))
        throw StructuralError("degradation level outside [0, 1] at sample " + std::to_string(i));
    }
  }

  friend bool operator==(const IdentityDataset&, const IdentityDataset&) = default;
};

namespace detail {

struct Blob {
  double cy, cx, sigma, amp;
};

struct Pose {
  double dy = 0, dx = 0, rot = 0, scale = 1;
};

inline std::vector<Blob> make_template(const SynthConfig& cfg, std::uint32_t cls) {
  auto rng = make_rng(cfg.seed, {id(Stream::kClassTemplate), cls});
  const double s = cfg.image_side;
  std::vector<Blob> blobs(8);
  for (auto& b : blobs) {
    b.cy = uniform(rng, 0.15 * s, 0.85 * s);
    b.cx = uniform(rng, 0.15 * s, 0.85 * s);
    b.sigma = uniform(rng, 1.5, 3.5) * s / 24.0;
    b.amp = uniform(rng, -1.5, 1.5);
  }
  return blobs;
}

inline Image render(const std::vector<Blob>& blobs, std::size_t side, const Pose& pose,
                    const std::vector<double>& amp_gain) {
  Image img(side);
  const double mid = (static_cast<double>(side) - 1.0) / 2.0;
  const double cr = std::cos(pose.rot), sr = std::sin(pose.rot);
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) {
      // Inverse warp: sample the template at the pre-image of (r, c).
      const double y = (r - mid - pose.dy) / pose.scale, x = (c - mid - pose.dx) / pose.scale;
      const double ty = cr * y + sr * x + mid, tx = -sr * y + cr * x + mid;
      double field = 0.0;
      for (std::size_t k = 0; k < blobs.size(); ++k) {
        const auto& b = blobs[k];
        const double d2 = (ty - b.cy) * (ty - b.cy) + (tx - b.cx) * (tx - b.cx);
        field += amp_gain[k] * b.amp * std::exp(-d2 / (2.0 * b.sigma * b.sigma));
      }
      img.at(r, c) = static_cast<float>(0.5 + 0.5 * std::tanh(field));
    }
  return img;
}

}  // namespace detail

/// Quality degradation with strength proportional to `level` in (0, 1]:
/// blur, erasure and contrast loss grow together.
inline Image degrade(const Image& img, double level, Rng& rng) {
  if (!(level > 0.0 && level <= 1.0)) throw DomainError("degradation level must lie in (0, 1]");
  Image out = rescale_blur(img, 1.0 - 0.75 * level);
  const double area = 0.25 * level;
  if (area * img.side() * img.side() >= 1.0) out = erase_rect(out, draw_erase_rect(img.side(), rng, area, area));
  const double brightness = uniform(rng, -0.2, 0.2) * level;
  return apply_jitter(out, 1.0 - 0.6 * level, brightness);
}

inline IdentityDataset gen_dataset(const SynthConfig& cfg) {
  cfg.validate();
  IdentityDataset ds;
  ds.num_classes = cfg.num_classes;
  ds.samples_per_class = cfg.samples_per_class;
  ds.image_side = cfg.image_side;
  ds.class_flags.assign(cfg.num_classes, ClassFlag::kNormal);

  {
    auto rng = make_rng(cfg.seed, {id(Stream::kClassFlags)});
    std::vector<std::uint32_t> order(cfg.num_classes);
    for (std::uint32_t c = 0; c < cfg.num_classes; ++c) order[c] = c;
    shuffle(order.begin(), order.end(), rng);
    const auto dup = static_cast<std::size_t>(std::llround(cfg.duplicate_class_fraction * cfg.num_classes));
    for (std::size_t k = 0; k < dup; ++k) ds.class_flags[order[k]] = ClassFlag::kDuplicate;
  }

  // Duplicate classes are degraded as a whole: every copy gets the same level
  // and the same operator draw, so the class stays within tolerance.
  std::vector<char> dup_degraded(cfg.num_classes, 0);
  {
    std::vector<std::uint32_t> dups;
    for (std::uint32_t c = 0; c < cfg.num_classes; ++c)
      if (ds.class_flags[c] == ClassFlag::kDuplicate) dups.push_back(c);
    auto rng = make_rng(cfg.seed, {id(Stream::kClassFlags), cfg.split});
    shuffle(dups.begin(), dups.end(), rng);
    const auto n = static_cast<std::size_t>(std::llround(cfg.degrade_fraction * dups.size()));
    for (std::size_t k = 0; k < n; ++k) dup_degraded[dups[k]] = 1;
  }

  const std::size_t total = static_cast<std::size_t>(cfg.num_classes) * cfg.samples_per_class;
  ds.images.reserve(total);
  ds.labels.reserve(total);
  ds.degradation_level.reserve(total);

  const auto degraded_per_class =
      static_cast<std::size_t>(std::llround(cfg.degrade_fraction * cfg.samples_per_class));
  const double tol = cfg.duplicate_tolerance;

  for (std::uint32_t cls = 0; cls < cfg.num_classes; ++cls) {
    const auto blobs = detail::make_template(cfg, cls);
    const bool duplicate = ds.class_flags[cls] == ClassFlag::kDuplicate;

    std::vector<char> degraded(cfg.samples_per_class, 0);
    float class_level = 0.0f;
    Rng class_degrade_rng = make_rng(cfg.seed, {id(Stream::kSample), cfg.split, cls, 0xd0d0ULL});
    if (duplicate) {
      if (dup_degraded[cls]) {
        class_level = static_cast<float>(1.0 - uniform(class_degrade_rng, 0.0, 1.0));
        degraded.assign(cfg.samples_per_class, 1);
      }
    } else {
      auto rng = make_rng(cfg.seed, {id(Stream::kSample), cfg.split, cls, 0xdeadULL});
      std::vector<std::uint32_t> order(cfg.samples_per_class);
      for (std::uint32_t i = 0; i < cfg.samples_per_class; ++i) order[i] = i;
      shuffle(order.begin(), order.end(), rng);
      for (std::size_t k = 0; k < degraded_per_class; ++k) degraded[order[k]] = 1;
    }

    for (std::uint32_t i = 0; i < cfg.samples_per_class; ++i) {
      const std::uint64_t index = static_cast<std::uint64_t>(cls) * cfg.samples_per_class + i;
      auto rng = make_rng(cfg.seed, {id(Stream::kSample), cfg.split, index});
      detail::Pose pose;
      std::vector<double> gain(blobs.size(), 1.0);
      Image img;
      if (duplicate) {
        img = detail::render(blobs, cfg.image_side, pose, gain);
        for (float& p : img.pixels())
          p = static_cast<float>(std::clamp(p + uniform(rng, -0.5 * tol, 0.5 * tol), 0.0, 1.0));
      } else {
        const double ps = cfg.pose_spread;
        pose.dy = uniform(rng, -1, 1) * ps;
        pose.dx = uniform(rng, -1, 1) * ps;
        pose.rot = uniform(rng, -1, 1) * 0.1 * ps;
        pose.scale = 1.0 + uniform(rng, -1, 1) * 0.04 * ps;
        for (auto& g : gain) g = 1.0 + uniform(rng, -1, 1) * 0.1 * ps;
        img = detail::render(blobs, cfg.image_side, pose, gain);
      }
      float level = 0.0f;
      if (degraded[i] && duplicate) {
        Rng shared = class_degrade_rng;
        level = class_level;
        img = degrade(img, level, shared);
      } else if (degraded[i]) {
        // (0, 1]: never exactly pristine.
        level = static_cast<float>(1.0 - uniform(rng, 0.0, 1.0));
        img = degrade(img, level, rng);
      }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(cls);
      ds.degradation_level.push_back(level);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Container file: "IGFQDS1", u32 C, N, S, then C*N records
// (u32 label, f32 level, S*S f32 pixels row-major), then C flag bytes.

inline constexpr std::string_view kDatasetMagic = "IGFQDS1";

inline void write_dataset(const IdentityDataset& ds, std::ostream& os) {
  ds.validate();
  if (ds.size() != static_cast<std::size_t>(ds.num_classes) * ds.samples_per_class)
    throw StructuralError("dataset size must equal num_classes * samples_per_class to serialize");
  bin::Writer w(os);
  w.bytes(kDatasetMagic);
  w.u32(ds.num_classes);
  w.u32(ds.samples_per_class);
  w.u32(ds.image_side);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    w.u32(ds.labels[i]);
    w.f32(ds.degradation_level[i]);
    for (float p : ds.images[i].pixels()) w.f32(p);
  }
  for (auto f : ds.class_flags) w.u8(static_cast<std::uint8_t>(f));
}

inline IdentityDataset read_dataset(std::istream& is) {
  bin::Reader r(is);
  r.expect_magic(kDatasetMagic);
  IdentityDataset ds;
  ds.num_classes = r.u32("num_classes");
  ds.samples_per_class = r.u32("samples_per_class");
  ds.image_side = r.u32("image_side");
  if (ds.num_classes == 0 || ds.samples_per_class == 0 || ds.image_side == 0)
    throw FormatError("zero dimension in dataset header", r.offset());
  const std::size_t total = static_cast<std::size_t>(ds.num_classes) * ds.samples_per_class;
  const std::size_t px = static_cast<std::size_t>(ds.image_side) * ds.image_side;
  for (std::size_t i = 0; i < total; ++i) {
    const auto at = r.offset();
    const auto label = r.u32("label");
    if (label >= ds.num_classes) throw FormatError("label out of range", at);
    const float level = r.f32("degradation_level");
    if (!(level >= 0.0f && level <= 1.0f)) throw FormatError("degradation level outside [0, 1]", at + 4);
    std::vector<float> pixels(px);
    for (auto& p : pixels) p = r.f32("pixel");
    ds.images.emplace_back(ds.image_side, std::move(pixels));
    ds.labels.push_back(label);
    ds.degradation_level.push_back(level);
  }
  for (std::uint32_t c = 0; c < ds.num_classes; ++c) {
    const auto at = r.offset();
    const auto f = r.u8("class flag");
    if (f > 1) throw FormatError("unknown class flag", at);
    ds.class_flags.push_back(static_cast<ClassFlag>(f));
  }
  r.expect_eof();
  return ds;
}

inline void save_dataset(const IdentityDataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  write_dataset(ds, os);
  if (!os) throw Error("write failed: " + path);
}

inline IdentityDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset " + path, 0);
  return read_dataset(is);
}

}  // namespace igfiqa
