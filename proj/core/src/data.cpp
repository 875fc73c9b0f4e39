#include "segcaps/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace segcaps::data {

namespace {

bool power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

struct Grid {
  std::size_t h, w;
  std::vector<double> v;
  Grid(std::size_t h_, std::size_t w_, double fill = 0.0) : h(h_), w(w_), v(h_ * w_, fill) {}
  double& at(std::size_t y, std::size_t x) { return v[y * w + x]; }
  double at(std::size_t y, std::size_t x) const { return v[y * w + x]; }
};

// Star-shaped blob: ellipse whose radius is modulated by low-order harmonics.
struct Blob {
  double cy, cx, ry, rx;
  double amp[3] = {0, 0, 0};
  double phase[3] = {0, 0, 0};

  bool contains(double y, double x) const {
    const double dy = (y - cy) / ry, dx = (x - cx) / rx;
    const double r2 = dy * dy + dx * dx;
    if (r2 > 4.0) return false;
    const double theta = std::atan2(dy, dx);
    double r = 1.0;
    for (int k = 0; k < 3; ++k) r += amp[k] * std::cos((k + 2) * theta + phase[k]);
    return r2 <= r * r;
  }
};

Blob random_blob(CounterRng& rng, double cy, double cx, double ry, double rx, double wobble) {
  Blob b{cy, cx, ry, rx};
  for (int k = 0; k < 3; ++k) {
    b.amp[k] = rng.uniform(-wobble, wobble);
    b.phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  return b;
}

Blob mirrored(const Blob& b, double axis_x) {
  Blob m = b;
  m.cx = 2.0 * axis_x - b.cx;
  // Reflecting x maps theta to pi - theta: cos(k(pi - t) + p) = cos(k t - p - k pi).
  for (int k = 0; k < 3; ++k) m.phase[k] = -b.phase[k] + (k % 2 == 0 ? 0.0 : std::numbers::pi);
  return m;
}

Tensor to_tensor(const Grid& g) { return Tensor(Shape{g.h, g.w}, g.v); }

}  // namespace

void SynthConfig::validate() const {
  if (!power_of_two(height) || !power_of_two(width) || height < 32 || width < 32) {
    throw ConfigError("synth: height and width must be powers of two >= 32");
  }
  if (min_objects == 0 || min_objects > max_objects) throw ConfigError("synth: need 1 <= min_objects <= max_objects");
  if (inhomogeneity < 0.0 || inhomogeneity >= 1.0) throw ConfigError("synth: inhomogeneity must be in [0, 1)");
  if (noise_sigma < 0.0 || distractor_density < 0.0) throw ConfigError("synth: noise and distractor density must be >= 0");
}

std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%05zu", index);
  return buf;
}

Sample generate_sample(const SynthConfig& cfg, std::size_t index) {
  cfg.validate();
  Sample s;
  s.id = sample_id(index);
  CounterRng rng(cfg.seed, hash_string(s.id));
  const double H = static_cast<double>(cfg.height), W = static_cast<double>(cfg.width);
  Grid img(cfg.height, cfg.width), mask(cfg.height, cfg.width);
  double object_level, other_level;
  std::vector<Blob> objects;
  Blob body{};
  bool has_body = false;

  if (cfg.family == ObjectFamily::lobes) {
    const double background = 0.05 + rng.uniform(0.0, 0.03);
    const double tissue = 0.62 + rng.uniform(-0.05, 0.05);
    const double air = 0.16 + rng.uniform(-0.04, 0.04);
    const double cy = H / 2 + rng.uniform(-0.03, 0.03) * H, cx = W / 2 + rng.uniform(-0.03, 0.03) * W;
    body = random_blob(rng, cy, cx, H * rng.uniform(0.38, 0.45), W * rng.uniform(0.41, 0.47), 0.03);
    has_body = true;
    const Blob left = random_blob(rng, cy + rng.uniform(-0.04, 0.04) * H, cx - W * rng.uniform(0.16, 0.21),
                                  H * rng.uniform(0.2, 0.29), W * rng.uniform(0.1, 0.14), 0.09);
    Blob right = mirrored(left, cx);
    right.ry *= rng.uniform(0.9, 1.1);
    right.rx *= rng.uniform(0.9, 1.1);
    right.cy += rng.uniform(-0.03, 0.03) * H;
    objects = {left, right};
    for (std::size_t y = 0; y < cfg.height; ++y)
      for (std::size_t x = 0; x < cfg.width; ++x) {
        const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
        double v = background;
        if (body.contains(py, px)) {
          v = tissue;
          for (const auto& o : objects)
            if (o.contains(py, px)) {
              v = air;
              mask.at(y, x) = 1.0;
            }
        }
        img.at(y, x) = v;
      }
    object_level = air;
    other_level = tissue;
  } else {
    const double background = 0.2 + rng.uniform(-0.05, 0.05);
    const double fg = 0.75 + rng.uniform(-0.05, 0.05);
    const std::size_t count = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
    for (std::size_t k = 0; k < count; ++k) {
      objects.push_back(random_blob(rng, H * rng.uniform(0.25, 0.75), W * rng.uniform(0.25, 0.75),
                                    H * rng.uniform(0.08, 0.2), W * rng.uniform(0.08, 0.2), 0.1));
    }
    for (std::size_t y = 0; y < cfg.height; ++y)
      for (std::size_t x = 0; x < cfg.width; ++x) {
        const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
        double v = background;
        for (const auto& o : objects)
          if (o.contains(py, px)) {
            v = fg;
            mask.at(y, x) = 1.0;
          }
        img.at(y, x) = v;
      }
    object_level = fg;
    other_level = background;
  }

  // Distractors: intensity far from the class mean of the pixels they cover.
  const double whole = std::floor(cfg.distractor_density);
  const std::size_t n_distractors =
      static_cast<std::size_t>(whole) + (rng.uniform() < cfg.distractor_density - whole ? 1 : 0);
  for (std::size_t k = 0; k < n_distractors; ++k) {
    double cy = 0, cx = 0;
    for (int tries = 0; tries < 16; ++tries) {
      cy = rng.uniform(0.0, H);
      cx = rng.uniform(0.0, W);
      if (!has_body || body.contains(cy, cx)) break;
    }
    const double r = rng.uniform(1.2, 3.0);
    const bool inside = mask.at(std::min<std::size_t>(static_cast<std::size_t>(cy), cfg.height - 1),
                                std::min<std::size_t>(static_cast<std::size_t>(cx), cfg.width - 1)) != 0.0;
    const double level = inside ? other_level : object_level;
    for (std::size_t y = 0; y < cfg.height; ++y)
      for (std::size_t x = 0; x < cfg.width; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
        if (dy * dy + dx * dx > r * r) continue;
        if ((mask.at(y, x) != 0.0) != inside) continue;
        img.at(y, x) = level;
      }
  }

  // Smooth multiplicative inhomogeneity field, then additive noise.
  const double fy = rng.uniform(0.5, 1.5), fx = rng.uniform(0.5, 1.5);
  const double p1 = rng.uniform(0.0, 2.0 * std::numbers::pi), p2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::size_t y = 0; y < cfg.height; ++y)
    for (std::size_t x = 0; x < cfg.width; ++x) {
      const double field = 1.0 + cfg.inhomogeneity * std::sin(2.0 * std::numbers::pi * fy * static_cast<double>(y) / H + p1) *
                                     std::cos(2.0 * std::numbers::pi * fx * static_cast<double>(x) / W + p2);
      double v = img.at(y, x) * field + cfg.noise_sigma * rng.normal();
      img.at(y, x) = std::clamp(v, 0.0, 1.0);
    }

  s.image = to_tensor(img);
  s.mask = to_tensor(mask);
  return s;
}

Dataset generate(const SynthConfig& cfg, std::size_t n) {
  cfg.validate();
  if (n < 10) throw ConfigError("generate: need at least 10 samples");
  std::vector<std::pair<std::uint64_t, std::size_t>> order;
  for (std::size_t i = 0; i < n; ++i) order.emplace_back(mix64(hash_string(sample_id(i)) ^ mix64(cfg.seed)), i);
  std::sort(order.begin(), order.end());
  const std::size_t n_train = n * 8 / 10, n_val = n / 10;
  Dataset d;
  for (std::size_t k = 0; k < n; ++k) {
    Sample s = generate_sample(cfg, order[k].second);
    if (k < n_train) {
      d.train.push_back(std::move(s));
    } else if (k < n_train + n_val) {
      d.val.push_back(std::move(s));
    } else {
      d.test.push_back(std::move(s));
    }
  }
  auto by_id = [](const Sample& a, const Sample& b) { return a.id < b.id; };
  std::sort(d.train.begin(), d.train.end(), by_id);
  std::sort(d.val.begin(), d.val.end(), by_id);
  std::sort(d.test.begin(), d.test.end(), by_id);
  return d;
}

Tensor preprocess_ct(const Tensor& raw) {
  std::vector<double> v(raw.data().begin(), raw.data().end());
  for (auto& x : v) x = (std::clamp(x, -1024.0, 3072.0) + 1024.0) / 4096.0;
  return Tensor(raw.shape(), std::move(v));
}

Tensor preprocess_zscore(const Tensor& image) {
  const auto in = image.data();
  const double n = static_cast<double>(in.size());
  double mean = 0.0;
  for (double x : in) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : in) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> z(in.size(), 0.5);
  if (!(sd > 0.0)) return Tensor(image.shape(), std::move(z));
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = (in[i] - mean) / sd;
  const auto [lo, hi] = std::minmax_element(z.begin(), z.end());
  const double zmin = *lo, range = *hi - *lo;
  if (!(range > 0.0)) return Tensor(image.shape(), std::vector<double>(in.size(), 0.5));
  for (auto& x : z) x = (x - zmin) / range;
  return Tensor(image.shape(), std::move(z));
}

AugmentPolicy AugmentPolicy::standard() {
  AugmentPolicy p;
  p.flip_h = p.scale = p.shift = p.rotate = p.elastic = p.noise = true;
  return p;
}

Tensor flip_horizontal(const Tensor& img) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  std::vector<double> v(img.numel());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) v[y * w + x] = img[y * w + (w - 1 - x)];
  return Tensor(img.shape(), std::move(v));
}

Tensor flip_vertical(const Tensor& img) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  std::vector<double> v(img.numel());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) v[y * w + x] = img[(h - 1 - y) * w + x];
  return Tensor(img.shape(), std::move(v));
}

Tensor rotate90(const Tensor& img, int quarter_turns) {
  Tensor out = img.detach();
  const int q = ((quarter_turns % 4) + 4) % 4;
  for (int k = 0; k < q; ++k) {
    const std::size_t h = out.dim(0), w = out.dim(1);
    std::vector<double> v(out.numel());
    // Counter-clockwise: new[y][x] = old[x][w - 1 - y], new shape [w, h].
    for (std::size_t y = 0; y < w; ++y)
      for (std::size_t x = 0; x < h; ++x) v[y * h + x] = out[x * w + (w - 1 - y)];
    out = Tensor(Shape{w, h}, std::move(v));
  }
  return out;
}

namespace {

std::vector<double> gaussian_smooth(const std::vector<double>& f, std::size_t h, std::size_t w, double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double total = 0.0;
  for (int i = -r; i <= r; ++i) total += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& x : k) x /= total;
  std::vector<double> tmp(f.size(), 0.0), out(f.size(), 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) {
        const long xx = std::clamp<long>(static_cast<long>(x) + i, 0, static_cast<long>(w) - 1);
        s += k[i + r] * f[y * w + static_cast<std::size_t>(xx)];
      }
      tmp[y * w + x] = s;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) {
        const long yy = std::clamp<long>(static_cast<long>(y) + i, 0, static_cast<long>(h) - 1);
        s += k[i + r] * tmp[static_cast<std::size_t>(yy) * w + x];
      }
      out[y * w + x] = s;
    }
  return out;
}

// Edge-replicating samplers.
double bilinear(const Tensor& img, double y, double x) {
  const long h = static_cast<long>(img.dim(0)), w = static_cast<long>(img.dim(1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const long y0 = static_cast<long>(std::floor(y)), x0 = static_cast<long>(std::floor(x));
  const long y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  auto at = [&](long yy, long xx) { return img[static_cast<std::size_t>(yy * w + xx)]; };
  if (fy == 0.0 && fx == 0.0) return at(y0, x0);
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

double nearest(const Tensor& img, double y, double x) {
  const long h = static_cast<long>(img.dim(0)), w = static_cast<long>(img.dim(1));
  const long yy = std::clamp(static_cast<long>(std::lround(y)), 0L, h - 1);
  const long xx = std::clamp(static_cast<long>(std::lround(x)), 0L, w - 1);
  return img[static_cast<std::size_t>(yy * w + xx)];
}

}  // namespace

Sample augment(const Sample& s, CounterRng& rng, const AugmentPolicy& p) {
  Sample out = s;
  auto fires = [&](bool enabled) { return enabled && rng.uniform() < p.probability; };
  // Draw every parameter unconditionally so the stream layout is fixed.
  const bool do_fh = fires(p.flip_h), do_fv = fires(p.flip_v), do_r90 = fires(p.rotate90);
  const int quarter = 1 + static_cast<int>(rng.below(3));
  const bool do_scale = fires(p.scale), do_shift = fires(p.shift), do_rot = fires(p.rotate);
  const bool do_elastic = fires(p.elastic), do_noise = fires(p.noise);
  const double scale = rng.uniform(p.scale_min, p.scale_max);
  const double sy = rng.uniform(-p.shift_max, p.shift_max), sx = rng.uniform(-p.shift_max, p.shift_max);
  const double theta = rng.uniform(-p.rotate_max_deg, p.rotate_max_deg) * std::numbers::pi / 180.0;

  if (do_fh) {
    out.image = flip_horizontal(out.image);
    out.mask = flip_horizontal(out.mask);
  }
  if (do_fv) {
    out.image = flip_vertical(out.image);
    out.mask = flip_vertical(out.mask);
  }
  if (do_r90 && out.image.dim(0) == out.image.dim(1)) {
    out.image = rotate90(out.image, quarter);
    out.mask = rotate90(out.mask, quarter);
  }

  if (do_scale || do_shift || do_rot || do_elastic) {
    const std::size_t h = out.image.dim(0), w = out.image.dim(1);
    std::vector<double> ey(h * w, 0.0), ex(h * w, 0.0);
    if (do_elastic) {
      for (auto& v : ey) v = rng.uniform(-1.0, 1.0);
      for (auto& v : ex) v = rng.uniform(-1.0, 1.0);
      ey = gaussian_smooth(ey, h, w, p.elastic_sigma);
      ex = gaussian_smooth(ex, h, w, p.elastic_sigma);
      // Normalise to unit RMS displacement, then scale by alpha.
      double ss = 0.0;
      for (std::size_t i = 0; i < ey.size(); ++i) ss += ey[i] * ey[i] + ex[i] * ex[i];
      const double rms = std::sqrt(ss / static_cast<double>(ey.size()));
      const double k = rms > 0.0 ? p.elastic_alpha / rms : 0.0;
      for (std::size_t i = 0; i < ey.size(); ++i) {
        ey[i] *= k;
        ex[i] *= k;
      }
    }
    const double k_scale = do_scale ? scale : 1.0;
    const double t = do_rot ? theta : 0.0;
    const double ty = do_shift ? sy : 0.0, tx = do_shift ? sx : 0.0;
    const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
    const double c = std::cos(t), sn = std::sin(t);
    std::vector<double> iv(h * w), mv(h * w);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        // Inverse map: output pixel -> source coordinates.
        const double uy = static_cast<double>(y) - cy - ty, ux = static_cast<double>(x) - cx - tx;
        const double ry = (c * uy + sn * ux) / k_scale, rx = (-sn * uy + c * ux) / k_scale;
        const double src_y = ry + cy + ey[y * w + x], src_x = rx + cx + ex[y * w + x];
        iv[y * w + x] = bilinear(out.image, src_y, src_x);
        mv[y * w + x] = nearest(out.mask, src_y, src_x);
      }
    out.image = Tensor(Shape{h, w}, std::move(iv));
    out.mask = Tensor(Shape{h, w}, std::move(mv));
  }

  if (do_noise) {
    std::vector<double> v(out.image.data().begin(), out.image.data().end());
    for (auto& x : v) x = std::clamp(x + p.noise_sigma * rng.normal(), 0.0, 1.0);
    out.image = Tensor(out.image.shape(), std::move(v));
  }
  return out;
}

}  // namespace segcaps::data
