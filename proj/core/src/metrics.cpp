#include "segcaps/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace segcaps::metrics {

Mask binarize(const Tensor& scores, double threshold) {
  Mask m(scores.numel());
  const auto v = scores.data();
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = v[i] > threshold ? 1 : 0;
  return m;
}

Mask to_mask(const Tensor& binary) {
  Mask m(binary.numel());
  const auto v = binary.data();
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (v[i] != 0.0 && v[i] != 1.0) throw ConfigError("to_mask: mask must be binary");
    m[i] = v[i] != 0.0 ? 1 : 0;
  }
  return m;
}

double dice(const Mask& a, const Mask& b) {
  if (a.size() != b.size()) throw ShapeError("dice", Shape{a.size()}, Shape{b.size()});
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i] != 0;
    nb += b[i] != 0;
    inter += (a[i] != 0) && (b[i] != 0);
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

namespace {

std::size_t volume(const std::vector<std::size_t>& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void check_dims(const Mask& m, const std::vector<std::size_t>& dims, const char* what) {
  if (dims.empty() || dims.size() > 3) throw ConfigError(std::string(what) + ": dims must be 2D or 3D");
  if (volume(dims) != m.size()) throw ShapeError(what, Shape{m.size()}, Shape(dims.begin(), dims.end()));
}

// Lower envelope of parabolas f(q) + ((p - q) s)^2 along one line.
void edt_line(std::vector<double>& f, double s, std::vector<std::size_t>& v, std::vector<double>& z,
              std::vector<double>& out) {
  const std::size_t n = f.size();
  const double inf = std::numeric_limits<double>::infinity();
  const double s2 = s * s;
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (!any) {
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      k = 0;
      any = true;
      continue;
    }
    while (true) {
      const double qd = static_cast<double>(q), vd = static_cast<double>(v[k]);
      const double inter = ((f[q] + s2 * qd * qd) - (f[v[k]] + s2 * vd * vd)) / (2.0 * s2 * (qd - vd));
      if (inter <= z[k]) {
        if (k == 0) {
          v[0] = q;
          z[0] = -inf;
          z[1] = inf;
          break;
        }
        --k;
        continue;
      }
      ++k;
      v[k] = q;
      z[k] = inter;
      z[k + 1] = inf;
      break;
    }
  }
  if (!any) {
    std::fill(out.begin(), out.end(), inf);
    return;
  }
  k = 0;
  for (std::size_t p = 0; p < n; ++p) {
    while (z[k + 1] < static_cast<double>(p)) ++k;
    const double d = (static_cast<double>(p) - static_cast<double>(v[k])) * s;
    out[p] = f[v[k]] + d * d;
  }
}

}  // namespace

std::vector<double> squared_distance_transform(const Mask& seeds, const std::vector<std::size_t>& dims,
                                               const std::vector<double>& spacing) {
  check_dims(seeds, dims, "distance_transform");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(seeds.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = seeds[i] ? 0.0 : inf;
  const std::size_t nd = dims.size();
  // Process axes from last to first so, in 2D, row distances come first and
  // column terms are added last: f + (dy sy)^2 with f = (dx sx)^2.
  for (std::size_t ax = nd; ax-- > 0;) {
    const std::size_t n = dims[ax];
    std::size_t inner = 1;
    for (std::size_t d = ax + 1; d < nd; ++d) inner *= dims[d];
    const std::size_t outer = g.size() / (n * inner);
    std::vector<double> f(n), out(n), z(n + 1);
    std::vector<std::size_t> v(n);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        for (std::size_t i = 0; i < n; ++i) f[i] = g[base + i * inner];
        edt_line(f, spacing[ax], v, z, out);
        for (std::size_t i = 0; i < n; ++i) g[base + i * inner] = out[i];
      }
  }
  return g;
}

Mask boundary(const Mask& m, const std::vector<std::size_t>& dims) {
  check_dims(m, dims, "boundary");
  const std::size_t nd = dims.size();
  std::vector<std::size_t> stride(nd, 1);
  for (std::size_t d = nd - 1; d-- > 0;) stride[d] = stride[d + 1] * dims[d + 1];
  Mask b(m.size(), 0);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!m[i]) continue;
    bool edge = false;
    for (std::size_t d = 0; d < nd && !edge; ++d) {
      const std::size_t c = (i / stride[d]) % dims[d];
      if (c == 0 || !m[i - stride[d]]) edge = true;
      if (c + 1 == dims[d] || !m[i + stride[d]]) edge = true;
    }
    b[i] = edge ? 1 : 0;
  }
  return b;
}

double hausdorff(const Mask& a, const Mask& b, const std::vector<std::size_t>& dims, std::vector<double> spacing) {
  check_dims(a, dims, "hausdorff");
  check_dims(b, dims, "hausdorff");
  if (spacing.empty()) spacing.assign(dims.size(), 1.0);
  if (spacing.size() != dims.size()) throw ConfigError("hausdorff: spacing needs one entry per dim");
  for (double s : spacing)
    if (!(s > 0.0)) throw ConfigError("hausdorff: spacing must be positive");
  const bool ea = std::none_of(a.begin(), a.end(), [](auto x) { return x != 0; });
  const bool eb = std::none_of(b.begin(), b.end(), [](auto x) { return x != 0; });
  if (ea || eb) throw Error("undefined HD: empty mask");
  const Mask ba = boundary(a, dims), bb = boundary(b, dims);
  const auto da = squared_distance_transform(ba, dims, spacing);
  const auto db = squared_distance_transform(bb, dims, spacing);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (ba[i]) worst = std::max(worst, db[i]);
    if (bb[i]) worst = std::max(worst, da[i]);
  }
  return std::sqrt(worst);
}

std::vector<double> sweep_thresholds() {
  std::vector<double> t;
  for (int k = 1; k <= 19; ++k) t.push_back(k / 20.0);
  return t;
}

SweepResult threshold_sweep(const std::vector<Tensor>& scores, const std::vector<Tensor>& masks) {
  if (scores.empty() || scores.size() != masks.size()) throw ConfigError("threshold_sweep: need matching, nonempty score/mask lists");
  std::vector<Mask> truth;
  for (const auto& m : masks) truth.push_back(to_mask(m));
  SweepResult r;
  bool first = true;
  for (double t : sweep_thresholds()) {
    double total = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) total += dice(binarize(scores[i], t), truth[i]);
    const double mean = total / static_cast<double>(scores.size());
    r.table.emplace_back(t, mean);
    const bool better = mean > r.dice;
    const bool tie_closer = mean == r.dice && std::abs(t - 0.5) < std::abs(r.threshold - 0.5);
    if (first || better || tie_closer) {
      r.threshold = t;
      r.dice = mean;
      first = false;
    }
  }
  return r;
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.n = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(s.n);
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / static_cast<double>(s.n));
  return s;
}

std::string format_mean_std(const Summary& s, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << s.mean << " +- " << s.std;
  return os.str();
}

std::string format_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "\t" : "") << cells[i];
    os << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return os.str();
}

}  // namespace segcaps::metrics
