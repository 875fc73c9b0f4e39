#pragma once

// Independent reference implementations used as test oracles. They share no
// code with the library beyond the Tensor container and are written as plain
// nested loops over flat arrays.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace segcaps::oracle {

inline std::vector<double> squash_ref(const std::vector<double>& p) {
  double n2 = 0.0;
  for (double x : p) n2 += x * x;
  const double n = std::sqrt(n2);
  std::vector<double> v(p.size());
  for (std::size_t a = 0; a < p.size(); ++a) v[a] = (n2 / (1.0 + n2)) * (p[a] / (n + 1e-7));
  return v;
}

// Fully-connected dynamic routing: every child capsule i casts one vote per
// parent type j, votes[i][j][:]. Returns parents[j][:].
inline std::vector<std::vector<double>> dense_route(const std::vector<std::vector<std::vector<double>>>& votes,
                                                    std::size_t iterations) {
  const std::size_t I = votes.size(), J = votes[0].size(), Z = votes[0][0].size();
  std::vector<std::vector<double>> logits(I, std::vector<double>(J, 0.0));
  std::vector<std::vector<double>> parents(J, std::vector<double>(Z, 0.0));
  for (std::size_t it = 0; it < iterations; ++it) {
    std::vector<std::vector<double>> coupling(I, std::vector<double>(J));
    for (std::size_t i = 0; i < I; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < J; ++j) total += std::exp(logits[i][j]);
      for (std::size_t j = 0; j < J; ++j) coupling[i][j] = std::exp(logits[i][j]) / total;
    }
    for (std::size_t j = 0; j < J; ++j) {
      std::vector<double> s(Z, 0.0);
      for (std::size_t i = 0; i < I; ++i)
        for (std::size_t a = 0; a < Z; ++a) s[a] += coupling[i][j] * votes[i][j][a];
      parents[j] = squash_ref(s);
    }
    if (it + 1 == iterations) break;
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t j = 0; j < J; ++j) {
        double agreement = 0.0;
        for (std::size_t a = 0; a < Z; ++a) agreement += votes[i][j][a] * parents[j][a];
        logits[i][j] += agreement;
      }
  }
  return parents;
}

// Dense capsule layer over an h x w grid of T_in child types (z_in atoms)
// with one matrix per (child type, grid cell, parent type). children is
// [h][w][T_in][z_in] flattened; weights is [T_in][h][w][z_in][T_out][z_out]
// flattened. Returns [T_out][z_out] flattened.
inline std::vector<double> dense_capsule_layer(const std::vector<double>& children, const std::vector<double>& weights,
                                               std::size_t h, std::size_t w, std::size_t t_in, std::size_t z_in,
                                               std::size_t t_out, std::size_t z_out, std::size_t iterations) {
  std::vector<std::vector<std::vector<double>>> votes;
  for (std::size_t t = 0; t < t_in; ++t)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        std::vector<std::vector<double>> per_parent(t_out, std::vector<double>(z_out, 0.0));
        for (std::size_t j = 0; j < t_out; ++j)
          for (std::size_t b = 0; b < z_out; ++b)
            for (std::size_t a = 0; a < z_in; ++a) {
              const double c = children[((y * w + x) * t_in + t) * z_in + a];
              const double m = weights[((((t * h + y) * w + x) * z_in + a) * t_out + j) * z_out + b];
              per_parent[j][b] += m * c;
            }
        votes.push_back(std::move(per_parent));
      }
  const auto parents = dense_route(votes, iterations);
  std::vector<double> out;
  for (const auto& p : parents) out.insert(out.end(), p.begin(), p.end());
  return out;
}

// Straight-line locally-constrained conv capsule layer: stride 1, odd square
// kernel k, zero padding (k-1)/2. Same flat layouts as dense_capsule_layer
// with weights [T_in][k][k][z_in][T_out][z_out]. Returns [h][w][T_out][z_out].
inline std::vector<double> local_capsule_layer(const std::vector<double>& children, const std::vector<double>& weights,
                                               std::size_t h, std::size_t w, std::size_t t_in, std::size_t z_in,
                                               std::size_t k, std::size_t t_out, std::size_t z_out,
                                               std::size_t iterations) {
  const long r = static_cast<long>(k / 2);
  std::vector<double> out;
  for (long y = 0; y < static_cast<long>(h); ++y)
    for (long x = 0; x < static_cast<long>(w); ++x) {
      std::vector<std::vector<std::vector<double>>> votes;
      for (std::size_t t = 0; t < t_in; ++t)
        for (long dy = -r; dy <= r; ++dy)
          for (long dx = -r; dx <= r; ++dx) {
            std::vector<std::vector<double>> per_parent(t_out, std::vector<double>(z_out, 0.0));
            const long cy = y + dy, cx = x + dx;
            if (cy >= 0 && cy < static_cast<long>(h) && cx >= 0 && cx < static_cast<long>(w)) {
              const std::size_t ky = static_cast<std::size_t>(dy + r), kx = static_cast<std::size_t>(dx + r);
              for (std::size_t j = 0; j < t_out; ++j)
                for (std::size_t b = 0; b < z_out; ++b)
                  for (std::size_t a = 0; a < z_in; ++a) {
                    const double c = children[((static_cast<std::size_t>(cy) * w + static_cast<std::size_t>(cx)) * t_in + t) * z_in + a];
                    const double m = weights[((((t * k + ky) * k + kx) * z_in + a) * t_out + j) * z_out + b];
                    per_parent[j][b] += m * c;
                  }
            }
            votes.push_back(std::move(per_parent));
          }
      const auto parents = dense_route(votes, iterations);
      for (const auto& p : parents) out.insert(out.end(), p.begin(), p.end());
    }
  return out;
}

// Symmetric Hausdorff distance between the boundary pixels of two 2D masks
// by exhaustive pairwise search. A boundary pixel is a foreground pixel with
// a 4-neighbour that is background or outside the image.
inline double hausdorff_brute(const std::vector<int>& a, const std::vector<int>& b, std::size_t h, std::size_t w,
                              double sy = 1.0, double sx = 1.0) {
  auto boundary = [&](const std::vector<int>& m) {
    std::vector<std::pair<long, long>> pts;
    for (long y = 0; y < static_cast<long>(h); ++y)
      for (long x = 0; x < static_cast<long>(w); ++x) {
        if (!m[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)]) continue;
        bool edge = false;
        const long dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
        for (int n = 0; n < 4; ++n) {
          const long ny = y + dy[n], nx = x + dx[n];
          if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w) ||
              !m[static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx)]) {
            edge = true;
          }
        }
        if (edge) pts.emplace_back(y, x);
      }
    return pts;
  };
  const auto pa = boundary(a), pb = boundary(b);
  auto directed = [&](const auto& from, const auto& to) {
    double worst = 0.0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        const double ddy = (p.first - q.first) * sy, ddx = (p.second - q.second) * sx;
        best = std::min(best, ddy * ddy + ddx * ddx);
      }
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::sqrt(std::max(directed(pa, pb), directed(pb, pa)));
}

}  // namespace segcaps::oracle
