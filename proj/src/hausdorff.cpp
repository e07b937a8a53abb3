#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "roomir/mesh.hpp"

namespace roomir {

// Region-based closest point (Ericson, Real-Time Collision Detection 5.1.5).
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;

  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return b;

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) return a + ab * (d1 / (d1 - d3));

  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return c;

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) return a + ac * (d2 / (d2 - d6));

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
  }

  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

namespace {

struct Box {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());

  void grow(const Vec3& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  double squared_distance(const Vec3& p) const {
    const Vec3 d = (lo - p).cwiseMax(p - hi).cwiseMax(0.0);
    return d.squaredNorm();
  }
};

// Bounding volume hierarchy over triangles for nearest-surface queries.
class TriangleTree {
 public:
  explicit TriangleTree(const TriangleMesh& mesh) : mesh_(mesh), order_(mesh.num_faces()) {
    std::iota(order_.begin(), order_.end(), 0u);
    centroids_.reserve(mesh.num_faces());
    for (const auto& f : mesh.faces) {
      centroids_.push_back((mesh.vertices[f[0]] + mesh.vertices[f[1]] + mesh.vertices[f[2]]) / 3.0);
    }
    if (!order_.empty()) build(0, order_.size());
  }

  double squared_distance(const Vec3& p) const {
    double best = std::numeric_limits<double>::infinity();
    if (!nodes_.empty()) query(0, p, best);
    return best;
  }

 private:
  struct Node {
    Box box;
    std::size_t begin, end;
    std::int64_t left = -1, right = -1;
  };

  static constexpr std::size_t kLeafSize = 8;

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back({});
    Box box, centre_box;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& f = mesh_.faces[order_[i]];
      for (auto v : f) box.grow(mesh_.vertices[v]);
      centre_box.grow(centroids_[order_[i]]);
    }
    nodes_[id].box = box;
    nodes_[id].begin = begin;
    nodes_[id].end = end;
    if (end - begin <= kLeafSize) return id;

    int axis = 0;
    (centre_box.hi - centre_box.lo).maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t x, std::uint32_t y) { return centroids_[x][axis] < centroids_[y][axis]; });
    const auto l = build(begin, mid);
    const auto r = build(mid, end);
    nodes_[id].left = static_cast<std::int64_t>(l);
    nodes_[id].right = static_cast<std::int64_t>(r);
    return id;
  }

  void query(std::size_t id, const Vec3& p, double& best) const {
    const Node& n = nodes_[id];
    if (n.left < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const auto& f = mesh_.faces[order_[i]];
        const Vec3 q = closest_point_on_triangle(p, mesh_.vertices[f[0]], mesh_.vertices[f[1]],
                                                 mesh_.vertices[f[2]]);
        best = std::min(best, (q - p).squaredNorm());
      }
      return;
    }
    const auto l = static_cast<std::size_t>(n.left), r = static_cast<std::size_t>(n.right);
    double dl = nodes_[l].box.squared_distance(p);
    double dr = nodes_[r].box.squared_distance(p);
    if (dl <= dr) {
      if (dl < best) query(l, p, best);
      if (dr < best) query(r, p, best);
    } else {
      if (dr < best) query(r, p, best);
      if (dl < best) query(l, p, best);
    }
  }

  const TriangleMesh& mesh_;
  std::vector<std::uint32_t> order_;
  std::vector<Vec3> centroids_;
  std::vector<Node> nodes_;
};

std::vector<Vec3> sample_surface(const TriangleMesh& mesh, std::size_t samples, std::uint64_t seed) {
  std::vector<double> cumulative;
  cumulative.reserve(mesh.num_faces());
  double total = 0.0;
  for (const auto& f : mesh.faces) {
    total += 0.5 * (mesh.vertices[f[1]] - mesh.vertices[f[0]]).cross(mesh.vertices[f[2]] - mesh.vertices[f[0]]).norm();
    cumulative.push_back(total);
  }
  if (!(total > 0.0)) throw MeshError("hausdorff_distance: mesh has zero surface area");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Vec3> points;
  points.reserve(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    const double pick = unit(rng) * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
    if (it == cumulative.end()) --it;
    const auto& f = mesh.faces[static_cast<std::size_t>(it - cumulative.begin())];
    double r1 = unit(rng), r2 = unit(rng);
    if (r1 + r2 > 1.0) {
      r1 = 1.0 - r1;
      r2 = 1.0 - r2;
    }
    const Vec3& a = mesh.vertices[f[0]];
    points.push_back(a + r1 * (mesh.vertices[f[1]] - a) + r2 * (mesh.vertices[f[2]] - a));
  }
  return points;
}

}  // namespace

double directed_hausdorff(const TriangleMesh& from, const TriangleMesh& to, std::size_t samples,
                          std::uint64_t seed) {
  if (from.faces.empty() || to.faces.empty()) throw MeshError("hausdorff_distance: empty mesh");
  if (samples == 0) throw MeshError("hausdorff_distance: samples must be >= 1");
  if (!(to.surface_area() > 0.0)) throw MeshError("hausdorff_distance: mesh has zero surface area");
  const TriangleTree tree(to);
  double worst = 0.0;
  for (const auto& p : sample_surface(from, samples, seed)) {
    worst = std::max(worst, tree.squared_distance(p));
  }
  return std::sqrt(worst);
}

double hausdorff_distance(const TriangleMesh& a, const TriangleMesh& b, std::size_t samples,
                          std::uint64_t seed) {
  return std::max(directed_hausdorff(a, b, samples, seed), directed_hausdorff(b, a, samples, seed));
}

}  // namespace roomir
