#include <algorithm>
#include <cmath>
#include <iterator>
#include <limits>
#include <queue>

#include <Eigen/Dense>

#include "roomir/mesh.hpp"

namespace roomir {

namespace {

using Quadric = Eigen::Matrix4d;

// Constraint planes on open boundaries keep border edges from drifting.
constexpr double kBoundaryWeight = 1e3;

Quadric plane_quadric(const Vec3& n, double d) {
  Eigen::Vector4d p(n.x(), n.y(), n.z(), d);
  return p * p.transpose();
}

double quadric_error(const Quadric& q, const Vec3& v) {
  Eigen::Vector4d h(v.x(), v.y(), v.z(), 1.0);
  return h.dot(q * h);
}

struct Candidate {
  double cost;
  std::uint32_t u, v;
  std::uint32_t stamp_u, stamp_v;
  Vec3 target;

  bool operator>(const Candidate& o) const {
    if (cost != o.cost) return cost > o.cost;
    if (u != o.u) return u > o.u;
    return v > o.v;
  }
};

class Collapser {
 public:
  explicit Collapser(const TriangleMesh& mesh)
      : pos_(mesh.vertices),
        faces_(mesh.faces),
        face_alive_(mesh.faces.size(), true),
        vert_alive_(mesh.vertices.size(), true),
        stamp_(mesh.vertices.size(), 0),
        vert_faces_(mesh.vertices.size()),
        quadric_(mesh.vertices.size(), Quadric::Zero()),
        live_faces_(mesh.faces.size()) {
    for (std::uint32_t f = 0; f < faces_.size(); ++f) {
      for (auto v : faces_[f]) vert_faces_[v].push_back(f);
    }
    build_quadrics();
    for (std::uint32_t v = 0; v < pos_.size(); ++v) push_edges(v);
  }

  bool run(std::size_t target) {
    while (live_faces_ > target) {
      if (heap_.empty()) return false;
      const Candidate c = heap_.top();
      heap_.pop();
      if (!vert_alive_[c.u] || !vert_alive_[c.v]) continue;
      if (stamp_[c.u] != c.stamp_u || stamp_[c.v] != c.stamp_v) continue;
      if (!link_condition(c.u, c.v) || flips(c.u, c.v, c.target) || flips(c.v, c.u, c.target)) {
        continue;
      }
      collapse(c.u, c.v, c.target);
    }
    return true;
  }

  TriangleMesh extract() const {
    TriangleMesh out;
    std::vector<std::uint32_t> remap(pos_.size(), UINT32_MAX);
    for (std::uint32_t f = 0; f < faces_.size(); ++f) {
      if (!face_alive_[f]) continue;
      Face nf{};
      for (int k = 0; k < 3; ++k) {
        const auto v = faces_[f][k];
        if (remap[v] == UINT32_MAX) {
          remap[v] = static_cast<std::uint32_t>(out.vertices.size());
          out.vertices.push_back(pos_[v]);
        }
        nf[k] = remap[v];
      }
      out.faces.push_back(nf);
    }
    return out;
  }

 private:
  Vec3 normal_of(const Face& f) const {
    return (pos_[f[1]] - pos_[f[0]]).cross(pos_[f[2]] - pos_[f[0]]);
  }

  void build_quadrics() {
    // Edge -> incident face count, to find open boundaries.
    std::vector<std::pair<std::uint64_t, std::uint32_t>> edge_faces;
    edge_faces.reserve(faces_.size() * 3);
    for (std::uint32_t f = 0; f < faces_.size(); ++f) {
      const Vec3 n = normal_of(faces_[f]);
      const double len = n.norm();
      if (len <= 0.0) continue;
      const Vec3 unit = n / len;
      const Quadric q = plane_quadric(unit, -unit.dot(pos_[faces_[f][0]]));
      for (auto v : faces_[f]) quadric_[v] += q;
      for (int k = 0; k < 3; ++k) {
        auto a = faces_[f][k], b = faces_[f][(k + 1) % 3];
        if (a > b) std::swap(a, b);
        edge_faces.emplace_back((std::uint64_t{a} << 32) | b, f);
      }
    }
    std::sort(edge_faces.begin(), edge_faces.end());
    for (std::size_t i = 0; i < edge_faces.size();) {
      std::size_t j = i;
      while (j < edge_faces.size() && edge_faces[j].first == edge_faces[i].first) ++j;
      if (j - i == 1) {
        const auto key = edge_faces[i].first;
        const auto a = static_cast<std::uint32_t>(key >> 32);
        const auto b = static_cast<std::uint32_t>(key & 0xffffffffu);
        const Vec3 n = normal_of(faces_[edge_faces[i].second]);
        const Vec3 side = pos_[b] - pos_[a];
        Vec3 perp = side.cross(n);
        if (perp.norm() > 0.0) {
          perp.normalize();
          const Quadric q = kBoundaryWeight * plane_quadric(perp, -perp.dot(pos_[a]));
          quadric_[a] += q;
          quadric_[b] += q;
        }
      }
      i = j;
    }
  }

  std::vector<std::uint32_t> neighbours(std::uint32_t v) const {
    std::vector<std::uint32_t> out;
    for (auto f : vert_faces_[v]) {
      if (!face_alive_[f]) continue;
      for (auto w : faces_[f]) {
        if (w != v) out.push_back(w);
      }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  Candidate evaluate(std::uint32_t u, std::uint32_t v) const {
    const Quadric q = quadric_[u] + quadric_[v];
    Candidate c{0.0, u, v, stamp_[u], stamp_[v], Vec3::Zero()};
    const Eigen::Matrix3d a = q.topLeftCorner<3, 3>();
    const Vec3 b = q.topRightCorner<3, 1>();
    Eigen::FullPivLU<Eigen::Matrix3d> lu(a);
    lu.setThreshold(1e-10);
    if (lu.isInvertible()) {
      c.target = lu.solve(-b);
      // Keep the optimum from wandering far away on near-singular systems.
      const double span = (pos_[u] - pos_[v]).norm();
      const Vec3 mid = 0.5 * (pos_[u] + pos_[v]);
      if ((c.target - mid).norm() <= 2.0 * span + 1e-12) {
        c.cost = quadric_error(q, c.target);
        return c;
      }
    }
    const std::array<Vec3, 3> options{pos_[u], pos_[v], 0.5 * (pos_[u] + pos_[v])};
    c.cost = std::numeric_limits<double>::infinity();
    for (const auto& p : options) {
      const double e = quadric_error(q, p);
      if (e < c.cost) {
        c.cost = e;
        c.target = p;
      }
    }
    return c;
  }

  void push_edges(std::uint32_t v) {
    for (auto w : neighbours(v)) {
      const auto a = std::min(v, w), b = std::max(v, w);
      heap_.push(evaluate(a, b));
    }
  }

  // The edge may only collapse if the vertices it joins share exactly the
  // neighbours of the triangles on the edge; otherwise the result is non-manifold.
  bool link_condition(std::uint32_t u, std::uint32_t v) const {
    const auto nu = neighbours(u);
    const auto nv = neighbours(v);
    std::vector<std::uint32_t> common;
    std::set_intersection(nu.begin(), nu.end(), nv.begin(), nv.end(), std::back_inserter(common));
    std::size_t opposite = 0;
    for (auto f : vert_faces_[u]) {
      if (!face_alive_[f]) continue;
      const auto& t = faces_[f];
      if (std::find(t.begin(), t.end(), v) != t.end()) ++opposite;
    }
    if (opposite == 0) return false;
    return common.size() == opposite;
  }

  bool flips(std::uint32_t moving, std::uint32_t other, const Vec3& target) const {
    for (auto f : vert_faces_[moving]) {
      if (!face_alive_[f]) continue;
      const auto& t = faces_[f];
      if (std::find(t.begin(), t.end(), other) != t.end()) continue;
      const Vec3 before = normal_of(t);
      std::array<Vec3, 3> p{pos_[t[0]], pos_[t[1]], pos_[t[2]]};
      for (int k = 0; k < 3; ++k) {
        if (t[k] == moving) p[k] = target;
      }
      const Vec3 after = (p[1] - p[0]).cross(p[2] - p[0]);
      const double scale = before.norm() * after.norm();
      if (scale <= 0.0 || before.dot(after) <= 1e-6 * scale) return true;
    }
    return false;
  }

  void collapse(std::uint32_t u, std::uint32_t v, const Vec3& target) {
    pos_[u] = target;
    quadric_[u] += quadric_[v];
    vert_alive_[v] = false;
    for (auto f : vert_faces_[v]) {
      if (!face_alive_[f]) continue;
      auto& t = faces_[f];
      if (std::find(t.begin(), t.end(), u) != t.end()) {
        face_alive_[f] = false;
        --live_faces_;
        continue;
      }
      for (auto& w : t) {
        if (w == v) w = u;
      }
      vert_faces_[u].push_back(f);
    }
    vert_faces_[v].clear();
    auto& uf = vert_faces_[u];
    uf.erase(std::remove_if(uf.begin(), uf.end(), [&](std::uint32_t f) { return !face_alive_[f]; }),
             uf.end());
    ++stamp_[u];
    push_edges(u);
  }

  std::vector<Vec3> pos_;
  std::vector<Face> faces_;
  std::vector<bool> face_alive_;
  std::vector<bool> vert_alive_;
  std::vector<std::uint32_t> stamp_;
  std::vector<std::vector<std::uint32_t>> vert_faces_;
  std::vector<Quadric> quadric_;
  std::size_t live_faces_;
  std::priority_queue<Candidate, std::vector<Candidate>, std::greater<>> heap_;
};

}  // namespace

SimplifyResult simplify_mesh(const TriangleMesh& mesh, std::size_t target_faces) {
  if (target_faces < 4) throw MeshError("simplify_mesh: target_faces must be at least 4");
  mesh.validate();
  if (mesh.num_faces() <= target_faces) return {mesh, true};

  Collapser collapser(mesh);
  const bool reached = collapser.run(target_faces);
  return {collapser.extract(), reached};
}

}  // namespace roomir
