#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_map>

#include <fmt/format.h>

#include "roomir/mesh.hpp"

namespace roomir {

std::vector<std::vector<std::uint32_t>> SceneGraph::adjacency_lists() const {
  std::vector<std::vector<std::uint32_t>> adj(num_nodes());
  for (const auto& [i, j] : edges) {
    adj[i].push_back(j);
    adj[j].push_back(i);
  }
  for (auto& a : adj) std::sort(a.begin(), a.end());
  return adj;
}

namespace {

struct CellHash {
  std::size_t operator()(const std::array<std::int64_t, 3>& c) const {
    std::size_t h = 1469598103934665603ull;
    for (auto v : c) h = (h ^ static_cast<std::size_t>(v)) * 1099511628211ull;
    return h;
  }
};

// Maps each vertex to the first earlier vertex closer than epsilon, or itself.
std::vector<std::uint32_t> weld(const std::vector<Vec3>& pts, double eps) {
  std::vector<std::uint32_t> rep(pts.size());
  if (eps <= 0.0) {
    // Only exact duplicates merge.
    std::unordered_map<std::array<std::int64_t, 3>, std::vector<std::uint32_t>, CellHash> exact;
    for (std::uint32_t i = 0; i < pts.size(); ++i) {
      rep[i] = i;
      std::array<std::int64_t, 3> key{};
      for (int k = 0; k < 3; ++k) std::memcpy(&key[k], &pts[i][k], sizeof(double));
      auto& bucket = exact[key];
      if (!bucket.empty()) rep[i] = bucket.front();
      bucket.push_back(i);
    }
    return rep;
  }

  std::unordered_map<std::array<std::int64_t, 3>, std::vector<std::uint32_t>, CellHash> grid;
  auto cell_of = [&](const Vec3& p) {
    return std::array<std::int64_t, 3>{static_cast<std::int64_t>(std::floor(p.x() / eps)),
                                       static_cast<std::int64_t>(std::floor(p.y() / eps)),
                                       static_cast<std::int64_t>(std::floor(p.z() / eps))};
  };
  for (std::uint32_t i = 0; i < pts.size(); ++i) {
    const auto c = cell_of(pts[i]);
    std::uint32_t found = i;
    for (std::int64_t dx = -1; dx <= 1 && found == i; ++dx) {
      for (std::int64_t dy = -1; dy <= 1 && found == i; ++dy) {
        for (std::int64_t dz = -1; dz <= 1 && found == i; ++dz) {
          auto it = grid.find({c[0] + dx, c[1] + dy, c[2] + dz});
          if (it == grid.end()) continue;
          for (auto j : it->second) {
            if ((pts[j] - pts[i]).norm() < eps) {
              found = j;
              break;
            }
          }
        }
      }
    }
    rep[i] = found;
    // Only representatives are stored so chains cannot drift.
    if (found == i) grid[c].push_back(i);
  }
  return rep;
}

}  // namespace

SceneGraph mesh_to_graph(const TriangleMesh& mesh, double weld_epsilon) {
  if (weld_epsilon < 0.0) throw MeshError("mesh_to_graph: weld_epsilon must be >= 0");
  const auto rep = weld(mesh.vertices, weld_epsilon);

  std::vector<bool> used(mesh.num_vertices(), false);
  for (const auto& f : mesh.faces) {
    for (auto v : f) used[rep[v]] = true;
  }
  std::vector<std::uint32_t> node_of(mesh.num_vertices(), UINT32_MAX);
  std::uint32_t count = 0;
  for (std::uint32_t v = 0; v < mesh.num_vertices(); ++v) {
    if (used[v] && rep[v] == v) node_of[v] = count++;
  }

  SceneGraph g;
  g.node_features.resize(count, 3);
  for (std::uint32_t v = 0; v < mesh.num_vertices(); ++v) {
    if (node_of[v] != UINT32_MAX) g.node_features.row(node_of[v]) = mesh.vertices[v].transpose();
  }
  for (const auto& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      auto a = node_of[rep[f[k]]];
      auto b = node_of[rep[f[(k + 1) % 3]]];
      if (a == b) continue;
      if (a > b) std::swap(a, b);
      g.edges.emplace_back(a, b);
    }
  }
  std::sort(g.edges.begin(), g.edges.end());
  g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());
  return g;
}

NormalizedScene normalize_scene(const TriangleMesh& mesh, const Vec3& source, const Vec3& listener) {
  if (mesh.vertices.empty()) throw MeshError("normalize_scene: empty mesh");
  const auto [lo, hi] = mesh.bounding_box();
  auto inside = [&](const Vec3& p) {
    return p.allFinite() && (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
  };
  if (!inside(source)) {
    throw MeshError(fmt::format("source ({}, {}, {}) lies outside the scene bounding box", source.x(),
                                source.y(), source.z()));
  }
  if (!inside(listener)) {
    throw MeshError(fmt::format("listener ({}, {}, {}) lies outside the scene bounding box",
                                listener.x(), listener.y(), listener.z()));
  }
  NormalizedScene out;
  out.offset = -lo;
  out.mesh = mesh;
  for (auto& v : out.mesh.vertices) v += out.offset;
  out.source = source + out.offset;
  out.listener = listener + out.offset;
  return out;
}

}  // namespace roomir
