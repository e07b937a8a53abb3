#pragma once

// Shared fixtures for the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "roomir/mesh.hpp"

namespace roomir::testing {

inline TriangleMesh unit_cube(const Vec3& offset = Vec3::Zero()) {
  TriangleMesh m;
  for (int i = 0; i < 8; ++i) {
    m.vertices.push_back(Vec3((i & 1) ? 1.0 : 0.0, (i & 2) ? 1.0 : 0.0, (i & 4) ? 1.0 : 0.0) + offset);
  }
  // Outward-facing quads split into triangles.
  const int quads[6][4] = {{0, 2, 3, 1}, {4, 5, 7, 6}, {0, 1, 5, 4}, {2, 6, 7, 3}, {0, 4, 6, 2}, {1, 3, 7, 5}};
  for (const auto& q : quads) {
    m.faces.push_back({static_cast<std::uint32_t>(q[0]), static_cast<std::uint32_t>(q[1]), static_cast<std::uint32_t>(q[2])});
    m.faces.push_back({static_cast<std::uint32_t>(q[0]), static_cast<std::uint32_t>(q[2]), static_cast<std::uint32_t>(q[3])});
  }
  return m;
}

// Splits every triangle into four via edge midpoints (shared midpoints reused).
inline TriangleMesh subdivide(const TriangleMesh& in, bool project_to_sphere = false) {
  TriangleMesh out;
  out.vertices = in.vertices;
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> mids;
  auto midpoint = [&](std::uint32_t a, std::uint32_t b) {
    auto key = std::minmax(a, b);
    auto it = mids.find(key);
    if (it != mids.end()) return it->second;
    Vec3 p = 0.5 * (out.vertices[a] + out.vertices[b]);
    if (project_to_sphere) p.normalize();
    out.vertices.push_back(p);
    const auto id = static_cast<std::uint32_t>(out.vertices.size() - 1);
    mids.emplace(key, id);
    return id;
  };
  for (const auto& f : in.faces) {
    const auto ab = midpoint(f[0], f[1]);
    const auto bc = midpoint(f[1], f[2]);
    const auto ca = midpoint(f[2], f[0]);
    out.faces.push_back({f[0], ab, ca});
    out.faces.push_back({f[1], bc, ab});
    out.faces.push_back({f[2], ca, bc});
    out.faces.push_back({ab, bc, ca});
  }
  return out;
}

// Unit icosphere: 20 * 4^levels faces.
inline TriangleMesh icosphere(int levels) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  TriangleMesh m;
  const double raw[12][3] = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                             {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (const auto& r : raw) m.vertices.push_back(Vec3(r[0], r[1], r[2]).normalized());
  const std::uint32_t f[20][3] = {{0, 11, 5}, {0, 5, 1}, {0, 1, 7}, {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                                  {11, 10, 2}, {10, 7, 6}, {7, 1, 8}, {3, 9, 4}, {3, 4, 2}, {3, 2, 6}, {3, 6, 8},
                                  {3, 8, 9}, {4, 9, 5}, {2, 4, 11}, {6, 2, 10}, {8, 6, 7}, {9, 8, 1}};
  for (const auto& t3 : f) m.faces.push_back({t3[0], t3[1], t3[2]});
  for (int l = 0; l < levels; ++l) m = subdivide(m, true);
  return m;
}

// Random closed mesh: a jittered icosphere scaled into a room-sized box.
inline TriangleMesh random_blob(std::mt19937_64& rng, int levels = 1) {
  TriangleMesh m = icosphere(levels);
  std::uniform_real_distribution<double> jitter(0.8, 1.2), scale(1.0, 4.0);
  const Vec3 s(scale(rng), scale(rng), scale(rng));
  for (auto& v : m.vertices) v = (v * jitter(rng)).cwiseProduct(s) + s;
  return m;
}

// Relabels vertices by a random permutation and shuffles face order.
inline TriangleMesh permute_mesh(const TriangleMesh& in, std::mt19937_64& rng,
                                 std::vector<std::uint32_t>* perm_out = nullptr) {
  std::vector<std::uint32_t> perm(in.num_vertices());
  std::iota(perm.begin(), perm.end(), 0u);
  std::shuffle(perm.begin(), perm.end(), rng);
  TriangleMesh out;
  out.vertices.resize(in.num_vertices());
  for (std::size_t i = 0; i < perm.size(); ++i) out.vertices[perm[i]] = in.vertices[i];
  for (const auto& f : in.faces) out.faces.push_back({perm[f[0]], perm[f[1]], perm[f[2]]});
  std::shuffle(out.faces.begin(), out.faces.end(), rng);
  if (perm_out) *perm_out = perm;
  return out;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("roomir_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace roomir::testing
