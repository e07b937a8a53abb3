#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "roomir/mesh.hpp"

namespace roomir {

ObjParseError::ObjParseError(const std::string& path, std::size_t line, const std::string& what)
    : MeshError(fmt::format("{}:{}: {}", path, line, what)), line_(line) {}

void TriangleMesh::validate() const {
  const auto n = vertices.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (!vertices[i].allFinite()) throw MeshError(fmt::format("vertex {} is not finite", i));
  }
  for (std::size_t f = 0; f < faces.size(); ++f) {
    const auto& t = faces[f];
    for (auto idx : t) {
      if (idx >= n) throw MeshError(fmt::format("face {} references vertex {} of {}", f, idx, n));
    }
    if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) {
      throw MeshError(fmt::format("face {} repeats a vertex index", f));
    }
  }
}

std::pair<Vec3, Vec3> TriangleMesh::bounding_box() const {
  if (vertices.empty()) return {Vec3::Zero(), Vec3::Zero()};
  Vec3 lo = vertices.front();
  Vec3 hi = vertices.front();
  for (const auto& v : vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  return {lo, hi};
}

double TriangleMesh::surface_area() const {
  double area = 0.0;
  for (const auto& f : faces) {
    area += 0.5 * (vertices[f[1]] - vertices[f[0]]).cross(vertices[f[2]] - vertices[f[0]]).norm();
  }
  return area;
}

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_double(std::string_view tok, double& out) {
  // from_chars for double is available in libstdc++ 11.
  const auto* end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, out);
  return ec == std::errc() && ptr == end;
}

// Resolves a (possibly negative, 1-based) OBJ index against the vertices seen so far.
bool resolve_index(std::string_view tok, std::size_t seen, long& out) {
  const auto slash = tok.find('/');
  if (slash != std::string_view::npos) tok = tok.substr(0, slash);
  long v = 0;
  const auto* end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, v);
  if (ec != std::errc() || ptr != end || v == 0) return false;
  out = v > 0 ? v - 1 : static_cast<long>(seen) + v;
  return true;
}

}  // namespace

TriangleMesh parse_obj(std::istream& in, const std::string& source_name) {
  TriangleMesh mesh;
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string_view> tokens;
  std::vector<long> corners;

  while (std::getline(in, line)) {
    ++line_no;
    auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;

    tokens.clear();
    std::size_t pos = 0;
    while (pos < body.size()) {
      const auto b = body.find_first_not_of(" \t", pos);
      if (b == std::string_view::npos) break;
      auto e = body.find_first_of(" \t", b);
      if (e == std::string_view::npos) e = body.size();
      tokens.push_back(body.substr(b, e - b));
      pos = e;
    }

    if (tokens[0] == "v") {
      if (tokens.size() < 4) throw ObjParseError(source_name, line_no, "vertex needs 3 coordinates");
      Vec3 p;
      for (int k = 0; k < 3; ++k) {
        if (!parse_double(tokens[k + 1], p[k]) || !std::isfinite(p[k])) {
          throw ObjParseError(source_name, line_no, "bad vertex coordinate");
        }
      }
      mesh.vertices.push_back(p);
    } else if (tokens[0] == "f") {
      if (tokens.size() < 4) throw ObjParseError(source_name, line_no, "face needs at least 3 vertices");
      corners.clear();
      for (std::size_t k = 1; k < tokens.size(); ++k) {
        long idx = 0;
        if (!resolve_index(tokens[k], mesh.vertices.size(), idx)) {
          throw ObjParseError(source_name, line_no, fmt::format("malformed face index '{}'", tokens[k]));
        }
        if (idx < 0 || static_cast<std::size_t>(idx) >= mesh.vertices.size()) {
          throw ObjParseError(source_name, line_no,
                              fmt::format("face index {} out of range ({} vertices)", tokens[k],
                                          mesh.vertices.size()));
        }
        corners.push_back(idx);
      }
      for (std::size_t k = 1; k + 1 < corners.size(); ++k) {
        const Face f{static_cast<std::uint32_t>(corners[0]), static_cast<std::uint32_t>(corners[k]),
                     static_cast<std::uint32_t>(corners[k + 1])};
        // Degenerate fan triangles (repeated corners) carry no surface.
        if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) continue;
        mesh.faces.push_back(f);
      }
    }
  }
  return mesh;
}

TriangleMesh load_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MeshError(fmt::format("cannot open mesh file '{}'", path.string()));
  return parse_obj(in, path.string());
}

void write_obj(const TriangleMesh& mesh, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw MeshError(fmt::format("cannot write mesh file '{}'", path.string()));
  for (const auto& v : mesh.vertices) out << fmt::format("v {} {} {}\n", v.x(), v.y(), v.z());
  for (const auto& f : mesh.faces) out << fmt::format("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1);
  if (!out) throw MeshError(fmt::format("failed writing '{}'", path.string()));
}

}  // namespace roomir
