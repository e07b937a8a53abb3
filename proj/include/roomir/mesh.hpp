#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace roomir {

using Vec3 = Eigen::Vector3d;
using Face = std::array<std::uint32_t, 3>;

// Indexed triangle soup, coordinates in meters.
struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;

  std::size_t num_vertices() const { return vertices.size(); }
  std::size_t num_faces() const { return faces.size(); }

  // Throws MeshError if an index is out of range, a face repeats a vertex or
  // a coordinate is not finite.
  void validate() const;

  std::pair<Vec3, Vec3> bounding_box() const;
  double surface_area() const;
};

class MeshError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ObjParseError : public MeshError {
 public:
  ObjParseError(const std::string& path, std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Reads v/f records of a Wavefront OBJ file; vt/vn/o/g/usemtl and friends are
// skipped. Polygons are fan-triangulated around their first corner.
TriangleMesh load_obj(const std::filesystem::path& path);
TriangleMesh parse_obj(std::istream& in, const std::string& source_name = "<stream>");
void write_obj(const TriangleMesh& mesh, const std::filesystem::path& path);

struct SimplifyResult {
  TriangleMesh mesh;
  // False when the collapse queue ran dry before the face budget was met.
  bool target_reached = true;
};

// Quadric error metric edge collapse (plane quadrics per vertex, collapse to
// the quadric-optimal point, cheapest edge first). Collapses that flip a
// neighbouring triangle or break the edge link condition are rejected.
SimplifyResult simplify_mesh(const TriangleMesh& mesh, std::size_t target_faces = 2000);

// Symmetric Hausdorff estimate from `samples` area-uniform surface points per
// mesh, each measured to the exact nearest point on the other surface.
double hausdorff_distance(const TriangleMesh& a, const TriangleMesh& b, std::size_t samples,
                          std::uint64_t seed = 0x5eed);

// One-sided version: max over points sampled on `from` of distance to `to`.
double directed_hausdorff(const TriangleMesh& from, const TriangleMesh& to, std::size_t samples,
                          std::uint64_t seed = 0x5eed);

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

// Undirected graph over welded mesh vertices.
struct SceneGraph {
  Eigen::MatrixXd node_features;  // N x 3 vertex coordinates
  std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;  // i < j, sorted, unique

  std::size_t num_nodes() const { return static_cast<std::size_t>(node_features.rows()); }
  std::size_t num_edges() const { return edges.size(); }
  std::vector<std::vector<std::uint32_t>> adjacency_lists() const;
};

inline constexpr double kDefaultWeldEpsilon = 1e-4;

SceneGraph mesh_to_graph(const TriangleMesh& mesh, double weld_epsilon = kDefaultWeldEpsilon);

struct NormalizedScene {
  TriangleMesh mesh;
  Vec3 source;
  Vec3 listener;
  Vec3 offset;  // translation that was applied
};

// Rigid translation moving the bounding-box minimum to the origin.
NormalizedScene normalize_scene(const TriangleMesh& mesh, const Vec3& source, const Vec3& listener);

}  // namespace roomir
