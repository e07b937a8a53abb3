#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "roomir/ir_codec.hpp"
#include "roomir/mesh.hpp"

namespace roomir {

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Box {
  Vec3 min;
  Vec3 max;
};

// Walls are ordered x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.
struct BoxScene {
  Vec3 dims{5.0, 4.0, 3.0};
  std::array<double, 6> absorption{0.3, 0.3, 0.3, 0.3, 0.3, 0.3};
  std::vector<Box> furniture;

  void validate() const;
};

inline constexpr double kSpeedOfSound = 343.0;

// Room shell facing inwards plus outward-facing furniture boxes, 12 triangles each.
TriangleMesh make_box_scene(const BoxScene& scene);

// Order cap that never binds: every image arriving within the output is kept.
inline constexpr int kUnlimitedOrder = 1 << 20;

struct ImageMethodOptions {
  // A cap of 30 stops at -14 dB for alpha = 0.1 walls, so by default the
  // output duration alone bounds the image set.
  int max_order = kUnlimitedOrder;
  int rate = 48000;
  double duration = 0.3;  // seconds of output
};

// Furniture is ignored acoustically; only the shell and its absorption matter.
ImpulseResponse image_method_ir(const BoxScene& scene, const Vec3& source, const Vec3& listener,
                                const ImageMethodOptions& options = {});

struct DatasetOptions {
  std::size_t scenes = 5;
  std::size_t irs_per_scene = 4;
  std::uint64_t seed = 1;
  Vec3 dims_min{3.0, 3.0, 2.4};
  Vec3 dims_max{10.0, 8.0, 3.5};
  double absorption_min = 0.1;
  double absorption_max = 0.9;
  std::size_t max_furniture = 5;
  double min_separation = 0.5;
  double wall_margin = 0.25;
  double val_fraction = 0.2;
  ImageMethodOptions image{};
};

struct DatasetSummary {
  std::filesystem::path manifest;
  std::filesystem::path train;
  std::filesystem::path val;
  std::size_t rows = 0;
};

// Writes meshes/, irs/ (packed 4096-sample WAVs), manifest.jsonl, train.jsonl
// and val.jsonl under out_dir. Paths inside the manifests are relative to it.
DatasetSummary build_dataset(const DatasetOptions& options, const std::filesystem::path& out_dir);

}  // namespace roomir
