#include "roomir/shoebox.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <fmt/core.h>
#include <json.hpp>

namespace roomir {

namespace {

constexpr int kHalfTaps = 40;  // 81-tap fractional delay

void append_box(TriangleMesh& mesh, const Vec3& lo, const Vec3& hi, bool inward) {
  const auto base = static_cast<std::uint32_t>(mesh.vertices.size());
  for (int i = 0; i < 8; ++i) {
    mesh.vertices.emplace_back(i & 1 ? hi.x() : lo.x(), i & 2 ? hi.y() : lo.y(), i & 4 ? hi.z() : lo.z());
  }
  // Outward-facing quads of the unit cube, corner index bit 0 = x, 1 = y, 2 = z.
  static constexpr std::array<std::array<std::uint32_t, 4>, 6> quads{{
      {0, 4, 6, 2},  // x = lo
      {1, 3, 7, 5},  // x = hi
      {0, 1, 5, 4},  // y = lo
      {2, 6, 7, 3},  // y = hi
      {0, 2, 3, 1},  // z = lo
      {4, 5, 7, 6},  // z = hi
  }};
  for (const auto& q : quads) {
    Face a{base + q[0], base + q[1], base + q[2]};
    Face b{base + q[0], base + q[2], base + q[3]};
    if (inward) {
      std::swap(a[1], a[2]);
      std::swap(b[1], b[2]);
    }
    mesh.faces.push_back(a);
    mesh.faces.push_back(b);
  }
}

bool strictly_inside(const BoxScene& scene, const Vec3& p) {
  return (p.array() > 0.0).all() && (p.array() < scene.dims.array()).all();
}

// Uniform double in [0, 1) from the top 53 bits, independent of the standard
// library's distribution implementations.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * unit(rng); }

nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

}  // namespace

void BoxScene::validate() const {
  if (!(dims.array() > 0.0).all() || !dims.allFinite()) {
    throw OracleError(fmt::format("room dimensions must be positive, got ({}, {}, {})", dims.x(), dims.y(), dims.z()));
  }
  for (double a : absorption) {
    if (!(a >= 0.0 && a <= 1.0)) throw OracleError(fmt::format("absorption {} outside [0, 1]", a));
  }
  for (std::size_t i = 0; i < furniture.size(); ++i) {
    const auto& b = furniture[i];
    if (!(b.min.array() < b.max.array()).all()) throw OracleError(fmt::format("furniture box {} is empty", i));
    if (!(b.min.array() >= 0.0).all() || !(b.max.array() <= dims.array()).all()) {
      throw OracleError(fmt::format("furniture box {} extends outside the room", i));
    }
  }
}

TriangleMesh make_box_scene(const BoxScene& scene) {
  scene.validate();
  TriangleMesh mesh;
  append_box(mesh, Vec3::Zero(), scene.dims, true);
  for (const auto& b : scene.furniture) append_box(mesh, b.min, b.max, false);
  return mesh;
}

ImpulseResponse image_method_ir(const BoxScene& scene, const Vec3& source, const Vec3& listener,
                                const ImageMethodOptions& options) {
  scene.validate();
  if (options.rate <= 0 || !(options.duration > 0.0) || options.max_order < 0) {
    throw OracleError("image method needs a positive rate and duration and a non-negative order");
  }
  if (!strictly_inside(scene, source)) throw OracleError("source is not strictly inside the room");
  if (!strictly_inside(scene, listener)) throw OracleError("listener is not strictly inside the room");
  if ((source - listener).norm() < 1e-9) throw OracleError("source and listener coincide");

  ImpulseResponse ir;
  ir.rate = options.rate;
  ir.form = IrForm::kRaw;
  const auto length = static_cast<std::size_t>(std::ceil(options.duration * options.rate));
  ir.samples.assign(length, 0.0);

  std::array<double, 6> beta{};
  for (int w = 0; w < 6; ++w) beta[w] = std::sqrt(1.0 - scene.absorption[w]);

  const double samples_per_meter = options.rate / kSpeedOfSound;
  const double max_distance = (static_cast<double>(length) + kHalfTaps) / samples_per_meter;
  const int order = options.max_order;

  // Per-axis image coordinates, reflection counts and gains for every
  // (index, parity) pair that can arrive within the output.
  struct AxisImage {
    double offset;  // image coordinate minus listener coordinate
    int hits;
    double gain;
  };
  std::array<std::vector<AxisImage>, 3> axes;
  for (int a = 0; a < 3; ++a) {
    const int reach = std::min(order, static_cast<int>(std::ceil(max_distance / (2.0 * scene.dims[a]))) + 1);
    for (int n = -reach; n <= reach; ++n) {
      for (int q = 0; q < 2; ++q) {
        const double coord = (q ? -source[a] : source[a]) + 2.0 * n * scene.dims[a];
        const int lo_hits = std::abs(n - q), hi_hits = std::abs(n);
        if (lo_hits + hi_hits > order) continue;
        const double gain = std::pow(beta[2 * a], lo_hits) * std::pow(beta[2 * a + 1], hi_hits);
        const double offset = coord - listener[a];
        if (gain == 0.0 || std::abs(offset) > max_distance) continue;
        axes[a].push_back({offset, lo_hits + hi_hits, gain});
      }
    }
  }

  const double kernel_step = std::numbers::pi / (kHalfTaps + 1);
  for (const auto& ix : axes[0]) {
    for (const auto& iy : axes[1]) {
      if (ix.hits + iy.hits > order) continue;
      const double dxy2 = ix.offset * ix.offset + iy.offset * iy.offset;
      if (dxy2 > max_distance * max_distance) continue;
      for (const auto& iz : axes[2]) {
        if (ix.hits + iy.hits + iz.hits > order) continue;
        const double d = std::sqrt(dxy2 + iz.offset * iz.offset);
        if (d > max_distance) continue;
        const double amplitude = ix.gain * iy.gain * iz.gain / (4.0 * std::numbers::pi * d);
        const double delay = d * samples_per_meter;
        const long centre = std::lround(delay);
        const double frac = static_cast<double>(centre) - delay;  // in [-0.5, 0.5]
        // sin(pi (k + frac)) = (-1)^k sin(pi frac); the Hann window cosine is
        // advanced by rotation.
        const double sin_frac = std::sin(std::numbers::pi * frac);
        const double step_c = std::cos(kernel_step), step_s = std::sin(kernel_step);
        const double start = (frac - kHalfTaps) * kernel_step;
        double wc = std::cos(start), ws = std::sin(start);
        double sign = (kHalfTaps % 2 == 0) ? 1.0 : -1.0;
        for (long k = -kHalfTaps; k <= kHalfTaps; ++k) {
          const long n = centre + k;
          if (n >= 0 && n < static_cast<long>(length)) {
            const double t = static_cast<double>(k) + frac;
            const double sinc = std::abs(t) < 1e-12 ? 1.0 : sign * sin_frac / (std::numbers::pi * t);
            ir.samples[static_cast<std::size_t>(n)] += amplitude * 0.5 * (1.0 + wc) * sinc;
          }
          const double next_c = wc * step_c - ws * step_s;
          ws = ws * step_c + wc * step_s;
          wc = next_c;
          sign = -sign;
        }
      }
    }
  }
  return ir;
}

DatasetSummary build_dataset(const DatasetOptions& options, const std::filesystem::path& out_dir) {
  if (options.scenes < 1 || options.irs_per_scene < 1) throw OracleError("scenes and irs_per_scene must be >= 1");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "meshes", ec);
  fs::create_directories(out_dir / "irs", ec);
  if (ec) throw OracleError(fmt::format("cannot create {}: {}", out_dir.string(), ec.message()));

  std::mt19937_64 rng(options.seed);
  std::vector<std::string> lines;
  std::vector<std::size_t> line_scene;
  for (std::size_t s = 0; s < options.scenes; ++s) {
    BoxScene scene;
    for (int a = 0; a < 3; ++a) scene.dims[a] = uniform(rng, options.dims_min[a], options.dims_max[a]);
    for (auto& a : scene.absorption) a = uniform(rng, options.absorption_min, options.absorption_max);
    const auto furniture = static_cast<std::size_t>(rng() % (options.max_furniture + 1));
    for (std::size_t f = 0; f < furniture; ++f) {
      Vec3 size(uniform(rng, 0.3, 1.5), uniform(rng, 0.3, 1.5), uniform(rng, 0.3, 1.2));
      size = size.cwiseMin(0.5 * scene.dims);
      Box box;
      box.min = Vec3(uniform(rng, 0.0, scene.dims.x() - size.x()), uniform(rng, 0.0, scene.dims.y() - size.y()), 0.0);
      box.max = box.min + size;
      scene.furniture.push_back(box);
    }
    const std::string scene_id = fmt::format("scene_{:04d}", s);
    const std::string mesh_rel = fmt::format("meshes/{}.obj", scene_id);
    write_obj(make_box_scene(scene), out_dir / mesh_rel);

    const Vec3 margin = Vec3::Constant(options.wall_margin).cwiseMin(0.25 * scene.dims);
    auto draw_point = [&] {
      Vec3 p;
      for (int a = 0; a < 3; ++a) p[a] = uniform(rng, margin[a], scene.dims[a] - margin[a]);
      return p;
    };
    for (std::size_t r = 0; r < options.irs_per_scene; ++r) {
      const Vec3 source = draw_point();
      Vec3 listener = draw_point();
      for (int attempt = 0; (listener - source).norm() < options.min_separation; ++attempt) {
        if (attempt > 1000) throw OracleError("cannot place a listener away from the source");
        listener = draw_point();
      }
      const auto raw = image_method_ir(scene, source, listener, options.image);
      const auto packed = pack(crop_or_pad(resample(raw, kModelRate)));
      const std::string ir_rel = fmt::format("irs/{}_{:03d}.wav", scene_id, r);
      write_wav(packed, out_dir / ir_rel);

      nlohmann::json row;
      row["mesh"] = mesh_rel;
      row["source"] = vec_json(source);
      row["listener"] = vec_json(listener);
      row["ir"] = ir_rel;
      row["scene_id"] = scene_id;
      lines.push_back(row.dump());
      line_scene.push_back(s);
    }
  }

  // The last ceil(val_fraction * scenes) scenes go to validation, keeping at
  // least one training scene.
  auto val_scenes = static_cast<std::size_t>(std::ceil(options.val_fraction * static_cast<double>(options.scenes)));
  val_scenes = std::min(val_scenes, options.scenes - 1);
  const std::size_t first_val = options.scenes - val_scenes;

  DatasetSummary summary{out_dir / "manifest.jsonl", out_dir / "train.jsonl", out_dir / "val.jsonl", lines.size()};
  std::ofstream all(summary.manifest), train(summary.train), val(summary.val);
  if (!all || !train || !val) throw OracleError(fmt::format("cannot write manifests in {}", out_dir.string()));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    all << lines[i] << '\n';
    (line_scene[i] >= first_val ? val : train) << lines[i] << '\n';
  }
  return summary;
}

}  // namespace roomir
