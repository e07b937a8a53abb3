#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <fmt/format.h>
#include <unistd.h>

#include "roomir/acoustics.hpp"
#include "roomir/encoder.hpp"
#include "roomir/harness.hpp"
#include "roomir/shoebox.hpp"

using namespace roomir;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  return fs::temp_directory_path() / fmt::format("roomir_harness_{}_{}", ::getpid(), name);
}

// An untrained model whose output bias keeps the packed tag positive, so
// every generated IR unpacks.
Model unpackable_model(std::uint64_t seed = 3) {
  TrainingConfig cfg;
  cfg.seed = seed;
  Model m = Model::initialize(cfg);
  for (auto& p : m.generator.parameters()) {
    if (p.name == "generator.output.bias") p.value->setConstant(0.5f);
  }
  return m;
}

const fs::path& room_obj() {
  static const fs::path path = [] {
    BoxScene scene;
    scene.dims = Vec3(6.0, 4.5, 3.0);
    scene.furniture.push_back({Vec3(1.0, 1.0, 0.0), Vec3(2.0, 1.8, 0.8)});
    const auto p = scratch("room.obj");
    write_obj(make_box_scene(scene), p);
    return p;
  }();
  return path;
}

std::vector<SourceListener> listeners(std::size_t n) {
  std::vector<SourceListener> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(n);
    out.push_back({Vec3(1.0, 3.0, 1.5), Vec3(0.5 + 5.0 * t, 0.5 + 3.5 * (1 - t), 1.2)});
  }
  return out;
}

std::vector<double> random_signal(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> x(n);
  for (auto& v : x) v = g(rng);
  return x;
}

std::vector<double> oracle_ir(double alpha, const Vec3& listener) {
  BoxScene scene;
  scene.absorption.fill(alpha);
  auto ir = image_method_ir(scene, Vec3(1.2, 1.1, 1.3), listener);
  return unpack(pack(crop_or_pad(resample(ir, kModelRate)))).samples;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("convolve matches direct summation") {
  const auto a = random_signal(300, 1), b = random_signal(77, 2);
  const auto y = convolve(a, b);
  REQUIRE(y.size() == 376);
  for (std::size_t n = 0; n < y.size(); ++n) {
    double direct = 0;
    for (std::size_t k = 0; k < b.size(); ++k) {
      if (n >= k && n - k < a.size()) direct += a[n - k] * b[k];
    }
    CHECK(y[n] == doctest::Approx(direct).epsilon(1e-9).scale(1.0));
  }
  CHECK_THROWS(convolve(std::vector<double>{}, b));
}

TEST_CASE("render with a unit impulse returns the speech") {
  ImpulseResponse speech{random_signal(5000, 3, 0.1), 16000, IrForm::kRaw};
  ImpulseResponse ir{std::vector<double>(64, 0.0), 16000, IrForm::kRaw};
  ir.samples[0] = 1.0;
  const auto out = render_speech(speech, ir);
  REQUIRE(out.audio.samples.size() == 5000 + 64 - 1);
  CHECK(out.scale == 1.0);
  for (std::size_t i = 0; i < 5000; ++i) CHECK(std::abs(out.audio.samples[i] - speech.samples[i]) <= 1e-9);
  for (std::size_t i = 5000; i < out.audio.samples.size(); ++i) CHECK(std::abs(out.audio.samples[i]) <= 1e-9);
}

TEST_CASE("render with a delayed scaled impulse shifts and scales") {
  ImpulseResponse speech{random_signal(3000, 4, 0.1), 16000, IrForm::kRaw};
  const std::size_t k = 37;
  const double a = -0.4;
  ImpulseResponse ir{std::vector<double>(100, 0.0), 16000, IrForm::kRaw};
  ir.samples[k] = a;
  const auto out = render_speech(speech, ir);
  for (std::size_t i = 0; i < out.audio.samples.size(); ++i) {
    const double expected = (i >= k && i - k < speech.samples.size()) ? a * speech.samples[i - k] : 0.0;
    CHECK(std::abs(out.audio.samples[i] - expected) <= 1e-9);
  }
}

TEST_CASE("render energy obeys the Young bound and peak normalization") {
  ImpulseResponse speech{random_signal(4000, 5, 0.2), 16000, IrForm::kRaw};
  ImpulseResponse ir{random_signal(800, 6, 0.05), 16000, IrForm::kRaw};
  const auto out = render_speech(speech, ir);
  double ex = 0, es = 0, l1 = 0;
  for (double v : out.audio.samples) ex += v * v;
  for (double v : speech.samples) es += v * v;
  for (double v : ir.samples) l1 += std::abs(v);
  // The bound holds for the unscaled convolution; scale <= 1 only shrinks it.
  CHECK(ex <= es * l1 * l1 * (1 + 1e-12));

  ImpulseResponse loud = ir;
  for (auto& v : loud.samples) v *= 100.0;
  const auto clipped = render_speech(speech, loud);
  const auto raw = convolve(speech.samples, loud.samples);
  double peak = 0, out_peak = 0;
  for (double v : raw) peak = std::max(peak, std::abs(v));
  for (double v : clipped.audio.samples) out_peak = std::max(out_peak, std::abs(v));
  REQUIRE(peak > 1.0);
  CHECK(clipped.scale == doctest::Approx(0.99 / peak));
  CHECK(out_peak == doctest::Approx(0.99));
}

TEST_CASE("render resamples the IR to the speech rate") {
  ImpulseResponse speech{random_signal(1600, 7, 0.1), 16000, IrForm::kRaw};
  ImpulseResponse ir{std::vector<double>(480, 0.0), 48000, IrForm::kRaw};
  ir.samples[30] = 1.0;
  const auto out = render_speech(speech, ir);
  CHECK(out.audio.rate == 16000);
  CHECK(out.audio.samples.size() == 1600 + resample(ir, 16000).samples.size() - 1);
  CHECK_THROWS_AS(render_speech(ImpulseResponse{}, ir), StageError);
}

TEST_CASE("identity prediction evaluates to zero error") {
  std::vector<EvaluationPair> pairs;
  for (int i = 0; i < 4; ++i) {
    const auto ir = oracle_ir(0.2 + 0.15 * i, Vec3(3.5, 2.0 + 0.3 * i, 1.4));
    pairs.push_back({fmt::format("row{}", i), ir, ir});
  }
  const auto report = evaluate(pairs, 2);
  CHECK(report.t60.mae == 0.0);
  CHECK(report.drr.mae == 0.0);
  CHECK(report.edt.mae == 0.0);
  CHECK(report.t60.mean_relative_error == 0.0);
  CHECK(report.mse == 0.0);
  CHECK(report.t60.excluded == 0);
  CHECK(report.t60.evaluated == 4);
  REQUIRE(report.spectra.size() == 2);
  CHECK(report.spectra[0].truth_db == report.spectra[0].predicted_db);
  CHECK_THROWS_AS(evaluate({}), StageError);
}

TEST_CASE("evaluation statistics follow their definitions") {
  std::vector<EvaluationPair> pairs;
  for (int i = 0; i < 5; ++i) {
    const auto truth = oracle_ir(0.3, Vec3(3.0 + 0.2 * i, 2.5, 1.5));
    const auto pred = oracle_ir(0.2 + 0.1 * i, Vec3(3.0 + 0.2 * i, 2.5, 1.5));
    pairs.push_back({fmt::format("row{}", i), truth, pred});
  }
  const auto report = evaluate(pairs);
  double abs_sum = 0, rel_sum = 0, mse_sum = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& r = report.rows[i];
    REQUIRE(r.t60.truth);
    REQUIRE(r.t60.predicted);
    CHECK(*r.t60.truth == t60(pairs[i].truth, kModelRate));
    CHECK(*r.t60.predicted == t60(pairs[i].predicted, kModelRate));
    const double d = std::abs(*r.t60.predicted - *r.t60.truth);
    CHECK(*r.t60.relative_error == doctest::Approx(d / std::abs(*r.t60.truth)));
    abs_sum += d;
    rel_sum += d / std::abs(*r.t60.truth);
    double se = 0;
    for (std::size_t k = 0; k < pairs[i].truth.size(); ++k) {
      se += (pairs[i].truth[k] - pairs[i].predicted[k]) * (pairs[i].truth[k] - pairs[i].predicted[k]);
    }
    mse_sum += se / static_cast<double>(pairs[i].truth.size());
  }
  CHECK(report.t60.mae == doctest::Approx(abs_sum / 5));
  CHECK(report.t60.mean_relative_error == doctest::Approx(rel_sum / 5));
  CHECK(report.mse == doctest::Approx(mse_sum / 5));
  CHECK(report.mse_e4() == doctest::Approx(report.mse * 1e4));
  // Lower absorption in the prediction means a longer decay.
  CHECK(*report.rows[0].t60.predicted > *report.rows[0].t60.truth);
}

TEST_CASE("failed estimates are excluded and counted") {
  const auto truth = oracle_ir(0.3, Vec3(3.0, 2.0, 1.5));
  std::vector<double> flat(truth.size(), 0.0);
  flat[0] = 1.0;  // a lone impulse: no decay to fit, no reverberant energy
  std::vector<EvaluationPair> pairs{{"good", truth, truth}, {"impulse", truth, flat}, {"lost", truth, {}}};
  const auto report = evaluate(pairs);
  CHECK(report.unpack_failures == 1);
  CHECK(report.t60.evaluated == 1);
  CHECK(report.t60.excluded == 2);
  CHECK(report.drr.excluded == 2);
  CHECK(report.t60.exclusion_rate() == doctest::Approx(2.0 / 3.0));
  CHECK(std::isfinite(report.mse));
  const auto j = report.to_json();
  CHECK(j["rows"][2]["mse"].is_null());
  CHECK(j["rows"][1]["t60"]["predicted"].is_null());
  CHECK(report.table().find("MSE x1e-4") != std::string::npos);
}

TEST_CASE("spectrum overlay files") {
  const auto truth = oracle_ir(0.3, Vec3(3.0, 2.0, 1.5));
  const auto report = evaluate({{"row", truth, truth}}, 1);
  const auto csv = scratch("spec.csv"), svg = scratch("spec.svg");
  write_spectrum_overlay(report.spectra[0], csv, svg);
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "frequency_hz,truth_db,predicted_db");
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  CHECK(lines == report.spectra[0].frequencies.size());
  CHECK(slurp(svg).find("<polyline") != std::string::npos);
  fs::remove(csv);
  fs::remove(svg);
}

TEST_CASE("one mesh with 100 listeners is encoded once") {
  IrPipeline pipeline(unpackable_model());
  const auto out = scratch("gen100");
  const auto files = generate_ir(pipeline, room_obj(), listeners(100), out);
  CHECK(pipeline.encode_calls() == 1);
  CHECK(pipeline.generate_calls() == 100);
  REQUIRE(files.size() == 100);
  const auto ir = read_wav(files[42]);
  CHECK(ir.rate == 16000);
  CHECK(ir.samples.size() == 3968);
  fs::remove_all(out);
}

TEST_CASE("generate_ir is deterministic to the byte") {
  IrPipeline a(unpackable_model()), b(unpackable_model());
  const auto pa = scratch("det_a"), pb = scratch("det_b");
  const auto fa = generate_ir(a, room_obj(), listeners(3), pa);
  const auto fb = generate_ir(b, room_obj(), listeners(3), pb);
  for (std::size_t i = 0; i < fa.size(); ++i) CHECK(slurp(fa[i]) == slurp(fb[i]));
  fs::remove_all(pa);
  fs::remove_all(pb);
}

TEST_CASE("pipeline composition equals the stages called by hand") {
  Model model = unpackable_model(8);
  IrPipeline pipeline(model);
  const auto positions = listeners(4);
  const auto scene = pipeline.prepare(room_obj());
  const auto irs = pipeline.generate(scene, positions);

  const auto mesh = load_obj(room_obj());
  const auto simplified = simplify_mesh(mesh, 2000).mesh;
  const auto normalized = normalize_scene(simplified, positions[0].source, positions[0].listener);
  const auto latent = encode_mesh(mesh_to_graph(normalized.mesh), model.encoder);
  CHECK(latent == scene.latent);
  nn::Mat<float> emb(14, 4);
  for (Eigen::Index i = 0; i < 4; ++i) {
    const auto& p = positions[static_cast<std::size_t>(i)];
    const Vec3 s = p.source + normalized.offset, l = p.listener + normalized.offset;
    const auto e = build_embedding(std::span<const double>(latent.data(), 8), std::span<const double>(s.data(), 3),
                                   std::span<const double>(l.data(), 3));
    for (Eigen::Index k = 0; k < 14; ++k) emb(k, i) = static_cast<float>(e.values[static_cast<std::size_t>(k)]);
  }
  const auto packed = model.generator.forward(emb);
  for (Eigen::Index i = 0; i < 4; ++i) {
    ImpulseResponse p;
    p.form = IrForm::kPacked;
    p.samples.assign(packed.col(i).data(), packed.col(i).data() + packed.rows());
    CHECK(unpack(p).samples == irs[static_cast<std::size_t>(i)].samples);
  }
}

TEST_CASE("stage errors carry the stage name") {
  IrPipeline pipeline(unpackable_model());
  try {
    pipeline.prepare(fs::path("/nonexistent/room.obj"));
    FAIL("expected StageError");
  } catch (const StageError& e) {
    CHECK(e.stage() == "load");
    CHECK(std::string(e.what()).rfind("load: ", 0) == 0);
  }
  const auto scene = pipeline.prepare(room_obj());
  try {
    pipeline.embed(scene, {{Vec3(1, 1, 1), Vec3(50, 1, 1)}});
    FAIL("expected StageError");
  } catch (const StageError& e) {
    CHECK(e.stage() == "embed");
  }
}

TEST_CASE("benchmark separates encoding from per-IR generation") {
  IrPipeline pipeline(unpackable_model());
  BenchmarkOptions opt;
  opt.batch1_irs = 8;
  const auto r = bench(pipeline, room_obj(), 130, opt);
  CHECK(r.n_irs == 130);
  CHECK(r.simplify_seconds >= 0);
  CHECK(r.graph_seconds >= 0);
  CHECK(r.encode_seconds > 0);
  CHECK(r.per_ir_batch1 > 0);
  CHECK(r.per_ir_batch128 > 0);
  CHECK(r.per_ir_batch128 <= r.per_ir_batch1);
  CHECK(r.irs_per_second == doctest::Approx(1.0 / r.per_ir_batch128));
  CHECK(r.to_json().contains("encode_seconds"));
  CHECK_THROWS_AS(bench(pipeline, room_obj(), 0), StageError);
}

TEST_CASE("manifest evaluation encodes each mesh once") {
  const auto dir = scratch("evalset");
  DatasetOptions opt;
  opt.scenes = 2;
  opt.irs_per_scene = 3;
  opt.seed = 4;
  const auto summary = build_dataset(opt, dir);
  IrPipeline pipeline(unpackable_model());
  const auto report = evaluate_manifest(pipeline, summary.manifest, 1);
  CHECK(pipeline.encode_calls() == 2);
  CHECK(report.rows.size() == 6);
  CHECK(report.t60.evaluated + report.t60.excluded == 6);
  CHECK(report.spectra.size() == 1);
  const auto empty = dir / "empty.jsonl";
  std::ofstream(empty).close();
  CHECK_THROWS_AS(evaluate_manifest(pipeline, empty), StageError);
  fs::remove_all(dir);
}
