#include "roomir/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "roomir/acoustics.hpp"
#include "roomir/encoder.hpp"
#include "roomir/fft.hpp"

namespace roomir {

using json = nlohmann::json;
namespace fs = std::filesystem;

StageError::StageError(std::string stage, const std::string& message)
    : std::runtime_error(fmt::format("{}: {}", stage, message)), stage_(std::move(stage)) {}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Runs f, relabelling any exception with the stage it came from.
template <typename F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

double uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

// ---- pipeline ----

IrPipeline::IrPipeline(Model model) : model_(std::move(model)) {}

IrPipeline IrPipeline::from_checkpoint(const fs::path& checkpoint) {
  return IrPipeline(stage("checkpoint", [&] { return load_checkpoint(checkpoint); }));
}

PreparedScene IrPipeline::prepare(const fs::path& mesh_path) {
  const auto mesh = stage("load", [&] { return load_obj(mesh_path); });
  return prepare(mesh);
}

PreparedScene IrPipeline::prepare(const TriangleMesh& mesh) {
  PreparedScene scene;
  auto t0 = Clock::now();
  auto simplified = stage("simplify", [&] { return simplify_mesh(mesh, model_.config.simplify_target).mesh; });
  scene.simplify_seconds = seconds_since(t0);

  t0 = Clock::now();
  auto normalized = stage("normalize", [&] { return normalize_scene(simplified, Vec3::Zero(), Vec3::Zero()); });
  scene.simplified = std::move(normalized.mesh);
  scene.offset = normalized.offset;
  scene.extent = Vec3::Zero();
  for (const auto& v : scene.simplified.vertices) scene.extent = scene.extent.cwiseMax(v);
  scene.graph = stage("graph", [&] { return mesh_to_graph(scene.simplified); });
  scene.graph_seconds = seconds_since(t0);

  t0 = Clock::now();
  scene.latent = stage("encode", [&] { return encode_mesh(scene.graph, model_.encoder); });
  scene.encode_seconds = seconds_since(t0);
  ++encode_calls_;
  return scene;
}

nn::Mat<float> IrPipeline::embed(const PreparedScene& scene, const std::vector<SourceListener>& positions) const {
  return stage("embed", [&] {
    constexpr double kTolerance = 1e-9;
    auto inside = [&](const Vec3& p) {
      return (p.array() >= -kTolerance).all() && (p.array() <= scene.extent.array() + kTolerance).all();
    };
    nn::Mat<float> out(static_cast<Eigen::Index>(kEmbeddingSize), static_cast<Eigen::Index>(positions.size()));
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const Vec3 s = positions[i].source + scene.offset;
      const Vec3 l = positions[i].listener + scene.offset;
      if (!inside(s) || !inside(l)) {
        throw std::invalid_argument(fmt::format("position {} lies outside the scene bounding box", i));
      }
      const auto e = build_embedding(std::span<const double>(scene.latent.data(), kMeshLatentSize),
                                     std::span<const double>(s.data(), 3), std::span<const double>(l.data(), 3));
      for (std::size_t k = 0; k < kEmbeddingSize; ++k) {
        out(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = static_cast<float>(e.values[k]);
      }
    }
    return out;
  });
}

nn::Mat<float> IrPipeline::generate_packed(const nn::Mat<float>& embeddings, std::size_t batch) {
  return stage("generate", [&] {
    if (batch == 0) throw std::invalid_argument("batch size must be positive");
    nn::Mat<float> out(static_cast<Eigen::Index>(kPackedLength), embeddings.cols());
    for (Eigen::Index start = 0; start < embeddings.cols(); start += static_cast<Eigen::Index>(batch)) {
      const auto n = std::min<Eigen::Index>(static_cast<Eigen::Index>(batch), embeddings.cols() - start);
      out.middleCols(start, n) = model_.generator.forward(embeddings.middleCols(start, n));
      generate_calls_ += static_cast<std::size_t>(n);
    }
    return out;
  });
}

std::vector<ImpulseResponse> IrPipeline::generate(const PreparedScene& scene,
                                                  const std::vector<SourceListener>& positions, std::size_t batch) {
  const auto packed = generate_packed(embed(scene, positions), batch);
  std::vector<ImpulseResponse> irs;
  irs.reserve(positions.size());
  for (Eigen::Index b = 0; b < packed.cols(); ++b) {
    ImpulseResponse p;
    p.form = IrForm::kPacked;
    p.samples.assign(packed.col(b).data(), packed.col(b).data() + packed.rows());
    irs.push_back(stage("unpack", [&] { return unpack(p); }));
  }
  return irs;
}

std::vector<fs::path> generate_ir(IrPipeline& pipeline, const fs::path& mesh_path,
                                  const std::vector<SourceListener>& positions, const fs::path& out_dir) {
  if (positions.empty()) throw StageError("embed", "no source/listener positions given");
  const auto scene = pipeline.prepare(mesh_path);
  const auto irs = pipeline.generate(scene, positions);
  std::vector<fs::path> written;
  stage("write", [&] {
    fs::create_directories(out_dir);
    for (std::size_t i = 0; i < irs.size(); ++i) {
      written.push_back(out_dir / fmt::format("ir_{:04d}.wav", i));
      write_wav(irs[i], written.back());
    }
    return 0;
  });
  return written;
}

// ---- evaluation ----

double MetricSummary::exclusion_rate() const {
  const auto total = evaluated + excluded;
  return total == 0 ? 0.0 : static_cast<double>(excluded) / static_cast<double>(total);
}

namespace {

template <typename F>
std::optional<double> try_metric(F&& f) {
  try {
    const double v = f();
    if (std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  return std::nullopt;
}

std::optional<double> drr_value(std::span<const double> ir) {
  return try_metric([&] {
    const auto r = drr(ir, kModelRate);
    return r.infinite ? std::numeric_limits<double>::infinity() : r.db;
  });
}

MetricErrors compare(std::optional<double> truth, std::optional<double> predicted) {
  MetricErrors m{truth, predicted, std::nullopt};
  if (truth && predicted && *truth != 0.0) m.relative_error = std::abs(*predicted - *truth) / std::abs(*truth);
  return m;
}

void summarize(const std::vector<EvaluationRow>& rows, MetricErrors EvaluationRow::*field, MetricSummary& out) {
  double abs_sum = 0, rel_sum = 0;
  std::size_t rel_n = 0;
  for (const auto& row : rows) {
    const auto& m = row.*field;
    if (!m.truth || !m.predicted) {
      ++out.excluded;
      continue;
    }
    ++out.evaluated;
    abs_sum += std::abs(*m.predicted - *m.truth);
    if (m.relative_error) {
      rel_sum += *m.relative_error;
      ++rel_n;
    }
  }
  out.mae = out.evaluated ? abs_sum / static_cast<double>(out.evaluated) : 0.0;
  out.mean_relative_error = rel_n ? rel_sum / static_cast<double>(rel_n) : 0.0;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json metric_json(const MetricErrors& m) {
  return {{"truth", optional_json(m.truth)},
          {"predicted", optional_json(m.predicted)},
          {"relative_error", optional_json(m.relative_error)}};
}

json summary_json(const MetricSummary& s) {
  return {{"mae", s.mae},
          {"mean_relative_error", s.mean_relative_error},
          {"evaluated", s.evaluated},
          {"excluded", s.excluded},
          {"exclusion_rate", s.exclusion_rate()}};
}

}  // namespace

EvaluationReport evaluate(const std::vector<EvaluationPair>& pairs, std::size_t spectra) {
  if (pairs.empty()) throw StageError("eval", "no rows to evaluate");
  EvaluationReport report;
  double mse_sum = 0;
  std::size_t mse_n = 0;
  for (const auto& pair : pairs) {
    EvaluationRow row;
    row.ir = pair.ir;
    const std::span<const double> truth(pair.truth);
    const auto t_t60 = try_metric([&] { return t60(truth, kModelRate); });
    const auto t_edt = try_metric([&] { return edt(truth, kModelRate); });
    const auto t_drr = drr_value(truth);
    if (pair.predicted.empty()) {
      ++report.unpack_failures;
      row.t60 = compare(t_t60, std::nullopt);
      row.edt = compare(t_edt, std::nullopt);
      row.drr = compare(t_drr, std::nullopt);
      row.mse = std::numeric_limits<double>::quiet_NaN();
      report.rows.push_back(std::move(row));
      continue;
    }
    const std::span<const double> pred(pair.predicted);
    if (pred.size() != truth.size()) {
      throw StageError("eval", fmt::format("{}: predicted length {} differs from truth length {}", pair.ir,
                                           pred.size(), truth.size()));
    }
    row.t60 = compare(t_t60, try_metric([&] { return t60(pred, kModelRate); }));
    row.edt = compare(t_edt, try_metric([&] { return edt(pred, kModelRate); }));
    row.drr = compare(t_drr, drr_value(pred));
    row.mse = loss_mse(pred, truth);
    mse_sum += row.mse;
    ++mse_n;
    if (report.spectra.size() < spectra) {
      const auto pt = power_spectrum(truth, kModelRate);
      const auto pp = power_spectrum(pred, kModelRate);
      report.spectra.push_back({pair.ir, pt.frequencies, pt.db, pp.db});
    }
    report.rows.push_back(std::move(row));
  }
  summarize(report.rows, &EvaluationRow::t60, report.t60);
  summarize(report.rows, &EvaluationRow::drr, report.drr);
  summarize(report.rows, &EvaluationRow::edt, report.edt);
  report.mse = mse_n ? mse_sum / static_cast<double>(mse_n) : std::numeric_limits<double>::quiet_NaN();
  return report;
}

EvaluationReport evaluate_manifest(IrPipeline& pipeline, const fs::path& manifest, std::size_t spectra) {
  std::ifstream in(manifest);
  if (!in) throw StageError("eval", fmt::format("cannot open manifest '{}'", manifest.string()));
  struct Row {
    std::string mesh, ir;
    SourceListener position;
  };
  std::vector<Row> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      const auto s = j.at("source").get<std::array<double, 3>>();
      const auto l = j.at("listener").get<std::array<double, 3>>();
      rows.push_back({j.at("mesh").get<std::string>(), j.at("ir").get<std::string>(),
                      {Vec3(s[0], s[1], s[2]), Vec3(l[0], l[1], l[2])}});
    } catch (const json::exception& e) {
      throw StageError("eval", fmt::format("{}:{}: {}", manifest.string(), line_no, e.what()));
    }
  }
  if (rows.empty()) throw StageError("eval", fmt::format("manifest '{}' has no rows", manifest.string()));

  const auto root = manifest.parent_path();
  std::map<std::string, std::vector<std::size_t>> by_mesh;
  for (std::size_t i = 0; i < rows.size(); ++i) by_mesh[rows[i].mesh].push_back(i);

  std::vector<EvaluationPair> pairs(rows.size());
  for (const auto& [mesh, members] : by_mesh) {
    const auto scene = pipeline.prepare(root / mesh);
    std::vector<SourceListener> positions;
    for (auto i : members) positions.push_back(rows[i].position);
    const auto packed = pipeline.generate_packed(pipeline.embed(scene, positions));
    for (std::size_t k = 0; k < members.size(); ++k) {
      auto& pair = pairs[members[k]];
      pair.ir = rows[members[k]].ir;
      const auto truth = stage("truth", [&] {
        auto ir = read_wav(root / pair.ir);
        ir.form = IrForm::kPacked;
        return unpack(ir);
      });
      pair.truth = truth.samples;
      ImpulseResponse p;
      p.form = IrForm::kPacked;
      const auto col = packed.col(static_cast<Eigen::Index>(k));
      p.samples.assign(col.data(), col.data() + col.size());
      try {
        pair.predicted = unpack(p).samples;
      } catch (const CodecError&) {
        pair.predicted.clear();  // counted as an unpack failure
      }
    }
  }
  return evaluate(pairs, spectra);
}

json EvaluationReport::to_json() const {
  json j{{"rows_total", rows.size()},
         {"unpack_failures", unpack_failures},
         {"mse", mse},
         {"mse_e4", mse_e4()},
         {"t60_s", summary_json(t60)},
         {"drr_db", summary_json(drr)},
         {"edt_s", summary_json(edt)},
         {"rows", json::array()}};
  for (const auto& r : rows) {
    j["rows"].push_back({{"ir", r.ir},
                         {"t60", metric_json(r.t60)},
                         {"drr", metric_json(r.drr)},
                         {"edt", metric_json(r.edt)},
                         {"mse", std::isfinite(r.mse) ? json(r.mse) : json(nullptr)}});
  }
  return j;
}

std::string EvaluationReport::table() const {
  std::string out = fmt::format("{:<8} {:>12} {:>14} {:>10} {:>10}\n", "metric", "MAE", "mean rel err", "rows",
                                "excluded");
  auto line = [&](const char* name, const char* unit, const MetricSummary& s) {
    out += fmt::format("{:<8} {:>9.4f} {:<2} {:>13.2f}% {:>10} {:>9.1f}%\n", name, s.mae, unit,
                       100.0 * s.mean_relative_error, s.evaluated, 100.0 * s.exclusion_rate());
  };
  line("T60", "s", t60);
  line("DRR", "dB", drr);
  line("EDT", "s", edt);
  out += fmt::format("MSE x1e-4: {:.4f}   rows: {}   unpack failures: {}\n", mse_e4(), rows.size(), unpack_failures);
  return out;
}

void write_spectrum_overlay(const SpectrumOverlay& s, const fs::path& csv, const fs::path& svg) {
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  if (svg.has_parent_path()) fs::create_directories(svg.parent_path());
  {
    std::ofstream out(csv);
    if (!out) throw StageError("write", fmt::format("cannot write '{}'", csv.string()));
    out << "frequency_hz,truth_db,predicted_db\n";
    for (std::size_t i = 0; i < s.frequencies.size(); ++i) {
      out << fmt::format("{:.6g},{:.6g},{:.6g}\n", s.frequencies[i], s.truth_db[i], s.predicted_db[i]);
    }
  }
  constexpr double kW = 800, kH = 400, kMargin = 50;
  const double fmax = s.frequencies.empty() ? 1.0 : std::max(1.0, s.frequencies.back());
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* v : {&s.truth_db, &s.predicted_db}) {
    for (double x : *v) {
      if (std::isfinite(x)) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
    }
  }
  if (!(hi > lo)) {
    lo = -1;
    hi = 1;
  }
  auto polyline = [&](const std::vector<double>& db, const char* colour) {
    std::string pts;
    for (std::size_t i = 0; i < db.size(); ++i) {
      if (!std::isfinite(db[i])) continue;
      const double x = kMargin + (kW - 2 * kMargin) * s.frequencies[i] / fmax;
      const double y = kH - kMargin - (kH - 2 * kMargin) * (db[i] - lo) / (hi - lo);
      pts += fmt::format("{:.1f},{:.1f} ", x, y);
    }
    return fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1\" points=\"{}\"/>\n", colour, pts);
  };
  std::ofstream out(svg);
  if (!out) throw StageError("write", fmt::format("cannot write '{}'", svg.string()));
  out << fmt::format("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n", kW, kH);
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << fmt::format("<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n", kMargin, s.ir);
  out << fmt::format(
      "<rect x=\"{0}\" y=\"{0}\" width=\"{1}\" height=\"{2}\" fill=\"none\" stroke=\"black\"/>\n", kMargin,
      kW - 2 * kMargin, kH - 2 * kMargin);
  out << polyline(s.truth_db, "black") << polyline(s.predicted_db, "red");
  out << fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">0 Hz</text>\n", kMargin,
                     kH - kMargin + 16);
  out << fmt::format(
      "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"end\">{:.0f} Hz</text>\n",
      kW - kMargin, kH - kMargin + 16, fmax);
  out << fmt::format("<text x=\"5\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{:.0f} dB</text>\n",
                     kMargin + 4, hi);
  out << fmt::format("<text x=\"5\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{:.0f} dB</text>\n",
                     kH - kMargin, lo);
  out << fmt::format(
      "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"end\">"
      "<tspan fill=\"black\">truth</tspan> / <tspan fill=\"red\">predicted</tspan></text>\n",
      kW - kMargin);
  out << "</svg>\n";
}

// ---- benchmark ----

std::vector<SourceListener> random_positions(const PreparedScene& scene, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto point = [&] {
    Vec3 p;
    for (int k = 0; k < 3; ++k) p[k] = uniform(rng) * scene.extent[k];
    return Vec3(p - scene.offset);
  };
  std::vector<SourceListener> out(n);
  for (auto& sl : out) {
    sl.source = point();
    sl.listener = point();
  }
  return out;
}

BenchmarkReport bench(IrPipeline& pipeline, const fs::path& mesh_path, std::size_t n_irs,
                      const BenchmarkOptions& options) {
  if (n_irs == 0) throw StageError("bench", "n_irs must be at least 1");
  BenchmarkReport r;
  r.n_irs = n_irs;
  const auto mesh = stage("load", [&] { return load_obj(mesh_path); });
  for (std::size_t i = 0; i < options.warmup; ++i) pipeline.prepare(mesh);
  const auto scene = pipeline.prepare(mesh);
  r.simplify_seconds = scene.simplify_seconds;
  r.graph_seconds = scene.graph_seconds;
  r.encode_seconds = scene.encode_seconds;

  const auto embeddings = pipeline.embed(scene, random_positions(scene, n_irs, options.seed));
  auto per_ir = [&](Eigen::Index count, std::size_t batch) {
    const nn::Mat<float> e = embeddings.leftCols(count);
    for (std::size_t i = 0; i < options.warmup; ++i) pipeline.generate_packed(e.leftCols(std::min<Eigen::Index>(count, static_cast<Eigen::Index>(batch))), batch);
    const auto t0 = Clock::now();
    pipeline.generate_packed(e, batch);
    return seconds_since(t0) / static_cast<double>(count);
  };
  const auto n = static_cast<Eigen::Index>(n_irs);
  r.per_ir_batch1 = per_ir(std::min<Eigen::Index>(n, static_cast<Eigen::Index>(std::max<std::size_t>(1, options.batch1_irs))), 1);
  r.per_ir_batch128 = per_ir(n, 128);
  r.irs_per_second = r.per_ir_batch128 > 0 ? 1.0 / r.per_ir_batch128 : 0.0;
  return r;
}

json BenchmarkReport::to_json() const {
  return {{"n_irs", n_irs},
          {"simplify_seconds", simplify_seconds},
          {"graph_seconds", graph_seconds},
          {"encode_seconds", encode_seconds},
          {"per_ir_seconds_batch1", per_ir_batch1},
          {"per_ir_seconds_batch128", per_ir_batch128},
          {"irs_per_second", irs_per_second}};
}

std::string BenchmarkReport::table() const {
  std::string out;
  out += fmt::format("{:<28} {:>12.6f} s\n", "mesh simplification", simplify_seconds);
  out += fmt::format("{:<28} {:>12.6f} s\n", "mesh-to-graph", graph_seconds);
  out += fmt::format("{:<28} {:>12.6f} s  (once per scene)\n", "mesh encoder", encode_seconds);
  out += fmt::format("{:<28} {:>12.6f} s\n", "generator per IR, batch 1", per_ir_batch1);
  out += fmt::format("{:<28} {:>12.6f} s\n", "generator per IR, batch 128", per_ir_batch128);
  out += fmt::format("{:<28} {:>12.1f}\n", "IRs per second (batch 128)", irs_per_second);
  return out;
}

// ---- rendering ----

std::vector<double> convolve(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("convolve: empty input");
  const std::size_t len = a.size() + b.size() - 1;
  auto& fft = thread_fft(next_fast_size(len));
  std::vector<std::complex<double>> fa, fb;
  fft.forward(a, fa);
  fft.forward(b, fb);
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] *= fb[i];
  std::vector<double> out;
  fft.inverse(fa, out);
  out.resize(len);
  const double norm = 1.0 / static_cast<double>(fft.size());
  for (auto& v : out) v *= norm;
  return out;
}

RenderResult render_speech(const ImpulseResponse& speech, const ImpulseResponse& ir) {
  if (speech.samples.empty()) throw StageError("render", "speech signal is empty");
  if (ir.samples.empty()) throw StageError("render", "impulse response is empty");
  const auto r = ir.rate == speech.rate ? ir : stage("resample", [&] { return resample(ir, speech.rate); });
  RenderResult out;
  out.audio.rate = speech.rate;
  out.audio.samples = convolve(speech.samples, r.samples);
  double peak = 0;
  for (double v : out.audio.samples) peak = std::max(peak, std::abs(v));
  if (peak > 1.0) {
    out.scale = 0.99 / peak;
    for (auto& v : out.audio.samples) v *= out.scale;
  }
  return out;
}

}  // namespace roomir
