#pragma once

// End-to-end pipeline (mesh -> IR), evaluation, benchmarking and speech rendering.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "roomir/ir_codec.hpp"
#include "roomir/mesh.hpp"
#include "roomir/train.hpp"

namespace roomir {

// A failure inside one pipeline stage; what() is prefixed with the stage name.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& message);
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct SourceListener {
  Vec3 source;
  Vec3 listener;
};

// Everything about a mesh that does not depend on the source or listener.
struct PreparedScene {
  TriangleMesh simplified;  // normalized
  SceneGraph graph;
  Vec3 offset;              // translation applied by normalization
  Vec3 extent;              // normalized bounding-box maximum
  Eigen::VectorXd latent;   // 8 values
  double simplify_seconds = 0, graph_seconds = 0, encode_seconds = 0;
};

class IrPipeline {
 public:
  explicit IrPipeline(Model model);
  static IrPipeline from_checkpoint(const std::filesystem::path& checkpoint);

  // load -> simplify -> normalize -> graph -> encode.
  PreparedScene prepare(const std::filesystem::path& mesh_path);
  PreparedScene prepare(const TriangleMesh& mesh);

  // Embeddings (14 x n) for positions given in the original mesh coordinates.
  nn::Mat<float> embed(const PreparedScene& scene, const std::vector<SourceListener>& positions) const;

  // Packed generator outputs (4096 x n), computed in batches of at most `batch`.
  nn::Mat<float> generate_packed(const nn::Mat<float>& embeddings, std::size_t batch = 128);

  // Unpacked 3968-sample IRs at 16 kHz, one per position.
  std::vector<ImpulseResponse> generate(const PreparedScene& scene, const std::vector<SourceListener>& positions,
                                        std::size_t batch = 128);

  const Model& model() const { return model_; }
  std::size_t encode_calls() const { return encode_calls_; }
  std::size_t generate_calls() const { return generate_calls_; }  // IRs generated

 private:
  Model model_;
  std::size_t encode_calls_ = 0;
  std::size_t generate_calls_ = 0;
};

// Generates one WAV per position into out_dir (ir_0000.wav, ...). The mesh is
// prepared and encoded once.
std::vector<std::filesystem::path> generate_ir(IrPipeline& pipeline, const std::filesystem::path& mesh_path,
                                               const std::vector<SourceListener>& positions,
                                               const std::filesystem::path& out_dir);

// ---- evaluation ----

struct MetricErrors {
  std::optional<double> truth, predicted;
  std::optional<double> relative_error;  // |pred - truth| / |truth|
};

struct EvaluationRow {
  std::string ir;
  MetricErrors t60, drr, edt;
  double mse = 0;
};

struct MetricSummary {
  double mae = 0;                  // mean |pred - truth| over evaluated rows
  double mean_relative_error = 0;  // over rows with a nonzero truth
  std::size_t evaluated = 0;
  std::size_t excluded = 0;
  double exclusion_rate() const;
};

struct SpectrumOverlay {
  std::string ir;
  std::vector<double> frequencies, truth_db, predicted_db;
};

struct EvaluationReport {
  std::vector<EvaluationRow> rows;
  MetricSummary t60, drr, edt;  // seconds, dB, seconds
  double mse = 0;               // mean over rows with a prediction
  std::size_t unpack_failures = 0;
  std::vector<SpectrumOverlay> spectra;

  double mse_e4() const { return mse / 1e-4; }
  nlohmann::json to_json() const;
  std::string table() const;
};

struct EvaluationPair {
  std::string ir;
  std::vector<double> truth, predicted;  // unpacked, 16 kHz; predicted empty when unpacking failed
};

// Rows whose estimator fails (too little decay, infinite DRR) are excluded
// from that metric and counted.
EvaluationReport evaluate(const std::vector<EvaluationPair>& pairs, std::size_t spectra = 0);

// Generates a prediction for every manifest row (each mesh encoded once) and
// compares it with the unpacked ground truth.
EvaluationReport evaluate_manifest(IrPipeline& pipeline, const std::filesystem::path& manifest,
                                   std::size_t spectra = 0);

// CSV (frequency_hz,truth_db,predicted_db) plus an SVG line plot.
void write_spectrum_overlay(const SpectrumOverlay& s, const std::filesystem::path& csv,
                            const std::filesystem::path& svg);

// ---- benchmark ----

struct BenchmarkReport {
  std::size_t n_irs = 0;
  double simplify_seconds = 0;
  double graph_seconds = 0;
  double encode_seconds = 0;
  double per_ir_batch1 = 0;
  double per_ir_batch128 = 0;
  double irs_per_second = 0;  // at batch 128

  nlohmann::json to_json() const;
  std::string table() const;
};

struct BenchmarkOptions {
  std::size_t warmup = 1;        // untimed repetitions before each timed section
  std::size_t batch1_irs = 32;   // IRs timed one at a time (capped by n_irs)
  std::uint64_t seed = 1;        // random positions inside the scene
};

BenchmarkReport bench(IrPipeline& pipeline, const std::filesystem::path& mesh_path, std::size_t n_irs,
                      const BenchmarkOptions& options = {});

// Uniform random positions inside the normalized scene box, returned in the
// original mesh coordinates.
std::vector<SourceListener> random_positions(const PreparedScene& scene, std::size_t n, std::uint64_t seed);

// ---- rendering ----

struct RenderResult {
  ImpulseResponse audio;
  double scale = 1.0;  // applied peak normalization (1 when none)
};

// Full linear convolution of speech with the IR (resampled to the speech rate
// if needed), scaled to a 0.99 peak only when it would exceed 1.
RenderResult render_speech(const ImpulseResponse& speech, const ImpulseResponse& ir);

// Direct convolution through the FFT; length a + b - 1.
std::vector<double> convolve(std::span<const double> a, std::span<const double> b);

}  // namespace roomir
