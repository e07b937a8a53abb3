#pragma once

// Adversarial training of mesh encoder + generator + discriminator, model
// checkpoints and the training-set loader.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "roomir/cgan.hpp"
#include "roomir/encoder.hpp"
#include "roomir/mesh.hpp"

namespace roomir {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Variant { kFull, kNoEdr, kDEdr, kUnprocessed };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);  // full | no-edr | d-edr | unprocessed

struct TrainingConfig {
  std::size_t batch_size = 16;
  double learning_rate = 8e-5;
  double lr_decay = 0.85;
  int lr_decay_epochs = 7;
  int epochs = 200;
  int g_steps_per_d_step = 3;
  double lambda_edr = 1.0;
  double lambda_mse = 10.0;
  std::array<double, kNumBands> band_weights = kDefaultBandWeights;
  Variant variant = Variant::kFull;
  std::uint64_t seed = 1;
  long max_generator_steps = 0;     // 0: no cap
  int checkpoint_every_epochs = 0;  // 0: final checkpoint only
  std::size_t simplify_target = 2000;
  EncoderConfig encoder;
  GeneratorConfig generator;

  static TrainingConfig published();  // batch 256, 150 epochs
  static TrainingConfig desk();   // batch 16, 200 epochs

  // Switches the variant and the settings it implies (no-edr zeroes lambda_edr).
  void set_variant(Variant v);
  DiscriminatorConfig discriminator() const;
  double learning_rate_at(int epoch) const;

  // Lists every offending field in one ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are errors.
  static TrainingConfig from_json(const nlohmann::json& j);
};

struct Model {
  TrainingConfig config;
  EncoderParameters encoder;
  Generator<float> generator;
  Discriminator<float> discriminator;
  int epoch = 0;
  long generator_steps = 0;

  static Model initialize(const TrainingConfig& cfg);
};

// Layout: "ROOMIRCK", u32 version, u64 header bytes, JSON header, then raw
// little-endian tensor data at the offsets the header lists.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

struct SceneData {
  std::string mesh;  // as written in the manifest
  SceneGraph graph;  // simplified, normalized
  Vec3 offset;       // normalization translation
};

struct TrainingExample {
  std::size_t scene = 0;
  Vec3 source, listener;  // normalized coordinates
  std::string ir;
  std::vector<double> target;  // 4096 samples
};

struct TrainingSet {
  std::vector<SceneData> scenes;
  std::vector<TrainingExample> examples;
};

// Reads a JSON-lines manifest (mesh, source, listener, ir; paths relative to
// the manifest). Each mesh is simplified and graph-converted once.
TrainingSet load_training_set(const std::filesystem::path& manifest, const TrainingConfig& cfg);

// One row of the loss log.
struct LossRecord {
  int epoch = 0;
  long step = 0;
  double cgan = 0, edr = 0, mse = 0, generator = 0, discriminator = 0, lr = 0;
};

// Everything one generator step produced, for inspection.
struct GeneratorStepStats {
  double cgan = 0, edr = 0, mse = 0, total = 0;
  double edr_grad_norm = 0;  // norm of the EDR-term gradient at the generator output
};

class Trainer {
 public:
  Trainer(TrainingConfig cfg, TrainingSet data);
  Trainer(Model model, TrainingSet data);
  // The optimizers point into the model, so a trainer stays where it is built.
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  // Runs until the epoch budget or max_generator_steps. With an output
  // directory, writes losses.csv and checkpoints there.
  std::vector<LossRecord> run(const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                              const std::function<void(const LossRecord&)>& on_step = {});

  // One cycle (g_steps_per_d_step generator steps, one discriminator step) on
  // the given rows. Returns one record per generator step.
  std::vector<LossRecord> train_cycle(const std::vector<std::size_t>& rows, int epoch);

  // Generator gradients of a single step on `rows`, with optional terms
  // dropped. Parameters are left unchanged.
  struct GradientProbe {
    GeneratorStepStats stats;
    std::vector<nn::Mat<float>> generator_grads;
  };
  GradientProbe probe_generator(const std::vector<std::size_t>& rows, bool include_edr = true);

  // L_D on `rows` with the current parameters.
  double discriminator_objective(const std::vector<std::size_t>& rows);
  // A single discriminator update on `rows`.
  void discriminator_step(const std::vector<std::size_t>& rows, double lr);

  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const TrainingSet& data() const { return data_; }
  std::size_t encode_calls() const { return encode_calls_; }
  std::vector<std::size_t> epoch_order(int epoch) const;

 private:
  struct Batch;
  Batch make_batch(const std::vector<std::size_t>& rows);
  GeneratorStepStats generator_step(Batch& batch, bool include_edr, bool update);
  double discriminator_update(Batch& batch, double lr, bool update);
  nn::Mat<float> discriminator_input(Batch& batch, const nn::Mat<float>& generated,
                                     std::vector<EdrFeatures>* features);
  const Eigen::MatrixXd& truth_edr(std::size_t row);
  const EdrFeatures& truth_features(std::size_t row);
  void apply_encoder_update(Batch& batch, double lr);
  void check_finite(const Batch& batch, const GeneratorStepStats& s, const std::optional<double>& d_loss);

  Model model_;
  TrainingSet data_;
  EdrLossConfig edr_cfg_;
  nn::RmsProp<float> g_opt_, d_opt_;
  std::vector<Eigen::VectorXd> enc_square_avg_;
  std::vector<std::optional<Eigen::MatrixXd>> truth_edr_cache_;
  std::vector<std::optional<EdrFeatures>> truth_feature_cache_;
  std::size_t encode_calls_ = 0;
  std::optional<std::filesystem::path> dump_dir_;
};

// Loss log CSV with header epoch,step,L_CGAN,L_EDR,L_MSE,L_G,L_D,lr.
void write_loss_csv(const std::vector<LossRecord>& records, const std::filesystem::path& path);

// Flat views over every encoder tensor, in a fixed order.
struct EncoderTensor {
  std::string name;
  Eigen::Index rows, cols;
  Eigen::Map<Eigen::VectorXd> data;
};
std::vector<EncoderTensor> encoder_tensors(EncoderParameters& p);

}  // namespace roomir
