#include "roomir/train.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <random>

#include <fmt/format.h>

#include "roomir/ir_codec.hpp"

namespace roomir {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// ---- variants and config ----

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoEdr: return "no-edr";
    case Variant::kDEdr: return "d-edr";
    case Variant::kUnprocessed: return "unprocessed";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  if (name == "full") return Variant::kFull;
  if (name == "no-edr") return Variant::kNoEdr;
  if (name == "d-edr") return Variant::kDEdr;
  if (name == "unprocessed") return Variant::kUnprocessed;
  throw ConfigError(fmt::format("unknown variant '{}' (expected full, no-edr, d-edr or unprocessed)", name));
}

TrainingConfig TrainingConfig::published() {
  TrainingConfig c;
  c.batch_size = 256;
  c.epochs = 150;
  return c;
}

TrainingConfig TrainingConfig::desk() { return TrainingConfig{}; }

void TrainingConfig::set_variant(Variant v) {
  variant = v;
  if (v == Variant::kNoEdr) lambda_edr = 0.0;
}

DiscriminatorConfig TrainingConfig::discriminator() const {
  DiscriminatorConfig d;
  if (variant == Variant::kDEdr) {
    d.input_channels = static_cast<int>(kNumBands);
    d.input_length = static_cast<int>(kCroppedLength);
  } else {
    d.input_length = generator.output_length();
  }
  return d;
}

double TrainingConfig::learning_rate_at(int epoch) const {
  return learning_rate * std::pow(lr_decay, epoch / lr_decay_epochs);
}

void TrainingConfig::validate() const {
  std::vector<std::string> errors;
  auto need = [&](bool ok, const char* msg) {
    if (!ok) errors.emplace_back(msg);
  };
  need(batch_size >= 1, "batch_size must be at least 1");
  need(std::isfinite(learning_rate) && learning_rate > 0, "learning_rate must be positive");
  need(lr_decay > 0 && lr_decay <= 1, "lr_decay must be in (0, 1]");
  need(lr_decay_epochs >= 1, "lr_decay_epochs must be at least 1");
  need(epochs >= 1, "epochs must be at least 1");
  need(g_steps_per_d_step >= 1, "g_steps_per_d_step must be at least 1");
  need(std::isfinite(lambda_edr) && lambda_edr >= 0, "lambda_edr must be non-negative");
  need(std::isfinite(lambda_mse) && lambda_mse >= 0, "lambda_mse must be non-negative");
  for (double w : band_weights) {
    if (!(w > 0) || !std::isfinite(w)) {
      errors.emplace_back("band_weights must all be positive");
      break;
    }
  }
  need(max_generator_steps >= 0, "max_generator_steps must be non-negative");
  need(checkpoint_every_epochs >= 0, "checkpoint_every_epochs must be non-negative");
  need(simplify_target >= 4, "simplify_target must be at least 4");
  need(variant != Variant::kNoEdr || lambda_edr == 0.0, "variant no-edr requires lambda_edr = 0");
  need(encoder.stages >= 1 && encoder.hidden >= 1 && encoder.readout_hidden >= 1,
       "encoder sizes must be positive");
  need(encoder.latent == static_cast<int>(kMeshLatentSize), "encoder.latent must be 8");
  need(encoder.keep_ratio > 0 && encoder.keep_ratio <= 1, "encoder.keep_ratio must be in (0, 1]");
  try {
    generator.validate();
    need(generator.embedding == static_cast<int>(kEmbeddingSize), "generator.embedding must be 14");
    need(generator.output_length() == static_cast<int>(kPackedLength), "generator output length must be 4096");
  } catch (const ModelError& e) {
    errors.emplace_back(e.what());
  }
  if (!errors.empty()) {
    std::string joined;
    for (const auto& e : errors) joined += "\n  - " + e;
    throw ConfigError("invalid training config:" + joined);
  }
}

json TrainingConfig::to_json() const {
  return {
      {"batch_size", batch_size},
      {"learning_rate", learning_rate},
      {"lr_decay", lr_decay},
      {"lr_decay_epochs", lr_decay_epochs},
      {"epochs", epochs},
      {"g_steps_per_d_step", g_steps_per_d_step},
      {"lambda_edr", lambda_edr},
      {"lambda_mse", lambda_mse},
      {"band_weights", band_weights},
      {"variant", to_string(variant)},
      {"seed", seed},
      {"max_generator_steps", max_generator_steps},
      {"checkpoint_every_epochs", checkpoint_every_epochs},
      {"simplify_target", simplify_target},
      {"encoder",
       {{"stages", encoder.stages},
        {"hidden", encoder.hidden},
        {"readout_hidden", encoder.readout_hidden},
        {"latent", encoder.latent},
        {"keep_ratio", encoder.keep_ratio}}},
      {"generator",
       {{"base_channels", generator.base_channels},
        {"base_length", generator.base_length},
        {"channels", generator.channels},
        {"kernel", generator.kernel},
        {"stride", generator.stride},
        {"leak", generator.leak},
        {"output_scale", generator.output_scale}}},
  };
}

namespace {

// Reads known keys of `j` into fields, collecting type errors and unknown keys.
class JsonReader {
 public:
  JsonReader(const json& j, std::string prefix, std::vector<std::string>& errors)
      : j_(j), prefix_(std::move(prefix)), errors_(errors) {
    if (!j_.is_object()) errors_.push_back(fmt::format("{}: expected an object", prefix_.empty() ? "config" : prefix_));
  }

  template <typename T>
  void read(const char* key, T& field) {
    seen_.emplace_back(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    try {
      field = j_.at(key).get<T>();
    } catch (const json::exception&) {
      errors_.push_back(fmt::format("{}{}: wrong type ({})", prefix_, key, j_.at(key).dump()));
    }
  }

  const json* child(const char* key) {
    seen_.emplace_back(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  void finish() {
    if (!j_.is_object()) return;
    for (const auto& [key, value] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) {
        errors_.push_back(fmt::format("{}{}: unknown key", prefix_, key));
      }
    }
  }

 private:
  const json& j_;
  std::string prefix_;
  std::vector<std::string>& errors_;
  std::vector<std::string> seen_;
};

}  // namespace

TrainingConfig TrainingConfig::from_json(const json& j) {
  TrainingConfig c;
  std::vector<std::string> errors;
  JsonReader r(j, "", errors);
  r.read("batch_size", c.batch_size);
  r.read("learning_rate", c.learning_rate);
  r.read("lr_decay", c.lr_decay);
  r.read("lr_decay_epochs", c.lr_decay_epochs);
  r.read("epochs", c.epochs);
  r.read("g_steps_per_d_step", c.g_steps_per_d_step);
  r.read("lambda_edr", c.lambda_edr);
  r.read("lambda_mse", c.lambda_mse);
  r.read("band_weights", c.band_weights);
  std::string variant = to_string(c.variant);
  r.read("variant", variant);
  try {
    c.variant = parse_variant(variant);
    if (c.variant == Variant::kNoEdr && !(j.is_object() && j.contains("lambda_edr"))) c.lambda_edr = 0.0;
  } catch (const ConfigError& e) {
    errors.emplace_back(e.what());
  }
  r.read("seed", c.seed);
  r.read("max_generator_steps", c.max_generator_steps);
  r.read("checkpoint_every_epochs", c.checkpoint_every_epochs);
  r.read("simplify_target", c.simplify_target);
  if (const json* e = r.child("encoder")) {
    JsonReader er(*e, "encoder.", errors);
    er.read("stages", c.encoder.stages);
    er.read("hidden", c.encoder.hidden);
    er.read("readout_hidden", c.encoder.readout_hidden);
    er.read("latent", c.encoder.latent);
    er.read("keep_ratio", c.encoder.keep_ratio);
    er.finish();
  }
  if (const json* g = r.child("generator")) {
    JsonReader gr(*g, "generator.", errors);
    gr.read("base_channels", c.generator.base_channels);
    gr.read("base_length", c.generator.base_length);
    gr.read("channels", c.generator.channels);
    gr.read("kernel", c.generator.kernel);
    gr.read("stride", c.generator.stride);
    gr.read("leak", c.generator.leak);
    gr.read("output_scale", c.generator.output_scale);
    gr.finish();
  }
  r.finish();
  if (!errors.empty()) {
    std::string joined;
    for (const auto& e : errors) joined += "\n  - " + e;
    throw ConfigError("invalid training config:" + joined);
  }
  return c;
}

// ---- model and checkpoints ----

Model Model::initialize(const TrainingConfig& cfg) {
  cfg.validate();
  Model m;
  m.config = cfg;
  m.encoder = EncoderParameters::random(cfg.encoder, cfg.seed);
  m.encoder.keep_ratio = cfg.encoder.keep_ratio;
  m.generator = Generator<float>(cfg.generator, cfg.seed + 1);
  m.discriminator = Discriminator<float>(cfg.discriminator(), cfg.seed + 2);
  return m;
}

std::vector<EncoderTensor> encoder_tensors(EncoderParameters& p) {
  std::vector<EncoderTensor> out;
  auto add = [&](std::string name, auto& m) {
    out.push_back({std::move(name), m.rows(), m.cols(), Eigen::Map<Eigen::VectorXd>(m.data(), m.size())});
  };
  for (std::size_t s = 0; s < p.gcn_weights.size(); ++s) {
    add(fmt::format("encoder.gcn{}.weight", s), p.gcn_weights[s]);
    add(fmt::format("encoder.gcn{}.pool", s), p.pool_vectors[s]);
  }
  add("encoder.fc1.weight", p.fc1_weight);
  add("encoder.fc1.bias", p.fc1_bias);
  add("encoder.fc2.weight", p.fc2_weight);
  add("encoder.fc2.bias", p.fc2_bias);
  return out;
}

namespace {

constexpr char kCheckpointMagic[8] = {'R', 'O', 'O', 'M', 'I', 'R', 'C', 'K'};

struct RawTensor {
  std::string name;
  Eigen::Index rows, cols;
  const char* dtype;
  char* data;
  std::size_t bytes;
};

std::vector<RawTensor> model_tensors(Model& m) {
  std::vector<RawTensor> out;
  for (auto& t : encoder_tensors(m.encoder)) {
    out.push_back({t.name, t.rows, t.cols, "f64", reinterpret_cast<char*>(t.data.data()),
                   static_cast<std::size_t>(t.data.size()) * sizeof(double)});
  }
  auto add_float = [&](std::vector<nn::Param<float>> params) {
    for (auto& p : params) {
      out.push_back({p.name, p.value->rows(), p.value->cols(), "f32", reinterpret_cast<char*>(p.value->data()),
                     static_cast<std::size_t>(p.value->size()) * sizeof(float)});
    }
  };
  add_float(m.generator.parameters());
  add_float(m.discriminator.parameters());
  return out;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  Model copy = model;
  const auto tensors = model_tensors(copy);
  json header{{"config", model.config.to_json()},
              {"epoch", model.epoch},
              {"generator_steps", model.generator_steps},
              {"tensors", json::array()}};
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    header["tensors"].push_back(
        {{"name", t.name}, {"shape", {t.rows, t.cols}}, {"dtype", t.dtype}, {"offset", offset}, {"bytes", t.bytes}});
    offset += t.bytes;
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw TrainingError(fmt::format("cannot write checkpoint '{}'", path.string()));
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t length = text.size();
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&length), sizeof length);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) out.write(t.data, static_cast<std::streamsize>(t.bytes));
  if (!out) throw TrainingError(fmt::format("failed writing checkpoint '{}'", path.string()));
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TrainingError(fmt::format("cannot open checkpoint '{}'", path.string()));
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw TrainingError(fmt::format("'{}' is not a roomir checkpoint", path.string()));
  }
  if (version != kCheckpointVersion) {
    throw TrainingError(fmt::format("'{}': unsupported checkpoint version {}", path.string(), version));
  }
  if (length > (std::uint64_t{1} << 30)) throw TrainingError(fmt::format("'{}': corrupt header", path.string()));
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  const auto data_start = in.tellg();
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw TrainingError(fmt::format("'{}': bad header: {}", path.string(), e.what()));
  }
  Model m = Model::initialize(TrainingConfig::from_json(header.at("config")));
  m.epoch = header.at("epoch").get<int>();
  m.generator_steps = header.at("generator_steps").get<long>();
  std::map<std::string, json> listed;
  for (const auto& t : header.at("tensors")) listed[t.at("name").get<std::string>()] = t;
  for (auto& t : model_tensors(m)) {
    const auto it = listed.find(t.name);
    if (it == listed.end()) throw TrainingError(fmt::format("'{}': missing tensor {}", path.string(), t.name));
    const auto& entry = it->second;
    const auto shape = entry.at("shape").get<std::vector<Eigen::Index>>();
    if (shape != std::vector<Eigen::Index>{t.rows, t.cols} || entry.at("dtype").get<std::string>() != t.dtype) {
      throw TrainingError(fmt::format("'{}': tensor {} has the wrong shape or type", path.string(), t.name));
    }
    in.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    in.read(t.data, static_cast<std::streamsize>(t.bytes));
    if (!in) throw TrainingError(fmt::format("'{}': truncated tensor {}", path.string(), t.name));
  }
  m.encoder.validate();
  m.generator.validate();
  m.discriminator.validate();
  return m;
}

// ---- training set ----

TrainingSet load_training_set(const std::filesystem::path& manifest, const TrainingConfig& cfg) {
  std::ifstream in(manifest);
  if (!in) throw TrainingError(fmt::format("cannot open manifest '{}'", manifest.string()));
  const auto root = manifest.parent_path();
  TrainingSet set;
  std::map<std::string, std::size_t> scene_index;
  std::vector<TriangleMesh> simplified;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = fmt::format("{}:{}", manifest.string(), line_no);
    json row;
    try {
      row = json::parse(line);
    } catch (const json::exception& e) {
      throw TrainingError(fmt::format("{}: {}", where, e.what()));
    }
    for (const char* key : {"mesh", "source", "listener", "ir"}) {
      if (!row.contains(key)) throw TrainingError(fmt::format("{}: missing '{}'", where, key));
    }
    const auto mesh_name = row["mesh"].get<std::string>();
    const auto source = row["source"].get<std::array<double, 3>>();
    const auto listener = row["listener"].get<std::array<double, 3>>();
    const Vec3 src(source[0], source[1], source[2]), lst(listener[0], listener[1], listener[2]);

    auto [it, fresh] = scene_index.try_emplace(mesh_name, set.scenes.size());
    if (fresh) {
      const auto mesh = load_obj(root / mesh_name);
      simplified.push_back(simplify_mesh(mesh, cfg.simplify_target).mesh);
      const auto normalized = normalize_scene(simplified.back(), src, lst);
      set.scenes.push_back({mesh_name, mesh_to_graph(normalized.mesh), normalized.offset});
    }
    const auto normalized = normalize_scene(simplified[it->second], src, lst);

    TrainingExample ex;
    ex.scene = it->second;
    ex.source = normalized.source;
    ex.listener = normalized.listener;
    ex.ir = row["ir"].get<std::string>();
    auto ir = read_wav(root / ex.ir);
    if (ir.rate != kModelRate || ir.samples.size() != kPackedLength) {
      throw TrainingError(fmt::format("{}: '{}' is not a packed {}-sample {} Hz IR", where, ex.ir, kPackedLength,
                                      kModelRate));
    }
    if (cfg.variant == Variant::kUnprocessed) {
      ir.form = IrForm::kPacked;
      ex.target = unpack(ir).samples;
      ex.target.resize(kPackedLength, 0.0);
    } else {
      ex.target = std::move(ir.samples);
    }
    set.examples.push_back(std::move(ex));
  }
  if (set.examples.empty()) throw TrainingError(fmt::format("manifest '{}' has no rows", manifest.string()));
  return set;
}

// ---- trainer ----

struct Trainer::Batch {
  std::vector<std::size_t> rows;
  std::vector<std::size_t> scenes;      // distinct scenes, first-appearance order
  std::vector<std::size_t> scene_slot;  // per row, index into scenes
  std::vector<EncoderTrace> traces;
  std::vector<Eigen::VectorXd> d_latent;  // per distinct scene
  nn::Mat<float> embeddings;              // 14 x B
  nn::Mat<float> real;                    // discriminator input for the targets
};

Trainer::Trainer(TrainingConfig cfg, TrainingSet data) : Trainer(Model::initialize(cfg), std::move(data)) {}

Trainer::Trainer(Model model, TrainingSet data) : model_(std::move(model)), data_(std::move(data)) {
  model_.config.validate();
  edr_cfg_.band_weights = model_.config.band_weights;
  g_opt_ = nn::RmsProp<float>(model_.generator.parameters());
  d_opt_ = nn::RmsProp<float>(model_.discriminator.parameters());
  for (auto& t : encoder_tensors(model_.encoder)) enc_square_avg_.push_back(Eigen::VectorXd::Zero(t.data.size()));
  truth_edr_cache_.resize(data_.examples.size());
  truth_feature_cache_.resize(data_.examples.size());
}

std::vector<std::size_t> Trainer::epoch_order(int epoch) const {
  std::vector<std::size_t> order(data_.examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // Fisher-Yates with raw engine output so the order is the same on every
  // standard library.
  std::mt19937_64 rng(model_.config.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

const Eigen::MatrixXd& Trainer::truth_edr(std::size_t row) {
  auto& slot = truth_edr_cache_[row];
  if (!slot) slot = loss_edr_target(data_.examples[row].target, edr_cfg_);
  return *slot;
}

const EdrFeatures& Trainer::truth_features(std::size_t row) {
  auto& slot = truth_feature_cache_[row];
  if (!slot) slot = edr_features(std::span<const double>(data_.examples[row].target).first(kCroppedLength));
  return *slot;
}

Trainer::Batch Trainer::make_batch(const std::vector<std::size_t>& rows) {
  if (rows.empty()) throw TrainingError("empty batch");
  Batch batch;
  batch.rows = rows;
  const auto n = static_cast<Eigen::Index>(rows.size());
  std::vector<Eigen::VectorXd> latents;
  for (std::size_t row : rows) {
    if (row >= data_.examples.size()) throw TrainingError(fmt::format("row {} out of range", row));
    const std::size_t scene = data_.examples[row].scene;
    const auto it = std::find(batch.scenes.begin(), batch.scenes.end(), scene);
    if (it != batch.scenes.end()) {
      batch.scene_slot.push_back(static_cast<std::size_t>(it - batch.scenes.begin()));
      continue;
    }
    batch.scene_slot.push_back(batch.scenes.size());
    batch.scenes.push_back(scene);
    batch.traces.emplace_back();
    latents.push_back(encode_mesh(data_.scenes[scene].graph, model_.encoder, batch.traces.back()));
    batch.d_latent.push_back(Eigen::VectorXd::Zero(latents.back().size()));
    ++encode_calls_;
  }
  batch.embeddings.resize(static_cast<Eigen::Index>(kEmbeddingSize), n);
  for (Eigen::Index b = 0; b < n; ++b) {
    const auto& ex = data_.examples[rows[static_cast<std::size_t>(b)]];
    const auto& latent = latents[batch.scene_slot[static_cast<std::size_t>(b)]];
    const auto e = build_embedding(std::span<const double>(latent.data(), static_cast<std::size_t>(latent.size())),
                                   std::span<const double>(ex.source.data(), 3),
                                   std::span<const double>(ex.listener.data(), 3));
    for (std::size_t i = 0; i < kEmbeddingSize; ++i) batch.embeddings(static_cast<Eigen::Index>(i), b) = static_cast<float>(e.values[i]);
  }
  if (model_.config.variant == Variant::kDEdr) {
    batch.real.resize(static_cast<Eigen::Index>(kNumBands), n * static_cast<Eigen::Index>(kCroppedLength));
    for (Eigen::Index b = 0; b < n; ++b) {
      batch.real.middleCols(b * kCroppedLength, kCroppedLength) =
          truth_features(rows[static_cast<std::size_t>(b)]).features.cast<float>();
    }
  } else {
    batch.real.resize(1, n * static_cast<Eigen::Index>(kPackedLength));
    for (Eigen::Index b = 0; b < n; ++b) {
      const auto& t = data_.examples[rows[static_cast<std::size_t>(b)]].target;
      for (std::size_t i = 0; i < kPackedLength; ++i) {
        batch.real(0, b * static_cast<Eigen::Index>(kPackedLength) + static_cast<Eigen::Index>(i)) = static_cast<float>(t[i]);
      }
    }
  }
  return batch;
}

nn::Mat<float> Trainer::discriminator_input(Batch& batch, const nn::Mat<float>& generated,
                                            std::vector<EdrFeatures>* features) {
  const auto n = generated.cols();
  if (model_.config.variant != Variant::kDEdr) {
    return Eigen::Map<const nn::Mat<float>>(generated.data(), 1, generated.size());
  }
  nn::Mat<float> x(static_cast<Eigen::Index>(kNumBands), n * static_cast<Eigen::Index>(kCroppedLength));
  for (Eigen::Index b = 0; b < n; ++b) {
    const Eigen::VectorXd body = generated.col(b).head(kCroppedLength).cast<double>();
    auto f = edr_features(std::span<const double>(body.data(), kCroppedLength));
    x.middleCols(b * kCroppedLength, kCroppedLength) = f.features.cast<float>();
    if (features) features->push_back(std::move(f));
  }
  (void)batch;
  return x;
}

GeneratorStepStats Trainer::generator_step(Batch& batch, bool include_edr, bool update) {
  const auto& cfg = model_.config;
  const auto n = static_cast<Eigen::Index>(batch.rows.size());
  const double inv_n = 1.0 / static_cast<double>(n);
  auto& g = model_.generator;
  auto& d = model_.discriminator;
  GeneratorStepStats stats;

  g.zero_grad();
  const nn::Mat<float> out = g.forward(batch.embeddings);
  std::vector<EdrFeatures> features;
  const nn::Mat<float> fake = discriminator_input(batch, out, &features);
  const auto logits = d.forward(fake, batch.embeddings);
  const auto adv = loss_cgan_from_logits(std::vector<double>(logits.begin(), logits.end()));
  stats.cgan = adv.value;
  const auto d_in = d.backward(std::vector<float>(adv.d_logits.begin(), adv.d_logits.end()), false);

  Eigen::MatrixXd d_out(out.rows(), n);
  if (cfg.variant == Variant::kDEdr) {
    d_out.setZero();
    for (Eigen::Index b = 0; b < n; ++b) {
      const Eigen::VectorXd body = out.col(b).head(kCroppedLength).cast<double>();
      const Eigen::MatrixXd df = d_in.input.middleCols(b * kCroppedLength, kCroppedLength).cast<double>();
      const auto grad = edr_features_backward(std::span<const double>(body.data(), kCroppedLength),
                                              features[static_cast<std::size_t>(b)], df);
      d_out.col(b).head(kCroppedLength) = Eigen::Map<const Eigen::VectorXd>(grad.data(), kCroppedLength);
    }
  } else {
    d_out = Eigen::Map<const nn::Mat<float>>(d_in.input.data(), out.rows(), n).cast<double>();
  }

  const bool edr_grad = include_edr && cfg.lambda_edr != 0.0;
  double edr_sq = 0.0;
  for (Eigen::Index b = 0; b < n; ++b) {
    const auto row = batch.rows[static_cast<std::size_t>(b)];
    const Eigen::VectorXd gen = out.col(b).cast<double>();
    const std::span<const double> gs(gen.data(), static_cast<std::size_t>(gen.size()));
    const auto& target = data_.examples[row].target;
    const auto mse = loss_mse_with_grad(gs, target);
    stats.mse += mse.value * inv_n;
    for (Eigen::Index i = 0; i < d_out.rows(); ++i) d_out(i, b) += cfg.lambda_mse * mse.grad[static_cast<std::size_t>(i)] * inv_n;
    if (edr_grad) {
      const auto edr = loss_edr_with_grad(gs, truth_edr(row), edr_cfg_);
      stats.edr += edr.value * inv_n;
      for (Eigen::Index i = 0; i < d_out.rows(); ++i) {
        const double v = cfg.lambda_edr * edr.grad[static_cast<std::size_t>(i)] * inv_n;
        d_out(i, b) += v;
        edr_sq += v * v;
      }
    } else {
      stats.edr += loss_edr(gs, truth_edr(row), edr_cfg_) * inv_n;
    }
  }
  stats.edr_grad_norm = std::sqrt(edr_sq);
  stats.total = loss_generator(stats.cgan, stats.edr, stats.mse, include_edr ? cfg.lambda_edr : 0.0, cfg.lambda_mse);

  const nn::Mat<float> d_embed = g.backward(d_out.cast<float>()) + d_in.embeddings;
  for (Eigen::Index b = 0; b < n; ++b) {
    batch.d_latent[batch.scene_slot[static_cast<std::size_t>(b)]] +=
        d_embed.col(b).head(static_cast<Eigen::Index>(kMeshLatentSize)).cast<double>();
  }
  if (!out.allFinite()) stats.mse = std::numeric_limits<double>::quiet_NaN();
  if (update) {
    check_finite(batch, stats, std::nullopt);
    g_opt_.step(cfg.learning_rate_at(model_.epoch));
  }
  return stats;
}

double Trainer::discriminator_update(Batch& batch, double lr, bool update) {
  const auto n = static_cast<Eigen::Index>(batch.rows.size());
  auto& d = model_.discriminator;
  const nn::Mat<float> out = model_.generator.forward(batch.embeddings);
  const nn::Mat<float> fake = discriminator_input(batch, out, nullptr);
  nn::Mat<float> input(fake.rows(), 2 * fake.cols());
  input << batch.real, fake;
  nn::Mat<float> embeddings(batch.embeddings.rows(), 2 * n);
  embeddings << batch.embeddings, batch.embeddings;
  d.zero_grad();
  const auto logits = d.forward(input, embeddings);
  const std::vector<double> real(logits.begin(), logits.begin() + n), fake_logits(logits.begin() + n, logits.end());
  const auto loss = loss_discriminator_from_logits(real, fake_logits);
  if (update && std::isfinite(loss.value)) {
    std::vector<float> grad(loss.d_real_logits.begin(), loss.d_real_logits.end());
    grad.insert(grad.end(), loss.d_fake_logits.begin(), loss.d_fake_logits.end());
    d.backward(grad, true);
    d_opt_.step(lr);
  }
  return loss.value;
}

void Trainer::apply_encoder_update(Batch& batch, double lr) {
  auto grads = model_.encoder.zeros_like();
  for (std::size_t s = 0; s < batch.scenes.size(); ++s) {
    encode_mesh_backward(batch.traces[s], model_.encoder, batch.d_latent[s], grads);
  }
  auto params = encoder_tensors(model_.encoder);
  const auto grad_views = encoder_tensors(grads);
  const nn::RmsPropConfig rms;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& v = enc_square_avg_[i];
    const auto& g = grad_views[i].data;
    v.array() = rms.alpha * v.array() + (1.0 - rms.alpha) * g.array().square();
    params[i].data.array() -= lr * g.array() / (v.array().sqrt() + rms.eps);
  }
}

void Trainer::check_finite(const Batch& batch, const GeneratorStepStats& s, const std::optional<double>& d_loss) {
  const bool ok = std::isfinite(s.cgan) && std::isfinite(s.edr) && std::isfinite(s.mse) && std::isfinite(s.total) &&
                  (!d_loss || std::isfinite(*d_loss));
  if (ok) return;
  json dump{{"epoch", model_.epoch},
            {"generator_steps", model_.generator_steps},
            {"losses", {{"L_CGAN", s.cgan}, {"L_EDR", s.edr}, {"L_MSE", s.mse}, {"L_G", s.total}}},
            {"rows", json::array()}};
  if (d_loss) dump["losses"]["L_D"] = *d_loss;
  for (std::size_t b = 0; b < batch.rows.size(); ++b) {
    const auto& ex = data_.examples[batch.rows[b]];
    std::vector<float> emb(batch.embeddings.col(static_cast<Eigen::Index>(b)).data(),
                           batch.embeddings.col(static_cast<Eigen::Index>(b)).data() + batch.embeddings.rows());
    dump["rows"].push_back({{"row", batch.rows[b]},
                            {"mesh", data_.scenes[ex.scene].mesh},
                            {"ir", ex.ir},
                            {"embedding", emb}});
  }
  const auto dir = dump_dir_.value_or(std::filesystem::temp_directory_path());
  std::filesystem::create_directories(dir);
  const auto path = dir / "nan_dump.json";
  std::ofstream(path) << dump.dump(2) << '\n';
  throw TrainingError(fmt::format("non-finite loss at generator step {}; batch dumped to {}", model_.generator_steps,
                                  path.string()));
}

std::vector<LossRecord> Trainer::train_cycle(const std::vector<std::size_t>& rows, int epoch) {
  const auto& cfg = model_.config;
  model_.epoch = epoch;
  const double lr = cfg.learning_rate_at(epoch);
  Batch batch = make_batch(rows);
  std::vector<LossRecord> records;
  for (int k = 0; k < cfg.g_steps_per_d_step; ++k) {
    if (cfg.max_generator_steps > 0 && model_.generator_steps >= cfg.max_generator_steps) break;
    const auto s = generator_step(batch, true, true);
    ++model_.generator_steps;
    records.push_back({epoch, model_.generator_steps, s.cgan, s.edr, s.mse, s.total, 0.0, lr});
  }
  const double d_loss = discriminator_update(batch, lr, true);
  if (!std::isfinite(d_loss)) check_finite(batch, {}, d_loss);
  for (auto& r : records) r.discriminator = d_loss;
  apply_encoder_update(batch, lr);
  return records;
}

Trainer::GradientProbe Trainer::probe_generator(const std::vector<std::size_t>& rows, bool include_edr) {
  Batch batch = make_batch(rows);
  GradientProbe probe;
  probe.stats = generator_step(batch, include_edr, false);
  for (const auto& p : model_.generator.parameters()) probe.generator_grads.push_back(*p.grad);
  return probe;
}

double Trainer::discriminator_objective(const std::vector<std::size_t>& rows) {
  Batch batch = make_batch(rows);
  return discriminator_update(batch, 0.0, false);
}

void Trainer::discriminator_step(const std::vector<std::size_t>& rows, double lr) {
  Batch batch = make_batch(rows);
  discriminator_update(batch, lr, true);
}

namespace {

void write_csv_header(std::ostream& out) { out << "epoch,step,L_CGAN,L_EDR,L_MSE,L_G,L_D,lr\n"; }

void write_csv_row(std::ostream& out, const LossRecord& r) {
  out << fmt::format("{},{},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g}\n", r.epoch, r.step, r.cgan, r.edr, r.mse,
                     r.generator, r.discriminator, r.lr);
}

}  // namespace

void write_loss_csv(const std::vector<LossRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw TrainingError(fmt::format("cannot write '{}'", path.string()));
  write_csv_header(out);
  for (const auto& r : records) write_csv_row(out, r);
}

std::vector<LossRecord> Trainer::run(const std::optional<std::filesystem::path>& out_dir,
                                     const std::function<void(const LossRecord&)>& on_step) {
  const auto& cfg = model_.config;
  std::ofstream csv;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    dump_dir_ = *out_dir;
    csv.open(*out_dir / "losses.csv");
    if (!csv) throw TrainingError(fmt::format("cannot write '{}'", (*out_dir / "losses.csv").string()));
    write_csv_header(csv);
  }
  auto capped = [&] { return cfg.max_generator_steps > 0 && model_.generator_steps >= cfg.max_generator_steps; };
  std::vector<LossRecord> all;
  for (int epoch = model_.epoch; epoch < cfg.epochs && !capped(); ++epoch) {
    const auto order = epoch_order(epoch);
    for (std::size_t start = 0; start < order.size() && !capped(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const auto records = train_cycle(std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                                order.begin() + static_cast<std::ptrdiff_t>(end)),
                                       epoch);
      for (const auto& r : records) {
        if (csv.is_open()) write_csv_row(csv, r);
        if (on_step) on_step(r);
        all.push_back(r);
      }
      if (csv.is_open()) csv.flush();
    }
    model_.epoch = epoch + 1;
    if (out_dir && cfg.checkpoint_every_epochs > 0 && model_.epoch % cfg.checkpoint_every_epochs == 0) {
      save_checkpoint(model_, *out_dir / fmt::format("checkpoint_epoch{:04d}.ckpt", model_.epoch));
    }
  }
  if (out_dir) save_checkpoint(model_, *out_dir / "final.ckpt");
  return all;
}

}  // namespace roomir
