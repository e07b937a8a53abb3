// roomir command-line tool: simplify, dataset, train, generate, eval, bench, render.
//
// Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>
#include <spdlog/sinks/stdout_color_sinks.h>

#include "roomir/harness.hpp"
#include "roomir/shoebox.hpp"
#include "roomir/train.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;
using namespace roomir;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitRuntime = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- config files and flag overrides ----

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError(fmt::format("cannot open config '{}'", path.string()));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

// A file may hold the section directly or under {"<section>": {...}}.
json config_section(const std::string& file, const char* section) {
  if (file.empty()) return json::object();
  const auto j = read_json_file(file);
  if (!j.is_object()) throw UsageError(fmt::format("{}: expected a JSON object", file));
  if (j.contains(section)) return j.at(section);
  return j;
}

// Flag text to JSON: JSON literals pass through, "1,2,3" becomes an array,
// anything else is a string.
json parse_flag_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
  }
  if (text.find(',') != std::string::npos) {
    try {
      return json::parse("[" + text + "]");
    } catch (const json::exception&) {
    }
  }
  return text;
}

std::string dashed(std::string key) {
  for (auto& c : key) {
    if (c == '_') c = '-';
  }
  return key;
}

// Registers one string flag per key of `defaults` (nested objects as
// section.key), under both the underscore and the dashed spelling.
class Overrides {
 public:
  Overrides(CLI::App* app, const json& defaults, const std::vector<std::string>& skip = {}) {
    add(app, defaults, "", skip);
  }

  // Writes every flag that was given into `target`.
  void apply(json& target) const {
    for (const auto& [path, value] : values_) {
      if (value.empty()) continue;
      json* node = &target;
      std::size_t start = 0;
      for (std::size_t dot; (dot = path.find('.', start)) != std::string::npos; start = dot + 1) {
        node = &(*node)[path.substr(start, dot - start)];
      }
      (*node)[path.substr(start)] = parse_flag_value(value);
    }
  }

  bool given(const std::string& key) const {
    const auto it = values_.find(key);
    return it != values_.end() && !it->second.empty();
  }

 private:
  void add(CLI::App* app, const json& defaults, const std::string& prefix, const std::vector<std::string>& skip) {
    for (const auto& [key, value] : defaults.items()) {
      const auto path = prefix + key;
      if (std::find(skip.begin(), skip.end(), path) != skip.end()) continue;
      if (value.is_object()) {
        add(app, value, path + ".", skip);
        continue;
      }
      auto names = "--" + path;
      if (dashed(path) != path) names += ",--" + dashed(path);
      app->add_option(names, values_[path], fmt::format("override (default {})", value.dump()));
    }
  }

  std::map<std::string, std::string> values_;
};

// ---- dataset options as JSON ----

json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

json dataset_json(const DatasetOptions& o) {
  return {{"scenes", o.scenes},
          {"irs_per_scene", o.irs_per_scene},
          {"seed", o.seed},
          {"dims_min", vec_json(o.dims_min)},
          {"dims_max", vec_json(o.dims_max)},
          {"absorption_min", o.absorption_min},
          {"absorption_max", o.absorption_max},
          {"max_furniture", o.max_furniture},
          {"min_separation", o.min_separation},
          {"wall_margin", o.wall_margin},
          {"val_fraction", o.val_fraction},
          {"max_order", o.image.max_order},
          {"rate", o.image.rate},
          {"duration", o.image.duration}};
}

DatasetOptions dataset_from_json(const json& j) {
  DatasetOptions o;
  const auto known = dataset_json(o);
  std::vector<std::string> errors;
  if (!j.is_object()) throw ConfigError("invalid dataset config:\n  - expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) errors.push_back(fmt::format("{}: unknown key", key));
  }
  auto read = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const json::exception&) {
      errors.push_back(fmt::format("{}: wrong type ({})", key, j.at(key).dump()));
    }
  };
  auto read_vec = [&](const char* key, Vec3& field) {
    std::array<double, 3> v{field.x(), field.y(), field.z()};
    read(key, v);
    field = Vec3(v[0], v[1], v[2]);
  };
  read("scenes", o.scenes);
  read("irs_per_scene", o.irs_per_scene);
  read("seed", o.seed);
  read_vec("dims_min", o.dims_min);
  read_vec("dims_max", o.dims_max);
  read("absorption_min", o.absorption_min);
  read("absorption_max", o.absorption_max);
  read("max_furniture", o.max_furniture);
  read("min_separation", o.min_separation);
  read("wall_margin", o.wall_margin);
  read("val_fraction", o.val_fraction);
  read("max_order", o.image.max_order);
  read("rate", o.image.rate);
  read("duration", o.image.duration);
  if (o.scenes < 1) errors.emplace_back("scenes must be at least 1");
  if (o.irs_per_scene < 1) errors.emplace_back("irs_per_scene must be at least 1");
  if (!errors.empty()) {
    std::string joined;
    for (const auto& e : errors) joined += "\n  - " + e;
    throw ConfigError("invalid dataset config:" + joined);
  }
  return o;
}

// ---- small helpers ----

Vec3 parse_vec3(const std::string& text, const char* what) {
  std::array<double, 3> v{};
  std::size_t start = 0;
  for (int i = 0; i < 3; ++i) {
    const auto comma = text.find(',', start);
    if ((i < 2) != (comma != std::string::npos)) throw UsageError(fmt::format("{}: expected x,y,z", what));
    const auto part = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    char* end = nullptr;
    v[static_cast<std::size_t>(i)] = std::strtod(part.c_str(), &end);
    if (part.empty() || *end != '\0') throw UsageError(fmt::format("{}: '{}' is not a number", what, part));
    start = comma + 1;
  }
  return Vec3(v[0], v[1], v[2]);
}

void write_json(const json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << j.dump(2) << '\n';
}

// ---- subcommands ----

struct SimplifyArgs {
  std::string input, output;
  std::size_t target = 2000;
};

void run_simplify(const SimplifyArgs& a) {
  const auto mesh = load_obj(a.input);
  const auto result = simplify_mesh(mesh, a.target);
  const auto out = a.output.empty() ? fs::path(a.input).replace_extension(".simplified.obj") : fs::path(a.output);
  write_obj(result.mesh, out);
  spdlog::info("{} faces -> {} faces{}", mesh.faces.size(), result.mesh.faces.size(),
               result.target_reached ? "" : " (target not reached)");
  std::cout << out.string() << '\n';
}

struct DatasetArgs {
  std::string config, out;
};

void run_dataset(const DatasetArgs& a, const Overrides& flags) {
  auto j = config_section(a.config, "dataset");
  flags.apply(j);
  const auto opt = dataset_from_json(j);
  const auto summary = build_dataset(opt, a.out);
  write_json(dataset_json(opt), fs::path(a.out) / "dataset_config.json");
  spdlog::info("{} rows written", summary.rows);
  std::cout << summary.manifest.string() << '\n';
}

struct TrainArgs {
  std::string config, manifest, out, resume;
};

TrainingConfig training_config(const std::string& file, const Overrides& flags) {
  auto j = config_section(file, "training");
  flags.apply(j);
  // --variant no-edr implies lambda_edr = 0 unless that is also given.
  if (flags.given("variant") && j.value("variant", "") == "no-edr" && !flags.given("lambda_edr")) {
    j["lambda_edr"] = 0.0;
  }
  auto cfg = TrainingConfig::from_json(j);
  cfg.validate();
  return cfg;
}

void run_train(const TrainArgs& a, const Overrides& flags) {
  auto cfg = training_config(a.config, flags);
  const fs::path out = a.out;
  fs::create_directories(out);
  write_json(cfg.to_json(), out / "config.json");
  spdlog::info("loading {}", a.manifest);
  auto data = load_training_set(a.manifest, cfg);
  spdlog::info("{} rows over {} scenes, variant {}", data.examples.size(), data.scenes.size(), to_string(cfg.variant));
  std::optional<Trainer> trainer;
  if (a.resume.empty()) {
    trainer.emplace(cfg, std::move(data));
  } else {
    auto model = load_checkpoint(a.resume);
    model.config = cfg;
    trainer.emplace(std::move(model), std::move(data));
  }
  int last_epoch = -1;
  trainer->run(out, [&](const LossRecord& r) {
    if (r.epoch == last_epoch) return;
    last_epoch = r.epoch;
    spdlog::info("epoch {} step {}: L_G {:.5f} L_CGAN {:.4f} L_EDR {:.5f} L_MSE {:.6f} L_D {:.4f} lr {:.3g}", r.epoch,
                 r.step, r.generator, r.cgan, r.edr, r.mse, r.discriminator, r.lr);
  });
  std::cout << (out / "final.ckpt").string() << '\n';
}

struct GenerateArgs {
  std::string mesh, checkpoint, out, positions;
  std::vector<std::string> sources, listeners;
};

std::vector<SourceListener> read_positions(const GenerateArgs& a) {
  std::vector<SourceListener> out;
  if (!a.positions.empty()) {
    const auto j = read_json_file(a.positions);
    try {
      for (const auto& p : j) {
        const auto s = p.at("source").get<std::array<double, 3>>();
        const auto l = p.at("listener").get<std::array<double, 3>>();
        out.push_back({Vec3(s[0], s[1], s[2]), Vec3(l[0], l[1], l[2])});
      }
    } catch (const json::exception& e) {
      throw UsageError(fmt::format("{}: {}", a.positions, e.what()));
    }
  }
  if (a.sources.size() != 1 && a.sources.size() != a.listeners.size()) {
    throw UsageError("give one --source for all listeners, or one per --listener");
  }
  for (std::size_t i = 0; i < a.listeners.size(); ++i) {
    out.push_back({parse_vec3(a.sources.size() == 1 ? a.sources[0] : a.sources[i], "--source"),
                   parse_vec3(a.listeners[i], "--listener")});
  }
  if (out.empty()) throw UsageError("no positions: use --source/--listener or --positions");
  return out;
}

void run_generate(const GenerateArgs& a) {
  const auto positions = read_positions(a);
  auto pipeline = IrPipeline::from_checkpoint(a.checkpoint);
  const auto files = generate_ir(pipeline, a.mesh, positions, a.out);
  spdlog::info("{} IRs, {} encode call(s)", files.size(), pipeline.encode_calls());
  for (const auto& f : files) std::cout << f.string() << '\n';
}

struct EvalArgs {
  std::string manifest, checkpoint, out;
  std::size_t spectra = 0;
};

void run_eval(const EvalArgs& a) {
  auto pipeline = IrPipeline::from_checkpoint(a.checkpoint);
  const auto report = evaluate_manifest(pipeline, a.manifest, a.spectra);
  const fs::path out = a.out;
  write_json(report.to_json(), out / "report.json");
  for (std::size_t i = 0; i < report.spectra.size(); ++i) {
    const auto stem = out / "spectra" / fmt::format("spectrum_{:03d}", i);
    write_spectrum_overlay(report.spectra[i], stem.string() + ".csv", stem.string() + ".svg");
  }
  std::cout << report.table();
}

struct BenchArgs {
  std::string mesh, checkpoint, out;
  std::size_t n_irs = 1024, warmup = 1, batch1 = 32;
  std::uint64_t seed = 1;
};

void run_bench(const BenchArgs& a) {
  auto pipeline = IrPipeline::from_checkpoint(a.checkpoint);
  BenchmarkOptions opt;
  opt.warmup = a.warmup;
  opt.batch1_irs = a.batch1;
  opt.seed = a.seed;
  const auto report = bench(pipeline, a.mesh, a.n_irs, opt);
  if (!a.out.empty()) write_json(report.to_json(), a.out);
  std::cout << report.table();
}

struct RenderArgs {
  std::string speech, ir, out;
};

void run_render(const RenderArgs& a) {
  const auto speech = read_wav(a.speech);
  auto ir = read_wav(a.ir);
  const auto result = render_speech(speech, ir);
  write_wav(result.audio, a.out);
  write_json({{"speech", a.speech},
              {"ir", a.ir},
              {"rate", result.audio.rate},
              {"samples", result.audio.samples.size()},
              {"scale", result.scale}},
             fs::path(a.out).replace_extension(".json"));
  std::cout << a.out << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("roomir"));
  spdlog::set_pattern("[%H:%M:%S] %v");

  CLI::App app{"roomir: mesh-conditioned room impulse response generation"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "debug logging");

  SimplifyArgs simplify;
  auto* sc = app.add_subcommand("simplify", "quadric edge-collapse simplification of an OBJ mesh");
  sc->add_option("input", simplify.input, "input OBJ")->required()->check(CLI::ExistingFile);
  sc->add_option("-o,--out", simplify.output, "output OBJ (default <input>.simplified.obj)");
  sc->add_option("--target", simplify.target, "face budget")->capture_default_str();

  DatasetArgs dataset;
  auto* dc = app.add_subcommand("dataset", "build a shoebox oracle corpus");
  dc->add_option("-c,--config", dataset.config, "JSON config (section \"dataset\")");
  dc->add_option("-o,--out", dataset.out, "output directory")->required();
  Overrides dataset_flags(dc, dataset_json(DatasetOptions{}));

  TrainArgs train;
  auto* tc = app.add_subcommand("train", "adversarial training from a manifest");
  tc->add_option("-c,--config", train.config, "JSON config (section \"training\")");
  tc->add_option("-m,--manifest", train.manifest, "training manifest (JSON lines)")->required()->check(CLI::ExistingFile);
  tc->add_option("-o,--out", train.out, "output directory for losses.csv and checkpoints")->required();
  tc->add_option("--resume", train.resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  Overrides train_flags(tc, TrainingConfig{}.to_json());

  GenerateArgs generate;
  auto* gc = app.add_subcommand("generate", "generate IRs for one mesh");
  gc->add_option("--mesh", generate.mesh, "scene OBJ")->required()->check(CLI::ExistingFile);
  gc->add_option("--checkpoint", generate.checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  gc->add_option("--source", generate.sources, "x,y,z (once, or once per listener)");
  gc->add_option("--listener", generate.listeners, "x,y,z (repeatable)");
  gc->add_option("--positions", generate.positions, "JSON list of {source, listener}")->check(CLI::ExistingFile);
  gc->add_option("-o,--out", generate.out, "output directory")->required();

  EvalArgs eval;
  auto* ec = app.add_subcommand("eval", "acoustic-metric evaluation against a manifest");
  ec->add_option("-m,--manifest", eval.manifest, "manifest (JSON lines)")->required()->check(CLI::ExistingFile);
  ec->add_option("--checkpoint", eval.checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  ec->add_option("-o,--out", eval.out, "directory for report.json and spectra")->required();
  ec->add_option("--spectra", eval.spectra, "number of power-spectrum overlays")->capture_default_str();

  BenchArgs bench_args;
  auto* bc = app.add_subcommand("bench", "stage timings and generation throughput");
  bc->add_option("--mesh", bench_args.mesh, "scene OBJ")->required()->check(CLI::ExistingFile);
  bc->add_option("--checkpoint", bench_args.checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  bc->add_option("-n,--n-irs", bench_args.n_irs, "IRs generated at batch 128")->capture_default_str()->check(
      CLI::PositiveNumber);
  bc->add_option("--warmup", bench_args.warmup, "untimed repetitions")->capture_default_str();
  bc->add_option("--batch1-irs", bench_args.batch1, "IRs timed one at a time")->capture_default_str();
  bc->add_option("--seed", bench_args.seed, "position seed")->capture_default_str();
  bc->add_option("-o,--out", bench_args.out, "JSON report path");

  RenderArgs render;
  auto* rc = app.add_subcommand("render", "convolve dry speech with an IR");
  rc->add_option("--speech", render.speech, "mono WAV")->required()->check(CLI::ExistingFile);
  rc->add_option("--ir", render.ir, "mono IR WAV")->required()->check(CLI::ExistingFile);
  rc->add_option("-o,--out", render.out, "output WAV (metadata beside it as .json)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  }
  if (verbose) spdlog::set_level(spdlog::level::debug);

  try {
    if (*sc) run_simplify(simplify);
    if (*dc) run_dataset(dataset, dataset_flags);
    if (*tc) run_train(train, train_flags);
    if (*gc) run_generate(generate);
    if (*ec) run_eval(eval);
    if (*bc) run_bench(bench_args);
    if (*rc) run_render(render);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kExitInvalid;
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return kExitInvalid;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitRuntime;
  }
  return kExitOk;
}
