#include "roomir/cgan.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/core.h>

namespace roomir {

namespace {

nn::ConvShape upsample_shape(int in, int out, int kernel, int stride) {
  // Padding and output padding chosen so the length grows by exactly `stride`.
  const int output_padding = (kernel - stride) % 2 == 0 ? 0 : 1;
  return {in, out, kernel, stride, (kernel - stride + output_padding) / 2, output_padding};
}

template <typename T>
bool all_finite(const std::vector<nn::Param<T>>& params) {
  for (const auto& p : params) {
    if (!p.value->allFinite()) return false;
  }
  return true;
}

double leaky_gain(double leak) { return std::sqrt(2.0 / (1.0 + leak * leak)); }

}  // namespace

// ---- Generator ----

int GeneratorConfig::output_length() const {
  int length = base_length;
  for (std::size_t i = 0; i < channels.size(); ++i) length *= stride;
  return length;
}

void GeneratorConfig::validate() const {
  std::vector<std::string> errors;
  if (embedding <= 0) errors.push_back("embedding must be positive");
  if (base_channels <= 0 || base_length <= 0) errors.push_back("base shape must be positive");
  if (kernel <= 0 || kernel % 2 == 0) errors.push_back("kernel must be odd and positive");
  if (stride <= 0 || stride > kernel) errors.push_back("stride must be in [1, kernel]");
  for (int c : channels) {
    if (c <= 0) errors.push_back("stage channels must be positive");
  }
  if (!(output_scale > 0.0)) errors.push_back("output_scale must be positive");
  if (!errors.empty()) {
    std::string joined;
    for (const auto& e : errors) joined += (joined.empty() ? "" : "; ") + e;
    throw ModelError("generator config: " + joined);
  }
}

template <typename T>
Generator<T>::Generator(GeneratorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const double gain = leaky_gain(cfg_.leak);
  project_ = nn::Linear<T>(cfg_.embedding, cfg_.base_channels * cfg_.base_length);
  project_.init(rng, gain);
  int in = cfg_.base_channels;
  for (int out : cfg_.channels) {
    stages_.emplace_back(upsample_shape(in, out, cfg_.kernel, cfg_.stride));
    stages_.back().init(rng, gain);
    in = out;
  }
  output_ = nn::Conv1d<T>(nn::ConvShape{in, 1, cfg_.kernel, 1, cfg_.kernel / 2, 0});
  output_.init(rng, 0.1);
}

template <typename T>
nn::Mat<T> Generator<T>::forward(const nn::Mat<T>& embeddings) {
  if (embeddings.rows() != cfg_.embedding) {
    throw ModelError(fmt::format("generator expects {}-dim embeddings, got {}", cfg_.embedding, embeddings.rows()));
  }
  const auto batch = embeddings.cols();
  input_ = embeddings;
  nn::Mat<T> h;
  project_.forward(input_, h);
  activations_.assign(1, Eigen::Map<nn::Mat<T>>(h.data(), cfg_.base_channels, batch * cfg_.base_length));
  lengths_.assign(1, cfg_.base_length);
  nn::leaky_relu(activations_[0], static_cast<T>(cfg_.leak));
  for (auto& stage : stages_) {
    nn::Mat<T> y;
    int out_len = 0;
    stage.forward(activations_.back(), lengths_.back(), y, out_len);
    nn::leaky_relu(y, static_cast<T>(cfg_.leak));
    activations_.push_back(std::move(y));
    lengths_.push_back(out_len);
  }
  nn::Mat<T> z;
  int out_len = 0;
  output_.forward(activations_.back(), lengths_.back(), z, out_len);
  const T scale = static_cast<T>(cfg_.output_scale);
  result_ = (z.array() / scale).tanh() * scale;
  return Eigen::Map<nn::Mat<T>>(result_.data(), out_len, batch);
}

template <typename T>
nn::Mat<T> Generator<T>::backward(const nn::Mat<T>& d_output) {
  if (d_output.size() != result_.size()) throw ModelError("generator backward without a matching forward");
  const T scale = static_cast<T>(cfg_.output_scale);
  nn::Mat<T> dz = Eigen::Map<const nn::Mat<T>>(d_output.data(), 1, d_output.size());
  dz.array() *= T(1) - (result_.array() / scale).square();
  nn::Mat<T> dx;
  output_.backward(activations_.back(), lengths_.back(), dz, &dx);
  const T leak = static_cast<T>(cfg_.leak);
  for (std::size_t s = stages_.size(); s-- > 0;) {
    nn::leaky_relu_backward(activations_[s + 1], leak, dx);
    nn::Mat<T> prev;
    stages_[s].backward(activations_[s], lengths_[s], dx, &prev);
    dx = std::move(prev);
  }
  nn::leaky_relu_backward(activations_[0], leak, dx);
  const auto batch = input_.cols();
  const nn::Mat<T> dh = Eigen::Map<nn::Mat<T>>(dx.data(), cfg_.base_channels * cfg_.base_length, batch);
  nn::Mat<T> d_embed;
  project_.backward(input_, dh, &d_embed);
  return d_embed;
}

template <typename T>
void Generator<T>::zero_grad() {
  project_.zero_grad();
  for (auto& s : stages_) s.zero_grad();
  output_.zero_grad();
}

template <typename T>
std::vector<nn::Param<T>> Generator<T>::parameters() {
  std::vector<nn::Param<T>> out;
  project_.collect("generator.project", out);
  for (std::size_t s = 0; s < stages_.size(); ++s) stages_[s].collect(fmt::format("generator.stage{}", s), out);
  output_.collect("generator.output", out);
  return out;
}

template <typename T>
void Generator<T>::validate() const {
  if (!all_finite(const_cast<Generator*>(this)->parameters())) throw ModelError("generator parameters are not finite");
}

// ---- Discriminator ----

int DiscriminatorConfig::final_length() const {
  int length = input_length;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    length = nn::conv_output_length(length, nn::ConvShape{1, 1, kernel, stride, kernel / 2, 0});
  }
  return length;
}

void DiscriminatorConfig::validate() const {
  std::vector<std::string> errors;
  if (input_channels <= 0 || input_length <= 0) errors.push_back("input shape must be positive");
  if (embedding <= 0) errors.push_back("embedding must be positive");
  if (cond_channels < 0) errors.push_back("cond_channels must be non-negative");
  if (kernel <= 0 || kernel % 2 == 0) errors.push_back("kernel must be odd and positive");
  if (stride <= 0) errors.push_back("stride must be positive");
  if (channels.empty()) errors.push_back("at least one conv stage is required");
  if (errors.empty() && final_length() <= 0) errors.push_back("input too short for the conv stack");
  if (!errors.empty()) {
    std::string joined;
    for (const auto& e : errors) joined += (joined.empty() ? "" : "; ") + e;
    throw ModelError("discriminator config: " + joined);
  }
}

template <typename T>
Discriminator<T>::Discriminator(DiscriminatorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const double gain = leaky_gain(cfg_.leak);
  cond_ = nn::Linear<T>(cfg_.embedding, cfg_.cond_channels);
  cond_.init(rng, 1.0);
  int in = cfg_.input_channels + cfg_.cond_channels;
  for (int out : cfg_.channels) {
    convs_.emplace_back(nn::ConvShape{in, out, cfg_.kernel, cfg_.stride, cfg_.kernel / 2, 0});
    convs_.back().init(rng, gain);
    in = out;
  }
  head_ = nn::Linear<T>(in * cfg_.final_length(), 1);
  head_.init(rng, 1.0);
}

template <typename T>
std::vector<T> Discriminator<T>::forward(const nn::Mat<T>& input, const nn::Mat<T>& embeddings) {
  const auto batch = embeddings.cols();
  const int length = cfg_.input_length;
  if (embeddings.rows() != cfg_.embedding) {
    throw ModelError(fmt::format("discriminator expects {}-dim embeddings, got {}", cfg_.embedding, embeddings.rows()));
  }
  if (input.rows() != cfg_.input_channels || input.cols() != batch * length) {
    throw ModelError(fmt::format("discriminator expects {}x{} inputs, got {} channels x {} samples",
                                 cfg_.input_length, cfg_.input_channels, input.rows(),
                                 batch > 0 ? input.cols() / batch : 0));
  }
  embeddings_ = embeddings;
  cond_.forward(embeddings_, cond_out_);
  nn::Mat<T> x(cfg_.input_channels + cfg_.cond_channels, batch * length);
  x.topRows(cfg_.input_channels) = input;
  for (Eigen::Index b = 0; b < batch; ++b) {
    x.block(cfg_.input_channels, b * length, cfg_.cond_channels, length) = cond_out_.col(b).replicate(1, length);
  }
  activations_.assign(1, std::move(x));
  lengths_.assign(1, length);
  const T leak = static_cast<T>(cfg_.leak);
  for (auto& conv : convs_) {
    nn::Mat<T> y;
    int out_len = 0;
    conv.forward(activations_.back(), lengths_.back(), y, out_len);
    nn::leaky_relu(y, leak);
    activations_.push_back(std::move(y));
    lengths_.push_back(out_len);
  }
  const auto& last = activations_.back();
  const nn::Mat<T> flat = Eigen::Map<const nn::Mat<T>>(last.data(), last.rows() * lengths_.back(), batch);
  nn::Mat<T> logits;
  head_.forward(flat, logits);
  return std::vector<T>(logits.data(), logits.data() + batch);
}

template <typename T>
std::vector<T> Discriminator<T>::probabilities(const nn::Mat<T>& input, const nn::Mat<T>& embeddings) {
  auto logits = forward(input, embeddings);
  for (auto& v : logits) v = static_cast<T>(sigmoid(static_cast<double>(v)));
  return logits;
}

template <typename T>
typename Discriminator<T>::InputGradients Discriminator<T>::backward(const std::vector<T>& d_logits,
                                                                     bool param_grads) {
  const auto batch = embeddings_.cols();
  if (static_cast<Eigen::Index>(d_logits.size()) != batch) throw ModelError("discriminator backward batch mismatch");
  const auto& last = activations_.back();
  const nn::Mat<T> flat = Eigen::Map<const nn::Mat<T>>(last.data(), last.rows() * lengths_.back(), batch);
  const nn::Mat<T> dl = Eigen::Map<const nn::Mat<T>>(d_logits.data(), 1, batch);
  nn::Mat<T> d_flat;
  head_.backward(flat, dl, &d_flat);
  nn::Mat<T> dx = Eigen::Map<nn::Mat<T>>(d_flat.data(), last.rows(), batch * lengths_.back());
  const T leak = static_cast<T>(cfg_.leak);
  for (std::size_t i = convs_.size(); i-- > 0;) {
    nn::leaky_relu_backward(activations_[i + 1], leak, dx);
    nn::Mat<T> prev;
    convs_[i].backward(activations_[i], lengths_[i], dx, &prev, param_grads);
    dx = std::move(prev);
  }
  const int length = cfg_.input_length;
  InputGradients out;
  out.input = dx.topRows(cfg_.input_channels);
  nn::Mat<T> d_cond(cfg_.cond_channels, batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    d_cond.col(b) = dx.block(cfg_.input_channels, b * length, cfg_.cond_channels, length).rowwise().sum();
  }
  cond_.backward(embeddings_, d_cond, &out.embeddings);
  return out;
}

template <typename T>
void Discriminator<T>::zero_grad() {
  cond_.zero_grad();
  for (auto& c : convs_) c.zero_grad();
  head_.zero_grad();
}

template <typename T>
std::vector<nn::Param<T>> Discriminator<T>::parameters() {
  std::vector<nn::Param<T>> out;
  cond_.collect("discriminator.cond", out);
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(fmt::format("discriminator.conv{}", i), out);
  head_.collect("discriminator.head", out);
  return out;
}

template <typename T>
void Discriminator<T>::validate() const {
  if (!all_finite(const_cast<Discriminator*>(this)->parameters())) {
    throw ModelError("discriminator parameters are not finite");
  }
}

template class Generator<float>;
template class Generator<double>;
template class Discriminator<float>;
template class Discriminator<double>;

// ---- losses ----

double sigmoid(double logit) {
  if (logit >= 0) return 1.0 / (1.0 + std::exp(-logit));
  const double e = std::exp(logit);
  return e / (1.0 + e);
}

namespace {

// log(clamp(p)) and the derivative of the unclamped log-sigmoid with respect
// to the logit. The clamp bounds the value only; a saturated discriminator
// would otherwise receive no gradient and never recover.
struct ClampedLog {
  double value;
  double d_logit;
};

ClampedLog log_prob(double logit) {
  const double p = sigmoid(logit);
  return {std::log(std::clamp(p, kLogEpsilon, 1.0 - kLogEpsilon)), 1.0 - p};
}

ClampedLog log_one_minus_prob(double logit) {
  const double p = sigmoid(logit);
  return {std::log1p(-std::clamp(p, kLogEpsilon, 1.0 - kLogEpsilon)), -p};
}

double clamp_prob(double p) { return std::clamp(p, kLogEpsilon, 1.0 - kLogEpsilon); }

void require_same_length(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) throw ModelError(fmt::format("{}: length mismatch ({} vs {})", what, a.size(), b.size()));
  if (a.empty()) throw ModelError(fmt::format("{}: empty input", what));
}

}  // namespace

double loss_cgan(std::span<const double> d_fake) {
  if (d_fake.empty()) throw ModelError("loss_cgan: empty batch");
  double sum = 0.0;
  for (double p : d_fake) sum += std::log(1.0 - clamp_prob(p));
  return sum / static_cast<double>(d_fake.size());
}

LossWithLogitGrad loss_cgan_from_logits(std::span<const double> fake_logits) {
  if (fake_logits.empty()) throw ModelError("loss_cgan: empty batch");
  const double n = static_cast<double>(fake_logits.size());
  LossWithLogitGrad out{0.0, std::vector<double>(fake_logits.size())};
  for (std::size_t i = 0; i < fake_logits.size(); ++i) {
    const auto term = log_one_minus_prob(fake_logits[i]);
    out.value += term.value / n;
    out.d_logits[i] = term.d_logit / n;
  }
  return out;
}

double loss_discriminator(std::span<const double> d_real, std::span<const double> d_fake) {
  if (d_real.empty() || d_fake.empty()) throw ModelError("loss_discriminator: empty batch");
  double real = 0.0, fake = 0.0;
  for (double p : d_real) real += std::log(clamp_prob(p));
  for (double p : d_fake) fake += std::log(1.0 - clamp_prob(p));
  return real / static_cast<double>(d_real.size()) + fake / static_cast<double>(d_fake.size());
}

DiscriminatorLoss loss_discriminator_from_logits(std::span<const double> real_logits,
                                                 std::span<const double> fake_logits) {
  if (real_logits.empty() || fake_logits.empty()) throw ModelError("loss_discriminator: empty batch");
  DiscriminatorLoss out{0.0, std::vector<double>(real_logits.size()), std::vector<double>(fake_logits.size())};
  const double nr = static_cast<double>(real_logits.size()), nf = static_cast<double>(fake_logits.size());
  for (std::size_t i = 0; i < real_logits.size(); ++i) {
    const auto term = log_prob(real_logits[i]);
    out.value += term.value / nr;
    out.d_real_logits[i] = -term.d_logit / nr;
  }
  for (std::size_t i = 0; i < fake_logits.size(); ++i) {
    const auto term = log_one_minus_prob(fake_logits[i]);
    out.value += term.value / nf;
    out.d_fake_logits[i] = -term.d_logit / nf;
  }
  return out;
}

double loss_mse(std::span<const double> generated, std::span<const double> truth) {
  require_same_length(generated, truth, "loss_mse");
  double sum = 0.0;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    const double d = generated[i] - truth[i];
    sum += d * d;
  }
  return sum / static_cast<double>(generated.size());
}

LossWithGrad loss_mse_with_grad(std::span<const double> generated, std::span<const double> truth) {
  require_same_length(generated, truth, "loss_mse");
  const double n = static_cast<double>(generated.size());
  LossWithGrad out{0.0, std::vector<double>(generated.size())};
  for (std::size_t i = 0; i < generated.size(); ++i) {
    const double d = generated[i] - truth[i];
    out.value += d * d;
    out.grad[i] = 2.0 * d / n;
  }
  out.value /= n;
  return out;
}

namespace {

Eigen::MatrixXd body_edr(std::span<const double> x, const EdrLossConfig& cfg) {
  if (x.size() < cfg.body_length) {
    throw ModelError(fmt::format("loss_edr: input has {} samples, body needs {}", x.size(), cfg.body_length));
  }
  return reverse_cumsum(band_energy_stft(x.first(cfg.body_length), kAnalysisRate, cfg.stft));
}

void check_weights(const EdrLossConfig& cfg) {
  for (double w : cfg.band_weights) {
    if (!(w > 0.0)) throw ModelError("loss_edr: band weights must be positive");
  }
}

}  // namespace

Eigen::MatrixXd loss_edr_target(std::span<const double> truth, const EdrLossConfig& cfg) {
  return body_edr(truth, cfg);
}

double loss_edr(std::span<const double> generated, const Eigen::MatrixXd& truth_edr, const EdrLossConfig& cfg) {
  check_weights(cfg);
  const Eigen::MatrixXd gen = body_edr(generated, cfg);
  if (gen.rows() != truth_edr.rows() || gen.cols() != truth_edr.cols()) {
    throw ModelError("loss_edr: EDR shape mismatch");
  }
  double value = 0.0;
  for (Eigen::Index b = 0; b < gen.cols(); ++b) {
    value += cfg.band_weights[static_cast<std::size_t>(b)] * (gen.col(b) - truth_edr.col(b)).squaredNorm() /
             static_cast<double>(gen.rows());
  }
  return value;
}

double loss_edr(std::span<const double> generated, std::span<const double> truth, const EdrLossConfig& cfg) {
  require_same_length(generated, truth, "loss_edr");
  return loss_edr(generated, body_edr(truth, cfg), cfg);
}

LossWithGrad loss_edr_with_grad(std::span<const double> generated, std::span<const double> truth,
                                const EdrLossConfig& cfg) {
  require_same_length(generated, truth, "loss_edr");
  return loss_edr_with_grad(generated, body_edr(truth, cfg), cfg);
}

LossWithGrad loss_edr_with_grad(std::span<const double> generated, const Eigen::MatrixXd& truth_edr,
                                const EdrLossConfig& cfg) {
  const Eigen::MatrixXd gen = body_edr(generated, cfg);
  if (gen.rows() != truth_edr.rows() || gen.cols() != truth_edr.cols()) {
    throw ModelError("loss_edr: EDR shape mismatch");
  }
  check_weights(cfg);
  const double frames = static_cast<double>(gen.rows());
  const Eigen::MatrixXd diff = gen - truth_edr;
  LossWithGrad out{0.0, std::vector<double>(generated.size(), 0.0)};
  Eigen::MatrixXd d_edr(diff.rows(), diff.cols());
  for (Eigen::Index b = 0; b < diff.cols(); ++b) {
    const double w = cfg.band_weights[static_cast<std::size_t>(b)];
    out.value += w * diff.col(b).squaredNorm() / frames;
    d_edr.col(b) = (2.0 * w / frames) * diff.col(b);
  }
  const auto grad = band_energy_stft_backward(generated.first(cfg.body_length), kAnalysisRate,
                                              reverse_cumsum_adjoint(d_edr), cfg.stft);
  std::copy(grad.begin(), grad.end(), out.grad.begin());
  return out;
}

double loss_generator(double l_cgan, double l_edr, double l_mse, double lambda_edr, double lambda_mse) {
  return l_cgan + lambda_edr * l_edr + lambda_mse * l_mse;
}

namespace {
constexpr StftConfig kEdrFeatureStft{256, 1, true};
}

EdrFeatures edr_features(std::span<const double> body) {
  EdrFeatures f;
  f.edr = reverse_cumsum(band_energy_stft(body, kAnalysisRate, kEdrFeatureStft));
  f.features = f.edr.array().log1p().matrix().transpose();
  return f;
}

std::vector<double> edr_features_backward(std::span<const double> body, const EdrFeatures& f,
                                          const Eigen::MatrixXd& d_features) {
  const Eigen::MatrixXd d_edr = (d_features.transpose().array() / (1.0 + f.edr.array())).matrix();
  return band_energy_stft_backward(body, kAnalysisRate, reverse_cumsum_adjoint(d_edr), kEdrFeatureStft);
}

}  // namespace roomir
