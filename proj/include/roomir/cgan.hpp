#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "roomir/acoustics.hpp"
#include "roomir/encoder.hpp"
#include "roomir/nn.hpp"

namespace roomir {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GeneratorConfig {
  int embedding = static_cast<int>(kEmbeddingSize);
  int base_channels = 256;
  int base_length = 16;
  std::vector<int> channels{128, 64, 32, 16};
  int kernel = 41;
  int stride = 4;
  double leak = 0.2;
  // Output is scale * tanh(y / scale). Packed IRs peak well above 1, so the
  // bound sits above the largest observed peaks.
  double output_scale = 8.0;

  int output_length() const;
  void validate() const;
};

// Embedding -> linear -> (base_channels x base_length) -> transposed-conv
// upsampling stages -> kernel-sized output conv. No noise input.
template <typename T>
class Generator {
 public:
  Generator() = default;
  explicit Generator(GeneratorConfig cfg, std::uint64_t seed = 1);

  const GeneratorConfig& config() const { return cfg_; }
  int output_length() const { return cfg_.output_length(); }

  // embeddings: embedding x batch. Returns output_length x batch.
  nn::Mat<T> forward(const nn::Mat<T>& embeddings);
  // Needs the preceding forward; accumulates parameter gradients and returns
  // the embedding gradient (embedding x batch).
  nn::Mat<T> backward(const nn::Mat<T>& d_output);

  void zero_grad();
  std::vector<nn::Param<T>> parameters();
  void validate() const;

 private:
  GeneratorConfig cfg_;
  nn::Linear<T> project_;
  std::vector<nn::ConvTranspose1d<T>> stages_;
  nn::Conv1d<T> output_;
  // forward cache
  nn::Mat<T> input_;
  std::vector<nn::Mat<T>> activations_;  // input of each conv stage, then of output_
  std::vector<int> lengths_;
  nn::Mat<T> result_;
};

struct DiscriminatorConfig {
  int input_channels = 1;  // 6 for EDR input
  int input_length = 4096;
  int embedding = static_cast<int>(kEmbeddingSize);
  int cond_channels = 8;
  std::vector<int> channels{32, 64, 128, 256};
  int kernel = 41;
  int stride = 4;
  double leak = 0.2;

  int final_length() const;
  void validate() const;
};

// Strided convolutions over the signal with a broadcast linear projection of
// the embedding appended as extra input channels; sigmoid head.
template <typename T>
class Discriminator {
 public:
  Discriminator() = default;
  explicit Discriminator(DiscriminatorConfig cfg, std::uint64_t seed = 2);

  const DiscriminatorConfig& config() const { return cfg_; }

  // input: input_channels x batch*input_length. Returns logits (batch).
  std::vector<T> forward(const nn::Mat<T>& input, const nn::Mat<T>& embeddings);
  // Probabilities sigmoid(logit).
  std::vector<T> probabilities(const nn::Mat<T>& input, const nn::Mat<T>& embeddings);

  struct InputGradients {
    nn::Mat<T> input;       // same shape as the forward input
    nn::Mat<T> embeddings;  // embedding x batch
  };
  InputGradients backward(const std::vector<T>& d_logits, bool param_grads);

  void zero_grad();
  std::vector<nn::Param<T>> parameters();
  void validate() const;

 private:
  DiscriminatorConfig cfg_;
  nn::Linear<T> cond_;
  std::vector<nn::Conv1d<T>> convs_;
  nn::Linear<T> head_;
  nn::Mat<T> embeddings_, cond_out_;
  std::vector<nn::Mat<T>> activations_;  // input of each conv, then flattened head input
  std::vector<int> lengths_;
};

inline constexpr double kLogEpsilon = 1e-7;

double sigmoid(double logit);

// Probabilities are clamped to [eps, 1 - eps] inside the logarithms; the
// gradient through a clamped value is zero.
struct LossWithLogitGrad {
  double value;
  std::vector<double> d_logits;
};

// mean log(1 - D(G(e)))
double loss_cgan(std::span<const double> d_fake);
LossWithLogitGrad loss_cgan_from_logits(std::span<const double> fake_logits);

// mean log D(real) + mean log(1 - D(fake)); the gradient returned is for the
// negated value, i.e. the quantity the discriminator minimizes.
double loss_discriminator(std::span<const double> d_real, std::span<const double> d_fake);
struct DiscriminatorLoss {
  double value;
  std::vector<double> d_real_logits;
  std::vector<double> d_fake_logits;
};
DiscriminatorLoss loss_discriminator_from_logits(std::span<const double> real_logits,
                                                 std::span<const double> fake_logits);

inline constexpr std::array<double, kNumBands> kDefaultBandWeights{6.0 / 21, 5.0 / 21, 4.0 / 21,
                                                                   3.0 / 21, 2.0 / 21, 1.0 / 21};

struct EdrLossConfig {
  std::array<double, kNumBands> band_weights = kDefaultBandWeights;
  std::size_t body_length = 3968;  // leading samples the EDR is taken over
  StftConfig stft{};
};

struct LossWithGrad {
  double value;
  std::vector<double> grad;  // d value / d generated
};

double loss_mse(std::span<const double> generated, std::span<const double> truth);
LossWithGrad loss_mse_with_grad(std::span<const double> generated, std::span<const double> truth);

// sum_b w_b * mean_frames (EDR_gen - EDR_truth)^2. The default weights sum to
// one, so this is a weighted mean over bands.
double loss_edr(std::span<const double> generated, std::span<const double> truth, const EdrLossConfig& cfg = {});
LossWithGrad loss_edr_with_grad(std::span<const double> generated, std::span<const double> truth,
                                const EdrLossConfig& cfg = {});
// Variants taking a precomputed truth EDR (frames x bands).
double loss_edr(std::span<const double> generated, const Eigen::MatrixXd& truth_edr, const EdrLossConfig& cfg);
LossWithGrad loss_edr_with_grad(std::span<const double> generated, const Eigen::MatrixXd& truth_edr,
                                const EdrLossConfig& cfg);

// EDR of the leading body_length samples, as the loss compares it.
Eigen::MatrixXd loss_edr_target(std::span<const double> truth, const EdrLossConfig& cfg = {});

double loss_generator(double l_cgan, double l_edr, double l_mse, double lambda_edr, double lambda_mse);

// Discriminator input for the EDR variant: log(1 + EDR) from a centred hop-1
// STFT of the body, laid out bands x frames.
struct EdrFeatures {
  Eigen::MatrixXd edr;       // frames x bands
  Eigen::MatrixXd features;  // bands x frames
};
EdrFeatures edr_features(std::span<const double> body);
// Gradient of sum(d_features .* features) with respect to the body.
std::vector<double> edr_features_backward(std::span<const double> body, const EdrFeatures& f,
                                          const Eigen::MatrixXd& d_features);

}  // namespace roomir
