#pragma once

// Minimal 1-D convolutional layers with hand-written backward passes.
//
// Activations are (channels x batch*length) column-major matrices; sample b
// occupies columns [b*length, (b+1)*length), so every column holds all
// channels of one time step.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace roomir::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <typename T>
struct Param {
  std::string name;
  Mat<T>* value;
  Mat<T>* grad;
};

struct ConvShape {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  int output_padding = 0;  // transposed convolution only
};

int conv_output_length(int length, const ConvShape& s);
int conv_transpose_output_length(int length, const ConvShape& s);

// cols(k*C + c, b*out_len + t) = x(c, b*in_len + t*stride - padding + k), zero outside.
template <typename T>
void im2col(const Mat<T>& x, int channels, int in_len, int kernel, int stride, int padding, int out_len, Mat<T>& cols);

// Adjoint of im2col: scatter-adds cols back into x (channels x batch*in_len).
template <typename T>
void col2im(const Mat<T>& cols, int channels, int in_len, int kernel, int stride, int padding, int out_len, Mat<T>& x);

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out);

  void init(std::mt19937_64& rng, double gain);
  // x: in x batch -> out x batch. Plain loops so each column is computed the
  // same way whatever the batch size.
  void forward(const Mat<T>& x, Mat<T>& y) const;
  // Accumulates weight/bias gradients; writes dx when non-null.
  void backward(const Mat<T>& x, const Mat<T>& dy, Mat<T>* dx);
  void zero_grad();
  void collect(const std::string& prefix, std::vector<Param<T>>& out);

  Mat<T> weight, bias, d_weight, d_bias;
};

template <typename T>
class Conv1d {
 public:
  Conv1d() = default;
  explicit Conv1d(const ConvShape& shape);

  void init(std::mt19937_64& rng, double gain);
  void forward(const Mat<T>& x, int in_len, Mat<T>& y, int& out_len) const;
  void backward(const Mat<T>& x, int in_len, const Mat<T>& dy, Mat<T>* dx, bool param_grads = true);
  void zero_grad();
  void collect(const std::string& prefix, std::vector<Param<T>>& out);

  ConvShape shape;
  Mat<T> weight;  // out x (kernel*in)
  Mat<T> bias;    // out x 1
  Mat<T> d_weight, d_bias;

 private:
  Mat<T> tap_weights() const;
  mutable Mat<T> cols_;
};

template <typename T>
class ConvTranspose1d {
 public:
  ConvTranspose1d() = default;
  explicit ConvTranspose1d(const ConvShape& shape);

  void init(std::mt19937_64& rng, double gain);
  void forward(const Mat<T>& x, int in_len, Mat<T>& y, int& out_len) const;
  void backward(const Mat<T>& x, int in_len, const Mat<T>& dy, Mat<T>* dx, bool param_grads = true);
  void zero_grad();
  void collect(const std::string& prefix, std::vector<Param<T>>& out);

  ConvShape shape;
  Mat<T> weight;  // in x (kernel*out)
  Mat<T> bias;    // out x 1
  Mat<T> d_weight, d_bias;

 private:
  struct PhasePlan {
    int window;   // input samples each output phase reads
    int padding;  // left padding of that window
  };
  std::optional<PhasePlan> phase_plan() const;
  template <typename F>
  void for_each_phase_tap(const PhasePlan& plan, F&& f) const;
  // (window*in) x (stride*out): column r*out + o holds phase r of output o.
  Mat<T> phase_weights(const PhasePlan& plan) const;
  mutable Mat<T> cols_;
};

template <typename T>
void leaky_relu(Mat<T>& x, T slope);
// dy *= slope where the activation output y is negative.
template <typename T>
void leaky_relu_backward(const Mat<T>& y, T slope, Mat<T>& dy);

struct RmsPropConfig {
  double alpha = 0.99;
  double eps = 1e-8;
};

// RMSprop with a square-average buffer per parameter.
template <typename T>
class RmsProp {
 public:
  RmsProp() = default;
  RmsProp(std::vector<Param<T>> params, RmsPropConfig cfg = {});
  void step(double lr);

 private:
  std::vector<Param<T>> params_;
  std::vector<Mat<T>> square_avg_;
  RmsPropConfig cfg_;
};

}  // namespace roomir::nn
