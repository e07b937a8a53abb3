#include "roomir/nn.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>

#include <fmt/core.h>

namespace roomir::nn {

namespace {

template <typename T>
void fill_normal(Mat<T>& m, std::mt19937_64& rng, double std) {
  std::normal_distribution<double> g(0.0, std);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(g(rng));
}

}  // namespace

int conv_output_length(int length, const ConvShape& s) {
  return (length + 2 * s.padding - s.kernel) / s.stride + 1;
}

int conv_transpose_output_length(int length, const ConvShape& s) {
  return (length - 1) * s.stride - 2 * s.padding + s.kernel + s.output_padding;
}

// The kernel window of one output step covers consecutive input columns,
// which are contiguous in memory with exactly the k*C + c row order of cols.
template <typename T>
void im2col(const Mat<T>& x, int channels, int in_len, int kernel, int stride, int padding, int out_len, Mat<T>& cols) {
  const auto batch = x.cols() / in_len;
  const std::ptrdiff_t c = channels;
  cols.resize(static_cast<Eigen::Index>(kernel) * channels, batch * out_len);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const T* base = x.data() + b * in_len * c;
    for (int t = 0; t < out_len; ++t) {
      T* dst = cols.col(b * out_len + t).data();
      const int start = t * stride - padding;
      const int lo = std::max(0, -start), hi = std::min(kernel, in_len - start);
      if (hi <= lo) {
        std::fill(dst, dst + kernel * c, T(0));
        continue;
      }
      std::fill(dst, dst + lo * c, T(0));
      std::copy(base + (start + lo) * c, base + (start + hi) * c, dst + lo * c);
      std::fill(dst + hi * c, dst + kernel * c, T(0));
    }
  }
}

template <typename T>
void col2im(const Mat<T>& cols, int channels, int in_len, int kernel, int stride, int padding, int out_len, Mat<T>& x) {
  const auto batch = cols.cols() / out_len;
  const std::ptrdiff_t c = channels;
  x.setZero(channels, batch * in_len);
  for (Eigen::Index b = 0; b < batch; ++b) {
    T* base = x.data() + b * in_len * c;
    for (int t = 0; t < out_len; ++t) {
      const T* src = cols.col(b * out_len + t).data();
      const int start = t * stride - padding;
      const int lo = std::max(0, -start), hi = std::min(kernel, in_len - start);
      T* out = base + (start + lo) * c;
      const T* in = src + lo * c;
      for (std::ptrdiff_t i = 0, n = (hi - lo) * c; i < n; ++i) out[i] += in[i];
    }
  }
}

// ---- Linear ----

template <typename T>
Linear<T>::Linear(int in, int out) : weight(out, in), bias(out, 1) {
  weight.setZero();
  bias.setZero();
  zero_grad();
}

template <typename T>
void Linear<T>::init(std::mt19937_64& rng, double gain) {
  fill_normal(weight, rng, gain / std::sqrt(static_cast<double>(weight.cols())));
  bias.setZero();
}

template <typename T>
void Linear<T>::forward(const Mat<T>& x, Mat<T>& y) const {
  if (x.rows() != weight.cols()) {
    throw std::invalid_argument(fmt::format("linear: expected {} inputs, got {}", weight.cols(), x.rows()));
  }
  y.resize(weight.rows(), x.cols());
  for (Eigen::Index b = 0; b < x.cols(); ++b) {
    for (Eigen::Index o = 0; o < weight.rows(); ++o) {
      T acc = bias(o, 0);
      for (Eigen::Index i = 0; i < weight.cols(); ++i) acc += weight(o, i) * x(i, b);
      y(o, b) = acc;
    }
  }
}

template <typename T>
void Linear<T>::backward(const Mat<T>& x, const Mat<T>& dy, Mat<T>* dx) {
  for (Eigen::Index b = 0; b < x.cols(); ++b) {
    for (Eigen::Index o = 0; o < weight.rows(); ++o) {
      const T g = dy(o, b);
      d_bias(o, 0) += g;
      for (Eigen::Index i = 0; i < weight.cols(); ++i) d_weight(o, i) += g * x(i, b);
    }
  }
  if (dx) {
    dx->setZero(weight.cols(), x.cols());
    for (Eigen::Index b = 0; b < x.cols(); ++b) {
      for (Eigen::Index o = 0; o < weight.rows(); ++o) {
        const T g = dy(o, b);
        for (Eigen::Index i = 0; i < weight.cols(); ++i) (*dx)(i, b) += weight(o, i) * g;
      }
    }
  }
}

template <typename T>
void Linear<T>::zero_grad() {
  d_weight.setZero(weight.rows(), weight.cols());
  d_bias.setZero(bias.rows(), 1);
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, std::vector<Param<T>>& out) {
  out.push_back({prefix + ".weight", &weight, &d_weight});
  out.push_back({prefix + ".bias", &bias, &d_bias});
}

// ---- Conv1d ----

template <typename T>
Conv1d<T>::Conv1d(const ConvShape& s)
    : shape(s), weight(s.out_channels, static_cast<Eigen::Index>(s.kernel) * s.in_channels), bias(s.out_channels, 1) {
  weight.setZero();
  bias.setZero();
  zero_grad();
}

template <typename T>
void Conv1d<T>::init(std::mt19937_64& rng, double gain) {
  fill_normal(weight, rng, gain / std::sqrt(static_cast<double>(weight.cols())));
  bias.setZero();
}

template <typename T>
void Conv1d<T>::forward(const Mat<T>& x, int in_len, Mat<T>& y, int& out_len) const {
  if (x.rows() != shape.in_channels) {
    throw std::invalid_argument(fmt::format("conv1d: expected {} channels, got {}", shape.in_channels, x.rows()));
  }
  out_len = conv_output_length(in_len, shape);
  if (shape.stride == 1) {
    // Unit stride: multiply every tap at once, then shift-add the taps. This
    // avoids a kernel-times-larger im2col buffer.
    const Mat<T> taps = tap_weights();
    cols_.noalias() = taps * x;
    const auto batch = x.cols() / in_len;
    const int out = shape.out_channels;
    y.resize(out, batch * out_len);
    y.colwise() = bias.col(0);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (int t = 0; t < out_len; ++t) {
        T* dst = y.col(b * out_len + t).data();
        for (int k = 0; k < shape.kernel; ++k) {
          const int src = t - shape.padding + k;
          if (src < 0 || src >= in_len) continue;
          const T* z = cols_.col(b * in_len + src).data() + static_cast<std::ptrdiff_t>(k) * out;
          for (int o = 0; o < out; ++o) dst[o] += z[o];
        }
      }
    }
    return;
  }
  im2col(x, shape.in_channels, in_len, shape.kernel, shape.stride, shape.padding, out_len, cols_);
  y.noalias() = weight * cols_;
  y.colwise() += bias.col(0);
}

template <typename T>
Mat<T> Conv1d<T>::tap_weights() const {
  // taps(k*out + o, c) = weight(o, k*in + c)
  const int in = shape.in_channels, out = shape.out_channels;
  Mat<T> taps(static_cast<Eigen::Index>(shape.kernel) * out, in);
  for (int k = 0; k < shape.kernel; ++k) {
    taps.middleRows(static_cast<Eigen::Index>(k) * out, out) = weight.middleCols(static_cast<Eigen::Index>(k) * in, in);
  }
  return taps;
}

template <typename T>
void Conv1d<T>::backward(const Mat<T>& x, int in_len, const Mat<T>& dy, Mat<T>* dx, bool param_grads) {
  const int out_len = conv_output_length(in_len, shape);
  if (shape.stride == 1) {
    // d_taps(k*out + o, j) = dy(o, j + padding - k)
    const int out = shape.out_channels, in = shape.in_channels;
    const auto batch = x.cols() / in_len;
    cols_.setZero(static_cast<Eigen::Index>(shape.kernel) * out, batch * in_len);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (int j = 0; j < in_len; ++j) {
        T* dst = cols_.col(b * in_len + j).data();
        for (int k = 0; k < shape.kernel; ++k) {
          const int t = j + shape.padding - k;
          if (t < 0 || t >= out_len) continue;
          const T* g = dy.col(b * out_len + t).data();
          std::copy(g, g + out, dst + static_cast<std::ptrdiff_t>(k) * out);
        }
      }
    }
    if (param_grads) {
      const Mat<T> d_taps = cols_ * x.transpose();
      for (int k = 0; k < shape.kernel; ++k) {
        d_weight.middleCols(static_cast<Eigen::Index>(k) * in, in) += d_taps.middleRows(static_cast<Eigen::Index>(k) * out, out);
      }
      d_bias += dy.rowwise().sum();
    }
    if (dx) dx->noalias() = tap_weights().transpose() * cols_;
    return;
  }
  if (param_grads) {
    im2col(x, shape.in_channels, in_len, shape.kernel, shape.stride, shape.padding, out_len, cols_);
    d_weight.noalias() += dy * cols_.transpose();
    d_bias += dy.rowwise().sum();
  }
  if (dx) {
    cols_.noalias() = weight.transpose() * dy;
    col2im(cols_, shape.in_channels, in_len, shape.kernel, shape.stride, shape.padding, out_len, *dx);
  }
}

template <typename T>
void Conv1d<T>::zero_grad() {
  d_weight.setZero(weight.rows(), weight.cols());
  d_bias.setZero(bias.rows(), 1);
}

template <typename T>
void Conv1d<T>::collect(const std::string& prefix, std::vector<Param<T>>& out) {
  out.push_back({prefix + ".weight", &weight, &d_weight});
  out.push_back({prefix + ".bias", &bias, &d_bias});
}

// ---- ConvTranspose1d ----

template <typename T>
ConvTranspose1d<T>::ConvTranspose1d(const ConvShape& s)
    : shape(s), weight(s.in_channels, static_cast<Eigen::Index>(s.kernel) * s.out_channels), bias(s.out_channels, 1) {
  weight.setZero();
  bias.setZero();
  zero_grad();
}

template <typename T>
void ConvTranspose1d<T>::init(std::mt19937_64& rng, double gain) {
  // Each output sample receives about in*kernel/stride contributions.
  const double fan_in = static_cast<double>(shape.in_channels) * shape.kernel / shape.stride;
  fill_normal(weight, rng, gain / std::sqrt(fan_in));
  bias.setZero();
}

template <typename T>
void ConvTranspose1d<T>::forward(const Mat<T>& x, int in_len, Mat<T>& y, int& out_len) const {
  if (x.rows() != shape.in_channels) {
    throw std::invalid_argument(
        fmt::format("conv_transpose1d: expected {} channels, got {}", shape.in_channels, x.rows()));
  }
  out_len = conv_transpose_output_length(in_len, shape);
  if (const auto plan = phase_plan()) {
    im2col(x, shape.in_channels, in_len, plan->window, 1, plan->padding, in_len, cols_);
    const Mat<T> phases = phase_weights(*plan);
    Mat<T> stacked;
    stacked.noalias() = phases.transpose() * cols_;
    y = Eigen::Map<const Mat<T>>(stacked.data(), shape.out_channels, stacked.size() / shape.out_channels);
    y.colwise() += bias.col(0);
    return;
  }
  cols_.noalias() = weight.transpose() * x;
  col2im(cols_, shape.out_channels, out_len, shape.kernel, shape.stride, shape.padding, in_len, y);
  y.colwise() += bias.col(0);
}

template <typename T>
void ConvTranspose1d<T>::backward(const Mat<T>& x, int in_len, const Mat<T>& dy, Mat<T>* dx, bool param_grads) {
  const int out_len = conv_transpose_output_length(in_len, shape);
  if (const auto plan = phase_plan()) {
    const int in = shape.in_channels, out = shape.out_channels, s = shape.stride;
    const Eigen::Map<const Mat<T>> stacked(dy.data(), static_cast<Eigen::Index>(s) * out, dy.size() / (s * out));
    if (param_grads) {
      im2col(x, in, in_len, plan->window, 1, plan->padding, in_len, cols_);
      const Mat<T> d_phases = cols_ * stacked.transpose();
      for_each_phase_tap(*plan, [&](int row, int col, int k) {
        d_weight.col(static_cast<Eigen::Index>(k) * out + row % out) += d_phases.col(row).segment(col, in);
      });
      d_bias += dy.rowwise().sum();
    }
    if (dx) {
      cols_.noalias() = phase_weights(*plan) * stacked;
      col2im(cols_, in, in_len, plan->window, 1, plan->padding, in_len, *dx);
    }
    return;
  }
  im2col(dy, shape.out_channels, out_len, shape.kernel, shape.stride, shape.padding, in_len, cols_);
  if (param_grads) {
    d_weight.noalias() += x * cols_.transpose();
    d_bias += dy.rowwise().sum();
  }
  if (dx) dx->noalias() = weight * cols_;
}

// When the output is exactly stride times longer than the input, output
// phase r (t = m*stride + r) is an ordinary unit-stride correlation of the
// input with every stride-th tap. Stacking the phases turns the whole layer
// into one GEMM over a short input window.
template <typename T>
std::optional<typename ConvTranspose1d<T>::PhasePlan> ConvTranspose1d<T>::phase_plan() const {
  const int s = shape.stride;
  if (shape.kernel + shape.output_padding - 2 * shape.padding != s) return std::nullopt;
  int lo = 0, hi = 0;
  bool first = true;
  for (int r = 0; r < s; ++r) {
    const int a = (r + shape.padding) / s, c = (r + shape.padding) % s;
    const int taps = (shape.kernel - c + s - 1) / s;
    if (taps <= 0) continue;
    lo = first ? a - taps + 1 : std::min(lo, a - taps + 1);
    hi = first ? a : std::max(hi, a);
    first = false;
  }
  return PhasePlan{hi - lo + 1, -lo};
}

template <typename T>
template <typename F>
void ConvTranspose1d<T>::for_each_phase_tap(const PhasePlan& plan, F&& f) const {
  // Phase r, output channel o, window slot w maps to kernel tap k of input
  // offset delta = w - padding: k = (a - delta) * stride + c.
  const int s = shape.stride, in = shape.in_channels, out = shape.out_channels;
  for (int r = 0; r < s; ++r) {
    const int a = (r + shape.padding) / s, c = (r + shape.padding) % s;
    for (int w = 0; w < plan.window; ++w) {
      const int k = (a - (w - plan.padding)) * s + c;
      if (k < 0 || k >= shape.kernel) continue;
      for (int o = 0; o < out; ++o) f(r * out + o, w * in, k);
    }
  }
}

template <typename T>
Mat<T> ConvTranspose1d<T>::phase_weights(const PhasePlan& plan) const {
  const int in = shape.in_channels, out = shape.out_channels;
  Mat<T> phases = Mat<T>::Zero(static_cast<Eigen::Index>(plan.window) * in, static_cast<Eigen::Index>(shape.stride) * out);
  for_each_phase_tap(plan, [&](int row, int col, int k) {
    phases.col(row).segment(col, in) = weight.col(static_cast<Eigen::Index>(k) * out + row % out);
  });
  return phases;
}

template <typename T>
void ConvTranspose1d<T>::zero_grad() {
  d_weight.setZero(weight.rows(), weight.cols());
  d_bias.setZero(bias.rows(), 1);
}

template <typename T>
void ConvTranspose1d<T>::collect(const std::string& prefix, std::vector<Param<T>>& out) {
  out.push_back({prefix + ".weight", &weight, &d_weight});
  out.push_back({prefix + ".bias", &bias, &d_bias});
}

// ---- activations ----

template <typename T>
void leaky_relu(Mat<T>& x, T slope) {
  T* p = x.data();
  for (Eigen::Index i = 0; i < x.size(); ++i) p[i] = p[i] < T(0) ? p[i] * slope : p[i];
}

template <typename T>
void leaky_relu_backward(const Mat<T>& y, T slope, Mat<T>& dy) {
  const T* out = y.data();
  T* g = dy.data();
  for (Eigen::Index i = 0; i < y.size(); ++i) g[i] = out[i] < T(0) ? g[i] * slope : g[i];
}

// ---- RMSprop ----

template <typename T>
RmsProp<T>::RmsProp(std::vector<Param<T>> params, RmsPropConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) square_avg_.push_back(Mat<T>::Zero(p.value->rows(), p.value->cols()));
}

template <typename T>
void RmsProp<T>::step(double lr) {
  const T alpha = static_cast<T>(cfg_.alpha), eps = static_cast<T>(cfg_.eps), rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& v = square_avg_[i];
    const auto& g = *params_[i].grad;
    v.array() = alpha * v.array() + (T(1) - alpha) * g.array().square();
    params_[i].value->array() -= rate * g.array() / (v.array().sqrt() + eps);
  }
}

#define ROOMIR_NN_INSTANTIATE(T)                                                                       \
  template void im2col<T>(const Mat<T>&, int, int, int, int, int, int, Mat<T>&);                      \
  template void col2im<T>(const Mat<T>&, int, int, int, int, int, int, Mat<T>&);                      \
  template class Linear<T>;                                                                           \
  template class Conv1d<T>;                                                                           \
  template class ConvTranspose1d<T>;                                                                  \
  template void leaky_relu<T>(Mat<T>&, T);                                                            \
  template void leaky_relu_backward<T>(const Mat<T>&, T, Mat<T>&);                                    \
  template class RmsProp<T>;

ROOMIR_NN_INSTANTIATE(float)
ROOMIR_NN_INSTANTIATE(double)

}  // namespace roomir::nn
