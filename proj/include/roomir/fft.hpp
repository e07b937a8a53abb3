#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace roomir {

// Real-input FFT of a fixed size backed by FFTW. Plans are created under a
// global lock; one instance must not be shared across threads.
class RealFft {
 public:
  explicit RealFft(std::size_t n);
  ~RealFft();
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  std::size_t size() const { return n_; }
  std::size_t bins() const { return n_ / 2 + 1; }

  // Unnormalized forward transform; input shorter than size() is zero-padded.
  void forward(std::span<const double> in, std::vector<std::complex<double>>& out);
  // Unnormalized inverse of a Hermitian half spectrum (bins() entries).
  void inverse(std::span<const std::complex<double>> in, std::vector<double>& out);

 private:
  std::size_t n_;
  double* real_;
  void* spec_;
  void* plan_forward_;
  void* plan_inverse_;
};

// Per-thread cached instance for the given size.
RealFft& thread_fft(std::size_t n);

std::size_t next_fast_size(std::size_t n);

}  // namespace roomir
