#pragma once

#include <array>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

namespace roomir {

class AcousticsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kNumBands = 6;
inline constexpr std::array<double, kNumBands> kBandCenters{125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0};
inline constexpr int kAnalysisRate = 16000;

struct StftConfig {
  int window = 256;
  int hop = 128;
  // Centered frames: the signal is zero-padded by window/2 in front so frame m
  // is centred on sample m*hop, giving ceil(length/hop) frames.
  bool centered = false;
};

std::size_t frame_count(std::size_t length, const StftConfig& cfg);

// Octave-band energies per STFT frame (M x 6). Each band sums the one-sided
// bins with centre in [fc/sqrt2, fc*sqrt2), scaled by 2/window, so the grand
// total never exceeds the signal energy.
Eigen::MatrixXd band_energy_stft(std::span<const double> ir, int rate, const StftConfig& cfg = {});

// Gradient of sum(d_energy .* band_energy_stft(ir)) with respect to ir.
std::vector<double> band_energy_stft_backward(std::span<const double> ir, int rate,
                                              const Eigen::MatrixXd& d_energy,
                                              const StftConfig& cfg = {});

// EDR[n] = sum_{m >= n} E[m], per column.
Eigen::MatrixXd reverse_cumsum(const Eigen::MatrixXd& energies);
// Adjoint of reverse_cumsum: forward cumulative sum.
Eigen::MatrixXd reverse_cumsum_adjoint(const Eigen::MatrixXd& d_edr);

struct EDRMatrix {
  Eigen::MatrixXd values;  // frames x bands
  std::array<double, kNumBands> band_centers = kBandCenters;
  std::vector<double> frame_times;  // seconds, window centres
};

EDRMatrix edr(std::span<const double> ir, int rate = kAnalysisRate, const StftConfig& cfg = {});

// Schroeder backward integration in dB, 0 dB at n = 0. Samples after the last
// non-zero sample are -infinity.
std::vector<double> edc(std::span<const double> ir);

struct LineFit {
  double slope;
  double intercept;
  double r_squared;
};

LineFit fit_line(std::span<const double> x, std::span<const double> y);

// T20 extrapolation: fit on EDC in [-5, -25] dB, return time for 60 dB.
double t60(std::span<const double> ir, int rate);
// Fit on EDC in [0, -10] dB, six times the time to fall 10 dB.
double edt(std::span<const double> ir, int rate);

struct DrrResult {
  double db;
  bool infinite;  // no reverberant energy
};

DrrResult drr(std::span<const double> ir, int rate, double direct_window = 0.0025);

struct PowerSpectrum {
  std::vector<double> frequencies;
  std::vector<double> power;  // |X|^2, unnormalized
  std::vector<double> db;
};

PowerSpectrum power_spectrum(std::span<const double> ir, int rate);

struct AcousticMetrics {
  double t60;
  double edt;
  double drr;
};

}  // namespace roomir
