#include "roomir/acoustics.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>

#include <fmt/format.h>

#include "roomir/fft.hpp"

namespace roomir {

namespace {

// Hann window shifted by half a sample; no zero taps and sums to one at 50% overlap.
std::vector<double> hann(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double s = std::sin(std::numbers::pi * (i + 0.5) / n);
    w[static_cast<std::size_t>(i)] = s * s;
  }
  return w;
}

// Band index per FFT bin, -1 outside every band.
std::vector<int> band_of_bins(int window, int rate) {
  std::vector<int> band(static_cast<std::size_t>(window / 2 + 1), -1);
  for (std::size_t b = 0; b < band.size(); ++b) {
    const double f = static_cast<double>(b) * rate / window;
    for (std::size_t k = 0; k < kNumBands; ++k) {
      if (f >= kBandCenters[k] / std::numbers::sqrt2 && f < kBandCenters[k] * std::numbers::sqrt2) {
        band[b] = static_cast<int>(k);
      }
    }
  }
  return band;
}

void check_stft(std::size_t length, int rate, const StftConfig& cfg) {
  if (rate != kAnalysisRate) {
    throw AcousticsError(fmt::format("band analysis assumes {} Hz input, got {} Hz", kAnalysisRate, rate));
  }
  if (cfg.window < 4 || cfg.hop < 1 || cfg.window % 2 != 0) throw AcousticsError("invalid STFT configuration");
  if (!cfg.centered && length < static_cast<std::size_t>(cfg.window)) {
    throw AcousticsError(fmt::format("signal of {} samples is shorter than one {}-sample window", length,
                                     cfg.window));
  }
  if (length == 0) throw AcousticsError("empty signal");
}

std::ptrdiff_t frame_start(std::size_t m, const StftConfig& cfg) {
  auto start = static_cast<std::ptrdiff_t>(m) * cfg.hop;
  if (cfg.centered) start -= cfg.window / 2;
  return start;
}

}  // namespace

std::size_t frame_count(std::size_t length, const StftConfig& cfg) {
  if (cfg.centered) return (length + static_cast<std::size_t>(cfg.hop) - 1) / static_cast<std::size_t>(cfg.hop);
  if (length < static_cast<std::size_t>(cfg.window)) return 0;
  return 1 + (length - static_cast<std::size_t>(cfg.window)) / static_cast<std::size_t>(cfg.hop);
}

Eigen::MatrixXd band_energy_stft(std::span<const double> ir, int rate, const StftConfig& cfg) {
  check_stft(ir.size(), rate, cfg);
  const auto frames = frame_count(ir.size(), cfg);
  const auto win = hann(cfg.window);
  const auto band = band_of_bins(cfg.window, rate);
  const double scale = 2.0 / cfg.window;
  auto& fft = thread_fft(static_cast<std::size_t>(cfg.window));

  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(frames), kNumBands);
  std::vector<double> frame(static_cast<std::size_t>(cfg.window));
  std::vector<std::complex<double>> spec;
  const auto len = static_cast<std::ptrdiff_t>(ir.size());
  for (std::size_t m = 0; m < frames; ++m) {
    const auto start = frame_start(m, cfg);
    for (int i = 0; i < cfg.window; ++i) {
      const auto n = start + i;
      frame[static_cast<std::size_t>(i)] = (n >= 0 && n < len) ? ir[static_cast<std::size_t>(n)] * win[static_cast<std::size_t>(i)] : 0.0;
    }
    fft.forward(frame, spec);
    for (std::size_t b = 0; b < band.size(); ++b) {
      if (band[b] >= 0) out(static_cast<Eigen::Index>(m), band[b]) += scale * std::norm(spec[b]);
    }
  }
  return out;
}

std::vector<double> band_energy_stft_backward(std::span<const double> ir, int rate,
                                              const Eigen::MatrixXd& d_energy, const StftConfig& cfg) {
  check_stft(ir.size(), rate, cfg);
  const auto frames = frame_count(ir.size(), cfg);
  if (static_cast<std::size_t>(d_energy.rows()) != frames || d_energy.cols() != static_cast<Eigen::Index>(kNumBands)) {
    throw AcousticsError("band_energy_stft_backward: gradient shape mismatch");
  }
  const auto win = hann(cfg.window);
  const auto band = band_of_bins(cfg.window, rate);
  auto& fft = thread_fft(static_cast<std::size_t>(cfg.window));

  // d/dx_n of (2/N) sum_b g_b |X_b|^2 = (4/N) w_n Re(sum_b g_b X_b e^{+i 2 pi b n / N}).
  // The band bins exclude DC and Nyquist, so the c2r transform yields twice that sum.
  std::vector<double> grad(ir.size(), 0.0);
  std::vector<double> frame(static_cast<std::size_t>(cfg.window));
  std::vector<std::complex<double>> spec;
  std::vector<double> back;
  const auto len = static_cast<std::ptrdiff_t>(ir.size());
  const double scale = 2.0 / cfg.window;
  for (std::size_t m = 0; m < frames; ++m) {
    bool any = false;
    for (std::size_t k = 0; k < kNumBands; ++k) any = any || d_energy(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) != 0.0;
    if (!any) continue;
    const auto start = frame_start(m, cfg);
    for (int i = 0; i < cfg.window; ++i) {
      const auto n = start + i;
      frame[static_cast<std::size_t>(i)] = (n >= 0 && n < len) ? ir[static_cast<std::size_t>(n)] * win[static_cast<std::size_t>(i)] : 0.0;
    }
    fft.forward(frame, spec);
    for (std::size_t b = 0; b < band.size(); ++b) {
      spec[b] = band[b] >= 0 ? spec[b] * d_energy(static_cast<Eigen::Index>(m), band[b]) : 0.0;
    }
    fft.inverse(spec, back);
    for (int i = 0; i < cfg.window; ++i) {
      const auto n = start + i;
      if (n >= 0 && n < len) grad[static_cast<std::size_t>(n)] += scale * win[static_cast<std::size_t>(i)] * back[static_cast<std::size_t>(i)];
    }
  }
  return grad;
}

Eigen::MatrixXd reverse_cumsum(const Eigen::MatrixXd& energies) {
  Eigen::MatrixXd out = energies;
  for (Eigen::Index m = out.rows() - 2; m >= 0; --m) out.row(m) += out.row(m + 1);
  return out;
}

Eigen::MatrixXd reverse_cumsum_adjoint(const Eigen::MatrixXd& d_edr) {
  Eigen::MatrixXd out = d_edr;
  for (Eigen::Index m = 1; m < out.rows(); ++m) out.row(m) += out.row(m - 1);
  return out;
}

EDRMatrix edr(std::span<const double> ir, int rate, const StftConfig& cfg) {
  EDRMatrix out;
  out.values = reverse_cumsum(band_energy_stft(ir, rate, cfg));
  out.frame_times.resize(static_cast<std::size_t>(out.values.rows()));
  for (std::size_t m = 0; m < out.frame_times.size(); ++m) {
    const double centre = cfg.centered ? static_cast<double>(m) * cfg.hop
                                       : static_cast<double>(m) * cfg.hop + cfg.window / 2.0;
    out.frame_times[m] = centre / rate;
  }
  return out;
}

std::vector<double> edc(std::span<const double> ir) {
  std::vector<double> tail(ir.size());
  double acc = 0.0;
  for (std::size_t i = ir.size(); i-- > 0;) {
    acc += ir[i] * ir[i];
    tail[i] = acc;
  }
  if (ir.empty() || !(acc > 0.0)) throw AcousticsError("edc: impulse response has no energy");
  const double total = tail.front();
  for (auto& v : tail) {
    v = v > 0.0 ? 10.0 * std::log10(v / total) : -std::numeric_limits<double>::infinity();
  }
  tail.front() = 0.0;
  return tail;
}

LineFit fit_line(std::span<const double> x, std::span<const double> y) {
  const auto n = static_cast<double>(x.size());
  if (x.size() < 2 || x.size() != y.size()) throw AcousticsError("fit_line: need at least two points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0) throw AcousticsError("fit_line: degenerate abscissa");
  const double slope = sxy / sxx;
  const double r2 = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return {slope, my - slope * mx, r2};
}

namespace {

// Decay time extrapolated to 60 dB from a line fit of the EDC between two levels.
double decay_time(std::span<const double> ir, int rate, double upper_db, double lower_db, const char* name) {
  if (rate <= 0) throw AcousticsError("sample rate must be positive");
  const auto curve = edc(ir);
  std::size_t begin = 0;
  while (begin < curve.size() && curve[begin] > upper_db) ++begin;
  std::size_t end = begin;
  while (end < curve.size() && curve[end] >= lower_db) ++end;
  // Dropping straight to -inf after the last nonzero sample is not a measured decay.
  if (end == curve.size() || !std::isfinite(curve[end])) {
    throw AcousticsError(fmt::format("{}: decay curve never falls below {} dB; use a longer impulse response",
                                     name, lower_db));
  }
  if (end - begin < 2) {
    throw AcousticsError(fmt::format("{}: too few samples between {} and {} dB", name, upper_db, lower_db));
  }
  std::vector<double> t(end - begin), level(end - begin);
  for (std::size_t i = begin; i < end; ++i) {
    t[i - begin] = static_cast<double>(i) / rate;
    level[i - begin] = curve[i];
  }
  const auto fit = fit_line(t, level);
  if (!(fit.slope < 0.0)) throw AcousticsError(fmt::format("{}: non-decaying fit", name));
  return -60.0 / fit.slope;
}

}  // namespace

double t60(std::span<const double> ir, int rate) { return decay_time(ir, rate, -5.0, -25.0, "t60"); }

double edt(std::span<const double> ir, int rate) { return decay_time(ir, rate, 0.0, -10.0, "edt"); }

DrrResult drr(std::span<const double> ir, int rate, double direct_window) {
  if (ir.empty()) throw AcousticsError("drr: empty impulse response");
  std::size_t peak = 0;
  for (std::size_t i = 1; i < ir.size(); ++i) {
    if (std::abs(ir[i]) > std::abs(ir[peak])) peak = i;
  }
  if (ir[peak] == 0.0) throw AcousticsError("drr: impulse response has no peak");
  const auto half = static_cast<std::size_t>(std::lround(direct_window * rate));
  const std::size_t lo = peak > half ? peak - half : 0;
  const std::size_t hi = std::min(ir.size() - 1, peak + half);
  double direct = 0.0, reverberant = 0.0;
  for (std::size_t i = 0; i < ir.size(); ++i) {
    const double e = ir[i] * ir[i];
    if (i >= lo && i <= hi) {
      direct += e;
    } else {
      reverberant += e;
    }
  }
  if (reverberant == 0.0) return {std::numeric_limits<double>::infinity(), true};
  return {10.0 * std::log10(direct / reverberant), false};
}

PowerSpectrum power_spectrum(std::span<const double> ir, int rate) {
  PowerSpectrum out;
  if (ir.empty()) return out;
  RealFft fft(ir.size());
  std::vector<std::complex<double>> spec;
  fft.forward(ir, spec);
  out.frequencies.resize(spec.size());
  out.power.resize(spec.size());
  out.db.resize(spec.size());
  for (std::size_t b = 0; b < spec.size(); ++b) {
    out.frequencies[b] = static_cast<double>(b) * rate / static_cast<double>(ir.size());
    out.power[b] = std::norm(spec[b]);
    out.db[b] = 10.0 * std::log10(std::max(out.power[b], std::numeric_limits<double>::min()));
  }
  return out;
}

}  // namespace roomir
