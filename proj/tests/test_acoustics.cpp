#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include "roomir/acoustics.hpp"

using namespace roomir;

namespace {

constexpr double kPi = std::numbers::pi;

std::vector<double> exponential_noise(double t60_seconds, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> ir(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = double(i) / kAnalysisRate;
    ir[i] = g(rng) * std::pow(10.0, -3.0 * t / t60_seconds);
  }
  return ir;
}

std::vector<double> sine(double freq, std::size_t n) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = std::sin(2 * kPi * freq * double(i) / kAnalysisRate);
  return x;
}

// Direct O(N^2) DFT per frame with the same window/band conventions.
Eigen::MatrixXd naive_band_energy(const std::vector<double>& ir, int window, int hop) {
  const std::size_t frames = (ir.size() - window) / hop + 1;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(frames), 6);
  for (std::size_t m = 0; m < frames; ++m) {
    for (int k = 0; k <= window / 2; ++k) {
      const double f = double(k) * kAnalysisRate / window;
      std::complex<double> acc = 0;
      for (int n = 0; n < window; ++n) {
        const double w = std::pow(std::sin(kPi * (n + 0.5) / window), 2);
        acc += w * ir[m * hop + n] * std::polar(1.0, -2 * kPi * k * n / window);
      }
      for (int b = 0; b < 6; ++b) {
        if (f >= kBandCenters[b] / std::sqrt(2.0) && f < kBandCenters[b] * std::sqrt(2.0)) {
          out(static_cast<Eigen::Index>(m), b) += 2.0 / window * std::norm(acc);
        }
      }
    }
  }
  return out;
}

double energy(const std::vector<double>& x) {
  double e = 0;
  for (double v : x) e += v * v;
  return e;
}

}  // namespace

TEST_CASE("frame counts") {
  CHECK(frame_count(3968, {}) == 30);
  CHECK(frame_count(256, {}) == 1);
  CHECK(frame_count(3968, {256, 1, true}) == 3968);
  CHECK(frame_count(3968, {256, 128, true}) == 31);
}

TEST_CASE("band_energy_stft matches a direct DFT evaluation") {
  const auto ir = exponential_noise(0.3, 1500, 1);
  const auto fast = band_energy_stft(ir, kAnalysisRate);
  const auto slow = naive_band_energy(ir, 256, 128);
  REQUIRE(fast.rows() == slow.rows());
  CHECK((fast - slow).cwiseAbs().maxCoeff() <= 1e-9 * slow.maxCoeff());
}

TEST_CASE("band_energy_stft of silence is zero") {
  const std::vector<double> zeros(3968, 0.0);
  const auto e = band_energy_stft(zeros, kAnalysisRate);
  CHECK(e.rows() == 30);
  CHECK(e.isZero(0.0));
}

TEST_CASE("a 1 kHz tone lands in the 1 kHz band") {
  const auto totals = band_energy_stft(sine(1000.0, 3968), kAnalysisRate).colwise().sum();
  for (int b = 0; b < 6; ++b) {
    if (b == 3) continue;
    CHECK(10.0 * std::log10(totals(3) / totals(b)) >= 20.0);
  }
}

TEST_CASE("a unit impulse only shows up in frames covering it") {
  std::vector<double> x(3968, 0.0);
  x[0] = 1.0;
  const auto e = band_energy_stft(x, kAnalysisRate);
  CHECK(e.row(0).sum() > 0.0);
  CHECK(e.bottomRows(e.rows() - 1).isZero(0.0));

  x[0] = 0.0;
  x[300] = 1.0;  // covered by frames 1 (128..383) and 2 (256..511)
  const auto f = band_energy_stft(x, kAnalysisRate);
  for (Eigen::Index m = 0; m < f.rows(); ++m) CHECK((f.row(m).sum() > 0.0) == (m == 1 || m == 2));
}

TEST_CASE("total band energy never exceeds signal energy") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto ir = exponential_noise(0.1 + 0.1 * trial, 3968, 10 + trial);
    CHECK(band_energy_stft(ir, kAnalysisRate).sum() <= energy(ir));
    CHECK(band_energy_stft(ir, kAnalysisRate, {256, 1, true}).sum() <= 128.0 * energy(ir));
  }
}

TEST_CASE("band_energy_stft preconditions") {
  const std::vector<double> x(3968, 0.1);
  CHECK_THROWS_AS(band_energy_stft(x, 48000), AcousticsError);
  CHECK_THROWS_AS(band_energy_stft(std::vector<double>(100, 0.1), kAnalysisRate), AcousticsError);
  CHECK_NOTHROW(band_energy_stft(std::vector<double>(100, 0.1), kAnalysisRate, {256, 1, true}));
}

TEST_CASE("band_energy_stft_backward matches finite differences") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  for (StftConfig cfg : {StftConfig{}, StftConfig{256, 1, true}, StftConfig{256, 128, true}}) {
    const auto ir = exponential_noise(0.2, 900, 4);
    const auto e = band_energy_stft(ir, kAnalysisRate, cfg);
    Eigen::MatrixXd weights(e.rows(), e.cols());
    for (Eigen::Index i = 0; i < weights.size(); ++i) weights.data()[i] = g(rng);
    const auto grad = band_energy_stft_backward(ir, kAnalysisRate, weights, cfg);
    REQUIRE(grad.size() == ir.size());
    double grad_scale = 0.0;
    for (double v : grad) grad_scale = std::max(grad_scale, std::abs(v));
    auto objective = [&](const std::vector<double>& x) {
      return (band_energy_stft(x, kAnalysisRate, cfg).array() * weights.array()).sum();
    };
    for (std::size_t i = 0; i < ir.size(); i += 37) {
      auto up = ir, down = ir;
      const double h = 1e-5;
      up[i] += h;
      down[i] -= h;
      const double numeric = (objective(up) - objective(down)) / (2 * h);
      CHECK(std::abs(grad[i] - numeric) <= 1e-6 * (std::abs(numeric) + grad_scale));
    }
  }
}

TEST_CASE("reverse_cumsum evaluates the decay relief sum") {
  Eigen::MatrixXd e(2, 2);
  e << 4, 1, 2, 3;
  Eigen::MatrixXd want(2, 2);
  want << 6, 4, 2, 3;
  CHECK(reverse_cumsum(e) == want);

  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  Eigen::MatrixXd x(17, 6), y(17, 6);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    x.data()[i] = g(rng);
    y.data()[i] = g(rng);
  }
  const double lhs = (reverse_cumsum(x).array() * y.array()).sum();
  const double rhs = (x.array() * reverse_cumsum_adjoint(y).array()).sum();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("edr invariants") {
  const auto ir = exponential_noise(0.4, 3968, 6);
  const auto r = edr(ir);
  const auto e = band_energy_stft(ir, kAnalysisRate);
  REQUIRE(r.values.rows() == 30);
  CHECK(r.values.minCoeff() >= 0.0);
  for (Eigen::Index b = 0; b < 6; ++b) {
    for (Eigen::Index m = 1; m < r.values.rows(); ++m) CHECK(r.values(m, b) <= r.values(m - 1, b));
    CHECK(r.values(0, b) == doctest::Approx(e.col(b).sum()).epsilon(1e-12));
  }
  CHECK(r.values.row(29) == e.row(29));
  CHECK(r.band_centers == kBandCenters);
  REQUIRE(r.frame_times.size() == 30);
  CHECK(r.frame_times[0] == doctest::Approx(128.0 / 16000.0));

  auto scaled = ir;
  for (auto& v : scaled) v *= 3.0;
  CHECK((edr(scaled).values - 9.0 * r.values).cwiseAbs().maxCoeff() <= 1e-10 * r.values.maxCoeff());
  CHECK(edr(std::vector<double>(3968, 0.0)).values.isZero(0.0));
}

TEST_CASE("edc basics") {
  const auto ir = exponential_noise(0.4, 4000, 7);
  const auto c = edc(ir);
  CHECK(c[0] == 0.0);
  for (std::size_t i = 1; i < c.size(); ++i) CHECK(c[i] <= c[i - 1]);

  auto scaled = ir;
  for (auto& v : scaled) v *= 1e-4;
  const auto cs = edc(scaled);
  for (std::size_t i = 0; i < c.size(); i += 50) CHECK(cs[i] == doctest::Approx(c[i]).epsilon(1e-9).scale(1.0));

  std::vector<double> point(100, 0.0);
  point[40] = 0.7;
  const auto cp = edc(point);
  for (std::size_t i = 0; i <= 40; ++i) CHECK(cp[i] == 0.0);
  for (std::size_t i = 41; i < 100; ++i) CHECK(std::isinf(cp[i]));

  CHECK_THROWS_AS(edc(std::vector<double>(10, 0.0)), AcousticsError);
}

TEST_CASE("edc of an exponential envelope is a straight line") {
  const auto ir = exponential_noise(0.4, 16000, 8);
  const auto c = edc(ir);
  std::vector<double> t, y;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (c[i] <= -5.0 && c[i] >= -25.0) {
      t.push_back(double(i) / kAnalysisRate);
      y.push_back(c[i]);
    }
  }
  const auto fit = fit_line(t, y);
  CHECK(fit.r_squared >= 0.999);
}

TEST_CASE("t60 recovers the envelope decay rate") {
  CHECK(t60(exponential_noise(0.4, 16000, 9), kAnalysisRate) == doctest::Approx(0.4).epsilon(0.05));
  CHECK(t60(exponential_noise(0.2, 16000, 9), kAnalysisRate) == doctest::Approx(0.2).epsilon(0.05));
  auto ir = exponential_noise(0.4, 16000, 10);
  const double base = t60(ir, kAnalysisRate);
  for (auto& v : ir) v *= 123.0;
  CHECK(t60(ir, kAnalysisRate) == doctest::Approx(base).epsilon(1e-9));
  // Same samples played at double rate decay twice as fast.
  CHECK(t60(ir, 2 * kAnalysisRate) == doctest::Approx(base / 2).epsilon(1e-9));
}

TEST_CASE("t60 needs 25 dB of decay") {
  std::vector<double> shallow(2000, 0.0);
  shallow[0] = 1.0;
  shallow[1] = 0.5;
  shallow[2] = 0.25;  // energy stops about 13 dB down
  CHECK_THROWS_AS(t60(shallow, kAnalysisRate), AcousticsError);
  CHECK_NOTHROW(edt(shallow, kAnalysisRate));
  std::vector<double> impulse(2000, 0.0);
  impulse[3] = 1.0;
  CHECK_THROWS_AS(edt(impulse, kAnalysisRate), AcousticsError);
}

TEST_CASE("edt on a constructed linear decay") {
  // Energy falls 10 dB every 0.05 s: r^(2*800) = 0.1.
  const double r = std::pow(10.0, -1.0 / 1600.0);
  std::vector<double> ir(16000);
  for (std::size_t i = 0; i < ir.size(); ++i) ir[i] = std::pow(r, double(i));
  CHECK(edt(ir, kAnalysisRate) == doctest::Approx(0.3).epsilon(0.02));

  const auto noisy = exponential_noise(0.5, 16000, 12);
  CHECK(edt(noisy, kAnalysisRate) == doctest::Approx(t60(noisy, kAnalysisRate)).epsilon(0.05));
  auto scaled = noisy;
  for (auto& v : scaled) v *= 0.001;
  CHECK(edt(scaled, kAnalysisRate) == doctest::Approx(edt(noisy, kAnalysisRate)).epsilon(1e-9));
}

TEST_CASE("drr examples") {
  std::vector<double> ir(4000, 0.0);
  ir[100] = 1.0;
  ir[1000] = 0.3;
  ir[2000] = 0.4;  // tail energy 0.09 + 0.16 = 0.25
  const auto d = drr(ir, kAnalysisRate);
  CHECK_FALSE(d.infinite);
  CHECK(d.db == doctest::Approx(10.0 * std::log10(4.0)).epsilon(1e-12));
  CHECK(std::abs(d.db - 6.02) <= 0.05);

  // Samples within 40 samples of the peak count as direct sound.
  std::vector<double> near = ir;
  near[130] = 0.5;
  CHECK(drr(near, kAnalysisRate).db == doctest::Approx(10.0 * std::log10(1.25 / 0.25)));

  std::vector<double> equal(4000, 0.0);
  equal[10] = 1.0;
  equal[3000] = -1.0;
  CHECK(std::abs(drr(equal, kAnalysisRate).db) <= 1e-12);

  std::vector<double> pure(4000, 0.0);
  pure[5] = 2.0;
  CHECK(drr(pure, kAnalysisRate).infinite);
  CHECK_THROWS_AS(drr(std::vector<double>(10, 0.0), kAnalysisRate), AcousticsError);
}

TEST_CASE("power spectrum") {
  std::vector<double> impulse(1024, 0.0);
  impulse[0] = 1.0;
  const auto flat = power_spectrum(impulse, kAnalysisRate);
  REQUIRE(flat.db.size() == 513);
  for (double v : flat.db) CHECK(std::abs(v) <= 1e-6);
  CHECK(flat.frequencies.back() == doctest::Approx(8000.0));

  const auto tone = power_spectrum(sine(1000.0, 4000), kAnalysisRate);
  const auto peak = std::max_element(tone.power.begin(), tone.power.end()) - tone.power.begin();
  CHECK(tone.frequencies[static_cast<std::size_t>(peak)] == doctest::Approx(1000.0));

  for (std::size_t n : {1000u, 1001u}) {
    const auto x = exponential_noise(0.1, n, 13);
    const auto ps = power_spectrum(x, kAnalysisRate);
    double total = ps.power[0];
    for (std::size_t k = 1; k < ps.power.size(); ++k) {
      total += (n % 2 == 0 && k == n / 2) ? ps.power[k] : 2.0 * ps.power[k];
    }
    CHECK(total / double(n) == doctest::Approx(energy(x)).epsilon(1e-9));
  }
}
