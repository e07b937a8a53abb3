#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "roomir/cgan.hpp"

using namespace roomir;
using MatD = nn::Mat<double>;
using MatF = nn::Mat<float>;

namespace {

MatD random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

double dot(const MatD& a, const MatD& b) { return (a.array() * b.array()).sum(); }

std::vector<double> decaying_noise(std::size_t n, double decay, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = g(rng) * std::exp(-double(i) / decay);
  return x;
}

GeneratorConfig tiny_generator() {
  GeneratorConfig cfg;
  cfg.base_channels = 4;
  cfg.base_length = 4;
  cfg.channels = {3, 2};
  cfg.kernel = 5;
  cfg.stride = 2;
  return cfg;
}

DiscriminatorConfig tiny_discriminator(int input_channels) {
  DiscriminatorConfig cfg;
  cfg.input_channels = input_channels;
  cfg.input_length = 32;
  cfg.cond_channels = 2;
  cfg.channels = {3, 4};
  cfg.kernel = 5;
  cfg.stride = 2;
  return cfg;
}

// Central difference over every entry of m (or the first `limit`).
void check_gradient(MatD& m, const MatD& analytic, const std::function<double()>& f, Eigen::Index limit = -1) {
  const double h = 1e-6;
  const Eigen::Index n = limit < 0 ? m.size() : std::min(limit, m.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double keep = m.data()[i];
    m.data()[i] = keep + h;
    const double up = f();
    m.data()[i] = keep - h;
    const double down = f();
    m.data()[i] = keep;
    CHECK(analytic.data()[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-5).scale(1.0));
  }
}

}  // namespace

TEST_CASE("generator emits 4096 bounded samples per embedding") {
  Generator<float> g(GeneratorConfig{}, 1);
  CHECK(g.output_length() == 4096);
  std::mt19937_64 rng(1);
  const MatF e = random_mat(14, 3, rng, 3.0).cast<float>();
  const MatF y = g.forward(e);
  CHECK(y.rows() == 4096);
  CHECK(y.cols() == 3);
  CHECK(y.allFinite());
  CHECK(y.cwiseAbs().maxCoeff() <= 8.0f);
  CHECK(y.cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("generator is deterministic") {
  std::mt19937_64 rng(2);
  const MatF e = random_mat(14, 1, rng).cast<float>();
  Generator<float> a(GeneratorConfig{}, 5), b(GeneratorConfig{}, 5), c(GeneratorConfig{}, 6);
  const MatF ya = a.forward(e);
  CHECK(ya == a.forward(e));
  CHECK(ya == b.forward(e));
  CHECK(ya != c.forward(e));
}

TEST_CASE("a batch of 128 matches 128 single generations bit for bit") {
  Generator<float> g(GeneratorConfig{}, 3);
  std::mt19937_64 rng(3);
  const MatF e = random_mat(14, 128, rng, 2.0).cast<float>();
  const MatF batch = g.forward(e);
  int mismatched = 0;
  for (Eigen::Index b = 0; b < 128; ++b) {
    const MatF one = g.forward(e.col(b));
    if (one.col(0) != batch.col(b)) ++mismatched;
  }
  CHECK(mismatched == 0);
}

TEST_CASE("generator config validation") {
  auto cfg = GeneratorConfig{};
  cfg.kernel = 40;
  CHECK_THROWS_AS(Generator<float>{cfg}, ModelError);
  cfg = GeneratorConfig{};
  cfg.output_scale = 0.0;
  CHECK_THROWS_AS(Generator<float>{cfg}, ModelError);
  Generator<float> g;
  g = Generator<float>(GeneratorConfig{});
  CHECK_THROWS_AS(g.forward(MatF::Zero(13, 1)), ModelError);
  auto params = g.parameters();
  (*params.front().value)(0, 0) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(g.validate(), ModelError);
}

TEST_CASE("generator gradients match finite differences") {
  Generator<double> g(tiny_generator(), 7);
  std::mt19937_64 rng(7);
  MatD e = random_mat(14, 2, rng);
  const MatD y = g.forward(e);
  CHECK(y.rows() == 16);
  const MatD r = random_mat(y.rows(), y.cols(), rng);
  auto loss = [&] { return dot(g.forward(e), r); };
  g.forward(e);
  g.zero_grad();
  const MatD de = g.backward(r);
  check_gradient(e, de, loss);
  for (auto& p : g.parameters()) {
    INFO(p.name);
    check_gradient(*p.value, *p.grad, loss, 40);
  }
}

TEST_CASE("discriminator gradients match finite differences") {
  for (int channels : {1, 6}) {
    Discriminator<double> d(tiny_discriminator(channels), 9);
    std::mt19937_64 rng(9);
    MatD x = random_mat(channels, 3 * 32, rng);
    MatD e = random_mat(14, 3, rng);
    const std::vector<double> w{0.7, -1.3, 0.4};
    auto loss = [&] {
      const auto logits = d.forward(x, e);
      return w[0] * logits[0] + w[1] * logits[1] + w[2] * logits[2];
    };
    d.forward(x, e);
    d.zero_grad();
    const auto grads = d.backward(w, true);
    check_gradient(x, grads.input, loss, 60);
    check_gradient(e, grads.embeddings, loss);
    for (auto& p : d.parameters()) {
      INFO(p.name);
      check_gradient(*p.value, *p.grad, loss, 40);
    }
  }
}

TEST_CASE("discriminator outputs probabilities and enforces its input form") {
  std::mt19937_64 rng(11);
  Discriminator<float> full(DiscriminatorConfig{}, 2);
  const auto p = full.probabilities(random_mat(1, 2 * 4096, rng).cast<float>(), random_mat(14, 2, rng).cast<float>());
  REQUIRE(p.size() == 2);
  for (float v : p) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
  CHECK_THROWS_AS(full.forward(MatF::Zero(6, 3968), MatF::Zero(14, 1)), ModelError);

  DiscriminatorConfig edr_cfg;
  edr_cfg.input_channels = 6;
  edr_cfg.input_length = 3968;
  CHECK(edr_cfg.final_length() == 16);
  Discriminator<float> edr(edr_cfg, 2);
  CHECK_THROWS_AS(edr.forward(MatF::Zero(1, 4096), MatF::Zero(14, 1)), ModelError);
  const auto q = edr.probabilities(MatF::Zero(6, 3968), MatF::Zero(14, 1));
  CHECK(q[0] > 0.0f);
  CHECK(q[0] < 1.0f);
}

TEST_CASE("adversarial loss examples") {
  CHECK(loss_cgan(std::vector{0.5}) == doctest::Approx(-0.6931).epsilon(1e-4));
  CHECK(loss_cgan(std::vector{1e-12}) <= 0.0);
  CHECK(loss_cgan(std::vector{1e-12}) > -1e-6);
  CHECK(loss_cgan(std::vector{1.0}) == doctest::Approx(std::log(1e-7)));
  CHECK(loss_cgan(std::vector{0.9}) < loss_cgan(std::vector{0.5}));

  CHECK(std::abs(loss_discriminator(std::vector{1.0}, std::vector{0.0})) < 1e-6);
  CHECK(loss_discriminator(std::vector{0.5}, std::vector{0.5}) == doctest::Approx(-1.386).epsilon(1e-3));
  const double worst = loss_discriminator(std::vector{0.0}, std::vector{1.0});
  CHECK(std::isfinite(worst));
  CHECK(worst == doctest::Approx(2 * std::log(1e-7)));
  CHECK_THROWS_AS(loss_cgan(std::vector<double>{}), ModelError);
}

TEST_CASE("logit-space adversarial gradients") {
  const std::vector<double> fake{-1.2, 0.3, 2.5}, real{0.8, -0.4};
  auto probs = [](const std::vector<double>& l) {
    std::vector<double> p;
    for (double v : l) p.push_back(sigmoid(v));
    return p;
  };
  const auto g = loss_cgan_from_logits(fake);
  CHECK(g.value == doctest::Approx(loss_cgan(probs(fake))));
  const auto d = loss_discriminator_from_logits(real, fake);
  CHECK(d.value == doctest::Approx(loss_discriminator(probs(real), probs(fake))));
  const double h = 1e-6;
  for (std::size_t i = 0; i < fake.size(); ++i) {
    auto up = fake, down = fake;
    up[i] += h;
    down[i] -= h;
    CHECK(g.d_logits[i] == doctest::Approx((loss_cgan(probs(up)) - loss_cgan(probs(down))) / (2 * h)));
    const double nd = -(loss_discriminator(probs(real), probs(up)) - loss_discriminator(probs(real), probs(down))) / (2 * h);
    CHECK(d.d_fake_logits[i] == doctest::Approx(nd));
  }
  for (std::size_t i = 0; i < real.size(); ++i) {
    auto up = real, down = real;
    up[i] += h;
    down[i] -= h;
    const double nd = -(loss_discriminator(probs(up), probs(fake)) - loss_discriminator(probs(down), probs(fake))) / (2 * h);
    CHECK(d.d_real_logits[i] == doctest::Approx(nd));
  }
  // Saturated logits sit on the clamp but still pass the log-sigmoid gradient.
  const auto sat = loss_cgan_from_logits(std::vector{40.0});
  CHECK(sat.value == doctest::Approx(std::log(1e-7)));
  CHECK(sat.d_logits[0] == doctest::Approx(-1.0));
  const auto dsat = loss_discriminator_from_logits(std::vector{-40.0}, std::vector{40.0});
  CHECK(dsat.value == doctest::Approx(2 * std::log(1e-7)));
  CHECK(dsat.d_real_logits[0] == doctest::Approx(-1.0));
  CHECK(dsat.d_fake_logits[0] == doctest::Approx(1.0));
}

TEST_CASE("mse and combined generator loss") {
  const auto truth = decaying_noise(4096, 800, 1);
  auto shifted = truth;
  for (auto& v : shifted) v += 0.01;
  CHECK(loss_mse(truth, truth) == 0.0);
  CHECK(loss_mse(shifted, truth) == doctest::Approx(1e-4).epsilon(1e-9));
  CHECK(loss_mse(truth, shifted) >= 0.0);
  CHECK_THROWS_AS(loss_mse(std::vector<double>(3), std::vector<double>(4)), ModelError);

  CHECK(loss_generator(-0.69, 0.02, 0.001, 1.0, 10.0) == doctest::Approx(-0.66));
  CHECK(loss_generator(-0.42, 3.0, 5.0, 0.0, 0.0) == -0.42);
}

TEST_CASE("edr loss identity, symmetry and band weighting") {
  const auto a = decaying_noise(4096, 600, 2), b = decaying_noise(4096, 900, 3);
  CHECK(loss_edr(a, a) == 0.0);
  const double ab = loss_edr(a, b);
  CHECK(ab > 0.0);
  CHECK(loss_edr(b, a) == doctest::Approx(ab).epsilon(1e-12));

  EdrLossConfig heavy;
  heavy.band_weights[0] *= 2.0;
  CHECK(loss_edr(a, b, heavy) > ab);

  // The tag region is outside the EDR body.
  auto tagged = a;
  for (std::size_t i = 3968; i < 4096; ++i) tagged[i] = 5.0;
  CHECK(loss_edr(tagged, a) == 0.0);

  EdrLossConfig bad;
  bad.band_weights[2] = 0.0;
  CHECK_THROWS_AS(loss_edr(a, b, bad), ModelError);
  CHECK_THROWS_AS(loss_edr(std::vector<double>(100), std::vector<double>(100)), ModelError);
}

TEST_CASE("generator reconstruction gradient matches finite differences on a 64-sample toy") {
  EdrLossConfig cfg;
  cfg.body_length = 56;
  cfg.stft = StftConfig{32, 16, false};
  const auto truth = decaying_noise(64, 20, 4);
  auto gen = decaying_noise(64, 30, 5);
  const double lambda_edr = 1.0, lambda_mse = 10.0;
  auto total = [&](const std::vector<double>& x) {
    return lambda_mse * loss_mse(x, truth) + lambda_edr * loss_edr(x, truth, cfg);
  };
  const auto mse = loss_mse_with_grad(gen, truth);
  const auto edr = loss_edr_with_grad(gen, truth, cfg);
  CHECK(mse.value == doctest::Approx(loss_mse(gen, truth)));
  CHECK(edr.value == doctest::Approx(loss_edr(gen, truth, cfg)));
  const double h = 1e-4;
  for (std::size_t i = 0; i < gen.size(); ++i) {
    const double analytic = lambda_mse * mse.grad[i] + lambda_edr * edr.grad[i];
    auto up = gen, down = gen;
    up[i] += h;
    down[i] -= h;
    const double numeric = (total(up) - total(down)) / (2 * h);
    INFO("sample " << i);
    CHECK(std::abs(analytic - numeric) <= 1e-3 * std::abs(numeric));
  }
  for (std::size_t i = 56; i < 64; ++i) CHECK(edr.grad[i] == 0.0);
}

TEST_CASE("edr features and their backward pass") {
  const auto body = decaying_noise(3968, 700, 6);
  const auto f = edr_features(body);
  CHECK(f.features.rows() == 6);
  CHECK(f.features.cols() == 3968);
  CHECK(f.features.allFinite());
  CHECK((f.features.array() >= 0.0).all());
  for (Eigen::Index m = 1; m < f.features.cols(); ++m) CHECK((f.features.col(m).array() <= f.features.col(m - 1).array()).all());

  const auto small = decaying_noise(300, 60, 7);
  std::mt19937_64 rng(8);
  const MatD r = random_mat(6, 300, rng);
  const auto fs = edr_features(small);
  const auto grad = edr_features_backward(small, fs, r);
  REQUIRE(grad.size() == 300);
  const double h = 1e-5;
  for (std::size_t i = 0; i < 300; i += 7) {
    auto up = small, down = small;
    up[i] += h;
    down[i] -= h;
    const double numeric = (dot(edr_features(up).features, r) - dot(edr_features(down).features, r)) / (2 * h);
    CHECK(grad[i] == doctest::Approx(numeric).epsilon(1e-5));
  }
}
