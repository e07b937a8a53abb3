#include <doctest.h>

#include <numeric>
#include <random>

#include "encoder_oracle.hpp"
#include "roomir/encoder.hpp"
#include "test_support.hpp"

using namespace roomir;
using namespace roomir::testing;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

SceneGraph random_scene_graph(std::size_t n, std::mt19937_64& rng) {
  SceneGraph g;
  g.node_features = random_matrix(static_cast<Eigen::Index>(n), 3, rng);
  // Ring plus random chords keeps every node connected.
  std::bernoulli_distribution coin(0.3);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t j = i + 1; j < n; ++j) {
      if (j == i + 1 || (i == 0 && j == n - 1) || coin(rng)) g.edges.emplace_back(i, j);
    }
  }
  return g;
}

}  // namespace

TEST_CASE("gcn_layer hand-evaluated examples") {
  const auto two = topology_from_edges(2, {{0, 1}});
  Eigen::MatrixXd x(2, 1);
  x << 1, 3;
  const Eigen::MatrixXd w = Eigen::MatrixXd::Ones(1, 1);
  const auto out = gcn_layer(two, x, w, Activation::kIdentity);
  CHECK(out(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(out(1, 0) == doctest::Approx(2.0).epsilon(1e-12));

  const auto one = topology_from_edges(1, {});
  Eigen::MatrixXd x1(1, 1), w1(1, 1);
  x1 << 5;
  w1 << 2;
  CHECK(gcn_layer(one, x1, w1, Activation::kIdentity)(0, 0) == doctest::Approx(10.0));

  std::mt19937_64 rng(1);
  const auto g = random_topology(7, 0.5, rng);
  const auto zero = gcn_layer(g, random_matrix(7, 4, rng), Eigen::MatrixXd::Zero(4, 3), Activation::kRelu);
  CHECK(zero.isZero(0.0));
}

TEST_CASE("gcn_layer rejects shape mismatches") {
  const auto g = topology_from_edges(3, {{0, 1}, {1, 2}});
  CHECK_THROWS_AS(gcn_layer(g, Eigen::MatrixXd::Ones(2, 3), Eigen::MatrixXd::Ones(3, 1), Activation::kRelu), EncoderError);
  CHECK_THROWS_AS(gcn_layer(g, Eigen::MatrixXd::Ones(3, 3), Eigen::MatrixXd::Ones(2, 1), Activation::kRelu), EncoderError);
}

TEST_CASE("gcn_layer equals the dense rule on all connected graphs up to 5 nodes") {
  std::mt19937_64 rng(2);
  double worst = 0.0;
  std::size_t total = 0;
  for (std::size_t n = 1; n <= 5; ++n) {
    const Eigen::MatrixXd x = random_matrix(static_cast<Eigen::Index>(n), 3, rng);
    const Eigen::MatrixXd w = random_matrix(3, 4, rng);
    total += for_each_connected_graph(n, [&](const GraphTopology& g) {
      for (bool relu : {false, true}) {
        const auto fast = gcn_layer(g, x, w, relu ? Activation::kRelu : Activation::kIdentity);
        worst = std::max(worst, (fast - dense_gcn(g, x, w, relu)).cwiseAbs().maxCoeff());
      }
    });
  }
  CHECK(total == 1 + 1 + 4 + 38 + 728);
  CHECK(worst <= 1e-6);
}

TEST_CASE("gcn_layer is permutation equivariant") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 3 + trial % 9;
    const auto g = random_topology(n, 0.4, rng);
    const Eigen::MatrixXd x = random_matrix(static_cast<Eigen::Index>(n), 3, rng);
    const Eigen::MatrixXd w = random_matrix(3, 5, rng);
    std::vector<std::uint32_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0u);
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::MatrixXd px(x.rows(), x.cols());
    for (std::size_t i = 0; i < n; ++i) px.row(perm[i]) = x.row(static_cast<Eigen::Index>(i));
    const auto out = gcn_layer(g, x, w, Activation::kRelu);
    const auto pout = gcn_layer(permute_topology(g, perm), px, w, Activation::kRelu);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK((pout.row(perm[i]) - out.row(static_cast<Eigen::Index>(i))).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
}

TEST_CASE("gpool reconnects a path graph through A squared") {
  const auto path = topology_from_edges(3, {{0, 1}, {1, 2}});
  const Eigen::MatrixXd a = dense_adjacency(path);
  CHECK((a * a)(0, 2) == 1.0);

  // Score the endpoints highest so both survive a 2-of-3 pool.
  Eigen::MatrixXd x(3, 1);
  x << 2.0, -1.0, 1.0;
  Eigen::VectorXd p(1);
  p << 1.0;
  const auto pooled = gpool(path, x, 0.6, p);
  REQUIRE(pooled.kept == std::vector<std::uint32_t>{0, 2});
  REQUIRE(pooled.graph.num_nodes() == 2);
  CHECK(pooled.graph.neighbours[0] == std::vector<std::uint32_t>{1});
  CHECK(pooled.graph.neighbours[1] == std::vector<std::uint32_t>{0});
}

TEST_CASE("gpool keeps ceil(ratio * N) nodes") {
  for (std::size_t n = 1; n <= 200; ++n) CHECK(pooled_size(n, 0.6) == (6 * n + 9) / 10);
  CHECK(pooled_size(10, 0.6) == 6);

  std::mt19937_64 rng(5);
  const auto g = random_topology(10, 0.4, rng);
  const auto pooled = gpool(g, random_matrix(10, 4, rng), 0.6, random_matrix(4, 1, rng).col(0));
  CHECK(pooled.kept.size() == 6);
  CHECK(pooled.features.rows() == 6);
}

TEST_CASE("gpool with ratio 1 keeps every node and gates by sigmoid") {
  const auto g = topology_from_edges(4, {{0, 1}, {1, 2}, {2, 3}});
  Eigen::MatrixXd x(4, 2);
  x << 1, 0, 2, 0, 3, 0, 4, 0;
  Eigen::VectorXd p(2);
  p << 2.0, 0.0;  // unit projection picks column 0
  const auto pooled = gpool(g, x, 1.0, p);
  REQUIRE(pooled.kept.size() == 4);
  std::vector<std::uint32_t> sorted = pooled.kept;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<std::uint32_t>{0, 1, 2, 3});
  for (std::size_t r = 0; r < 4; ++r) {
    const auto node = pooled.kept[r];
    const double y = x(node, 0);
    CHECK(pooled.features(static_cast<Eigen::Index>(r), 0) == doctest::Approx(y / (1.0 + std::exp(-y))));
  }
}

TEST_CASE("gpool keeps a permutation-invariant node set") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 5 + trial;
    const auto g = random_topology(n, 0.3, rng);
    const Eigen::MatrixXd x = random_matrix(static_cast<Eigen::Index>(n), 3, rng);
    const Eigen::VectorXd p = random_matrix(3, 1, rng).col(0);
    std::vector<std::uint32_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0u);
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::MatrixXd px(x.rows(), x.cols());
    for (std::size_t i = 0; i < n; ++i) px.row(perm[i]) = x.row(static_cast<Eigen::Index>(i));
    const auto a = gpool(g, x, 0.6, p);
    const auto b = gpool(permute_topology(g, perm), px, 0.6, p);
    std::vector<std::uint32_t> mapped;
    for (auto k : a.kept) mapped.push_back(perm[k]);
    CHECK(mapped == b.kept);
    CHECK((a.features - b.features).cwiseAbs().maxCoeff() <= 1e-12);
    for (std::size_t r = 0; r < a.kept.size(); ++r) CHECK(a.graph.neighbours[r] == b.graph.neighbours[r]);
  }
}

TEST_CASE("gpool errors") {
  const auto g = topology_from_edges(0, {});
  CHECK_THROWS_AS(gpool(g, Eigen::MatrixXd(0, 2), 0.6, Eigen::VectorXd::Ones(2)), EncoderError);
  const auto g2 = topology_from_edges(2, {{0, 1}});
  CHECK_THROWS_AS(gpool(g2, Eigen::MatrixXd::Ones(2, 2), 0.0, Eigen::VectorXd::Ones(2)), EncoderError);
  CHECK_THROWS_AS(gpool(g2, Eigen::MatrixXd::Ones(2, 2), 1.5, Eigen::VectorXd::Ones(2)), EncoderError);
}

TEST_CASE("readout computes column means and maxima") {
  Eigen::MatrixXd x(2, 2);
  x << 1, 4, 3, 2;
  auto r = readout(x);
  CHECK(r.gap == Eigen::Vector2d(2, 3));
  CHECK(r.gmp == Eigen::Vector2d(3, 4));

  Eigen::MatrixXd row(1, 3);
  row << 1, -2, 5;
  r = readout(row);
  CHECK(r.gap == row.row(0).transpose());
  CHECK(r.gmp == row.row(0).transpose());

  Eigen::MatrixXd swapped(2, 2);
  swapped << 3, 2, 1, 4;
  CHECK(readout(swapped).gap == Eigen::Vector2d(2, 3));
  CHECK(readout(swapped).gmp == Eigen::Vector2d(3, 4));
  CHECK_THROWS_AS(readout(Eigen::MatrixXd(0, 2)), EncoderError);
}

TEST_CASE("encode_mesh produces an 8-dim latent") {
  std::mt19937_64 rng(7);
  const auto params = EncoderParameters::random({}, 99);
  for (std::size_t n : {1, 2, 3, 10, 42}) {
    const auto latent = encode_mesh(random_scene_graph(n, rng), params);
    CHECK(latent.size() == 8);
    CHECK(latent.allFinite());
  }
  CHECK_THROWS_AS(encode_mesh(SceneGraph{}, params), EncoderError);
}

TEST_CASE("encode_mesh with zero weights returns the readout bias") {
  auto params = EncoderParameters::random({}, 1).zeros_like();
  params.fc1_bias.setConstant(0.5);
  params.fc2_bias << 1, 2, 3, 4, 5, 6, 7, 8;
  std::mt19937_64 rng(8);
  const auto latent = encode_mesh(random_scene_graph(12, rng), params);
  CHECK(latent == params.fc2_bias);
}

TEST_CASE("encode_mesh is invariant to vertex relabeling") {
  std::mt19937_64 rng(9);
  const auto params = EncoderParameters::random({}, 2024);
  for (int trial = 0; trial < 10; ++trial) {
    const auto mesh = random_blob(rng, 1);
    const auto shuffled = permute_mesh(mesh, rng);
    const auto a = encode_mesh(mesh_to_graph(mesh), params);
    const auto b = encode_mesh(mesh_to_graph(shuffled), params);
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-5);
  }
}

TEST_CASE("encoder parameter validation") {
  auto params = EncoderParameters::random({}, 3);
  CHECK_NOTHROW(params.validate());
  params.gcn_weights[1] = Eigen::MatrixXd::Ones(5, 32);
  CHECK_THROWS_AS(params.validate(), EncoderError);
  params = EncoderParameters::random({}, 3);
  params.fc2_bias[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(params.validate(), EncoderError);
}

TEST_CASE("encode_mesh gradients match central finite differences") {
  std::mt19937_64 rng(10);
  const auto graph = random_scene_graph(10, rng);
  auto params = EncoderParameters::random({}, 77);
  const Eigen::VectorXd direction = random_matrix(8, 1, rng).col(0);
  auto objective = [&](const EncoderParameters& p) { return encode_mesh(graph, p).dot(direction); };

  EncoderTrace trace;
  encode_mesh(graph, params, trace);
  auto grads = params.zeros_like();
  encode_mesh_backward(trace, params, direction, grads);

  const double h = 1e-4;
  std::size_t checked = 0, failures = 0;
  auto probe = [&](Eigen::Ref<Eigen::MatrixXd> value, const Eigen::MatrixXd& analytic) {
    for (Eigen::Index i = 0; i < value.size(); ++i) {
      const double saved = value.data()[i];
      value.data()[i] = saved + h;
      const double up = objective(params);
      value.data()[i] = saved - h;
      const double down = objective(params);
      value.data()[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double exact = analytic.data()[i];
      const double scale = std::max({std::abs(numeric), std::abs(exact), 1e-4});
      if (std::abs(numeric - exact) > 1e-3 * scale) ++failures;
      ++checked;
    }
  };
  for (std::size_t s = 0; s < params.gcn_weights.size(); ++s) {
    probe(params.gcn_weights[s], grads.gcn_weights[s]);
    probe(params.pool_vectors[s], grads.pool_vectors[s]);
  }
  probe(params.fc1_weight, grads.fc1_weight);
  probe(params.fc1_bias, grads.fc1_bias);
  probe(params.fc2_weight, grads.fc2_weight);
  probe(params.fc2_bias, grads.fc2_bias);
  CHECK(checked > 3000);
  CHECK(failures == 0);
}

TEST_CASE("build_embedding concatenates latent, source, listener") {
  const std::vector<double> latent(8, 0.0), sp{1, 2, 3}, lp{4, 5, 6};
  const auto e = build_embedding(latent, sp, lp);
  const std::array<double, 14> expected{0, 0, 0, 0, 0, 0, 0, 0, 1, 2, 3, 4, 5, 6};
  CHECK(e.values == expected);
  CHECK(e.values.size() == 8 + 3 + 3);
  CHECK(build_embedding(latent, lp, sp).values != e.values);
  CHECK_THROWS_AS(build_embedding(std::vector<double>(7, 0.0), sp, lp), EncoderError);
  CHECK_THROWS_AS(build_embedding(latent, std::vector<double>{1, 2}, lp), EncoderError);
}
