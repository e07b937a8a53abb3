#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "roomir/encoder.hpp"

namespace roomir {

GraphTopology GraphTopology::from(const SceneGraph& graph) {
  return GraphTopology{graph.adjacency_lists()};
}

NormalizedAdjacency normalize_adjacency(const GraphTopology& graph) {
  const auto n = graph.num_nodes();
  std::vector<double> inv_sqrt_degree(n);
  for (std::size_t i = 0; i < n; ++i) {
    inv_sqrt_degree[i] = 1.0 / std::sqrt(static_cast<double>(graph.neighbours[i].size() + 1));
  }
  NormalizedAdjacency adj;
  adj.rows.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& row = adj.rows[i];
    row.reserve(graph.neighbours[i].size() + 1);
    bool self_done = false;
    for (auto j : graph.neighbours[i]) {
      if (!self_done && j > i) {
        row.emplace_back(static_cast<std::uint32_t>(i), inv_sqrt_degree[i] * inv_sqrt_degree[i]);
        self_done = true;
      }
      row.emplace_back(j, inv_sqrt_degree[i] * inv_sqrt_degree[j]);
    }
    if (!self_done) row.emplace_back(static_cast<std::uint32_t>(i), inv_sqrt_degree[i] * inv_sqrt_degree[i]);
  }
  return adj;
}

Eigen::MatrixXd propagate(const NormalizedAdjacency& adj, const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.rows(), x.cols());
  for (std::size_t i = 0; i < adj.rows.size(); ++i) {
    for (const auto& [j, w] : adj.rows[i]) out.row(static_cast<Eigen::Index>(i)) += w * x.row(j);
  }
  return out;
}

namespace {

void check_graph(const GraphTopology& graph, const Eigen::MatrixXd& x) {
  if (static_cast<std::size_t>(x.rows()) != graph.num_nodes()) {
    throw EncoderError(fmt::format("feature rows {} do not match node count {}", x.rows(),
                                   graph.num_nodes()));
  }
}

Eigen::MatrixXd relu(const Eigen::MatrixXd& m) { return m.cwiseMax(0.0); }

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

Eigen::MatrixXd gcn_layer(const GraphTopology& graph, const Eigen::MatrixXd& x,
                          const Eigen::MatrixXd& w, Activation activation) {
  check_graph(graph, x);
  if (x.cols() != w.rows()) {
    throw EncoderError(fmt::format("gcn_layer: feature width {} does not match weight rows {}",
                                   x.cols(), w.rows()));
  }
  Eigen::MatrixXd out = propagate(normalize_adjacency(graph), x) * w;
  return activation == Activation::kRelu ? relu(out) : out;
}

std::size_t pooled_size(std::size_t nodes, double keep_ratio) {
  // The epsilon absorbs representation error in products such as 0.6 * 5.
  const auto k = static_cast<std::size_t>(std::ceil(keep_ratio * static_cast<double>(nodes) - 1e-9));
  return std::clamp<std::size_t>(k, nodes == 0 ? 0 : 1, nodes);
}

PoolResult gpool(const GraphTopology& graph, const Eigen::MatrixXd& x, double keep_ratio,
                 const Eigen::VectorXd& projection) {
  check_graph(graph, x);
  const auto n = graph.num_nodes();
  if (n == 0) throw EncoderError("gpool: empty graph");
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw EncoderError("gpool: keep_ratio must lie in (0, 1]");
  if (projection.size() != x.cols()) throw EncoderError("gpool: projection width mismatch");

  PoolResult out;
  const double norm = projection.norm();
  // A zero projection scores every node equally; ties then keep the lowest indices.
  out.scores = norm > 0.0 ? Eigen::VectorXd(x * (projection / norm)) : Eigen::VectorXd::Zero(x.rows());

  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return out.scores[a] > out.scores[b]; });
  const auto k = pooled_size(n, keep_ratio);
  out.kept.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));

  out.features.resize(static_cast<Eigen::Index>(k), x.cols());
  for (std::size_t r = 0; r < k; ++r) {
    out.features.row(static_cast<Eigen::Index>(r)) = x.row(out.kept[r]) * sigmoid(out.scores[out.kept[r]]);
  }

  // Boolean (A*A) restricted to the kept nodes, self-connections dropped.
  std::vector<std::int64_t> slot(n, -1);
  for (std::size_t r = 0; r < k; ++r) slot[out.kept[r]] = static_cast<std::int64_t>(r);
  out.graph.neighbours.resize(k);
  std::vector<std::uint32_t> stamp(n, UINT32_MAX);
  for (std::size_t r = 0; r < k; ++r) {
    const auto i = out.kept[r];
    auto& nb = out.graph.neighbours[r];
    for (auto mid : graph.neighbours[i]) {
      for (auto j : graph.neighbours[mid]) {
        if (j == i || slot[j] < 0 || stamp[j] == r) continue;
        stamp[j] = static_cast<std::uint32_t>(r);
        nb.push_back(static_cast<std::uint32_t>(slot[j]));
      }
    }
    std::sort(nb.begin(), nb.end());
  }
  return out;
}

ReadoutResult readout(const Eigen::MatrixXd& x) {
  if (x.rows() == 0) throw EncoderError("readout: empty feature matrix");
  return {x.colwise().mean().transpose(), x.colwise().maxCoeff().transpose()};
}

EncoderParameters EncoderParameters::random(const EncoderConfig& config, std::uint64_t seed) {
  if (config.stages < 1 || config.hidden < 1 || config.readout_hidden < 1 || config.latent < 1) {
    throw EncoderError("encoder config sizes must be positive");
  }
  std::mt19937_64 rng(seed);
  auto uniform = [&](Eigen::Index rows, Eigen::Index cols, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c) {
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = dist(rng);
    }
    return m;
  };

  EncoderParameters p;
  p.keep_ratio = config.keep_ratio;
  int width = 3;
  for (int s = 0; s < config.stages; ++s) {
    const double glorot = std::sqrt(6.0 / (width + config.hidden));
    p.gcn_weights.push_back(uniform(width, config.hidden, glorot));
    p.pool_vectors.push_back(uniform(config.hidden, 1, 1.0).col(0));
    width = config.hidden;
  }
  const double b1 = 1.0 / std::sqrt(2.0 * config.hidden);
  p.fc1_weight = uniform(config.readout_hidden, 2 * config.hidden, b1);
  p.fc1_bias = uniform(config.readout_hidden, 1, b1).col(0);
  const double b2 = 1.0 / std::sqrt(static_cast<double>(config.readout_hidden));
  p.fc2_weight = uniform(config.latent, config.readout_hidden, b2);
  p.fc2_bias = uniform(config.latent, 1, b2).col(0);
  return p;
}

EncoderParameters EncoderParameters::zeros_like() const {
  EncoderParameters z;
  z.keep_ratio = keep_ratio;
  for (const auto& w : gcn_weights) z.gcn_weights.push_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
  for (const auto& v : pool_vectors) z.pool_vectors.push_back(Eigen::VectorXd::Zero(v.size()));
  z.fc1_weight = Eigen::MatrixXd::Zero(fc1_weight.rows(), fc1_weight.cols());
  z.fc1_bias = Eigen::VectorXd::Zero(fc1_bias.size());
  z.fc2_weight = Eigen::MatrixXd::Zero(fc2_weight.rows(), fc2_weight.cols());
  z.fc2_bias = Eigen::VectorXd::Zero(fc2_bias.size());
  return z;
}

void EncoderParameters::validate() const {
  if (gcn_weights.empty() || gcn_weights.size() != pool_vectors.size()) {
    throw EncoderError("encoder parameters: stage count mismatch");
  }
  Eigen::Index width = 3;
  for (std::size_t s = 0; s < gcn_weights.size(); ++s) {
    if (gcn_weights[s].rows() != width) {
      throw EncoderError(fmt::format("encoder stage {}: expected input width {}, got {}", s, width,
                                     gcn_weights[s].rows()));
    }
    width = gcn_weights[s].cols();
    if (pool_vectors[s].size() != width) throw EncoderError(fmt::format("encoder stage {}: pool width", s));
    if (!gcn_weights[s].allFinite() || !pool_vectors[s].allFinite()) {
      throw EncoderError(fmt::format("encoder stage {}: non-finite parameters", s));
    }
  }
  if (fc1_weight.cols() != 2 * width || fc1_bias.size() != fc1_weight.rows() ||
      fc2_weight.cols() != fc1_weight.rows() || fc2_bias.size() != fc2_weight.rows()) {
    throw EncoderError("encoder readout head shape mismatch");
  }
  if (!fc1_weight.allFinite() || !fc1_bias.allFinite() || !fc2_weight.allFinite() || !fc2_bias.allFinite()) {
    throw EncoderError("encoder readout head has non-finite parameters");
  }
}

Eigen::VectorXd encode_mesh(const SceneGraph& graph, const EncoderParameters& params) {
  EncoderTrace trace;
  return encode_mesh(graph, params, trace);
}

Eigen::VectorXd encode_mesh(const SceneGraph& graph, const EncoderParameters& params,
                            EncoderTrace& trace) {
  params.validate();
  if (graph.num_nodes() == 0) throw EncoderError("encode_mesh: empty graph");

  trace.stages.clear();
  GraphTopology topo = GraphTopology::from(graph);
  Eigen::MatrixXd x = graph.node_features;
  const auto width = params.gcn_weights.back().cols();
  Eigen::VectorXd gap_sum = Eigen::VectorXd::Zero(width);
  Eigen::VectorXd gmp_sum = Eigen::VectorXd::Zero(width);

  for (std::size_t s = 0; s < params.gcn_weights.size(); ++s) {
    EncoderTrace::Stage st;
    st.adjacency = normalize_adjacency(topo);
    st.input = x;
    st.propagated = propagate(st.adjacency, x);
    st.pre = st.propagated * params.gcn_weights[s];
    st.activated = relu(st.pre);
    PoolResult pooled = gpool(topo, st.activated, params.keep_ratio, params.pool_vectors[s]);
    st.kept = pooled.kept;
    st.gates.resize(static_cast<Eigen::Index>(st.kept.size()));
    for (std::size_t r = 0; r < st.kept.size(); ++r) {
      st.gates[static_cast<Eigen::Index>(r)] = sigmoid(pooled.scores[st.kept[r]]);
    }
    st.pooled = pooled.features;
    st.argmax.resize(static_cast<std::size_t>(width));
    for (Eigen::Index c = 0; c < width; ++c) {
      Eigen::Index row = 0;
      st.pooled.col(c).maxCoeff(&row);
      st.argmax[static_cast<std::size_t>(c)] = row;
    }
    const auto r = readout(st.pooled);
    gap_sum += r.gap;
    gmp_sum += r.gmp;
    st.graph = std::move(topo);
    topo = std::move(pooled.graph);
    x = st.pooled;
    trace.stages.push_back(std::move(st));
  }

  trace.summary.resize(2 * width);
  trace.summary << gap_sum, gmp_sum;
  trace.hidden_pre = params.fc1_weight * trace.summary + params.fc1_bias;
  trace.latent = params.fc2_weight * trace.hidden_pre.cwiseMax(0.0) + params.fc2_bias;
  return trace.latent;
}

void encode_mesh_backward(const EncoderTrace& trace, const EncoderParameters& params,
                          const Eigen::VectorXd& d_latent, EncoderParameters& grads) {
  const Eigen::VectorXd hidden = trace.hidden_pre.cwiseMax(0.0);
  grads.fc2_weight += d_latent * hidden.transpose();
  grads.fc2_bias += d_latent;
  Eigen::VectorXd d_hidden = params.fc2_weight.transpose() * d_latent;
  for (Eigen::Index i = 0; i < d_hidden.size(); ++i) {
    if (trace.hidden_pre[i] <= 0.0) d_hidden[i] = 0.0;
  }
  grads.fc1_weight += d_hidden * trace.summary.transpose();
  grads.fc1_bias += d_hidden;
  const Eigen::VectorXd d_summary = params.fc1_weight.transpose() * d_hidden;
  const auto width = d_summary.size() / 2;
  const Eigen::VectorXd d_gap = d_summary.head(width);
  const Eigen::VectorXd d_gmp = d_summary.tail(width);

  // Gradient arriving at the pooled output of the current stage from later stages.
  Eigen::MatrixXd d_next;
  for (std::size_t si = trace.stages.size(); si-- > 0;) {
    const auto& st = trace.stages[si];
    const auto k = st.pooled.rows();
    Eigen::MatrixXd d_pooled = d_next.size() ? d_next : Eigen::MatrixXd::Zero(k, width);
    d_pooled.rowwise() += (d_gap / static_cast<double>(k)).transpose();
    for (Eigen::Index c = 0; c < width; ++c) d_pooled(st.argmax[static_cast<std::size_t>(c)], c) += d_gmp[c];

    // Gating and projection scores.
    const Eigen::VectorXd& p = params.pool_vectors[si];
    const double norm = p.norm();
    Eigen::MatrixXd d_act = Eigen::MatrixXd::Zero(st.activated.rows(), st.activated.cols());
    Eigen::VectorXd d_score = Eigen::VectorXd::Zero(st.activated.rows());
    for (Eigen::Index r = 0; r < k; ++r) {
      const auto node = st.kept[static_cast<std::size_t>(r)];
      const double g = st.gates[r];
      d_act.row(node) += g * d_pooled.row(r);
      const double d_gate = d_pooled.row(r).dot(st.activated.row(node));
      d_score[node] = d_gate * g * (1.0 - g);
    }
    if (norm > 0.0) {
      const Eigen::VectorXd unit = p / norm;
      d_act += d_score * unit.transpose();
      const Eigen::VectorXd d_unit = st.activated.transpose() * d_score;
      grads.pool_vectors[si] += (d_unit - unit * unit.dot(d_unit)) / norm;
    }

    Eigen::MatrixXd d_pre = d_act;
    for (Eigen::Index i = 0; i < d_pre.size(); ++i) {
      if (st.pre.data()[i] <= 0.0) d_pre.data()[i] = 0.0;
    }
    grads.gcn_weights[si] += st.propagated.transpose() * d_pre;
    if (si > 0) {
      // The normalized adjacency is symmetric, so propagating again applies its transpose.
      d_next = propagate(st.adjacency, d_pre * params.gcn_weights[si].transpose());
    }
  }
}

SceneEmbedding build_embedding(std::span<const double> mesh_latent, std::span<const double> source,
                               std::span<const double> listener) {
  if (mesh_latent.size() != kMeshLatentSize || source.size() != 3 || listener.size() != 3) {
    throw EncoderError(fmt::format("build_embedding: expected lengths 8/3/3, got {}/{}/{}",
                                   mesh_latent.size(), source.size(), listener.size()));
  }
  SceneEmbedding e;
  auto it = std::copy(mesh_latent.begin(), mesh_latent.end(), e.values.begin());
  it = std::copy(source.begin(), source.end(), it);
  std::copy(listener.begin(), listener.end(), it);
  for (double v : e.values) {
    if (!std::isfinite(v)) throw EncoderError("build_embedding: non-finite input");
  }
  return e;
}

}  // namespace roomir
