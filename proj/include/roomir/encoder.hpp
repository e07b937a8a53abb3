#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "roomir/mesh.hpp"

namespace roomir {

class EncoderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Adjacency without self-loops; neighbour lists sorted ascending.
struct GraphTopology {
  std::vector<std::vector<std::uint32_t>> neighbours;

  std::size_t num_nodes() const { return neighbours.size(); }
  static GraphTopology from(const SceneGraph& graph);
};

enum class Activation { kIdentity, kRelu };

// Rows of D^-1/2 (A + I) D^-1/2 as (column, weight) pairs.
struct NormalizedAdjacency {
  std::vector<std::vector<std::pair<std::uint32_t, double>>> rows;
};

NormalizedAdjacency normalize_adjacency(const GraphTopology& graph);
Eigen::MatrixXd propagate(const NormalizedAdjacency& adj, const Eigen::MatrixXd& x);

// sigma(D^-1/2 (A + I) D^-1/2 X W). Topology is left untouched.
Eigen::MatrixXd gcn_layer(const GraphTopology& graph, const Eigen::MatrixXd& x,
                          const Eigen::MatrixXd& w, Activation activation);

struct PoolResult {
  GraphTopology graph;
  Eigen::MatrixXd features;           // K x C, gated
  std::vector<std::uint32_t> kept;    // original indices, descending score
  Eigen::VectorXd scores;             // N projection scores
};

std::size_t pooled_size(std::size_t nodes, double keep_ratio);

// Top-K projection pooling. Kept rows are gated by sigmoid(score) and the
// survivors are reconnected through the boolean square of the adjacency.
PoolResult gpool(const GraphTopology& graph, const Eigen::MatrixXd& x, double keep_ratio,
                 const Eigen::VectorXd& projection);

struct ReadoutResult {
  Eigen::VectorXd gap;
  Eigen::VectorXd gmp;
};

ReadoutResult readout(const Eigen::MatrixXd& x);

struct EncoderConfig {
  int stages = 3;
  int hidden = 32;
  int readout_hidden = 32;
  int latent = 8;
  double keep_ratio = 0.6;
};

struct EncoderParameters {
  std::vector<Eigen::MatrixXd> gcn_weights;   // stage s: C_s x hidden
  std::vector<Eigen::VectorXd> pool_vectors;  // stage s: hidden
  Eigen::MatrixXd fc1_weight;                 // readout_hidden x 2*hidden
  Eigen::VectorXd fc1_bias;
  Eigen::MatrixXd fc2_weight;                 // latent x readout_hidden
  Eigen::VectorXd fc2_bias;
  double keep_ratio = 0.6;

  static EncoderParameters random(const EncoderConfig& config, std::uint64_t seed);
  // Same shapes, all zero. Used for gradient accumulators.
  EncoderParameters zeros_like() const;
  void validate() const;

  std::size_t latent_size() const { return static_cast<std::size_t>(fc2_bias.size()); }
};

// Everything the backward pass needs from one forward evaluation.
struct EncoderTrace {
  struct Stage {
    GraphTopology graph;
    NormalizedAdjacency adjacency;
    Eigen::MatrixXd input;        // N x C
    Eigen::MatrixXd propagated;   // A_norm * input
    Eigen::MatrixXd pre;          // propagated * W
    Eigen::MatrixXd activated;    // relu(pre)
    std::vector<std::uint32_t> kept;
    Eigen::VectorXd gates;        // sigmoid(score) of kept rows
    Eigen::MatrixXd pooled;       // K x hidden
    std::vector<Eigen::Index> argmax;  // per channel row index into pooled
  };
  std::vector<Stage> stages;
  Eigen::VectorXd summary;  // [sum GAP | sum GMP]
  Eigen::VectorXd hidden_pre;
  Eigen::VectorXd latent;
};

Eigen::VectorXd encode_mesh(const SceneGraph& graph, const EncoderParameters& params);
Eigen::VectorXd encode_mesh(const SceneGraph& graph, const EncoderParameters& params,
                            EncoderTrace& trace);
// Accumulates d(latent)/d(params) contracted with `d_latent` into `grads`.
void encode_mesh_backward(const EncoderTrace& trace, const EncoderParameters& params,
                          const Eigen::VectorXd& d_latent, EncoderParameters& grads);

inline constexpr std::size_t kMeshLatentSize = 8;
inline constexpr std::size_t kEmbeddingSize = 14;

// [mesh latent | source | listener]
struct SceneEmbedding {
  std::array<double, kEmbeddingSize> values{};
};

SceneEmbedding build_embedding(std::span<const double> mesh_latent, std::span<const double> source,
                               std::span<const double> listener);

}  // namespace roomir
