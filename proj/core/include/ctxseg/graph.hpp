#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ctxseg/synthwsi.hpp"
#include "ctxseg/tensor.hpp"

namespace ctxseg {

// Context graph over foreground tiles with 4-connectivity edges. Immutable
// after construction.
class ContextGraph {
 public:
  ContextGraph() = default;
  // Nodes keep the given order; an edge joins coordinates one step apart
  // horizontally or vertically. Duplicate coordinates are rejected.
  explicit ContextGraph(std::vector<GridCoord> coords);
  // Arbitrary undirected graph; coordinates are left default.
  ContextGraph(std::size_t nodes, const std::vector<std::pair<std::size_t, std::size_t>>& edges);

  std::size_t node_count() const { return neighbors_.size(); }
  std::size_t edge_count() const { return edges_.size(); }
  std::size_t degree(std::size_t node) const { return neighbors_.at(node).size(); }

  const std::vector<GridCoord>& coords() const { return coords_; }
  // Undirected edges with first < second, sorted.
  const std::vector<std::pair<std::size_t, std::size_t>>& edges() const { return edges_; }
  const std::vector<std::size_t>& neighbors(std::size_t node) const { return neighbors_.at(node); }

  // Dense N x N 0/1 adjacency A and D^-1/2 (A + I) D^-1/2.
  const Tensor<double>& adjacency() const { return adjacency_; }
  const Tensor<double>& normalized_adjacency() const { return normalized_; }

  // Row-major N x N mask of {j : j == i or j adjacent to i}.
  std::vector<std::uint8_t> closed_neighborhood_mask() const;

 private:
  void finish(std::vector<std::pair<std::size_t, std::size_t>> edges);

  std::vector<GridCoord> coords_;
  std::vector<std::pair<std::size_t, std::size_t>> edges_;
  std::vector<std::vector<std::size_t>> neighbors_;
  Tensor<double> adjacency_;
  Tensor<double> normalized_;
};

// Throws EmptyGraphError when the grid has no foreground tile.
ContextGraph build_context_graph(const TileGrid& grid);

// D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I. A must be square,
// symmetric, 0/1 with a zero diagonal (ContractError otherwise).
Tensor<double> normalize_adjacency(const Tensor<double>& adjacency);

// Shortest-path hop count from `source` to every node; nullopt if unreachable.
std::vector<std::optional<std::size_t>> hop_distances(const ContextGraph& graph, std::size_t source);

// { j : d(node, j) == hops }, ascending. Throws IndexError for a bad node.
std::vector<std::size_t> k_hop_neighborhood(const ContextGraph& graph, std::size_t node, std::size_t hops);

struct GraphStats {
  std::size_t nodes = 0;
  std::size_t edges = 0;
  std::vector<std::size_t> degree_histogram;  // index = degree
  std::size_t components = 0;
};

GraphStats graph_stats(const ContextGraph& graph);
std::string to_json(const GraphStats& stats, int indent = 2);

}  // namespace ctxseg
