#include "ctxseg/graph.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>

#include <json.hpp>

#include "ctxseg/error.hpp"

namespace ctxseg {

ContextGraph::ContextGraph(std::vector<GridCoord> coords) : coords_(std::move(coords)) {
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> index;
  for (std::size_t i = 0; i < coords_.size(); ++i) {
    if (!index.emplace(std::make_pair(coords_[i].row, coords_[i].col), i).second) {
      throw ContractError("duplicate grid coordinate (" + std::to_string(coords_[i].row) + ", " +
                          std::to_string(coords_[i].col) + ")");
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t i = 0; i < coords_.size(); ++i) {
    // Right and down neighbours cover every 4-connected pair exactly once.
    const auto [r, c] = std::make_pair(coords_[i].row, coords_[i].col);
    for (auto key : {std::make_pair(r, c + 1), std::make_pair(r + 1, c)}) {
      auto it = index.find(key);
      if (it != index.end()) edges.emplace_back(std::min(i, it->second), std::max(i, it->second));
    }
  }
  neighbors_.resize(coords_.size());
  finish(std::move(edges));
}

ContextGraph::ContextGraph(std::size_t nodes, const std::vector<std::pair<std::size_t, std::size_t>>& edges)
    : coords_(nodes), neighbors_(nodes) {
  std::vector<std::pair<std::size_t, std::size_t>> norm;
  for (auto [a, b] : edges) {
    if (a >= nodes || b >= nodes) throw IndexError("edge endpoint out of range");
    if (a == b) throw ContractError("self loops are not allowed in the context graph");
    norm.emplace_back(std::min(a, b), std::max(a, b));
  }
  finish(std::move(norm));
}

void ContextGraph::finish(std::vector<std::pair<std::size_t, std::size_t>> edges) {
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  edges_ = std::move(edges);
  const std::size_t n = neighbors_.size();
  adjacency_ = Tensor<double>({n, n});
  for (auto [a, b] : edges_) {
    neighbors_[a].push_back(b);
    neighbors_[b].push_back(a);
    adjacency_.at(a, b) = adjacency_.at(b, a) = 1.0;
  }
  for (auto& nb : neighbors_) std::sort(nb.begin(), nb.end());
  normalized_ = normalize_adjacency(adjacency_);
}

std::vector<std::uint8_t> ContextGraph::closed_neighborhood_mask() const {
  const std::size_t n = node_count();
  std::vector<std::uint8_t> mask(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    mask[i * n + i] = 1;
    for (auto j : neighbors_[i]) mask[i * n + j] = 1;
  }
  return mask;
}

ContextGraph build_context_graph(const TileGrid& grid) {
  std::vector<GridCoord> coords;
  for (auto i : grid.foreground_indices()) coords.push_back(grid.tiles[i].coord);
  if (coords.empty()) {
    throw EmptyGraphError("slide " + std::to_string(grid.slide_id) + " has no foreground tiles");
  }
  return ContextGraph(std::move(coords));
}

Tensor<double> normalize_adjacency(const Tensor<double>& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw ContractError("normalize_adjacency: expected a square matrix, got " + shape_string(a.shape()));
  }
  const std::size_t n = a.dim(0);
  std::vector<double> deg_plus_one(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (a.at(i, i) != 0.0) throw ContractError("normalize_adjacency: non-zero diagonal at node " + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) {
      const double v = a.at(i, j);
      if (v != 0.0 && v != 1.0) throw ContractError("normalize_adjacency: entries must be 0 or 1");
      if (v != a.at(j, i)) {
        throw ContractError("normalize_adjacency: asymmetric at (" + std::to_string(i) + ", " + std::to_string(j) +
                            ")");
      }
      deg_plus_one[i] += v;
    }
  }
  Tensor<double> out({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    out.at(i, i) = 1.0 / deg_plus_one[i];
    for (std::size_t j = i + 1; j < n; ++j)
      if (a.at(i, j) != 0.0) out.at(i, j) = out.at(j, i) = 1.0 / std::sqrt(deg_plus_one[i] * deg_plus_one[j]);
  }
  return out;
}

std::vector<std::optional<std::size_t>> hop_distances(const ContextGraph& graph, std::size_t source) {
  if (source >= graph.node_count()) {
    throw IndexError("node " + std::to_string(source) + " out of range for " + std::to_string(graph.node_count()) +
                     " nodes");
  }
  std::vector<std::optional<std::size_t>> dist(graph.node_count());
  std::deque<std::size_t> queue{source};
  dist[source] = 0;
  while (!queue.empty()) {
    const std::size_t u = queue.front();
    queue.pop_front();
    for (auto v : graph.neighbors(u))
      if (!dist[v]) {
        dist[v] = *dist[u] + 1;
        queue.push_back(v);
      }
  }
  return dist;
}

std::vector<std::size_t> k_hop_neighborhood(const ContextGraph& graph, std::size_t node, std::size_t hops) {
  const auto dist = hop_distances(graph, node);
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < dist.size(); ++j)
    if (dist[j] && *dist[j] == hops) out.push_back(j);
  return out;
}

GraphStats graph_stats(const ContextGraph& graph) {
  GraphStats s;
  s.nodes = graph.node_count();
  s.edges = graph.edge_count();
  std::vector<bool> seen(s.nodes, false);
  for (std::size_t i = 0; i < s.nodes; ++i) {
    const std::size_t d = graph.degree(i);
    if (s.degree_histogram.size() <= d) s.degree_histogram.resize(d + 1, 0);
    ++s.degree_histogram[d];
    if (seen[i]) continue;
    ++s.components;
    for (std::size_t j = 0; const auto& dj : hop_distances(graph, i)) {
      if (dj) seen[j] = true;
      ++j;
    }
  }
  return s;
}

std::string to_json(const GraphStats& stats, int indent) {
  nlohmann::json j{{"nodes", stats.nodes},
                   {"edges", stats.edges},
                   {"degree_histogram", stats.degree_histogram},
                   {"components", stats.components}};
  return j.dump(indent);
}

}  // namespace ctxseg
