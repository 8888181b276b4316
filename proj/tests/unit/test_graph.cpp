#include <doctest.h>

#include <cmath>
#include <set>

#include "ctxseg/error.hpp"
#include "ctxseg/graph.hpp"
#include "ctxseg/rng.hpp"

using namespace ctxseg;

namespace {

ContextGraph full_grid(std::size_t rows, std::size_t cols) {
  std::vector<GridCoord> coords;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) coords.push_back({r, c});
  return ContextGraph(coords);
}

ContextGraph path3() { return ContextGraph(3, {{0, 1}, {1, 2}}); }

}  // namespace

TEST_CASE("4-connectivity edge counts") {
  CHECK(full_grid(2, 2).edge_count() == 4);
  const auto g3 = full_grid(3, 3);
  CHECK(g3.node_count() == 9);
  CHECK(g3.edge_count() == 12);
  const ContextGraph diag(std::vector<GridCoord>{{0, 0}, {1, 1}});
  CHECK(diag.node_count() == 2);
  CHECK(diag.edge_count() == 0);
  CHECK_THROWS(ContextGraph(std::vector<GridCoord>{{0, 0}, {0, 0}}));
}

TEST_CASE("build_context_graph keeps only foreground tiles") {
  TileGrid grid;
  grid.rows = 2;
  grid.cols = 3;
  grid.patch = 1;
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      Tile t;
      t.coord = {r, c};
      t.foreground = (r == 0) || c == 2;
      grid.tiles.push_back(t);
    }
  const auto g = build_context_graph(grid);
  CHECK(g.node_count() == 4);
  CHECK(g.edge_count() == 3);
  CHECK(g.coords()[3] == GridCoord{1, 2});

  for (auto& t : grid.tiles) t.foreground = false;
  CHECK_THROWS_AS(build_context_graph(grid), EmptyGraphError);
}

TEST_CASE("normalized adjacency examples") {
  CHECK(ContextGraph(1, {}).normalized_adjacency()[0] == 1.0);

  const auto two = ContextGraph(2, {{0, 1}}).normalized_adjacency();
  for (std::size_t i = 0; i < 4; ++i) CHECK(two[i] == doctest::Approx(0.5).epsilon(1e-15));

  // D = diag(2, 3, 2) for A + I of the path 0-1-2.
  const auto p3 = path3();
  const auto& a = p3.normalized_adjacency();
  CHECK(std::abs(a.at(0, 0) - 0.5) < 1e-12);
  CHECK(std::abs(a.at(0, 1) - 1.0 / std::sqrt(6.0)) < 1e-12);
  CHECK(std::abs(a.at(1, 1) - 1.0 / 3.0) < 1e-12);
  CHECK(a.at(0, 2) == 0.0);

  Tensor<double> asym({2, 2}, {0, 1, 0, 0});
  CHECK_THROWS_AS(normalize_adjacency(asym), ContractError);
  Tensor<double> loop({2, 2}, {1, 1, 1, 0});
  CHECK_THROWS_AS(normalize_adjacency(loop), ContractError);
}

TEST_CASE("normalized adjacency is symmetric with the diagonal law on random grids") {
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<GridCoord> coords;
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < 6; ++c)
        if (rng.bernoulli(0.6)) coords.push_back({r, c});
    if (coords.empty()) continue;
    const ContextGraph g(coords);
    const auto& a = g.normalized_adjacency();
    const std::size_t n = g.node_count();
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(a.at(i, i) == 1.0 / static_cast<double>(g.degree(i) + 1));
      for (std::size_t j = 0; j < n; ++j) {
        CHECK(a.at(i, j) == a.at(j, i));
        const double expect =
            g.adjacency().at(i, j) / std::sqrt(static_cast<double>((g.degree(i) + 1) * (g.degree(j) + 1)));
        if (i != j) CHECK(std::abs(a.at(i, j) - expect) < 1e-15);
      }
    }
  }
}

TEST_CASE("k-hop neighbourhoods") {
  const auto p = path3();
  CHECK(k_hop_neighborhood(p, 0, 0) == std::vector<std::size_t>{0});
  CHECK(k_hop_neighborhood(p, 0, 1) == std::vector<std::size_t>{1});
  CHECK(k_hop_neighborhood(p, 0, 2) == std::vector<std::size_t>{2});
  CHECK(k_hop_neighborhood(p, 0, 3).empty());
  CHECK_THROWS_AS(k_hop_neighborhood(p, 3, 1), IndexError);

  const auto g = full_grid(4, 5);
  // node index r * 5 + c
  CHECK(hop_distances(g, 0)[2 * 5 + 1] == std::optional<std::size_t>(3));
  for (std::size_t i = 0; i < g.node_count(); ++i) {
    const auto d = hop_distances(g, i);
    for (std::size_t j = 0; j < g.node_count(); ++j) {
      const auto a = g.coords()[i], b = g.coords()[j];
      const std::size_t manhattan = (a.row > b.row ? a.row - b.row : b.row - a.row) +
                                    (a.col > b.col ? a.col - b.col : b.col - a.col);
      CHECK(d[j] == std::optional<std::size_t>(manhattan));
    }
  }

  const ContextGraph apart(std::vector<GridCoord>{{0, 0}, {0, 2}});
  CHECK_FALSE(hop_distances(apart, 0)[1].has_value());
  for (std::size_t t = 0; t < 5; ++t)
    for (auto j : k_hop_neighborhood(apart, 0, t)) CHECK(j == 0);
}

TEST_CASE("Nera sets partition the component") {
  Rng rng(3);
  std::vector<GridCoord> coords;
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t c = 0; c < 7; ++c)
      if (rng.bernoulli(0.65)) coords.push_back({r, c});
  const ContextGraph g(coords);
  for (std::size_t i = 0; i < g.node_count(); ++i) {
    std::set<std::size_t> seen;
    for (std::size_t t = 0; t <= g.node_count(); ++t)
      for (auto j : k_hop_neighborhood(g, i, t)) CHECK(seen.insert(j).second);
    const auto d = hop_distances(g, i);
    std::size_t reachable = 0;
    for (const auto& v : d) reachable += v.has_value();
    CHECK(seen.size() == reachable);
  }
}

TEST_CASE("graph statistics") {
  const ContextGraph g(std::vector<GridCoord>{{0, 0}, {0, 1}, {1, 0}, {3, 3}});
  const auto s = graph_stats(g);
  CHECK(s.nodes == 4);
  CHECK(s.edges == 2);
  CHECK(s.components == 2);
  CHECK(s.degree_histogram == std::vector<std::size_t>{1, 2, 1});
  const auto json = to_json(s);
  CHECK(json.find("\"components\": 2") != std::string::npos);
}
