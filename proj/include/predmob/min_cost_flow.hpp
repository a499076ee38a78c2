#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "predmob/errors.hpp"

namespace predmob {

/// Successive-shortest-path min-cost flow with Johnson potentials.
///
/// Arc costs may be negative as long as the initial network has no negative
/// cycle (potentials are seeded by Bellman-Ford). Dijkstra runs in O(V^2 + E),
/// which suits the dense bipartite networks built by the matcher.
class MinCostFlow {
 public:
  using Flow = std::int64_t;
  static constexpr Flow kInfinite = std::numeric_limits<Flow>::max() / 4;

  explicit MinCostFlow(int nodes) : head_(static_cast<std::size_t>(nodes), -1) {}

  int add_arc(int from, int to, Flow capacity, double cost) {
    const int id = static_cast<int>(arcs_.size());
    arcs_.push_back({to, head_[static_cast<std::size_t>(from)], capacity, cost});
    head_[static_cast<std::size_t>(from)] = id;
    arcs_.push_back({from, head_[static_cast<std::size_t>(to)], 0, -cost});
    head_[static_cast<std::size_t>(to)] = id + 1;
    return id;
  }

  Flow flow_on(int arc) const { return arcs_[static_cast<std::size_t>(arc) ^ 1U].capacity; }

  struct Result {
    Flow flow = 0;
    double cost = 0.0;
  };

  /// Augments along shortest paths while they strictly lower the total cost
  /// (or, with `max_flow`, until no augmenting path remains).
  Result solve(int source, int sink, bool max_flow = false, double eps = 1e-12) {
    const auto n = head_.size();
    std::vector<double> pot(n, 0.0);
    bellman_ford(source, pot);

    Result res;
    std::vector<double> dist(n);
    std::vector<int> via(n);
    std::vector<char> done(n);
    const double inf = std::numeric_limits<double>::infinity();
    for (;;) {
      std::fill(dist.begin(), dist.end(), inf);
      std::fill(via.begin(), via.end(), -1);
      std::fill(done.begin(), done.end(), 0);
      dist[static_cast<std::size_t>(source)] = 0.0;
      for (;;) {
        int u = -1;
        for (std::size_t v = 0; v < n; ++v)
          if (!done[v] && dist[v] < inf && (u < 0 || dist[v] < dist[static_cast<std::size_t>(u)]))
            u = static_cast<int>(v);
        if (u < 0) break;
        done[static_cast<std::size_t>(u)] = 1;
        for (int a = head_[static_cast<std::size_t>(u)]; a >= 0; a = arcs_[static_cast<std::size_t>(a)].next) {
          const auto& arc = arcs_[static_cast<std::size_t>(a)];
          if (arc.capacity <= 0) continue;
          const auto v = static_cast<std::size_t>(arc.to);
          if (done[v]) continue;
          double reduced = arc.cost + pot[static_cast<std::size_t>(u)] - pot[v];
          if (reduced < 0.0) reduced = 0.0;  // rounding noise only
          const double nd = dist[static_cast<std::size_t>(u)] + reduced;
          if (nd < dist[v]) {
            dist[v] = nd;
            via[v] = a;
          }
        }
      }
      if (dist[static_cast<std::size_t>(sink)] == inf) break;
      for (std::size_t v = 0; v < n; ++v)
        if (dist[v] < inf) pot[v] += dist[v];

      // Actual cost of the path.
      double path_cost = 0.0;
      Flow push = kInfinite;
      for (int v = sink; v != source;) {
        const auto& arc = arcs_[static_cast<std::size_t>(via[static_cast<std::size_t>(v)])];
        path_cost += arc.cost;
        push = std::min(push, arc.capacity);
        v = arcs_[static_cast<std::size_t>(via[static_cast<std::size_t>(v)]) ^ 1U].to;
      }
      if (!max_flow && path_cost >= -eps) break;
      if (push >= kInfinite) throw Error("min-cost flow: unbounded augmenting path");
      for (int v = sink; v != source;) {
        const auto a = static_cast<std::size_t>(via[static_cast<std::size_t>(v)]);
        arcs_[a].capacity -= push;
        arcs_[a ^ 1U].capacity += push;
        v = arcs_[a ^ 1U].to;
      }
      res.flow += push;
      res.cost += path_cost * static_cast<double>(push);
    }
    return res;
  }

 private:
  struct Arc {
    int to;
    int next;
    Flow capacity;
    double cost;
  };

  void bellman_ford(int source, std::vector<double>& pot) const {
    const double inf = std::numeric_limits<double>::infinity();
    std::fill(pot.begin(), pot.end(), inf);
    pot[static_cast<std::size_t>(source)] = 0.0;
    for (std::size_t round = 0; round < head_.size(); ++round) {
      bool changed = false;
      for (std::size_t u = 0; u < head_.size(); ++u) {
        if (pot[u] == inf) continue;
        for (int a = head_[u]; a >= 0; a = arcs_[static_cast<std::size_t>(a)].next) {
          const auto& arc = arcs_[static_cast<std::size_t>(a)];
          if (arc.capacity <= 0) continue;
          const auto v = static_cast<std::size_t>(arc.to);
          if (pot[u] + arc.cost < pot[v] - 1e-15) {
            pot[v] = pot[u] + arc.cost;
            changed = true;
          }
        }
      }
      if (!changed) break;
    }
    for (double& p : pot)
      if (p == inf) p = 0.0;
  }

  std::vector<int> head_;
  std::vector<Arc> arcs_;
};

}  // namespace predmob
