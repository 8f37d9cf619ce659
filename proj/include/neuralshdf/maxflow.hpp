#pragma once

// Boykov-Kolmogorov max-flow / min-cut with two search trees grown from the
// terminals and reused across augmentations.

#include <algorithm>
#include <deque>
#include <limits>
#include <vector>

#include "neuralshdf/errors.hpp"

namespace nshdf {

class MaxFlow {
 public:
  explicit MaxFlow(int node_count = 0) { reset(node_count); }

  void reset(int node_count) {
    nodes_.assign(static_cast<std::size_t>(node_count), {});
    arcs_.clear();
    flow_ = 0;
    solved_ = false;
  }

  int node_count() const { return static_cast<int>(nodes_.size()); }

  /// Adds capacity on source->node (paid when the node ends on the sink side)
  /// and node->sink (paid when it ends on the source side).
  void add_terminal(int node, double cap_source, double cap_sink) {
    check(node);
    if (cap_source < 0 || cap_sink < 0) throw ContractError("terminal capacities must be >= 0");
    const double common = std::min(cap_source, cap_sink);
    flow_ += common;
    nodes_[node].tr_cap += (cap_source - common) - (cap_sink - common);
  }

  /// Edge a->b with capacity cap_ab and reverse capacity cap_ba.
  void add_edge(int a, int b, double cap_ab, double cap_ba) {
    check(a);
    check(b);
    if (a == b) throw ContractError("self loops are not allowed");
    if (cap_ab < 0 || cap_ba < 0) throw ContractError("edge capacities must be >= 0");
    const int fwd = static_cast<int>(arcs_.size());
    arcs_.push_back({b, nodes_[a].first, fwd + 1, cap_ab});
    nodes_[a].first = fwd;
    arcs_.push_back({a, nodes_[b].first, fwd, cap_ba});
    nodes_[b].first = fwd + 1;
  }

  /// Maximum flow value, equal to the minimum cut capacity.
  double solve() {
    init_trees();
    while (true) {
      int i = current_;
      if (i >= 0 && nodes_[i].parent == kNone) i = -1;
      if (i < 0) {
        i = next_active();
        if (i < 0) break;
      }
      const int a = grow(i);
      ++time_;
      if (a >= 0) {
        current_ = i;
        augment(a);
        adopt_orphans();
      } else {
        current_ = -1;
      }
    }
    solved_ = true;
    return flow_;
  }

  /// After solve(): true when the node is on the sink side of the minimum cut.
  bool on_sink_side(int node) const {
    check(node);
    if (!solved_) throw ContractError("solve() has not been called");
    return nodes_[node].parent != kNone && nodes_[node].is_sink;
  }

  double flow() const { return flow_; }

 private:
  static constexpr int kNone = -1;
  static constexpr int kTerminal = -2;
  static constexpr int kOrphan = -3;

  struct Node {
    int first = -1;
    int parent = kNone;
    bool is_sink = false;
    bool active = false;
    long timestamp = 0;
    int dist = 0;
    double tr_cap = 0;  // > 0: residual from source, < 0: residual to sink
  };
  struct Arc {
    int head;
    int next;
    int sister;
    double r_cap;
  };

  void check(int node) const {
    if (node < 0 || node >= node_count()) throw ContractError("node index out of range");
  }

  void set_active(int i) {
    if (!nodes_[i].active) {
      nodes_[i].active = true;
      active_.push_back(i);
    }
  }

  int next_active() {
    while (!active_.empty()) {
      const int i = active_.front();
      active_.pop_front();
      nodes_[i].active = false;
      if (nodes_[i].parent != kNone) return i;
    }
    return -1;
  }

  void init_trees() {
    active_.clear();
    orphans_.clear();
    time_ = 0;
    current_ = -1;
    for (int i = 0; i < node_count(); ++i) {
      Node& n = nodes_[i];
      n.active = false;
      n.timestamp = 0;
      if (n.tr_cap > 0) {
        n.is_sink = false;
        n.parent = kTerminal;
        n.dist = 1;
        set_active(i);
      } else if (n.tr_cap < 0) {
        n.is_sink = true;
        n.parent = kTerminal;
        n.dist = 1;
        set_active(i);
      } else {
        n.parent = kNone;
      }
    }
  }

  // Expands node i's tree by one layer; returns an arc joining the two trees
  // (oriented from the source tree to the sink tree) or -1.
  int grow(int i) {
    Node& ni = nodes_[i];
    for (int a = ni.first; a >= 0; a = arcs_[a].next) {
      const int j = arcs_[a].head;
      Node& nj = nodes_[j];
      const double cap = ni.is_sink ? arcs_[arcs_[a].sister].r_cap : arcs_[a].r_cap;
      if (!(cap > 0)) continue;
      if (nj.parent == kNone) {
        nj.is_sink = ni.is_sink;
        nj.parent = arcs_[a].sister;
        nj.timestamp = ni.timestamp;
        nj.dist = ni.dist + 1;
        set_active(j);
      } else if (nj.is_sink != ni.is_sink) {
        return ni.is_sink ? arcs_[a].sister : a;
      } else if (nj.timestamp <= ni.timestamp && nj.dist > ni.dist) {
        nj.parent = arcs_[a].sister;
        nj.timestamp = ni.timestamp;
        nj.dist = ni.dist + 1;
      }
    }
    return -1;
  }

  void make_orphan_front(int i) {
    nodes_[i].parent = kOrphan;
    orphans_.push_front(i);
  }

  void make_orphan_rear(int i) {
    nodes_[i].parent = kOrphan;
    orphans_.push_back(i);
  }

  void augment(int middle) {
    double bottleneck = arcs_[middle].r_cap;
    // Source side: walk from the arc's tail up to the source.
    for (int i = arcs_[arcs_[middle].sister].head;;) {
      const int a = nodes_[i].parent;
      if (a == kTerminal) break;
      bottleneck = std::min(bottleneck, arcs_[arcs_[a].sister].r_cap);
      i = arcs_[a].head;
    }
    for (int i = arcs_[arcs_[middle].sister].head;;) {
      const int a = nodes_[i].parent;
      if (a == kTerminal) {
        bottleneck = std::min(bottleneck, nodes_[i].tr_cap);
        break;
      }
      i = arcs_[a].head;
    }
    // Sink side.
    for (int i = arcs_[middle].head;;) {
      const int a = nodes_[i].parent;
      if (a == kTerminal) {
        bottleneck = std::min(bottleneck, -nodes_[i].tr_cap);
        break;
      }
      bottleneck = std::min(bottleneck, arcs_[a].r_cap);
      i = arcs_[a].head;
    }

    arcs_[arcs_[middle].sister].r_cap += bottleneck;
    arcs_[middle].r_cap -= bottleneck;
    for (int i = arcs_[arcs_[middle].sister].head;;) {
      const int a = nodes_[i].parent;
      if (a == kTerminal) {
        nodes_[i].tr_cap -= bottleneck;
        if (!(nodes_[i].tr_cap > 0)) make_orphan_front(i);
        break;
      }
      arcs_[a].r_cap += bottleneck;
      arcs_[arcs_[a].sister].r_cap -= bottleneck;
      const int parent = arcs_[a].head;
      if (!(arcs_[arcs_[a].sister].r_cap > 0)) make_orphan_front(i);
      i = parent;
    }
    for (int i = arcs_[middle].head;;) {
      const int a = nodes_[i].parent;
      if (a == kTerminal) {
        nodes_[i].tr_cap += bottleneck;
        if (!(nodes_[i].tr_cap < 0)) make_orphan_front(i);
        break;
      }
      arcs_[arcs_[a].sister].r_cap += bottleneck;
      arcs_[a].r_cap -= bottleneck;
      const int parent = arcs_[a].head;
      if (!(arcs_[a].r_cap > 0)) make_orphan_front(i);
      i = parent;
    }
    flow_ += bottleneck;
  }

  void adopt_orphans() {
    while (!orphans_.empty()) {
      const int i = orphans_.front();
      orphans_.pop_front();
      adopt(i);
    }
  }

  // Tries to reattach orphan i to its own tree through a node whose path to
  // the terminal is valid; otherwise frees it and orphans its children.
  void adopt(int i) {
    Node& ni = nodes_[i];
    const bool sink = ni.is_sink;
    constexpr int kInfinite = std::numeric_limits<int>::max();
    int best_arc = kNone;
    int best_dist = kInfinite;
    for (int a0 = ni.first; a0 >= 0; a0 = arcs_[a0].next) {
      const double cap = sink ? arcs_[a0].r_cap : arcs_[arcs_[a0].sister].r_cap;
      if (!(cap > 0)) continue;
      int j = arcs_[a0].head;
      if (nodes_[j].is_sink != sink || nodes_[j].parent == kNone) continue;
      // Length of j's path to the terminal, or infinite if it passes an orphan.
      int d = 0;
      while (true) {
        Node& nj = nodes_[j];
        if (nj.timestamp == time_) {
          d += nj.dist;
          break;
        }
        const int a = nj.parent;
        ++d;
        if (a == kTerminal) {
          nj.timestamp = time_;
          nj.dist = 1;
          break;
        }
        if (a == kOrphan) {
          d = kInfinite;
          break;
        }
        j = arcs_[a].head;
      }
      if (d == kInfinite) continue;
      if (d < best_dist) {
        best_arc = a0;
        best_dist = d;
      }
      // Cache distances along the verified path.
      for (j = arcs_[a0].head; nodes_[j].timestamp != time_; j = arcs_[nodes_[j].parent].head) {
        nodes_[j].timestamp = time_;
        nodes_[j].dist = d--;
      }
    }
    ni.parent = best_arc;
    if (best_arc != kNone) {
      ni.timestamp = time_;
      ni.dist = best_dist + 1;
      return;
    }
    for (int a0 = ni.first; a0 >= 0; a0 = arcs_[a0].next) {
      const int j = arcs_[a0].head;
      Node& nj = nodes_[j];
      if (nj.is_sink != sink || nj.parent == kNone) continue;
      const double cap = sink ? arcs_[a0].r_cap : arcs_[arcs_[a0].sister].r_cap;
      if (cap > 0) set_active(j);
      if (nj.parent != kTerminal && nj.parent != kOrphan && arcs_[nj.parent].head == i) make_orphan_rear(j);
    }
  }

  std::vector<Node> nodes_;
  std::vector<Arc> arcs_;
  std::deque<int> active_;
  std::deque<int> orphans_;
  double flow_ = 0;
  long time_ = 0;
  int current_ = -1;
  bool solved_ = false;
};

}  // namespace nshdf
