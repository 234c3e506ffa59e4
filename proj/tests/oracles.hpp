#pragma once
// Independent reference implementations used by unit and acceptance tests.

#include "dfams/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

namespace oracle {

using dfams::RowMat;

/// Relabels clusters by order of first appearance so partitions compare equal.
inline std::vector<int> canonical(const std::vector<int>& a) {
  std::map<int, int> seen;
  std::vector<int> out;
  for (int x : a) {
    auto it = seen.find(x);
    if (it == seen.end()) it = seen.emplace(x, static_cast<int>(seen.size())).first;
    out.push_back(it->second);
  }
  return out;
}

inline double partition_inertia(const RowMat& x, const std::vector<int>& a, int k) {
  double total = 0.0;
  for (int c = 0; c < k; ++c) {
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(x.cols());
    int n = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i] == c) {
        mean += x.row(static_cast<Eigen::Index>(i));
        ++n;
      }
    if (n == 0) continue;
    mean /= n;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i] == c) total += (x.row(static_cast<Eigen::Index>(i)) - mean).squaredNorm();
  }
  return total;
}

struct Partition {
  std::vector<int> assignment;  // canonical
  double inertia = std::numeric_limits<double>::infinity();
};

/// Minimum-inertia partition of the rows into exactly k non-empty clusters,
/// by enumerating all k^n labelings.
inline Partition best_partition(const RowMat& x, int k) {
  const int n = static_cast<int>(x.rows());
  std::vector<int> a(static_cast<std::size_t>(n), 0);
  Partition best;
  long total = 1;
  for (int i = 0; i < n; ++i) total *= k;
  for (long code = 0; code < total; ++code) {
    long c = code;
    std::vector<int> used(static_cast<std::size_t>(k), 0);
    for (int i = 0; i < n; ++i) {
      a[static_cast<std::size_t>(i)] = static_cast<int>(c % k);
      used[static_cast<std::size_t>(c % k)] = 1;
      c /= k;
    }
    if (std::count(used.begin(), used.end(), 1) != k) continue;
    const double in = partition_inertia(x, a, k);
    if (in < best.inertia - 1e-12) {
      best.inertia = in;
      best.assignment = canonical(a);
    }
  }
  return best;
}

/// Literal slot allocation over a prototype score vector.
struct Allocation {
  bool abstained = false;
  std::vector<int> top;
  std::map<int, int> weights;  // kb -> slots
};

inline Allocation allocate(const std::vector<double>& s, const std::vector<int>& owners, double tau, int n_top,
                           int slots) {
  Allocation out;
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : s) mx = std::max(mx, v);
  if (mx < tau) {
    out.abstained = true;
    return out;
  }
  // selection by repeated arg-max with lower index winning ties
  std::vector<char> taken(s.size(), 0);
  for (int r = 0; r < n_top; ++r) {
    int best = -1;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (!taken[i] && (best < 0 || s[i] > s[static_cast<std::size_t>(best)])) best = static_cast<int>(i);
    taken[static_cast<std::size_t>(best)] = 1;
    out.top.push_back(best);
  }
  std::sort(out.top.begin(), out.top.end());
  std::map<int, double> mass;
  double denom = 0.0;
  for (int i : out.top) {
    const double v = std::max(0.0, s[static_cast<std::size_t>(i)]);
    mass[owners[static_cast<std::size_t>(i)]] += v;
    denom += v;
  }
  for (const auto& [kb, m] : mass) out.weights[kb] = denom > 0.0 ? static_cast<int>(std::floor(m / denom * slots)) : -1;
  return out;
}

}  // namespace oracle
