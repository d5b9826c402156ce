#pragma once

// Exhaustive assignment search: the oracle for the exact OT solver.

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

#include "clwf/ot_coupling.hpp"

namespace clwf::testing {

struct BruteForceResult {
  double cost = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> assignment;  // lexicographically smallest minimizer
};

/// Enumerates permutations in lexicographic order; keeps the first strict
/// minimum. Cost summed in row order, like assignment_cost.
inline BruteForceResult brute_force_assignment(const CostMatrix& c) {
  std::vector<std::size_t> perm(c.n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  BruteForceResult best;
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < c.n; ++i) total += c(i, perm[i]);
    if (total < best.cost) {
      best.cost = total;
      best.assignment = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace clwf::testing
