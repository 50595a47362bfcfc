#pragma once

// Slow, direct reference implementations shared by the unit and acceptance tests.

#include "sdmlm/sdm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <vector>

namespace oracle {

// Exhaustive search over every (q_tilde_min, psi0, psi1) candidate triple.
inline sdmlm::Thresholds fit_thresholds(const std::vector<sdmlm::SdmVerdict>& v, const std::vector<int>& y,
                                        double alpha, std::size_t min_admitted) {
  std::set<double> qs;
  std::set<double> psi[2] = {{alpha}, {alpha}};
  for (const auto& x : v) {
    qs.insert(x.q_tilde);
    psi[x.y_hat].insert(x.p[x.y_hat]);
  }
  sdmlm::Thresholds best{alpha, alpha, std::numeric_limits<double>::infinity(), 0};
  const std::size_t need = std::max<std::size_t>(1, min_admitted);
  for (double q : qs) {
    for (double p0 : psi[0]) {
      for (double p1 : psi[1]) {
        std::size_t n[2][2] = {};  // [true][predicted]
        for (std::size_t i = 0; i < v.size(); ++i) {
          const double t = v[i].y_hat == 0 ? p0 : p1;
          if (v[i].q_tilde >= q && v[i].p[v[i].y_hat] >= t) ++n[y[i]][v[i].y_hat];
        }
        const std::size_t total = n[0][0] + n[0][1] + n[1][0] + n[1][1];
        if (total < need) continue;
        auto ok = [&](std::size_t c, std::size_t all) { return all == 0 || double(c) / double(all) >= alpha; };
        if (!ok(n[0][0], n[0][0] + n[0][1]) || !ok(n[1][1], n[1][0] + n[1][1]) ||
            !ok(n[0][0], n[0][0] + n[1][0]) || !ok(n[1][1], n[0][1] + n[1][1])) {
          continue;
        }
        const bool better =
            total > best.admitted ||
            (total == best.admitted &&
             (q > best.q_tilde_min || (q == best.q_tilde_min && (p0 < best.psi0 || (p0 == best.psi0 && p1 < best.psi1)))));
        if (best.admitted == 0 || better) best = {p0, p1, q, total};
      }
    }
  }
  return best;
}

// Random verdict set with coarse values so that ties occur.
inline void random_verdicts(std::mt19937_64& rng, std::size_t n, std::vector<sdmlm::SdmVerdict>& v,
                            std::vector<int>& y) {
  std::uniform_int_distribution<int> coin(0, 1), q(0, 4), p(0, 5);
  std::bernoulli_distribution correct(0.85);
  v.assign(n, {});
  y.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    auto& x = v[i];
    x.y_hat = coin(rng);
    x.q_tilde = q(rng) * 0.5;
    const double top = 0.5 + 0.1 * p(rng);
    x.p[x.y_hat] = top;
    x.p[1 - x.y_hat] = 1.0 - top;
    y[i] = correct(rng) ? x.y_hat : 1 - x.y_hat;
  }
}

}  // namespace oracle
