#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ctguard/nn.hpp"

namespace gradcheck {

struct Result {
  double vector_rel = 0.0;   // ||a - n|| / max(||a||, ||n||)
  double worst_entry = 0.0;  // max |a - n| / max(|a|, |n|, floor)
  std::size_t entries = 0;
};

inline double entry_rel(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// `analytic` must zero the gradients, run forward + backward and leave the
// parameter gradients in place. `loss` evaluates the objective only.
inline Result against_central_differences(const ctguard::nn::ParamList<double>& params,
                                          const std::function<double()>& loss,
                                          const std::function<void()>& analytic, double step = 1e-3,
                                          double floor = 1e-6) {
  analytic();
  std::vector<double> a, n;
  for (auto* p : params) {
    if (!p->trainable) continue;
    for (std::size_t i = 0; i < p->numel(); ++i) {
      a.push_back(p->grad[i]);
      const double keep = p->value[i];
      p->value[i] = keep + step;
      const double up = loss();
      p->value[i] = keep - step;
      const double down = loss();
      p->value[i] = keep;
      n.push_back((up - down) / (2 * step));
    }
  }
  Result r;
  r.entries = a.size();
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
    r.worst_entry = std::max(r.worst_entry, entry_rel(a[i], n[i], floor));
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nn));
  r.vector_rel = denom > 0 ? std::sqrt(diff) / denom : 0.0;
  return r;
}

}  // namespace gradcheck
