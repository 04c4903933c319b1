#include "dformer/gradcheck.hpp"

#include <cmath>
#include <vector>

namespace dformer {

Tensor finite_diff_oracle(const std::function<double(const Tensor&)>& f, const Tensor& x,
                          double h) {
  if (h <= 0.0) throw ParameterError("finite_diff_oracle: h must be positive");
  std::vector<double> grad(x.numel());
  std::vector<double> work(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    double orig = work[i];
    work[i] = orig + h;
    double fp = f(Tensor(x.shape(), work));
    work[i] = orig - h;
    double fm = f(Tensor(x.shape(), work));
    work[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_oracle: non-finite function value at coordinate " +
                         std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(grad));
}

double max_rel_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_rel_error: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  double worst = 0.0;
  auto va = a.values();
  auto vb = b.values();
  for (std::size_t i = 0; i < va.size(); ++i) {
    double denom = std::max({1.0, std::fabs(va[i]), std::fabs(vb[i])});
    worst = std::max(worst, std::fabs(va[i] - vb[i]) / denom);
  }
  return worst;
}

}  // namespace dformer
