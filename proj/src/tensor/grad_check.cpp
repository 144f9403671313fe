#include "tail/grad_check.hpp"

#include <cmath>

namespace tail {

double grad_check(const ScalarFn& f, const Tensor& x, double eps) {
  if (!(eps > 0.0 && eps <= 1e-3)) throw std::invalid_argument("grad_check: eps must lie in (0, 1e-3]");
  Tape tape;
  const Tensor xv = tape.variable(x);
  const Tensor y = f(xv);
  if (y.numel() != 1) throw ShapeError("grad_check: function returned shape " + to_string(y.shape()));
  Vec analytic = Vec::Zero(x.numel());
  if (y.requires_grad()) {
    const Gradients grads = tape.backward(y);
    if (const Vec* g = grads.of(xv)) analytic = *g;
  }
  Vec numeric(x.numel());
  Vec probe = x.values();
  for (Index i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(Tensor(x.shape(), probe)).item();
    probe[i] = orig - eps;
    const double down = f(Tensor(x.shape(), probe)).item();
    probe[i] = orig;
    numeric[i] = (up - down) / (2.0 * eps);
  }
  // Norm-wise so that near-zero components do not amplify rounding noise.
  return (analytic - numeric).norm() / (analytic.norm() + numeric.norm() + 1e-12);
}

}  // namespace tail
