#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "avatarkit/ops.hpp"
#include "avatarkit/rng.hpp"

namespace avk::testutil {

// f maps a leaf tensor to a scalar expression. Compares the analytic
// gradient against central finite differences and returns the relative
// error ||ga - gn|| / (||ga|| + ||gn|| + tiny).
inline double gradcheck(const std::function<Var<double>(const Var<double>&)>& f,
                        const Tensor<double>& x0, double step = 1e-4) {
    Var<double> x = make_leaf(x0, true);
    Var<double> y = f(x);
    Tensor<double> ga = grad(y, {x})[0].val();

    Tensor<double> gn(x0.shape());
    for (int64_t i = 0; i < x0.numel(); ++i) {
        Tensor<double> xp = x0, xm = x0;
        xp[i] += step;
        xm[i] -= step;
        double fp = f(make_leaf(xp, false)).item();
        double fm = f(make_leaf(xm, false)).item();
        gn[i] = (fp - fm) / (2 * step);
    }

    double num = 0, da = 0, dn = 0;
    for (int64_t i = 0; i < ga.numel(); ++i) {
        num += (ga[i] - gn[i]) * (ga[i] - gn[i]);
        da += ga[i] * ga[i];
        dn += gn[i] * gn[i];
    }
    return std::sqrt(num) / (std::sqrt(da) + std::sqrt(dn) + 1e-12);
}

inline Tensor<double> random_tensor(Shape s, uint64_t seed, const char* role = "t",
                                    double scale = 1.0) {
    Tensor<double> t(std::move(s));
    RandomStream rs(seed, role);
    rs.fill_normal(t, scale);
    return t;
}

inline Tensor<double> random_uniform_tensor(Shape s, uint64_t seed, double lo = 0.0,
                                            double hi = 1.0, const char* role = "u") {
    Tensor<double> t(std::move(s));
    RandomStream rs(seed, role);
    rs.fill_uniform(t, lo, hi);
    return t;
}

}  // namespace avk::testutil
