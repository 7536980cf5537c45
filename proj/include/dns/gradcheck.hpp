// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dns/errors.hpp"
#include "dns/tensor.hpp"

namespace dns::ad {

// Per-coordinate comparison of tape gradients against central finite
// differences. The relative error uses an absolute floor of 1, i.e.
// err = |ad - fd| / max(|ad|, |fd|, 1).
struct GradcheckReport {
    double max_rel_err = 0.0;
    std::size_t n_checked = 0;
    std::size_t worst_tensor = 0;
    std::size_t worst_coord = 0;
    bool pass = true;
    std::vector<std::vector<double>> per_coordinate; // one vector per checked tensor
};

// f must rebuild the computation from scratch on the given tape and return a
// scalar loss; it closes over the checked tensors, whose values are perturbed
// in place. The step is scaled per coordinate as h * max(1, |x|).
inline GradcheckReport gradcheck(const std::function<Tensor(Tape&)>& f,
                                 const std::vector<Tensor>& points, double h, double tol) {
    for (const auto& p : points)
        if (!p.requires_grad()) throw ContractError("gradcheck: point tensor must require grad");

    std::vector<std::vector<double>> analytic;
    {
        for (auto p : points) p.zero_grad();
        Tape tape;
        Tensor loss = f(tape);
        if (loss.numel() != 1) throw ContractError("gradcheck: f must be scalar-valued");
        tape.backward(loss);
        for (const auto& p : points) analytic.push_back(p.grad());
    }

    auto eval = [&]() {
        Tape tape;
        const double v = f(tape).value();
        if (!std::isfinite(v)) throw NumericError("gradcheck: non-finite function value");
        return v;
    };

    GradcheckReport rep;
    for (std::size_t ti = 0; ti < points.size(); ++ti) {
        Tensor p = points[ti];
        rep.per_coordinate.emplace_back();
        rep.per_coordinate.back().reserve(p.numel());
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double x0 = p.data()[i];
            const double step = h * std::max(1.0, std::abs(x0));
            p.data()[i] = x0 + step;
            const double lp = eval();
            p.data()[i] = x0 - step;
            const double lm = eval();
            p.data()[i] = x0;
            const double fd = (lp - lm) / (2.0 * step);
            const double an = analytic[ti][i];
            if (!std::isfinite(fd) || !std::isfinite(an))
                throw NumericError("gradcheck: non-finite gradient");
            const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1.0});
            rep.per_coordinate.back().push_back(err);
            if (err > rep.max_rel_err) {
                rep.max_rel_err = err;
                rep.worst_tensor = ti;
                rep.worst_coord = i;
            }
            ++rep.n_checked;
        }
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

} // namespace dns::ad
