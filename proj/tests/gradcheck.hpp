#pragma once

// Central finite differences against analytic gradients, shared by the unit
// tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <coarse/numerics.hpp>

namespace gradcheck {

struct Report {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::string worst;  // "name[index]" of the worst entry
    std::size_t checked = 0;
};

// |a - n| / max(|a| + |n|, floor). The floor keeps entries whose true
// gradient is zero from dividing rounding noise by nothing.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), floor);
}

struct Param {
    std::string name;
    coarse::Tensor* tensor;
};

// `loss` evaluates the scalar loss from the current parameter values.
// `analytic` must hold d(loss)/d(param) per parameter in the same order.
inline Report compare(const std::vector<Param>& params, const std::vector<std::vector<double>>& analytic,
                      const std::function<double()>& loss, double h = 1e-5) {
    Report r;
    for (std::size_t p = 0; p < params.size(); ++p) {
        coarse::Tensor& t = *params[p].tensor;
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double orig = t[i];
            t[i] = orig + h;
            const double up = loss();
            t[i] = orig - h;
            const double down = loss();
            t[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[p].empty() ? 0.0 : analytic[p][i];
            const double rel = relative_error(a, numeric);
            r.max_abs_error = std::max(r.max_abs_error, std::abs(a - numeric));
            if (rel > r.max_rel_error) {
                r.max_rel_error = rel;
                r.worst = params[p].name + "[" + std::to_string(i) + "]";
            }
            ++r.checked;
        }
    }
    return r;
}

}  // namespace gradcheck
