#pragma once

// Central-difference gradient oracle used by the test suites. Kept apart from
// the library so the analytic backward pass is checked against an independent
// numeric route.

#include <cmath>
#include <functional>
#include <vector>

#include "ef/tensor.hpp"

namespace gradcheck {

struct Result {
    double max_rel_err = 0.0;
    int checked = 0;
};

inline double rel_err(double a, double b) {
    const double denom = std::max({std::fabs(a), std::fabs(b), 1e-3});
    return std::fabs(a - b) / denom;
}

// f() must rebuild the graph from the current parameter values and return a
// scalar loss. `param` is perturbed in place. Checks at most `max_entries`
// entries (all of them when the tensor is small), spread over the buffer.
inline Result check_param(const std::function<ef::TensorD()>& f, ef::TensorD param,
                          int max_entries = 16, double h = 1e-5) {
    Result res;

    param.zero_grad();  // backward accumulates; start this measurement clean
    auto loss = f();
    ef::backward(loss);
    std::vector<double> analytic = param.has_grad() ? param.grad() : std::vector<double>(param.data().size(), 0.0);

    const size_t n = param.data().size();
    const size_t stride = n <= static_cast<size_t>(max_entries) ? 1 : n / static_cast<size_t>(max_entries);
    for (size_t i = 0; i < n; i += stride) {
        const double orig = param.data()[i];
        param.data()[i] = orig + h;
        const double fp = f().data()[0];
        param.data()[i] = orig - h;
        const double fm = f().data()[0];
        param.data()[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        res.max_rel_err = std::max(res.max_rel_err, rel_err(analytic[i], numeric));
        ++res.checked;
    }
    return res;
}

}  // namespace gradcheck
