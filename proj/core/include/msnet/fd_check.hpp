#pragma once

#include <functional>
#include <span>
#include <vector>

#include "msnet/graph.hpp"

namespace msnet {

/// Relative error |a - n| / max(|a|, |n|, 1e-8).
double relative_error(double analytic, double numeric);

/// Central-difference check of an explicit gradient. Returns the max relative error.
double fd_check(const std::function<double(std::span<const double>)>& f,
                const std::function<std::vector<double>(std::span<const double>)>& gradient,
                std::span<const double> point, double h);

/// Builds a scalar from graph variables bound to `point`.
using GraphFunction = std::function<Var(Graph&, std::span<const Var>)>;

/// Checks the reverse-mode gradient of `build` w.r.t. every entry of every input
/// tensor against central differences. Returns the max relative error.
double fd_check(const GraphFunction& build, std::span<const Tensor> point, double h);

}  // namespace msnet
