#include "msnet/fd_check.hpp"

#include <algorithm>
#include <cmath>

#include "msnet/errors.hpp"

namespace msnet {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

double fd_check(const std::function<double(std::span<const double>)>& f,
                const std::function<std::vector<double>(std::span<const double>)>& gradient,
                std::span<const double> point, double h) {
  if (!(h > 0.0)) throw ContractError("fd_check: step h must be positive");
  const std::vector<double> analytic = gradient(point);
  if (analytic.size() != point.size()) throw DimensionError("fd_check: gradient size differs from point size");
  std::vector<double> x(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(x);
    x[i] = saved - h;
    const double down = f(x);
    x[i] = saved;
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * h)));
  }
  return worst;
}

namespace {

double evaluate(const GraphFunction& build, std::span<const Tensor> point) {
  Graph graph(GradMode::kDisabled);
  std::vector<Var> vars;
  vars.reserve(point.size());
  for (const Tensor& t : point) vars.push_back(graph.variable(t));
  return build(graph, vars).value().item();
}

}  // namespace

double fd_check(const GraphFunction& build, std::span<const Tensor> point, double h) {
  if (!(h > 0.0)) throw ContractError("fd_check: step h must be positive");
  std::vector<Tensor> analytic;
  {
    Graph graph;
    std::vector<Var> vars;
    for (const Tensor& t : point) vars.push_back(graph.variable(t));
    Var out = build(graph, vars);
    graph.backward(out);
    for (const Var& v : vars) analytic.push_back(graph.grad_or_zero(v));
  }
  std::vector<Tensor> x(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t t = 0; t < x.size(); ++t) {
    for (std::size_t i = 0; i < x[t].numel(); ++i) {
      const double saved = x[t][i];
      x[t][i] = saved + h;
      const double up = evaluate(build, x);
      x[t][i] = saved - h;
      const double down = evaluate(build, x);
      x[t][i] = saved;
      worst = std::max(worst, relative_error(analytic[t][i], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

}  // namespace msnet
