#include "msnet/normalization.hpp"

#include <cmath>
#include <memory>

#include "msnet/errors.hpp"

namespace msnet {

BnState BnState::create(std::size_t channels, const std::string& name) {
  BnState s;
  s.name = name;
  s.gamma = Parameter{name + ".gamma", Tensor(Shape{channels}, 1.0), Tensor()};
  s.beta = Parameter{name + ".beta", Tensor(Shape{channels}, 0.0), Tensor()};
  s.running_mean = Tensor(Shape{channels}, 0.0);
  s.running_var = Tensor(Shape{channels}, 1.0);
  return s;
}

DsbnState DsbnState::create(std::size_t channels, int num_sites, const std::string& name) {
  if (num_sites < 1) throw ContractError("DSBN needs at least one site");
  DsbnState d;
  for (int s = 0; s < num_sites; ++s) d.per_site.push_back(BnState::create(channels, name + ".site" + std::to_string(s + 1)));
  return d;
}

BnState& DsbnState::site(SiteId site) {
  if (site.value < 1 || site.value > num_sites()) {
    throw SiteRoutingError("site " + std::to_string(site.value) + " is not routed by this layer (sites 1.." +
                           std::to_string(num_sites()) + ")");
  }
  return per_site[static_cast<std::size_t>(site.index())];
}

const BnState& DsbnState::site(SiteId site) const { return const_cast<DsbnState&>(*this).site(site); }

namespace {

void check_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (x.rank() != 4) throw DimensionError("batch norm input must be rank 4, got " + shape_to_string(x.shape()));
  if (gamma.numel() != x.dim(1) || beta.numel() != x.dim(1)) {
    throw DimensionError("batch norm affine length does not match input axis 1 (channels=" + std::to_string(x.dim(1)) + ")");
  }
}

}  // namespace

Var batch_norm(Var input, Var gamma, Var beta, double epsilon, BatchMoments* moments) {
  const Tensor& x = input.value();
  const Tensor& g = gamma.value();
  const Tensor& bt = beta.value();
  check_affine(x, g, bt);
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::size_t count = b * hw;
  if (count < 2) throw ContractError("degenerate batch: batch norm needs b*h*w >= 2, got " + std::to_string(count));

  Tensor mean(Shape{c}), var(Shape{c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t n = 0; n < b; ++n) {
      const double* p = x.data() + (n * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) s += p[i];
    }
    const double m = s / static_cast<double>(count);
    double ss = 0.0;
    for (std::size_t n = 0; n < b; ++n) {
      const double* p = x.data() + (n * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) ss += (p[i] - m) * (p[i] - m);
    }
    mean[ch] = m;
    var[ch] = ss / static_cast<double>(count);
  }

  auto xhat = std::make_shared<Tensor>(x.shape());
  auto inv_std = std::make_shared<Tensor>(Shape{c});
  Tensor out(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) (*inv_std)[ch] = 1.0 / std::sqrt(var[ch] + epsilon);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (n * c + ch) * hw;
      const double m = mean[ch], is = (*inv_std)[ch], ga = g[ch], be = bt[ch];
      for (std::size_t i = 0; i < hw; ++i) {
        const double xh = (x[off + i] - m) * is;
        (*xhat)[off + i] = xh;
        out[off + i] = ga * xh + be;
      }
    }
  if (moments != nullptr) *moments = BatchMoments{std::move(mean), std::move(var)};

  return input.graph->record(std::move(out), {input, gamma, beta}, [xhat, inv_std, b, c, hw](BackwardContext& ctx) {
    const Tensor& dy = ctx.grad_output();
    const Tensor& ga = ctx.input(1);
    const double count = static_cast<double>(b * hw);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t n = 0; n < b; ++n) {
        const std::size_t off = (n * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          sum_dy += dy[off + i];
          sum_dy_xhat += dy[off + i] * (*xhat)[off + i];
        }
      }
      if (ctx.wants(1)) ctx.input_grad(1)[ch] += sum_dy_xhat;
      if (ctx.wants(2)) ctx.input_grad(2)[ch] += sum_dy;
      if (ctx.wants(0)) {
        // dx = gamma*inv_std/N * (N*dy - sum(dy) - xhat*sum(dy*xhat))
        Tensor& dx = ctx.input_grad(0);
        const double k = ga[ch] * (*inv_std)[ch] / count;
        for (std::size_t n = 0; n < b; ++n) {
          const std::size_t off = (n * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i)
            dx[off + i] += k * (count * dy[off + i] - sum_dy - (*xhat)[off + i] * sum_dy_xhat);
        }
      }
    }
  });
}

Var batch_norm_inference(Var input, Var gamma, Var beta, const Tensor& mean, const Tensor& var, double epsilon) {
  const Tensor& x = input.value();
  const Tensor& g = gamma.value();
  const Tensor& bt = beta.value();
  check_affine(x, g, bt);
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (mean.numel() != c || var.numel() != c) throw DimensionError("batch norm statistics length does not match channels");
  auto inv_std = std::make_shared<Tensor>(Shape{c});
  auto shifted_mean = std::make_shared<Tensor>(mean);
  for (std::size_t ch = 0; ch < c; ++ch) (*inv_std)[ch] = 1.0 / std::sqrt(var[ch] + epsilon);
  Tensor out(x.shape());
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (n * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) out[off + i] = g[ch] * (x[off + i] - mean[ch]) * (*inv_std)[ch] + bt[ch];
    }
  return input.graph->record(std::move(out), {input, gamma, beta}, [inv_std, shifted_mean, b, c, hw](BackwardContext& ctx) {
    const Tensor& dy = ctx.grad_output();
    const Tensor& x = ctx.input(0);
    const Tensor& ga = ctx.input(1);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double is = (*inv_std)[ch], m = (*shifted_mean)[ch];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t n = 0; n < b; ++n) {
        const std::size_t off = (n * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          sum_dy += dy[off + i];
          sum_dy_xhat += dy[off + i] * (x[off + i] - m) * is;
        }
      }
      if (ctx.wants(1)) ctx.input_grad(1)[ch] += sum_dy_xhat;
      if (ctx.wants(2)) ctx.input_grad(2)[ch] += sum_dy;
      if (ctx.wants(0)) {
        Tensor& dx = ctx.input_grad(0);
        const double k = ga[ch] * is;
        for (std::size_t n = 0; n < b; ++n) {
          const std::size_t off = (n * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) dx[off + i] += k * dy[off + i];
        }
      }
    }
  });
}

Var bn_forward_train(Graph& graph, Var input, BnState& state) {
  BatchMoments moments;
  Var out = batch_norm(input, graph.parameter(state.gamma), graph.parameter(state.beta), state.epsilon, &moments);
  const double m = state.momentum;
  for (std::size_t ch = 0; ch < state.channels(); ++ch) {
    state.running_mean[ch] = m * state.running_mean[ch] + (1.0 - m) * moments.mean[ch];
    state.running_var[ch] = m * state.running_var[ch] + (1.0 - m) * moments.var[ch];
  }
  ++state.updates;
  return out;
}

Var bn_forward_eval(Graph& graph, Var input, BnState& state) {
  return batch_norm_inference(input, graph.parameter(state.gamma), graph.parameter(state.beta), state.running_mean,
                              state.running_var, state.epsilon);
}

Var bn_forward(Graph& graph, Var input, BnState& state, NormMode mode) {
  switch (mode) {
    case NormMode::kTrain:
      return bn_forward_train(graph, input, state);
    case NormMode::kEval:
      return bn_forward_eval(graph, input, state);
    case NormMode::kBatchStats:
      return batch_norm(input, graph.parameter(state.gamma), graph.parameter(state.beta), state.epsilon);
  }
  throw ContractError("unknown normalization mode");
}

Var dsbn_forward(Graph& graph, Var input, SiteId site, DsbnState& state, NormMode mode) {
  return bn_forward(graph, input, state.site(site), mode);
}

}  // namespace msnet
