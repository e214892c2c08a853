#include "msnet/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "msnet/errors.hpp"
#include "msnet/fd_check.hpp"
#include "msnet/loss.hpp"
#include "msnet/metrics.hpp"
#include "msnet/normalization.hpp"
#include "msnet/ops.hpp"
#include "msnet/rng.hpp"

namespace msnet {

namespace {

using Tap = std::function<Var(Var)>;

struct GradCase {
  std::string name;
  // draws a point and returns the function to check at it
  std::function<std::pair<std::vector<Tensor>, GraphFunction>(Rng&, const Tap&)> make;
  // cases that bind model parameters check through the explicit-gradient overload instead
  std::function<double(Rng&, const Tap&, double)> check = nullptr;
};

// Flattened view over several tensors, for the explicit-gradient fd_check.
std::vector<double> flatten(const std::vector<const Tensor*>& ts) {
  std::vector<double> out;
  for (const Tensor* t : ts) out.insert(out.end(), t->values().begin(), t->values().end());
  return out;
}

void unflatten(std::span<const double> flat, const std::vector<Tensor*>& ts) {
  std::size_t at = 0;
  for (Tensor* t : ts) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), t->numel(), t->data());
    at += t->numel();
  }
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Tensor uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Magnitudes in [gap, 1] so a step of h never crosses a kink at zero.
Tensor away_from_zero(Shape shape, Rng& rng, double gap) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (double& v : t.values()) v = sign(rng) ? u(rng) : -u(rng);
  return t;
}

// Distinct values spaced 0.05 apart so pooling windows have no near-ties.
Tensor spaced(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  std::vector<double> v(t.numel());
  std::iota(v.begin(), v.end(), 0.0);
  std::shuffle(v.begin(), v.end(), rng);
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = 0.05 * v[i] - 0.025 * static_cast<double>(v.size());
  return t;
}

// Projects a tensor output onto a fixed random direction.
Var project(Graph& g, Var y, std::uint64_t salt) {
  Rng rng = make_rng(salt, "verify.projection", y.value().numel());
  return sum(mul(y, g.constant(uniform(y.shape(), rng))));
}

// Identity forward, 1.5x backward: a broken rule for fault injection.
Var corrupt(Var x) {
  Graph& g = *x.graph;
  return g.record(x.value(), {x}, [](BackwardContext& ctx) {
    Tensor& gi = ctx.input_grad(0);
    const Tensor& go = ctx.grad_output();
    for (std::size_t i = 0; i < gi.numel(); ++i) gi[i] += 1.5 * go[i];
  });
}

std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;
  cases.push_back({"conv2d", [](Rng& rng, const Tap& tap) {
                     const std::size_t b = pick(rng, 1, 2), ci = pick(rng, 1, 3), co = pick(rng, 1, 3);
                     const std::size_t h = pick(rng, 4, 7), w = pick(rng, 4, 7), k = pick(rng, 0, 1) ? 3 : 1;
                     const int stride = static_cast<int>(pick(rng, 1, 2)), pad = static_cast<int>((k - 1) / 2);
                     std::vector<Tensor> pt{uniform({b, ci, h, w}, rng), uniform({co, ci, k, k}, rng), uniform({co}, rng)};
                     GraphFunction f = [=](Graph& g, std::span<const Var> v) {
                       return project(g, tap(conv2d(v[0], v[1], v[2], stride, pad)), 1);
                     };
                     return std::pair{pt, f};
                   }});
  cases.push_back({"transposed_conv2d", [](Rng& rng, const Tap& tap) {
                     const std::size_t b = pick(rng, 1, 2), ci = pick(rng, 1, 3), co = pick(rng, 1, 3);
                     const std::size_t h = pick(rng, 2, 4), w = pick(rng, 2, 4);
                     std::vector<Tensor> pt{uniform({b, ci, h, w}, rng), uniform({ci, co, 3, 3}, rng), uniform({co}, rng)};
                     GraphFunction f = [=](Graph& g, std::span<const Var> v) {
                       return project(g, tap(transposed_conv2d(v[0], v[1], v[2], 2)), 2);
                     };
                     return std::pair{pt, f};
                   }});
  cases.push_back({"maxpool2d", [](Rng& rng, const Tap& tap) {
                     const std::size_t b = pick(rng, 1, 2), c = pick(rng, 1, 3), h = pick(rng, 4, 8), w = pick(rng, 4, 8);
                     std::vector<Tensor> pt{spaced({b, c, h, w}, rng)};
                     GraphFunction f = [=](Graph& g, std::span<const Var> v) { return project(g, tap(maxpool2d(v[0])), 3); };
                     return std::pair{pt, f};
                   }});
  cases.push_back({"relu", [](Rng& rng, const Tap& tap) {
                     const std::size_t b = pick(rng, 1, 2), c = pick(rng, 1, 3), h = pick(rng, 2, 5);
                     std::vector<Tensor> pt{away_from_zero({b, c, h, h}, rng, 0.01)};
                     GraphFunction f = [=](Graph& g, std::span<const Var> v) { return project(g, tap(relu(v[0])), 4); };
                     return std::pair{pt, f};
                   }});
  cases.push_back({"add", [](Rng& rng, const Tap& tap) {
                     Shape s{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 2, 5), pick(rng, 2, 5)};
                     std::vector<Tensor> pt{uniform(s, rng), uniform(s, rng)};
                     GraphFunction f = [=](Graph& g, std::span<const Var> v) { return project(g, tap(add(v[0], v[1])), 5); };
                     return std::pair{pt, f};
                   }});
  cases.push_back({"softmax_channel", [](Rng& rng, const Tap& tap) {
                     Shape s{pick(rng, 1, 2), pick(rng, 2, 4), pick(rng, 2, 5), pick(rng, 2, 5)};
                     std::vector<Tensor> pt{uniform(s, rng, -2.0, 2.0)};
                     GraphFunction f = [=](Graph& g, std::span<const Var> v) {
                       return project(g, tap(softmax_channel(v[0])), 6);
                     };
                     return std::pair{pt, f};
                   }});
  cases.push_back({"dsbn_forward", [](Rng& rng, const Tap& tap) {
                     const std::size_t c = pick(rng, 1, 3);
                     Shape s{pick(rng, 2, 3), c, pick(rng, 2, 4), pick(rng, 2, 4)};
                     std::vector<Tensor> pt{uniform(s, rng)};
                     auto state = std::make_shared<DsbnState>(DsbnState::create(c, 3, "verify"));
                     Rng init = make_rng(9, "verify.dsbn", c);
                     for (BnState& bn : state->per_site) {
                       bn.gamma.value = uniform({c}, init, 0.5, 1.5);
                       bn.beta.value = uniform({c}, init);
                     }
                     const SiteId site{static_cast<int>(pick(rng, 1, 3))};
                     GraphFunction f = [=](Graph& g, std::span<const Var> v) {
                       return project(g, tap(dsbn_forward(g, v[0], site, *state, NormMode::kTrain)), 8);
                     };
                     return std::pair{pt, f};
                   }});
  auto onehot_target = [](Rng& rng, const Shape& s) {
    Tensor t(s);
    const std::size_t hw = s[2] * s[3];
    for (std::size_t n = 0; n < s[0]; ++n)
      for (std::size_t k = 0; k < hw; ++k) t[(n * s[1] + pick(rng, 0, s[1] - 1)) * hw + k] = 1.0;
    return t;
  };
  cases.push_back({"dice_loss", [onehot_target](Rng& rng, const Tap& tap) {
                     Shape s{pick(rng, 1, 2), 2, pick(rng, 2, 5), pick(rng, 2, 5)};
                     std::vector<Tensor> pt{uniform(s, rng, -2.0, 2.0)};
                     Tensor target = onehot_target(rng, s);
                     GraphFunction f = [=](Graph&, std::span<const Var> v) {
                       return tap(dice_loss(softmax_channel(v[0]), target));
                     };
                     return std::pair{pt, f};
                   }});
  cases.push_back({"kt_loss", [onehot_target](Rng& rng, const Tap& tap) {
                     Shape s{pick(rng, 1, 2), 2, pick(rng, 2, 5), pick(rng, 2, 5)};
                     std::vector<Tensor> pt{uniform(s, rng, -2.0, 2.0)};
                     Tensor aux = onehot_argmax(softmax_channel(Graph(GradMode::kDisabled).constant(uniform(s, rng))).value());
                     GraphFunction f = [=](Graph&, std::span<const Var> v) {
                       return tap(kt_loss(softmax_channel(v[0]), aux));
                     };
                     return std::pair{pt, f};
                   }});
  cases.push_back({"bn_forward_train", nullptr, [](Rng& rng, const Tap& tap, double h) {
                     const std::size_t c = pick(rng, 1, 3);
                     Shape s{pick(rng, 2, 3), c, pick(rng, 2, 4), pick(rng, 2, 4)};
                     Tensor x = uniform(s, rng);
                     BnState state = BnState::create(c, "verify");
                     state.gamma.value = uniform({c}, rng, 0.5, 1.5);
                     state.beta.value = uniform({c}, rng);
                     auto forward = [&](std::span<const double> flat, std::vector<double>* grad) {
                       unflatten(flat, {&x, &state.gamma.value, &state.beta.value});
                       Graph g(grad ? GradMode::kEnabled : GradMode::kDisabled);
                       Var xv = g.variable(x);
                       Var loss = project(g, tap(bn_forward_train(g, xv, state)), 7);
                       if (grad) {
                         g.backward(loss);
                         state.gamma.zero_grad();
                         state.beta.zero_grad();
                         g.accumulate_parameter_grads();
                         *grad = flatten({g.grad(xv), &state.gamma.grad, &state.beta.grad});
                       }
                       return loss.value().item();
                     };
                     std::vector<double> point = flatten({&x, &state.gamma.value, &state.beta.value});
                     return fd_check([&](std::span<const double> p) { return forward(p, nullptr); },
                                     [&](std::span<const double> p) {
                                       std::vector<double> g;
                                       forward(p, &g);
                                       return g;
                                     },
                                     point, h);
                   }});
  cases.push_back({"l2_penalty", nullptr, [](Rng& rng, const Tap& tap, double h) {
                     Parameter k0{"k0", uniform({pick(rng, 1, 3), pick(rng, 1, 3), 3, 3}, rng), {}};
                     Parameter k1{"k1", uniform({pick(rng, 1, 4), 1, 1, 1}, rng), {}};
                     auto forward = [&](std::span<const double> flat, std::vector<double>* grad) {
                       unflatten(flat, {&k0.value, &k1.value});
                       Graph g(grad ? GradMode::kEnabled : GradMode::kDisabled);
                       Parameter* ks[] = {&k0, &k1};
                       Var loss = tap(l2_penalty(g, ks));
                       if (grad) {
                         g.backward(loss);
                         k0.zero_grad();
                         k1.zero_grad();
                         g.accumulate_parameter_grads();
                         *grad = flatten({&k0.grad, &k1.grad});
                       }
                       return loss.value().item();
                     };
                     std::vector<double> point = flatten({&k0.value, &k1.value});
                     return fd_check([&](std::span<const double> p) { return forward(p, nullptr); },
                                     [&](std::span<const double> p) {
                                       std::vector<double> g;
                                       forward(p, &g);
                                       return g;
                                     },
                                     point, h);
                   }});
  return cases;
}

}  // namespace

std::vector<std::string> gradient_check_names() {
  std::vector<std::string> names;
  for (const GradCase& c : gradient_cases()) names.push_back(c.name);
  return names;
}

std::vector<CheckResult> gradient_suite(const VerifyOptions& options) {
  std::vector<GradCase> cases = gradient_cases();
  if (!options.sabotage.empty() &&
      std::none_of(cases.begin(), cases.end(), [&](const GradCase& c) { return c.name == options.sabotage; }))
    throw ConfigError("unknown check '" + options.sabotage + "' for fault injection");
  std::vector<CheckResult> out;
  for (const GradCase& c : cases) {
    const bool broken = c.name == options.sabotage;
    auto tap = [broken](Var y) { return broken ? corrupt(y) : y; };
    CheckResult r{c.name, 0.0, options.tolerance, true, ""};
    for (int trial = 0; trial < options.trials; ++trial) {
      Rng rng = make_rng(options.seed, "verify." + c.name, static_cast<std::uint64_t>(trial));
      double err = 0.0;
      if (c.check) {
        err = c.check(rng, tap, options.step);
      } else {
        auto [point, f] = c.make(rng, tap);
        err = fd_check(f, point, options.step);
      }
      r.max_error = std::max(r.max_error, err);
    }
    r.passed = r.max_error < options.tolerance;
    if (broken) r.detail = "fault injected";
    out.push_back(r);
  }
  return out;
}

namespace {

double brute_asd(const BinaryMask& a, const BinaryMask& b) {
  auto edge = [](const BinaryMask& m) {
    std::vector<std::pair<long, long>> pts;
    const long h = static_cast<long>(m.height), w = static_cast<long>(m.width);
    auto at = [&](long y, long x) { return y >= 0 && x >= 0 && y < h && x < w && m(y, x) == 1; };
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x)
        if (at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))) pts.emplace_back(y, x);
    return pts;
  };
  auto ea = edge(a), eb = edge(b);
  auto side = [](const auto& from, const auto& to) {
    double s = 0;
    for (auto p : from) {
      double best = INFINITY;
      for (auto q : to) best = std::min(best, std::sqrt(double((p.first - q.first) * (p.first - q.first) + (p.second - q.second) * (p.second - q.second))));
      s += best;
    }
    return s;
  };
  return (side(ea, eb) + side(eb, ea)) / static_cast<double>(ea.size() + eb.size());
}

}  // namespace

std::vector<CheckResult> metric_suite(const VerifyOptions& options) {
  Rng rng = make_rng(options.seed, "verify.metrics", 0);
  std::bernoulli_distribution coin(0.35);
  auto random_mask = [&] {
    BinaryMask m(16, 16);
    for (auto& b : m.bits) b = coin(rng) ? 1 : 0;
    return m;
  };
  CheckResult dice{"dice_coefficient", 0.0, 0.0, true, "500 random 16x16 pairs vs set counting"};
  CheckResult asd{"avg_symmetric_distance", 0.0, 0.0, true, "500 random 16x16 pairs vs all-pairs search"};
  CheckResult lcc{"largest_component", 0.0, 0.0, true, "500 random masks: idempotent, subset"};
  for (int i = 0; i < 500; ++i) {
    BinaryMask a = random_mask(), b = random_mask();
    std::size_t na = a.count(), nb = b.count(), both = 0;
    for (std::size_t k = 0; k < a.bits.size(); ++k) both += a.bits[k] & b.bits[k];
    double ref = na + nb == 0 ? 1.0 : 2.0 * double(both) / double(na + nb);
    dice.max_error = std::max(dice.max_error, std::abs(dice_coefficient(a, b) - ref));
    if (na > 0 && nb > 0) {
      double d = avg_symmetric_distance(a, b), ref_d = brute_asd(a, b);
      asd.max_error = std::max(asd.max_error, std::abs(d - ref_d));
    }
    BinaryMask l = largest_component(a);
    bool ok = largest_component(l) == l;
    for (std::size_t k = 0; k < a.bits.size(); ++k) ok = ok && (!l.bits[k] || a.bits[k]);
    if (!ok) lcc.max_error = 1.0;
  }
  dice.passed = dice.max_error == 0.0;
  asd.passed = asd.max_error == 0.0;
  lcc.passed = lcc.max_error == 0.0;

  CheckResult tt{"paired_t_test", 0.0, 1e-12, true, "d=[1..5]: t=4.242640687119285 p=0.013235599563682695"};
  std::vector<double> d{1, 2, 3, 4, 5}, z(5, 0.0);
  TTestResult r = paired_t_test(d, z);
  tt.max_error = std::max(std::abs(r.t - 4.242640687119285), std::abs(r.p - 0.013235599563682695));
  tt.passed = tt.max_error < tt.tolerance;
  return {dice, asd, lcc, tt};
}

}  // namespace msnet
