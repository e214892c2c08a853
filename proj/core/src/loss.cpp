#include "msnet/loss.hpp"

#include <cstdint>
#include <string>

#include "msnet/errors.hpp"
#include "msnet/ops.hpp"

namespace msnet {

void LossWeights::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("alpha must lie in [0,1], got " + std::to_string(alpha));
  if (!(eta >= 0.0)) throw ContractError("eta must be non-negative, got " + std::to_string(eta));
}

Var dice_loss(Var probs, const Tensor& target) {
  const Tensor& m = probs.value();
  if (!m.same_shape(target)) {
    throw DimensionError("dice loss: probs " + shape_to_string(m.shape()) + " vs target " + shape_to_string(target.shape()));
  }
  if (m.empty()) throw ContractError("dice loss: empty batch");
  double inter = 0.0, union_sq = 0.0;
  for (std::size_t i = 0; i < m.numel(); ++i) {
    inter += m[i] * target[i];
    union_sq += m[i] * m[i] + target[i] * target[i];
  }
  if (!(union_sq > 0.0)) throw ContractError("dice loss: both maps are identically zero");
  const double loss = 1.0 - 2.0 * inter / union_sq;
  return probs.graph->record(Tensor::scalar(loss), {probs}, [target, inter, union_sq](BackwardContext& ctx) {
    // dL/dm_i = -2 (p_i U - 2 I m_i) / U^2
    const double g = ctx.grad_output().item();
    const Tensor& m = ctx.input(0);
    Tensor& dm = ctx.input_grad(0);
    const double u2 = union_sq * union_sq;
    for (std::size_t i = 0; i < m.numel(); ++i) dm[i] += g * -2.0 * (target[i] * union_sq - 2.0 * inter * m[i]) / u2;
  });
}

Var kt_loss(Var uni_probs, const Tensor& aux_onehot) { return dice_loss(uni_probs, aux_onehot); }

Tensor onehot_argmax(const Tensor& probs) {
  if (probs.rank() != 4) throw DimensionError("onehot_argmax: expected [b,c,h,w], got " + shape_to_string(probs.shape()));
  const std::size_t b = probs.dim(0), c = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  Tensor out(probs.shape());
  for (std::size_t n = 0; n < b; ++n) {
    const double* src = probs.data() + n * c * hw;
    double* dst = out.data() + n * c * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = 0;
      for (std::size_t ch = 1; ch < c; ++ch)
        if (src[ch * hw + p] > src[best * hw + p]) best = ch;
      dst[best * hw + p] = 1.0;
    }
  }
  return out;
}

Tensor onehot_from_labels(std::span<const std::uint8_t> labels, std::size_t batch, std::size_t height, std::size_t width) {
  const std::size_t hw = height * width;
  if (labels.size() != batch * hw) throw DimensionError("onehot_from_labels: label count does not match [b,h,w]");
  Tensor out(Shape{batch, 2, height, width});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::uint8_t l = labels[n * hw + p];
      if (l > 1) throw DataError("onehot_from_labels: label " + std::to_string(l) + " is not binary");
      out[(n * 2 + l) * hw + p] = 1.0;
    }
  return out;
}

Var l2_penalty(Graph& graph, std::span<Parameter* const> kernels) {
  if (kernels.empty()) return graph.constant(Tensor::scalar(0.0));
  std::vector<Var> vars;
  vars.reserve(kernels.size());
  for (Parameter* p : kernels) vars.push_back(graph.parameter(*p));
  return sum_squares(vars);
}

namespace {

Var add_l2(Graph& graph, std::vector<Var> terms, std::span<Parameter* const> kernels, double eta) {
  if (eta != 0.0) terms.push_back(scale(l2_penalty(graph, kernels), eta));
  return add_scalars(terms);
}

}  // namespace

Var aux_objective(Graph& graph, std::span<const Var> site_losses, int num_sites, std::span<Parameter* const> kernels,
                  const LossWeights& weights) {
  weights.validate();
  if (static_cast<int>(site_losses.size()) != num_sites) {
    throw ContractError("aux objective: expected " + std::to_string(num_sites) + " per-site terms, got " +
                        std::to_string(site_losses.size()));
  }
  return add_l2(graph, {site_losses.begin(), site_losses.end()}, kernels, weights.eta);
}

Var uni_objective(Graph& graph, std::span<const UniTerms> site_terms, int num_sites, std::span<Parameter* const> kernels,
                  const LossWeights& weights) {
  weights.validate();
  if (static_cast<int>(site_terms.size()) != num_sites) {
    throw ContractError("uni objective: expected " + std::to_string(num_sites) + " per-site terms, got " +
                        std::to_string(site_terms.size()));
  }
  std::vector<Var> terms;
  for (const UniTerms& t : site_terms) {
    if (t.kt.graph != nullptr) terms.push_back(scale(t.kt, weights.alpha));
    terms.push_back(scale(t.supervised, 1.0 - weights.alpha));
  }
  return add_l2(graph, std::move(terms), kernels, weights.eta);
}

Var supervised_objective(Graph& graph, std::span<const Var> site_losses, std::span<Parameter* const> kernels,
                         const LossWeights& weights) {
  if (site_losses.empty()) throw ContractError("supervised objective: no site terms");
  return add_l2(graph, {site_losses.begin(), site_losses.end()}, kernels, weights.eta);
}

}  // namespace msnet
