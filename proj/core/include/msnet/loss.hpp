#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "msnet/graph.hpp"

namespace msnet {

/// Knowledge-transfer rate and L2 coefficient.
struct LossWeights {
  double alpha = 0.5;
  double eta = 1e-4;

  void validate() const;
};

/// 1 - 2*sum(m*p) / (sum(m^2) + sum(p^2)), summed jointly over every
/// pixel and channel of the batch. `target` is a constant one-hot map.
Var dice_loss(Var probs, const Tensor& target);

/// Knowledge-transfer loss against auxiliary one-hot predictions. Same form
/// as dice_loss; the target never carries a gradient.
Var kt_loss(Var uni_probs, const Tensor& aux_onehot);

/// Per-pixel argmax over channels as a one-hot map; ties go to the lowest channel.
Tensor onehot_argmax(const Tensor& probs);

/// Two-channel (background, foreground) one-hot encoding of binary masks laid out [b,h,w].
Tensor onehot_from_labels(std::span<const std::uint8_t> labels, std::size_t batch, std::size_t height, std::size_t width);

/// Sum of squared kernel entries.
Var l2_penalty(Graph& graph, std::span<Parameter* const> kernels);

/// L_aux = sum_s L_aux^s + eta * ||kernels||^2 over theta_e and all theta_aux.
Var aux_objective(Graph& graph, std::span<const Var> site_losses, int num_sites, std::span<Parameter* const> kernels,
                  const LossWeights& weights);

struct UniTerms {
  Var kt;  // unbound (graph == nullptr) drops the transfer term entirely

  Var supervised;
};

/// L_uni = sum_s (alpha L_kt^s + (1-alpha) L_uni^s) + eta * ||kernels||^2 over theta_e and theta_d.
Var uni_objective(Graph& graph, std::span<const UniTerms> site_terms, int num_sites, std::span<Parameter* const> kernels,
                  const LossWeights& weights);

/// Sum of per-site supervised losses plus the L2 term (Joint / DSBN / Separate objective).
Var supervised_objective(Graph& graph, std::span<const Var> site_losses, std::span<Parameter* const> kernels,
                         const LossWeights& weights);

}  // namespace msnet
