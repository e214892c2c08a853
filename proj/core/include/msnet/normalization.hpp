#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msnet/graph.hpp"
#include "msnet/site.hpp"

namespace msnet {

enum class NormMode {
  kTrain,       // batch statistics, running statistics updated
  kEval,        // running statistics, state untouched
  kBatchStats,  // batch statistics, state untouched (target generation)
};

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnMomentum = 0.99;

/// Affine parameters and running statistics of one batch-normalization layer.
struct BnState {
  std::string name;
  Parameter gamma;
  Parameter beta;
  Tensor running_mean;
  Tensor running_var;
  double epsilon = kBnEpsilon;
  double momentum = kBnMomentum;
  std::uint64_t updates = 0;

  static BnState create(std::size_t channels, const std::string& name);
  std::size_t channels() const { return running_mean.numel(); }
};

/// One BnState per site; every entry shares channel count and epsilon.
struct DsbnState {
  std::vector<BnState> per_site;

  static DsbnState create(std::size_t channels, int num_sites, const std::string& name);
  int num_sites() const { return static_cast<int>(per_site.size()); }
  std::size_t channels() const { return per_site.front().channels(); }
  BnState& site(SiteId site);
  const BnState& site(SiteId site) const;
};

/// Per-channel batch mean and biased variance, filled by batch_norm when requested.
struct BatchMoments {
  Tensor mean;
  Tensor var;
};

/// Training-mode normalization over the (b,h,w) axes with explicit affine inputs.
Var batch_norm(Var input, Var gamma, Var beta, double epsilon, BatchMoments* moments = nullptr);

/// Normalization with fixed statistics; differentiable in input, gamma and beta.
Var batch_norm_inference(Var input, Var gamma, Var beta, const Tensor& mean, const Tensor& var, double epsilon);

Var bn_forward_train(Graph& graph, Var input, BnState& state);
Var bn_forward_eval(Graph& graph, Var input, BnState& state);
Var bn_forward(Graph& graph, Var input, BnState& state, NormMode mode);

/// Routes to the site's BnState; other sites are never read or written.
Var dsbn_forward(Graph& graph, Var input, SiteId site, DsbnState& state, NormMode mode);

}  // namespace msnet
