#pragma once

#include <span>

#include "msnet/graph.hpp"

namespace msnet {

// Differentiable primitives. Every op records itself on the graph that owns
// its inputs and returns the output node.

/// Cross-correlation. input [b,c_in,h,w], kernel [c_out,c_in,k,k], bias [c_out].
Var conv2d(Var input, Var kernel, Var bias, int stride, int padding);

/// Adjoint of conv2d with padding (k-1)/2, producing stride * input extent.
/// input [b,c_in,h,w], kernel [c_in,c_out,k,k], bias [c_out].
Var transposed_conv2d(Var input, Var kernel, Var bias, int stride);

/// Max pooling. Ties go to the first position in row-major window order.
Var maxpool2d(Var input, int window = 3, int stride = 2, int padding = 1);

Var relu(Var input);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var input, double factor);
/// Sum of all entries, as a 1-element tensor.
Var sum(Var input);
/// Sum of scalar nodes, accumulated in the given order.
Var add_scalars(std::span<const Var> terms);
/// Sum of squared entries over all inputs.
Var sum_squares(std::span<const Var> inputs);

/// Softmax over the channel axis of a [b,c,h,w] tensor, c >= 2.
Var softmax_channel(Var input);

/// Copy of the value with no path back to `input`.
Var detach(Var input);

/// Output extent of a convolution, or 0 when the geometry is invalid.
std::size_t conv_output_extent(std::size_t in, int kernel, int stride, int padding);

}  // namespace msnet
