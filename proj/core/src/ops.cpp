#include "msnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "msnet/errors.hpp"

namespace msnet {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t kernel, stride, padding;
  std::size_t out_h, out_w;

  std::size_t col_rows() const { return channels * kernel * kernel; }
  std::size_t col_cols() const { return batch * out_h * out_w; }
  bool is_pointwise() const { return kernel == 1 && stride == 1 && padding == 0; }
};

// col[(c,ky,kx), (n,oy,ox)] = x[n,c,oy*s-p+ky,ox*s-p+kx] (zero outside the image).
void im2col(const double* x, const ConvGeometry& g, double* col) {
  const std::size_t cols = g.col_cols();
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* dst = col + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        for (std::size_t n = 0; n < g.batch; ++n) {
          const double* src = x + (n * g.channels + c) * g.height * g.width;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            double* row = dst + (n * g.out_h + oy) * g.out_w;
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
              std::fill(row, row + g.out_w, 0.0);
              continue;
            }
            const double* src_row = src + iy * g.width;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
              row[ox] = (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) ? src_row[ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back into x.
void col2im(const double* col, const ConvGeometry& g, double* x) {
  const std::size_t cols = g.col_cols();
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* src = col + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        for (std::size_t n = 0; n < g.batch; ++n) {
          double* dst = x + (n * g.channels + c) * g.height * g.width;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            const double* row = src + (n * g.out_h + oy) * g.out_w;
            double* dst_row = dst + iy * g.width;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) dst_row[ix] += row[ox];
            }
          }
        }
      }
    }
  }
}

// [b,c,hw] -> [c, b*hw]
RowMat to_channel_major(const Tensor& t) {
  const std::size_t b = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
  RowMat out(c, b * hw);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(t.data() + (n * c + ch) * hw, hw, out.data() + ch * b * hw + n * hw);
  return out;
}

// [c, b*hw] -> [b,c,hw], optionally accumulating.
void from_channel_major(const RowMat& m, Tensor& t, bool accumulate) {
  const std::size_t b = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* src = m.data() + ch * b * hw + n * hw;
      double* dst = t.data() + (n * c + ch) * hw;
      if (accumulate) {
        for (std::size_t i = 0; i < hw; ++i) dst[i] += src[i];
      } else {
        std::copy_n(src, hw, dst);
      }
    }
  }
}

RowMat im2col_matrix(const Tensor& x, const ConvGeometry& g) {
  if (g.is_pointwise()) return to_channel_major(x);
  RowMat col(g.col_rows(), g.col_cols());
  im2col(x.data(), g, col.data());
  return col;
}

void col2im_accumulate(const RowMat& col, const ConvGeometry& g, Tensor& x) {
  if (g.is_pointwise()) {
    from_channel_major(col, x, true);
    return;
  }
  col2im(col.data(), g, x.data());
}

void require_rank4(const Tensor& t, const char* op, const char* what) {
  if (t.rank() != 4) {
    throw DimensionError(std::string(op) + ": " + what + " must be rank 4 (b,c,h,w), got " +
                         shape_to_string(t.shape()));
  }
}

void add_bias_channel_sums(const Tensor& grad_out, Tensor& bias_grad) {
  const std::size_t b = grad_out.dim(0), c = grad_out.dim(1), hw = grad_out.dim(2) * grad_out.dim(3);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* g = grad_out.data() + (n * c + ch) * hw;
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += g[i];
      bias_grad[ch] += s;
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, int kernel, int stride, int padding) {
  if (kernel <= 0 || stride <= 0 || padding < 0) return 0;
  const auto span = static_cast<std::ptrdiff_t>(in) + 2 * padding - kernel;
  if (span < 0) return 0;
  return static_cast<std::size_t>(span / stride + 1);
}

Var conv2d(Var input, Var kernel, Var bias, int stride, int padding) {
  const Tensor& x = input.value();
  const Tensor& w = kernel.value();
  const Tensor& bv = bias.value();
  require_rank4(x, "conv2d", "input");
  require_rank4(w, "conv2d", "kernel");
  if (w.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d: kernel axis 1 (c_in=" + std::to_string(w.dim(1)) +
                         ") does not match input axis 1 (channels=" + std::to_string(x.dim(1)) + ")");
  }
  if (w.dim(2) != w.dim(3)) throw DimensionError("conv2d: kernel axes 2 and 3 must be equal (square kernel)");
  if (bv.numel() != w.dim(0)) {
    throw DimensionError("conv2d: bias length " + std::to_string(bv.numel()) + " does not match kernel axis 0 (c_out=" +
                         std::to_string(w.dim(0)) + ")");
  }
  if (stride < 1 || padding < 0) throw ContractError("conv2d: stride must be >= 1 and padding >= 0");
  const int k = static_cast<int>(w.dim(2));
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(2), static_cast<std::size_t>(stride),
                 static_cast<std::size_t>(padding), conv_output_extent(x.dim(2), k, stride, padding),
                 conv_output_extent(x.dim(3), k, stride, padding)};
  if (g.out_h == 0 || g.out_w == 0) {
    throw DimensionError("conv2d: kernel " + std::to_string(k) + " does not fit input axes 2,3 " +
                         shape_to_string(x.shape()) + " with padding " + std::to_string(padding));
  }
  const std::size_t c_out = w.dim(0);

  RowMat col = im2col_matrix(x, g);
  ConstMatMap wm(w.data(), c_out, g.col_rows());
  RowMat out_cm(c_out, g.col_cols());
  out_cm.noalias() = wm * col;
  for (std::size_t co = 0; co < c_out; ++co) out_cm.row(co).array() += bv[co];
  Tensor out(Shape{g.batch, c_out, g.out_h, g.out_w});
  from_channel_major(out_cm, out, false);

  return input.graph->record(std::move(out), {input, kernel, bias}, [g, c_out](BackwardContext& ctx) {
    const RowMat dout = to_channel_major(ctx.grad_output());
    const Tensor& w = ctx.input(1);
    if (ctx.wants(2)) add_bias_channel_sums(ctx.grad_output(), ctx.input_grad(2));
    if (ctx.wants(1)) {
      const RowMat col = im2col_matrix(ctx.input(0), g);
      MatMap dw(ctx.input_grad(1).data(), c_out, g.col_rows());
      dw.noalias() += dout * col.transpose();
    }
    if (ctx.wants(0)) {
      ConstMatMap wm(w.data(), c_out, g.col_rows());
      RowMat dcol(g.col_rows(), g.col_cols());
      dcol.noalias() = wm.transpose() * dout;
      col2im_accumulate(dcol, g, ctx.input_grad(0));
    }
  });
}

Var transposed_conv2d(Var input, Var kernel, Var bias, int stride) {
  const Tensor& y = input.value();
  const Tensor& w = kernel.value();
  const Tensor& bv = bias.value();
  require_rank4(y, "transposed_conv2d", "input");
  require_rank4(w, "transposed_conv2d", "kernel");
  if (w.dim(0) != y.dim(1)) {
    throw DimensionError("transposed_conv2d: kernel axis 0 (c_in=" + std::to_string(w.dim(0)) +
                         ") does not match input axis 1 (channels=" + std::to_string(y.dim(1)) + ")");
  }
  if (w.dim(2) != w.dim(3)) throw DimensionError("transposed_conv2d: kernel axes 2 and 3 must be equal");
  if (bv.numel() != w.dim(1)) {
    throw DimensionError("transposed_conv2d: bias length " + std::to_string(bv.numel()) +
                         " does not match kernel axis 1 (c_out=" + std::to_string(w.dim(1)) + ")");
  }
  if (stride < 1) throw ContractError("transposed_conv2d: stride must be >= 1");
  const int k = static_cast<int>(w.dim(2));
  const int padding = (k - 1) / 2;
  const std::size_t c_in = w.dim(0), c_out = w.dim(1);
  // Geometry of the forward convolution this operation is the adjoint of.
  ConvGeometry g{y.dim(0), c_out, y.dim(2) * stride, y.dim(3) * stride, w.dim(2), static_cast<std::size_t>(stride),
                 static_cast<std::size_t>(padding), y.dim(2), y.dim(3)};
  if (conv_output_extent(g.height, k, stride, padding) != y.dim(2) ||
      conv_output_extent(g.width, k, stride, padding) != y.dim(3)) {
    throw DimensionError("transposed_conv2d: kernel " + std::to_string(k) + " with stride " + std::to_string(stride) +
                         " cannot produce axes 2,3 of size stride*input");
  }

  const RowMat y_cm = to_channel_major(y);
  ConstMatMap wm(w.data(), c_in, g.col_rows());
  RowMat cols(g.col_rows(), g.col_cols());
  cols.noalias() = wm.transpose() * y_cm;
  Tensor out(Shape{g.batch, c_out, g.height, g.width});
  col2im_accumulate(cols, g, out);
  const std::size_t hw = g.height * g.width;
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t co = 0; co < c_out; ++co) {
      double* dst = out.data() + (n * c_out + co) * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] += bv[co];
    }

  return input.graph->record(std::move(out), {input, kernel, bias}, [g, c_in](BackwardContext& ctx) {
    if (ctx.wants(2)) add_bias_channel_sums(ctx.grad_output(), ctx.input_grad(2));
    if (!ctx.wants(0) && !ctx.wants(1)) return;
    const RowMat dcols = im2col_matrix(ctx.grad_output(), g);
    if (ctx.wants(1)) {
      const RowMat y_cm = to_channel_major(ctx.input(0));
      MatMap dw(ctx.input_grad(1).data(), c_in, g.col_rows());
      dw.noalias() += y_cm * dcols.transpose();
    }
    if (ctx.wants(0)) {
      ConstMatMap wm(ctx.input(1).data(), c_in, g.col_rows());
      RowMat dy(c_in, g.col_cols());
      dy.noalias() = wm * dcols;
      from_channel_major(dy, ctx.input_grad(0), true);
    }
  });
}

Var maxpool2d(Var input, int window, int stride, int padding) {
  const Tensor& x = input.value();
  require_rank4(x, "maxpool2d", "input");
  if (window < 1 || stride < 1 || padding < 0 || padding >= window) {
    throw ContractError("maxpool2d: need window >= 1, stride >= 1, 0 <= padding < window");
  }
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = conv_output_extent(h, window, stride, padding);
  const std::size_t ow = conv_output_extent(w, window, stride, padding);
  if (oh == 0 || ow == 0) {
    throw DimensionError("maxpool2d: spatial axes 2,3 " + shape_to_string(x.shape()) + " smaller than window " +
                         std::to_string(window) + " minus twice the padding");
  }
  Tensor out(Shape{b, c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < b * c; ++plane) {
    const double* src = x.data() + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = std::numeric_limits<std::size_t>::max();
        for (int ky = 0; ky < window; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride) + ky - padding;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (int kx = 0; kx < window; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride) + kx - padding;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t idx = static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
            // Strict comparison keeps the first maximum in row-major scan order.
            if (best_idx == std::numeric_limits<std::size_t>::max() || src[idx] > best) {
              best = src[idx];
              best_idx = idx;
            }
          }
        }
        out[o] = best;
        (*argmax)[o] = plane * h * w + best_idx;
      }
    }
  }
  return input.graph->record(std::move(out), {input}, [argmax](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor& dx = ctx.input_grad(0);
    for (std::size_t i = 0; i < g.numel(); ++i) dx[(*argmax)[i]] += g[i];
  });
}

Var relu(Var input) {
  Tensor out = input.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return input.graph->record(std::move(out), {input}, [](BackwardContext& ctx) {
    const Tensor& x = ctx.input(0);
    const Tensor& g = ctx.grad_output();
    Tensor& dx = ctx.input_grad(0);
    for (std::size_t i = 0; i < x.numel(); ++i)
      if (x[i] > 0.0) dx[i] += g[i];
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return a.graph->record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.wants(k)) continue;
      Tensor& d = ctx.input_grad(k);
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return a.graph->record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.wants(k)) continue;
      const Tensor& other = ctx.input(1 - k);
      Tensor& d = ctx.input_grad(k);
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * other[i];
    }
  });
}

Var scale(Var input, double factor) {
  Tensor out = input.value();
  for (double& v : out.values()) v *= factor;
  return input.graph->record(std::move(out), {input}, [factor](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor& d = ctx.input_grad(0);
    for (std::size_t i = 0; i < g.numel(); ++i) d[i] += factor * g[i];
  });
}

Var sum(Var input) {
  double s = 0.0;
  for (double v : input.value().values()) s += v;
  return input.graph->record(Tensor::scalar(s), {input}, [](BackwardContext& ctx) {
    const double g = ctx.grad_output().item();
    for (double& d : ctx.input_grad(0).values()) d += g;
  });
}

Var add_scalars(std::span<const Var> terms) {
  if (terms.empty()) throw ContractError("add_scalars: no terms");
  double s = 0.0;
  for (const Var& t : terms) {
    if (t.value().numel() != 1) throw DimensionError("add_scalars: term is not scalar " + shape_to_string(t.shape()));
    s += t.value().item();
  }
  return terms.front().graph->record(Tensor::scalar(s), {terms.begin(), terms.end()}, [n = terms.size()](BackwardContext& ctx) {
    const double g = ctx.grad_output().item();
    for (std::size_t k = 0; k < n; ++k)
      if (ctx.wants(k)) ctx.input_grad(k)[0] += g;
  });
}

Var sum_squares(std::span<const Var> inputs) {
  if (inputs.empty()) throw ContractError("sum_squares: no inputs");
  double s = 0.0;
  for (const Var& v : inputs)
    for (double x : v.value().values()) s += x * x;
  return inputs.front().graph->record(Tensor::scalar(s), {inputs.begin(), inputs.end()}, [n = inputs.size()](BackwardContext& ctx) {
    const double g = ctx.grad_output().item();
    for (std::size_t k = 0; k < n; ++k) {
      if (!ctx.wants(k)) continue;
      const Tensor& x = ctx.input(k);
      Tensor& d = ctx.input_grad(k);
      for (std::size_t i = 0; i < x.numel(); ++i) d[i] += 2.0 * x[i] * g;
    }
  });
}

Var softmax_channel(Var input) {
  const Tensor& x = input.value();
  require_rank4(x, "softmax_channel", "input");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (c < 2) throw DimensionError("softmax_channel: axis 1 needs at least 2 channels");
  Tensor out(x.shape());
  for (std::size_t n = 0; n < b; ++n) {
    const double* src = x.data() + n * c * hw;
    double* dst = out.data() + n * c * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      double mx = src[p];
      for (std::size_t ch = 1; ch < c; ++ch) mx = std::max(mx, src[ch * hw + p]);
      double z = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double e = std::exp(src[ch * hw + p] - mx);
        dst[ch * hw + p] = e;
        z += e;
      }
      for (std::size_t ch = 0; ch < c; ++ch) dst[ch * hw + p] /= z;
    }
  }
  return input.graph->record(std::move(out), {input}, [b, c, hw](BackwardContext& ctx) {
    const Tensor& y = ctx.output();
    const Tensor& g = ctx.grad_output();
    Tensor& dx = ctx.input_grad(0);
    for (std::size_t n = 0; n < b; ++n) {
      const std::size_t base = n * c * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        double dot = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) dot += g[base + ch * hw + p] * y[base + ch * hw + p];
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t i = base + ch * hw + p;
          dx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Var detach(Var input) { return input.graph->constant(input.value()); }

}  // namespace msnet
