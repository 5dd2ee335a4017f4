#pragma once

// Differentiable wrappers for the dense layers used by the toy encoder,
// decoders and the blend convolution.

#include <limits>

#include "sgp/autograd.hpp"
#include "sgp/ops.hpp"

namespace sgp::ag {

inline Var conv2d(Var x, Var W, Var b, std::size_t stride, std::size_t pad) {
  return x.tape->record(sgp::conv2d(x.value(), W.value(), b.value(), stride, pad), {x, W, b},
                        [x, W, b, stride, pad](Tape& t, const Tensor& g) {
                          auto gr = sgp::conv2d_backward(x.value(), W.value(), g, stride, pad);
                          t.accumulate(x, gr.dx);
                          t.accumulate(W, gr.dW);
                          t.accumulate(b, gr.db);
                        });
}

inline Var conv1x1(Var x, Var W, Var b) {
  return x.tape->record(sgp::conv1x1(x.value(), W.value(), b.value()), {x, W, b},
                        [x, W, b](Tape& t, const Tensor& g) {
                          auto gr = sgp::conv1x1_backward(x.value(), W.value(), g);
                          t.accumulate(x, gr.dx);
                          t.accumulate(W, gr.dW);
                          t.accumulate(b, gr.db);
                        });
}

inline Var resize_bilinear(Var x, std::size_t h, std::size_t w) {
  const std::size_t H = x.shape()[x.shape().size() - 2], W = x.shape().back();
  return x.tape->record(sgp::resize_bilinear(x.value(), h, w), {x}, [x, H, W](Tape& t, const Tensor& g) {
    t.accumulate(x, sgp::resize_bilinear_adjoint(g, H, W));
  });
}

/// Softmax across the channel axis of a [B, C, H, W] tensor.
inline Var softmax_channels(Var x) {
  const Tensor& v = x.value();
  require_rank(v, 4, "softmax_channels");
  const std::size_t B = v.dim(0), C = v.dim(1), hw = v.dim(2) * v.dim(3);
  Tensor y(v.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, v[(b * C + c) * hw + p]);
      double total = 0.0;
      for (std::size_t c = 0; c < C; ++c) total += (y[(b * C + c) * hw + p] = std::exp(v[(b * C + c) * hw + p] - mx));
      for (std::size_t c = 0; c < C; ++c) y[(b * C + c) * hw + p] /= total;
    }
  Tensor saved = y;
  return x.tape->record(std::move(y), {x}, [x, saved, B, C, hw](Tape& t, const Tensor& g) {
    Tensor gx(saved.shape());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t p = 0; p < hw; ++p) {
        double dot = 0.0;
        for (std::size_t c = 0; c < C; ++c) dot += g[(b * C + c) * hw + p] * saved[(b * C + c) * hw + p];
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t i = (b * C + c) * hw + p;
          gx[i] = saved[i] * (g[i] - dot);
        }
      }
    t.accumulate(x, gx);
  });
}

}  // namespace sgp::ag
