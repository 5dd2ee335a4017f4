#pragma once

// Training objective: class-weighted NLL, soft-morphology boundary loss and
// the helpers used by the role-swapped alignment term. The alignment forward
// itself lives with the model in episodes.hpp.

#include <array>
#include <cstdint>
#include <vector>

#include "sgp/autograd.hpp"
#include "sgp/tensor.hpp"

namespace sgp::loss {

using ag::Var;

inline constexpr std::uint8_t kIgnore = 255;
inline constexpr double kLogClamp = 1e-12;
inline constexpr double kMaxFgWeight = 20.0;
inline constexpr double kUniformMask = 0.5;

/// Integer labels [B, H, W] in {0, 1, kIgnore}.
struct LabelMap {
  Shape shape;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(Shape s, std::vector<std::uint8_t> v) : shape(std::move(s)), labels(std::move(v)) { validate(); }

  void validate() const {
    if (shape.size() != 3) throw ShapeError("LabelMap: expected [B, H, W]");
    if (labels.size() != numel(shape)) throw ShapeError("LabelMap: payload does not match shape");
    for (auto v : labels)
      if (v != 0 && v != 1 && v != kIgnore) throw Error("LabelMap: label values must be 0, 1 or 255");
  }

  /// Labels from a binary mask; values >= 0.5 become foreground.
  static LabelMap from_mask(const Tensor& m) {
    require_rank(m, 3, "LabelMap::from_mask");
    std::vector<std::uint8_t> v(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) v[i] = m[i] >= 0.5 ? 1 : 0;
    return {m.shape(), std::move(v)};
  }

  /// Foreground indicator as reals; IGNORE maps to 0.
  Tensor foreground() const {
    Tensor t(shape);
    for (std::size_t i = 0; i < labels.size(); ++i) t[i] = labels[i] == 1 ? 1.0 : 0.0;
    return t;
  }
};

/// Background weight 1, foreground weight |bg| / |fg| clamped to [.., 20].
/// An episode without foreground pixels keeps weight 1.
inline std::array<double, 2> class_weights(const LabelMap& y) {
  std::size_t bg = 0, fg = 0;
  for (auto v : y.labels) {
    if (v == 0) ++bg;
    if (v == 1) ++fg;
  }
  if (fg == 0) return {1.0, 1.0};
  return {1.0, std::min(kMaxFgWeight, static_cast<double>(bg) / static_cast<double>(fg))};
}

namespace detail {

inline void check_prediction(const Tensor& pred, const LabelMap& y) {
  require_rank(pred, 4, "nll_weighted");
  if (pred.dim(1) != 2) throw ShapeError("nll_weighted: prediction needs [bg, fg] channels");
  if (Shape{pred.dim(0), pred.dim(2), pred.dim(3)} != y.shape)
    throw ShapeError("nll_weighted: prediction " + to_string(pred.shape()) + " does not match labels " +
                     to_string(y.shape));
}

// Window extremum with clamped (replicate) borders. Records the source index
// of every output so the backward pass can route gradients.
inline Tensor pool_extreme(const Tensor& m, int theta, bool take_max, std::vector<std::size_t>* arg) {
  const std::size_t H = m.dim(m.rank() - 2), W = m.dim(m.rank() - 1), planes = m.size() / (H * W);
  Tensor out(m.shape());
  if (arg) arg->assign(m.size(), 0);
  const long h = static_cast<long>(H), w = static_cast<long>(W);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* src = m.data().data() + pl * H * W;
    for (long i = 0; i < h; ++i)
      for (long j = 0; j < w; ++j) {
        std::size_t best = static_cast<std::size_t>(i * w + j);
        for (long di = -theta; di <= theta; ++di) {
          const long y = std::clamp(i + di, 0L, h - 1);
          for (long dj = -theta; dj <= theta; ++dj) {
            const auto q = static_cast<std::size_t>(y * w + std::clamp(j + dj, 0L, w - 1));
            if (take_max ? src[q] > src[best] : src[q] < src[best]) best = q;
          }
        }
        const std::size_t o = pl * H * W + static_cast<std::size_t>(i * w + j);
        out[o] = src[best];
        if (arg) (*arg)[o] = pl * H * W + best;
      }
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Plain versions.

/// Mean over non-ignored pixels of −w[y] log p[y], log clamped at 1e-12.
inline double nll_weighted(const Tensor& pred, const LabelMap& y, std::array<double, 2> w) {
  detail::check_prediction(pred, y);
  const std::size_t B = pred.dim(0), hw = pred.dim(2) * pred.dim(3);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      const auto lab = y.labels[b * hw + p];
      if (lab == kIgnore) continue;
      total -= w[lab] * std::log(std::max(kLogClamp, pred[(b * 2 + lab) * hw + p]));
      ++count;
    }
  return count ? total / static_cast<double>(count) : 0.0;
}

/// Dilation minus erosion over a (2θ+1)² window with replicate padding.
inline Tensor soft_boundary(const Tensor& mask, int theta) {
  if (theta < 1) throw Error("soft_boundary: theta must be at least 1");
  if (mask.rank() < 2) throw ShapeError("soft_boundary: expected a spatial map");
  return detail::pool_extreme(mask, theta, true, nullptr) - detail::pool_extreme(mask, theta, false, nullptr);
}

inline double boundary_loss(const Tensor& pred_fg, const Tensor& y_fg, int theta0 = 3, int theta = 5) {
  if (pred_fg.shape() != y_fg.shape()) throw ShapeError("boundary_loss: shape mismatch");
  const Tensor d = soft_boundary(pred_fg, theta0) - soft_boundary(y_fg, theta);
  double s = 0.0;
  for (double v : d.vec()) s += v * v;
  return s / static_cast<double>(d.size());
}

inline double total_loss(double prim, double b, double align) {
  if (!std::isfinite(prim) || !std::isfinite(b) || !std::isfinite(align))
    throw Error("total_loss: loss terms must be finite");
  return prim + b + align;
}

/// Foreground channel of a prediction [B, 2, H, W] -> [B, H, W].
inline Tensor foreground(const Tensor& pred) {
  require_rank(pred, 4, "foreground");
  const std::size_t B = pred.dim(0), hw = pred.dim(2) * pred.dim(3);
  Tensor fg(Shape{B, pred.dim(2), pred.dim(3)});
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(pred.data().begin() + static_cast<std::ptrdiff_t>((b * 2 + 1) * hw), hw,
                fg.data().begin() + static_cast<std::ptrdiff_t>(b * hw));
  return fg;
}

/// Hard pseudo-mask from a prediction: fg > 0.5. A sample without positive
/// pixels gets the uniform 0.5 mask instead.
inline Tensor pseudo_mask(const Tensor& pred) {
  Tensor m = foreground(pred);
  const std::size_t B = m.dim(0), hw = m.size() / B;
  for (std::size_t b = 0; b < B; ++b) {
    bool any = false;
    for (std::size_t p = 0; p < hw; ++p) {
      double& v = m[b * hw + p];
      v = v > 0.5 ? 1.0 : 0.0;
      any = any || v > 0;
    }
    if (!any) std::fill_n(m.data().begin() + static_cast<std::ptrdiff_t>(b * hw), hw, kUniformMask);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Differentiable versions.

inline Var nll_weighted(Var pred, const LabelMap& y, std::array<double, 2> w) {
  const double value = nll_weighted(pred.value(), y, w);
  return pred.tape->record(Tensor::scalar(value), {pred}, [pred, y, w](ag::Tape& t, const Tensor& g) {
    const Tensor& p = pred.value();
    const std::size_t B = p.dim(0), hw = p.dim(2) * p.dim(3);
    std::size_t count = 0;
    for (auto v : y.labels) count += v != kIgnore;
    if (count == 0) return;
    Tensor gp(p.shape());
    const double scale = g.item() / static_cast<double>(count);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const auto lab = y.labels[b * hw + i];
        if (lab == kIgnore) continue;
        const std::size_t o = (b * 2 + lab) * hw + i;
        if (p[o] > kLogClamp) gp[o] = -scale * w[lab] / p[o];
      }
    t.accumulate(pred, gp);
  });
}

/// Gradients follow the selected window extremum (first one on ties).
inline Var soft_boundary(Var mask, int theta) {
  if (theta < 1) throw Error("soft_boundary: theta must be at least 1");
  std::vector<std::size_t> amax, amin;
  Tensor hi = detail::pool_extreme(mask.value(), theta, true, &amax);
  Tensor lo = detail::pool_extreme(mask.value(), theta, false, &amin);
  return mask.tape->record(hi - lo, {mask}, [mask, amax, amin](ag::Tape& t, const Tensor& g) {
    Tensor gm(mask.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      gm[amax[i]] += g[i];
      gm[amin[i]] -= g[i];
    }
    t.accumulate(mask, gm);
  });
}

inline Var boundary_loss(Var pred_fg, const Tensor& y_fg, int theta0 = 3, int theta = 5) {
  if (pred_fg.shape() != y_fg.shape()) throw ShapeError("boundary_loss: shape mismatch");
  Var target = pred_fg.tape->constant(soft_boundary(y_fg, theta));
  return ag::mean(ag::square(ag::sub(soft_boundary(pred_fg, theta0), target)));
}

/// Foreground channel of a [B, 2, H, W] prediction as [B, H, W].
inline Var foreground(Var pred) {
  const Shape s = pred.shape();
  return ag::reshape(ag::slice_channels(pred, 1, 2), Shape{s[0], s[2], s[3]});
}

inline Var total_loss(Var prim, Var b, Var align) { return ag::add_scalars({prim, b, align}); }

}  // namespace sgp::loss
