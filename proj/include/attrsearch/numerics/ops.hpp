#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "attrsearch/numerics/tape.hpp"
#include "attrsearch/roi_box.hpp"

namespace attrsearch::ops {

enum class Padding { same, valid };

namespace detail {

template <typename T>
void same_tape(Var<T> a, Var<T> b, const char* what) {
  if (a.tape != b.tape) throw UsageError(std::string(what) + ": operands on different tapes");
}

template <typename T>
void accumulate(Tensor<T>& dst, std::span<const T> src) {
  T* d = dst.raw();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += src[i];
}

template <typename T>
void accumulate(Tensor<T>& dst, std::span<T> src) {
  accumulate(dst, std::span<const T>(src));
}

}  // namespace detail

/// Spatial geometry of a convolution along one axis.
struct ConvAxis {
  std::size_t out = 0;
  std::ptrdiff_t pad_before = 0;
};

inline ConvAxis conv_axis(std::size_t in, std::size_t kernel, std::size_t stride, Padding pad) {
  if (stride == 0) throw ArgumentError("conv2d: stride must be positive");
  if (pad == Padding::valid) {
    if (kernel > in) throw DimensionError("conv2d: kernel larger than input");
    return {(in - kernel) / stride + 1, 0};
  }
  // TensorFlow-style SAME: output ceil(in/stride), extra padding goes after.
  const std::size_t out = (in + stride - 1) / stride;
  const std::ptrdiff_t needed =
      static_cast<std::ptrdiff_t>((out - 1) * stride + kernel) - static_cast<std::ptrdiff_t>(in);
  const std::ptrdiff_t total = std::max<std::ptrdiff_t>(needed, 0);
  if (kernel > in + static_cast<std::size_t>(total)) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  return {out, total / 2};
}

/// Cross-correlation of an HxWxCin map with kxkxCinxCout kernels.
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernels, std::size_t stride, Padding padding) {
  detail::same_tape(input, kernels, "conv2d");
  const Tensor<T>& x = input.value();
  const Tensor<T>& w = kernels.value();
  require_rank(x, 3, "conv2d input");
  require_rank(w, 4, "conv2d kernels");
  if (w.dim(0) != w.dim(1)) throw DimensionError("conv2d: kernels must be square");
  if (w.dim(2) != x.dim(2)) {
    throw DimensionError("conv2d: input has " + std::to_string(x.dim(2)) +
                         " channels, kernels expect " + std::to_string(w.dim(2)));
  }
  const std::size_t H = x.dim(0), W = x.dim(1), Ci = x.dim(2), k = w.dim(0), Co = w.dim(3);
  const ConvAxis ay = conv_axis(H, k, stride, padding);
  const ConvAxis ax = conv_axis(W, k, stride, padding);
  const std::size_t OH = ay.out, OW = ax.out;

  // Visits every (output cell, kernel tap) pair that lands inside the input.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - ay.pad_before;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - ax.pad_before;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            fn(oy * OW + ox, static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix),
               ky * k + kx);
          }
        }
      }
    }
  };

  Tensor<T> out({OH, OW, Co});
  {
    const T* xp = x.raw();
    const T* wp = w.raw();
    T* op = out.raw();
    for_each_tap([&](std::size_t o, std::size_t i, std::size_t tap) {
      T* orow = op + o * Co;
      const T* irow = xp + i * Ci;
      const T* wtap = wp + tap * Ci * Co;
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const T v = irow[ci];
        if (v == T{0}) continue;
        const T* wr = wtap + ci * Co;
        for (std::size_t co = 0; co < Co; ++co) orow[co] += v * wr[co];
      }
    });
  }

  return input.tape->record(
      std::move(out), {input.id, kernels.id},
      [=, in_id = input.id, k_id = kernels.id](Tape<T>& tape, std::size_t self) {
        const Tensor<T>& g = tape.grad(self);
        const T* gp = g.raw();
        if (tape.requires_grad(in_id)) {
          // Transposed taps [tap][co][ci] so the inner loop is contiguous.
          const Tensor<T>& wv = tape.value(k_id);
          std::vector<T> wt(wv.size());
          for (std::size_t tap = 0; tap < k * k; ++tap)
            for (std::size_t ci = 0; ci < Ci; ++ci)
              for (std::size_t co = 0; co < Co; ++co)
                wt[(tap * Co + co) * Ci + ci] = wv[(tap * Ci + ci) * Co + co];
          T* gi = tape.grad(in_id).raw();
          for_each_tap([&](std::size_t o, std::size_t i, std::size_t tap) {
            const T* grow = gp + o * Co;
            T* girow = gi + i * Ci;
            const T* wtap = wt.data() + tap * Co * Ci;
            for (std::size_t co = 0; co < Co; ++co) {
              const T gv = grow[co];
              if (gv == T{0}) continue;
              const T* wr = wtap + co * Ci;
              for (std::size_t ci = 0; ci < Ci; ++ci) girow[ci] += gv * wr[ci];
            }
          });
        }
        if (tape.requires_grad(k_id)) {
          const T* xp = tape.value(in_id).raw();
          T* gw = tape.grad(k_id).raw();
          for_each_tap([&](std::size_t o, std::size_t i, std::size_t tap) {
            const T* grow = gp + o * Co;
            const T* irow = xp + i * Ci;
            T* gtap = gw + tap * Ci * Co;
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const T v = irow[ci];
              if (v == T{0}) continue;
              T* gr = gtap + ci * Co;
              for (std::size_t co = 0; co < Co; ++co) gr[co] += v * grow[co];
            }
          });
        }
      });
}

/// Adds a bias vector along the last axis.
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  detail::same_tape(x, bias, "add_bias");
  const Tensor<T>& xv = x.value();
  const Tensor<T>& bv = bias.value();
  const std::size_t C = bv.size();
  if (xv.rank() == 0 || xv.shape().back() != C) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " vs input " +
                         shape_str(xv.shape()));
  }
  Tensor<T> out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % C];
  return x.tape->record(std::move(out), {x.id, bias.id},
                        [C, x_id = x.id, b_id = bias.id](Tape<T>& tape, std::size_t self) {
                          const Tensor<T>& g = tape.grad(self);
                          if (tape.requires_grad(x_id)) detail::accumulate(tape.grad(x_id), g.data());
                          if (tape.requires_grad(b_id)) {
                            Tensor<T>& gb = tape.grad(b_id);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i % C] += g[i];
                          }
                        });
}

template <typename T>
Var<T> relu(Var<T> x) {
  const Tensor<T>& xv = x.value();
  x.tape->note_kinks(xv.data());
  Tensor<T> out = xv;
  for (T& v : out.data()) v = v > T{0} ? v : T{0};
  return x.tape->record(std::move(out), {x.id}, [x_id = x.id](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    const Tensor<T>& xv = tape.value(x_id);
    Tensor<T>& gx = tape.grad(x_id);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T{0}) gx[i] += g[i];
  });
}

/// Per-channel spatial sum of an HxWxK map.
template <typename T>
Var<T> gap(Var<T> map) {
  const Tensor<T>& m = map.value();
  require_rank(m, 3, "gap");
  const std::size_t K = m.dim(2), cells = m.dim(0) * m.dim(1);
  Tensor<T> out({K});
  for (std::size_t c = 0; c < cells; ++c)
    for (std::size_t k = 0; k < K; ++k) out[k] += m[c * K + k];
  return map.tape->record(std::move(out), {map.id},
                          [K, cells, m_id = map.id](Tape<T>& tape, std::size_t self) {
                            const Tensor<T>& g = tape.grad(self);
                            Tensor<T>& gm = tape.grad(m_id);
                            for (std::size_t c = 0; c < cells; ++c)
                              for (std::size_t k = 0; k < K; ++k) gm[c * K + k] += g[k];
                          });
}

/// Row vector times matrix: x (n) . W (n x m) -> (m).
template <typename T>
Var<T> matvec(Var<T> x, Var<T> weights) {
  detail::same_tape(x, weights, "matvec");
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weights.value();
  require_rank(wv, 2, "matvec weights");
  const std::size_t n = wv.dim(0), m = wv.dim(1);
  if (xv.size() != n) {
    throw DimensionError("matvec: vector of length " + std::to_string(xv.size()) +
                         " against weights " + shape_str(wv.shape()));
  }
  Tensor<T> out({m});
  T* op = out.raw();
  for (std::size_t i = 0; i < n; ++i) {
    const T v = xv[i];
    if (v == T{0}) continue;
    const T* wr = wv.raw() + i * m;
    for (std::size_t j = 0; j < m; ++j) op[j] += v * wr[j];
  }
  return x.tape->record(
      std::move(out), {x.id, weights.id},
      [n, m, x_id = x.id, w_id = weights.id](Tape<T>& tape, std::size_t self) {
        const T* g = tape.grad(self).raw();
        if (tape.requires_grad(x_id)) {
          const T* wp = tape.value(w_id).raw();
          Tensor<T>& gx = tape.grad(x_id);
          for (std::size_t i = 0; i < n; ++i) {
            T acc{0};
            for (std::size_t j = 0; j < m; ++j) acc += g[j] * wp[i * m + j];
            gx[i] += acc;
          }
        }
        if (tape.requires_grad(w_id)) {
          const Tensor<T>& xv = tape.value(x_id);
          T* gw = tape.grad(w_id).raw();
          for (std::size_t i = 0; i < n; ++i) {
            const T v = xv[i];
            if (v == T{0}) continue;
            for (std::size_t j = 0; j < m; ++j) gw[i * m + j] += v * g[j];
          }
        }
      });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "add");
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> out = a.value();
  detail::accumulate(out, b.value().data());
  return a.tape->record(std::move(out), {a.id, b.id},
                        [a_id = a.id, b_id = b.id](Tape<T>& tape, std::size_t self) {
                          const Tensor<T>& g = tape.grad(self);
                          if (tape.requires_grad(a_id)) detail::accumulate(tape.grad(a_id), g.data());
                          if (tape.requires_grad(b_id)) detail::accumulate(tape.grad(b_id), g.data());
                        });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "sub");
  if (a.shape() != b.shape()) {
    throw DimensionError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape->record(std::move(out), {a.id, b.id},
                        [a_id = a.id, b_id = b.id](Tape<T>& tape, std::size_t self) {
                          const Tensor<T>& g = tape.grad(self);
                          if (tape.requires_grad(a_id)) detail::accumulate(tape.grad(a_id), g.data());
                          if (tape.requires_grad(b_id)) {
                            Tensor<T>& gb = tape.grad(b_id);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                          }
                        });
}

/// Elementwise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "mul");
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record(std::move(out), {a.id, b.id},
                        [a_id = a.id, b_id = b.id](Tape<T>& tape, std::size_t self) {
                          const Tensor<T>& g = tape.grad(self);
                          const Tensor<T>& av = tape.value(a_id);
                          const Tensor<T>& bv = tape.value(b_id);
                          if (tape.requires_grad(a_id)) {
                            Tensor<T>& ga = tape.grad(a_id);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                          }
                          if (tape.requires_grad(b_id)) {
                            Tensor<T>& gb = tape.grad(b_id);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                          }
                        });
}

/// x scaled by a constant.
template <typename T>
Var<T> scale(Var<T> x, T factor) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v *= factor;
  return x.tape->record(std::move(out), {x.id},
                        [factor, x_id = x.id](Tape<T>& tape, std::size_t self) {
                          const Tensor<T>& g = tape.grad(self);
                          Tensor<T>& gx = tape.grad(x_id);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
                        });
}

/// x scaled by element `index` of a parameter vector (used for per-slot weights).
template <typename T>
Var<T> scale_by(Var<T> x, Var<T> factors, std::size_t index) {
  detail::same_tape(x, factors, "scale_by");
  if (index >= factors.size()) throw IndexError("scale_by: factor index out of range");
  const T s = factors.value()[index];
  Tensor<T> out = x.value();
  for (T& v : out.data()) v *= s;
  return x.tape->record(
      std::move(out), {x.id, factors.id},
      [index, x_id = x.id, f_id = factors.id](Tape<T>& tape, std::size_t self) {
        const Tensor<T>& g = tape.grad(self);
        const T s = tape.value(f_id)[index];
        if (tape.requires_grad(x_id)) {
          Tensor<T>& gx = tape.grad(x_id);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
        }
        if (tape.requires_grad(f_id)) {
          const Tensor<T>& xv = tape.value(x_id);
          T acc{0};
          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
          tape.grad(f_id)[index] += acc;
        }
      });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T acc{0};
  for (T v : x.value().data()) acc += v;
  return x.tape->record(Tensor<T>::scalar(acc), {x.id},
                        [x_id = x.id](Tape<T>& tape, std::size_t self) {
                          const T g = tape.grad(self)[0];
                          for (T& v : tape.grad(x_id).data()) v += g;
                        });
}

/// Sum of scalar nodes. An empty list yields a constant zero.
template <typename T>
Var<T> add_n(Tape<T>& tape, const std::vector<Var<T>>& terms) {
  T acc{0};
  std::vector<std::size_t> ids;
  ids.reserve(terms.size());
  for (const Var<T>& t : terms) {
    if (t.tape != &tape) throw UsageError("add_n: term on another tape");
    acc += t.value().item();
    ids.push_back(t.id);
  }
  return tape.record(Tensor<T>::scalar(acc), ids, [ids](Tape<T>& tp, std::size_t self) {
    const T g = tp.grad(self)[0];
    for (std::size_t id : ids)
      if (tp.requires_grad(id)) tp.grad(id)[0] += g;
  });
}

/// Reinterprets the data with a new shape.
template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x.id}, [x_id = x.id](Tape<T>& tape, std::size_t self) {
    detail::accumulate(tape.grad(x_id), tape.grad(self).data());
  });
}

template <typename T>
Var<T> flatten(Var<T> x) {
  return reshape(x, Shape{x.size()});
}

/// Flattened concatenation of all inputs.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  std::vector<T> data;
  std::vector<std::size_t> ids, offsets;
  for (const Var<T>& p : parts) {
    detail::same_tape(parts.front(), p, "concat");
    offsets.push_back(data.size());
    ids.push_back(p.id);
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  const std::size_t n = data.size();
  return parts.front().tape->record(
      Tensor<T>({n}, std::move(data)), ids, [ids, offsets](Tape<T>& tape, std::size_t self) {
        const Tensor<T>& g = tape.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!tape.requires_grad(ids[k])) continue;
          Tensor<T>& gp = tape.grad(ids[k]);
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] + i];
        }
      });
}

/// Source coordinate sampled by output index i along one axis.
inline double crop_coordinate(double lo, double hi, std::size_t extent, std::size_t out,
                              std::size_t i) {
  const double scale = static_cast<double>(extent - 1);
  if (out > 1) {
    return lo * scale + static_cast<double>(i) * (hi - lo) * scale / static_cast<double>(out - 1);
  }
  return 0.5 * (lo + hi) * scale;
}

/// One bilinear sample: the four source cells and their weights.
struct BilinearTap {
  std::size_t top, bottom, left, right;
  double y_lerp, x_lerp;
};

inline BilinearTap bilinear_tap(double y, double x, std::size_t H, std::size_t W) {
  const double yf = std::floor(y), xf = std::floor(x);
  BilinearTap t{};
  t.top = static_cast<std::size_t>(yf);
  t.left = static_cast<std::size_t>(xf);
  t.bottom = std::min(static_cast<std::size_t>(std::ceil(y)), H - 1);
  t.right = std::min(static_cast<std::size_t>(std::ceil(x)), W - 1);
  t.top = std::min(t.top, H - 1);
  t.left = std::min(t.left, W - 1);
  t.y_lerp = y - yf;
  t.x_lerp = x - xf;
  return t;
}

/// Bilinear crop of a box out of an HxWxK map, resampled to out_h x out_w.
template <typename T>
Var<T> crop_and_resize(Var<T> map, const RoiBox& box, std::size_t out_h, std::size_t out_w) {
  const Tensor<T>& m = map.value();
  require_rank(m, 3, "crop_and_resize");
  box.validate();
  if (out_h == 0 || out_w == 0) throw ArgumentError("crop_and_resize: empty output size");
  const std::size_t H = m.dim(0), W = m.dim(1), K = m.dim(2);

  std::vector<BilinearTap> taps;
  taps.reserve(out_h * out_w);
  for (std::size_t i = 0; i < out_h; ++i) {
    const double y = crop_coordinate(box.y1, box.y2, H, out_h, i);
    for (std::size_t j = 0; j < out_w; ++j) {
      const double x = crop_coordinate(box.x1, box.x2, W, out_w, j);
      taps.push_back(bilinear_tap(y, x, H, W));
    }
  }

  Tensor<T> out({out_h, out_w, K});
  for (std::size_t o = 0; o < taps.size(); ++o) {
    const BilinearTap& t = taps[o];
    const T yl = static_cast<T>(t.y_lerp), xl = static_cast<T>(t.x_lerp);
    const T* tl = m.raw() + (t.top * W + t.left) * K;
    const T* tr = m.raw() + (t.top * W + t.right) * K;
    const T* bl = m.raw() + (t.bottom * W + t.left) * K;
    const T* br = m.raw() + (t.bottom * W + t.right) * K;
    T* op = out.raw() + o * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T top = tl[k] + (tr[k] - tl[k]) * xl;
      const T bottom = bl[k] + (br[k] - bl[k]) * xl;
      op[k] = top + (bottom - top) * yl;
    }
  }

  return map.tape->record(
      std::move(out), {map.id}, [taps, W, K, m_id = map.id](Tape<T>& tape, std::size_t self) {
        const Tensor<T>& g = tape.grad(self);
        T* gm = tape.grad(m_id).raw();
        for (std::size_t o = 0; o < taps.size(); ++o) {
          const BilinearTap& t = taps[o];
          const T yl = static_cast<T>(t.y_lerp), xl = static_cast<T>(t.x_lerp);
          const T* gp = g.raw() + o * K;
          T* tl = gm + (t.top * W + t.left) * K;
          T* tr = gm + (t.top * W + t.right) * K;
          T* bl = gm + (t.bottom * W + t.left) * K;
          T* br = gm + (t.bottom * W + t.right) * K;
          for (std::size_t k = 0; k < K; ++k) {
            const T dtop = (T{1} - yl) * gp[k];
            const T dbottom = yl * gp[k];
            tl[k] += (T{1} - xl) * dtop;
            tr[k] += xl * dtop;
            bl[k] += (T{1} - xl) * dbottom;
            br[k] += xl * dbottom;
          }
        }
      });
}

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  const T mx = *std::max_element(logits.begin(), logits.end());
  std::vector<T> p(logits.size());
  T z{0};
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (T& v : p) v /= z;
  return p;
}

/// -log softmax(logits)[label].
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::size_t label) {
  const Tensor<T>& lv = logits.value();
  if (lv.size() < 2) throw DimensionError("softmax_cross_entropy: need at least 2 logits");
  if (label >= lv.size()) {
    throw IndexError("softmax_cross_entropy: label " + std::to_string(label) +
                     " out of range for " + std::to_string(lv.size()) + " classes");
  }
  const T mx = *std::max_element(lv.data().begin(), lv.data().end());
  T z{0};
  for (T v : lv.data()) z += std::exp(v - mx);
  const T loss = std::log(z) + mx - lv[label];
  return logits.tape->record(Tensor<T>::scalar(loss), {logits.id},
                             [label, l_id = logits.id](Tape<T>& tape, std::size_t self) {
                               const T g = tape.grad(self)[0];
                               std::vector<T> p = softmax(tape.value(l_id).data());
                               Tensor<T>& gl = tape.grad(l_id);
                               for (std::size_t i = 0; i < p.size(); ++i)
                                 gl[i] += g * (p[i] - (i == label ? T{1} : T{0}));
                             });
}

template <typename T>
T euclidean(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw DimensionError("euclidean: length mismatch");
  T acc{0};
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

/// Softmax-normalized triplet distances (d_plus, d_minus) on plain vectors.
template <typename T>
std::pair<T, T> soft_triplet(std::span<const T> anchor, std::span<const T> positive,
                             std::span<const T> negative) {
  if (anchor.size() != positive.size() || anchor.size() != negative.size()) {
    throw DimensionError("soft_triplet: vectors differ in length");
  }
  const T dp = euclidean(anchor, positive);
  const T dn = euclidean(anchor, negative);
  return {T{1} / (T{1} + std::exp(dn - dp)), T{1} / (T{1} + std::exp(dp - dn))};
}

/// d_plus as a differentiable scalar.
template <typename T>
Var<T> soft_triplet_dplus(Var<T> anchor, Var<T> positive, Var<T> negative) {
  detail::same_tape(anchor, positive, "soft_triplet");
  detail::same_tape(anchor, negative, "soft_triplet");
  const auto [d_plus, d_minus] = soft_triplet<T>(anchor.value().data(), positive.value().data(),
                                                 negative.value().data());
  (void)d_minus;
  return anchor.tape->record(
      Tensor<T>::scalar(d_plus), {anchor.id, positive.id, negative.id},
      [d_plus, a_id = anchor.id, p_id = positive.id, n_id = negative.id](Tape<T>& tape,
                                                                        std::size_t self) {
        const T g = tape.grad(self)[0] * d_plus * (T{1} - d_plus);
        const Tensor<T>& a = tape.value(a_id);
        const Tensor<T>& p = tape.value(p_id);
        const Tensor<T>& n = tape.value(n_id);
        const T dp = euclidean(a.data(), p.data());
        const T dn = euclidean(a.data(), n.data());
        // d d_plus / d dp = s(1-s), / d dn = -s(1-s); the norm has a zero subgradient at 0.
        const T cp = dp > T{0} ? g / dp : T{0};
        const T cn = dn > T{0} ? -g / dn : T{0};
        const std::size_t len = a.size();
        if (tape.requires_grad(a_id)) {
          Tensor<T>& ga = tape.grad(a_id);
          for (std::size_t i = 0; i < len; ++i) ga[i] += cp * (a[i] - p[i]) + cn * (a[i] - n[i]);
        }
        if (tape.requires_grad(p_id)) {
          Tensor<T>& gp = tape.grad(p_id);
          for (std::size_t i = 0; i < len; ++i) gp[i] -= cp * (a[i] - p[i]);
        }
        if (tape.requires_grad(n_id)) {
          Tensor<T>& gn = tape.grad(n_id);
          for (std::size_t i = 0; i < len; ++i) gn[i] -= cn * (a[i] - n[i]);
        }
      });
}

/// Inverted dropout: keeps each element with probability keep and rescales by 1/keep.
template <typename T, typename Rng>
Var<T> dropout(Var<T> x, T keep, Rng& rng) {
  if (!(keep > T{0}) || keep > T{1}) throw ArgumentError("dropout: keep probability must be in (0,1]");
  if (keep == T{1}) return x;
  std::bernoulli_distribution coin(static_cast<double>(keep));
  Tensor<T> mask(x.shape());
  for (T& m : mask.data()) m = coin(rng) ? T{1} / keep : T{0};
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return x.tape->record(std::move(out), {x.id},
                        [mask = std::move(mask), x_id = x.id](Tape<T>& tape, std::size_t self) {
                          const Tensor<T>& g = tape.grad(self);
                          Tensor<T>& gx = tape.grad(x_id);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += mask[i] * g[i];
                        });
}

}  // namespace attrsearch::ops
