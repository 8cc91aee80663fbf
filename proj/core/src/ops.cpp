#include "dar/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "gemm.hpp"

namespace dar {

namespace {

template <typename T>
bool wants_grad(const TensorNode<T>& self, std::size_t parent) {
  return self.parents[parent]->requires_grad;
}

void require(bool condition, const std::string& message) {
  if (!condition) throw DimensionError(message);
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

// --------------------------------------------------------------------------
// matmul / transpose

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.ndim() == b.ndim() && (a.ndim() == 2 || a.ndim() == 3),
          "matmul expects two 2-D or two 3-D tensors, got " + shape_string(a.shape()) + " and " +
              shape_string(b.shape()));
  const bool batched = a.ndim() == 3;
  const std::size_t batch = batched ? a.dim(0) : 1;
  const std::size_t m = a.dim(a.ndim() - 2), k = a.dim(a.ndim() - 1);
  const std::size_t k2 = b.dim(b.ndim() - 2), n = b.dim(b.ndim() - 1);
  require(k == k2 && (!batched || b.dim(0) == batch),
          "matmul inner dimensions disagree: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));

  std::vector<T> out(batch * m * n, T(0));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t s = 0; s < batch; ++s) {
    detail::gemm_nn(m, n, k, pa + s * m * k, pb + s * k * n, out.data() + s * m * n);
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return make_result<T>(std::move(shape), std::move(out), {a, b}, [batch, m, n, k](TensorNode<T>& self) {
    const T* g = self.grad.data();
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    std::vector<T> scratch;
    for (std::size_t s = 0; s < batch; ++s) {
      if (na.requires_grad) {
        detail::gemm_nt(m, k, n, g + s * m * n, nb.data.data() + s * k * n, na.grad_buffer() + s * m * k,
                        scratch);
      }
      if (nb.requires_grad) {
        detail::gemm_tn(k, n, m, na.data.data() + s * m * k, g + s * m * n, nb.grad_buffer() + s * k * n);
      }
    }
  });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  require(x.ndim() == 2 || x.ndim() == 3, "transpose expects a 2-D or 3-D tensor, got " + shape_string(x.shape()));
  const std::size_t batch = x.ndim() == 3 ? x.dim(0) : 1;
  const std::size_t rows = x.dim(x.ndim() - 2), cols = x.dim(x.ndim() - 1);
  std::vector<T> out(x.size());
  for (std::size_t s = 0; s < batch; ++s) {
    detail::transpose_into(rows, cols, x.data().data() + s * rows * cols, out.data() + s * rows * cols);
  }
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  return make_result<T>(std::move(shape), std::move(out), {x}, [batch, rows, cols](TensorNode<T>& self) {
    auto& nx = *self.parents[0];
    T* gx = nx.grad_buffer();
    for (std::size_t s = 0; s < batch; ++s) {
      const T* g = self.grad.data() + s * rows * cols;
      for (std::size_t c = 0; c < cols; ++c) {
        for (std::size_t r = 0; r < rows; ++r) gx[s * rows * cols + r * cols + c] += g[c * rows + r];
      }
    }
  });
}

// --------------------------------------------------------------------------
// conv2d

namespace {

struct ConvGeometry {
  std::size_t batch, in_ch, height, width, out_ch, kernel, stride, padding, out_h, out_w;
  std::size_t patch() const { return in_ch * kernel * kernel; }
  std::size_t out_plane() const { return out_h * out_w; }
};

template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const std::size_t plane = g.out_plane();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        T* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * plane;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.padding);
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.padding);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<long>(g.height) &&
                                iw < static_cast<long>(g.width);
            row[oh * g.out_w + ow] = inside ? x[(c * g.height + ih) * g.width + iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* cols, T* dx) {
  const std::size_t plane = g.out_plane();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const T* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * plane;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.padding);
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.padding);
            if (iw < 0 || iw >= static_cast<long>(g.width)) continue;
            dx[(c * g.height + ih) * g.width + iw] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& kernels, const BasicTensor<T>& bias,
                      std::size_t stride, std::size_t padding) {
  require(x.ndim() == 3 || x.ndim() == 4, "conv2d input must be [C×H×W] or [B×C×H×W], got " + shape_string(x.shape()));
  require(kernels.ndim() == 4 && kernels.dim(2) == kernels.dim(3),
          "conv2d kernels must be [O×C×k×k], got " + shape_string(kernels.shape()));
  if (stride < 1) throw DimensionError("conv2d stride must be >= 1");
  const bool batched = x.ndim() == 4;
  const std::size_t off = batched ? 1 : 0;
  ConvGeometry g{};
  g.batch = batched ? x.dim(0) : 1;
  g.in_ch = x.dim(off);
  g.height = x.dim(off + 1);
  g.width = x.dim(off + 2);
  g.out_ch = kernels.dim(0);
  g.kernel = kernels.dim(2);
  g.stride = stride;
  g.padding = padding;
  require(kernels.dim(1) == g.in_ch, "conv2d channel mismatch: input " + shape_string(x.shape()) + ", kernels " +
                                         shape_string(kernels.shape()));
  require(g.kernel <= g.height + 2 * padding && g.kernel <= g.width + 2 * padding,
          "conv2d kernel larger than padded input");
  if (bias.defined()) {
    require(bias.ndim() == 1 && bias.dim(0) == g.out_ch, "conv2d bias must be [O], got " + shape_string(bias.shape()));
  }
  g.out_h = (g.height + 2 * padding - g.kernel) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel) / stride + 1;

  const std::size_t patch = g.patch(), plane = g.out_plane();
  const std::size_t in_size = g.in_ch * g.height * g.width, out_size = g.out_ch * plane;
  auto cols = std::make_shared<std::vector<T>>(g.batch * patch * plane);
  std::vector<T> out(g.batch * out_size, T(0));
  const T* px = x.data().data();
  const T* pw = kernels.data().data();
  for (std::size_t s = 0; s < g.batch; ++s) {
    T* c = cols->data() + s * patch * plane;
    im2col(g, px + s * in_size, c);
    T* o = out.data() + s * out_size;
    if (bias.defined()) {
      for (std::size_t oc = 0; oc < g.out_ch; ++oc) std::fill_n(o + oc * plane, plane, bias.data()[oc]);
    }
    detail::gemm_nn(g.out_ch, plane, patch, pw, c, o);
  }

  Shape shape = batched ? Shape{g.batch, g.out_ch, g.out_h, g.out_w} : Shape{g.out_ch, g.out_h, g.out_w};
  BasicTensor<T> b_or_empty = bias.defined() ? bias : BasicTensor<T>(Shape{0});
  return make_result<T>(std::move(shape), std::move(out), {x, kernels, b_or_empty},
                        [g, cols, in_size, out_size](TensorNode<T>& self) {
    const std::size_t patch = g.patch(), plane = g.out_plane();
    auto& nx = *self.parents[0];
    auto& nk = *self.parents[1];
    auto& nb = *self.parents[2];
    std::vector<T> scratch, dcols;
    if (nx.requires_grad) dcols.resize(patch * plane);
    for (std::size_t s = 0; s < g.batch; ++s) {
      const T* go = self.grad.data() + s * out_size;
      if (nk.requires_grad) {
        detail::gemm_nt(g.out_ch, patch, plane, go, cols->data() + s * patch * plane, nk.grad_buffer(), scratch);
      }
      if (nb.requires_grad && !nb.data.empty()) {
        T* gb = nb.grad_buffer();
        for (std::size_t oc = 0; oc < g.out_ch; ++oc) {
          T acc = T(0);
          for (std::size_t p = 0; p < plane; ++p) acc += go[oc * plane + p];
          gb[oc] += acc;
        }
      }
      if (nx.requires_grad) {
        std::fill(dcols.begin(), dcols.end(), T(0));
        detail::gemm_tn(patch, plane, g.out_ch, nk.data.data(), go, dcols.data());
        col2im_add(g, dcols.data(), nx.grad_buffer() + s * in_size);
      }
    }
  });
}

// --------------------------------------------------------------------------
// elementwise nonlinearities and pooling

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  std::vector<T> out(x.size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
  return make_result<T>(x.shape(), std::move(out), {x}, [](TensorNode<T>& self) {
    auto& nx = *self.parents[0];
    T* gx = nx.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (nx.data[i] > T(0)) gx[i] += self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& x, std::size_t window, std::size_t stride) {
  require(x.ndim() >= 2, "maxpool2d needs at least 2 axes");
  require(window >= 1 && stride >= 1, "maxpool2d window and stride must be >= 1");
  const std::size_t h = x.dim(x.ndim() - 2), w = x.dim(x.ndim() - 1);
  require(window <= h && window <= w, "maxpool2d window larger than input " + shape_string(x.shape()));
  const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  const std::size_t planes = x.size() / (h * w);
  auto argmax = std::make_shared<std::vector<std::size_t>>(planes * oh * ow);
  std::vector<T> out(planes * oh * ow);
  const T* px = x.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = p * h * w + (i * stride) * w + j * stride;
        for (std::size_t di = 0; di < window; ++di) {
          for (std::size_t dj = 0; dj < window; ++dj) {
            const std::size_t idx = p * h * w + (i * stride + di) * w + j * stride + dj;
            if (px[idx] > px[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + i) * ow + j;
        out[o] = px[best];
        (*argmax)[o] = best;
      }
    }
  }
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  return make_result<T>(std::move(shape), std::move(out), {x}, [argmax](TensorNode<T>& self) {
    T* gx = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < self.grad.size(); ++o) gx[(*argmax)[o]] += self.grad[o];
  });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  require(axis < x.ndim(), "softmax axis out of range for " + shape_string(x.shape()));
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<T> out(x.size());
  const T* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, px[base + e * s.inner]);
      T total = T(0);
      for (std::size_t e = 0; e < s.extent; ++e) {
        const T v = std::exp(px[base + e * s.inner] - mx);
        out[base + e * s.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= total;
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [s](TensorNode<T>& self) {
    T* gx = self.parents[0]->grad_buffer();
    const T* y = self.data.data();
    const T* gy = self.grad.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        T dot = T(0);
        for (std::size_t e = 0; e < s.extent; ++e) dot += gy[base + e * s.inner] * y[base + e * s.inner];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t i = base + e * s.inner;
          gx[i] += y[i] * (gy[i] - dot);
        }
      }
    }
  });
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> labels,
                             std::span<const T> weights) {
  require(logits.ndim() == 2, "cross_entropy expects [B×C] logits, got " + shape_string(logits.shape()));
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  require(labels.size() == batch, "cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                                      std::to_string(batch));
  require(weights.empty() || weights.size() == batch, "cross_entropy: weight count does not match batch");
  for (std::int32_t label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw IndexError("cross_entropy label " + std::to_string(label) + " outside [0," + std::to_string(classes) + ")");
    }
  }
  const T* z = logits.data().data();
  auto probs = std::make_shared<std::vector<T>>(batch * classes);
  T loss = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = z + b * classes;
    const T mx = *std::max_element(row, row + classes);
    T total = T(0);
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(row[c] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t c = 0; c < classes; ++c) (*probs)[b * classes + c] = std::exp(row[c] - lse);
    const T w = weights.empty() ? T(1) : weights[b];
    loss += w * (lse - row[labels[b]]);
  }
  loss /= static_cast<T>(batch);
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  std::vector<T> wts(weights.begin(), weights.end());
  return make_result<T>(Shape{}, std::vector<T>{loss}, {logits},
                        [probs, lab = std::move(lab), wts = std::move(wts), batch, classes](TensorNode<T>& self) {
    T* gz = self.parents[0]->grad_buffer();
    const T g = self.grad[0] / static_cast<T>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      const T w = wts.empty() ? T(1) : wts[b];
      for (std::size_t c = 0; c < classes; ++c) {
        const T target = static_cast<std::size_t>(lab[b]) == c ? T(1) : T(0);
        gz[b * classes + c] += g * w * ((*probs)[b * classes + c] - target);
      }
    }
  });
}

// --------------------------------------------------------------------------
// arithmetic

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.shape() == b.shape(), "add shape mismatch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants_grad(self, p)) continue;
      T* g = self.parents[p]->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.shape() == b.shape(), "mul shape mismatch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    if (na.requires_grad) {
      T* g = na.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * nb.data[i];
    }
    if (nb.requires_grad) {
      T* g = nb.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * na.data[i];
    }
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  return make_result<T>(x.shape(), std::move(out), {x}, [factor](TensorNode<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  require(bias.ndim() == 1 && x.ndim() >= 1 && x.dim(x.ndim() - 1) == bias.dim(0),
          "add_bias: bias " + shape_string(bias.shape()) + " does not match last axis of " + shape_string(x.shape()));
  const std::size_t n = bias.dim(0);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + bias.data()[i % n];
  return make_result<T>(x.shape(), std::move(out), {x, bias}, [n](TensorNode<T>& self) {
    if (wants_grad(self, 0)) {
      T* g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(self, 1)) {
      T* g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    }
  });
}

// --------------------------------------------------------------------------
// shape manipulation

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  require(numel(shape) == x.size(), "reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>(std::move(shape), std::move(out), {x}, [](TensorNode<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t nd = x.ndim();
  require(axes.size() == nd, "permute: axis count does not match rank of " + shape_string(x.shape()));
  std::vector<bool> seen(nd, false);
  for (std::size_t a : axes) {
    require(a < nd && !seen[a], "permute: axes are not a permutation");
    seen[a] = true;
  }
  Shape out_shape(nd);
  for (std::size_t i = 0; i < nd; ++i) out_shape[i] = x.dim(axes[i]);
  std::vector<std::size_t> in_strides(nd, 1);
  for (std::size_t i = nd; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  // For each output index, offset into the input.
  auto gather = std::make_shared<std::vector<std::size_t>>(x.size());
  std::vector<std::size_t> idx(nd, 0);
  for (std::size_t o = 0; o < x.size(); ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < nd; ++i) src += idx[i] * in_strides[axes[i]];
    (*gather)[o] = src;
    for (std::size_t i = nd; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = x.data()[(*gather)[o]];
  return make_result<T>(std::move(out_shape), std::move(out), {x}, [gather](TensorNode<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < self.grad.size(); ++o) g[(*gather)[o]] += self.grad[o];
  });
}

template <typename T>
BasicTensor<T> repeat_batch(const BasicTensor<T>& x, std::size_t batch) {
  const std::size_t n = x.size();
  std::vector<T> out(batch * n);
  for (std::size_t b = 0; b < batch; ++b) std::copy(x.data().begin(), x.data().end(), out.begin() + b * n);
  Shape shape{batch};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  return make_result<T>(std::move(shape), std::move(out), {x}, [batch, n](TensorNode<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[b * n + i];
    }
  });
}

template <typename T>
BasicTensor<T> pick(const BasicTensor<T>& x, std::span<const std::int32_t> index) {
  require(x.ndim() == 2 && index.size() == x.dim(0), "pick expects [B×C] input and B indices");
  const std::size_t cols = x.dim(1);
  std::vector<T> out(index.size());
  for (std::size_t b = 0; b < index.size(); ++b) {
    if (index[b] < 0 || static_cast<std::size_t>(index[b]) >= cols) throw IndexError("pick index out of range");
    out[b] = x.data()[b * cols + index[b]];
  }
  std::vector<std::int32_t> idx(index.begin(), index.end());
  return make_result<T>(Shape{index.size()}, std::move(out), {x}, [idx = std::move(idx), cols](TensorNode<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < idx.size(); ++b) g[b * cols + idx[b]] += self.grad[b];
  });
}

// --------------------------------------------------------------------------
// reductions

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x, std::size_t axis) {
  require(axis < x.ndim(), "mean axis out of range for " + shape_string(x.shape()));
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<T> out(s.outer * s.inner, T(0));
  const T inv = T(1) / static_cast<T>(s.extent);
  const T* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      T acc = T(0);
      for (std::size_t e = 0; e < s.extent; ++e) acc += px[(o * s.extent + e) * s.inner + in];
      out[o * s.inner + in] = acc * inv;
    }
  }
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<long>(axis));
  return make_result<T>(std::move(shape), std::move(out), {x}, [s, inv](TensorNode<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t e = 0; e < s.extent; ++e) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          g[(o * s.extent + e) * s.inner + in] += self.grad[o * s.inner + in] * inv;
        }
      }
    }
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return make_result<T>(Shape{}, std::vector<T>{acc}, {x}, [](TensorNode<T>& self) {
    auto& nx = *self.parents[0];
    T* g = nx.grad_buffer();
    for (std::size_t i = 0; i < nx.data.size(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> abs_sum(const BasicTensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += std::abs(v);
  return make_result<T>(Shape{}, std::vector<T>{acc}, {x}, [](TensorNode<T>& self) {
    auto& nx = *self.parents[0];
    T* g = nx.grad_buffer();
    for (std::size_t i = 0; i < nx.data.size(); ++i) {
      const T v = nx.data[i];
      g[i] += self.grad[0] * (v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)));
    }
  });
}

template <typename T>
BasicTensor<T> square_sum(const BasicTensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v * v;
  return make_result<T>(Shape{}, std::vector<T>{acc}, {x}, [](TensorNode<T>& self) {
    auto& nx = *self.parents[0];
    T* g = nx.grad_buffer();
    for (std::size_t i = 0; i < nx.data.size(); ++i) g[i] += self.grad[0] * T(2) * nx.data[i];
  });
}

#define DAR_INSTANTIATE_OPS(T)                                                                                 \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                               \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,         \
                                 std::size_t, std::size_t);                                                   \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                        \
  template BasicTensor<T> maxpool2d(const BasicTensor<T>&, std::size_t, std::size_t);                         \
  template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t);                                        \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&, std::span<const std::int32_t>,                 \
                                        std::span<const T>);                                                  \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                  \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                  \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                    \
  template BasicTensor<T> add_bias(const BasicTensor<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                              \
  template BasicTensor<T> permute(const BasicTensor<T>&, const std::vector<std::size_t>&);                    \
  template BasicTensor<T> mean(const BasicTensor<T>&, std::size_t);                                           \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> abs_sum(const BasicTensor<T>&);                                                     \
  template BasicTensor<T> square_sum(const BasicTensor<T>&);                                                  \
  template BasicTensor<T> repeat_batch(const BasicTensor<T>&, std::size_t);                                   \
  template BasicTensor<T> pick(const BasicTensor<T>&, std::span<const std::int32_t>);

DAR_INSTANTIATE_OPS(float)
DAR_INSTANTIATE_OPS(double)

#undef DAR_INSTANTIATE_OPS

}  // namespace dar
