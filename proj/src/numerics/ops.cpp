#include "apa/numerics/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <string>

#include "apa/errors.hpp"

namespace apa::num {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
using Impl = TensorImpl<T>;
template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

// Builds the output tensor and, if any input needs gradients, records the node.
template <typename T, typename Fn>
Tensor<T> finish(Shape shape, std::vector<T> values, std::initializer_list<const Tensor<T>*> inputs, Fn&& backward) {
  auto out = Tensor<T>::from(std::move(shape), std::move(values));
  bool needs = false;
  if (grad_enabled()) {
    for (const auto* in : inputs) needs = needs || in->requires_grad();
  }
  if (needs) {
    auto node = std::make_shared<Node<T>>();
    for (const auto* in : inputs) node->parents.push_back(in->impl());
    node->backward = std::forward<Fn>(backward);
    out.impl()->requires_grad = true;
    out.impl()->node = std::move(node);
  }
  return out;
}

template <typename T>
Impl<T>& parent(Impl<T>& out, std::size_t i) {
  return *out.node->parents[i];
}

void require(bool ok, const std::string& message) {
  if (!ok) throw DimensionError(message);
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
std::size_t last_dim(const Tensor<T>& x, const char* op) {
  require(x.rank() >= 1, std::string(op) + ": rank-0 input");
  return x.shape().back();
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "add");
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return finish<T>(a.shape(), std::move(out), {&a, &b}, [](Impl<T>& o) {
    for (std::size_t p = 0; p < 2; ++p) {
      auto& in = parent(o, p);
      if (!in.requires_grad) continue;
      for (std::size_t i = 0; i < o.grad.size(); ++i) in.grad[i] += o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "sub");
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return finish<T>(a.shape(), std::move(out), {&a, &b}, [](Impl<T>& o) {
    auto& pa = parent(o, 0);
    auto& pb = parent(o, 1);
    if (pa.requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] -= o.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "mul");
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return finish<T>(a.shape(), std::move(out), {&a, &b}, [](Impl<T>& o) {
    auto& pa = parent(o, 0);
    auto& pb = parent(o, 1);
    if (pa.requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i] * pb.data[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] += o.grad[i] * pa.data[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return finish<T>(a.shape(), std::move(out), {&a}, [factor](Impl<T>& o) {
    auto& pa = parent(o, 0);
    for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  std::vector<T> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + offset;
  return finish<T>(a.shape(), std::move(out), {&a}, [](Impl<T>& o) {
    auto& pa = parent(o, 0);
    for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t k = last_dim(a, "matmul");
  require(b.rank() == 2 && b.dim(0) == k,
          "matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  const std::size_t rows = a.numel() / std::max<std::size_t>(k, 1);
  const std::size_t m = b.dim(1);
  std::vector<T> out(rows * m);
  MapMat<T>(out.data(), rows, m).noalias() =
      CMapMat<T>(a.data().data(), rows, k) * CMapMat<T>(b.data().data(), k, m);
  Shape shape = a.shape();
  shape.back() = m;
  return finish<T>(std::move(shape), std::move(out), {&a, &b}, [rows, k, m](Impl<T>& o) {
    auto& pa = parent(o, 0);
    auto& pb = parent(o, 1);
    CMapMat<T> dout(o.grad.data(), rows, m);
    if (pa.requires_grad)
      MapMat<T>(pa.grad.data(), rows, k).noalias() += dout * CMapMat<T>(pb.data.data(), k, m).transpose();
    if (pb.requires_grad)
      MapMat<T>(pb.grad.data(), k, m).noalias() += CMapMat<T>(pa.data.data(), rows, k).transpose() * dout;
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t c = last_dim(x, "add_bias");
  require(bias.rank() == 1 && bias.dim(0) == c,
          "add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  std::vector<T> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % c];
  return finish<T>(x.shape(), std::move(out), {&x, &bias}, [c](Impl<T>& o) {
    auto& px = parent(o, 0);
    auto& pb = parent(o, 1);
    if (px.requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) pb.grad[i % c] += o.grad[i];
  });
}

template <typename T>
Tensor<T> add_per_example(const Tensor<T>& x, const Tensor<T>& e) {
  require(x.rank() >= 2 && e.rank() == 2 && e.dim(0) == x.dim(0) && e.dim(1) == x.shape().back(),
          "add_per_example: cannot broadcast " + shape_str(e.shape()) + " onto " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0);
  const std::size_t c = x.shape().back();
  const std::size_t per = x.numel() / batch;
  std::vector<T> out(x.data().begin(), x.data().end());
  auto ev = e.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < per; ++i) out[b * per + i] += ev[b * c + i % c];
  return finish<T>(x.shape(), std::move(out), {&x, &e}, [batch, c, per](Impl<T>& o) {
    auto& px = parent(o, 0);
    auto& pe = parent(o, 1);
    if (px.requires_grad)
      for (std::size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i];
    if (pe.requires_grad)
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < per; ++i) pe.grad[b * c + i % c] += o.grad[b * per + i];
  });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] / (T(1) + std::exp(-v[i]));
  return finish<T>(x.shape(), std::move(out), {&x}, [](Impl<T>& o) {
    auto& px = parent(o, 0);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-px.data[i]));
      px.grad[i] += o.grad[i] * s * (T(1) + px.data[i] * (T(1) - s));
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const std::size_t n = last_dim(x, "softmax");
  const int last = static_cast<int>(x.rank()) - 1;
  if (axis != -1 && axis != last) throw ContractError("softmax: only the last axis is supported");
  const std::size_t rows = x.numel() / std::max<std::size_t>(n, 1);
  std::vector<T> out(x.numel());
  auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = v.data() + r * n;
    T* y = out.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) total += (y[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= total;
  }
  return finish<T>(x.shape(), std::move(out), {&x}, [rows, n](Impl<T>& o) {
    auto& px = parent(o, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.data.data() + r * n;
      const T* dy = o.grad.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) px.grad[r * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, T eps) {
  const std::size_t c = last_dim(x, "layer_norm");
  require(gain.shape() == Shape{c} && shift.shape() == Shape{c},
          "layer_norm: gain/shift must be [" + std::to_string(c) + "], got " + shape_str(gain.shape()) + " and " +
              shape_str(shift.shape()));
  const std::size_t rows = x.numel() / c;
  auto normalized = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.numel());
  auto v = x.data();
  auto g = gain.data();
  auto s = shift.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = v.data() + r * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += in[j];
    mu /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= T(c);
    const T rs = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const T xh = (in[j] - mu) * rs;
      (*normalized)[r * c + j] = xh;
      out[r * c + j] = xh * g[j] + s[j];
    }
  }
  return finish<T>(x.shape(), std::move(out), {&x, &gain, &shift}, [rows, c, normalized, inv_std](Impl<T>& o) {
    auto& px = parent(o, 0);
    auto& pg = parent(o, 1);
    auto& ps = parent(o, 2);
    const auto& xh = *normalized;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* dy = o.grad.data() + r * c;
      const T* xr = xh.data() + r * c;
      if (pg.requires_grad)
        for (std::size_t j = 0; j < c; ++j) pg.grad[j] += dy[j] * xr[j];
      if (ps.requires_grad)
        for (std::size_t j = 0; j < c; ++j) ps.grad[j] += dy[j];
      if (px.requires_grad) {
        T mean_d = 0, mean_dx = 0;
        for (std::size_t j = 0; j < c; ++j) {
          const T d = dy[j] * pg.data[j];
          mean_d += d;
          mean_dx += d * xr[j];
        }
        mean_d /= T(c);
        mean_dx /= T(c);
        const T rs = (*inv_std)[r];
        for (std::size_t j = 0; j < c; ++j)
          px.grad[r * c + j] += rs * (dy[j] * pg.data[j] - mean_d - xr[j] * mean_dx);
      }
    }
  });
}

namespace {

// Rows: (b, y, x); columns: (ky, kx, c).
// Image rows [y0, y1) of example `img`; col holds (y1 - y0) * w rows of 9c values.
template <typename T>
void im2col3x3(const T* img, std::size_t y0, std::size_t y1, std::size_t h, std::size_t w, std::size_t c, T* col) {
  const std::size_t kcols = 9 * c;
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      T* row = col + ((y - y0) * w + x) * kcols;
      for (int ky = 0; ky < 3; ++ky) {
        const long yy = static_cast<long>(y) + ky - 1;
        for (int kx = 0; kx < 3; ++kx) {
          const long xx = static_cast<long>(x) + kx - 1;
          T* dst = row + (ky * 3 + kx) * c;
          if (yy < 0 || yy >= static_cast<long>(h) || xx < 0 || xx >= static_cast<long>(w)) {
            std::fill(dst, dst + c, T(0));
          } else {
            const T* src = img + (static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * c;
            std::copy(src, src + c, dst);
          }
        }
      }
    }
}

template <typename T>
void col2im3x3(const T* col, std::size_t y0, std::size_t y1, std::size_t h, std::size_t w, std::size_t c, T* img) {
  const std::size_t kcols = 9 * c;
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const T* row = col + ((y - y0) * w + x) * kcols;
      for (int ky = 0; ky < 3; ++ky) {
        const long yy = static_cast<long>(y) + ky - 1;
        if (yy < 0 || yy >= static_cast<long>(h)) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const long xx = static_cast<long>(x) + kx - 1;
          if (xx < 0 || xx >= static_cast<long>(w)) continue;
          const T* src = row + (ky * 3 + kx) * c;
          T* dst = img + (static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * c;
          for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
        }
      }
    }
}

// Image rows per im2col band, sized so a band's columns stay in cache.
inline std::size_t band_rows(std::size_t w, std::size_t cin) {
  return std::max<std::size_t>(1, (64 * 1024) / std::max<std::size_t>(1, w * 9 * cin));
}

}  // namespace

template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require(x.rank() == 4, "conv3x3: input must be [B,H,W,C], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
  require(weight.rank() == 2 && weight.dim(0) == 9 * cin,
          "conv3x3: weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  const std::size_t cout = weight.dim(1);
  require(bias.shape() == Shape{cout}, "conv3x3: bias " + shape_str(bias.shape()) + " vs " + std::to_string(cout));
  const std::size_t rows = batch * h * w;
  const std::size_t k = 9 * cin;
  const std::size_t band = std::min(h, band_rows(w, cin));
  std::vector<T> col(band * w * k);
  std::vector<T> out(rows * cout);
  CMapMat<T> wm(weight.data().data(), k, cout);
  const T* xv = x.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t y0 = 0; y0 < h; y0 += band) {
      const std::size_t y1 = std::min(h, y0 + band), n = (y1 - y0) * w;
      im2col3x3(xv + b * h * w * cin, y0, y1, h, w, cin, col.data());
      MapMat<T>(out.data() + (b * h + y0) * w * cout, n, cout).noalias() = CMapMat<T>(col.data(), n, k) * wm;
    }
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cout; ++j) out[r * cout + j] += bv[j];
  return finish<T>({batch, h, w, cout}, std::move(out), {&x, &weight, &bias},
                   [batch, h, w, cin, cout, rows, k, band](Impl<T>& o) {
                     auto& px = parent(o, 0);
                     auto& pw = parent(o, 1);
                     auto& pb = parent(o, 2);
                     if (pb.requires_grad)
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < cout; ++j) pb.grad[j] += o.grad[r * cout + j];
                     std::vector<T> buf(band * w * k);
                     for (std::size_t b = 0; b < batch; ++b)
                       for (std::size_t y0 = 0; y0 < h; y0 += band) {
                         const std::size_t y1 = std::min(h, y0 + band), n = (y1 - y0) * w;
                         CMapMat<T> dout(o.grad.data() + (b * h + y0) * w * cout, n, cout);
                         if (pw.requires_grad) {
                           im2col3x3(px.data.data() + b * h * w * cin, y0, y1, h, w, cin, buf.data());
                           MapMat<T>(pw.grad.data(), k, cout).noalias() +=
                               CMapMat<T>(buf.data(), n, k).transpose() * dout;
                         }
                         if (px.requires_grad) {
                           MapMat<T>(buf.data(), n, k).noalias() = dout * CMapMat<T>(pw.data.data(), k, cout).transpose();
                           col2im3x3(buf.data(), y0, y1, h, w, cin, px.grad.data() + b * h * w * cin);
                         }
                       }
                   });
}

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  require(x.rank() == 4 && x.dim(1) % 2 == 0 && x.dim(2) % 2 == 0,
          "avg_pool2: need [B,H,W,C] with even H,W, got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::size_t ho = h / 2, wo = w / 2;
  std::vector<T> out(batch * ho * wo * c, T(0));
  auto v = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        const T* src = v.data() + ((b * h + y) * w + xx) * c;
        T* dst = out.data() + ((b * ho + y / 2) * wo + xx / 2) * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] += T(0.25) * src[j];
      }
  return finish<T>({batch, ho, wo, c}, std::move(out), {&x}, [batch, h, w, c, ho, wo](Impl<T>& o) {
    auto& px = parent(o, 0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          const T* src = o.grad.data() + ((b * ho + y / 2) * wo + xx / 2) * c;
          T* dst = px.grad.data() + ((b * h + y) * w + xx) * c;
          for (std::size_t j = 0; j < c; ++j) dst[j] += T(0.25) * src[j];
        }
  });
}

template <typename T>
Tensor<T> upsample2(const Tensor<T>& x) {
  require(x.rank() == 4, "upsample2: need [B,H,W,C], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::size_t ho = h * 2, wo = w * 2;
  std::vector<T> out(batch * ho * wo * c);
  auto v = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx) {
        const T* src = v.data() + ((b * h + y / 2) * w + xx / 2) * c;
        std::copy(src, src + c, out.data() + ((b * ho + y) * wo + xx) * c);
      }
  return finish<T>({batch, ho, wo, c}, std::move(out), {&x}, [batch, h, w, c, ho, wo](Impl<T>& o) {
    auto& px = parent(o, 0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xx = 0; xx < wo; ++xx) {
          const T* src = o.grad.data() + ((b * ho + y) * wo + xx) * c;
          T* dst = px.grad.data() + ((b * h + y / 2) * w + xx / 2) * c;
          for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
        }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return finish<T>(std::move(shape), std::move(out), {&x}, [](Impl<T>& o) {
    auto& px = parent(o, 0);
    for (std::size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return finish<T>({1}, {total}, {&x}, [](Impl<T>& o) {
    auto& px = parent(o, 0);
    for (auto& g : px.grad) g += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  require(x.numel() > 0, "mean: empty tensor");
  const T n = static_cast<T>(x.numel());
  T total = 0;
  for (T v : x.data()) total += v;
  return finish<T>({1}, {total / n}, {&x}, [n](Impl<T>& o) {
    auto& px = parent(o, 0);
    for (auto& g : px.grad) g += o.grad[0] / n;
  });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& prediction, const Tensor<T>& target) {
  require_same(prediction, target, "mse");
  require(prediction.numel() > 0, "mse: empty tensor");
  const T n = static_cast<T>(prediction.numel());
  auto p = prediction.data(), t = target.data();
  T total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] - t[i]) * (p[i] - t[i]);
  return finish<T>({1}, {total / n}, {&prediction, &target}, [n](Impl<T>& o) {
    auto& pp = parent(o, 0);
    auto& pt = parent(o, 1);
    const T g = T(2) * o.grad[0] / n;
    for (std::size_t i = 0; i < pp.data.size(); ++i) {
      const T d = g * (pp.data[i] - pt.data[i]);
      if (pp.requires_grad) pp.grad[i] += d;
      if (pt.requires_grad) pt.grad[i] -= d;
    }
  });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> indices) {
  require(table.rank() == 2, "embedding: table must be [V,d], got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> idx(indices.begin(), indices.end());
  std::vector<T> out(idx.size() * d);
  auto tv = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab)
      throw ContractError("embedding: index " + std::to_string(idx[i]) + " outside vocabulary of " +
                          std::to_string(vocab));
    std::copy_n(tv.data() + idx[i] * d, d, out.data() + i * d);
  }
  return finish<T>({idx.size(), d}, std::move(out), {&table}, [idx, d](Impl<T>& o) {
    auto& pt = parent(o, 0);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) pt.grad[idx[i] * d + j] += o.grad[i * d + j];
  });
}

template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                              std::span<const std::size_t> key_lengths) {
  require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3,
          "attention: need rank-3 q,k,v, got " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
              shape_str(v.shape()));
  const std::size_t batch = q.dim(0), n = q.dim(1), dq = q.dim(2);
  const std::size_t m = k.dim(1), dv = v.dim(2);
  require(k.dim(0) == batch && v.dim(0) == batch && k.dim(2) == dq && v.dim(1) == m,
          "attention: incompatible q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
              shape_str(v.shape()));
  if (heads == 0 || dq % heads != 0 || dv % heads != 0)
    throw ContractError("attention: widths " + std::to_string(dq) + "/" + std::to_string(dv) +
                        " not divisible by heads=" + std::to_string(heads));
  if (!key_lengths.empty() && key_lengths.size() != batch)
    throw DimensionError("attention: key_lengths has " + std::to_string(key_lengths.size()) + " entries for batch " +
                         std::to_string(batch));
  std::vector<std::size_t> lengths(batch, m);
  for (std::size_t b = 0; b < key_lengths.size(); ++b) {
    if (key_lengths[b] == 0 || key_lengths[b] > m)
      throw ContractError("attention: key length " + std::to_string(key_lengths[b]) + " outside [1," +
                          std::to_string(m) + "]");
    lengths[b] = key_lengths[b];
  }
  const std::size_t dh = dq / heads, dvh = dv / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  // probs[b*heads + h] is n x lengths[b]
  auto probs = std::make_shared<std::vector<std::vector<T>>>(batch * heads);
  std::vector<T> out(batch * n * dv);
  auto qd = q.data(), kd = k.data(), vd = v.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t mb = lengths[b];
    for (std::size_t h = 0; h < heads; ++h) {
      CStridedMap<T> qm(qd.data() + b * n * dq + h * dh, n, dh, Eigen::OuterStride<>(dq));
      CStridedMap<T> km(kd.data() + b * m * dq + h * dh, mb, dh, Eigen::OuterStride<>(dq));
      CStridedMap<T> vm(vd.data() + b * m * dv + h * dvh, mb, dvh, Eigen::OuterStride<>(dv));
      auto& p = (*probs)[b * heads + h];
      p.resize(n * mb);
      MapMat<T> pm(p.data(), n, mb);
      pm.noalias() = (qm * km.transpose()) * inv_sqrt;
      for (std::size_t r = 0; r < n; ++r) {
        T* row = p.data() + r * mb;
        const T mx = *std::max_element(row, row + mb);
        T total = 0;
        for (std::size_t j = 0; j < mb; ++j) total += (row[j] = std::exp(row[j] - mx));
        const T inv = T(1) / total;
        for (std::size_t j = 0; j < mb; ++j) row[j] *= inv;
      }
      StridedMap<T> om(out.data() + b * n * dv + h * dvh, n, dvh, Eigen::OuterStride<>(dv));
      om.noalias() = pm * vm;
    }
  }
  return finish<T>({batch, n, dv}, std::move(out), {&q, &k, &v},
                   [batch, n, m, dq, dv, dh, dvh, heads, lengths, inv_sqrt, probs](Impl<T>& o) {
                     auto& pq = parent(o, 0);
                     auto& pk = parent(o, 1);
                     auto& pv = parent(o, 2);
                     std::vector<T> ds;
                     for (std::size_t b = 0; b < batch; ++b) {
                       const std::size_t mb = lengths[b];
                       for (std::size_t h = 0; h < heads; ++h) {
                         CMapMat<T> pm((*probs)[b * heads + h].data(), n, mb);
                         CStridedMap<T> dom(o.grad.data() + b * n * dv + h * dvh, n, dvh, Eigen::OuterStride<>(dv));
                         CStridedMap<T> qm(pq.data.data() + b * n * dq + h * dh, n, dh, Eigen::OuterStride<>(dq));
                         CStridedMap<T> km(pk.data.data() + b * m * dq + h * dh, mb, dh, Eigen::OuterStride<>(dq));
                         CStridedMap<T> vm(pv.data.data() + b * m * dv + h * dvh, mb, dvh, Eigen::OuterStride<>(dv));
                         if (pv.requires_grad) {
                           StridedMap<T> dvm(pv.grad.data() + b * m * dv + h * dvh, mb, dvh, Eigen::OuterStride<>(dv));
                           dvm.noalias() += pm.transpose() * dom;
                         }
                         if (!pq.requires_grad && !pk.requires_grad) continue;
                         ds.resize(n * mb);
                         MapMat<T> dsm(ds.data(), n, mb);
                         dsm.noalias() = dom * vm.transpose();
                         for (std::size_t r = 0; r < n; ++r) {
                           T* row = ds.data() + r * mb;
                           const T* pr = pm.data() + r * mb;
                           T dot = 0;
                           for (std::size_t j = 0; j < mb; ++j) dot += row[j] * pr[j];
                           for (std::size_t j = 0; j < mb; ++j) row[j] = pr[j] * (row[j] - dot) * inv_sqrt;
                         }
                         if (pq.requires_grad) {
                           StridedMap<T> dqm(pq.grad.data() + b * n * dq + h * dh, n, dh, Eigen::OuterStride<>(dq));
                           dqm.noalias() += dsm * km;
                         }
                         if (pk.requires_grad) {
                           StridedMap<T> dkm(pk.grad.data() + b * m * dq + h * dh, mb, dh, Eigen::OuterStride<>(dq));
                           dkm.noalias() += dsm.transpose() * qm;
                         }
                       }
                     }
                   });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2,
          "attention: need matrices, got " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
              shape_str(v.shape()));
  require(q.dim(1) == k.dim(1) && k.dim(0) == v.dim(0),
          "attention: incompatible q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
              shape_str(v.shape()));
  auto q3 = reshape(q, {1, q.dim(0), q.dim(1)});
  auto k3 = reshape(k, {1, k.dim(0), k.dim(1)});
  auto v3 = reshape(v, {1, v.dim(0), v.dim(1)});
  auto o = multihead_attention(q3, k3, v3, 1);
  return reshape(o, {q.dim(0), v.dim(1)});
}

#define APA_INSTANTIATE(T)                                                                                      \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                                \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> add_per_example(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> silu(const Tensor<T>&);                                                                    \
  template Tensor<T> softmax(const Tensor<T>&, int);                                                            \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                       \
  template Tensor<T> conv3x3(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> avg_pool2(const Tensor<T>&);                                                               \
  template Tensor<T> upsample2(const Tensor<T>&);                                                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                          \
  template Tensor<T> sum(const Tensor<T>&);                                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                                    \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                                         \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> multihead_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,     \
                                         std::span<const std::size_t>);

APA_INSTANTIATE(float)
APA_INSTANTIATE(double)

}  // namespace apa::num
