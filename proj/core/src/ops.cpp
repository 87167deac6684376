#include "tubelet/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace tubelet {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

int conv_output_size(int in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Batch-aware view of a C x H x W or N x C x H x W shape.
struct MapShape {
  int n, c, h, w;
  bool batched;
};

MapShape map_shape(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  throw std::invalid_argument(std::string(op) + ": expected C x H x W or N x C x H x W input, got " +
                              shape_str(s));
}

Shape make_map_shape(const MapShape& m, int c, int h, int w) {
  if (m.batched) return {m.n, c, h, w};
  return {c, h, w};
}

struct ConvGeom {
  MapShape in;
  int cout, k, ho, wo, stride, pad;
  int rows() const { return in.c * k * k; }
  int cols() const { return in.n * ho * wo; }
};

ConvGeom conv_geom(const Shape& input, const Shape& weight, const Shape& bias, int stride, int padding) {
  MapShape in = map_shape(input, "conv2d");
  require(weight.size() == 4, "conv2d: weight must be C_out x C_in x k x k, got " + shape_str(weight));
  require(weight[2] == weight[3], "conv2d: kernel must be square");
  require(weight[1] == in.c, "conv2d: input has " + std::to_string(in.c) + " channels but weight expects " +
                                 std::to_string(weight[1]));
  require(bias.size() == 1 && bias[0] == weight[0], "conv2d: bias length must equal C_out");
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(padding >= 0, "conv2d: padding must be >= 0");
  const int k = weight[2];
  require(in.h + 2 * padding >= k && in.w + 2 * padding >= k, "conv2d: kernel larger than padded input");
  return {in, weight[0], k, conv_output_size(in.h, k, stride, padding), conv_output_size(in.w, k, stride, padding),
          stride, padding};
}

// Output columns [lo, hi) whose input column for kernel offset kj lies
// inside the map.
std::pair<int, int> valid_columns(const ConvGeom& g, int kj) {
  const int first = kj - g.pad;  // input column of output column 0
  const int lo = first >= 0 ? 0 : (-first + g.stride - 1) / g.stride;
  const int last = g.in.w - 1 - first;
  const int hi = last < 0 ? 0 : std::min(g.wo, last / g.stride + 1);
  return {lo, std::max(lo, hi)};
}

// cols holds N blocks, each (C*k*k) x (Ho*Wo) row-major, one per sample.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const int plane = g.ho * g.wo;
  for (int n = 0; n < g.in.n; ++n) {
    const T* xs = x + static_cast<std::size_t>(n) * g.in.c * g.in.h * g.in.w;
    T* block = cols + static_cast<std::size_t>(n) * g.rows() * plane;
    for (int c = 0; c < g.in.c; ++c) {
      for (int ki = 0; ki < g.k; ++ki) {
        for (int kj = 0; kj < g.k; ++kj) {
          T* row = block + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * plane;
          const auto [ox_lo, ox_hi] = valid_columns(g, kj);
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ki;
            T* out = row + oy * g.wo;
            if (iy < 0 || iy >= g.in.h) {
              std::fill(out, out + g.wo, T{0});
              continue;
            }
            const T* src = xs + (static_cast<std::size_t>(c) * g.in.h + iy) * g.in.w - g.pad + kj;
            std::fill(out, out + ox_lo, T{0});
            if (g.stride == 1) {
              std::copy(src + ox_lo, src + ox_hi, out + ox_lo);
            } else {
              for (int ox = ox_lo; ox < ox_hi; ++ox) out[ox] = src[ox * g.stride];
            }
            std::fill(out + ox_hi, out + g.wo, T{0});
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeom& g, int n, T* dx) {
  const int plane = g.ho * g.wo;
  T* xs = dx + static_cast<std::size_t>(n) * g.in.c * g.in.h * g.in.w;
  for (int c = 0; c < g.in.c; ++c) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const T* row = cols + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * plane;
        const auto [ox_lo, ox_hi] = valid_columns(g, kj);
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.in.h) continue;
          T* dst = xs + (static_cast<std::size_t>(c) * g.in.h + iy) * g.in.w - g.pad + kj;
          const T* src = row + oy * g.wo;
          for (int ox = ox_lo; ox < ox_hi; ++ox) dst[ox * g.stride] += src[ox];
        }
      }
    }
  }
}

template <typename T>
std::shared_ptr<T[]> make_cols(const T* x, const ConvGeom& geom) {
  // Every entry is written by im2col, so the buffer is left uninitialized.
  AlignedAllocator<T> alloc;
  const std::size_t n = static_cast<std::size_t>(geom.rows()) * geom.cols();
  std::shared_ptr<T[]> cols(alloc.allocate(n), [alloc, n](T* p) mutable { alloc.deallocate(p, n); });
  im2col(x, geom, cols.get());
  return cols;
}

template <typename T>
BasicTensor<T> conv_from_cols(const T* cols, const ConvGeom& geom, const BasicTensor<T>& weight,
                              const BasicTensor<T>& bias) {
  const int plane = geom.ho * geom.wo;
  CMapMat<T> w(weight.data().data(), geom.cout, geom.rows());
  BasicTensor<T> out(make_map_shape(geom.in, geom.cout, geom.ho, geom.wo));
  for (int n = 0; n < geom.in.n; ++n) {
    CMapMat<T> c(cols + static_cast<std::size_t>(n) * geom.rows() * plane, geom.rows(), plane);
    MapMat<T> y(out.data().data() + static_cast<std::size_t>(n) * geom.cout * plane, geom.cout, plane);
    y.noalias() = w * c;
    for (int co = 0; co < geom.cout; ++co) y.row(co).array() += bias[co];
  }
  return out;
}

template <typename T>
void accumulate(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                              const BasicTensor<T>& bias, int stride, int padding) {
  const ConvGeom geom = conv_geom(input.shape(), weight.shape(), bias.shape(), stride, padding);
  const auto cols = make_cols(input.data().data(), geom);
  return conv_from_cols(cols.get(), geom, weight, bias);
}

template <typename T>
BasicTensor<T> leaky_relu_forward(const BasicTensor<T>& x, T slope) {
  BasicTensor<T> y = x;
  for (auto& v : y.data()) v = v > T{0} ? v : v * slope;
  return y;
}

template <typename T>
Var conv2d(Graph<T>& g, Var input, Var weight, Var bias, int stride, int padding) {
  const auto& x = g.value(input);
  const auto& w = g.value(weight);
  const auto& b = g.value(bias);
  const ConvGeom geom = conv_geom(x.shape(), w.shape(), b.shape(), stride, padding);
  std::shared_ptr<T[]> cols = make_cols(x.data().data(), geom);
  BasicTensor<T> y = conv_from_cols(cols.get(), geom, w, b);
  const std::size_t xi = input.id, wi = weight.id, bi = bias.id;
  return g.record(
      std::move(y), {xi, wi, bi},
      [geom, cols, xi, wi, bi](Graph<T>& g, std::size_t self) {
        const int plane = geom.ho * geom.wo;
        const auto& gy = g.grad_buffer(self);
        const bool dw_needed = g.needs_grad(wi), db_needed = g.needs_grad(bi), dx_needed = g.needs_grad(xi);
        RowMat<T> dcols;
        if (dx_needed) dcols.resize(geom.rows(), plane);
        for (int n = 0; n < geom.in.n; ++n) {
          CMapMat<T> gmat(gy.data().data() + static_cast<std::size_t>(n) * geom.cout * plane, geom.cout, plane);
          if (dw_needed) {
            CMapMat<T> c(cols.get() + static_cast<std::size_t>(n) * geom.rows() * plane, geom.rows(), plane);
            MapMat<T> dw(g.grad_buffer(wi).data().data(), geom.cout, geom.rows());
            dw.noalias() += gmat * c.transpose();
          }
          if (db_needed) {
            auto& db = g.grad_buffer(bi);
            for (int co = 0; co < geom.cout; ++co) db[co] += gmat.row(co).sum();
          }
          if (dx_needed) {
            CMapMat<T> w(g.value_of(wi).data().data(), geom.cout, geom.rows());
            dcols.noalias() = w.transpose() * gmat;
            col2im(dcols.data(), geom, n, g.grad_buffer(xi).data().data());
          }
        }
      },
      "conv2d");
}

template <typename T>
Var max_pool2d(Graph<T>& g, Var input, int window, int stride) {
  const auto& x = g.value(input);
  const MapShape m = map_shape(x.shape(), "max_pool2d");
  require(window >= 1 && stride >= 1, "max_pool2d: window and stride must be >= 1");
  require(window <= m.h && window <= m.w,
          "max_pool2d: window " + std::to_string(window) + " exceeds spatial extent " + shape_str(x.shape()));
  const int ho = (m.h - window) / stride + 1;
  const int wo = (m.w - window) / stride + 1;
  BasicTensor<T> y(make_map_shape(m, m.c, ho, wo));
  auto argmax = std::make_shared<std::vector<std::size_t>>(y.numel());
  std::size_t o = 0;
  for (int p = 0; p < m.n * m.c; ++p) {
    const std::size_t base = static_cast<std::size_t>(p) * m.h * m.w;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox, ++o) {
        std::size_t best = base + static_cast<std::size_t>(oy * stride) * m.w + ox * stride;
        for (int i = 0; i < window; ++i)
          for (int j = 0; j < window; ++j) {
            const std::size_t idx = base + static_cast<std::size_t>(oy * stride + i) * m.w + ox * stride + j;
            if (x[idx] > x[best]) best = idx;
          }
        y[o] = x[best];
        (*argmax)[o] = best;
      }
    }
  }
  const std::size_t xi = input.id;
  return g.record(
      std::move(y), {xi},
      [argmax, xi](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_buffer(self);
        auto& dx = g.grad_buffer(xi);
        for (std::size_t i = 0; i < argmax->size(); ++i) dx[(*argmax)[i]] += gy[i];
      },
      "max_pool2d");
}

template <typename T>
Var adaptive_max_pool2d(Graph<T>& g, Var input) {
  const auto& x = g.value(input);
  const MapShape m = map_shape(x.shape(), "adaptive_max_pool2d");
  BasicTensor<T> y(make_map_shape(m, m.c, 1, 1));
  auto argmax = std::make_shared<std::vector<std::size_t>>(y.numel());
  const std::size_t plane = static_cast<std::size_t>(m.h) * m.w;
  for (std::size_t p = 0; p < y.numel(); ++p) {
    std::size_t best = p * plane;
    for (std::size_t i = p * plane; i < (p + 1) * plane; ++i)
      if (x[i] > x[best]) best = i;
    y[p] = x[best];
    (*argmax)[p] = best;
  }
  const std::size_t xi = input.id;
  return g.record(
      std::move(y), {xi},
      [argmax, xi](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_buffer(self);
        auto& dx = g.grad_buffer(xi);
        for (std::size_t i = 0; i < argmax->size(); ++i) dx[(*argmax)[i]] += gy[i];
      },
      "adaptive_max_pool2d");
}

template <typename T>
Var fully_connected(Graph<T>& g, Var input, Var weight, Var bias) {
  const auto& x = g.value(input);
  const auto& w = g.value(weight);
  const auto& b = g.value(bias);
  require(w.rank() == 2, "fully_connected: weight must be M x N, got " + shape_str(w.shape()));
  const int mdim = w.dim(0), ndim = w.dim(1);
  require(b.rank() == 1 && b.dim(0) == mdim, "fully_connected: bias length must equal M");
  int batch = 0;
  Shape out_shape;
  if (x.rank() == 1) {
    require(x.dim(0) == ndim, "fully_connected: input length " + std::to_string(x.dim(0)) +
                                  " does not match weight columns " + std::to_string(ndim));
    batch = 1;
    out_shape = {mdim};
  } else if (x.rank() == 2) {
    require(x.dim(1) == ndim, "fully_connected: input width " + std::to_string(x.dim(1)) +
                                  " does not match weight columns " + std::to_string(ndim));
    batch = x.dim(0);
    out_shape = {batch, mdim};
  } else {
    throw std::invalid_argument("fully_connected: input must be N or B x N, got " + shape_str(x.shape()));
  }
  BasicTensor<T> y(out_shape);
  {
    CMapMat<T> xm(x.data().data(), batch, ndim);
    CMapMat<T> wm(w.data().data(), mdim, ndim);
    MapMat<T> ym(y.data().data(), batch, mdim);
    ym.noalias() = xm * wm.transpose();
    for (int r = 0; r < batch; ++r)
      for (int c = 0; c < mdim; ++c) ym(r, c) += b[c];
  }
  const std::size_t xi = input.id, wi = weight.id, bi = bias.id;
  return g.record(
      std::move(y), {xi, wi, bi},
      [xi, wi, bi, batch, mdim, ndim](Graph<T>& g, std::size_t self) {
        CMapMat<T> gy(g.grad_buffer(self).data().data(), batch, mdim);
        if (g.needs_grad(wi)) {
          CMapMat<T> xm(g.value_of(xi).data().data(), batch, ndim);
          MapMat<T> dw(g.grad_buffer(wi).data().data(), mdim, ndim);
          dw.noalias() += gy.transpose() * xm;
        }
        if (g.needs_grad(bi)) {
          auto& db = g.grad_buffer(bi);
          for (int r = 0; r < batch; ++r)
            for (int c = 0; c < mdim; ++c) db[c] += gy(r, c);
        }
        if (g.needs_grad(xi)) {
          CMapMat<T> wm(g.value_of(wi).data().data(), mdim, ndim);
          MapMat<T> dx(g.grad_buffer(xi).data().data(), batch, ndim);
          dx.noalias() += gy * wm;
        }
      },
      "fully_connected");
}

template <typename T>
Var leaky_relu(Graph<T>& g, Var x, double slope) {
  const T s = static_cast<T>(slope);
  BasicTensor<T> y = leaky_relu_forward(g.value(x), s);
  const std::size_t xi = x.id;
  return g.record(
      std::move(y), {xi},
      [xi, s](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_buffer(self);
        const auto& xv = g.value_of(xi);
        auto& dx = g.grad_buffer(xi);
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += xv[i] > T{0} ? gy[i] : gy[i] * s;
      },
      "leaky_relu");
}

template <typename T>
Var sigmoid(Graph<T>& g, Var x) {
  BasicTensor<T> y = g.value(x);
  for (auto& v : y.data()) v = T{1} / (T{1} + std::exp(-v));
  const std::size_t xi = x.id;
  return g.record(
      std::move(y), {xi},
      [xi](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_buffer(self);
        const auto& yv = g.value_of(self);
        auto& dx = g.grad_buffer(xi);
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += gy[i] * yv[i] * (T{1} - yv[i]);
      },
      "sigmoid");
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  require(av.shape() == bv.shape(), "add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  BasicTensor<T> y = av;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return g.record(
      std::move(y), {ai, bi},
      [ai, bi](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_buffer(self);
        if (g.needs_grad(ai)) accumulate(g.grad_buffer(ai), gy);
        if (g.needs_grad(bi)) accumulate(g.grad_buffer(bi), gy);
      },
      "add");
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  require(av.shape() == bv.shape(), "mul: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  BasicTensor<T> y = av;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return g.record(
      std::move(y), {ai, bi},
      [ai, bi](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_buffer(self);
        if (g.needs_grad(ai)) {
          const auto& bv = g.value_of(bi);
          auto& da = g.grad_buffer(ai);
          for (std::size_t i = 0; i < da.numel(); ++i) da[i] += gy[i] * bv[i];
        }
        if (g.needs_grad(bi)) {
          const auto& av = g.value_of(ai);
          auto& db = g.grad_buffer(bi);
          for (std::size_t i = 0; i < db.numel(); ++i) db[i] += gy[i] * av[i];
        }
      },
      "mul");
}

template <typename T>
Var scale(Graph<T>& g, Var x, double factor) {
  const T f = static_cast<T>(factor);
  BasicTensor<T> y = g.value(x);
  for (auto& v : y.data()) v *= f;
  const std::size_t xi = x.id;
  return g.record(
      std::move(y), {xi},
      [xi, f](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_buffer(self);
        auto& dx = g.grad_buffer(xi);
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += gy[i] * f;
      },
      "scale");
}

template <typename T>
Var affine_rows(Graph<T>& g, Var a, Var s, Var b) {
  const auto& av = g.value(a);
  const auto& sv = g.value(s);
  const auto& bv = g.value(b);
  require(av.rank() == 2, "affine_rows: input must be B x C, got " + shape_str(av.shape()));
  const int rows = av.dim(0), cols = av.dim(1);
  require(sv.numel() == static_cast<std::size_t>(cols) && bv.numel() == static_cast<std::size_t>(cols),
          "affine_rows: scale and shift must have length " + std::to_string(cols));
  BasicTensor<T> y(av.shape());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) y[r * cols + c] = av[r * cols + c] * sv[c] + bv[c];
  const std::size_t ai = a.id, si = s.id, bi = b.id;
  return g.record(
      std::move(y), {ai, si, bi},
      [ai, si, bi, rows, cols](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_buffer(self);
        const auto& av = g.value_of(ai);
        const auto& sv = g.value_of(si);
        if (g.needs_grad(ai)) {
          auto& da = g.grad_buffer(ai);
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) da[r * cols + c] += gy[r * cols + c] * sv[c];
        }
        if (g.needs_grad(si)) {
          auto& ds = g.grad_buffer(si);
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) ds[c] += gy[r * cols + c] * av[r * cols + c];
        }
        if (g.needs_grad(bi)) {
          auto& db = g.grad_buffer(bi);
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) db[c] += gy[r * cols + c];
        }
      },
      "affine_rows");
}

template <typename T>
Var scale_channels(Graph<T>& g, Var x, Var gate) {
  const auto& xv = g.value(x);
  const auto& gv = g.value(gate);
  const MapShape m = map_shape(xv.shape(), "scale_channels");
  require(gv.numel() == static_cast<std::size_t>(m.n) * m.c,
          "scale_channels: gate has " + std::to_string(gv.numel()) + " entries, expected " +
              std::to_string(m.n * m.c));
  const std::size_t plane = static_cast<std::size_t>(m.h) * m.w;
  BasicTensor<T> y(xv.shape());
  for (std::size_t p = 0; p < gv.numel(); ++p)
    for (std::size_t i = p * plane; i < (p + 1) * plane; ++i) y[i] = xv[i] * gv[p];
  const std::size_t xi = x.id, gi = gate.id;
  return g.record(
      std::move(y), {xi, gi},
      [xi, gi, plane](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_buffer(self);
        const auto& xv = g.value_of(xi);
        const auto& gv = g.value_of(gi);
        if (g.needs_grad(xi)) {
          auto& dx = g.grad_buffer(xi);
          for (std::size_t p = 0; p < gv.numel(); ++p)
            for (std::size_t i = p * plane; i < (p + 1) * plane; ++i) dx[i] += gy[i] * gv[p];
        }
        if (g.needs_grad(gi)) {
          auto& dg = g.grad_buffer(gi);
          for (std::size_t p = 0; p < gv.numel(); ++p) {
            T acc{0};
            for (std::size_t i = p * plane; i < (p + 1) * plane; ++i) acc += gy[i] * xv[i];
            dg[p] += acc;
          }
        }
      },
      "scale_channels");
}

template <typename T>
Var reshape(Graph<T>& g, Var x, Shape shape) {
  BasicTensor<T> y = g.value(x).reshaped(std::move(shape));
  const std::size_t xi = x.id;
  return g.record(
      std::move(y), {xi},
      [xi](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_buffer(self);
        auto& dx = g.grad_buffer(xi);
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += gy[i];
      },
      "reshape");
}

template <typename T>
Var slice(Graph<T>& g, Var x, int begin, int length) {
  const auto& xv = g.value(x);
  require(begin >= 0 && length > 0 && static_cast<std::size_t>(begin + length) <= xv.numel(),
          "slice: range [" + std::to_string(begin) + ", " + std::to_string(begin + length) +
              ") out of bounds for " + shape_str(xv.shape()));
  AlignedVector<T> out(xv.data().begin() + begin, xv.data().begin() + begin + length);
  const std::size_t xi = x.id;
  return g.record(
      BasicTensor<T>(Shape{length}, std::move(out)), {xi},
      [xi, begin, length](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_buffer(self);
        auto& dx = g.grad_buffer(xi);
        for (int i = 0; i < length; ++i) dx[begin + i] += gy[i];
      },
      "slice");
}

template <typename T>
Var concat(Graph<T>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  AlignedVector<T> out(av.data().begin(), av.data().end());
  out.insert(out.end(), bv.data().begin(), bv.data().end());
  const int na = static_cast<int>(av.numel());
  const int n = static_cast<int>(out.size());
  const std::size_t ai = a.id, bi = b.id;
  return g.record(
      BasicTensor<T>(Shape{n}, std::move(out)), {ai, bi},
      [ai, bi, na](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_buffer(self);
        if (g.needs_grad(ai)) {
          auto& da = g.grad_buffer(ai);
          for (std::size_t i = 0; i < da.numel(); ++i) da[i] += gy[i];
        }
        if (g.needs_grad(bi)) {
          auto& db = g.grad_buffer(bi);
          for (std::size_t i = 0; i < db.numel(); ++i) db[i] += gy[na + i];
        }
      },
      "concat");
}

template <typename T>
Var max_rows(Graph<T>& g, Var x) {
  const auto& xv = g.value(x);
  require(xv.rank() == 2, "max_rows: input must be B x D, got " + shape_str(xv.shape()));
  const int rows = xv.dim(0), cols = xv.dim(1);
  BasicTensor<T> y(Shape{cols});
  auto argmax = std::make_shared<std::vector<int>>(cols, 0);
  for (int c = 0; c < cols; ++c) {
    int best = 0;
    for (int r = 1; r < rows; ++r)
      if (xv[r * cols + c] > xv[best * cols + c]) best = r;
    (*argmax)[c] = best;
    y[c] = xv[best * cols + c];
  }
  const std::size_t xi = x.id;
  return g.record(
      std::move(y), {xi},
      [xi, argmax, cols](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_buffer(self);
        auto& dx = g.grad_buffer(xi);
        for (int c = 0; c < cols; ++c) dx[(*argmax)[c] * cols + c] += gy[c];
      },
      "max_rows");
}

template <typename T>
Var sum(Graph<T>& g, Var x) {
  const auto& xv = g.value(x);
  T acc{0};
  for (T v : xv.data()) acc += v;
  const std::size_t xi = x.id;
  return g.record(
      BasicTensor<T>::scalar(acc), {xi},
      [xi](Graph<T>& g, std::size_t self) {
        const T gy = g.grad_buffer(self)[0];
        for (auto& v : g.grad_buffer(xi).data()) v += gy;
      },
      "sum");
}

template <typename T>
Var mean(Graph<T>& g, Var x) {
  const double n = static_cast<double>(g.value(x).numel());
  return scale(g, sum(g, x), 1.0 / n);
}

template <typename T>
Var sigmoid_bce(Graph<T>& g, Var logits, std::span<const int> labels) {
  const auto& z = g.value(logits);
  require(labels.size() == z.numel(), "sigmoid_bce: " + std::to_string(labels.size()) + " labels for " +
                                          std::to_string(z.numel()) + " logits");
  for (int l : labels) require(l == 0 || l == 1, "sigmoid_bce: labels must be 0 or 1, got " + std::to_string(l));
  BasicTensor<T> y(z.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) {
    const double zi = static_cast<double>(z[i]);
    y[i] = static_cast<T>(labels[i] ? softplus(-zi) : softplus(zi));
  }
  std::vector<int> lab(labels.begin(), labels.end());
  const std::size_t zi = logits.id;
  return g.record(
      std::move(y), {zi},
      [zi, lab = std::move(lab)](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_buffer(self);
        const auto& z = g.value_of(zi);
        auto& dz = g.grad_buffer(zi);
        for (std::size_t i = 0; i < dz.numel(); ++i) {
          const T p = T{1} / (T{1} + std::exp(-z[i]));
          dz[i] += gy[i] * (p - static_cast<T>(lab[i]));
        }
      },
      "sigmoid_bce");
}

#define TUBELET_INSTANTIATE_OPS(T)                                                                        \
  template BasicTensor<T> conv2d_forward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                         int, int);                                                        \
  template BasicTensor<T> leaky_relu_forward(const BasicTensor<T>&, T);                                   \
  template Var conv2d(Graph<T>&, Var, Var, Var, int, int);                                                \
  template Var max_pool2d(Graph<T>&, Var, int, int);                                                      \
  template Var adaptive_max_pool2d(Graph<T>&, Var);                                                       \
  template Var fully_connected(Graph<T>&, Var, Var, Var);                                                 \
  template Var leaky_relu(Graph<T>&, Var, double);                                                        \
  template Var sigmoid(Graph<T>&, Var);                                                                   \
  template Var add(Graph<T>&, Var, Var);                                                                  \
  template Var mul(Graph<T>&, Var, Var);                                                                  \
  template Var scale(Graph<T>&, Var, double);                                                             \
  template Var affine_rows(Graph<T>&, Var, Var, Var);                                                     \
  template Var scale_channels(Graph<T>&, Var, Var);                                                       \
  template Var reshape(Graph<T>&, Var, Shape);                                                            \
  template Var slice(Graph<T>&, Var, int, int);                                                           \
  template Var concat(Graph<T>&, Var, Var);                                                               \
  template Var max_rows(Graph<T>&, Var);                                                                  \
  template Var mean(Graph<T>&, Var);                                                                      \
  template Var sum(Graph<T>&, Var);                                                                       \
  template Var sigmoid_bce(Graph<T>&, Var, std::span<const int>);

TUBELET_INSTANTIATE_OPS(float)
TUBELET_INSTANTIATE_OPS(double)

#undef TUBELET_INSTANTIATE_OPS

}  // namespace tubelet
