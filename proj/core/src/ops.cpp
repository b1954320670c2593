#include "sartm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>

SARTM_NS_BEGIN

namespace {

bool should_record(std::initializer_list<const Tensor*> inputs) {
  return autograd_recording(inputs);
}

void mark_recorded(Tensor& out, std::function<void()> backward) {
  autograd_record(out, std::move(backward));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

std::vector<int64_t> row_major_strides(const Shape& shape) {
  std::vector<int64_t> strides(shape.size());
  int64_t acc = 1;
  for (size_t i = shape.size(); i-- > 0;) {
    strides[i] = acc;
    acc *= shape[i];
  }
  return strides;
}

// C[m,n] += A[m,k] * B[k,n], all row-major contiguous.
void gemm_acc(const Scalar* a, const Scalar* b, Scalar* c, int64_t m, int64_t k,
              int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const Scalar* arow = a + i * k;
    Scalar* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      Scalar av = arow[p];
      if (av == Scalar(0)) continue;
      const Scalar* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[m,k] += G[m,n] * B[k,n]^T
void gemm_grad_a(const Scalar* g, const Scalar* b, Scalar* da, int64_t m,
                 int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const Scalar* grow = g + i * n;
    Scalar* darow = da + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const Scalar* brow = b + p * n;
      Scalar acc = 0;
      for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      darow[p] += acc;
    }
  }
}

// dB[k,n] += A[m,k]^T * G[m,n]
void gemm_grad_b(const Scalar* a, const Scalar* g, Scalar* db, int64_t m,
                 int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const Scalar* arow = a + i * k;
    const Scalar* grow = g + i * n;
    for (int64_t p = 0; p < k; ++p) {
      Scalar av = arow[p];
      if (av == Scalar(0)) continue;
      Scalar* dbrow = db + p * n;
      for (int64_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (should_record({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    mark_recorded(out, [ai, bi, oi] {
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        auto& ga = ai->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (should_record({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    mark_recorded(out, [ai, bi, oi] {
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        auto& ga = ai->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (should_record({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    mark_recorded(out, [ai, bi, oi] {
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        auto& ga = ai->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
      }
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, Scalar c) {
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
  if (should_record({&a})) {
    auto ai = a.impl(), oi = out.impl();
    mark_recorded(out, [ai, oi] {
      const auto& g = oi->grad;
      auto& ga = ai->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

Tensor mul_scalar(const Tensor& a, Scalar c) {
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  if (should_record({&a})) {
    auto ai = a.impl(), oi = out.impl();
    mark_recorded(out, [ai, oi, c] {
      const auto& g = oi->grad;
      auto& ga = ai->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

Tensor mul_scalar_tensor(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) {
    throw ShapeError("mul_scalar_tensor: scale has shape " + shape_str(s.shape()));
  }
  Tensor out = Tensor::zeros(x.shape());
  const Scalar sv = s.data()[0];
  const auto& xv = x.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * sv;
  if (should_record({&x, &s})) {
    auto xi = x.impl(), si = s.impl(), oi = out.impl();
    mark_recorded(out, [xi, si, oi] {
      const auto& g = oi->grad;
      if (xi->requires_grad) {
        auto& gx = xi->ensure_grad();
        const Scalar sv = si->data[0];
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv;
      }
      if (si->requires_grad) {
        double acc = 0;
        for (size_t i = 0; i < g.size(); ++i)
          acc += static_cast<double>(g[i]) * xi->data[i];
        si->ensure_grad()[0] += static_cast<Scalar>(acc);
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0 ? xv[i] : Scalar(0);
  if (should_record({&x})) {
    auto xi = x.impl(), oi = out.impl();
    mark_recorded(out, [xi, oi] {
      const auto& g = oi->grad;
      auto& gx = xi->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i)
        if (xi->data[i] > 0) gx[i] += g[i];
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data_mut();
  constexpr double kInvSqrt2 = 0.7071067811865476;
  for (size_t i = 0; i < ov.size(); ++i) {
    double v = xv[i];
    ov[i] = static_cast<Scalar>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
  if (should_record({&x})) {
    auto xi = x.impl(), oi = out.impl();
    mark_recorded(out, [xi, oi] {
      const auto& g = oi->grad;
      auto& gx = xi->ensure_grad();
      constexpr double kInvSqrt2Pi = 0.3989422804014327;
      for (size_t i = 0; i < g.size(); ++i) {
        double v = xi->data[i];
        double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865476));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        gx[i] += g[i] * static_cast<Scalar>(cdf + v * pdf);
      }
    });
  }
  return out;
}

Tensor log(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(xv[i]);
  if (should_record({&x})) {
    auto xi = x.impl(), oi = out.impl();
    mark_recorded(out, [xi, oi] {
      const auto& g = oi->grad;
      auto& gx = xi->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xi->data[i];
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  int64_t batch = 0, m = 0, k = 0, n = 0;
  bool a_batched = false, b_batched = false;
  if (sa.size() == 2 && sb.size() == 2) {
    m = sa[0], k = sa[1], n = sb[1];
    batch = 1;
  } else if (sa.size() == 3 && sb.size() == 3) {
    batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
    a_batched = b_batched = true;
    if (sb[0] != batch) {
      throw ShapeError("matmul: batch mismatch " + shape_str(sa) + " vs " +
                       shape_str(sb));
    }
  } else if (sa.size() == 3 && sb.size() == 2) {
    batch = sa[0], m = sa[1], k = sa[2], n = sb[1];
    a_batched = true;
  } else {
    throw ShapeError("matmul: unsupported ranks " + shape_str(sa) + " x " +
                     shape_str(sb));
  }
  int64_t bk = b_batched ? sb[1] : sb[0];
  if (bk != k) {
    throw ShapeError("matmul: inner extents disagree " + shape_str(sa) + " x " +
                     shape_str(sb));
  }

  Shape out_shape = a_batched ? Shape{batch, m, n} : Shape{m, n};
  Tensor out = Tensor::zeros(out_shape);
  const Scalar* ad = a.data().data();
  const Scalar* bd = b.data().data();
  Scalar* od = out.data_mut().data();
  for (int64_t i = 0; i < batch; ++i) {
    gemm_acc(ad + i * m * k, bd + (b_batched ? i * k * n : 0), od + i * m * n, m,
             k, n);
  }

  if (should_record({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    mark_recorded(out, [ai, bi, oi, batch, m, k, n, b_batched] {
      const Scalar* g = oi->grad.data();
      if (ai->requires_grad) {
        Scalar* da = ai->ensure_grad().data();
        const Scalar* bd = bi->data.data();
        for (int64_t i = 0; i < batch; ++i) {
          gemm_grad_a(g + i * m * n, bd + (b_batched ? i * k * n : 0),
                      da + i * m * k, m, k, n);
        }
      }
      if (bi->requires_grad) {
        Scalar* db = bi->ensure_grad().data();
        const Scalar* ad = ai->data.data();
        for (int64_t i = 0; i < batch; ++i) {
          gemm_grad_b(ad + i * m * k, g + i * m * n,
                      db + (b_batched ? i * k * n : 0), m, k, n);
        }
      }
    });
  }
  return out;
}

Tensor transpose2(const Tensor& x) {
  if (x.rank() < 2) {
    throw ShapeError("transpose2: rank " + std::to_string(x.rank()) + " < 2");
  }
  std::vector<int> axes(static_cast<size_t>(x.rank()));
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const Shape& s = x.shape();
  const size_t r = s.size();
  if (axes.size() != r) {
    throw ShapeError("permute: axes size " + std::to_string(axes.size()) +
                     " vs rank " + std::to_string(r));
  }
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (size_t i = 0; i < r; ++i) {
    int ax = axes[i];
    if (ax < 0 || ax >= static_cast<int>(r) || seen[static_cast<size_t>(ax)]) {
      throw ShapeError("permute: invalid axis list");
    }
    seen[static_cast<size_t>(ax)] = true;
    out_shape[i] = s[static_cast<size_t>(ax)];
  }

  Tensor out = Tensor::zeros(out_shape);
  const auto in_strides = row_major_strides(s);
  const auto out_strides = row_major_strides(out_shape);
  const int64_t n = x.numel();
  const auto& xv = x.data();
  auto& ov = out.data_mut();
  // For each output element, map its multi-index back through the axis
  // permutation to the source offset.
  std::vector<int64_t> src_stride_for_out(r);
  for (size_t i = 0; i < r; ++i)
    src_stride_for_out[i] = in_strides[static_cast<size_t>(axes[i])];
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t rem = flat, src = 0;
    for (size_t i = 0; i < r; ++i) {
      int64_t idx = rem / out_strides[i];
      rem -= idx * out_strides[i];
      src += idx * src_stride_for_out[i];
    }
    ov[static_cast<size_t>(flat)] = xv[static_cast<size_t>(src)];
  }

  if (should_record({&x})) {
    auto xi = x.impl(), oi = out.impl();
    mark_recorded(out, [xi, oi, out_strides, src_stride_for_out, n, r] {
      const auto& g = oi->grad;
      auto& gx = xi->ensure_grad();
      for (int64_t flat = 0; flat < n; ++flat) {
        int64_t rem = flat, src = 0;
        for (size_t i = 0; i < r; ++i) {
          int64_t idx = rem / out_strides[i];
          rem -= idx * out_strides[i];
          src += idx * src_stride_for_out[i];
        }
        gx[static_cast<size_t>(src)] += g[static_cast<size_t>(flat)];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  Tensor out = Tensor::from_data(std::move(shape), x.data());
  if (should_record({&x})) {
    auto xi = x.impl(), oi = out.impl();
    mark_recorded(out, [xi, oi] {
      const auto& g = oi->grad;
      auto& gx = xi->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const size_t r = s0.size();
  if (axis < 0 || axis >= static_cast<int>(r)) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range");
  }
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = 0;
  for (const Tensor& p : parts) {
    const Shape& sp = p.shape();
    if (sp.size() != r) throw ShapeError("concat: rank mismatch");
    for (size_t i = 0; i < r; ++i) {
      if (i != static_cast<size_t>(axis) && sp[i] != s0[i]) {
        throw ShapeError("concat: extent mismatch " + shape_str(sp) + " vs " +
                         shape_str(s0));
      }
    }
    out_shape[static_cast<size_t>(axis)] += sp[static_cast<size_t>(axis)];
  }

  // outer = product before axis, inner = product after axis.
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < static_cast<size_t>(axis); ++i) outer *= s0[i];
  for (size_t i = static_cast<size_t>(axis) + 1; i < r; ++i) inner *= s0[i];
  const int64_t out_axis = out_shape[static_cast<size_t>(axis)];

  Tensor out = Tensor::zeros(out_shape);
  auto& ov = out.data_mut();
  int64_t offset = 0;
  for (const Tensor& p : parts) {
    const int64_t pa = p.shape()[static_cast<size_t>(axis)];
    const auto& pv = p.data();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + o * pa * inner, pa * inner,
                  ov.begin() + (o * out_axis + offset) * inner);
    }
    offset += pa;
  }

  bool rec = false;
  {
    if (Tape::active() && grad_enabled()) {
      for (const Tensor& p : parts)
        if (p.requires_grad()) {
          rec = true;
          break;
        }
    }
  }
  if (rec) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(parts.size());
    for (const Tensor& p : parts) impls.push_back(p.impl());
    auto oi = out.impl();
    mark_recorded(out, [impls, oi, outer, inner, out_axis, axis] {
      const auto& g = oi->grad;
      int64_t offset = 0;
      for (const auto& pi : impls) {
        const int64_t pa = pi->shape[static_cast<size_t>(axis)];
        if (pi->requires_grad) {
          auto& gp = pi->ensure_grad();
          for (int64_t o = 0; o < outer; ++o) {
            const Scalar* src = g.data() + (o * out_axis + offset) * inner;
            Scalar* dst = gp.data() + o * pa * inner;
            for (int64_t i = 0; i < pa * inner; ++i) dst[i] += src[i];
          }
        }
        offset += pa;
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
  const Shape& s = x.shape();
  const size_t r = s.size();
  if (axis < 0 || axis >= static_cast<int>(r)) {
    throw ShapeError("slice: axis " + std::to_string(axis) + " out of range");
  }
  const int64_t extent = s[static_cast<size_t>(axis)];
  if (start < 0 || len < 1 || start + len > extent) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") exceeds extent " +
                     std::to_string(extent));
  }
  Shape out_shape = s;
  out_shape[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < static_cast<size_t>(axis); ++i) outer *= s[i];
  for (size_t i = static_cast<size_t>(axis) + 1; i < r; ++i) inner *= s[i];

  Tensor out = Tensor::zeros(out_shape);
  auto& ov = out.data_mut();
  const auto& xv = x.data();
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(xv.begin() + (o * extent + start) * inner, len * inner,
                ov.begin() + o * len * inner);
  }
  if (should_record({&x})) {
    auto xi = x.impl(), oi = out.impl();
    mark_recorded(out, [xi, oi, outer, inner, extent, start, len] {
      const auto& g = oi->grad;
      auto& gx = xi->ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        const Scalar* src = g.data() + o * len * inner;
        Scalar* dst = gx.data() + (o * extent + start) * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  const Shape& s = x.shape();
  const size_t r = s.size();
  if (axis < 0) axis += static_cast<int>(r);
  if (axis < 0 || axis >= static_cast<int>(r)) {
    throw ShapeError("softmax: axis out of range for " + shape_str(s));
  }
  const int64_t n = s[static_cast<size_t>(axis)];
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < static_cast<size_t>(axis); ++i) outer *= s[i];
  for (size_t i = static_cast<size_t>(axis) + 1; i < r; ++i) inner *= s[i];

  Tensor out = Tensor::zeros(s);
  const auto& xv = x.data();
  auto& ov = out.data_mut();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * n * inner + in;
      Scalar mx = xv[static_cast<size_t>(base)];
      for (int64_t j = 1; j < n; ++j)
        mx = std::max(mx, xv[static_cast<size_t>(base + j * inner)]);
      double denom = 0;
      for (int64_t j = 0; j < n; ++j) {
        double e = std::exp(static_cast<double>(xv[static_cast<size_t>(base + j * inner)] - mx));
        ov[static_cast<size_t>(base + j * inner)] = static_cast<Scalar>(e);
        denom += e;
      }
      const double inv = 1.0 / denom;
      for (int64_t j = 0; j < n; ++j)
        ov[static_cast<size_t>(base + j * inner)] =
            static_cast<Scalar>(ov[static_cast<size_t>(base + j * inner)] * inv);
    }
  }

  if (should_record({&x})) {
    auto xi = x.impl(), oi = out.impl();
    mark_recorded(out, [xi, oi, outer, inner, n] {
      const auto& g = oi->grad;
      const auto& y = oi->data;
      auto& gx = xi->ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * n * inner + in;
          double dot = 0;
          for (int64_t j = 0; j < n; ++j) {
            size_t idx = static_cast<size_t>(base + j * inner);
            dot += static_cast<double>(g[idx]) * y[idx];
          }
          for (int64_t j = 0; j < n; ++j) {
            size_t idx = static_cast<size_t>(base + j * inner);
            gx[idx] += static_cast<Scalar>(y[idx] * (g[idx] - dot));
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Scalar eps) {
  const Shape& s = x.shape();
  const int64_t d = s.back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(d) +
                     "], got " + shape_str(gamma.shape()) + " and " +
                     shape_str(beta.shape()));
  }
  const int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(s);
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  auto& ov = out.data_mut();
  for (int64_t row = 0; row < rows; ++row) {
    const Scalar* xr = xv.data() + row * d;
    Scalar* orow = ov.data() + row * d;
    double mean = 0;
    for (int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0;
    for (int64_t j = 0; j < d; ++j) {
      double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    for (int64_t j = 0; j < d; ++j) {
      orow[j] = static_cast<Scalar>(gv[static_cast<size_t>(j)] *
                                        ((xr[j] - mean) * inv) +
                                    bv[static_cast<size_t>(j)]);
    }
  }

  if (should_record({&x, &gamma, &beta})) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
    mark_recorded(out, [xi, gi, bi, oi, rows, d, eps] {
      const auto& g = oi->grad;
      const auto& xv = xi->data;
      const auto& gv = gi->data;
      for (int64_t row = 0; row < rows; ++row) {
        const Scalar* xr = xv.data() + row * d;
        const Scalar* gr = g.data() + row * d;
        double mean = 0;
        for (int64_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0;
        for (int64_t j = 0; j < d; ++j) {
          double c = xr[j] - mean;
          var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));

        if (gi->requires_grad || bi->requires_grad) {
          auto& gg = gi->ensure_grad();
          auto& gb = bi->ensure_grad();
          for (int64_t j = 0; j < d; ++j) {
            double xhat = (xr[j] - mean) * inv;
            gg[static_cast<size_t>(j)] += static_cast<Scalar>(gr[j] * xhat);
            gb[static_cast<size_t>(j)] += gr[j];
          }
        }
        if (xi->requires_grad) {
          auto& gx = xi->ensure_grad();
          double mean_h = 0, mean_hx = 0;
          for (int64_t j = 0; j < d; ++j) {
            double h = static_cast<double>(gr[j]) * gv[static_cast<size_t>(j)];
            double xhat = (xr[j] - mean) * inv;
            mean_h += h;
            mean_hx += h * xhat;
          }
          mean_h /= static_cast<double>(d);
          mean_hx /= static_cast<double>(d);
          for (int64_t j = 0; j < d; ++j) {
            double h = static_cast<double>(gr[j]) * gv[static_cast<size_t>(j)];
            double xhat = (xr[j] - mean) * inv;
            gx[static_cast<size_t>(row * d + j)] +=
                static_cast<Scalar>(inv * (h - mean_h - xhat * mean_hx));
          }
        }
      }
    });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 4) {
    throw ShapeError("conv2d: expected x[C,H,W], w[O,C,k,k], got " +
                     shape_str(xs) + " and " + shape_str(ws));
  }
  const int64_t cin = xs[0], h = xs[1], wdt = xs[2];
  const int64_t cout = ws[0], k = ws[2];
  if (ws[1] != cin || ws[3] != k) {
    throw ShapeError("conv2d: weight " + shape_str(ws) +
                     " incompatible with input " + shape_str(xs));
  }
  if (k != 1 && k != 3) {
    throw ConfigError("conv2d: kernel size " + std::to_string(k) +
                      " unsupported (1 or 3)");
  }
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  const int64_t oh_num = h + 2 * pad - k;
  const int64_t ow_num = wdt + 2 * pad - k;
  if (oh_num < 0 || ow_num < 0 || oh_num % stride != 0 || ow_num % stride != 0) {
    throw GeometryError("conv2d: non-integral output extent for input " +
                        shape_str(xs) + ", k=" + std::to_string(k) +
                        ", stride=" + std::to_string(stride) +
                        ", pad=" + std::to_string(pad));
  }
  const int64_t oh = oh_num / stride + 1;
  const int64_t ow = ow_num / stride + 1;

  Tensor out = Tensor::zeros({cout, oh, ow});
  const auto& xv = x.data();
  const auto& wv = w.data();
  auto& ov = out.data_mut();
  for (int64_t co = 0; co < cout; ++co) {
    for (int64_t ci = 0; ci < cin; ++ci) {
      const Scalar* xplane = xv.data() + ci * h * wdt;
      const Scalar* wk = wv.data() + (co * cin + ci) * k * k;
      Scalar* oplane = ov.data() + co * oh * ow;
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
          Scalar acc = 0;
          const int64_t iy0 = oy * stride - pad;
          const int64_t ix0 = ox * stride - pad;
          for (int64_t ky = 0; ky < k; ++ky) {
            const int64_t iy = iy0 + ky;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < k; ++kx) {
              const int64_t ix = ix0 + kx;
              if (ix < 0 || ix >= wdt) continue;
              acc += xplane[iy * wdt + ix] * wk[ky * k + kx];
            }
          }
          oplane[oy * ow + ox] += acc;
        }
      }
    }
  }

  if (should_record({&x, &w})) {
    auto xi = x.impl(), wi = w.impl(), oi = out.impl();
    const int64_t s = stride, p = pad;
    mark_recorded(out, [xi, wi, oi, cin, cout, h, wdt, k, oh, ow, s, p] {
      const auto& g = oi->grad;
      const bool need_dx = xi->requires_grad;
      const bool need_dw = wi->requires_grad;
      Scalar* dx = need_dx ? xi->ensure_grad().data() : nullptr;
      Scalar* dw = need_dw ? wi->ensure_grad().data() : nullptr;
      for (int64_t co = 0; co < cout; ++co) {
        const Scalar* gplane = g.data() + co * oh * ow;
        for (int64_t ci = 0; ci < cin; ++ci) {
          const Scalar* xplane = xi->data.data() + ci * h * wdt;
          const Scalar* wk = wi->data.data() + (co * cin + ci) * k * k;
          Scalar* dxp = need_dx ? dx + ci * h * wdt : nullptr;
          Scalar* dwp = need_dw ? dw + (co * cin + ci) * k * k : nullptr;
          for (int64_t oy = 0; oy < oh; ++oy) {
            for (int64_t ox = 0; ox < ow; ++ox) {
              const Scalar gv = gplane[oy * ow + ox];
              if (gv == Scalar(0)) continue;
              const int64_t iy0 = oy * s - p;
              const int64_t ix0 = ox * s - p;
              for (int64_t ky = 0; ky < k; ++ky) {
                const int64_t iy = iy0 + ky;
                if (iy < 0 || iy >= h) continue;
                for (int64_t kx = 0; kx < k; ++kx) {
                  const int64_t ix = ix0 + kx;
                  if (ix < 0 || ix >= wdt) continue;
                  if (need_dx) dxp[iy * wdt + ix] += gv * wk[ky * k + kx];
                  if (need_dw) dwp[ky * k + kx] += gv * xplane[iy * wdt + ix];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  const Shape& s = x.shape();
  if (s.size() != 3 || b.shape() != Shape{s[0]}) {
    throw ShapeError("add_channel_bias: " + shape_str(s) + " + " +
                     shape_str(b.shape()));
  }
  const int64_t c = s[0], hw = s[1] * s[2];
  Tensor out = Tensor::zeros(s);
  const auto& xv = x.data();
  const auto& bv = b.data();
  auto& ov = out.data_mut();
  for (int64_t ch = 0; ch < c; ++ch) {
    const Scalar bvv = bv[static_cast<size_t>(ch)];
    for (int64_t i = 0; i < hw; ++i)
      ov[static_cast<size_t>(ch * hw + i)] =
          xv[static_cast<size_t>(ch * hw + i)] + bvv;
  }
  if (should_record({&x, &b})) {
    auto xi = x.impl(), bi = b.impl(), oi = out.impl();
    mark_recorded(out, [xi, bi, oi, c, hw] {
      const auto& g = oi->grad;
      if (xi->requires_grad) {
        auto& gx = xi->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (int64_t ch = 0; ch < c; ++ch) {
          double acc = 0;
          for (int64_t i = 0; i < hw; ++i)
            acc += g[static_cast<size_t>(ch * hw + i)];
          gb[static_cast<size_t>(ch)] += static_cast<Scalar>(acc);
        }
      }
    });
  }
  return out;
}

Tensor add_bias_lastdim(const Tensor& x, const Tensor& b) {
  const Shape& s = x.shape();
  const int64_t d = s.back();
  if (b.shape() != Shape{d}) {
    throw ShapeError("add_bias_lastdim: " + shape_str(s) + " + " +
                     shape_str(b.shape()));
  }
  const int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(s);
  const auto& xv = x.data();
  const auto& bv = b.data();
  auto& ov = out.data_mut();
  for (int64_t row = 0; row < rows; ++row) {
    for (int64_t j = 0; j < d; ++j)
      ov[static_cast<size_t>(row * d + j)] =
          xv[static_cast<size_t>(row * d + j)] + bv[static_cast<size_t>(j)];
  }
  if (should_record({&x, &b})) {
    auto xi = x.impl(), bi = b.impl(), oi = out.impl();
    mark_recorded(out, [xi, bi, oi, rows, d] {
      const auto& g = oi->grad;
      if (xi->requires_grad) {
        auto& gx = xi->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->ensure_grad();
        for (int64_t row = 0; row < rows; ++row)
          for (int64_t j = 0; j < d; ++j)
            gb[static_cast<size_t>(j)] += g[static_cast<size_t>(row * d + j)];
      }
    });
  }
  return out;
}

namespace {

struct BilinearTap {
  int64_t lo, hi;
  Scalar w_lo, w_hi;
};

// Sample-center mapping (align_corners = false) with edge clamping.
std::vector<BilinearTap> bilinear_taps(int64_t in, int64_t out, int factor) {
  std::vector<BilinearTap> taps(static_cast<size_t>(out));
  for (int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    double fl = std::floor(src);
    double frac = src - fl;
    int64_t lo = static_cast<int64_t>(fl);
    int64_t hi = lo + 1;
    lo = std::clamp<int64_t>(lo, 0, in - 1);
    hi = std::clamp<int64_t>(hi, 0, in - 1);
    taps[static_cast<size_t>(o)] = {lo, hi, static_cast<Scalar>(1.0 - frac),
                                    static_cast<Scalar>(frac)};
  }
  return taps;
}

}  // namespace

Tensor bilinear_upsample(const Tensor& x, int factor) {
  if (factor < 1) {
    throw ContractError("bilinear_upsample: factor must be >= 1, got " +
                        std::to_string(factor));
  }
  const Shape& s = x.shape();
  if (s.size() != 3) {
    throw ShapeError("bilinear_upsample: expected [C,H,W], got " + shape_str(s));
  }
  const int64_t c = s[0], h = s[1], w = s[2];
  const int64_t oh = h * factor, ow = w * factor;
  const auto ytaps = bilinear_taps(h, oh, factor);
  const auto xtaps = bilinear_taps(w, ow, factor);

  Tensor out = Tensor::zeros({c, oh, ow});
  const auto& xv = x.data();
  auto& ov = out.data_mut();
  for (int64_t ch = 0; ch < c; ++ch) {
    const Scalar* xp = xv.data() + ch * h * w;
    Scalar* op = ov.data() + ch * oh * ow;
    for (int64_t oy = 0; oy < oh; ++oy) {
      const auto& ty = ytaps[static_cast<size_t>(oy)];
      for (int64_t ox = 0; ox < ow; ++ox) {
        const auto& tx = xtaps[static_cast<size_t>(ox)];
        op[oy * ow + ox] = ty.w_lo * (tx.w_lo * xp[ty.lo * w + tx.lo] +
                                      tx.w_hi * xp[ty.lo * w + tx.hi]) +
                           ty.w_hi * (tx.w_lo * xp[ty.hi * w + tx.lo] +
                                      tx.w_hi * xp[ty.hi * w + tx.hi]);
      }
    }
  }

  if (should_record({&x})) {
    auto xi = x.impl(), oi = out.impl();
    mark_recorded(out, [xi, oi, c, h, w, oh, ow, ytaps, xtaps] {
      const auto& g = oi->grad;
      auto& gx = xi->ensure_grad();
      for (int64_t ch = 0; ch < c; ++ch) {
        const Scalar* gp = g.data() + ch * oh * ow;
        Scalar* gxp = gx.data() + ch * h * w;
        for (int64_t oy = 0; oy < oh; ++oy) {
          const auto& ty = ytaps[static_cast<size_t>(oy)];
          for (int64_t ox = 0; ox < ow; ++ox) {
            const auto& tx = xtaps[static_cast<size_t>(ox)];
            const Scalar gv = gp[oy * ow + ox];
            gxp[ty.lo * w + tx.lo] += gv * ty.w_lo * tx.w_lo;
            gxp[ty.lo * w + tx.hi] += gv * ty.w_lo * tx.w_hi;
            gxp[ty.hi * w + tx.lo] += gv * ty.w_hi * tx.w_lo;
            gxp[ty.hi * w + tx.hi] += gv * ty.w_hi * tx.w_hi;
          }
        }
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  double acc = 0;
  for (Scalar v : x.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<Scalar>(acc));
  if (should_record({&x})) {
    auto xi = x.impl(), oi = out.impl();
    mark_recorded(out, [xi, oi] {
      const Scalar g = oi->grad[0];
      auto& gx = xi->ensure_grad();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) {
  const int64_t n = x.numel();
  double acc = 0;
  for (Scalar v : x.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<Scalar>(acc / static_cast<double>(n)));
  if (should_record({&x})) {
    auto xi = x.impl(), oi = out.impl();
    mark_recorded(out, [xi, oi, n] {
      const Scalar g = static_cast<Scalar>(static_cast<double>(oi->grad[0]) /
                                           static_cast<double>(n));
      auto& gx = xi->ensure_grad();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

namespace {

// Maps each input flat offset to the flat offset of the reduced output.
struct AxesReduction {
  Shape out_shape;
  std::vector<int64_t> in_strides;
  std::vector<int64_t> out_stride_for_in;  // 0 along reduced axes
  int64_t count = 1;

  AxesReduction(const Shape& s, std::vector<int>& axes) {
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    std::vector<bool> reduced(s.size(), false);
    for (int ax : axes) {
      if (ax < 0 || ax >= static_cast<int>(s.size())) {
        throw ShapeError("reduce: axis " + std::to_string(ax) +
                         " out of range for " + shape_str(s));
      }
      reduced[static_cast<size_t>(ax)] = true;
      count *= s[static_cast<size_t>(ax)];
    }
    for (size_t i = 0; i < s.size(); ++i)
      if (!reduced[i]) out_shape.push_back(s[i]);
    if (out_shape.empty()) out_shape = {1};

    in_strides = row_major_strides(s);
    auto out_strides = row_major_strides(out_shape);
    out_stride_for_in.assign(s.size(), 0);
    size_t kept = 0;
    for (size_t i = 0; i < s.size(); ++i) {
      if (!reduced[i]) {
        out_stride_for_in[i] = out_strides[kept];
        ++kept;
      }
    }
  }

  int64_t out_offset(int64_t in_flat, const Shape& s) const {
    int64_t rem = in_flat, off = 0;
    for (size_t i = 0; i < s.size(); ++i) {
      int64_t idx = rem / in_strides[i];
      rem -= idx * in_strides[i];
      off += idx * out_stride_for_in[i];
    }
    return off;
  }
};

Tensor reduce_axes(const Tensor& x, std::vector<int> axes, bool mean) {
  AxesReduction red(x.shape(), axes);
  const Shape s = x.shape();
  std::vector<double> acc(static_cast<size_t>(shape_numel(red.out_shape)), 0.0);
  const auto& xv = x.data();
  for (int64_t i = 0; i < x.numel(); ++i)
    acc[static_cast<size_t>(red.out_offset(i, s))] += xv[static_cast<size_t>(i)];
  const double scale = mean ? 1.0 / static_cast<double>(red.count) : 1.0;
  Tensor out = Tensor::zeros(red.out_shape);
  auto& ov = out.data_mut();
  for (size_t i = 0; i < ov.size(); ++i)
    ov[i] = static_cast<Scalar>(acc[i] * scale);

  if (should_record({&x})) {
    auto xi = x.impl(), oi = out.impl();
    const Scalar gscale = static_cast<Scalar>(scale);
    mark_recorded(out, [xi, oi, red, s, gscale] {
      const auto& g = oi->grad;
      auto& gx = xi->ensure_grad();
      for (int64_t i = 0; i < static_cast<int64_t>(gx.size()); ++i)
        gx[static_cast<size_t>(i)] +=
            g[static_cast<size_t>(red.out_offset(i, s))] * gscale;
    });
  }
  return out;
}

}  // namespace

Tensor sum_axes(const Tensor& x, std::vector<int> axes) {
  return reduce_axes(x, std::move(axes), false);
}

Tensor mean_axes(const Tensor& x, std::vector<int> axes) {
  return reduce_axes(x, std::move(axes), true);
}

Tensor cosine_similarity_matrix(const Tensor& x, const Tensor& y) {
  const Shape& sx = x.shape();
  const Shape& sy = y.shape();
  if (sx.size() != 2 || sy.size() != 2 || sx[1] != sy[1]) {
    throw ShapeError("cosine_similarity_matrix: " + shape_str(sx) + " vs " +
                     shape_str(sy));
  }
  const int64_t kx = sx[0], ky = sy[0], d = sx[1];
  constexpr double kEps = 1e-12;

  std::vector<double> nx(static_cast<size_t>(kx)), ny(static_cast<size_t>(ky));
  const auto& xv = x.data();
  const auto& yv = y.data();
  for (int64_t i = 0; i < kx; ++i) {
    double acc = kEps;
    for (int64_t j = 0; j < d; ++j) {
      double v = xv[static_cast<size_t>(i * d + j)];
      acc += v * v;
    }
    nx[static_cast<size_t>(i)] = std::sqrt(acc);
  }
  for (int64_t i = 0; i < ky; ++i) {
    double acc = kEps;
    for (int64_t j = 0; j < d; ++j) {
      double v = yv[static_cast<size_t>(i * d + j)];
      acc += v * v;
    }
    ny[static_cast<size_t>(i)] = std::sqrt(acc);
  }

  Tensor out = Tensor::zeros({kx, ky});
  auto& ov = out.data_mut();
  for (int64_t i = 0; i < kx; ++i) {
    for (int64_t j = 0; j < ky; ++j) {
      double dot = 0;
      for (int64_t t = 0; t < d; ++t)
        dot += static_cast<double>(xv[static_cast<size_t>(i * d + t)]) *
               yv[static_cast<size_t>(j * d + t)];
      ov[static_cast<size_t>(i * ky + j)] =
          static_cast<Scalar>(dot / (nx[static_cast<size_t>(i)] *
                                     ny[static_cast<size_t>(j)]));
    }
  }

  if (should_record({&x, &y})) {
    auto xi = x.impl(), yi = y.impl(), oi = out.impl();
    mark_recorded(out, [xi, yi, oi, kx, ky, d, nx, ny] {
      const auto& g = oi->grad;
      const auto& c = oi->data;
      const auto& xv = xi->data;
      const auto& yv = yi->data;
      for (int64_t i = 0; i < kx; ++i) {
        for (int64_t j = 0; j < ky; ++j) {
          const double gv = g[static_cast<size_t>(i * ky + j)];
          if (gv == 0) continue;
          const double cij = c[static_cast<size_t>(i * ky + j)];
          const double ni = nx[static_cast<size_t>(i)];
          const double nj = ny[static_cast<size_t>(j)];
          if (xi->requires_grad) {
            auto& gx = xi->ensure_grad();
            for (int64_t t = 0; t < d; ++t) {
              gx[static_cast<size_t>(i * d + t)] += static_cast<Scalar>(
                  gv * (yv[static_cast<size_t>(j * d + t)] / (ni * nj) -
                        cij * xv[static_cast<size_t>(i * d + t)] / (ni * ni)));
            }
          }
          if (yi->requires_grad) {
            auto& gy = yi->ensure_grad();
            for (int64_t t = 0; t < d; ++t) {
              gy[static_cast<size_t>(j * d + t)] += static_cast<Scalar>(
                  gv * (xv[static_cast<size_t>(i * d + t)] / (ni * nj) -
                        cij * yv[static_cast<size_t>(j * d + t)] / (nj * nj)));
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor kl_div_rows(const Tensor& p, const Tensor& q) {
  check_same_shape(p, q, "kl_div_rows");
  if (p.rank() != 2) {
    throw ShapeError("kl_div_rows: expected [K,n], got " + shape_str(p.shape()));
  }
  const int64_t rows = p.dim(0), n = p.dim(1);
  const auto& pv = p.data();
  const auto& qv = q.data();
  double acc = 0;
  for (int64_t i = 0; i < rows * n; ++i) {
    const double pi = pv[static_cast<size_t>(i)];
    if (pi <= 0) continue;  // 0 * log 0 = 0
    acc += pi * (std::log(pi) - std::log(static_cast<double>(qv[static_cast<size_t>(i)])));
  }
  Tensor out = Tensor::scalar(static_cast<Scalar>(acc / static_cast<double>(rows)));

  if (should_record({&p, &q})) {
    auto pi_ = p.impl(), qi = q.impl(), oi = out.impl();
    mark_recorded(out, [pi_, qi, oi, rows, n] {
      const Scalar g = oi->grad[0];
      const double inv_rows = 1.0 / static_cast<double>(rows);
      if (qi->requires_grad) {
        auto& gq = qi->ensure_grad();
        for (int64_t i = 0; i < rows * n; ++i) {
          const double pv = pi_->data[static_cast<size_t>(i)];
          if (pv <= 0) continue;
          gq[static_cast<size_t>(i)] += static_cast<Scalar>(
              -g * inv_rows * pv / qi->data[static_cast<size_t>(i)]);
        }
      }
      if (pi_->requires_grad) {
        auto& gp = pi_->ensure_grad();
        for (int64_t i = 0; i < rows * n; ++i) {
          const double pv = pi_->data[static_cast<size_t>(i)];
          if (pv <= 0) continue;
          gp[static_cast<size_t>(i)] += static_cast<Scalar>(
              g * inv_rows *
              (std::log(pv) - std::log(static_cast<double>(
                                  qi->data[static_cast<size_t>(i)])) +
               1.0));
        }
      }
    });
  }
  return out;
}

SARTM_NS_END
