#include "refine3d/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace refine3d::ops {

namespace {

using detail::Node;
using BackwardFn = std::function<void(Node&)>;

Tensor make_result(Shape shape, std::vector<double> data,
                   std::initializer_list<Tensor> inputs, BackwardFn fn,
                   const char* what) {
  check_finite(data, what);
  bool rg = false;
  if (grad_enabled())
    for (const auto& t : inputs) rg = rg || t.requires_grad();
  auto node = std::make_shared<Node>(std::move(shape), std::move(data), rg);
  node->leaf = false;
  if (rg) {
    for (const auto& t : inputs) node->parents.push_back(t.node_ptr());
    node->backward_fn = std::move(fn);
  }
  return Tensor::from_node(std::move(node));
}

// Gradient sink of parent `i`, or nullptr when it does not need one.
double* sink(Node& self, std::size_t i) {
  auto& p = *self.parents[i];
  return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

void require_2d(const Tensor& t, const char* what) {
  if (t.dim() != 2) {
    throw DimensionError(std::string(what) + ": expected 2-D tensor, got " +
                         shape_string(t.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " +
                         shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_count(const Tensor& t, std::size_t n, const char* what) {
  if (t.numel() != n) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(n) +
                         " target values, tensor has " +
                         std::to_string(t.numel()));
  }
}

void check_offsets(std::span<const std::size_t> offsets, std::size_t rows,
                   const char* what) {
  if (offsets.empty() || offsets.front() != 0 || offsets.back() != rows ||
      !std::is_sorted(offsets.begin(), offsets.end())) {
    throw DimensionError(std::string(what) + ": invalid segment offsets");
  }
}

double clamp_prob(double p) {
  return std::clamp(p, kProbClamp, 1.0 - kProbClamp);
}

// Binary entropy of a soft label; 0 for hard labels.
double entropy(double t) {
  double h = 0.0;
  if (t > 0.0 && t < 1.0) h = -(t * std::log(t) + (1.0 - t) * std::log(1.0 - t));
  return h;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const auto m = a.size(0), k = a.size(1), n = b.size(1);
  if (b.size(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " +
                         shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return make_result(
      {m, n}, std::move(out), {a, b},
      [m, k, n](Node& self) {
        const auto& G = self.grad;
        const auto& A = self.parents[0]->data;
        const auto& B = self.parents[1]->data;
        if (double* ga = sink(self, 0)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
              ga[i * k + p] += s;
            }
        }
        if (double* gb = sink(self, 1)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double av = A[i * k + p];
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * G[i * n + j];
            }
        }
      },
      "matmul");
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_2d(x, "linear");
  require_2d(weight, "linear");
  const auto m = x.size(0), k = x.size(1), n = weight.size(0);
  if (weight.size(1) != k || bias.numel() != n) {
    throw DimensionError("linear: input " + shape_string(x.shape()) +
                         " weight " + shape_string(weight.shape()) + " bias " +
                         shape_string(bias.shape()));
  }
  std::vector<double> out(m * n);
  auto X = x.data();
  auto W = weight.data();
  auto b = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = X.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* wr = W.data() + j * k;
      double s = b[j];
      for (std::size_t p = 0; p < k; ++p) s += xr[p] * wr[p];
      out[i * n + j] = s;
    }
  }
  return make_result(
      {m, n}, std::move(out), {x, weight, bias},
      [m, k, n](Node& self) {
        const auto& G = self.grad;
        const auto& X = self.parents[0]->data;
        const auto& W = self.parents[1]->data;
        if (double* gx = sink(self, 0)) {
          for (std::size_t i = 0; i < m; ++i) {
            double* gr = gx + i * k;
            for (std::size_t j = 0; j < n; ++j) {
              const double g = G[i * n + j];
              if (g == 0.0) continue;
              const double* wr = W.data() + j * k;
              for (std::size_t p = 0; p < k; ++p) gr[p] += g * wr[p];
            }
          }
        }
        if (double* gw = sink(self, 1)) {
          for (std::size_t i = 0; i < m; ++i) {
            const double* xr = X.data() + i * k;
            for (std::size_t j = 0; j < n; ++j) {
              const double g = G[i * n + j];
              if (g == 0.0) continue;
              double* wr = gw + j * k;
              for (std::size_t p = 0; p < k; ++p) wr[p] += g * xr[p];
            }
          }
        }
        if (double* gb = sink(self, 2)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += G[i * n + j];
        }
      },
      "linear");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](Node& self) {
        const auto& G = self.grad;
        for (std::size_t p = 0; p < 2; ++p)
          if (double* g = sink(self, p))
            for (std::size_t i = 0; i < G.size(); ++i) g[i] += G[i];
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](Node& self) {
        const auto& G = self.grad;
        if (double* g = sink(self, 0))
          for (std::size_t i = 0; i < G.size(); ++i) g[i] += G[i];
        if (double* g = sink(self, 1))
          for (std::size_t i = 0; i < G.size(); ++i) g[i] -= G[i];
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](Node& self) {
        const auto& G = self.grad;
        const auto& A = self.parents[0]->data;
        const auto& B = self.parents[1]->data;
        if (double* g = sink(self, 0))
          for (std::size_t i = 0; i < G.size(); ++i) g[i] += G[i] * B[i];
        if (double* g = sink(self, 1))
          for (std::size_t i = 0; i < G.size(); ++i) g[i] += G[i] * A[i];
      },
      "mul");
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return make_result(
      x.shape(), std::move(out), {x},
      [factor](Node& self) {
        if (double* g = sink(self, 0))
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            g[i] += factor * self.grad[i];
      },
      "scale");
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  require_2d(x, "add_row");
  const auto m = x.size(0), n = x.size(1);
  if (row.numel() != n) {
    throw DimensionError("add_row: row of " + std::to_string(row.numel()) +
                         " values for " + shape_string(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto R = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += R[j];
  return make_result(
      x.shape(), std::move(out), {x, row},
      [m, n](Node& self) {
        const auto& G = self.grad;
        if (double* g = sink(self, 0))
          for (std::size_t i = 0; i < G.size(); ++i) g[i] += G[i];
        if (double* g = sink(self, 1))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += G[i * n + j];
      },
      "add_row");
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return make_result(
      x.shape(), std::move(out), {x},
      [](Node& self) {
        if (double* g = sink(self, 0)) {
          const auto& X = self.parents[0]->data;
          for (std::size_t i = 0; i < X.size(); ++i)
            if (X[i] > 0.0) g[i] += self.grad[i];
        }
      },
      "relu");
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto X = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = X[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                      : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_result(
      x.shape(), std::move(out), {x},
      [](Node& self) {
        if (double* g = sink(self, 0))
          for (std::size_t i = 0; i < self.data.size(); ++i) {
            const double s = self.data[i];
            g[i] += self.grad[i] * s * (1.0 - s);
          }
      },
      "sigmoid");
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result(
      {}, {s}, {x},
      [](Node& self) {
        if (double* g = sink(self, 0)) {
          const double gs = self.grad[0];
          for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) g[i] += gs;
        }
      },
      "sum");
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor weighted_sum(const Tensor& x, std::span<const double> weights) {
  require_count(x, weights.size(), "weighted_sum");
  double s = 0.0;
  auto X = x.data();
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * X[i];
  std::vector<double> w(weights.begin(), weights.end());
  return make_result(
      {}, {s}, {x},
      [w = std::move(w)](Node& self) {
        if (double* g = sink(self, 0)) {
          const double gs = self.grad[0];
          for (std::size_t i = 0; i < w.size(); ++i) g[i] += gs * w[i];
        }
      },
      "weighted_sum");
}

Tensor sum_rows(const Tensor& x) {
  require_2d(x, "sum_rows");
  const auto m = x.size(0), n = x.size(1);
  std::vector<double> out(n, 0.0);
  auto X = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += X[i * n + j];
  return make_result(
      {n}, std::move(out), {x},
      [m, n](Node& self) {
        if (double* g = sink(self, 0))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j];
      },
      "sum_rows");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_string(x.shape()) + " to " +
                         shape_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(
      std::move(shape), std::move(out), {x},
      [](Node& self) {
        if (double* g = sink(self, 0))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      },
      "reshape");
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_2d(x, "slice_cols");
  const auto m = x.size(0), n = x.size(1);
  if (start + count > n) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") out of " +
                         std::to_string(n));
  }
  std::vector<double> out(m * count);
  auto X = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = X[i * n + start + j];
  return make_result(
      {m, count}, std::move(out), {x},
      [m, n, start, count](Node& self) {
        if (double* g = sink(self, 0))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < count; ++j)
              g[i * n + start + j] += self.grad[i * count + j];
      },
      "slice_cols");
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& shape = x.shape();
  if (axis >= shape.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) +
                         " out of range for " + shape_string(shape));
  }
  const auto len = shape[axis];
  if (len == 0) throw DimensionError("softmax over an empty axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];

  std::vector<double> out(x.numel());
  auto X = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, X[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(X[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  return make_result(
      shape, std::move(out), {x},
      [outer, inner, len](Node& self) {
        double* g = sink(self, 0);
        if (!g) return;
        const auto& Y = self.data;
        const auto& G = self.grad;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double dot = 0.0;
            for (std::size_t k = 0; k < len; ++k)
              dot += G[base + k * inner] * Y[base + k * inner];
            for (std::size_t k = 0; k < len; ++k) {
              const auto idx = base + k * inner;
              g[idx] += Y[idx] * (G[idx] - dot);
            }
          }
      },
      "softmax");
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  require_2d(x, "gather_rows");
  const auto m = x.size(0), c = x.size(1);
  std::vector<double> out(index.size() * c);
  auto X = x.data();
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= m) throw DimensionError("gather_rows: index out of range");
    std::copy_n(X.data() + index[r] * c, c, out.data() + r * c);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result(
      {index.size(), c}, std::move(out), {x},
      [idx = std::move(idx), c](Node& self) {
        if (double* g = sink(self, 0))
          for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < c; ++j) g[idx[r] * c + j] += self.grad[r * c + j];
      },
      "gather_rows");
}

Tensor scatter_rows(const Tensor& base, std::span<const std::size_t> index,
                    const Tensor& values) {
  require_2d(base, "scatter_rows");
  require_2d(values, "scatter_rows");
  const auto m = base.size(0), c = base.size(1);
  if (values.size(0) != index.size() || values.size(1) != c) {
    throw DimensionError("scatter_rows: values " + shape_string(values.shape()) +
                         " for " + std::to_string(index.size()) + " rows of " +
                         shape_string(base.shape()));
  }
  std::vector<double> out(base.data().begin(), base.data().end());
  std::vector<char> replaced(m, 0);
  auto V = values.data();
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= m) throw DimensionError("scatter_rows: index out of range");
    if (replaced[index[r]]) throw DimensionError("scatter_rows: duplicate index");
    replaced[index[r]] = 1;
    std::copy_n(V.data() + r * c, c, out.data() + index[r] * c);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result(
      base.shape(), std::move(out), {base, values},
      [idx = std::move(idx), replaced = std::move(replaced), m, c](Node& self) {
        const auto& G = self.grad;
        if (double* g = sink(self, 0))
          for (std::size_t i = 0; i < m; ++i)
            if (!replaced[i])
              for (std::size_t j = 0; j < c; ++j) g[i * c + j] += G[i * c + j];
        if (double* g = sink(self, 1))
          for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < c; ++j) g[r * c + j] += G[idx[r] * c + j];
      },
      "scatter_rows");
}

Tensor segment_softmax(const Tensor& x, std::span<const std::size_t> offsets) {
  require_2d(x, "segment_softmax");
  const auto p = x.size(0), c = x.size(1);
  check_offsets(offsets, p, "segment_softmax");
  std::vector<double> out(p * c);
  auto X = x.data();
  std::vector<double> mx(c), z(c);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const auto lo = offsets[s], hi = offsets[s + 1];
    if (lo == hi) continue;
    std::fill(mx.begin(), mx.end(), -std::numeric_limits<double>::infinity());
    std::fill(z.begin(), z.end(), 0.0);
    for (auto r = lo; r < hi; ++r)
      for (std::size_t j = 0; j < c; ++j) mx[j] = std::max(mx[j], X[r * c + j]);
    for (auto r = lo; r < hi; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const double e = std::exp(X[r * c + j] - mx[j]);
        out[r * c + j] = e;
        z[j] += e;
      }
    for (auto r = lo; r < hi; ++r)
      for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= z[j];
  }
  std::vector<std::size_t> off(offsets.begin(), offsets.end());
  return make_result(
      {p, c}, std::move(out), {x},
      [off = std::move(off), c](Node& self) {
        double* g = sink(self, 0);
        if (!g) return;
        const auto& Y = self.data;
        const auto& G = self.grad;
        std::vector<double> dot(c);
        for (std::size_t s = 0; s + 1 < off.size(); ++s) {
          std::fill(dot.begin(), dot.end(), 0.0);
          for (auto r = off[s]; r < off[s + 1]; ++r)
            for (std::size_t j = 0; j < c; ++j) dot[j] += G[r * c + j] * Y[r * c + j];
          for (auto r = off[s]; r < off[s + 1]; ++r)
            for (std::size_t j = 0; j < c; ++j) {
              const auto i = r * c + j;
              g[i] += Y[i] * (G[i] - dot[j]);
            }
        }
      },
      "segment_softmax");
}

Tensor segment_sum(const Tensor& x, std::span<const std::size_t> offsets) {
  require_2d(x, "segment_sum");
  const auto p = x.size(0), c = x.size(1);
  check_offsets(offsets, p, "segment_sum");
  const auto segments = offsets.size() - 1;
  std::vector<double> out(segments * c, 0.0);
  auto X = x.data();
  for (std::size_t s = 0; s < segments; ++s)
    for (auto r = offsets[s]; r < offsets[s + 1]; ++r)
      for (std::size_t j = 0; j < c; ++j) out[s * c + j] += X[r * c + j];
  std::vector<std::size_t> off(offsets.begin(), offsets.end());
  return make_result(
      {segments, c}, std::move(out), {x},
      [off = std::move(off), c](Node& self) {
        if (double* g = sink(self, 0))
          for (std::size_t s = 0; s + 1 < off.size(); ++s)
            for (auto r = off[s]; r < off[s + 1]; ++r)
              for (std::size_t j = 0; j < c; ++j) g[r * c + j] += self.grad[s * c + j];
      },
      "segment_sum");
}

Tensor group_max(const Tensor& x, std::span<const std::size_t> group,
                 std::size_t groups) {
  require_2d(x, "group_max");
  const auto p = x.size(0), c = x.size(1);
  if (group.size() != p) throw DimensionError("group_max: one group id per row");
  std::vector<double> out(groups * c, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> arg(groups * c, p);
  auto X = x.data();
  for (std::size_t r = 0; r < p; ++r) {
    if (group[r] >= groups) throw DimensionError("group_max: group id out of range");
    for (std::size_t j = 0; j < c; ++j) {
      const auto o = group[r] * c + j;
      if (arg[o] == p || X[r * c + j] > out[o]) {
        out[o] = X[r * c + j];
        arg[o] = r;
      }
    }
  }
  for (auto a : arg)
    if (a == p) throw DimensionError("group_max: empty group");
  return make_result(
      {groups, c}, std::move(out), {x},
      [arg = std::move(arg), c](Node& self) {
        if (double* g = sink(self, 0))
          for (std::size_t o = 0; o < arg.size(); ++o)
            g[arg[o] * c + o % c] += self.grad[o];
      },
      "group_max");
}

Tensor layer_norm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                  double eps) {
  require_2d(x, "layer_norm");
  const auto m = x.size(0), n = x.size(1);
  if (scale.numel() != n || shift.numel() != n) {
    throw DimensionError("layer_norm: scale/shift length must equal channels");
  }
  std::vector<double> xhat(m * n), inv_std(m), out(m * n);
  auto X = x.data();
  auto S = scale.data();
  auto B = shift.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += X[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = X[i * n + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (X[i * n + j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * S[j] + B[j];
    }
  }
  return make_result(
      {m, n}, std::move(out), {x, scale, shift},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto& G = self.grad;
        const auto& S = self.parents[1]->data;
        if (double* gs = sink(self, 1))
          for (std::size_t i = 0; i < m * n; ++i) gs[i % n] += G[i] * xhat[i];
        if (double* gb = sink(self, 2))
          for (std::size_t i = 0; i < m * n; ++i) gb[i % n] += G[i];
        if (double* gx = sink(self, 0)) {
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = G[i * n + j] * S[j];
              sum_g += gh;
              sum_gx += gh * xhat[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = G[i * n + j] * S[j];
              gx[i * n + j] += inv_std[i] *
                               (gh - inv_n * sum_g - xhat[i * n + j] * inv_n * sum_gx);
            }
          }
        }
      },
      "layer_norm");
}

Tensor batch_norm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                  double eps) {
  require_2d(x, "batch_norm");
  const auto m = x.size(0), n = x.size(1);
  if (scale.numel() != n || shift.numel() != n) {
    throw DimensionError("batch_norm: scale/shift length must equal channels");
  }
  if (m == 0) throw DimensionError("batch_norm on an empty batch");
  std::vector<double> xhat(m * n), inv_std(n), out(m * n);
  auto X = x.data();
  auto S = scale.data();
  auto B = shift.data();
  for (std::size_t j = 0; j < n; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < m; ++i) mu += X[i * n + j];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double d = X[i * n + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(m);
    inv_std[j] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < m; ++i) {
      xhat[i * n + j] = (X[i * n + j] - mu) * inv_std[j];
      out[i * n + j] = xhat[i * n + j] * S[j] + B[j];
    }
  }
  return make_result(
      {m, n}, std::move(out), {x, scale, shift},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto& G = self.grad;
        const auto& S = self.parents[1]->data;
        if (double* gs = sink(self, 1))
          for (std::size_t i = 0; i < m * n; ++i) gs[i % n] += G[i] * xhat[i];
        if (double* gb = sink(self, 2))
          for (std::size_t i = 0; i < m * n; ++i) gb[i % n] += G[i];
        if (double* gx = sink(self, 0)) {
          const double inv_m = 1.0 / static_cast<double>(m);
          for (std::size_t j = 0; j < n; ++j) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
              const double gh = G[i * n + j] * S[j];
              sum_g += gh;
              sum_gx += gh * xhat[i * n + j];
            }
            for (std::size_t i = 0; i < m; ++i) {
              const double gh = G[i * n + j] * S[j];
              gx[i * n + j] += inv_std[j] *
                               (gh - inv_m * sum_g - xhat[i * n + j] * inv_m * sum_gx);
            }
          }
        }
      },
      "batch_norm");
}

Tensor batch_norm_fixed(const Tensor& x, const Tensor& scale,
                        const Tensor& shift, std::span<const double> mean,
                        std::span<const double> var, double eps) {
  require_2d(x, "batch_norm_fixed");
  const auto m = x.size(0), n = x.size(1);
  if (scale.numel() != n || shift.numel() != n || mean.size() != n ||
      var.size() != n) {
    throw DimensionError("batch_norm_fixed: statistics length must equal channels");
  }
  std::vector<double> inv_std(n), xhat(m * n), out(m * n);
  for (std::size_t j = 0; j < n; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  auto X = x.data();
  auto S = scale.data();
  auto B = shift.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (X[i * n + j] - mean[j]) * inv_std[j];
      out[i * n + j] = xhat[i * n + j] * S[j] + B[j];
    }
  return make_result(
      {m, n}, std::move(out), {x, scale, shift},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto& G = self.grad;
        const auto& S = self.parents[1]->data;
        if (double* gs = sink(self, 1))
          for (std::size_t i = 0; i < m * n; ++i) gs[i % n] += G[i] * xhat[i];
        if (double* gb = sink(self, 2))
          for (std::size_t i = 0; i < m * n; ++i) gb[i % n] += G[i];
        if (double* gx = sink(self, 0))
          for (std::size_t i = 0; i < m * n; ++i)
            gx[i] += G[i] * S[i % n] * inv_std[i % n];
      },
      "batch_norm_fixed");
}

Tensor focal_loss(const Tensor& prob, std::span<const double> target,
                  double alpha, double gamma) {
  require_count(prob, target.size(), "focal_loss");
  const auto n = target.size();
  std::vector<double> out(n), dldp(n);
  auto P = prob.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double raw = P[i];
    const double p = clamp_prob(raw);
    const double t = target[i];
    const double q = 1.0 - p;
    const double pos = alpha * t * std::pow(q, gamma);
    const double neg = (1.0 - alpha) * (1.0 - t) * std::pow(p, gamma);
    out[i] = -pos * std::log(p) - neg * std::log(q);
    if (raw <= kProbClamp || raw >= 1.0 - kProbClamp) {
      dldp[i] = 0.0;
    } else {
      // d/dp of -αt q^γ log p  and  -(1-α)(1-t) p^γ log q
      const double dpos = alpha * t *
                          (gamma * std::pow(q, gamma - 1.0) * std::log(p) -
                           std::pow(q, gamma) / p);
      const double dneg = (1.0 - alpha) * (1.0 - t) *
                          (-gamma * std::pow(p, gamma - 1.0) * std::log(q) +
                           std::pow(p, gamma) / q);
      dldp[i] = dpos + dneg;
    }
  }
  return make_result(
      prob.shape(), std::move(out), {prob},
      [dldp = std::move(dldp)](Node& self) {
        if (double* g = sink(self, 0))
          for (std::size_t i = 0; i < dldp.size(); ++i) g[i] += self.grad[i] * dldp[i];
      },
      "focal_loss");
}

Tensor smooth_l1(const Tensor& pred, std::span<const double> target,
                 double delta) {
  require_count(pred, target.size(), "smooth_l1");
  if (!(delta > 0.0)) throw ConfigError("smooth_l1: delta must be positive");
  const auto n = target.size();
  std::vector<double> out(n), d(n);
  auto P = pred.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double r = P[i] - target[i];
    const double a = std::abs(r);
    if (a < delta) {
      out[i] = 0.5 * r * r / delta;
      d[i] = r / delta;
    } else {
      out[i] = a - 0.5 * delta;
      d[i] = r > 0.0 ? 1.0 : -1.0;
    }
  }
  return make_result(
      pred.shape(), std::move(out), {pred},
      [d = std::move(d)](Node& self) {
        if (double* g = sink(self, 0))
          for (std::size_t i = 0; i < d.size(); ++i) g[i] += self.grad[i] * d[i];
      },
      "smooth_l1");
}

Tensor bce(const Tensor& prob, std::span<const double> target) {
  require_count(prob, target.size(), "bce");
  const auto n = target.size();
  std::vector<double> out(n), d(n);
  auto P = prob.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double raw = P[i];
    const double p = clamp_prob(raw);
    const double t = target[i];
    out[i] = -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p)) - entropy(t);
    const bool clamped = raw <= kProbClamp || raw >= 1.0 - kProbClamp;
    d[i] = clamped ? 0.0 : (p - t) / (p * (1.0 - p));
  }
  return make_result(
      prob.shape(), std::move(out), {prob},
      [d = std::move(d)](Node& self) {
        if (double* g = sink(self, 0))
          for (std::size_t i = 0; i < d.size(); ++i) g[i] += self.grad[i] * d[i];
      },
      "bce");
}

}  // namespace refine3d::ops
