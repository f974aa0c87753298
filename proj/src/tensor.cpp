#include "finedeb/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "finedeb/kernels.hpp"

namespace finedeb {

using detail::Node;

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

namespace {

void check_finite(const Node& n, const char* op) {
  for (double v : n.values)
    if (!std::isfinite(v)) fail(std::string("numeric error: non-finite output of ") + op);
}

std::shared_ptr<Node> make_node(Shape shape,
                                std::vector<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->values.assign(shape_numel(n->shape), 0.0);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  return n;
}

void require_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2)
    fail(std::string(op) + ": expected 2D tensor, got " + shape_str(t.shape()));
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->values.assign(shape_numel(n->shape), 0.0);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size())
    fail("Tensor::from: value count " + std::to_string(values.size()) +
         " does not match shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->requires_grad = requires_grad;
  check_finite(*n, "Tensor::from");
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

const std::vector<double>& Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

double Tensor::item() const {
  if (numel() != 1) fail("Tensor::item: tensor is not scalar, shape " + shape_str(shape()));
  return node_->values[0];
}

void Tensor::zero_grad() {
  node_->ensure_grad();
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<Node>();
  n->shape = node_->shape;
  n->values = node_->values;
  n->requires_grad = false;
  return Tensor(std::move(n));
}

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    fail("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  auto out = make_node({m, n}, {a.node(), b.node()});
  kernels::par::matmul_nn(a.values().data(), b.values().data(),
                          out->values.data(), {m, n, k});
  check_finite(*out, "matmul");
  if (out->requires_grad) {
    auto an = a.node();
    auto bn = b.node();
    Node* o = out.get();
    out->backward_fn = [an, bn, o, m, n, k] {
      if (an->requires_grad) {
        an->ensure_grad();
        std::vector<double> tmp(m * k);
        kernels::par::matmul_nt(o->grad.data(), bn->values.data(), tmp.data(),
                                {m, k, n});
        for (std::size_t i = 0; i < tmp.size(); ++i) an->grad[i] += tmp[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        std::vector<double> tmp(k * n);
        kernels::par::matmul_tn(an->values.data(), o->grad.data(), tmp.data(),
                                {k, n, m});
        for (std::size_t i = 0; i < tmp.size(); ++i) bn->grad[i] += tmp[i];
      }
    };
  }
  return Tensor(out);
}

Tensor add(const Tensor& a, const Tensor& b) {
  const bool bias_bcast = a.shape().size() == 2 && b.shape().size() == 1 &&
                          b.shape()[0] == a.shape()[1];
  if (!bias_bcast && a.shape() != b.shape())
    fail("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = make_node(a.shape(), {a.node(), b.node()});
  const std::size_t n = a.numel();
  if (bias_bcast) {
    const std::size_t cols = b.shape()[0];
    for (std::size_t i = 0; i < n; ++i)
      out->values[i] = a.values()[i] + b.values()[i % cols];
  } else {
    for (std::size_t i = 0; i < n; ++i)
      out->values[i] = a.values()[i] + b.values()[i];
  }
  check_finite(*out, "add");
  if (out->requires_grad) {
    auto an = a.node();
    auto bn = b.node();
    Node* o = out.get();
    out->backward_fn = [an, bn, o, bias_bcast] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        if (bias_bcast) {
          const std::size_t cols = bn->values.size();
          for (std::size_t i = 0; i < o->grad.size(); ++i)
            bn->grad[i % cols] += o->grad[i];
        } else {
          for (std::size_t i = 0; i < o->grad.size(); ++i) bn->grad[i] += o->grad[i];
        }
      }
    };
  }
  return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = make_node(a.shape(), {a.node(), b.node()});
  for (std::size_t i = 0; i < a.numel(); ++i)
    out->values[i] = a.values()[i] * b.values()[i];
  check_finite(*out, "mul");
  if (out->requires_grad) {
    auto an = a.node();
    auto bn = b.node();
    Node* o = out.get();
    out->backward_fn = [an, bn, o] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i)
          an->grad[i] += o->grad[i] * bn->values[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < o->grad.size(); ++i)
          bn->grad[i] += o->grad[i] * an->values[i];
      }
    };
  }
  return Tensor(out);
}

Tensor scale(const Tensor& a, double s) {
  auto out = make_node(a.shape(), {a.node()});
  for (std::size_t i = 0; i < a.numel(); ++i) out->values[i] = a.values()[i] * s;
  check_finite(*out, "scale");
  if (out->requires_grad) {
    auto an = a.node();
    Node* o = out.get();
    out->backward_fn = [an, o, s] {
      an->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i] * s;
    };
  }
  return Tensor(out);
}

Tensor softmax(const Tensor& a, const Tensor& mask) {
  if (a.shape().empty()) fail("softmax: scalar input");
  if (mask.defined() && mask.shape() != a.shape())
    fail("softmax: mask shape mismatch " + shape_str(mask.shape()));
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.numel() / cols;
  std::vector<std::shared_ptr<Node>> parents{a.node()};
  if (mask.defined()) parents.push_back(mask.node());
  auto out = make_node(a.shape(), std::move(parents));
  kernels::par::softmax_rows(a.values().data(),
                             mask.defined() ? mask.values().data() : nullptr,
                             out->values.data(), rows, cols);
  check_finite(*out, "softmax");
  if (out->requires_grad) {
    auto an = a.node();
    Node* o = out.get();
    out->backward_fn = [an, o, rows, cols] {
      an->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* p = o->values.data() + r * cols;
        const double* g = o->grad.data() + r * cols;
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) dot += p[j] * g[j];
        double* da = an->grad.data() + r * cols;
        for (std::size_t j = 0; j < cols; ++j) da[j] += p[j] * (g[j] - dot);
      }
    };
  }
  return Tensor(out);
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                  double eps) {
  require_2d(a, "layer_norm");
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  if (gain.shape() != Shape{cols} || bias.shape() != Shape{cols})
    fail("layer_norm: gain/bias must have shape (" + std::to_string(cols) + ")");
  auto out = make_node(a.shape(), {a.node(), gain.node(), bias.node()});
  auto xhat = std::make_shared<std::vector<double>>(rows * cols);
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  kernels::par::layer_norm_rows(a.values().data(), gain.values().data(),
                                bias.values().data(), out->values.data(),
                                xhat->data(), inv_std->data(), rows, cols, eps);
  check_finite(*out, "layer_norm");
  if (out->requires_grad) {
    auto an = a.node();
    auto gn = gain.node();
    auto bn = bias.node();
    Node* o = out.get();
    out->backward_fn = [an, gn, bn, o, xhat, inv_std, rows, cols] {
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < cols; ++j)
            gn->grad[j] += o->grad[r * cols + j] * (*xhat)[r * cols + j];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < cols; ++j) bn->grad[j] += o->grad[r * cols + j];
      }
      if (an->requires_grad) {
        an->ensure_grad();
        const double inv_n = 1.0 / static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* h = xhat->data() + r * cols;
          const double* g = o->grad.data() + r * cols;
          double sum_gg = 0.0, sum_ggh = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            const double gg = g[j] * gn->values[j];
            sum_gg += gg;
            sum_ggh += gg * h[j];
          }
          double* da = an->grad.data() + r * cols;
          const double is = (*inv_std)[r];
          for (std::size_t j = 0; j < cols; ++j) {
            const double gg = g[j] * gn->values[j];
            da[j] += is * (gg - inv_n * sum_gg - h[j] * inv_n * sum_ggh);
          }
        }
      }
    };
  }
  return Tensor(out);
}

Tensor gelu(const Tensor& a) {
  auto out = make_node(a.shape(), {a.node()});
  kernels::par::gelu(a.values().data(), out->values.data(), a.numel());
  check_finite(*out, "gelu");
  if (out->requires_grad) {
    auto an = a.node();
    Node* o = out.get();
    out->backward_fn = [an, o] {
      an->ensure_grad();
      kernels::par::gelu_grad(an->values.data(), o->grad.data(), an->grad.data(),
                              an->values.size());
    };
  }
  return Tensor(out);
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  require_2d(table, "embedding_lookup");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      fail("embedding_lookup: id " + std::to_string(id) + " out of range [0," +
           std::to_string(v) + ")");
  auto out = make_node({ids.size(), d}, {table.node()});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.values().data() + static_cast<std::size_t>(ids[i]) * d, d,
                out->values.data() + i * d);
  if (out->requires_grad) {
    auto tn = table.node();
    Node* o = out.get();
    auto ids_copy = ids;
    out->backward_fn = [tn, o, ids_copy, d] {
      tn->ensure_grad();
      for (std::size_t i = 0; i < ids_copy.size(); ++i) {
        double* dst = tn->grad.data() + static_cast<std::size_t>(ids_copy[i]) * d;
        const double* src = o->grad.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  }
  return Tensor(out);
}

Tensor rows_select(const Tensor& a, const std::vector<std::size_t>& rows) {
  require_2d(a, "rows_select");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  for (auto r : rows)
    if (r >= m) fail("rows_select: row " + std::to_string(r) + " out of range");
  auto out = make_node({rows.size(), n}, {a.node()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(a.values().data() + rows[i] * n, n, out->values.data() + i * n);
  if (out->requires_grad) {
    auto an = a.node();
    Node* o = out.get();
    auto rows_copy = rows;
    out->backward_fn = [an, o, rows_copy, n] {
      an->ensure_grad();
      for (std::size_t i = 0; i < rows_copy.size(); ++i) {
        double* dst = an->grad.data() + rows_copy[i] * n;
        const double* src = o->grad.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
      }
    };
  }
  return Tensor(out);
}

Tensor mean_over_span(const Tensor& a, std::size_t start, std::size_t end) {
  require_2d(a, "mean_over_span");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (start >= end || end > m)
    fail("mean_over_span: invalid span [" + std::to_string(start) + "," +
         std::to_string(end) + ") for " + std::to_string(m) + " rows");
  auto out = make_node({1, n}, {a.node()});
  const double inv = 1.0 / static_cast<double>(end - start);
  for (std::size_t r = start; r < end; ++r)
    for (std::size_t j = 0; j < n; ++j) out->values[j] += a.values()[r * n + j] * inv;
  if (out->requires_grad) {
    auto an = a.node();
    Node* o = out.get();
    out->backward_fn = [an, o, start, end, n, inv] {
      an->ensure_grad();
      for (std::size_t r = start; r < end; ++r)
        for (std::size_t j = 0; j < n; ++j) an->grad[r * n + j] += o->grad[j] * inv;
    };
  }
  return Tensor(out);
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) fail("stack_rows: empty input");
  const std::size_t n = rows[0].shape().back();
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& r : rows) {
    if (r.numel() != n) fail("stack_rows: inconsistent row widths");
    parents.push_back(r.node());
  }
  auto out = make_node({rows.size(), n}, std::move(parents));
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(rows[i].values().data(), n, out->values.data() + i * n);
  if (out->requires_grad) {
    Node* o = out.get();
    auto parents_copy = out->parents;
    out->backward_fn = [o, parents_copy, n] {
      for (std::size_t i = 0; i < parents_copy.size(); ++i) {
        auto& p = parents_copy[i];
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (std::size_t j = 0; j < n; ++j) p->grad[j] += o->grad[i * n + j];
      }
    };
  }
  return Tensor(out);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     int ignore_index) {
  require_2d(logits, "cross_entropy");
  const std::size_t rows = logits.shape()[0], v = logits.shape()[1];
  if (targets.size() != rows)
    fail("cross_entropy: target count " + std::to_string(targets.size()) +
         " != rows " + std::to_string(rows));
  auto probs = std::make_shared<std::vector<double>>(rows * v);
  kernels::par::softmax_rows(logits.values().data(), nullptr, probs->data(), rows, v);
  std::size_t count = 0;
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      fail("cross_entropy: target id out of range");
    loss -= std::log((*probs)[r * v + static_cast<std::size_t>(t)]);
    ++count;
  }
  if (count == 0) fail("cross_entropy: no non-ignored targets");
  loss /= static_cast<double>(count);
  auto out = make_node({1}, {logits.node()});
  out->values[0] = loss;
  check_finite(*out, "cross_entropy");
  if (out->requires_grad) {
    auto ln = logits.node();
    Node* o = out.get();
    auto tgt = targets;
    out->backward_fn = [ln, o, probs, tgt, v, count, ignore_index] {
      ln->ensure_grad();
      const double g = o->grad[0] / static_cast<double>(count);
      const std::size_t rows = tgt.size();
      for (std::size_t r = 0; r < rows; ++r) {
        if (tgt[r] == ignore_index) continue;
        double* dl = ln->grad.data() + r * v;
        const double* p = probs->data() + r * v;
        for (std::size_t j = 0; j < v; ++j) dl[j] += g * p[j];
        dl[static_cast<std::size_t>(tgt[r])] -= g;
      }
    };
  }
  return Tensor(out);
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail("mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t n = a.numel();
  auto out = make_node({1}, {a.node(), b.node()});
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.values()[i] - b.values()[i];
    s += d * d;
  }
  out->values[0] = s / static_cast<double>(n);
  check_finite(*out, "mse");
  if (out->requires_grad) {
    auto an = a.node();
    auto bn = b.node();
    Node* o = out.get();
    out->backward_fn = [an, bn, o, n] {
      const double g = o->grad[0] * 2.0 / static_cast<double>(n);
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          an->grad[i] += g * (an->values[i] - bn->values[i]);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          bn->grad[i] -= g * (an->values[i] - bn->values[i]);
      }
    };
  }
  return Tensor(out);
}

Tensor cosine_distance(const Tensor& a, const Tensor& b) {
  require_2d(a, "cosine_distance");
  if (a.shape() != b.shape())
    fail("cosine_distance: shape mismatch");
  const std::size_t rows = a.shape()[0], n = a.shape()[1];
  auto norms = std::make_shared<std::vector<double>>(rows * 3);  // |u|, |v|, cos
  auto out = make_node({1}, {a.node(), b.node()});
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* u = a.values().data() + r * n;
    const double* v = b.values().data() + r * n;
    double uu = 0.0, vv = 0.0, uv = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      uu += u[j] * u[j];
      vv += v[j] * v[j];
      uv += u[j] * v[j];
    }
    const double nu = std::sqrt(uu), nv = std::sqrt(vv);
    if (nu < 1e-300 || nv < 1e-300)
      fail("cosine_distance: zero-norm row " + std::to_string(r));
    const double c = uv / (nu * nv);
    (*norms)[r * 3] = nu;
    (*norms)[r * 3 + 1] = nv;
    (*norms)[r * 3 + 2] = c;
    total += 1.0 - c;
  }
  out->values[0] = total / static_cast<double>(rows);
  check_finite(*out, "cosine_distance");
  if (out->requires_grad) {
    auto an = a.node();
    auto bn = b.node();
    Node* o = out.get();
    out->backward_fn = [an, bn, o, norms, rows, n] {
      const double g = o->grad[0] / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        const double nu = (*norms)[r * 3], nv = (*norms)[r * 3 + 1],
                     c = (*norms)[r * 3 + 2];
        const double* u = an->values.data() + r * n;
        const double* v = bn->values.data() + r * n;
        if (an->requires_grad) {
          an->ensure_grad();
          double* du = an->grad.data() + r * n;
          for (std::size_t j = 0; j < n; ++j)
            du[j] += -g * (v[j] / (nu * nv) - c * u[j] / (nu * nu));
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          double* dv = bn->grad.data() + r * n;
          for (std::size_t j = 0; j < n; ++j)
            dv[j] += -g * (u[j] / (nu * nv) - c * v[j] / (nv * nv));
        }
      }
    };
  }
  return Tensor(out);
}

Tensor sum(const Tensor& a) {
  auto out = make_node({1}, {a.node()});
  double s = 0.0;
  for (double v : a.values()) s += v;
  out->values[0] = s;
  check_finite(*out, "sum");
  if (out->requires_grad) {
    auto an = a.node();
    Node* o = out.get();
    out->backward_fn = [an, o] {
      an->ensure_grad();
      for (auto& g : an->grad) g += o->grad[0];
    };
  }
  return Tensor(out);
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t batch, std::size_t seq_len,
                            std::size_t n_heads,
                            const std::vector<double>& key_pad_mask) {
  require_2d(q, "multi_head_attention");
  const std::size_t rows = q.shape()[0], d = q.shape()[1];
  if (rows != batch * seq_len)
    fail("multi_head_attention: rows != batch*seq_len");
  if (k.shape() != q.shape() || v.shape() != q.shape())
    fail("multi_head_attention: q/k/v shape mismatch");
  if (d % n_heads != 0) fail("multi_head_attention: d not divisible by heads");
  if (key_pad_mask.size() != rows)
    fail("multi_head_attention: mask size mismatch");
  const std::size_t dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto out = make_node({rows, d}, {q.node(), k.node(), v.node()});
  // softmax weights saved for backward: batch x heads x L x L
  auto probs = std::make_shared<std::vector<double>>(batch * n_heads * seq_len * seq_len);

  const std::ptrdiff_t cells = static_cast<std::ptrdiff_t>(batch * n_heads);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t cell = 0; cell < cells; ++cell) {
    const std::size_t b = static_cast<std::size_t>(cell) / n_heads;
    const std::size_t h = static_cast<std::size_t>(cell) % n_heads;
    const std::size_t base_row = b * seq_len;
    const std::size_t col0 = h * dh;
    double* p_cell = probs->data() + static_cast<std::size_t>(cell) * seq_len * seq_len;
    std::vector<double> scores(seq_len);
    for (std::size_t i = 0; i < seq_len; ++i) {
      const double* qi = q.values().data() + (base_row + i) * d + col0;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < seq_len; ++j) {
        const double* kj = k.values().data() + (base_row + j) * d + col0;
        double s = 0.0;
        for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
        s = s * scale + key_pad_mask[base_row + j];
        scores[j] = s;
        if (s > mx) mx = s;
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < seq_len; ++j) {
        const double e = std::exp(scores[j] - mx);
        p_cell[i * seq_len + j] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      double* orow = out->values.data() + (base_row + i) * d + col0;
      for (std::size_t t = 0; t < dh; ++t) orow[t] = 0.0;
      for (std::size_t j = 0; j < seq_len; ++j) {
        const double p = p_cell[i * seq_len + j] * inv;
        p_cell[i * seq_len + j] = p;
        const double* vj = v.values().data() + (base_row + j) * d + col0;
        for (std::size_t t = 0; t < dh; ++t) orow[t] += p * vj[t];
      }
    }
  }
  check_finite(*out, "multi_head_attention");

  if (out->requires_grad) {
    auto qn = q.node();
    auto kn = k.node();
    auto vn = v.node();
    Node* o = out.get();
    out->backward_fn = [qn, kn, vn, o, probs, batch, seq_len, n_heads, dh, d, scale] {
      qn->ensure_grad();
      kn->ensure_grad();
      vn->ensure_grad();
      const std::ptrdiff_t cells = static_cast<std::ptrdiff_t>(batch * n_heads);
      // Each (batch, head) cell touches a disjoint column slice of disjoint
      // row blocks, so parallel accumulation is race-free.
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t cell = 0; cell < cells; ++cell) {
        const std::size_t b = static_cast<std::size_t>(cell) / n_heads;
        const std::size_t h = static_cast<std::size_t>(cell) % n_heads;
        const std::size_t base_row = b * seq_len;
        const std::size_t col0 = h * dh;
        const double* p_cell =
            probs->data() + static_cast<std::size_t>(cell) * seq_len * seq_len;
        std::vector<double> dp(seq_len), ds(seq_len);
        for (std::size_t i = 0; i < seq_len; ++i) {
          const double* go = o->grad.data() + (base_row + i) * d + col0;
          // dV and dP
          double dot = 0.0;
          for (std::size_t j = 0; j < seq_len; ++j) {
            const double* vj = vn->values.data() + (base_row + j) * d + col0;
            double s = 0.0;
            for (std::size_t t = 0; t < dh; ++t) s += go[t] * vj[t];
            dp[j] = s;
            dot += s * p_cell[i * seq_len + j];
            double* dvj = vn->grad.data() + (base_row + j) * d + col0;
            const double p = p_cell[i * seq_len + j];
            for (std::size_t t = 0; t < dh; ++t) dvj[t] += p * go[t];
          }
          // softmax backward then score backward
          const double* qi = qn->values.data() + (base_row + i) * d + col0;
          double* dqi = qn->grad.data() + (base_row + i) * d + col0;
          for (std::size_t j = 0; j < seq_len; ++j) {
            ds[j] = p_cell[i * seq_len + j] * (dp[j] - dot) * scale;
            const double* kj = kn->values.data() + (base_row + j) * d + col0;
            double* dkj = kn->grad.data() + (base_row + j) * d + col0;
            for (std::size_t t = 0; t < dh; ++t) {
              dqi[t] += ds[j] * kj[t];
              dkj[t] += ds[j] * qi[t];
            }
          }
        }
      }
    };
  }
  return Tensor(out);
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) fail("backward: loss must be scalar");
  auto root = loss.node();
  if (root->consumed) fail("backward: graph already consumed; re-run forward first");
  // topo order by DFS
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (!seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->requires_grad) n->backward_fn();
  }
  // free the tape
  for (Node* n : order) {
    n->backward_fn = nullptr;
    if (n != root.get()) n->consumed = true;
    n->parents.clear();
  }
  root->consumed = true;
}

void AdamState::init(const std::vector<Tensor>& params) {
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(p.numel(), 0.0);
    v.emplace_back(p.numel(), 0.0);
  }
  t = 0;
}

void adam_step(std::vector<Tensor>& params, AdamState& state) {
  if (state.m.size() != params.size())
    fail("adam_step: state not initialized for this parameter list");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p.numel() != state.m[i].size()) fail("adam_step: shape drift in state");
    const auto& g = p.grad();
    auto& vals = p.values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < vals.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      vals[j] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

double finite_diff_check(const std::function<Tensor()>& f,
                         std::vector<Tensor>& params, double h) {
  for (auto& p : params) p.zero_grad();
  Tensor loss = f();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.push_back(p.grad());

  double max_rel = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& vals = params[i].values();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double orig = vals[j];
      vals[j] = orig + h;
      const double fp = f().item();
      vals[j] = orig - h;
      const double fm = f().item();
      vals[j] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i][j];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace finedeb
