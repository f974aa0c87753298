#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "finedeb/common.hpp"

namespace finedeb {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily, same length as values
  bool requires_grad = false;
  bool consumed = false;  // set once backward() has run through this node
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};
}  // namespace detail

// Dense row-major 64-bit tensor participating in a reverse-mode graph.
// Copying a Tensor copies the handle; the underlying storage is shared.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->values.size(); }
  std::vector<double>& values() { return node_->values; }
  const std::vector<double>& values() const { return node_->values; }
  const std::vector<double>& grad() const;
  bool requires_grad() const { return node_->requires_grad; }
  double item() const;

  void zero_grad();
  // Drops the autograd tape below this tensor, keeping its values.
  Tensor detach() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// ---- core ops ----
Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k)x(k,n)
// Same-shape addition, or bias broadcast: b of shape (n) added to every row
// of a (m,n).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor scale(const Tensor& a, double s);
// Softmax over the last axis; mask, when defined, is added to the logits
// before normalization (no gradient flows into it).
Tensor softmax(const Tensor& a, const Tensor& mask = Tensor());
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor gelu(const Tensor& a);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor rows_select(const Tensor& a, const std::vector<std::size_t>& rows);
// Mean of rows [start, end) of a 2D tensor -> shape (1, n).
Tensor mean_over_span(const Tensor& a, std::size_t start, std::size_t end);
Tensor stack_rows(const std::vector<Tensor>& rows);  // each (1,n) -> (m,n)
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     int ignore_index);
Tensor mse(const Tensor& a, const Tensor& b);
// Mean over rows of (1 - cosine similarity); errors on zero-norm rows.
Tensor cosine_distance(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& a);

// Fused multi-head self-attention over q,k,v of shape (B*L, d).
// key_pad_mask has B*L entries, additive per key position (0 keeps,
// large-negative removes).
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t batch, std::size_t seq_len,
                            std::size_t n_heads,
                            const std::vector<double>& key_pad_mask);

// Reverse-mode sweep from a scalar loss; frees the tape. Calling it twice on
// the same graph is an error.
void backward(const Tensor& loss);

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m, v;

  void init(const std::vector<Tensor>& params);
};

void adam_step(std::vector<Tensor>& params, AdamState& state);

// Central-difference gradient verification. f rebuilds the scalar loss from
// the current parameter values. Returns the max relative error with
// denominator max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(const std::function<Tensor()>& f,
                         std::vector<Tensor>& params, double h);

}  // namespace finedeb
