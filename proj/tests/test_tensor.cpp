#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "finedeb/common.hpp"
#include "finedeb/tensor.hpp"

using namespace finedeb;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Square with a deliberately wrong derivative (3x instead of 2x); used as the
// corrupted-gradient control for the finite-difference checker.
Tensor buggy_square(const Tensor& a) {
  auto n = std::make_shared<detail::Node>();
  n->shape = a.shape();
  n->values.resize(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i)
    n->values[i] = a.values()[i] * a.values()[i];
  n->parents = {a.node()};
  n->requires_grad = a.requires_grad();
  auto an = a.node();
  detail::Node* o = n.get();
  if (n->requires_grad)
    n->backward_fn = [an, o] {
      an->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i)
        an->grad[i] += o->grad[i] * 3.0 * an->values[i];
    };
  return Tensor(std::move(n));
}

}  // namespace

TEST_CASE("elementwise product gradient is the other factor") {
  auto a = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  auto b = Tensor::from({3}, {4.0, 0.25, -3.0}, true);
  auto loss = sum(mul(a, b));
  CHECK(loss.item() == doctest::Approx(4.0 - 0.5 - 1.5).epsilon(1e-14));
  backward(loss);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a.grad()[i] == b.values()[i]);
    CHECK(b.grad()[i] == a.values()[i]);
  }
}

TEST_CASE("matmul gradients match the transpose identities") {
  auto a = Tensor::from({2, 2}, {1.0, 2.0, 3.0, 4.0}, true);
  auto b = Tensor::from({2, 2}, {5.0, 6.0, 7.0, 8.0}, true);
  auto loss = sum(matmul(a, b));
  backward(loss);
  // dL/dA = 1 * B^T, dL/dB = A^T * 1
  CHECK(a.grad() == std::vector<double>{11.0, 15.0, 11.0, 15.0});
  CHECK(b.grad() == std::vector<double>{4.0, 4.0, 6.0, 6.0});
}

TEST_CASE("cross entropy ignores masked targets and has softmax-minus-onehot grad") {
  auto logits = Tensor::from({2, 3}, {0.2, 1.1, -0.4, 2.0, 0.0, 1.0}, true);
  auto loss = cross_entropy(logits, {1, -100}, -100);
  // only row 0 counts
  const double z = std::exp(0.2) + std::exp(1.1) + std::exp(-0.4);
  CHECK(loss.item() == doctest::Approx(-std::log(std::exp(1.1) / z)).epsilon(1e-12));
  backward(loss);
  for (std::size_t j = 0; j < 3; ++j) {
    const double p = std::exp(logits.values()[j]) / z;
    const double want = p - (j == 1 ? 1.0 : 0.0);
    CHECK(logits.grad()[j] == doctest::Approx(want).epsilon(1e-12));
    CHECK(logits.grad()[3 + j] == 0.0);
  }
}

TEST_CASE("mse value and gradient") {
  auto a = Tensor::from({2, 2}, {1.0, 2.0, 3.0, 4.0}, true);
  auto b = Tensor::from({2, 2}, {0.0, 2.0, 5.0, 3.0}, false);
  auto loss = mse(a, b);
  CHECK(loss.item() == doctest::Approx((1.0 + 0.0 + 4.0 + 1.0) / 4.0).epsilon(1e-14));
  backward(loss);
  CHECK(a.grad()[0] == doctest::Approx(2.0 * 1.0 / 4.0).epsilon(1e-14));
  CHECK(a.grad()[2] == doctest::Approx(2.0 * -2.0 / 4.0).epsilon(1e-14));
}

TEST_CASE("cosine distance on hand vectors") {
  auto a = Tensor::from({2, 2}, {1.0, 0.0, 1.0, 1.0}, false);
  auto b = Tensor::from({2, 2}, {0.0, 1.0, 1.0, 1.0}, false);
  auto d = cosine_distance(a, b);
  // row 0: orthogonal -> 1; row 1: identical -> 0; mean = 0.5
  CHECK(d.item() == doctest::Approx(0.5).epsilon(1e-14));

  auto z = Tensor::from({1, 2}, {0.0, 0.0}, false);
  CHECK_THROWS_AS((void)cosine_distance(z, b), FinedebError);
}

TEST_CASE("row selection, span mean and stacking") {
  auto a = Tensor::from({3, 2}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0}, true);
  auto sel = rows_select(a, {2, 0});
  CHECK(sel.values() == std::vector<double>{5.0, 6.0, 1.0, 2.0});

  auto m = mean_over_span(a, 1, 3);
  CHECK(m.shape() == Shape{1, 2});
  CHECK(m.values() == std::vector<double>{4.0, 5.0});

  auto s = stack_rows({mean_over_span(a, 0, 1), mean_over_span(a, 2, 3)});
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s.values() == std::vector<double>{1.0, 2.0, 5.0, 6.0});

  auto loss = sum(m);
  backward(loss);
  CHECK(a.grad() == std::vector<double>{0.0, 0.0, 0.5, 0.5, 0.5, 0.5});
}

TEST_CASE("single-head attention matches a by-hand computation") {
  Rng rng(11);
  const std::size_t L = 3, d = 4;
  auto q = random_tensor({L, d}, rng, false);
  auto k = random_tensor({L, d}, rng, false);
  auto v = random_tensor({L, d}, rng, false);
  std::vector<double> no_mask(L, 0.0);
  auto out = multi_head_attention(q, k, v, 1, L, 1, no_mask);

  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < L; ++i) {
    double logits[L], w[L], mx = -1e300, z = 0.0;
    for (std::size_t j = 0; j < L; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < d; ++c)
        s += q.values()[i * d + c] * k.values()[j * d + c];
      logits[j] = s * inv;
      mx = std::max(mx, logits[j]);
    }
    for (std::size_t j = 0; j < L; ++j) z += (w[j] = std::exp(logits[j] - mx));
    for (std::size_t c = 0; c < d; ++c) {
      double want = 0;
      for (std::size_t j = 0; j < L; ++j)
        want += w[j] / z * v.values()[j * d + c];
      CHECK(out.values()[i * d + c] == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("attention ignores masked key positions") {
  Rng rng(12);
  const std::size_t L = 4, d = 4;
  auto q = random_tensor({L, d}, rng, false);
  auto k = random_tensor({L, d}, rng, false);
  auto v = random_tensor({L, d}, rng, false);

  std::vector<double> mask(L, 0.0);
  mask[3] = -1e30;  // pad the last position
  auto masked = multi_head_attention(q, k, v, 1, L, 2, mask);

  // changing the padded key/value must not change unpadded outputs
  auto k2v = k.values();
  auto v2v = v.values();
  for (std::size_t c = 0; c < d; ++c) {
    k2v[3 * d + c] += 7.0;
    v2v[3 * d + c] -= 3.0;
  }
  auto k2 = Tensor::from({L, d}, k2v, false);
  auto v2 = Tensor::from({L, d}, v2v, false);
  auto masked2 = multi_head_attention(q, k2, v2, 1, L, 2, mask);
  for (std::size_t i = 0; i < 3 * d; ++i)
    CHECK(masked.values()[i] == doctest::Approx(masked2.values()[i]).epsilon(1e-12));
}

TEST_CASE("finite differences validate a composite graph") {
  Rng rng(21);
  auto w1 = random_tensor({4, 6}, rng, true);
  auto b1 = random_tensor({6}, rng, true);
  auto gain = Tensor::from({6}, std::vector<double>(6, 1.0), true);
  auto bias = Tensor::zeros({6}, true);
  auto w2 = random_tensor({6, 3}, rng, true);
  auto x = random_tensor({5, 4}, rng, false);
  auto target = random_tensor({5, 3}, rng, false);

  std::vector<Tensor> params = {w1, b1, gain, bias, w2};
  auto f = [&] {
    auto h = gelu(add(matmul(x, w1), b1));
    h = layer_norm(h, gain, bias);
    auto y = matmul(h, w2);
    return mse(softmax(y), target);
  };
  CHECK(finite_diff_check(f, params, 1e-5) <= 1e-4);
}

TEST_CASE("finite differences validate attention and embeddings") {
  Rng rng(22);
  const std::size_t L = 3, d = 4;
  auto table = random_tensor({6, d}, rng, true);
  auto wq = random_tensor({d, d}, rng, true);
  std::vector<double> mask(L, 0.0);
  mask[2] = -1e30;
  std::vector<Tensor> params = {table, wq};
  auto f = [&] {
    auto e = embedding_lookup(table, {1, 4, 0});
    auto q = matmul(e, wq);
    auto o = multi_head_attention(q, e, e, 1, L, 2, mask);
    auto s = mean_over_span(o, 0, 2);
    return sum(mul(s, s));
  };
  CHECK(finite_diff_check(f, params, 1e-5) <= 1e-4);
}

TEST_CASE("corrupted gradient is caught by the finite-difference checker") {
  auto p = Tensor::from({3}, {0.7, -1.3, 0.4}, true);
  std::vector<Tensor> params = {p};
  auto f = [&] { return sum(buggy_square(p)); };
  CHECK(finite_diff_check(f, params, 1e-5) > 1e-2);
}

TEST_CASE("adam step matches the hand-computed update") {
  auto p = Tensor::from({2}, {1.0, -2.0}, true);
  std::vector<Tensor> params = {p};
  AdamState st;
  st.lr = 0.01;
  st.init(params);

  auto loss = scale(sum(p), 0.5);  // grad = 0.5 everywhere
  backward(loss);
  adam_step(params, st);

  const double g = 0.5;
  const double m_hat = g;          // bias-corrected first moment after step 1
  const double v_hat = g * g;      // bias-corrected second moment
  const double delta = 0.01 * m_hat / (std::sqrt(v_hat) + 1e-8);
  CHECK(p.values()[0] == doctest::Approx(1.0 - delta).epsilon(1e-14));
  CHECK(p.values()[1] == doctest::Approx(-2.0 - delta).epsilon(1e-14));
  CHECK(st.t == 1);
}

TEST_CASE("backward can only run once per graph") {
  auto p = Tensor::from({2}, {1.0, 2.0}, true);
  auto loss = sum(mul(p, p));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), FinedebError);
}

TEST_CASE("non-finite intermediate values are rejected") {
  auto a = Tensor::from({2}, {1e308, 1e308}, false);
  CHECK_THROWS_AS((void)add(a, a), FinedebError);
}

TEST_CASE("softmax tensor rows sum to one under a mask") {
  Rng rng(31);
  auto a = random_tensor({4, 5}, rng, false);
  std::vector<double> mv(20, 0.0);
  mv[3] = mv[8] = -1e30;
  auto mask = Tensor::from({4, 5}, mv, false);
  auto y = softmax(a, mask);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) s += y.values()[r * 5 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(y.values()[3] == 0.0);
  CHECK(y.values()[8] == 0.0);
}
