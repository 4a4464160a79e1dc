#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "ase/gradcheck.hpp"
#include "ase/nn.hpp"
#include "ase/tensor.hpp"

namespace ase {
namespace {

using T = Tensor<double>;
using M = MatrixX<double>;

T random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  auto [r, c] = matrix_dims(shape);
  M m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return T(std::move(shape), std::move(m));
}

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(T(Shape{2, 3}, M::Zero(2, 2)), DimensionError);
  EXPECT_THROW(T::zeros(Shape{0, 2}), DimensionError);
  T t = T::zeros(Shape{2, 3, 4});
  EXPECT_EQ(t.numel(), 24);
  EXPECT_EQ(t.rows(), 6);
  EXPECT_EQ(t.cols(), 4);
  EXPECT_FALSE(t.recorded());
}

TEST(Tensor, FiniteCheckIsExplicit) {
  T t = T::from(Shape{2}, {1.0, std::nan("")});
  EXPECT_FALSE(t.all_finite());
  EXPECT_THROW(t.check_finite("probe"), NumericError);
  EXPECT_NO_THROW(T::ones(Shape{3}).check_finite("probe"));
}

TEST(MatMul, Examples) {
  std::mt19937_64 rng(1);
  T x = random_tensor({2, 5}, rng);
  T id(M(M::Identity(2, 2)));
  EXPECT_EQ(matmul(id, x).value(), x.value());

  T a = T::from({2, 2}, {1, 2, 3, 4});
  T b = T::from({2, 1}, {1, 1});
  T c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c(0, 0), 3.0);
  EXPECT_EQ(c(1, 0), 7.0);

  T z = matmul(T::zeros({2, 3}), random_tensor({3, 4}, rng));
  EXPECT_EQ(z.shape(), (Shape{2, 4}));
  EXPECT_TRUE(z.value().isZero(0.0));

  EXPECT_THROW(matmul(T::zeros({2, 3}), T::zeros({2, 3})), DimensionError);
}

TEST(MatMul, RecordedWhenEitherInputIs) {
  Tape<double> tape;
  T a = tape.leaf(T::ones({2, 2}));
  T b = T::ones({2, 2});
  EXPECT_TRUE(matmul(a, b).recorded());
  EXPECT_TRUE(matmul(b, a).recorded());
  EXPECT_FALSE(matmul(b, b).recorded());
}

TEST(Softmax, Examples) {
  T u = softmax_rows(T::zeros({1, 3}));
  for (Index j = 0; j < 3; ++j) EXPECT_NEAR(u(0, j), 1.0 / 3.0, 1e-15);

  T big = softmax_rows(T::from({1, 2}, {1e4, 0.0}));
  EXPECT_TRUE(big.all_finite());
  EXPECT_NEAR(big(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(big(0, 1), 0.0, 1e-12);

  T l2 = softmax_rows(T::from({1, 2}, {std::log(2.0), 0.0}));
  EXPECT_NEAR(l2(0, 0), 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(l2(0, 1), 1.0 / 3.0, 1e-12);
}

TEST(Softmax, RowsAreDistributions) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    T p = softmax_rows(random_tensor({4, 9}, rng, 20.0));
    for (Index r = 0; r < 4; ++r) {
      EXPECT_NEAR(p.value().row(r).sum(), 1.0, 1e-6);
      EXPECT_GE(p.value().row(r).minCoeff(), 0.0);
      EXPECT_LE(p.value().row(r).maxCoeff(), 1.0);
    }
  }
}

TEST(Elementwise, ReluGeluLayerNormExamples) {
  T r = relu(T::from({3}, {-1, 0, 2}));
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 0.0);
  EXPECT_EQ(r[2], 2.0);

  EXPECT_EQ(gelu(T::scalar(0.0)).item(), 0.0);

  T ln = layer_norm(T::from({1, 4}, {5, 5, 5, 5}), T::ones({4}), T::zeros({4}));
  for (Index j = 0; j < 4; ++j) EXPECT_EQ(ln(0, j), 0.0);
  EXPECT_TRUE(ln.all_finite());
}

TEST(Elementwise, ReluIsIdempotent) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    T x = random_tensor({5, 7}, rng);
    EXPECT_EQ(relu(relu(x)).value(), relu(x).value());
  }
}

TEST(Elementwise, LayerNormStandardizesRows) {
  std::mt19937_64 rng(11);
  T x = random_tensor({6, 16}, rng, 30.0);
  T y = layer_norm(x, T::ones({16}), T::zeros({16}));
  for (Index r = 0; r < 6; ++r) {
    const double mu = y.value().row(r).mean();
    const double var = (y.value().row(r).array() - mu).square().mean();
    EXPECT_NEAR(mu, 0.0, 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-5);
  }
}

TEST(Elementwise, NoImplicitBroadcasting) {
  EXPECT_THROW(add(T::zeros({2, 3}), T::zeros({3})), DimensionError);
  EXPECT_THROW(mul(T::zeros({2, 3}), T::zeros({3, 2})), DimensionError);
  EXPECT_THROW(add_bias(T::zeros({2, 3}), T::zeros({2})), DimensionError);
  EXPECT_NO_THROW(add_bias(T::zeros({2, 3}), T::zeros({3})));
}

TEST(Backward, Examples) {
  std::mt19937_64 rng(5);
  Tape<double> tape;
  T x = tape.leaf(random_tensor({3, 4}, rng));
  auto g = tape.backward(sum(x));
  EXPECT_TRUE(g.at(x).value().isOnes(0.0));

  Tape<double> t2;
  T s = t2.leaf(T::scalar(3.0));
  EXPECT_EQ(t2.backward(mul(s, s)).at(s).item(), 6.0);
}

TEST(Backward, ContractErrors) {
  Tape<double> tape;
  T x = tape.leaf(T::ones({2, 2}));
  EXPECT_THROW(tape.backward(x), ContractError);                 // not scalar
  EXPECT_THROW(tape.backward(T::scalar(1.0)), ContractError);    // not on tape
  Tape<double> other;
  T y = other.leaf(T::scalar(1.0));
  EXPECT_THROW(tape.backward(y), ContractError);                 // another tape
  EXPECT_THROW(add(x, other.leaf(T::ones({2, 2}))), ContractError);
}

TEST(Backward, IntermediateNodeGradient) {
  // root = sum(relu(W x)^2); d root / d(Wx) = 2 relu(Wx) * [Wx > 0].
  std::mt19937_64 rng(9);
  Tape<double> tape;
  T w = tape.leaf(random_tensor({4, 3}, rng));
  T x = random_tensor({3, 2}, rng);
  T y = matmul(w, x);
  T z = relu(y);
  auto g = tape.backward(sum(mul(z, z)));
  M expected = (y.value().array() > 0).select(2.0 * y.value().array(), 0.0).matrix();
  EXPECT_LT((g.at(y).value() - expected).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_EQ(g.at(y).shape(), y.shape());
}

TEST(Backward, Deterministic) {
  std::mt19937_64 rng(13);
  T a = random_tensor({5, 8}, rng);
  T b = random_tensor({8, 8}, rng);
  auto run = [&] {
    Tape<double> tape;
    T la = tape.leaf(a);
    T h = gelu(matmul(la, b));
    T p = softmax_rows(h);
    return tape.backward(sum(mul(p, h))).at(la).value();
  };
  M first = run();
  M second = run();
  EXPECT_EQ(0, std::memcmp(first.data(), second.data(), sizeof(double) * std::size_t(first.size())));
}

TEST(FiniteDiff, Examples) {
  std::mt19937_64 rng(2);
  T x = random_tensor({3, 3}, rng);
  T g = finite_diff_gradient<double>([](const T& t) { return t.value().sum(); }, x, 1e-5);
  EXPECT_LT((g.value().array() - 1.0).abs().maxCoeff(), 1e-9);

  T c = finite_diff_gradient<double>([](const T& t) { return std::pow(t.item(), 3); }, T::scalar(2.0), 1e-5);
  EXPECT_NEAR(c.item(), 12.0, 1e-8);
  EXPECT_THROW(finite_diff_gradient<double>([](const T& t) { return t.item(); }, T::scalar(0.0), 0.0),
               ContractError);
}

// Every differentiable op: reverse-mode vs central differences on random inputs.
struct OpCase {
  const char* name;
  std::vector<Shape> inputs;
  std::function<T(const std::vector<T>&)> fn;
};

void check_op(const OpCase& op, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<T> xs;
  for (const auto& s : op.inputs) xs.push_back(random_tensor(s, rng));
  T probe = op.fn(xs);
  T weights = random_tensor(probe.shape(), rng);
  auto loss = [&](const std::vector<T>& in) { return sum(mul(op.fn(in), weights)); };

  Tape<double> tape;
  std::vector<T> leaves;
  for (const auto& x : xs) leaves.push_back(tape.leaf(x));
  auto grads = tape.backward(loss(leaves));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    T fd = finite_diff_gradient<double>(
        [&](const T& xi) {
          auto in = xs;
          in[i] = xi;
          return loss(in).item();
        },
        xs[i], 1e-5);
    ASSERT_TRUE(grads.contains(leaves[i])) << op.name << " input " << i;
    EXPECT_LT(max_relative_error(grads.at(leaves[i]).value(), fd.value()), 1e-4)
        << op.name << " input " << i << " seed " << seed;
  }
}

TEST(GradCheck, EveryOpAgreesWithFiniteDifferences) {
  const Index tgt[] = {2, -1, 0, 4};
  const std::vector<Index> rows = {3, 0, 3, 1};
  std::vector<Index> perm = {5, 3, 1, 0, 2, 4};
  const std::vector<OpCase> ops = {
      {"matmul", {{3, 4}, {4, 2}}, [](auto& x) { return matmul(x[0], x[1]); }},
      {"transpose", {{3, 4}}, [](auto& x) { return transpose(x[0]); }},
      {"reshape", {{3, 4}}, [](auto& x) { return reshape(x[0], Shape{2, 6}); }},
      {"add", {{3, 4}, {3, 4}}, [](auto& x) { return add(x[0], x[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](auto& x) { return sub(x[0], x[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](auto& x) { return mul(x[0], x[1]); }},
      {"scale", {{3, 4}}, [](auto& x) { return scale(x[0], 1.7); }},
      {"add_scalar", {{3, 4}}, [](auto& x) { return add_scalar(x[0], -0.3); }},
      {"add_bias", {{3, 4}, {4}}, [](auto& x) { return add_bias(x[0], x[1]); }},
      {"scale_rows", {{3, 4}, {3}}, [](auto& x) { return scale_rows(x[0], x[1]); }},
      {"relu", {{3, 4}}, [](auto& x) { return relu(x[0]); }},
      {"gelu", {{3, 4}}, [](auto& x) { return gelu(x[0]); }},
      {"layer_norm", {{3, 5}, {5}, {5}}, [](auto& x) { return layer_norm(x[0], x[1], x[2]); }},
      {"softmax_rows", {{3, 5}}, [](auto& x) { return softmax_rows(x[0]); }},
      {"mean_rows", {{3, 5}}, [](auto& x) { return mean_rows(x[0]); }},
      {"mean", {{3, 5}}, [](auto& x) { return mean(x[0]); }},
      {"select", {{3, 5}}, [](auto& x) { return select(x[0], 7); }},
      {"concat_rows", {{2, 3}, {1, 3}}, [](auto& x) { return concat_rows<double>({x[0], x[1]}); }},
      {"slice_rows", {{4, 3}}, [](auto& x) { return slice_rows(x[0], 1, 2); }},
      {"gather_rows", {{4, 3}}, [rows](auto& x) { return gather_rows(x[0], std::span<const Index>(rows)); }},
      {"gather", {{2, 3}}, [perm](auto& x) { return gather(x[0], perm, Shape{3, 2}); }},
      {"cross_entropy", {{4, 5}}, [&tgt](auto& x) { return cross_entropy_sum(x[0], std::span<const Index>(tgt)); }},
      {"attention", {{3, 4}, {5, 4}, {5, 4}}, [](auto& x) { return attention(x[0], x[1], x[2], 2); }},
      {"attention_causal", {{4, 4}, {4, 4}, {4, 4}},
       [](auto& x) { return attention(x[0], x[1], x[2], 2, AttentionMask{true, 1}); }},
  };
  for (const auto& op : ops)
    for (std::uint64_t seed = 0; seed < 20; ++seed) check_op(op, seed);
}

TEST(Attention, FusedMatchesComposedRoute) {
  std::mt19937_64 rng(21);
  T q = random_tensor({4, 6}, rng), k = random_tensor({5, 6}, rng), v = random_tensor({5, 6}, rng);
  T fused = attention(q, k, v, 2);
  M composed(4, 6);
  for (Index h = 0; h < 2; ++h) {
    T qh(M(q.value().middleCols(h * 3, 3))), kh(M(k.value().middleCols(h * 3, 3))), vh(M(v.value().middleCols(h * 3, 3)));
    T p = softmax_rows(scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(3.0)));
    composed.middleCols(h * 3, 3) = matmul(p, vh).value();
  }
  EXPECT_LT((fused.value() - composed).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Attention, CausalMaskHidesFuture) {
  std::mt19937_64 rng(4);
  T x = random_tensor({5, 4}, rng);
  T base = attention(x, x, x, 2, AttentionMask{true, 0});
  M changed = x.value();
  changed.row(4).setConstant(9.0);
  T y(changed);
  T out = attention(y, y, y, 2, AttentionMask{true, 0});
  EXPECT_EQ(M(out.value().topRows(4)), M(base.value().topRows(4)));
}

TEST(CrossEntropy, IgnoredRowsGetZeroGradient) {
  std::mt19937_64 rng(8);
  Tape<double> tape;
  T logits = tape.leaf(random_tensor({3, 4}, rng));
  const Index targets[] = {1, -1, 2};
  auto g = tape.backward(cross_entropy_sum(logits, std::span<const Index>(targets))).at(logits);
  EXPECT_TRUE(g.value().row(1).isZero(0.0));
  EXPECT_FALSE(g.value().row(0).isZero(0.0));
}

TEST(Parameters, TapeBindingAccumulates) {
  Rng rng(1);
  Linear<double> lin("lin", 3, 2, rng);
  auto params = collect_parameters<double>(lin);
  EXPECT_EQ(params.size(), 2u);
  EXPECT_EQ(params.scalar_count(), 8);
  Tape<double> tape;
  T x = T::ones({4, 3});
  T y = lin.forward(tape, x);
  params.zero_grad();
  params.accumulate(tape, tape.backward(sum(y)));
  EXPECT_TRUE(lin.bias.grad.isConstant(4.0, 0.0));
  EXPECT_TRUE(lin.weight.grad.isConstant(4.0, 0.0));
}

}  // namespace
}  // namespace ase
