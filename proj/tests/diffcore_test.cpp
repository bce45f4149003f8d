#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "palp/diffcore/gradcheck.hpp"
#include "palp/diffcore/tape.hpp"

namespace palp {
namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = nd(rng);
  return t;
}

TEST(Grad, SquareAtThree) {
  Tape tape;
  Tensor x = Tensor::scalar(3.0);
  Var xv = tape.leaf(x);
  Var f = sum(mul(xv, xv));
  auto g = grad(f, {xv});
  EXPECT_DOUBLE_EQ(g[0].item(), 6.0);
}

TEST(Grad, SumGivesOnes) {
  std::mt19937_64 rng(1);
  for (Shape s : {Shape{5}, Shape{3, 4}, Shape{2, 3, 2}}) {
    Tape tape;
    Tensor x = random_tensor(s, rng);
    Var xv = tape.leaf(x);
    auto g = grad(sum(xv), {xv});
    EXPECT_EQ(g[0], Tensor(s, 1.0));
  }
}

TEST(Grad, MseOfMatVecMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const Tensor v = random_tensor({4}, rng);
  const Tensor y = random_tensor({4}, rng);
  TapeFunction f = [&](Tape& t, std::span<const Var> p) {
    return mse(matmul(p[0], t.constant(v)), t.constant(y));
  };
  const Tensor w = random_tensor({4, 4}, rng);
  auto report = check_grad(f, {w}, 1e-6);
  EXPECT_TRUE(report.pass) << report.max_rel_err;
}

TEST(Grad, AbsentPathGivesZero) {
  Tape tape;
  Tensor a = Tensor::vector({1, 2});
  Tensor b = Tensor::vector({3, 4});
  Var av = tape.leaf(a), bv = tape.leaf(b);
  auto g = grad(sum(av), {av, bv});
  EXPECT_EQ(g[1], Tensor(Shape{2}, 0.0));
}

TEST(Grad, NonScalarRootThrows) {
  Tape tape;
  Tensor a = Tensor::vector({1, 2});
  Var av = tape.leaf(a);
  EXPECT_THROW(grad(scale(av, 2.0), {av}), ShapeError);
}

TEST(Grad, NonFiniteForwardThrows) {
  Tape tape;
  Tensor a = Tensor::vector({1e200, 1e200});
  Var av = tape.leaf(a);
  EXPECT_THROW(mul(av, av), NumericError);
}

TEST(Grad, NonFiniteBackwardThrows) {
  Tape tape;
  Tensor a = Tensor::vector({1, 2});
  Var av = tape.leaf(a);
  const Var in[] = {av};
  Var bad = custom(in, a, [](const Tensor& g, const std::vector<const Tensor*>&) {
    Tensor out(g.shape(), NAN);
    return std::vector<Tensor>{out};
  });
  EXPECT_THROW(grad(sum(bad), {av}), NumericError);
}

TEST(Grad, SameTensorBindsToOneLeaf) {
  Tape tape;
  Tensor a = Tensor::vector({1, 2});
  Var first = tape.leaf(a);
  Var second = tape.leaf(a);
  EXPECT_EQ(first.id, second.id);
  EXPECT_THROW(tape.frozen(a), Error);
  auto g = grad(add(sum(first), sum(second)), {first});
  EXPECT_EQ(g[0], Tensor(Shape{2}, 2.0));
}

TEST(FdGrad, SquareAtOne) {
  auto g = fd_grad([](std::span<const Tensor> p) { return p[0][0] * p[0][0]; },
                   {Tensor::scalar(1.0)}, 1e-5);
  EXPECT_NEAR(g[0].item(), 2.0, 1e-9);
}

TEST(FdGrad, ConstantIsZero) {
  auto g = fd_grad([](std::span<const Tensor>) { return 4.25; },
                   {Tensor(Shape{3, 2}, 0.5)});
  EXPECT_EQ(g[0], Tensor(Shape{3, 2}, 0.0));
}

TEST(FdGrad, RejectsBadStepAndNonFinite) {
  EXPECT_THROW(fd_grad([](std::span<const Tensor>) { return 0.0; }, {Tensor::scalar(1)}, 0.0),
               Error);
  EXPECT_THROW(fd_grad([](std::span<const Tensor>) { return NAN; }, {Tensor::scalar(1)}),
               NumericError);
}

TEST(CheckGrad, QuadraticFormPasses) {
  std::mt19937_64 rng(3);
  const Tensor q = random_tensor({5, 5}, rng);
  TapeFunction f = [&](Tape& t, std::span<const Var> p) {
    return dot(p[0], matmul(t.constant(q), p[0]));
  };
  auto r = check_grad(f, {random_tensor({5}, rng)}, 1e-4);
  EXPECT_TRUE(r.pass);
  EXPECT_LT(r.max_rel_err, 1e-7);
}

TEST(CheckGrad, CorruptedBackwardFails) {
  // value x^2 but backward claims 3x
  TapeFunction f = [](Tape&, std::span<const Var> p) {
    Tensor v = p[0].value();
    for (double& e : v.data()) e = e * e;
    Var y = custom(p.subspan(0, 1), v, [](const Tensor& g, const std::vector<const Tensor*>& in) {
      Tensor out = *in[0];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = 3.0 * out[i] * g[i];
      return std::vector<Tensor>{out};
    });
    return sum(y);
  };
  auto r = check_grad(f, {Tensor::vector({1.0, -2.0, 0.5})}, 1e-4);
  EXPECT_FALSE(r.pass);
  EXPECT_GT(r.max_rel_err, 1e-4);
}

TEST(CheckGrad, NoParametersIsVacuousPass) {
  TapeFunction f = [](Tape& t, std::span<const Var>) { return t.constant(Tensor::scalar(1)); };
  auto r = check_grad(f, {}, 1e-4);
  EXPECT_TRUE(r.pass);
  EXPECT_EQ(r.max_rel_err, 0.0);
}

// Every primitive against central differences on random inputs and shapes.
TEST(Property, EveryPrimitiveMatchesFiniteDifferences) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> dim(1, 5);
  std::size_t cases = 0;
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t n = dim(rng), k = dim(rng), m = dim(rng);
    const Tensor target = random_tensor({n, m}, rng);
    std::vector<std::pair<std::string, std::pair<TapeFunction, std::vector<Tensor>>>> ops;
    // Wrap non-scalar outputs with a random projection so every output
    // coordinate contributes to the checked scalar.
    const Tensor proj_nk = random_tensor({n, k}, rng);
    const Tensor proj_nm = random_tensor({n, m}, rng);
    auto project = [](Tape& t, Var v, const Tensor& p) { return dot(v, t.constant(p)); };
    ops.push_back({"add", {[&](Tape& t, std::span<const Var> p) {
                             return project(t, add(p[0], p[1]), proj_nk);
                           },
                           {random_tensor({n, k}, rng), random_tensor({n, k}, rng)}}});
    ops.push_back({"sub", {[&](Tape& t, std::span<const Var> p) {
                             return project(t, sub(p[0], p[1]), proj_nk);
                           },
                           {random_tensor({n, k}, rng), random_tensor({n, k}, rng)}}});
    ops.push_back({"mul", {[&](Tape& t, std::span<const Var> p) {
                             return project(t, mul(p[0], p[1]), proj_nk);
                           },
                           {random_tensor({n, k}, rng), random_tensor({n, k}, rng)}}});
    ops.push_back({"scale", {[&](Tape& t, std::span<const Var> p) {
                               return project(t, scale(p[0], -1.7), proj_nk);
                             },
                             {random_tensor({n, k}, rng)}}});
    ops.push_back({"affine", {[&](Tape& t, std::span<const Var> p) {
                                return project(t, affine(p[0], p[1], p[2]), proj_nm);
                              },
                              {random_tensor({n, k}, rng), random_tensor({m, k}, rng),
                               random_tensor({m}, rng)}}});
    ops.push_back({"affine_vec", {[&](Tape&, std::span<const Var> p) {
                                    return sum(mul(affine(p[0], p[1]), affine(p[0], p[1])));
                                  },
                                  {random_tensor({k}, rng), random_tensor({m, k}, rng)}}});
    ops.push_back({"matmul", {[&](Tape& t, std::span<const Var> p) {
                                return project(t, matmul(p[0], p[1]), proj_nm);
                              },
                              {random_tensor({n, k}, rng), random_tensor({k, m}, rng)}}});
    ops.push_back({"silu", {[&](Tape& t, std::span<const Var> p) {
                              return project(t, silu(p[0]), proj_nk);
                            },
                            {random_tensor({n, k}, rng, 2.0)}}});
    ops.push_back({"tanh", {[&](Tape& t, std::span<const Var> p) {
                              return project(t, palp::tanh(p[0]), proj_nk);
                            },
                            {random_tensor({n, k}, rng)}}});
    ops.push_back({"concat", {[&](Tape& t, std::span<const Var> p) {
                                const Tensor& pj = proj_nk;
                                Var c = concat({p[0], p[1]});
                                Tensor w(Shape{n, 2 * k});
                                for (std::size_t i = 0; i < w.size(); ++i) w[i] = pj[i % pj.size()];
                                return dot(c, t.constant(w));
                              },
                              {random_tensor({n, k}, rng), random_tensor({n, k}, rng)}}});
    IndexGroups groups;
    for (std::size_t i = 0; i < n; ++i) groups.push_back({i % m, (i + 1) % m, i % m});
    ops.push_back({"embed_mean", {[&, groups](Tape& t, std::span<const Var> p) {
                                    return project(t, embed_mean(p[0], groups), proj_nk);
                                  },
                                  {random_tensor({m, k}, rng)}}});
    ops.push_back({"mean", {[&](Tape&, std::span<const Var> p) { return mean(mul(p[0], p[0])); },
                            {random_tensor({n, k}, rng)}}});
    ops.push_back({"mse", {[&](Tape&, std::span<const Var> p) { return mse(p[0], p[1]); },
                           {random_tensor({n, m}, rng), target}}});
    ops.push_back({"dot", {[&](Tape&, std::span<const Var> p) { return dot(p[0], p[1]); },
                           {random_tensor({n, k}, rng), random_tensor({n, k}, rng)}}});
    for (auto& [name, op] : ops) {
      auto r = check_grad(op.first, op.second, 1e-4);
      EXPECT_TRUE(r.pass) << name << " trial " << trial << " err " << r.max_rel_err;
      ++cases;
    }
  }
  EXPECT_GE(cases, 100u);
}

TEST(Property, GradientOfSumIsSumOfGradients) {
  std::mt19937_64 rng(11);
  const Tensor w = random_tensor({4, 3}, rng);
  const Tensor v = random_tensor({3}, rng);
  const Tensor y = random_tensor({4}, rng);
  auto f = [&](Tape& t, Var wv) { return mse(matmul(wv, t.constant(v)), t.constant(y)); };
  auto g = [&](Tape&, Var wv) { return sum(silu(wv)); };
  Tensor gf, gg, gs;
  {
    Tape t;
    Var wv = t.leaf(w);
    gf = grad(f(t, wv), {wv})[0];
  }
  {
    Tape t;
    Var wv = t.leaf(w);
    gg = grad(g(t, wv), {wv})[0];
  }
  {
    Tape t;
    Var wv = t.leaf(w);
    gs = grad(add(f(t, wv), g(t, wv)), {wv})[0];
  }
  EXPECT_EQ(gs, gf + gg);
}

TEST(Property, IdenticalTapesGiveBitIdenticalGradients) {
  auto run = [] {
    std::mt19937_64 rng(99);
    const Tensor x = random_tensor({8, 6}, rng);
    const Tensor w1 = random_tensor({5, 6}, rng);
    const Tensor b1 = random_tensor({5}, rng);
    const Tensor w2 = random_tensor({6, 5}, rng);
    Tape t;
    Var wv1 = t.leaf(w1), bv1 = t.leaf(b1), wv2 = t.leaf(w2);
    Var h = silu(affine(t.constant(x), wv1, bv1));
    Var out = affine(h, wv2);
    return grad(mse(out, t.constant(x)), {wv1, bv1, wv2});
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace palp
