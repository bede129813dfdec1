#include "optrace/autodiff.hpp"
#include "optrace/errors.hpp"
#include "optrace/gradcheck.hpp"
#include "optrace/random.hpp"
#include "optrace/training.hpp"

#include <doctest.h>

#include <cmath>

using namespace ot;
using ad::Graph;
using ad::Matrix;
using ad::Var;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    Eigen::Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

}  // namespace

TEST_CASE("primitive values") {
  Graph g;
  const Var z = g.constant(Matrix::Zero(1, 4));
  const Matrix s = ad::softmax(z).value();
  for (int i = 0; i < 4; ++i) CHECK(s(0, i) == doctest::Approx(0.25));
  CHECK(ad::tanh(g.constant(Matrix::Zero(1, 1))).value()(0, 0) == 0.0);
  CHECK(ad::sigmoid(g.constant(Matrix::Zero(1, 1))).value()(0, 0) == 0.5);
  const Var a = g.constant(Matrix::Ones(1, 3));
  const Var b = g.constant(Matrix::Ones(1, 3));
  CHECK(ad::concat({a, b}).cols() == 6);
  CHECK(ad::concat({a, b}, ad::Axis::Rows).rows() == 2);
  CHECK(ad::exp(g.constant(Matrix::Zero(2, 2))).value().isApprox(Matrix::Ones(2, 2)));
  CHECK(ad::row_sum(g.constant(mat({{1, 2}, {3, 4}}))).value().isApprox(mat({{3}, {7}})));
  CHECK(ad::slice(g.constant(mat({{1, 2, 3}, {4, 5, 6}})), 1, 2, ad::Axis::Cols).value().isApprox(mat({{2, 3}, {5, 6}})));
  CHECK(ad::gather(g.constant(mat({{1, 1}, {2, 2}, {3, 3}})), std::vector<int>{2, 0}).value().isApprox(mat({{3, 3}, {1, 1}})));
}

TEST_CASE("softmax rows sum to one and handle masked entries") {
  Rng rng(3);
  Graph g;
  const Matrix x = random_matrix(rng, 6, 5) * 10.0;
  const Matrix s = ad::softmax(g.constant(x)).value();
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    CHECK((s.row(r).array() >= 0.0).all());
    CHECK(std::abs(s.row(r).sum() - 1.0) < 1e-9);
  }
  Matrix masked = mat({{0.0, ad::kNegInf, 0.0}, {ad::kNegInf, ad::kNegInf, ad::kNegInf}});
  const Matrix ms = ad::softmax(g.constant(masked)).value();
  CHECK(ms(0, 0) == doctest::Approx(0.5));
  CHECK(ms(0, 1) == 0.0);
  CHECK(ms.row(1).isZero());
  // Large logits do not overflow.
  const Matrix big = ad::softmax(g.constant(mat({{1000.0, 0.0}}))).value();
  CHECK(big(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("shape errors name the primitive and both shapes") {
  Graph g;
  const Var a = g.constant(Matrix::Zero(2, 3));
  const Var b = g.constant(Matrix::Zero(2, 3));
  try {
    (void)ad::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("2x3") != std::string::npos);
  }
  CHECK_THROWS_AS((void)ad::add(a, g.constant(Matrix::Zero(3, 3))), ShapeError);
  CHECK_THROWS_AS((void)ad::mul(a, g.constant(Matrix::Zero(2, 2))), ShapeError);
  CHECK_THROWS_AS((void)ad::concat({a, g.constant(Matrix::Zero(3, 3))}), ShapeError);
  CHECK_THROWS_AS((void)ad::slice(a, 1, 5), ShapeError);
  CHECK_THROWS_AS((void)ad::gather(a, std::vector<int>{5}), Error);
}

TEST_CASE("backward rules") {
  SUBCASE("linear map: grad(w) = x") {
    Graph g;
    const Matrix xv = mat({{1, -2, 3}});
    const Var w = g.leaf(mat({{0.5, 0.5, 0.5}}));
    const Var x = g.constant(xv);
    const auto grads = g.backward(ad::sum(ad::mul(w, x)));
    CHECK(grads.of(w).isApprox(xv));
  }
  SUBCASE("unused leaf gets zero gradient") {
    Graph g;
    const Var used = g.leaf(Matrix::Ones(2, 2));
    const Var unused = g.leaf(Matrix::Ones(3, 1));
    const auto grads = g.backward(ad::sum(used));
    CHECK(grads.of(unused).isZero());
    CHECK(grads.of(unused).rows() == 3);
  }
  SUBCASE("row gathered twice accumulates both upstream gradients") {
    Graph g;
    const Var table = g.leaf(Matrix::Zero(3, 2));
    const Var rows = ad::gather(table, std::vector<int>{1, 1, 0});
    const Var loss = ad::sum(ad::mul(rows, g.constant(mat({{1, 2}, {10, 20}, {5, 5}}))));
    const Matrix gt = g.backward(loss).of(table);
    CHECK(gt.isApprox(mat({{5, 5}, {11, 22}, {0, 0}})));
  }
  SUBCASE("non-scalar loss is rejected") {
    Graph g;
    const Var x = g.leaf(Matrix::Ones(2, 2));
    CHECK_THROWS_AS((void)g.backward(x), ShapeError);
  }
  SUBCASE("disjoint subgraphs differentiate independently") {
    Rng rng(5);
    const Matrix av = random_matrix(rng, 2, 3), bv = random_matrix(rng, 3, 2);
    auto fa = [](const Var& a) { return ad::sum(ad::tanh(a)); };
    auto fb = [](const Var& b) { return ad::sum(ad::exp(b)); };
    Graph g;
    const Var a = g.leaf(av), b = g.leaf(bv);
    const auto joint = g.backward(ad::add(fa(a), fb(b)));
    Graph ga, gb;
    const Var a2 = ga.leaf(av), b2 = gb.leaf(bv);
    CHECK(joint.of(a) == ga.backward(fa(a2)).of(a2));
    CHECK(joint.of(b) == gb.backward(fb(b2)).of(b2));
  }
  SUBCASE("masked_fill blocks gradient at filled entries") {
    Graph g;
    const Var x = g.leaf(Matrix::Ones(1, 3));
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> mask(1, 3);
    mask << false, true, false;
    const Matrix gx = g.backward(ad::sum(ad::masked_fill(x, mask, 7.0))).of(x);
    CHECK(gx.isApprox(mat({{1, 0, 1}})));
  }
}

TEST_CASE("finite-difference oracle") {
  Rng rng(11);
  SUBCASE("matmul chain") {
    const Matrix a = random_matrix(rng, 3, 4), b = random_matrix(rng, 4, 5), c = random_matrix(rng, 5, 2);
    const Matrix in[] = {a, b, c};
    const auto res = ad::finite_difference_check(
        [](Graph&, std::span<const Var> v) { return ad::sum(ad::matmul(ad::matmul(v[0], v[1]), v[2])); }, in);
    CHECK(res.max_rel_error < 1e-5);
  }
  SUBCASE("softmax + NLL composite") {
    const Matrix z = random_matrix(rng, 4, 4);
    const std::vector<int> y = {0, 3, 1, 2};
    const std::vector<double> w = {1, 1, 0, 1};
    const auto res = ad::finite_difference_check([&](Graph&, const Var& v) { return train::nll_loss(v, y, w); }, z);
    CHECK(res.max_rel_error < 1e-4);
  }
  SUBCASE("constant function") {
    Graph g;
    const auto res = ad::finite_difference_check(
        [](Graph& gr, const Var&) { return gr.constant(Matrix::Constant(1, 1, 3.0)); }, Matrix::Ones(2, 2));
    CHECK(res.max_rel_error == 0.0);
    CHECK(res.max_abs_error == 0.0);
  }
}

TEST_CASE("every primitive passes 100-point gradient checks") {
  for (const auto& c : check::primitive_checks(0, 100, 1e-4)) {
    INFO(c.name << " max_rel_error=" << c.max_rel_error);
    CHECK(c.points == 100);
    CHECK(c.passed());
  }
}
