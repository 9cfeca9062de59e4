#include "pme/matrix.hpp"
#include "pme/rng.hpp"

#include <doctest.h>

#include <cmath>

using namespace pme;

namespace {

Matrix random_matrix(Rng& rng, int r, int c, double scale = 1.0) {
  Matrix m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

Matrix random_spd(Rng& rng, int n) {
  Matrix m = random_matrix(rng, n, n);
  Matrix a = matmul_tn(m, m);
  for (int i = 0; i < n; ++i) a(i, i) += 1.0;
  // symmetrize exactly; M^T M can differ in the last ulp across the diagonal
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double v = 0.5 * (a(i, j) + a(j, i));
      a(i, j) = v;
      a(j, i) = v;
    }
  return a;
}

}  // namespace

TEST_CASE("spd_solve on identity returns B") {
  Matrix b = Matrix::from(3, 2, {1, 2, 3, 4, 5, 6});
  auto r = spd_solve(Matrix::identity(3), b);
  CHECK(r.solution == b);
  CHECK(r.residual_norm == doctest::Approx(0.0));
}

TEST_CASE("spd_solve on diagonal system") {
  Matrix a = Matrix::from(2, 2, {2, 0, 0, 1});
  Matrix b = Matrix::from(2, 1, {1, 0});
  auto r = spd_solve(a, b);
  CHECK(r.solution(0, 0) == doctest::Approx(0.5));
  CHECK(r.solution(1, 0) == doctest::Approx(0.0));
}

TEST_CASE("spd_solve residual on random SPD systems") {
  Rng rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    Matrix a = random_spd(rng, 5);
    Matrix b = random_matrix(rng, 5, 3);
    auto r = spd_solve(a, b);
    CHECK(r.residual_norm <= 1e-9);
    CHECK(r.residual_norm <= 1e-8 * std::max(1.0, frobenius_norm(b)));
  }
}

TEST_CASE("spd_solve rejects non positive definite input with pivot index") {
  Matrix a = Matrix::from(3, 3, {1, 0, 0, 0, -2, 0, 0, 0, 1});
  try {
    spd_solve(a, Matrix(3, 1));
    FAIL("expected NotPositiveDefinite");
  } catch (const NotPositiveDefinite& e) {
    CHECK(e.pivot_index == 1);
  }
}

TEST_CASE("spd_solve rejects asymmetric input") {
  Matrix a = Matrix::from(2, 2, {1, 0.5, 0.2, 1});
  CHECK_THROWS_AS(spd_solve(a, Matrix(2, 1)), ShapeError);
}

TEST_CASE("matrix product associativity on random triples") {
  Rng rng(5);
  for (int rep = 0; rep < 10; ++rep) {
    Matrix a = random_matrix(rng, 4, 6);
    Matrix b = random_matrix(rng, 6, 3);
    Matrix c = random_matrix(rng, 3, 5);
    Matrix left = matmul(matmul(a, b), c);
    Matrix right = matmul(a, matmul(b, c));
    Matrix diff = subtract(left, right);
    CHECK(frobenius_norm(diff) <= 1e-10 * std::max(1.0, frobenius_norm(left)));
  }
}

TEST_CASE("matrix construction rejects non-finite entries") {
  CHECK_THROWS_AS(Matrix::from(1, 2, {1.0, std::nan("")}), ShapeError);
  CHECK_THROWS_AS(Matrix::from(1, 1, {0.0, 1.0}), ShapeError);  // wrong length
}

TEST_CASE("grad_check on quadratic") {
  auto f = [](const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return s;
  };
  std::vector<double> x = {1.0, 2.0};
  std::vector<double> g = {2.0, 4.0};
  CHECK(grad_check(f, x, g, 1e-5) <= 1e-7);
}

TEST_CASE("grad_check on constant function returns zero error") {
  auto f = [](const std::vector<double>&) { return 3.5; };
  std::vector<double> x = {0.3, -0.7, 1.1};
  std::vector<double> g = {0.0, 0.0, 0.0};
  CHECK(grad_check(f, x, g, 1e-4) == doctest::Approx(0.0));
}

TEST_CASE("grad_check flags a wrong gradient") {
  auto f = [](const std::vector<double>& x) { return x[0] * x[0]; };
  CHECK(grad_check(f, {1.0}, {3.0}, 1e-5) > 0.3);
}
