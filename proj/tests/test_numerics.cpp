#include <cmath>
#include <limits>
#include <random>

#include "distma/numerics.hpp"
#include <doctest.h>

using namespace distma;

static double gh_integral(int n, double (*f)(double)) {
  const QuadratureRule& r = gauss_hermite(n);
  double s = 0.0;
  for (int i = 0; i < r.nodes.size(); ++i) s += r.weights[i] * f(r.nodes[i]);
  return s;
}

TEST_CASE("gauss_hermite basics") {
  const QuadratureRule& r1 = gauss_hermite(1);
  CHECK(r1.nodes.size() == 1);
  CHECK(r1.nodes[0] == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(r1.weights[0] == doctest::Approx(1.0).epsilon(1e-14));

  const QuadratureRule& r2 = gauss_hermite(2);
  REQUIRE(r2.nodes.size() == 2);
  CHECK(r2.nodes.minCoeff() == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(r2.nodes.maxCoeff() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r2.weights[0] == doctest::Approx(0.5).epsilon(1e-12));
  // second normal moment reproduced exactly by the 2-point rule
  double m2 = r2.weights[0] * r2.nodes[0] * r2.nodes[0] +
              r2.weights[1] * r2.nodes[1] * r2.nodes[1];
  CHECK(m2 == doctest::Approx(1.0).epsilon(1e-14));

  // fourth normal moment with 20 nodes
  double m4 = gh_integral(20, [](double z) { return z * z * z * z; });
  CHECK(std::abs(m4 - 3.0) < 1e-12);

  CHECK_THROWS_AS(gauss_hermite(0), NumericError);
  CHECK_THROWS_AS(gauss_hermite(257), NumericError);
}

TEST_CASE("gauss_hermite weights sum to one") {
  for (int n : {1, 2, 5, 21, 35, 64, 128, 256}) {
    const QuadratureRule& r = gauss_hermite(n);
    CHECK(std::abs(r.weights.sum() - 1.0) < 1e-12);
  }
}

TEST_CASE("gauss_hermite even-moment exactness up to degree 2n-1") {
  // E z^{2m} = (2m-1)!! whenever 2m <= 2n-1
  for (int n : {4, 8, 16, 32}) {
    const QuadratureRule& r = gauss_hermite(n);
    double dfact = 1.0;  // (2m-1)!!
    for (int m = 1; 2 * m <= 2 * n - 1; ++m) {
      dfact *= 2.0 * m - 1.0;
      double got = 0.0;
      for (int i = 0; i < r.nodes.size(); ++i)
        got += r.weights[i] * std::pow(r.nodes[i], 2 * m);
      CHECK(std::abs(got - dfact) <= 1e-9 * dfact);
    }
  }
}

TEST_CASE("gauss_hermite converges monotonically on exp(-z^4)") {
  auto f = [](double z) { return std::exp(-z * z * z * z); };
  auto gh = [&](int n) {
    const QuadratureRule& r = gauss_hermite(n);
    double s = 0.0;
    for (int i = 0; i < r.nodes.size(); ++i) s += r.weights[i] * f(r.nodes[i]);
    return s;
  };
  double prev = std::numeric_limits<double>::infinity();
  for (int n : {8, 16, 32, 64}) {
    double gap = std::abs(gh(n) - gh(2 * n));
    CHECK(gap < prev);
    prev = gap;
  }
}

TEST_CASE("gauss_legendre_01 basics") {
  const QuadratureRule& r1 = gauss_legendre_01(1);
  CHECK(r1.nodes[0] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(r1.weights[0] == doctest::Approx(1.0).epsilon(1e-14));

  const QuadratureRule& r5 = gauss_legendre_01(5);
  double s = 0.0;
  for (int i = 0; i < 5; ++i) s += r5.weights[i] * r5.nodes[i];
  CHECK(std::abs(s - 0.5) < 1e-14);

  // Beta(2,2) density 6u(1-u) integrates to 1
  const QuadratureRule& r32 = gauss_legendre_01(32);
  double b = 0.0;
  for (int i = 0; i < 32; ++i)
    b += r32.weights[i] * 6.0 * r32.nodes[i] * (1.0 - r32.nodes[i]);
  CHECK(std::abs(b - 1.0) < 1e-10);
  CHECK(std::abs(r32.weights.sum() - 1.0) < 1e-12);

  CHECK_THROWS_AS(gauss_legendre_01(0), NumericError);
  CHECK_THROWS_AS(gauss_legendre_01(300), NumericError);
}

TEST_CASE("cholesky examples") {
  Eigen::MatrixXd I = Eigen::MatrixXd::Identity(3, 3);
  LowerTriangular L = cholesky(I);
  CHECK((L.L - I).cwiseAbs().maxCoeff() < 1e-14);

  Eigen::MatrixXd A(2, 2);
  A << 4, 2, 2, 3;
  LowerTriangular L2 = cholesky(A);
  CHECK(L2.L(0, 0) == doctest::Approx(2.0));
  CHECK(L2.L(1, 0) == doctest::Approx(1.0));
  CHECK(L2.L(1, 1) == doctest::Approx(std::sqrt(2.0)));
  CHECK((L2.L * L2.L.transpose() - A).cwiseAbs().maxCoeff() < 1e-12);

  Eigen::MatrixXd B(2, 2);
  B << 1, 2, 2, 1;
  CHECK_THROWS_WITH_AS(cholesky(B), doctest::Contains("index 1"), NumericError);
}

TEST_CASE("cholesky reconstructs random PD matrices up to d=12") {
  std::mt19937 gen(42);
  std::normal_distribution<double> nd;
  for (int d = 1; d <= 12; ++d) {
    Eigen::MatrixXd M(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) M(i, j) = nd(gen);
    Eigen::MatrixXd A = M * M.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d);
    LowerTriangular L = cholesky(A);
    double err = (L.L * L.L.transpose() - A).cwiseAbs().maxCoeff();
    CHECK(err <= 1e-10 * A.cwiseAbs().maxCoeff());
  }
}

TEST_CASE("log_sum_exp") {
  double ninf = -std::numeric_limits<double>::infinity();
  CHECK(log_sum_exp(std::vector<double>{0.0, 0.0}) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(log_sum_exp(std::vector<double>{-1000.0, -1000.0}) ==
        doctest::Approx(-1000.0 + std::log(2.0)).epsilon(1e-14));
  CHECK(log_sum_exp(std::vector<double>{0.0, ninf}) == doctest::Approx(0.0));
  CHECK(log_sum_exp(std::vector<double>{ninf, ninf}) == ninf);
  Eigen::VectorXd v(3);
  v << 1.0, 2.0, 3.0;
  double expect = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  CHECK(log_sum_exp(v) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("finite differences") {
  ObjectiveFn quad = [](const Eigen::VectorXd& x) {
    return -0.5 * x.squaredNorm();
  };
  Eigen::VectorXd x0 = Eigen::VectorXd::Zero(3);
  Eigen::VectorXd g = fd_gradient(quad, x0);
  CHECK(g.cwiseAbs().maxCoeff() < 1e-8);
  Eigen::MatrixXd H = fd_hessian(quad, x0);
  CHECK((H + Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-6);

  ObjectiveFn prod = [](const Eigen::VectorXd& x) { return x[0] * x[1]; };
  Eigen::VectorXd ones = Eigen::VectorXd::Ones(2);
  Eigen::VectorXd gp = fd_gradient(prod, ones);
  CHECK(gp[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(gp[1] == doctest::Approx(1.0).epsilon(1e-6));
  Eigen::MatrixXd Hp = fd_hessian(prod, ones);
  CHECK(Hp(0, 1) == doctest::Approx(1.0).epsilon(1e-6));

  // cubic with analytic gradient
  ObjectiveFn cubic = [](const Eigen::VectorXd& x) {
    return x[0] * x[0] * x[0] + 2.0 * x[0] * x[1] * x[1] - x[1];
  };
  Eigen::VectorXd xc(2);
  xc << 0.7, -1.3;
  Eigen::VectorXd gc = fd_gradient(cubic, xc);
  double g0 = 3.0 * xc[0] * xc[0] + 2.0 * xc[1] * xc[1];
  double g1 = 4.0 * xc[0] * xc[1] - 1.0;
  CHECK(std::abs(gc[0] - g0) < 1e-6);
  CHECK(std::abs(gc[1] - g1) < 1e-6);

  ObjectiveFn bad = [](const Eigen::VectorXd& x) {
    return x[0] > 0.0 ? std::numeric_limits<double>::quiet_NaN() : 0.0;
  };
  Eigen::VectorXd z = Eigen::VectorXd::Zero(1);
  CHECK_THROWS_AS(fd_gradient(bad, z), NumericError);
  CHECK_THROWS_AS(fd_hessian(bad, z), NumericError);
}

TEST_CASE("distribution helpers") {
  CHECK(normal_cdf(0.0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(two_sided_p_normal(2.0) == doctest::Approx(0.04550026).epsilon(1e-6));
  CHECK(two_sided_p_normal(0.0) == doctest::Approx(1.0));
  // t with huge df approaches the normal
  CHECK(two_sided_p_t(2.0, 1e6) == doctest::Approx(0.04550026).epsilon(1e-4));
  // chi^2_1 upper tail at z^2 equals the two-sided normal p
  CHECK(chi_sq_upper_p(4.0, 1.0) ==
        doctest::Approx(two_sided_p_normal(2.0)).epsilon(1e-10));
  CHECK(log_normal_pdf(0.0, 0.0, 1.0) ==
        doctest::Approx(-0.5 * std::log(2.0 * M_PI)).epsilon(1e-14));
}
