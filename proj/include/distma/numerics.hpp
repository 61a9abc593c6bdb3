#pragma once

#include <Eigen/Dense>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace distma {

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class QuadKind { gauss_hermite_prob, gauss_legendre_01 };

// Nodes/weights pair. Hermite is the probabilists' convention:
// integral of phi(z) f(z) dz ~= sum_i w_i f(z_i), weights summing to 1.
// Legendre is rescaled to [0,1] with unit total weight.
struct QuadratureRule {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;
  QuadKind kind;
};

// Golub-Welsch on the Jacobi matrix; 1 <= n <= 256. Cached per node count.
const QuadratureRule& gauss_hermite(int n);
const QuadratureRule& gauss_legendre_01(int n);

struct LowerTriangular {
  Eigen::MatrixXd L;  // lower triangular, positive diagonal
  int dim() const { return static_cast<int>(L.rows()); }
};

// Dense Cholesky. Throws NumericError naming the failing pivot index
// (0-based) when A is not positive definite.
LowerTriangular cholesky(const Eigen::MatrixXd& A);

// Overflow-safe log(sum(exp(xs))). All -inf gives -inf.
double log_sum_exp(const std::vector<double>& xs);
double log_sum_exp(const Eigen::VectorXd& xs);

using ObjectiveFn = std::function<double(const Eigen::VectorXd&)>;

// Central differences; step h_i = 1e-6 * max(1, |x_i|).
Eigen::VectorXd fd_gradient(const ObjectiveFn& f, const Eigen::VectorXd& x);
// Central differences; step h_i = 1e-4 * max(1, |x_i|); result symmetrized.
Eigen::MatrixXd fd_hessian(const ObjectiveFn& f, const Eigen::VectorXd& x);

// log N(y; mu, var)
double log_normal_pdf(double y, double mu, double var);

// Student-t, chi-square, and normal tail probabilities (two-sided p helpers).
double normal_cdf(double z);
double two_sided_p_normal(double z);
double two_sided_p_t(double t, double df);
double chi_sq_upper_p(double x, double df);

}  // namespace distma
