#pragma once

#include <cstddef>
#include <vector>

namespace smkt {

/// Small dense square matrix, row-major. Sized for the truncated level
/// space (a dozen rows), so no sparsity or blocking anywhere.
class Matrix {
public:
    Matrix() = default;
    explicit Matrix(int n) : n_(n), v_(static_cast<std::size_t>(n) * n, 0.0) {}

    static Matrix identity(int n);

    int size() const { return n_; }
    double& operator()(int i, int j) { return v_[static_cast<std::size_t>(i) * n_ + j]; }
    double operator()(int i, int j) const { return v_[static_cast<std::size_t>(i) * n_ + j]; }

    Matrix& operator+=(const Matrix& o);
    Matrix& operator*=(double s);

    const std::vector<double>& data() const { return v_; }
    std::vector<double>& data() { return v_; }

private:
    int n_ = 0;
    std::vector<double> v_;
};

Matrix operator*(const Matrix& a, const Matrix& b);
Matrix operator+(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix a);

std::vector<double> mat_vec(const Matrix& a, const std::vector<double>& x);
Matrix transpose(const Matrix& a);

double frobenius_norm(const Matrix& a);
double frobenius_distance(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& a);

/// Operator norm induced by the weighted sup norm |x| = sup_k |x^k|/w_k:
/// max over rows i of sum_j |A_ij| w_j / w_i. Entries with w_i = 0 are
/// skipped when the whole row is zero, otherwise they contribute +inf.
double weighted_operator_norm(const Matrix& a, const std::vector<double>& w);

/// Matrix exponential by scaling and squaring with a Taylor core.
/// Accurate to ~1e-13 for the modest norms seen here; used as a test
/// oracle, not in production paths.
Matrix matrix_exponential(const Matrix& a);

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations,
/// returned in ascending order.
std::vector<double> symmetric_eigenvalues(Matrix a, int max_sweeps = 64);

}  // namespace smkt
