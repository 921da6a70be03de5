#pragma once

#include <cmath>
#include <string>

#include "lmedit/errors.hpp"
#include "lmedit/matrix.hpp"

// Symmetric positive-definite solves via Cholesky. The factor object is
// retained by callers so one factorization serves both the forward solve
// and the adjoint solves later on.

namespace lmedit {

class SpdFactor {
public:
    // Factorize A = L L^T. Throws SingularityError carrying the first pivot
    // index whose value falls below n * eps * max|diag| (LAPACK-style rule,
    // so near-singular systems fail loudly instead of amplifying noise).
    static SpdFactor cholesky(const Matrix& A, const std::string& layer_tag = {}) {
        if (A.rows != A.cols) throw ShapeError("cholesky: matrix not square");
        const int n = A.rows;
        double max_diag = 0.0;
        for (int i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(A(i, i)));
        const double tol = static_cast<double>(n) * 2.220446049250313e-16 * max_diag;

        SpdFactor f;
        f.l_ = Matrix(n, n);
        for (int j = 0; j < n; ++j) {
            double d = A(j, j) - dot(f.l_.row(j).subspan(0, static_cast<std::size_t>(j)),
                                     f.l_.row(j).subspan(0, static_cast<std::size_t>(j)));
            if (!(d > tol))
                throw SingularityError("cholesky: non-positive pivot " + std::to_string(d) +
                                           " at index " + std::to_string(j),
                                       j, layer_tag);
            const double ljj = std::sqrt(d);
            f.l_(j, j) = ljj;
            for (int i = j + 1; i < n; ++i) {
                double s = A(i, j) - dot(f.l_.row(i).subspan(0, static_cast<std::size_t>(j)),
                                         f.l_.row(j).subspan(0, static_cast<std::size_t>(j)));
                f.l_(i, j) = s / ljj;
            }
        }
        return f;
    }

    int dim() const { return l_.rows; }

    // Solve A x = b in place.
    void solve_inplace(std::span<double> x) const {
        const int n = l_.rows;
        if (static_cast<int>(x.size()) != n) throw ShapeError("spd solve: size mismatch");
        // forward: L y = b
        for (int i = 0; i < n; ++i) {
            double s = x[static_cast<std::size_t>(i)] -
                       dot(l_.row(i).subspan(0, static_cast<std::size_t>(i)), x.subspan(0, static_cast<std::size_t>(i)));
            x[static_cast<std::size_t>(i)] = s / l_(i, i);
        }
        // backward: L^T x = y
        for (int i = n - 1; i >= 0; --i) {
            double s = x[static_cast<std::size_t>(i)];
            for (int k = i + 1; k < n; ++k) s -= l_(k, i) * x[static_cast<std::size_t>(k)];
            x[static_cast<std::size_t>(i)] = s / l_(i, i);
        }
    }

    // Solve X A = B row-wise (A symmetric): each row x of X satisfies A x^T = b^T.
    Matrix solve_right(const Matrix& B) const {
        if (B.cols != l_.rows) throw ShapeError("spd solve_right: size mismatch");
        Matrix X = B;
        for (int i = 0; i < X.rows; ++i) solve_inplace(X.row(i));
        return X;
    }

private:
    Matrix l_;
};

// Solve X A = B for symmetric positive-definite A (d x d) and B (d' x d).
// Validates symmetry to 1e-10 relative to the largest entry.
inline Matrix solve_spd(const Matrix& A, const Matrix& B) {
    if (A.rows != A.cols) throw ShapeError("solve_spd: A not square");
    const double scale = std::max(1.0, max_abs(A));
    for (int i = 0; i < A.rows; ++i)
        for (int j = i + 1; j < A.cols; ++j)
            if (std::abs(A(i, j) - A(j, i)) > 1e-10 * scale)
                throw ArgumentError("solve_spd: A not symmetric");
    return SpdFactor::cholesky(A).solve_right(B);
}

} // namespace lmedit
