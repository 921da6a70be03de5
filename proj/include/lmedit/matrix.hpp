#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "lmedit/errors.hpp"
#include "lmedit/memlog.hpp"
#include "lmedit/rng.hpp"

// Small dense row-major kernels. Everything is double precision and backed
// by the tracking allocator so peak-footprint tests see every buffer.
// Kernels are templated over "matrix-like" types: owning Matrix or views
// into flat parameter buffers.

namespace lmedit {

using DVec = std::vector<double, memlog::tracking_allocator<double>>;

struct ConstMatView {
    const double* p = nullptr;
    int rows = 0;
    int cols = 0;

    double operator()(int i, int j) const { return p[static_cast<std::size_t>(i) * cols + j]; }
    std::span<const double> row(int i) const {
        return {p + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)};
    }
};

struct MatView {
    double* p = nullptr;
    int rows = 0;
    int cols = 0;

    double& operator()(int i, int j) const { return p[static_cast<std::size_t>(i) * cols + j]; }
    std::span<double> row(int i) const {
        return {p + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)};
    }
    operator ConstMatView() const { return {p, rows, cols}; }
};

struct Matrix {
    int rows = 0;
    int cols = 0;
    DVec a;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), 0.0) {}

    static Matrix zeros(int r, int c) { return Matrix(r, c); }

    static Matrix identity(int n) {
        Matrix m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix random_normal(int r, int c, Rng& rng, double sigma = 1.0) {
        Matrix m(r, c);
        for (double& x : m.a) x = rng.normal(0.0, sigma);
        return m;
    }

    double& operator()(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
    double operator()(int i, int j) const { return a[static_cast<std::size_t>(i) * cols + j]; }

    std::span<double> row(int i) { return {a.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)}; }
    std::span<const double> row(int i) const {
        return {a.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)};
    }

    MatView view() { return {a.data(), rows, cols}; }
    ConstMatView view() const { return {a.data(), rows, cols}; }
    operator MatView() { return view(); }
    operator ConstMatView() const { return view(); }

    std::size_t size() const { return a.size(); }
    void fill(double v) { std::fill(a.begin(), a.end(), v); }
    std::span<double> flat() { return {a.data(), a.size()}; }
    std::span<const double> flat() const { return {a.data(), a.size()}; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// ---- vector ops ----

inline double dot(std::span<const double> x, std::span<const double> y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

inline double nrm2(std::span<const double> x) { return std::sqrt(dot(x, x)); }

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void scal(double alpha, std::span<double> x) {
    for (double& v : x) v *= alpha;
}

inline bool all_finite(std::span<const double> x) {
    for (double v : x) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

// ---- matrix kernels (templated over matrix-like) ----

// y = A x
template <class MA>
void matvec(const MA& A, std::span<const double> x, std::span<double> y) {
    if (static_cast<int>(x.size()) != A.cols || static_cast<int>(y.size()) != A.rows)
        throw ShapeError("matvec: dimension mismatch");
    for (int i = 0; i < A.rows; ++i) y[static_cast<std::size_t>(i)] = dot(A.row(i), x);
}

// y = A^T x
template <class MA>
void matvec_t(const MA& A, std::span<const double> x, std::span<double> y) {
    if (static_cast<int>(x.size()) != A.rows || static_cast<int>(y.size()) != A.cols)
        throw ShapeError("matvec_t: dimension mismatch");
    std::fill(y.begin(), y.end(), 0.0);
    for (int i = 0; i < A.rows; ++i) axpy(x[static_cast<std::size_t>(i)], A.row(i), y);
}

// A += alpha * x y^T
template <class MA>
void add_outer(MA&& A, double alpha, std::span<const double> x, std::span<const double> y) {
    if (static_cast<int>(x.size()) != A.rows || static_cast<int>(y.size()) != A.cols)
        throw ShapeError("add_outer: dimension mismatch");
    for (int i = 0; i < A.rows; ++i) axpy(alpha * x[static_cast<std::size_t>(i)], y, A.row(i));
}

// C += A B^T  (A: r x k, B: c x k, C: r x c)
template <class MC, class MA, class MB>
void gemm_nt_acc(MC&& C, const MA& A, const MB& B) {
    if (A.cols != B.cols || C.rows != A.rows || C.cols != B.rows)
        throw ShapeError("gemm_nt_acc: dimension mismatch");
    for (int i = 0; i < A.rows; ++i) {
        auto ai = A.row(i);
        auto ci = C.row(i);
        for (int j = 0; j < B.rows; ++j) ci[static_cast<std::size_t>(j)] += dot(ai, B.row(j));
    }
}

// C = A B
inline Matrix matmul(const Matrix& A, const Matrix& B) {
    if (A.cols != B.rows) throw ShapeError("matmul: dimension mismatch");
    Matrix C(A.rows, B.cols);
    for (int i = 0; i < A.rows; ++i) {
        auto ai = A.row(i);
        auto ci = C.row(i);
        for (int k = 0; k < A.cols; ++k) axpy(ai[static_cast<std::size_t>(k)], B.row(k), ci);
    }
    return C;
}

inline Matrix transpose(const Matrix& A) {
    Matrix T(A.cols, A.rows);
    for (int i = 0; i < A.rows; ++i)
        for (int j = 0; j < A.cols; ++j) T(j, i) = A(i, j);
    return T;
}

inline double frob_norm(const Matrix& A) { return nrm2(A.flat()); }

inline double max_abs(const Matrix& A) {
    double m = 0.0;
    for (double v : A.a) m = std::max(m, std::abs(v));
    return m;
}

inline Matrix operator+(const Matrix& A, const Matrix& B) {
    if (!A.same_shape(B)) throw ShapeError("matrix add: shape mismatch");
    Matrix C = A;
    for (std::size_t i = 0; i < C.a.size(); ++i) C.a[i] += B.a[i];
    return C;
}

inline Matrix operator-(const Matrix& A, const Matrix& B) {
    if (!A.same_shape(B)) throw ShapeError("matrix sub: shape mismatch");
    Matrix C = A;
    for (std::size_t i = 0; i < C.a.size(); ++i) C.a[i] -= B.a[i];
    return C;
}

inline Matrix operator*(double s, const Matrix& A) {
    Matrix C = A;
    for (double& v : C.a) v *= s;
    return C;
}

} // namespace lmedit
