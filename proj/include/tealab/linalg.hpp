#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "tealab/tensor.hpp"

namespace tealab {

/// Plain dense linear algebra on rank-2 tensors. No graph involvement:
/// these back the data generators, the closed-form solvers, and the
/// independent oracles that check the autodiff path.

inline Tensor mat_mul(const Tensor& A, const Tensor& B) {
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows()) {
        throw ShapeError("mat_mul: incompatible shapes " + A.shape_string() + " x " +
                         B.shape_string());
    }
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = A.data() + i * k;
        double* orow = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = B.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

inline Tensor mat_transpose(const Tensor& A) {
    const std::size_t m = A.rows(), n = A.cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
    }
    return out;
}

inline Tensor mat_add(const Tensor& A, const Tensor& B) {
    if (!A.same_shape(B)) {
        throw ShapeError("mat_add: " + A.shape_string() + " vs " + B.shape_string());
    }
    Tensor out(A.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
    return out;
}

inline Tensor mat_sub(const Tensor& A, const Tensor& B) {
    if (!A.same_shape(B)) {
        throw ShapeError("mat_sub: " + A.shape_string() + " vs " + B.shape_string());
    }
    Tensor out(A.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
    return out;
}

inline Tensor mat_scale(const Tensor& A, double c) {
    Tensor out(A.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * A[i];
    return out;
}

inline double frobenius_norm(const Tensor& A) {
    double acc = 0.0;
    for (std::size_t i = 0; i < A.size(); ++i) acc += A[i] * A[i];
    return std::sqrt(acc);
}

inline double dot_all(const Tensor& A, const Tensor& B) {
    double acc = 0.0;
    for (std::size_t i = 0; i < A.size(); ++i) acc += A[i] * B[i];
    return acc;
}

/// Solve A X = B with Gaussian elimination and partial pivoting.
/// A is n x n, B is n x m. Throws ValueError when A is numerically singular.
inline Tensor solve_linear(Tensor A, Tensor B, double pivot_tol = 1e-12) {
    const std::size_t n = A.rows();
    if (A.cols() != n || B.rows() != n) {
        throw ShapeError("solve_linear: A " + A.shape_string() + ", B " + B.shape_string());
    }
    const std::size_t m = B.cols();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        double best = std::fabs(A[col * n + col]);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double v = std::fabs(A[r * n + col]);
            if (v > best) {
                best = v;
                piv = r;
            }
        }
        if (best < pivot_tol) throw ValueError("solve_linear: singular matrix");
        if (piv != col) {
            for (std::size_t j = 0; j < n; ++j) std::swap(A[col * n + j], A[piv * n + j]);
            for (std::size_t j = 0; j < m; ++j) std::swap(B[col * m + j], B[piv * m + j]);
        }
        const double d = A[col * n + col];
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = A[r * n + col] / d;
            if (f == 0.0) continue;
            for (std::size_t j = col; j < n; ++j) A[r * n + j] -= f * A[col * n + j];
            for (std::size_t j = 0; j < m; ++j) B[r * m + j] -= f * B[col * m + j];
        }
    }
    Tensor X({n, m});
    for (std::size_t r = n; r-- > 0;) {
        for (std::size_t j = 0; j < m; ++j) {
            double acc = B[r * m + j];
            for (std::size_t c = r + 1; c < n; ++c) acc -= A[r * n + c] * X[c * m + j];
            X[r * m + j] = acc / A[r * n + r];
        }
    }
    return X;
}

/// Jacobi eigendecomposition of a symmetric matrix: A = Q diag(w) Q^T.
/// Adequate for the small Gram matrices this project solves.
inline void jacobi_eigen_sym(Tensor A, Tensor& Q, std::vector<double>& w,
                             int max_sweeps = 64) {
    const std::size_t n = A.rows();
    if (A.cols() != n) throw ShapeError("jacobi_eigen_sym: not square " + A.shape_string());
    Q = Tensor({n, n});
    for (std::size_t i = 0; i < n; ++i) Q[i * n + i] = 1.0;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) off += A[i * n + j] * A[i * n + j];
        }
        if (off < 1e-28) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = A[p * n + q];
                if (std::fabs(apq) < 1e-300) continue;
                const double theta = (A[q * n + q] - A[p * n + p]) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = A[k * n + p], akq = A[k * n + q];
                    A[k * n + p] = c * akp - s * akq;
                    A[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = A[p * n + k], aqk = A[q * n + k];
                    A[p * n + k] = c * apk - s * aqk;
                    A[q * n + k] = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double qkp = Q[k * n + p], qkq = Q[k * n + q];
                    Q[k * n + p] = c * qkp - s * qkq;
                    Q[k * n + q] = s * qkp + c * qkq;
                }
            }
        }
    }
    w.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) w[i] = A[i * n + i];
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix via Jacobi.
/// Eigenvalues below rel_tol * max eigenvalue are treated as zero.
inline Tensor pinv_psd(const Tensor& A, double rel_tol = 1e-12) {
    Tensor Q;
    std::vector<double> w;
    jacobi_eigen_sym(A, Q, w);
    const std::size_t n = A.rows();
    double wmax = 0.0;
    for (double v : w) wmax = std::max(wmax, std::fabs(v));
    Tensor out({n, n});
    for (std::size_t k = 0; k < n; ++k) {
        if (std::fabs(w[k]) <= rel_tol * wmax || w[k] == 0.0) continue;
        const double inv = 1.0 / w[k];
        for (std::size_t i = 0; i < n; ++i) {
            const double qik = Q[i * n + k] * inv;
            if (qik == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += qik * Q[j * n + k];
        }
    }
    return out;
}

/// Operator 2-norm (largest singular value), via Jacobi on A^T A.
inline double operator_norm(const Tensor& A) {
    Tensor gram = mat_mul(mat_transpose(A), A);
    Tensor Q;
    std::vector<double> w;
    jacobi_eigen_sym(gram, Q, w);
    double wmax = 0.0;
    for (double v : w) wmax = std::max(wmax, v);
    return std::sqrt(std::max(0.0, wmax));
}

/// Thin QR by modified Gram-Schmidt. A is m x n with m >= n.
/// Columns of Q orthonormal; R upper triangular. Rank deficiency shows up
/// as (near-)zero diagonal entries of R.
inline void qr_mgs(const Tensor& A, Tensor& Q, Tensor& R) {
    const std::size_t m = A.rows(), n = A.cols();
    Q = A;
    R = Tensor({n, n});
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < j; ++i) {
            double dot = 0.0;
            for (std::size_t r = 0; r < m; ++r) dot += Q[r * n + i] * Q[r * n + j];
            R[i * n + j] = dot;
            for (std::size_t r = 0; r < m; ++r) Q[r * n + j] -= dot * Q[r * n + i];
        }
        double nrm = 0.0;
        for (std::size_t r = 0; r < m; ++r) nrm += Q[r * n + j] * Q[r * n + j];
        nrm = std::sqrt(nrm);
        R[j * n + j] = nrm;
        if (nrm > 1e-300) {
            for (std::size_t r = 0; r < m; ++r) Q[r * n + j] /= nrm;
        }
    }
}

/// Minimum-norm least squares min_x ||A x - b||_2 via QR with a pinv
/// fallback on rank deficiency. Returns (x, residual 2-norm).
inline std::pair<Tensor, double> least_squares(const Tensor& A, const Tensor& b) {
    const std::size_t m = A.rows(), n = A.cols();
    if (b.rows() != m || b.cols() != 1) {
        throw ShapeError("least_squares: A " + A.shape_string() + ", b " + b.shape_string());
    }
    Tensor Q, R;
    qr_mgs(A, Q, R);
    double rmax = 0.0;
    for (std::size_t j = 0; j < n; ++j) rmax = std::max(rmax, std::fabs(R[j * n + j]));
    bool deficient = rmax == 0.0;
    for (std::size_t j = 0; j < n && !deficient; ++j) {
        if (std::fabs(R[j * n + j]) < 1e-12 * rmax) deficient = true;
    }
    Tensor x({n, 1});
    if (!deficient) {
        // x = R^{-1} Q^T b
        std::vector<double> qtb(n, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t r = 0; r < m; ++r) acc += Q[r * n + j] * b[r];
            qtb[j] = acc;
        }
        for (std::size_t j = n; j-- > 0;) {
            double acc = qtb[j];
            for (std::size_t k = j + 1; k < n; ++k) acc -= R[j * n + k] * x[k];
            x[j] = acc / R[j * n + j];
        }
    } else {
        // x = pinv(A^T A) A^T b
        Tensor At = mat_transpose(A);
        Tensor gram_inv = pinv_psd(mat_mul(At, A));
        x = mat_mul(gram_inv, mat_mul(At, b));
    }
    Tensor r = mat_mul(A, x);
    double res = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double d = r[i] - b[i];
        res += d * d;
    }
    return {std::move(x), std::sqrt(res)};
}

} // namespace tealab
