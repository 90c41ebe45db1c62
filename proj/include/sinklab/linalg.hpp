#pragma once

// Dense SVD via one-sided (Hestenes) Jacobi rotations.  Matrices here are
// small (at most d x d_f), so an O(n^2 m) sweep scheme is plenty; everything
// accumulates in double no matter the input element type.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "sinklab/common.hpp"
#include "sinklab/tensor.hpp"

namespace sinklab {

struct SvdResult {
    std::vector<double> sigma;               // descending
    std::vector<std::vector<double>> right;  // right[j]: length-n right singular vector for sigma[j]
};

// One-sided Jacobi on the columns of A (m x n, row-major input).  At
// convergence the columns of the working matrix are mutually orthogonal;
// their norms are the singular values and the accumulated rotations form V.
template <typename T>
SvdResult jacobi_svd(const T* a, int64_t m, int64_t n, bool want_right = true,
                     double tol = 1e-8, int max_sweeps = 100) {
    if (m <= 0 || n <= 0) throw ShapeError("jacobi_svd: empty matrix");
    // Column-major working copy so column dots are contiguous.
    std::vector<double> w(static_cast<size_t>(m) * n);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) w[j * m + i] = static_cast<double>(a[i * n + j]);

    std::vector<double> v;
    if (want_right) {
        v.assign(static_cast<size_t>(n) * n, 0.0);
        for (int64_t j = 0; j < n; ++j) v[j * n + j] = 1.0;
    }

    // Columns whose geometric-mean norm product falls below this are noise
    // (e.g. the null columns of a wide or rank-deficient input); the relative
    // orthogonality test would chatter on them forever.
    double frob2 = 0.0;
    for (double x : w) frob2 += x * x;
    const double negligible = 1e-28 * frob2;

    bool converged = false;
    for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
        converged = true;
        for (int64_t p = 0; p + 1 < n; ++p) {
            for (int64_t q = p + 1; q < n; ++q) {
                double* cp = w.data() + p * m;
                double* cq = w.data() + q * m;
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (int64_t i = 0; i < m; ++i) {
                    alpha += cp[i] * cp[i];
                    beta += cq[i] * cq[i];
                    gamma += cp[i] * cq[i];
                }
                if (alpha == 0.0 || beta == 0.0) continue;
                const double gm = std::sqrt(alpha * beta);
                if (gm <= negligible) continue;
                if (std::abs(gamma) <= tol * gm) continue;
                converged = false;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (int64_t i = 0; i < m; ++i) {
                    const double xp = cp[i], xq = cq[i];
                    cp[i] = c * xp - s * xq;
                    cq[i] = s * xp + c * xq;
                }
                if (want_right) {
                    double* vp = v.data() + p * n;
                    double* vq = v.data() + q * n;
                    for (int64_t i = 0; i < n; ++i) {
                        const double xp = vp[i], xq = vq[i];
                        vp[i] = c * xp - s * xq;
                        vq[i] = s * xp + c * xq;
                    }
                }
            }
        }
    }
    if (!converged) throw NumericError("jacobi_svd: no convergence within sweep limit");

    SvdResult out;
    out.sigma.resize(n);
    std::vector<int64_t> order(n);
    for (int64_t j = 0; j < n; ++j) {
        double ss = 0.0;
        const double* cj = w.data() + j * m;
        for (int64_t i = 0; i < m; ++i) ss += cj[i] * cj[i];
        out.sigma[j] = std::sqrt(ss);
        order[j] = j;
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](int64_t x, int64_t y) { return out.sigma[x] > out.sigma[y]; });
    std::vector<double> sorted(n);
    for (int64_t j = 0; j < n; ++j) sorted[j] = out.sigma[order[j]];
    out.sigma = std::move(sorted);
    if (want_right) {
        out.right.resize(n);
        for (int64_t j = 0; j < n; ++j) {
            out.right[j].assign(v.begin() + order[j] * n, v.begin() + (order[j] + 1) * n);
        }
    }
    return out;
}

template <typename T>
SvdResult jacobi_svd(const Tensor<T>& a, bool want_right = true) {
    if (a.shape().size() != 2)
        throw ShapeError("jacobi_svd: want rank-2, got " + shape_str(a.shape()));
    return jacobi_svd(a.data(), a.shape()[0], a.shape()[1], want_right);
}

template <typename T>
std::vector<double> singular_values(const Tensor<T>& a) {
    return jacobi_svd(a, /*want_right=*/false).sigma;
}

inline double cosine_similarity(const double* x, const double* y, int64_t n) {
    double xy = 0.0, xx = 0.0, yy = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        xy += x[i] * y[i];
        xx += x[i] * x[i];
        yy += y[i] * y[i];
    }
    if (xx == 0.0 || yy == 0.0) throw DomainError("cosine_similarity: zero vector");
    return xy / (std::sqrt(xx) * std::sqrt(yy));
}

}  // namespace sinklab
