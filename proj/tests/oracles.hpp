/*
   Copyright 2026 The stodyn Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

// Test-only reference computations. Nothing here calls into the code paths
// it is used to check.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <numbers>
#include <span>
#include <vector>

namespace oracle {

/// Closed-form characteristic function of S_alpha(1, beta, 0).
inline std::complex<double> stable_cf(double u, double alpha, double beta) {
    const double au = std::abs(u);
    const double sgn = u > 0 ? 1.0 : (u < 0 ? -1.0 : 0.0);
    if (alpha == 1.0) {
        const double lg = au > 0 ? std::log(au) : 0.0;
        return std::exp(std::complex<double>(-au, -au * beta * (2.0 / std::numbers::pi) * sgn * lg));
    }
    const double a = std::pow(au, alpha);
    return std::exp(std::complex<double>(-a, a * beta * sgn * std::tan(0.5 * std::numbers::pi * alpha)));
}

/// Empirical characteristic function.
inline std::complex<double> empirical_cf(std::span<const double> xs, double u) {
    double re = 0.0, im = 0.0;
    for (double x : xs) {
        re += std::cos(u * x);
        im += std::sin(u * x);
    }
    return {re / static_cast<double>(xs.size()), im / static_cast<double>(xs.size())};
}

/// Hill estimator of the tail index from the k largest |x|.
inline double hill_estimator(std::vector<double> xs, std::size_t k) {
    for (auto& x : xs) x = std::abs(x);
    std::nth_element(xs.begin(), xs.end() - static_cast<std::ptrdiff_t>(k + 1), xs.end());
    std::sort(xs.end() - static_cast<std::ptrdiff_t>(k + 1), xs.end());
    const double threshold = xs[xs.size() - k - 1];
    double s = 0.0;
    for (std::size_t i = xs.size() - k; i < xs.size(); ++i) s += std::log(xs[i] / threshold);
    return static_cast<double>(k) / s;
}

/// Composite Simpson rule with n (even) panels.
inline double simpson(const std::function<double(double)>& f, double a, double b, int n) {
    const double h = (b - a) / n;
    double s = f(a) + f(b);
    for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f(a + i * h);
    return s * h / 3.0;
}

inline double quantile(std::vector<double> xs, double q) {
    const auto k = static_cast<std::size_t>(q * static_cast<double>(xs.size() - 1));
    std::nth_element(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(k), xs.end());
    return xs[k];
}

inline double normal_pdf(double x, double mean, double var) {
    return std::exp(-0.5 * (x - mean) * (x - mean) / var) / std::sqrt(2.0 * std::numbers::pi * var);
}

/// Interior local maxima count of samples on a grid (plateaus count once).
inline int count_modes(std::span<const double> p) {
    int modes = 0;
    for (std::size_t i = 1; i + 1 < p.size(); ++i) {
        if (p[i] > p[i - 1]) {
            std::size_t j = i;
            while (j + 1 < p.size() && p[j + 1] == p[i]) ++j;
            if (j + 1 < p.size() && p[j + 1] < p[i]) ++modes;
            i = j;
        }
    }
    return modes;
}

/// Real roots of a scalar function on [a, b] by sign-change bracketing and bisection.
inline std::vector<double> roots(const std::function<double(double)>& f, double a, double b, int n = 4000) {
    std::vector<double> out;
    double x0 = a, f0 = f(a);
    for (int i = 1; i <= n; ++i) {
        const double x1 = a + (b - a) * i / n, f1 = f(x1);
        if (f0 == 0.0) out.push_back(x0);
        else if (f0 * f1 < 0.0) {
            double lo = x0, hi = x1, flo = f0;
            for (int it = 0; it < 100; ++it) {
                const double mid = 0.5 * (lo + hi), fm = f(mid);
                if ((fm < 0) == (flo < 0)) { lo = mid; flo = fm; } else hi = mid;
            }
            out.push_back(0.5 * (lo + hi));
        }
        x0 = x1;
        f0 = f1;
    }
    return out;
}

/// Solves eps H A - K H = C for H (m x n) through the Kronecker form.
inline Eigen::MatrixXd sylvester(double eps, const Eigen::MatrixXd& A, const Eigen::MatrixXd& K,
                                 const Eigen::MatrixXd& C) {
    const auto m = K.rows(), n = A.rows();
    Eigen::MatrixXd op = Eigen::MatrixXd::Zero(m * n, m * n);
    // vec(K H) = (I_n x K) vec H, vec(H A) = (A^T x I_m) vec H
    for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index l = 0; l < n; ++l)
            for (Eigen::Index i = 0; i < m; ++i) {
                op(j * m + i, l * m + i) += eps * A(l, j);
                if (j == l)
                    for (Eigen::Index r = 0; r < m; ++r) op(j * m + i, l * m + r) -= K(i, r);
            }
    Eigen::VectorXd c = Eigen::Map<const Eigen::VectorXd>(C.data(), m * n);
    Eigen::VectorXd h = op.fullPivLu().solve(c);
    return Eigen::Map<Eigen::MatrixXd>(h.data(), m, n);
}

}  // namespace oracle
