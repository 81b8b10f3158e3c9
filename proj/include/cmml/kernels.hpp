#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "cmml/tensor.hpp"

namespace cmml {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

// Feature-matrix view: leading axes flattened into rows, last axis as columns.
inline MatMap mat(Tensor& t) { return MatMap(t.data(), t.rows(), t.last()); }
inline CMatMap mat(const Tensor& t) { return CMatMap(t.data(), t.rows(), t.last()); }

inline MatMap mat2(Tensor& t, long long r, long long c) { return MatMap(t.data(), r, c); }
inline CMatMap mat2(const Tensor& t, long long r, long long c) {
    return CMatMap(t.data(), r, c);
}

constexpr double kCosineEps = 1e-8;

// u.v / (|u||v| + eps), clamped to [-1,1]; 0 if both vectors are zero.
inline double cosine_value(const double* u, const double* v, int d) {
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (int i = 0; i < d; ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    double den = std::sqrt(nu) * std::sqrt(nv) + kCosineEps;
    double c = dot / den;
    return c > 1.0 ? 1.0 : (c < -1.0 ? -1.0 : c);
}

// In-place stable softmax over the last axis of a flattened (rows x n) view.
inline void softmax_rows_inplace(double* x, long long rows, int n) {
    for (long long r = 0; r < rows; ++r) {
        double* p = x + r * n;
        double m = p[0];
        for (int i = 1; i < n; ++i) m = std::max(m, p[i]);
        double s = 0.0;
        for (int i = 0; i < n; ++i) {
            p[i] = std::exp(p[i] - m);
            s += p[i];
        }
        for (int i = 0; i < n; ++i) p[i] /= s;
    }
}

inline int argmax_row(const double* p, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (p[i] > p[best]) best = i;
    return best;
}

}  // namespace cmml
