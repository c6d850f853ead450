#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "segtrain/common.hpp"

namespace segtrain {

// Dense row-major matrix of doubles. All training math is 64-bit.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}
    Mat(int r, int c, std::vector<double> v) : rows(r), cols(c), a(std::move(v)) {
        assert(a.size() == static_cast<std::size_t>(r) * c);
    }

    double& at(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }
    const double* row(int r) const { return a.data() + static_cast<std::size_t>(r) * cols; }
    double* row(int r) { return a.data() + static_cast<std::size_t>(r) * cols; }
    std::size_t size() const { return a.size(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double v : a)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline Mat zeros_like(const Mat& m) { return Mat(m.rows, m.cols); }

// out = x * w, shapes (m,k)x(k,n). i-k-j order so the inner loop streams rows.
inline Mat matmul(const Mat& x, const Mat& w) {
    assert(x.cols == w.rows);
    Mat out(x.rows, w.cols);
    for (int i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        double* oi = out.row(i);
        for (int k = 0; k < x.cols; ++k) {
            double v = xi[k];
            if (v == 0.0) continue;
            const double* wk = w.row(k);
            for (int j = 0; j < w.cols; ++j) oi[j] += v * wk[j];
        }
    }
    return out;
}

// grad wrt x of (x*w): gout * w^T, accumulated.
inline void matmul_back_x(const Mat& gout, const Mat& w, Mat& gx) {
    assert(gout.cols == w.cols && gx.cols == w.rows && gx.rows == gout.rows);
    for (int i = 0; i < gout.rows; ++i) {
        const double* gi = gout.row(i);
        double* oi = gx.row(i);
        for (int k = 0; k < w.rows; ++k) {
            const double* wk = w.row(k);
            double acc = 0.0;
            for (int j = 0; j < w.cols; ++j) acc += gi[j] * wk[j];
            oi[k] += acc;
        }
    }
}

// grad wrt w of (x*w): x^T * gout, accumulated.
inline void matmul_back_w(const Mat& x, const Mat& gout, Mat& gw) {
    assert(x.rows == gout.rows && gw.rows == x.cols && gw.cols == gout.cols);
    for (int i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        const double* gi = gout.row(i);
        for (int k = 0; k < x.cols; ++k) {
            double v = xi[k];
            if (v == 0.0) continue;
            double* wk = gw.row(k);
            for (int j = 0; j < gout.cols; ++j) wk[j] += v * gi[j];
        }
    }
}

// broadcast-add a 1-row bias to every row
inline Mat add_row(const Mat& x, const Mat& b) {
    assert(b.rows == 1 && b.cols == x.cols);
    Mat out = x;
    for (int i = 0; i < x.rows; ++i) {
        double* oi = out.row(i);
        for (int j = 0; j < x.cols; ++j) oi[j] += b.a[static_cast<std::size_t>(j)];
    }
    return out;
}

inline Mat relu(const Mat& x) {
    Mat out = x;
    for (double& v : out.a)
        if (v < 0.0) v = 0.0;
    return out;
}

inline void relu_back(const Mat& x, const Mat& gout, Mat& gx) {
    assert(x.same_shape(gout) && x.same_shape(gx));
    for (std::size_t i = 0; i < x.a.size(); ++i)
        if (x.a[i] > 0.0) gx.a[i] += gout.a[i];
}

inline Mat hconcat(const Mat& a, const Mat& b) {
    assert(a.rows == b.rows);
    Mat out(a.rows, a.cols + b.cols);
    for (int i = 0; i < a.rows; ++i) {
        double* oi = out.row(i);
        const double* ai = a.row(i);
        const double* bi = b.row(i);
        for (int j = 0; j < a.cols; ++j) oi[j] = ai[j];
        for (int j = 0; j < b.cols; ++j) oi[a.cols + j] = bi[j];
    }
    return out;
}

// mean over rows -> 1 x cols; zero rows -> zeros
inline Mat row_mean(const Mat& x) {
    Mat out(1, x.cols);
    if (x.rows == 0) return out;
    for (int i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        for (int j = 0; j < x.cols; ++j) out.a[static_cast<std::size_t>(j)] += xi[j];
    }
    double inv = 1.0 / x.rows;
    for (double& v : out.a) v *= inv;
    return out;
}

inline Mat scale(const Mat& x, double s) {
    Mat out = x;
    for (double& v : out.a) v *= s;
    return out;
}

inline void axpy(double s, const Mat& x, Mat& y) {
    assert(x.same_shape(y));
    for (std::size_t i = 0; i < x.a.size(); ++i) y.a[i] += s * x.a[i];
}

inline Mat add(const Mat& x, const Mat& y) {
    assert(x.same_shape(y));
    Mat out = x;
    for (std::size_t i = 0; i < x.a.size(); ++i) out.a[i] += y.a[i];
    return out;
}

inline double dot(const Mat& x, const Mat& y) {
    assert(x.same_shape(y));
    double acc = 0.0;
    for (std::size_t i = 0; i < x.a.size(); ++i) acc += x.a[i] * y.a[i];
    return acc;
}

inline double max_abs_diff(const Mat& x, const Mat& y) {
    assert(x.same_shape(y));
    double m = 0.0;
    for (std::size_t i = 0; i < x.a.size(); ++i) m = std::max(m, std::abs(x.a[i] - y.a[i]));
    return m;
}

inline bool bit_equal(const Mat& x, const Mat& y) {
    if (!x.same_shape(y)) return false;
    for (std::size_t i = 0; i < x.a.size(); ++i)
        if (x.a[i] != y.a[i]) return false;
    return true;
}

}  // namespace segtrain
