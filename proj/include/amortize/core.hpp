#pragma once

// Dense double-precision vectors and row-major matrices, plus the few
// numeric helpers shared across the library. Everything is 64-bit; there
// is no attempt at BLAS-level throughput.

#include <algorithm>
#include <cassert>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace amortize {

using Vec = std::vector<double>;

struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vec a;  // row-major, size rows*cols

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
    const double* row(std::size_t i) const { return a.data() + i * cols; }
    double* row(std::size_t i) { return a.data() + i * cols; }
};

inline void check_dim(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("dimension mismatch: ") + what);
}

// out = W x + b
inline void affine(const Mat& w, const Vec& x, const Vec& b, Vec& out) {
    check_dim(w.cols == x.size() && w.rows == b.size(), "affine");
    out.resize(w.rows);
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double* wr = w.row(i);
        double s = b[i];
        for (std::size_t j = 0; j < w.cols; ++j) s += wr[j] * x[j];
        out[i] = s;
    }
}

// out = W^T y
inline void matvec_t(const Mat& w, const Vec& y, Vec& out) {
    check_dim(w.rows == y.size(), "matvec_t");
    out.assign(w.cols, 0.0);
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double* wr = w.row(i);
        const double yi = y[i];
        for (std::size_t j = 0; j < w.cols; ++j) out[j] += wr[j] * yi;
    }
}

// w += scale * outer(y, x)
inline void add_outer(Mat& w, const Vec& y, const Vec& x, double scale = 1.0) {
    check_dim(w.rows == y.size() && w.cols == x.size(), "add_outer");
    for (std::size_t i = 0; i < w.rows; ++i) {
        double* wr = w.row(i);
        const double yi = scale * y[i];
        for (std::size_t j = 0; j < w.cols; ++j) wr[j] += yi * x[j];
    }
}

inline void axpy(Vec& y, double a, const Vec& x) {
    check_dim(y.size() == x.size(), "axpy");
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

inline double dot(const Vec& a, const Vec& b) {
    check_dim(a.size() == b.size(), "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(const Vec& v) { return std::sqrt(dot(v, v)); }

inline bool all_finite(const Vec& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline double clamp(double x, double lo, double hi) { return std::min(std::max(x, lo), hi); }

constexpr double kLogVarMin = -20.0;
constexpr double kLogVarMax = 20.0;
constexpr double kBernoulliLogitClamp = 15.0;

// Shortest-round-trip decimal formatting; locale-free, so emitted CSV/SVG
// bytes are reproducible.
inline std::string fmt(double x) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

inline std::string fmt(std::size_t x) { return std::to_string(x); }

}  // namespace amortize
