#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "dualpath/error.hpp"

namespace dualpath {

// Dense row-major n-d array of doubles. Immutable by convention once handed
// to a Tape; all math goes through free functions or Tape primitives.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        data.assign(numel_of(shape), 0.0);
    }

    Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel_of(shape)) {
            throw dimension_error("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str());
        }
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t e : s) {
            if (e == 0) throw dimension_error("zero extent in tensor shape");
            n *= e;
        }
        return n;
    }

    static Tensor matrix(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

    static Tensor vector_of(std::vector<double> d) {
        std::vector<std::size_t> s{d.size()};
        return Tensor(std::move(s), std::move(d));
    }

    std::size_t numel() const { return data.size(); }
    std::size_t ndim() const { return shape.size(); }

    std::size_t rows() const {
        if (shape.size() != 2) throw dimension_error("rows(): tensor is not 2-d, shape " + shape_str());
        return shape[0];
    }
    std::size_t cols() const {
        if (shape.size() != 2) throw dimension_error("cols(): tensor is not 2-d, shape " + shape_str());
        return shape[1];
    }

    double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) os << 'x';
            os << shape[i];
        }
        os << ']';
        return os.str();
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw dimension_error(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
}

inline void require_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw numeric_error(std::string(op) + ": non-finite value produced");
}

// ---------------------------------------------------------------------------
// Matmul kernels. ikj ordering keeps the inner loop contiguous in both b and
// out; this is the hot path of the whole artifact.
// ---------------------------------------------------------------------------

// out[m x n] += a[m x k] * b[k x n]. Four A rows share each streamed B row.
inline void matmul_acc_raw(const double* pa, const double* pb, double* po, std::size_t m, std::size_t k,
                           std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        const double* a0 = pa + i * k;
        const double* a1 = a0 + k;
        const double* a2 = a1 + k;
        const double* a3 = a2 + k;
        double* o0 = po + i * n;
        double* o1 = o0 + n;
        double* o2 = o1 + n;
        double* o3 = o2 + n;
        for (std::size_t t = 0; t < k; ++t) {
            const double v0 = a0[t], v1 = a1[t], v2 = a2[t], v3 = a3[t];
            const double* brow = pb + t * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double bj = brow[j];
                o0[j] += v0 * bj;
                o1[j] += v1 * bj;
                o2[j] += v2 * bj;
                o3[j] += v3 * bj;
            }
        }
    }
    for (; i < m; ++i) {
        const double* arow = pa + i * k;
        double* orow = po + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            const double av = arow[t];
            const double* brow = pb + t * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// out[m x n] = a[m x k] * b[k x n]
inline void matmul_into(const Tensor& a, const Tensor& b, Tensor& out) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw dimension_error("matmul: inner extents disagree, " + a.shape_str() + " * " + b.shape_str());
    }
    out.shape = {m, n};
    out.data.assign(m * n, 0.0);
    matmul_acc_raw(a.data.data(), b.data.data(), out.data.data(), m, k, n);
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    Tensor out;
    matmul_into(a, b, out);
    return out;
}

// out[m x n] += a[m x k] * b[n x k]^T   (i.e. a * transpose(b))
// Four B rows share each streamed A row.
inline void matmul_nt_acc(const Tensor& a, const Tensor& b, Tensor& out) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) {
        throw dimension_error("matmul_nt: inner extents disagree, " + a.shape_str() + " * " + b.shape_str() + "^T");
    }
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* po = out.data.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        double* orow = po + i * n;
        std::size_t j = 0;
        for (; j + 4 <= n; j += 4) {
            const double* b0 = pb + j * k;
            const double* b1 = b0 + k;
            const double* b2 = b1 + k;
            const double* b3 = b2 + k;
            double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
            for (std::size_t t = 0; t < k; ++t) {
                const double av = arow[t];
                acc0 += av * b0[t];
                acc1 += av * b1[t];
                acc2 += av * b2[t];
                acc3 += av * b3[t];
            }
            orow[j] += acc0;
            orow[j + 1] += acc1;
            orow[j + 2] += acc2;
            orow[j + 3] += acc3;
        }
        for (; j < n; ++j) {
            const double* brow = pb + j * k;
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) acc += arow[t] * brow[t];
            orow[j] += acc;
        }
    }
}

inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    Tensor out({a.rows(), b.rows()});
    matmul_nt_acc(a, b, out);
    return out;
}

// out[k x n] += a[m x k]^T * b[m x n]
inline void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != m) {
        throw dimension_error("matmul_tn: inner extents disagree, " + a.shape_str() + "^T * " + b.shape_str());
    }
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* po = out.data.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        const double* brow = pb + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            const double av = arow[t];
            double* orow = po + t * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    Tensor out({a.cols(), b.cols()});
    matmul_tn_acc(a, b, out);
    return out;
}

}  // namespace dualpath
