#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "vsm/errors.hpp"

namespace vsm {

using Shape = std::vector<size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

// Dense row-major tensor. The buffer is shared on copy; treat tensors as
// immutable once they participate in a graph, and mutate only through the
// owning parameter store.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        validate_shape();
        buf_ = std::make_shared<std::vector<T>>(shape_numel(shape_), T(0));
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)) {
        validate_shape();
        if (shape_numel(shape_) != data.size())
            throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match buffer of " +
                             std::to_string(data.size()) + " scalars");
        buf_ = std::make_shared<std::vector<T>>(std::move(data));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        for (auto& x : *t.buf_) x = v;
        return t;
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    bool defined() const { return buf_ != nullptr; }
    const Shape& shape() const { return shape_; }
    size_t rank() const { return shape_.size(); }
    size_t size() const { return buf_ ? buf_->size() : 0; }

    size_t rows() const { return shape_.size() == 2 ? shape_[0] : (shape_.size() == 1 ? 1 : bad_rank()); }
    size_t cols() const { return shape_.size() == 2 ? shape_[1] : (shape_.size() == 1 ? shape_[0] : bad_rank()); }

    T* data() { return buf_->data(); }
    const T* data() const { return buf_->data(); }

    T& at(size_t i) { return (*buf_)[i]; }
    T at(size_t i) const { return (*buf_)[i]; }
    T& at(size_t r, size_t c) { return (*buf_)[r * cols() + c]; }
    T at(size_t r, size_t c) const { return (*buf_)[r * cols() + c]; }

    T item() const {
        if (size() != 1) throw ContractError("item: tensor " + shape_str(shape_) + " is not scalar");
        return (*buf_)[0];
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.buf_ = std::make_shared<std::vector<T>>(*buf_);
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const T& v : *buf_)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

private:
    size_t bad_rank() const { throw ShapeError("tensor: rank-" + std::to_string(rank()) + " used as matrix"); }
    void validate_shape() const {
        if (shape_.empty()) throw ShapeError("tensor: empty shape");
        for (size_t d : shape_)
            if (d < 1) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape_));
    }

    Shape shape_;
    std::shared_ptr<std::vector<T>> buf_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// ---------------------------------------------------------------------------
// Kernels. All accumulation runs in a single fixed order (increasing inner
// index) so results are bit-reproducible for a given seed. The forward graph
// and the incremental inference path share these.

template <typename T>
inline void matmul_into(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        T* ci = c + i * n;
        for (size_t j = 0; j < n; ++j) ci[j] = T(0);
        const T* ai = a + i * k;
        for (size_t p = 0; p < k; ++p) {
            const T av = ai[p];
            const T* bp = b + p * n;
            for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

template <typename T>
inline Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    Tensor<T> c({a.rows(), b.cols()});
    matmul_into(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
    return c;
}

// A[m×k] · B[n×k]^T -> [m×n]
template <typename T>
inline Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
        throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor<T> c({m, n});
    for (size_t i = 0; i < m; ++i) {
        const T* ai = a.data() + i * k;
        T* ci = c.data() + i * n;
        for (size_t j = 0; j < n; ++j) {
            const T* bj = b.data() + j * k;
            T acc = T(0);
            for (size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] = acc;
        }
    }
    return c;
}

// A[k×m]^T · B[k×n] -> [m×n]
template <typename T>
inline Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows())
        throw ShapeError("matmul_tn: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const size_t k = a.rows(), m = a.cols(), n = b.cols();
    Tensor<T> c({m, n});
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) c.data()[i * n + j] = T(0);
    for (size_t p = 0; p < k; ++p) {
        const T* ap = a.data() + p * m;
        const T* bp = b.data() + p * n;
        for (size_t i = 0; i < m; ++i) {
            const T av = ap[i];
            T* ci = c.data() + i * n;
            for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
    return c;
}

template <typename T>
inline Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose: need rank-2, got " + shape_str(a.shape()));
    Tensor<T> t({a.cols(), a.rows()});
    for (size_t i = 0; i < a.rows(); ++i)
        for (size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

// Row-wise softmax with per-row max subtraction.
template <typename T>
inline void softmax_row_into(const T* x, T* y, size_t n) {
    T mx = x[0];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    T sum = T(0);
    for (size_t j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
    }
    const T inv = T(1) / sum;
    for (size_t j = 0; j < n; ++j) y[j] *= inv;
}

template <typename T>
inline Tensor<T> softmax_rows(const Tensor<T>& x) {
    if (!x.all_finite()) throw NumericError("softmax_rows: non-finite input");
    const size_t m = x.rows(), n = x.cols();
    Tensor<T> y(x.shape());
    for (size_t i = 0; i < m; ++i) softmax_row_into(x.data() + i * n, y.data() + i * n, n);
    return y;
}

// x / sqrt(mean(x^2) + eps) * scale, applied per row.
template <typename T>
inline Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& scale, T eps) {
    const size_t d = x.cols();
    if (scale.size() != d)
        throw ShapeError("rms_norm: scale " + shape_str(scale.shape()) + " does not match width of " +
                         shape_str(x.shape()));
    if (!(eps > T(0))) throw ContractError("rms_norm: eps must be positive");
    Tensor<T> y(x.shape());
    for (size_t i = 0; i < x.rows(); ++i) {
        const T* xi = x.data() + i * d;
        T* yi = y.data() + i * d;
        T ms = T(0);
        for (size_t j = 0; j < d; ++j) ms += xi[j] * xi[j];
        const T inv = T(1) / std::sqrt(ms / T(d) + eps);
        for (size_t j = 0; j < d; ++j) yi[j] = xi[j] * inv * scale.data()[j];
    }
    return y;
}

template <typename T>
inline T sigmoid_scalar(T v) {
    return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : [&] {
        const T e = std::exp(v);
        return e / (T(1) + e);
    }();
}

template <typename T>
inline Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (size_t i = 0; i < x.size(); ++i) y.at(i) = sigmoid_scalar(x.at(i));
    return y;
}

template <typename T>
inline Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (size_t i = 0; i < x.size(); ++i) y.at(i) = x.at(i) > T(0) ? x.at(i) : T(0);
    return y;
}

// Exact erf-based GELU.
template <typename T>
inline Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (size_t i = 0; i < x.size(); ++i) {
        const T v = x.at(i);
        y.at(i) = T(0.5) * v * (T(1) + std::erf(v * T(0.70710678118654752440)));
    }
    return y;
}

// Rotary position embedding applied in-place per head: row r gets angle
// index pos0 + r. Pairs are (2i, 2i+1) within each head slice.
template <typename T>
inline void rope_rows_inplace(Tensor<T>& x, size_t n_heads, size_t pos0, T base, bool inverse = false) {
    const size_t d = x.cols(), dh = d / n_heads;
    for (size_t r = 0; r < x.rows(); ++r) {
        const T pos = T(pos0 + r);
        T* xr = x.data() + r * d;
        for (size_t h = 0; h < n_heads; ++h) {
            T* xh = xr + h * dh;
            for (size_t i = 0; i + 1 < dh; i += 2) {
                const T theta = pos * std::pow(base, -T(i) / T(dh));
                const T c = std::cos(theta), s = inverse ? -std::sin(theta) : std::sin(theta);
                const T a = xh[i], b = xh[i + 1];
                xh[i] = a * c - b * s;
                xh[i + 1] = a * s + b * c;
            }
        }
    }
}

// Mean of -log softmax(logits)[target] over masked rows; 0 if none masked.
template <typename T>
inline T cross_entropy_value(const Tensor<T>& logits, const std::vector<int>& targets,
                             const std::vector<uint8_t>& mask) {
    const size_t m = logits.rows(), n = logits.cols();
    if (targets.size() != m || mask.size() != m)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask entries for " + shape_str(logits.shape()));
    T total = T(0);
    size_t count = 0;
    for (size_t i = 0; i < m; ++i) {
        if (!mask[i]) continue;
        if (targets[i] < 0 || size_t(targets[i]) >= n)
            throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " outside vocab of " +
                             std::to_string(n));
        const T* li = logits.data() + i * n;
        T mx = li[0];
        for (size_t j = 1; j < n; ++j) mx = std::max(mx, li[j]);
        T sum = T(0);
        for (size_t j = 0; j < n; ++j) sum += std::exp(li[j] - mx);
        total += std::log(sum) - (li[size_t(targets[i])] - mx);
        ++count;
    }
    return count ? total / T(count) : T(0);
}

// Ties break toward the lowest index.
template <typename T>
inline size_t argmax_row(const T* x, size_t n) {
    size_t best = 0;
    for (size_t j = 1; j < n; ++j)
        if (x[j] > x[best]) best = j;
    return best;
}

}  // namespace vsm
