#pragma once

// Dense row-major tensor kernel. Everything above (layers, composition,
// finite-difference checks) is built on the handful of operations here.
// All loops have a fixed iteration order so repeated runs are bit-identical.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace replearn {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
class TensorT {
public:
    // Default-constructed tensors are empty placeholders (e.g. the dropped
    // parameter slots of a frozen layer). Math ops reject them.
    TensorT() = default;

    explicit TensorT(Shape shape) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(shape_numel(shape_), T(0));
    }

    TensorT(Shape shape, std::vector<T> values)
        : shape_(std::move(shape)), data_(std::move(values)) {
        validate_shape();
        if (data_.size() != shape_numel(shape_))
            throw ShapeError("tensor: " + std::to_string(data_.size()) +
                             " values do not fill shape " + shape_str(shape_));
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

    static TensorT full(Shape shape, T value) {
        TensorT t(std::move(shape));
        for (auto& v : t.data_) v = value;
        return t;
    }

    static TensorT identity(std::size_t n) {
        TensorT t(Shape{n, n});
        for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = T(1);
        return t;
    }

    bool empty() const { return shape_.empty(); }
    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    // Same data, new shape; element count must match.
    TensorT reshaped(Shape shape) const {
        if (shape_numel(shape) != data_.size())
            throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape) +
                             " changes element count");
        return TensorT(std::move(shape), data_);
    }

    // Copy of the sub-tensor at the given first-axis index.
    TensorT slice(std::size_t index) const {
        if (rank() < 2) throw ShapeError("slice: tensor rank must be >= 2");
        if (index >= shape_[0]) throw ShapeError("slice: index out of range");
        Shape sub(shape_.begin() + 1, shape_.end());
        std::size_t stride = shape_numel(sub);
        std::vector<T> vals(data_.begin() + index * stride,
                            data_.begin() + (index + 1) * stride);
        return TensorT(std::move(sub), std::move(vals));
    }

    void set_slice(std::size_t index, const TensorT& sub) {
        std::size_t stride = sub.size();
        for (std::size_t i = 0; i < stride; ++i)
            data_[index * stride + i] = sub.data_[i];
    }

    bool all_finite() const {
        for (auto v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    bool bitwise_equal(const TensorT& other) const {
        return shape_ == other.shape_ && data_ == other.data_;
    }

    const std::vector<T>& values() const { return data_; }

private:
    void validate_shape() const {
        if (shape_.empty()) throw ShapeError("tensor: rank must be >= 1");
        for (auto d : shape_)
            if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<T> data_;
};

namespace detail {
template <typename T>
inline void require_nonempty(const TensorT<T>& t, const char* op) {
    if (t.empty()) throw ShapeError(std::string(op) + ": empty tensor operand");
}
template <typename T>
inline void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    require_nonempty(a, op);
    require_nonempty(b, op);
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}
} // namespace detail

// Matrix product, rank-2 only. Fixed i/j/k loop order keeps the
// accumulation order (and therefore the bits) reproducible.
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_nonempty(a, "matmul");
    detail::require_nonempty(b, "matmul");
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: operands must be rank-2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), p = a.dim(1), q = b.dim(1);
    TensorT<T> out(Shape{m, q});
    const T* ad = a.data();
    const T* bd = b.data();
    T* od = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < q; ++j) {
            T acc = T(0);
            for (std::size_t k = 0; k < p; ++k) acc += ad[i * p + k] * bd[k * q + j];
            od[i * q + j] = acc;
        }
    }
    return out;
}

// alpha * x + y, elementwise.
template <typename T>
TensorT<T> axpy(T alpha, const TensorT<T>& x, const TensorT<T>& y) {
    detail::require_same_shape(x, y, "axpy");
    TensorT<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = alpha * x[i] + y[i];
    return out;
}

// Full contraction: sum of the elementwise product, in flat index order.
template <typename T>
T dot(const TensorT<T>& x, const TensorT<T>& y) {
    detail::require_same_shape(x, y, "dot");
    T acc = T(0);
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
    return acc;
}

template <typename T>
TensorT<T> add(const TensorT<T>& x, const TensorT<T>& y) {
    detail::require_same_shape(x, y, "add");
    TensorT<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
    return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& x, const TensorT<T>& y) {
    detail::require_same_shape(x, y, "sub");
    TensorT<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
    return out;
}

template <typename T>
TensorT<T> scale(T alpha, const TensorT<T>& x) {
    detail::require_nonempty(x, "scale");
    TensorT<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = alpha * x[i];
    return out;
}

template <typename T>
TensorT<T> hadamard(const TensorT<T>& x, const TensorT<T>& y) {
    detail::require_same_shape(x, y, "hadamard");
    TensorT<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
    return out;
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
    detail::require_nonempty(a, "transpose");
    if (a.rank() != 2) throw ShapeError("transpose: rank-2 only, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    TensorT<T> out(Shape{n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
    return out;
}

template <typename T>
T sum(const TensorT<T>& x) {
    detail::require_nonempty(x, "sum");
    T acc = T(0);
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
    return acc;
}

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

// Seeded generator with hand-rolled distributions. std::*_distribution is
// implementation-defined, which would break run-to-run byte comparisons
// across standard libraries; mt19937_64 itself is pinned by the standard.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller with the spare value cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Uniform integer in [0, n) by rejection.
    std::size_t index(std::size_t n) {
        if (n == 0) throw std::invalid_argument("Rng::index: n must be positive");
        std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = gen_();
        while (v >= limit) v = gen_();
        return static_cast<std::size_t>(v % n);
    }

    // Fisher-Yates.
    template <typename V>
    void shuffle(std::vector<V>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace replearn
