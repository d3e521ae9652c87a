#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "avatarkit/errors.hpp"

namespace avk {

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. Rasters follow the CHW layout.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(numel_of(shape_), T(0)) {}
    Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(numel_of(shape_), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != numel_of(shape_))
            throw ShapeError("tensor data size does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // CHW accessors
    T& at(int c, int y, int x) {
        return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    const T& at(int c, int y, int x) const {
        return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    T& at(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    const T& at(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(Shape s) const {
        if (numel_of(s) != numel())
            throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(s));
        Tensor out = *this;
        out.shape_ = std::move(s);
        return out;
    }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    T min() const {
        T m = data_.empty() ? T(0) : data_[0];
        for (const T& v : data_) m = std::min(m, v);
        return m;
    }
    T max() const {
        T m = data_.empty() ? T(0) : data_[0];
        for (const T& v : data_) m = std::max(m, v);
        return m;
    }
    double sum() const {
        double s = 0;
        for (const T& v : data_) s += static_cast<double>(v);
        return s;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
    Tensor<To> out(t.shape());
    for (int64_t i = 0; i < t.numel(); ++i) out[i] = static_cast<To>(t[i]);
    return out;
}

template <typename T, typename F>
Tensor<T> map1(const Tensor<T>& a, F f) {
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
    return out;
}

template <typename T, typename F>
Tensor<T> map2(const Tensor<T>& a, const Tensor<T>& b, F f) {
    if (!a.same_shape(b))
        throw ShapeError("elementwise op on mismatched shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

}  // namespace avk
