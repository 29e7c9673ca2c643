#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vcl/error.hpp"

namespace vcl {

using Shape = std::vector<int>;

inline long long numel(const Shape& s) {
    long long n = 1;
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

// Dense row-major tensor, rank 0..4. The scalar type is a template
// parameter so gradient checks can instantiate the whole stack in double;
// production code uses the float alias.
template <class T>
struct TensorT {
    Shape shape;
    std::vector<T> data;

    TensorT() = default;
    TensorT(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel(shape) != static_cast<long long>(data.size()))
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
    }

    static TensorT zeros(Shape s) {
        TensorT t;
        t.shape = std::move(s);
        t.data.assign(static_cast<size_t>(numel(t.shape)), T(0));
        return t;
    }
    static TensorT full(Shape s, T v) {
        TensorT t = zeros(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static TensorT scalar(T v) { return TensorT({1}, {v}); }

    static TensorT from(Shape s, std::initializer_list<T> vals) {
        return TensorT(std::move(s), std::vector<T>(vals));
    }

    int rank() const { return static_cast<int>(shape.size()); }
    size_t size() const { return data.size(); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T& operator[](size_t i) { return data[i]; }
    const T& operator[](size_t i) const { return data[i]; }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <class U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.data.reserve(data.size());
        for (T v : data) out.data.push_back(static_cast<U>(v));
        return out;
    }
};

using Tensor = TensorT<float>;

// Truncated normal: resample anything beyond two standard deviations.
template <class T>
TensorT<T> trunc_normal(Shape s, T stddev, std::mt19937_64& rng) {
    TensorT<T> t = TensorT<T>::zeros(std::move(s));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.data) {
        double z;
        do {
            z = dist(rng);
        } while (std::abs(z) > 2.0);
        v = static_cast<T>(z) * stddev;
    }
    return t;
}

} // namespace vcl
