#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace risclip {

// Dense row-major tensor, rank 1..4. Small and value-semantic; all model
// math at desk scale goes through this type.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s);

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, T v);

    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

    T& operator[](std::int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<size_t>(i)]; }

    // row-major accessors; rank is the caller's responsibility
    T& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    const T& at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
    T& at(int i, int j, int k) {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    const T& at(int i, int j, int k) const {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    T& at(int i, int j, int k, int l) {
        return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }
    const T& at(int i, int j, int k, int l) const {
        return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

std::int64_t numel_of(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// --- deterministic initialization -----------------------------------------
//
// Every element is a pure function of (seed, linear index), so tensors are
// reproducible regardless of creation order. Named variants fold the tensor
// name into the seed, which keeps fixtures stable when the registry grows.

std::uint64_t mix_name(std::uint64_t seed, std::string_view name);
double unit_normal(std::uint64_t seed, std::int64_t index);
double unit_uniform(std::uint64_t seed, std::int64_t index);  // [0,1)

template <typename T>
Tensor<T> randn(std::vector<int> shape, double stddev, std::uint64_t seed);

// Kaiming normal for ReLU fan-in: stddev = sqrt(2 / fan_in)
template <typename T>
Tensor<T> kaiming_normal(std::vector<int> shape, int fan_in, std::uint64_t seed);

extern template struct Tensor<float>;
extern template struct Tensor<double>;
extern template struct Tensor<std::uint8_t>;
extern template Tensor<float> randn<float>(std::vector<int>, double, std::uint64_t);
extern template Tensor<double> randn<double>(std::vector<int>, double, std::uint64_t);
extern template Tensor<float> kaiming_normal<float>(std::vector<int>, int, std::uint64_t);
extern template Tensor<double> kaiming_normal<double>(std::vector<int>, int, std::uint64_t);

}  // namespace risclip
