#include "risclip/tensor.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace risclip {

std::int64_t numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor dim must be positive, got " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

template <typename T>
Tensor<T>::Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(std::vector<int> s, T v) {
    Tensor<T> t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
}

template <typename T>
bool Tensor<T>::all_finite() const {
    for (const T& x : data)
        if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
}

template <>
bool Tensor<std::uint8_t>::all_finite() const {
    return true;
}

// splitmix64 finalizer
static std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t mix_name(std::uint64_t seed, std::string_view name) {
    std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return mix64(seed ^ h);
}

double unit_uniform(std::uint64_t seed, std::int64_t index) {
    return static_cast<double>(mix64(seed + 0x632BE59BD9B4E019ULL * static_cast<std::uint64_t>(index + 1)) >> 11) *
           0x1.0p-53;
}

// Box-Muller over two counter-derived uniforms.
double unit_normal(std::uint64_t seed, std::int64_t index) {
    const std::uint64_t a = mix64(seed + 2 * static_cast<std::uint64_t>(index));
    const std::uint64_t b = mix64(seed + 2 * static_cast<std::uint64_t>(index) + 1);
    const double u1 = 1.0 - static_cast<double>(a >> 11) * 0x1.0p-53;  // (0,1]
    const double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;        // [0,1)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

template <typename T>
Tensor<T> randn(std::vector<int> shape, double stddev, std::uint64_t seed) {
    Tensor<T> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<T>(stddev * unit_normal(seed, i));
    return t;
}

template <typename T>
Tensor<T> kaiming_normal(std::vector<int> shape, int fan_in, std::uint64_t seed) {
    return randn<T>(std::move(shape), std::sqrt(2.0 / fan_in), seed);
}

template struct Tensor<float>;
template struct Tensor<double>;
template struct Tensor<std::uint8_t>;
template Tensor<float> randn<float>(std::vector<int>, double, std::uint64_t);
template Tensor<double> randn<double>(std::vector<int>, double, std::uint64_t);
template Tensor<float> kaiming_normal<float>(std::vector<int>, int, std::uint64_t);
template Tensor<double> kaiming_normal<double>(std::vector<int>, int, std::uint64_t);

}  // namespace risclip
