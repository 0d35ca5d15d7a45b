#pragma once

#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace latent_relight {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t acc, int d) { return acc * static_cast<std::size_t>(d); });
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Cache-line aligned storage. Vectorized kernels pick their summation order
// from the buffer's alignment, so a fixed alignment keeps results bitwise
// reproducible from run to run.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

// Dense row-major array. Convolutional activations use NCHW.
template <typename T>
struct Tensor {
    Shape shape;
    AlignedVector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {}
    Tensor(Shape s, const std::vector<T>& values) : shape(std::move(s)), data(values.begin(), values.end()) {
        if (data.size() != shape_numel(shape))
            throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape));
    }

    std::size_t size() const { return data.size(); }
    int dim(std::size_t i) const { return shape.at(i); }
    int rank() const { return static_cast<int>(shape.size()); }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }
    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    // NCHW accessor.
    T& at(int n, int c, int y, int x) {
        return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }
    const T& at(int n, int c, int y, int x) const {
        return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.assign(data.begin(), data.end());
        return out;
    }
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b)
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

} // namespace latent_relight
