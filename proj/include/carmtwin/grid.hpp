#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "carmtwin/error.hpp"

namespace carmtwin {

/// Dense row-major 2D buffer; (x, y) = (column, row).
template <typename T>
class Grid2D {
public:
    Grid2D() = default;
    Grid2D(int width, int height, T fill = T{})
        : width_(width)
        , height_(height)
        , data_(checked_size(width, height), fill)
    {
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    bool contains(int x, int y) const noexcept { return x >= 0 && y >= 0 && x < width_ && y < height_; }

    T& operator()(int x, int y) noexcept { return data_[index(x, y)]; }
    const T& operator()(int x, int y) const noexcept { return data_[index(x, y)]; }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }

    bool same_shape(const Grid2D& other) const noexcept
    {
        return width_ == other.width_ && height_ == other.height_;
    }

    bool operator==(const Grid2D&) const = default;

private:
    static std::size_t checked_size(int w, int h)
    {
        if (w < 0 || h < 0) throw Error(ErrorCode::invalid_parameter, "negative grid dimension");
        return static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    }
    std::size_t index(int x, int y) const noexcept
    {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<T> data_;
};

/// Dense 3D buffer, x fastest then y then z.
template <typename T>
class Grid3D {
public:
    Grid3D() = default;
    Grid3D(std::array<int, 3> dims, T fill = T{})
        : dims_(dims)
        , data_(checked_size(dims), fill)
    {
    }

    const std::array<int, 3>& dims() const noexcept { return dims_; }
    std::size_t size() const noexcept { return data_.size(); }

    bool contains(int i, int j, int k) const noexcept
    {
        return i >= 0 && j >= 0 && k >= 0 && i < dims_[0] && j < dims_[1] && k < dims_[2];
    }

    T& operator()(int i, int j, int k) noexcept { return data_[index(i, j, k)]; }
    const T& operator()(int i, int j, int k) const noexcept { return data_[index(i, j, k)]; }

    std::size_t index(int i, int j, int k) const noexcept
    {
        return (static_cast<std::size_t>(k) * static_cast<std::size_t>(dims_[1]) + static_cast<std::size_t>(j))
                * static_cast<std::size_t>(dims_[0])
            + static_cast<std::size_t>(i);
    }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }

    bool operator==(const Grid3D&) const = default;

private:
    static std::size_t checked_size(const std::array<int, 3>& d)
    {
        if (d[0] < 0 || d[1] < 0 || d[2] < 0) throw Error(ErrorCode::invalid_parameter, "negative grid dimension");
        return static_cast<std::size_t>(d[0]) * static_cast<std::size_t>(d[1]) * static_cast<std::size_t>(d[2]);
    }

    std::array<int, 3> dims_{0, 0, 0};
    std::vector<T> data_;
};

using Mask2D = Grid2D<std::uint8_t>;
using Mask3D = Grid3D<std::uint8_t>;

template <typename T>
std::size_t count_nonzero(const Grid2D<T>& g)
{
    return static_cast<std::size_t>(std::count_if(g.values().begin(), g.values().end(), [](const T& v) { return v != T{}; }));
}

} // namespace carmtwin
