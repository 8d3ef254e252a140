#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace evimerge {

// Dense row-major tensor of doubles. The tape only ever sees rank 1 or 2;
// archives may carry arbitrary ranks.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> values;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, std::vector<double> v);

    static Tensor zeros(const std::vector<std::size_t>& shape);
    static Tensor full(const std::vector<std::size_t>& shape, double fill);
    static Tensor vec(std::vector<double> v);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);

    std::size_t size() const { return values.size(); }
    std::size_t rank() const { return shape.size(); }

    // Rank-2 accessors; rank-1 tensors count as a single row.
    std::size_t rows() const;
    std::size_t cols() const;
    double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);

// Throws DimensionError if product(shape) != values.size().
void check_shape(const Tensor& t, const char* where);

}  // namespace evimerge
