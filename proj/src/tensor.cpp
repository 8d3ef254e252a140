#include "evimerge/tensor.hpp"

#include <sstream>

#include "evimerge/errors.hpp"

namespace evimerge {

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> v)
    : shape(std::move(s)), values(std::move(v)) {
    check_shape(*this, "Tensor");
}

Tensor Tensor::zeros(const std::vector<std::size_t>& shape) {
    return Tensor(shape, std::vector<double>(shape_numel(shape), 0.0));
}

Tensor Tensor::full(const std::vector<std::size_t>& shape, double fill) {
    return Tensor(shape, std::vector<double>(shape_numel(shape), fill));
}

Tensor Tensor::vec(std::vector<double> v) {
    std::size_t n = v.size();
    return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
}

std::size_t Tensor::rows() const { return rank() == 2 ? shape[0] : 1; }

std::size_t Tensor::cols() const {
    if (rank() == 2) return shape[1];
    if (rank() == 1) return shape[0];
    return size();
}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

void check_shape(const Tensor& t, const char* where) {
    if (shape_numel(t.shape) != t.values.size()) {
        std::ostringstream os;
        os << where << ": shape " << shape_str(t.shape) << " does not match value count "
           << t.values.size();
        throw DimensionError(os.str());
    }
}

}  // namespace evimerge
