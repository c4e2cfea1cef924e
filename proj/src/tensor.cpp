#include "tracenas/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace tracenas {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("tensor extent must be positive, got " + std::to_string(d));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
        throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_to_string(shape_));
}

Tensor Tensor::ones(std::vector<int> shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

double Tensor::dot(const Tensor& o) const {
    if (!same_shape(o)) throw ShapeError("dot: shape mismatch " + shape_str() + " vs " + o.shape_str());
    double s = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i) s += data_[i] * o.data_[i];
    return s;
}

double Tensor::squared_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return s;
}

double Tensor::norm2() const { return std::sqrt(squared_norm()); }

Tensor& Tensor::operator+=(const Tensor& o) {
    if (!same_shape(o)) throw ShapeError("+=: shape mismatch " + shape_str() + " vs " + o.shape_str());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double c) {
    for (auto& v : data_) v *= c;
    return *this;
}

Tensor& Tensor::axpy(double a, const Tensor& x) {
    if (!same_shape(x)) throw ShapeError("axpy: shape mismatch " + shape_str() + " vs " + x.shape_str());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += a * x.data_[i];
    return *this;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

}  // namespace tracenas
