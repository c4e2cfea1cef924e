#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "tracenas/common.hpp"

namespace tracenas {

/// Dense row-major 64-bit tensor. Immutable by convention once handed to a Tape;
/// all entries are expected to stay finite (operations check and throw NumericError).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor ones(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double v);

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::size_t size() const { return data_.size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;

    double sum() const;
    double dot(const Tensor& o) const;      // flattened inner product
    double norm2() const;                    // Euclidean norm of the flattened buffer
    double squared_norm() const;

    Tensor& operator+=(const Tensor& o);
    Tensor& operator*=(double c);
    Tensor& axpy(double a, const Tensor& x);  // *this += a * x

    std::string shape_str() const;

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

}  // namespace tracenas
