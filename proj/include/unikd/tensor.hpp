#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "unikd/common.hpp"

namespace unikd {

// Dense row-major tensor of doubles. Feature maps use the (n, c, h, w)
// layout; smaller ranks are allowed for vectors/matrices.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(count(shape_), fill) {}

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // 4-d accessor (n, c, h, w)
    double& at(int n, int c, int h, int w) {
        return data_[idx4(n, c, h, w)];
    }
    double at(int n, int c, int h, int w) const {
        return data_[idx4(n, c, h, w)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(0.0); }

    void add_(const Tensor& o, double scale = 1.0) {
        UNIKD_CHECK(same_shape(o), "tensor add: shape mismatch");
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += scale * o.data_[i];
    }
    void scale_(double s) {
        for (double& v : data_) v *= s;
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(),
                           [](double v) { return std::isfinite(v); });
    }

    static std::int64_t count(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            UNIKD_CHECK(d >= 0, "negative tensor dimension");
            n *= d;
        }
        return n;
    }

    static std::string shape_str(const std::vector<int>& shape) {
        std::string s = "(";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }

private:
    size_t idx4(int n, int c, int h, int w) const {
        return static_cast<size_t>(((static_cast<std::int64_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w);
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

}  // namespace unikd
