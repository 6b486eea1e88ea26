#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "ovlw/errors.hpp"

namespace ovlw {

// Dense row-major double tensor. Plain value type; the autodiff layer owns
// graph structure, this owns nothing but numbers.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)), data_(count(shape_), 0.0) {}
    Tensor(std::vector<int64_t> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        OVLW_REQUIRE(static_cast<int64_t>(data_.size()) == count(shape_), InvalidInput,
                     "tensor data size does not match shape");
    }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int64_t> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t ndim() const { return shape_.size(); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](int64_t i) { return data_[i]; }
    double operator[](int64_t i) const { return data_[i]; }

    double& at2(int64_t r, int64_t c) { return data_[r * shape_[1] + c]; }
    double at2(int64_t r, int64_t c) const { return data_[r * shape_[1] + c]; }

    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    // Reinterpret the flat buffer under a new shape with equal element count.
    Tensor reshaped(std::vector<int64_t> shape) const {
        OVLW_REQUIRE(count(shape) == numel(), InvalidInput, "reshape changes element count");
        return Tensor(std::move(shape), data_);
    }

    static int64_t count(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

  private:
    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

}  // namespace ovlw
