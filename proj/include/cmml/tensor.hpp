#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <vector>

#include "cmml/common.hpp"

namespace cmml {

// Dense row-major double tensor. The last axis is the feature axis; most
// kernels view a tensor as a (numel/last) x last matrix.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        v_.assign(static_cast<size_t>(count_(shape_)), 0.0);
    }

    static Tensor from(std::vector<int> shape, std::vector<double> vals) {
        Tensor t;
        t.shape_ = std::move(shape);
        CMML_CHECK(count_(t.shape_) == static_cast<long long>(vals.size()),
                   "Tensor::from: value count does not match shape");
        t.v_ = std::move(vals);
        return t;
    }

    static Tensor scalar(double x) { return from({1}, {x}); }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double x) {
        Tensor t(std::move(shape));
        std::fill(t.v_.begin(), t.v_.end(), x);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }

    int dim(int i) const {
        if (i < 0) i += ndim();
        CMML_CHECK(i >= 0 && i < ndim(), "Tensor::dim: axis out of range");
        return shape_[static_cast<size_t>(i)];
    }

    long long numel() const { return static_cast<long long>(v_.size()); }
    bool empty() const { return v_.empty(); }

    // Feature-matrix view: all leading axes flattened into rows.
    int last() const { return shape_.empty() ? 1 : shape_.back(); }
    long long rows() const { return last() == 0 ? 0 : numel() / last(); }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }

    double& operator[](long long i) { return v_[static_cast<size_t>(i)]; }
    double operator[](long long i) const { return v_[static_cast<size_t>(i)]; }

    double& at2(long long r, long long c) { return v_[static_cast<size_t>(r * last() + c)]; }
    double at2(long long r, long long c) const { return v_[static_cast<size_t>(r * last() + c)]; }

    std::vector<double>& values() { return v_; }
    const std::vector<double>& values() const { return v_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double x : v_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    Tensor reshaped(std::vector<int> shape) const {
        CMML_CHECK(count_(shape) == numel(), "reshape: element count mismatch");
        Tensor t;
        t.shape_ = std::move(shape);
        t.v_ = v_;
        return t;
    }

    void fill(double x) { std::fill(v_.begin(), v_.end(), x); }

    void add_inplace(const Tensor& o) {
        CMML_CHECK(same_shape(o), "add_inplace: shape mismatch");
        for (size_t i = 0; i < v_.size(); ++i) v_[i] += o.v_[i];
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (int i = 0; i < ndim(); ++i) os << (i ? "x" : "") << shape_[static_cast<size_t>(i)];
        os << "]";
        return os.str();
    }

private:
    static long long count_(const std::vector<int>& shape) {
        long long n = 1;
        for (int s : shape) {
            CMML_CHECK(s >= 0, "Tensor: negative extent");
            n *= s;
        }
        return n;
    }

    std::vector<int> shape_;
    std::vector<double> v_;
};

inline long long numel_of(const std::vector<int>& shape) {
    long long n = 1;
    for (int s : shape) n *= s;
    return n;
}

}  // namespace cmml
