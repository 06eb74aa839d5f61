#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "tealab/errors.hpp"

namespace tealab {

/// Dense row-major array of 64-bit floats with an explicit shape.
/// The unit of all numerics in this library. Immutable shape, mutable data.
///
/// The (shape, data) constructor validates that every entry is finite;
/// tensors filled by internal kernels skip that check so that a divergence
/// during training surfaces as a DivergenceError downstream instead.
class Tensor {
public:
    Tensor() = default;

    /// Zero-filled tensor of the given shape.
    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(checked_count(shape_), 0.0) {}

    /// Tensor from raw data. Rejects length mismatch and non-finite entries.
    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_count(shape_) != data_.size()) {
            throw ShapeError("tensor shape " + shape_string(shape_) + " expects " +
                             std::to_string(checked_count(shape_)) + " entries, got " +
                             std::to_string(data_.size()));
        }
        for (double v : data_) {
            if (!std::isfinite(v)) throw ValueError("non-finite entry in tensor data");
        }
    }

    static Tensor scalar(double v) {
        Tensor t(std::vector<std::size_t>{1});
        if (!std::isfinite(v)) throw ValueError("non-finite scalar");
        t.data_[0] = v;
        return t;
    }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : t.data_) x = v;
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool is_scalar() const { return data_.size() == 1; }

    std::size_t rows() const {
        require_matrix("rows()");
        return shape_[0];
    }
    std::size_t cols() const {
        require_matrix("cols()");
        return shape_[1];
    }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    double at(std::size_t r, std::size_t c) const {
        require_matrix("at()");
        return data_[r * shape_[1] + c];
    }
    double& at(std::size_t r, std::size_t c) {
        require_matrix("at()");
        return data_[r * shape_[1] + c];
    }

    const double* data() const { return data_.data(); }
    double* data() { return data_.data(); }
    const std::vector<double>& storage() const { return data_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(double v) {
        for (double& x : data_) x = v;
    }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    bool bit_equal(const Tensor& o) const {
        if (shape_ != o.shape_) return false;
        for (std::size_t i = 0; i < data_.size(); ++i) {
            if (data_[i] != o.data_[i]) return false;
        }
        return true;
    }

    static std::string shape_string(const std::vector<std::size_t>& s) {
        std::string out = "[";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) out += "x";
            out += std::to_string(s[i]);
        }
        return out + "]";
    }
    std::string shape_string() const { return shape_string(shape_); }

private:
    static std::size_t checked_count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t e : shape) {
            if (e == 0) throw ShapeError("zero extent in shape " + shape_string(shape));
            n *= e;
        }
        return n;
    }

    void require_matrix(const char* what) const {
        if (shape_.size() != 2) {
            throw ShapeError(std::string(what) + " requires a rank-2 tensor, got " +
                             shape_string(shape_));
        }
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

/// Convenience constructor for small test matrices: rows of equal length.
inline Tensor make_matrix(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw ShapeError("make_matrix: no rows");
    std::size_t c = rows[0].size();
    std::vector<double> flat;
    flat.reserve(rows.size() * c);
    for (const auto& r : rows) {
        if (r.size() != c) throw ShapeError("make_matrix: ragged rows");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), c}, std::move(flat));
}

inline Tensor make_vector(std::vector<double> v) {
    std::size_t n = v.size();
    return Tensor({n}, std::move(v));
}

} // namespace tealab
