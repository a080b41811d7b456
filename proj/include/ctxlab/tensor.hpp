#pragma once

#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctxlab {

// Dense row-major tensor of doubles. Rank 0 (scalar), 1 and 2 cover every
// quantity in this library; nothing here broadcasts.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> values;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        values.assign(numel(shape), 0.0);
    }

    Tensor(std::vector<int> s, std::vector<double> v)
        : shape(std::move(s)), values(std::move(v)) {
        if (values.size() != numel(shape)) {
            throw std::invalid_argument("tensor: values length does not match shape");
        }
    }

    static std::size_t numel(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d < 0) {
                throw std::invalid_argument("tensor: negative dimension");
            }
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }

    std::size_t size() const { return values.size(); }
    bool is_scalar() const { return values.size() == 1 && shape.empty(); }

    int rows() const { return shape.size() == 2 ? shape[0] : (shape.size() == 1 ? 1 : 0); }
    int cols() const { return shape.size() == 2 ? shape[1] : (shape.size() == 1 ? shape[0] : 0); }

    double& at(int r, int c) { return values[static_cast<std::size_t>(r) * shape[1] + c]; }
    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * shape[1] + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) {
            out += ",";
        }
    }
    return out + "]";
}

}  // namespace ctxlab
