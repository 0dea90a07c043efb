#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "soda/common.hpp"

namespace soda {

// Dense row-major array, rank 1 or 2 (rank 0 is represented as shape {1}).
// This is deliberately a dumb value type; all math lives in kernels and the
// tape. 32-bit floats are the experiment default, 64-bit the verification
// mode.
template <typename R>
struct Tensor {
    std::vector<long> shape;
    std::vector<R> data;

    Tensor() = default;
    explicit Tensor(std::vector<long> s) : shape(std::move(s)), data(numel_of(shape), R(0)) {}
    Tensor(std::vector<long> s, R fill) : shape(std::move(s)), data(numel_of(shape), fill) {}

    static std::size_t numel_of(const std::vector<long>& s) {
        std::size_t n = 1;
        for (long e : s) n *= static_cast<std::size_t>(e);
        return n;
    }

    std::size_t numel() const { return data.size(); }
    long rows() const { return shape.empty() ? 1 : shape[0]; }
    long cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    R* row(long i) { return data.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(cols()); }
    const R* row(long i) const {
        return data.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(cols());
    }

    R& operator()(long i, long j) { return data[static_cast<std::size_t>(i) * cols() + j]; }
    R operator()(long i, long j) const { return data[static_cast<std::size_t>(i) * cols() + j]; }
    R& operator[](std::size_t i) { return data[i]; }
    R operator[](std::size_t i) const { return data[i]; }

    // Reshape in place, reallocating only on growth. Used by the tape to
    // recycle buffers between iterations of an identical graph.
    void reset(const std::vector<long>& s) {
        shape = s;
        data.assign(numel_of(s), R(0));
    }
    void reset_shape_only(const std::vector<long>& s) {
        shape = s;
        data.resize(numel_of(s));
    }

    void fill(R v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (R v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    template <typename S>
    Tensor<S> cast() const {
        Tensor<S> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<S>(data[i]);
        return out;
    }
};

inline std::string shape_str(const std::vector<long>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <typename R>
int argmax_row(const R* v, long n) {
    // Ties resolve to the lowest index; greedy decoding and candidate
    // extraction both depend on this.
    int best = 0;
    for (long j = 1; j < n; ++j) {
        if (v[j] > v[best]) best = static_cast<int>(j);
    }
    return best;
}

}  // namespace soda
