#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace ensembledown::nn {

// Dense [batch, channel, height, width] activation buffer.  Kept deliberately
// small: contiguous storage plus shape bookkeeping, nothing else.
template <typename T>
struct Tens {
    std::vector<T> v;
    int b = 0, c = 0, h = 0, w = 0;

    Tens() = default;
    Tens(int b_, int c_, int h_, int w_) { resize(b_, c_, h_, w_); }

    void resize(int b_, int c_, int h_, int w_) {
        b = b_;
        c = c_;
        h = h_;
        w = w_;
        v.assign(static_cast<size_t>(b) * c * h * w, T(0));
    }
    void zero() { std::fill(v.begin(), v.end(), T(0)); }
    size_t size() const { return v.size(); }
    size_t plane() const { return static_cast<size_t>(h) * w; }
    size_t sample_size() const { return static_cast<size_t>(c) * h * w; }

    T* sample(int i) { return v.data() + i * sample_size(); }
    const T* sample(int i) const { return v.data() + i * sample_size(); }
    T* chan(int i, int ch) { return sample(i) + ch * plane(); }
    const T* chan(int i, int ch) const { return sample(i) + ch * plane(); }

    bool same_shape(const Tens& o) const {
        return b == o.b && c == o.c && h == o.h && w == o.w;
    }
};

// One named parameter tensor and its gradient accumulator.
template <typename T>
struct ParamRef {
    std::string name;
    std::vector<T>* value = nullptr;
    std::vector<T>* grad = nullptr;
};

template <typename T>
using ParamRefs = std::vector<ParamRef<T>>;

template <typename T>
size_t total_params(const ParamRefs<T>& refs) {
    size_t n = 0;
    for (const auto& r : refs) n += r.value->size();
    return n;
}

template <typename T>
void zero_grads(const ParamRefs<T>& refs) {
    for (const auto& r : refs) std::fill(r.grad->begin(), r.grad->end(), T(0));
}

}  // namespace ensembledown::nn
