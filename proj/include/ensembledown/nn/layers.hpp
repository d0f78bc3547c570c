#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ensembledown/nn/tensor.hpp"
#include "ensembledown/rng.hpp"

namespace ensembledown::nn {

// Layers store the activations they need for backward; call order per step is
// forward(...) then backward(...).  Parameter gradients accumulate until
// zero_grads.

// 3x3 convolution with circular (periodic) padding, stride 1.
template <typename T>
class Conv3x3 {
  public:
    void init(int c_in, int c_out, RngStream& rng, bool zero_init = false);
    void forward(const Tens<T>& in, Tens<T>& out);
    void backward(const Tens<T>& grad_out, Tens<T>& grad_in);
    void params(ParamRefs<T>& out, const std::string& prefix);

    int c_in() const { return c_in_; }
    int c_out() const { return c_out_; }

  private:
    int c_in_ = 0, c_out_ = 0;
    std::vector<T> w_, b_, gw_, gb_;  // w: [c_out, c_in, 3, 3]
    Tens<T> saved_in_;
    std::vector<T> cols_;  // im2col scratch [c_in*9, h*w]
};

// 1x1 convolution (per-pixel linear map across channels).
template <typename T>
class Conv1x1 {
  public:
    void init(int c_in, int c_out, RngStream& rng);
    void forward(const Tens<T>& in, Tens<T>& out);
    void backward(const Tens<T>& grad_out, Tens<T>& grad_in);
    void params(ParamRefs<T>& out, const std::string& prefix);

  private:
    int c_in_ = 0, c_out_ = 0;
    std::vector<T> w_, b_, gw_, gb_;  // w: [c_out, c_in]
    Tens<T> saved_in_;
};

// 2x2 transposed convolution with stride 2 (exact 2x upsampling; every
// output pixel receives exactly one kernel tap).
template <typename T>
class ConvT2x2 {
  public:
    void init(int c_in, int c_out, RngStream& rng);
    void forward(const Tens<T>& in, Tens<T>& out);
    void backward(const Tens<T>& grad_out, Tens<T>& grad_in);
    void params(ParamRefs<T>& out, const std::string& prefix);

  private:
    int c_in_ = 0, c_out_ = 0;
    std::vector<T> w_, b_, gw_, gb_;  // w: [c_out*4, c_in] (tap-major rows)
    Tens<T> saved_in_;
};

// 2x2 mean pooling, stride 2.
template <typename T>
class AvgPool2 {
  public:
    void forward(const Tens<T>& in, Tens<T>& out);
    void backward(const Tens<T>& grad_out, Tens<T>& grad_in);

  private:
    int b_ = 0, c_ = 0, h_ = 0, w_ = 0;
};

// Group normalization over (channels/groups, h, w) per sample.
template <typename T>
class GroupNorm {
  public:
    void init(int channels, int groups);
    void forward(const Tens<T>& in, Tens<T>& out);
    void backward(const Tens<T>& grad_out, Tens<T>& grad_in);
    void params(ParamRefs<T>& out, const std::string& prefix);

  private:
    int channels_ = 0, groups_ = 0;
    std::vector<T> gamma_, beta_, ggamma_, gbeta_;
    Tens<T> saved_xhat_;
    std::vector<T> saved_inv_std_;  // [b, groups]
};

// x * sigmoid(x), elementwise.
template <typename T>
class SiLU {
  public:
    void forward(const Tens<T>& in, Tens<T>& out);
    void backward(const Tens<T>& grad_out, Tens<T>& grad_in);

  private:
    Tens<T> saved_in_;
};

// Fully connected map on [batch, dim] vectors (stored as Tens with h=w=1).
template <typename T>
class Linear {
  public:
    void init(int d_in, int d_out, RngStream& rng, bool zero_init = false);
    void forward(const Tens<T>& in, Tens<T>& out);
    void backward(const Tens<T>& grad_out, Tens<T>& grad_in);
    void params(ParamRefs<T>& out, const std::string& prefix);

    int d_out() const { return d_out_; }

  private:
    int d_in_ = 0, d_out_ = 0;
    std::vector<T> w_, b_, gw_, gb_;  // w: [d_out, d_in]
    Tens<T> saved_in_;
};

// helper: channel-concatenate two tensors (same b/h/w)
template <typename T>
void concat_channels(const Tens<T>& a, const Tens<T>& b, Tens<T>& out);
template <typename T>
void split_channels(const Tens<T>& grad_out, Tens<T>& grad_a, Tens<T>& grad_b);

int norm_groups_for(int channels);

}  // namespace ensembledown::nn
