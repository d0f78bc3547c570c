#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ensembledown/nn/layers.hpp"
#include "ensembledown/nn/tensor.hpp"

namespace ensembledown::nn {

// Residual block: GN -> SiLU -> conv3x3 -> (+ time bias) -> GN -> SiLU ->
// conv3x3, plus identity (or 1x1-projected) skip.  The time-embedding bias is
// optional; the downscaler uses the block without it.
template <typename T>
class ResBlock {
  public:
    void init(int c_in, int c_out, int time_hidden, RngStream& rng);
    // e: [b, time_hidden, 1, 1] or nullptr when the block has no time input
    void forward(const Tens<T>& x, const Tens<T>* e, Tens<T>& out);
    // grad_e accumulates the time-path gradient when non-null
    void backward(const Tens<T>& grad_out, Tens<T>& grad_x, Tens<T>* grad_e);
    void params(ParamRefs<T>& out, const std::string& prefix);

  private:
    int c_in_ = 0, c_out_ = 0, time_hidden_ = 0;
    GroupNorm<T> gn1_, gn2_;
    SiLU<T> act1_, act2_;
    Conv3x3<T> conv1_, conv2_;
    Linear<T> proj_;
    Conv1x1<T> skip_;
    bool has_skip_ = false;
    Tens<T> h1_, a1_, c1_, h2_, a2_, c2_, r_;
    Tens<T> proj_in_, proj_out_;
};

struct DenoiserConfig {
    int channels = 0;   // data channels the model denoises
    int ny = 0, nx = 0; // grid the model is built for
    int width = 32;     // base channel count
    int depth = 2;      // number of pool/upsample levels (0 = plain resnet)
    int time_dim = 0;   // sinusoidal embedding size; 0 means 2*width
    int schedule_T = 1000;  // used to put t on a schedule-independent scale
    bool coords = true;     // fixed sin/cos coordinate channels
    bool pos_embed = true;  // learnable additive position map

    std::string to_json() const;
    static DenoiserConfig from_json(const std::string& text);
    void validate() const;
};

// Noise-prediction network: encoder-decoder over `depth` resolutions with
// residual blocks, skip concatenation, and a per-block time-embedding bias.
template <typename T>
class DenoiserNet {
  public:
    void init(const DenoiserConfig& config, uint64_t seed);
    const DenoiserConfig& config() const { return config_; }

    // x: [b, channels, ny, nx]; t: one schedule step per sample
    void forward(const Tens<T>& x, const std::vector<int>& t, Tens<T>& eps);
    // propagates d(loss)/d(eps); parameter grads accumulate
    void backward(const Tens<T>& grad_eps);
    ParamRefs<T> params();
    size_t n_params();

  private:
    DenoiserConfig config_;
    int time_hidden_ = 0;
    std::vector<T> coords_;     // [8, ny, nx] fixed
    std::vector<T> pos_, gpos_; // learnable position map [width, ny, nx]
    Conv3x3<T> in_conv_;
    Linear<T> time_lin1_, time_lin2_;
    SiLU<T> time_act_;
    std::vector<ResBlock<T>> enc_;   // depth+1 blocks
    ResBlock<T> mid_;
    std::vector<AvgPool2<T>> pools_;
    std::vector<ConvT2x2<T>> ups_;   // index i upsamples level i+1 -> i
    std::vector<ResBlock<T>> dec_;
    GroupNorm<T> out_norm_;
    SiLU<T> out_act_;
    Conv3x3<T> out_conv_;

    // forward caches
    Tens<T> xin_, h0_, e0_, e1_, e2_, e_;
    std::vector<Tens<T>> skips_, downs_, cats_, upouts_, dec_outs_cache_;
    Tens<T> mid_out_, head_norm_, head_act_;
    int level_width(int level) const;
};

struct RegressionConfig {
    int channels = 0;
    int coarse_ny = 0, coarse_nx = 0;
    int factor = 8;      // power of two
    int width = 32;
    bool coords = true;
    bool out_bias = true;  // learnable per-pixel output offset

    int fine_ny() const { return coarse_ny * factor; }
    int fine_nx() const { return coarse_nx * factor; }
    std::string to_json() const;
    static RegressionConfig from_json(const std::string& text);
    void validate() const;
};

// Upsampling regression network: residual blocks at coarse resolution, then
// log2(factor) transposed-convolution stages to the fine grid.
template <typename T>
class RegressionNet {
  public:
    void init(const RegressionConfig& config, uint64_t seed);
    const RegressionConfig& config() const { return config_; }

    void forward(const Tens<T>& coarse, Tens<T>& fine);
    void backward(const Tens<T>& grad_fine);
    ParamRefs<T> params();
    size_t n_params();

  private:
    RegressionConfig config_;
    int n_stages_ = 0;
    std::vector<T> coords_;            // [8, coarse_ny, coarse_nx]
    std::vector<T> out_bias_, gout_bias_;
    Conv3x3<T> in_conv_;
    ResBlock<T> rb0_;
    std::vector<ConvT2x2<T>> ups_;
    std::vector<ResBlock<T>> stage_rbs_;
    GroupNorm<T> out_norm_;
    SiLU<T> out_act_;
    Conv3x3<T> out_conv_;

    Tens<T> xin_, h0_, rb0_out_;
    std::vector<Tens<T>> stage_in_, stage_out_;
    Tens<T> head_norm_, head_act_;
};

// fixed sin/cos coordinate channels (2 axes x sin/cos x frequencies 1, 2)
template <typename T>
std::vector<T> make_coord_channels(int ny, int nx);
constexpr int kCoordChannels = 8;

// sinusoidal embedding of schedule steps rescaled by 1000/T
template <typename T>
void sinusoidal_embedding(const std::vector<int>& t, int dim, double t_scale, Tens<T>& out);

}  // namespace ensembledown::nn
