#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ensembledown/field.hpp"
#include "ensembledown/nn/net.hpp"
#include "ensembledown/rng.hpp"
#include "ensembledown/schedule.hpp"
#include "ensembledown/train.hpp"

namespace ensembledown {

// ---------------------------------------------------------------------------
// Forward process
// ---------------------------------------------------------------------------

// x_t = alpha_t * x0 + sigma_t * noise, elementwise. Throws DataError on
// shape mismatch, ConfigError if t is outside [0, T].
template <typename T>
std::vector<T> forward_perturb(const NoiseSchedule& sched, int t, const std::vector<T>& x0,
                               const std::vector<T>& noise);

// ---------------------------------------------------------------------------
// Denoising score-matching loss
// ---------------------------------------------------------------------------

// Pure loss formula: mean over samples of the per-sample squared-error sum
// between drawn and predicted noise. Exposed so test doubles can exercise the
// reduction without a network.
template <typename T>
double dsm_loss_from_prediction(const nn::Tens<T>& eps_hat, const nn::Tens<T>& eps);

// Draw one (t, eps) pair per sample: t uniform on [1, T], eps ~ N(0, I).
template <typename T>
void draw_dsm(const NoiseSchedule& sched, int batch, int sample_elems, RngStream& rng,
              std::vector<int>& t, nn::Tens<T>& eps);

// Loss under fixed draws; optionally backpropagates (gradients accumulate into
// the net's parameter grads). Throws NumericError naming the sample/step if
// the model output is non-finite.
template <typename T>
double dsm_loss_fixed(nn::DenoiserNet<T>& net, const NoiseSchedule& sched,
                      const nn::Tens<T>& x0, const std::vector<int>& t,
                      const nn::Tens<T>& eps, bool do_backward);

// Convenience wrapper drawing (t, eps) from rng; no backward pass.
template <typename T>
double dsm_loss(nn::DenoiserNet<T>& net, const NoiseSchedule& sched, const nn::Tens<T>& x0,
                RngStream& rng);

// ---------------------------------------------------------------------------
// Score sources and the reverse chain
// ---------------------------------------------------------------------------

// Anything that predicts the noise component of a batch of perturbed states.
// States are flattened row-major [n, dim] in double precision; implementations
// may compute internally at lower precision.
class ScoreSource {
public:
    virtual ~ScoreSource() = default;
    virtual int dim() const = 0;
    // x: [n, dim]; t: n schedule steps; writes eps (resized to n*dim).
    virtual void predict_noise(const std::vector<double>& x, const std::vector<int>& t, int n,
                               std::vector<double>& eps) = 0;
};

// Exact score of the schedule-perturbed Gaussian N(mu, Sigma): at step t the
// marginal is N(alpha_t mu, alpha_t^2 Sigma + sigma_t^2 I), and
//   score(x, t) = -(alpha_t^2 Sigma + sigma_t^2 I)^{-1} (x - alpha_t mu).
// Noise prediction follows as eps = -sigma_t * score. Validation instrument:
// lets the reverse chain be checked against closed-form moments.
class GaussianScoreOracle : public ScoreSource {
public:
    // sigma is dim x dim row-major, symmetric positive definite; dim <= 64.
    GaussianScoreOracle(std::vector<double> mu, std::vector<double> sigma,
                        const NoiseSchedule& sched);
    ~GaussianScoreOracle() override;

    int dim() const override;
    void predict_noise(const std::vector<double>& x, const std::vector<int>& t, int n,
                       std::vector<double>& eps) override;
    // Marginal score at step t (t = 0 gives the data-space score).
    std::vector<double> score(const std::vector<double>& x, int t) const;
    // One draw x ~ N(mu, Sigma) from the data-space prior.
    std::vector<double> sample_data(RngStream& rng) const;
    std::vector<double> mean() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Clamp applied to the clean-state estimate inside net-driven reverse steps.
// The final step divides by the floored alpha_T, so a model prediction error
// there is amplified by roughly alpha_{T-1}/alpha_T; clamping the estimate to
// a range far outside the standardized data (|z| <= 8) bounds that blow-up
// without touching realistic states. Exact-score chains run unclamped.
inline constexpr double kNormalizedX0Clip = 8.0;

// One ancestral update x_t -> x_{t-1} applied in place to the batch [n, dim].
// noise must hold n*dim standard normal draws; it is ignored at t = 1 where
// the update is deterministic. x0_clip > 0 clamps the clean-state estimate
// to [-x0_clip, x0_clip]; 0 disables clamping.
void reverse_step(ScoreSource& src, const NoiseSchedule& sched, int t, std::vector<double>& x,
                  int n, const std::vector<double>& noise, double x0_clip = 0.0);

// Run the chain from t_start down to 0. x enters holding x_{t_start}; member i
// draws all of its noise from streams[i], so any member is reproducible in
// isolation.
void run_reverse_chain(ScoreSource& src, const NoiseSchedule& sched, int t_start,
                       std::vector<double>& x, int n, std::vector<RngStream>& streams,
                       double x0_clip = 0.0);

// ---------------------------------------------------------------------------
// Trained prior model
// ---------------------------------------------------------------------------

struct DiffusionModel {
    nn::DenoiserNet<float> net;
    nn::DenoiserConfig arch;
    NoiseSchedule schedule;
    std::string schedule_kind = "cosine-vp";
    NormStats stats;
    std::vector<std::string> variables;
    std::vector<std::string> levels;
    double grid_spacing_km = 1.0;

    void validate() const;  // arch channels == layout channels, stats cover layout
};

// Adapter exposing the float network through the double-precision chain
// interface; states are processed in fixed-size sub-batches.
class NetScoreSource : public ScoreSource {
public:
    explicit NetScoreSource(DiffusionModel& model, int max_batch = 256);
    int dim() const override;
    void predict_noise(const std::vector<double>& x, const std::vector<int>& t, int n,
                       std::vector<double>& eps) override;

private:
    DiffusionModel& model_;
    int max_batch_;
    nn::Tens<float> xf_, ef_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// Trains model.net in place on normalized samples laid out [n, C, ny, nx].
// The held-out fold (last holdout_frac of the samples) is evaluated with a
// fixed set of (t, eps) draws each epoch. Aborts with NumericError naming the
// last finite epoch if the loss diverges.
TrainStats train_prior(DiffusionModel& model, const std::vector<float>& samples, int n,
                       const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

// n independent reverse-chain samples from the trained prior, denormalized.
// Member m's RNG stream is derived from (seed, m); members are generated in
// fixed-size chunks but each member's values depend only on its own stream.
EnsembleSet sample_prior(DiffusionModel& model, int n, uint64_t seed, int chunk = 256);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(DiffusionModel& model, const std::string& dir);
DiffusionModel load_checkpoint(const std::string& dir);

}  // namespace ensembledown
