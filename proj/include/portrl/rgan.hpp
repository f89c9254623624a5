#pragma once

#include <vector>

#include <json.hpp>

#include "portrl/graph.hpp"
#include "portrl/nn.hpp"
#include "portrl/rng.hpp"

namespace portrl {

struct RbfKernel {
    double sigma = 1.0;  // K(x,y) = exp(-|x-y|^2 / (2 sigma^2))
    double operator()(const std::vector<double>& x, const std::vector<double>& y) const;
};

// Median pairwise Euclidean distance over the pooled samples; falls back to
// 1.0 when the median distance is zero.
double median_bandwidth(const std::vector<std::vector<double>>& samples_a,
                        const std::vector<std::vector<double>>& samples_b);

// All-pairs biased estimator (self-terms included), so mmd2_biased(X, X) is
// exactly zero.
double mmd2_biased(const std::vector<std::vector<double>>& x,
                   const std::vector<std::vector<double>>& y, const RbfKernel& kernel);
// Gretton's unbiased estimator: within-terms average over ordered pairs i != j.
double mmd2_unbiased(const std::vector<std::vector<double>>& x,
                     const std::vector<std::vector<double>>& y, const RbfKernel& kernel);

struct GanConfig {
    std::size_t k1 = 95;        // sequence length
    std::size_t noise_dim = 8;  // H
    std::size_t hidden = 32;
    std::size_t batch = 128;
    double zeta = 1.0;          // MMD regularizer weight
    double learning_rate = 1e-3;
    std::size_t train_steps = 30000;
    std::size_t downsample_factor = 8;  // fine bars per coarse bar
};

// Per-asset recurrent GAN: the generator maps a noise sequence to a
// percentage-change series; the discriminator scores whole series.
struct GanPair {
    int asset_id = 0;
    GanConfig config;
    ParamSet gen_params, disc_params;
    LstmLayer gen_lstm;
    DenseLayer gen_out;
    LstmLayer disc_lstm;
    DenseLayer disc_out;
    bool trained = false;

    GanPair(int asset, const GanConfig& cfg, Rng& rng);
    // the layer structs point into the parameter sets, so copies and moves
    // re-resolve them
    GanPair(const GanPair& other);
    GanPair& operator=(const GanPair& other);
    GanPair(GanPair&& other) noexcept;
    GanPair& operator=(GanPair&& other) noexcept;

    // noise (k1, B, H) -> generated series (B, k1)
    NodeId generator_forward(Graph& g, NodeId noise) const;
    // series (B, k1) -> probabilities (B, 1)
    NodeId discriminator_forward(Graph& g, NodeId series) const;

    Tensor sample_noise(std::size_t batch, Rng& rng) const;
    Tensor generate(std::size_t batch, Rng& rng) const;  // (B, k1)

    nlohmann::json to_json() const;
    void from_json(const nlohmann::json& j);

private:
    void rebind();
};

struct GanStepLosses {
    double disc_loss = 0.0;
    double gen_loss = 0.0;
};

// disc_loss = -(1/b) sum[log D(h) + log(1 - D(G(z)))]
// gen_loss  =  (1/b) sum log(1 - D(G(z))) + zeta * MMD^2_unbiased(real, gen)
GanStepLosses gan_losses(const GanPair& pair, const Tensor& real_batch, const Tensor& noise_batch,
                         double sigma);

// Same losses with gradients accumulated into the respective parameter sets.
double disc_loss_backward(GanPair& pair, const Tensor& real_batch, const Tensor& noise_batch);
double gen_loss_backward(GanPair& pair, const Tensor& real_batch, const Tensor& noise_batch,
                         double sigma);

// Unbiased MMD^2 between two (rows = samples) nodes on the tape; gradients
// flow through both inputs. The bandwidth is a fixed constant.
NodeId mmd2_unbiased_node(Graph& g, NodeId x, NodeId y, double sigma);

// Alternating one discriminator step / one generator step per batch over
// stride-1 windows of the series. Deterministic under the rng seed.
GanPair train_rgan(int asset_id, const std::vector<double>& pct_series, const GanConfig& config,
                   Rng& rng);

struct HlcChange {
    double close = 0.0, high = 0.0, low = 0.0;
};

// Groups f fine changes into one coarse HLC change triple via cumulative
// factors; the group's opening level (factor 1) participates in the high/low,
// so high >= max(close, 0) and low <= min(close, 0).
std::vector<HlcChange> downsample_to_hlc(const std::vector<double>& fine_changes, std::size_t factor);

struct KsResult {
    double d = 0.0;  // sup |F_a - F_b|
    double p = 1.0;
};
KsResult ks_two_sample(const std::vector<double>& a, const std::vector<double>& b);

// Mean over generated series of the max-over-holdout KS p-value.
double ks_validate(const std::vector<std::vector<double>>& generated,
                   const std::vector<std::vector<double>>& holdout);

struct SyntheticEpisode {
    // per risky asset (index 0 = asset 1), `horizon` HLC change triples
    std::vector<std::vector<HlcChange>> per_asset;
    std::size_t horizon() const { return per_asset.empty() ? 0 : per_asset[0].size(); }
};

SyntheticEpisode augment_episode(const std::vector<GanPair>& pairs, std::size_t horizon, Rng& rng);

}  // namespace portrl
