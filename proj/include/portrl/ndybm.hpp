#pragma once

#include <deque>
#include <vector>

#include <json.hpp>

#include "portrl/backtest.hpp"
#include "portrl/nn.hpp"
#include "portrl/rng.hpp"
#include "portrl/tensor.hpp"

namespace portrl {

struct NdybmConfig {
    std::size_t num_assets = 0;                         // m risky assets; units N = 3m
    std::size_t delay = 3;                              // d
    std::vector<double> decay = {0.1, 0.2, 0.5, 0.8};   // lambda_k
    std::size_t rnn_units = 100;                        // M
    double learning_rate = 1e-3;
    double spectral_radius = 0.95;
    double sigma2_floor = 1e-6;
    double sigma2_init = 1.0;
};

struct PredictionTriplet {
    std::vector<double> close, high, low;  // each length m
};

// Gaussian dynamic Boltzmann machine with eligibility traces and a reservoir
// RNN bias, trained online by RMSProp ascent on the conditional log density.
// Unit layout: close changes, then high changes, then low changes.
//
// Per-step state advance: parameter ascent with the observed vector, then
// FIFO push + trace update (the trace absorbs the vector leaving the FIFO),
// then the RNN state update and bias accumulation b += A^T psi. The gradient
// for A treats the latest psi contribution as given (no backprop through
// time).
class Ndybm {
public:
    Ndybm(const NdybmConfig& config, Rng& rng);

    std::size_t units() const { return n_; }

    // b + sum_delta F[delta] x[t-delta] + sum_k G_k alpha_k
    std::vector<double> mu() const;

    // One online step: returns the standing forecast (computed before x_t is
    // absorbed, so it never depends on x_t), then updates everything.
    PredictionTriplet step(const std::vector<double>& x_t);

    struct Gradients {
        Tensor b, log_sigma2, a;
        std::vector<Tensor> f, g;
    };
    // Analytic gradients of log p(x_t | history) at the current state.
    Gradients compute_gradients(const std::vector<double>& x_t) const;

    // Sub-operations in Algorithm order; step() composes them.
    void update_parameters(const std::vector<double>& x_t);  // RMSProp ascent + variance floor
    void advance_history(const std::vector<double>& x_t);    // fifo push + trace update
    void update_rnn_bias(const std::vector<double>& x_t);    // psi <- tanh(...), b += A^T psi

    // Trace recursion alone: alpha_k <- lambda_k alpha_k + injected.
    void update_traces(const std::vector<double>& injected);

    std::vector<double> sigma2() const;
    PredictionTriplet reshape_prediction(const std::vector<double>& flat) const;

    // Clears the stream state (fifo, traces, psi); learned parameters stay.
    void reset_stream();

    nlohmann::json to_json() const;
    void from_json(const nlohmann::json& j);

    const NdybmConfig& config() const { return config_; }

    // Learned parameters: "b", "f1".."f{d-1}", "g1".."gK", "a", "log_sigma2".
    ParamSet params;
    // Reservoir (not learned).
    Tensor w_rnn, w_in;       // (M,M), (M,N)
    std::vector<double> psi;  // length M
    std::deque<std::vector<double>> fifo;    // front = newest = x[t-1]
    std::vector<std::vector<double>> traces; // K vectors of length N

private:
    NdybmConfig config_;
    std::size_t n_ = 0;
    Optimizer optimizer_;
};

// Adapter for the backtester / agent loop: absorbs the realized change
// vector, then returns the forecast of the next bar.
class NdybmPredictionSource : public PredictionSource {
public:
    explicit NdybmPredictionSource(Ndybm& model) : model_(model) {}
    std::vector<double> step(const std::vector<double>& observed) override {
        model_.step(observed);
        return model_.mu();
    }

private:
    Ndybm& model_;
};

// Adds N(0, noise_sd) per entry per step, then applies Savitzky-Golay
// smoothing columnwise. Edge points use the terminal-window polynomial fit.
std::vector<std::vector<double>> smooth_inputs(const std::vector<std::vector<double>>& series,
                                               double noise_sd, std::size_t window, std::size_t order,
                                               Rng& rng);

// Symmetric least-squares smoothing coefficients; exposed for tests.
std::vector<double> savgol_center_coefficients(std::size_t window, std::size_t order);

}  // namespace portrl
