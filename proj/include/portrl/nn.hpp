#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "portrl/graph.hpp"
#include "portrl/rng.hpp"
#include "portrl/tensor.hpp"

namespace portrl {

enum class Activation { Tanh, Sigmoid, LeakyRelu, Softmax };

// Declarative layer description used to assemble dense stacks.
struct LayerSpec {
    enum class Kind { Dense, LstmCell, BidirectionalLstm, Dropout, Act };
    Kind kind;
    std::size_t in = 0;
    std::size_t out = 0;
    double keep = 1.0;             // dropout keep probability
    Activation act = Activation::Tanh;
};

// Weight initializers. Dense and LSTM input weights are uniform in
// +-1/sqrt(fan_in); recurrent weights uniform in +-1/sqrt(hidden).
Tensor init_uniform_fanin(Rng& rng, std::size_t fan_in, std::size_t rows, std::size_t cols);

struct DenseLayer {
    Param* w = nullptr;
    Param* b = nullptr;
};

struct LstmLayer {
    Param* wx = nullptr;
    Param* wh = nullptr;
    Param* b = nullptr;
    std::size_t in = 0;
    std::size_t hidden = 0;
};

// Biases start at zero except the LSTM forget gate, which starts at 1.
DenseLayer make_dense(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
LstmLayer make_lstm(ParamSet& ps, const std::string& name, std::size_t in, std::size_t hidden, Rng& rng);

NodeId dense_forward(Graph& g, NodeId x, const DenseLayer& layer);
// Applies a dense layer to every step of a (T,B,F) sequence.
NodeId seq_dense_forward(Graph& g, NodeId seq, const DenseLayer& layer);
// Bidirectional LSTM over a (T,B,F) sequence -> (T,B,2*hidden).
NodeId bilstm_forward(Graph& g, NodeId seq, const LstmLayer& fwd, const LstmLayer& bwd);

// Dense stack driven by LayerSpec entries (Dense/Act/Dropout kinds only).
struct MlpStack {
    std::vector<LayerSpec> specs;
    std::vector<DenseLayer> dense;
};
MlpStack make_mlp(ParamSet& ps, const std::string& name, const std::vector<LayerSpec>& specs, Rng& rng);
NodeId mlp_forward(Graph& g, NodeId x, const MlpStack& stack, Rng& rng, bool train);

enum class OptKind { Sgd, Adam, RmsProp };

// Optimizer with per-parameter moment buffers. A global-norm clip (default
// 5.0, 0 disables) rescales the gradient set before each step.
class Optimizer {
public:
    Optimizer(OptKind kind, double lr, double clip_norm = 5.0)
        : kind_(kind), lr_(lr), clip_norm_(clip_norm) {}

    void step(ParamSet& params);
    void step(const std::vector<Param*>& params);

    OptKind kind() const { return kind_; }
    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    std::int64_t step_count() const { return step_count_; }

    // Moment buffers in parameter order (two flat vectors per parameter),
    // for exact training resume from a checkpoint.
    std::vector<std::vector<double>> export_slots(const std::vector<Param*>& params) const;
    void import_slots(const std::vector<Param*>& params,
                      const std::vector<std::vector<double>>& slots, std::int64_t steps);

    static constexpr double kAdamBeta1 = 0.9;
    static constexpr double kAdamBeta2 = 0.999;
    static constexpr double kAdamEps = 1e-8;
    static constexpr double kRmsDecay = 0.9;
    static constexpr double kRmsEps = 1e-8;

private:
    struct Slot {
        Tensor m;
        Tensor v;
    };
    OptKind kind_;
    double lr_;
    double clip_norm_;
    std::int64_t step_count_ = 0;
    std::unordered_map<Param*, Slot> slots_;
};

// Loss value plus analytic gradient w.r.t. the prediction.
struct LossResult {
    double value = 0.0;
    Tensor grad;
};
LossResult loss_mse(const Tensor& prediction, const Tensor& target);
// -mean[t log p + (1-t) log(1-p)] with p clamped to [1e-7, 1-1e-7].
LossResult loss_binary_log(const Tensor& prediction, const Tensor& target);

// Adds N(0, sigma) noise to every parameter.
void perturb_params(ParamSet& params, double sigma, Rng& rng);
// target <- tau*online + (1-tau)*target, elementwise.
void soft_update(const ParamSet& online, ParamSet& target, double tau);

}  // namespace portrl
