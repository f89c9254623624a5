#pragma once

#include <array>
#include <cstddef>
#include <deque>
#include <string>
#include <vector>

#include "portrl/rng.hpp"
#include "portrl/tensor.hpp"

namespace portrl {

// Named parameter with an accumulated gradient. Gradients persist across
// backward calls until zero_grad is called.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        grad = Tensor(value.shape);
    }
    void zero_grad() { std::fill(grad.v.begin(), grad.v.end(), 0.0); }
};

class ParamSet {
public:
    Param& add(std::string name, Tensor init);
    Param* find(const std::string& name);
    const Param* find(const std::string& name) const;
    std::size_t size() const { return params_.size(); }
    Param& at(std::size_t i) { return params_[i]; }
    const Param& at(std::size_t i) const { return params_[i]; }
    void zero_grad();
    // Copies values from a structurally identical set (same names/shapes).
    void copy_values_from(const ParamSet& other);

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::deque<Param> params_;  // deque keeps addresses stable
};

using NodeId = int;

// Reverse-mode tape. A Graph is rebuilt per forward pass; parameters live
// outside in ParamSets so their gradients accumulate across tapes.
class Graph {
public:
    Graph() { nodes_.reserve(256); }

    // Leaves.
    NodeId constant(Tensor t);
    NodeId param(Param& p);

    // Elementwise and structural ops. All shapes are validated; any
    // non-finite output raises std::runtime_error.
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId add_rowvec(NodeId m, NodeId row);   // (R,C) + (1,C)
    NodeId add_colvec(NodeId m, NodeId col);   // (R,C) + (R,1)
    NodeId scale(NodeId x, double k);
    NodeId add_scalar(NodeId x, double k);
    NodeId matmul(NodeId a, NodeId b);
    NodeId matmul_nt(NodeId a, NodeId b);      // A * B^T
    NodeId tanh_(NodeId x);
    NodeId sigmoid_(NodeId x);
    NodeId leaky_relu(NodeId x, double slope = 0.01);
    NodeId exp_(NodeId x);
    NodeId log_(NodeId x);
    NodeId softmax_rows(NodeId x);
    NodeId dropout(NodeId x, double keep, Rng& rng, bool train);
    NodeId concat_cols(const std::vector<NodeId>& xs);
    NodeId slice_cols(NodeId x, std::size_t begin, std::size_t end);
    NodeId reshape(NodeId x, std::vector<std::size_t> shape);
    NodeId transpose(NodeId x);                // (R,C) -> (C,R)
    NodeId sum_all(NodeId x);                  // -> shape {1}
    NodeId mean_all(NodeId x);                 // -> shape {1}
    NodeId rowwise_sum(NodeId x);              // (R,C) -> (R,1)

    // Losses. Target gradients are propagated too (harmless for constants).
    NodeId mse_loss(NodeId pred, NodeId target);
    NodeId bce_loss(NodeId pred, NodeId target);  // clamps pred to [1e-7, 1-1e-7]

    // Sequence ops. Sequences are rank-3 tensors shaped (time, batch, feature).
    NodeId lstm_sequence(NodeId seq, Param& wx, Param& wh, Param& b);
    NodeId lstm_cell(NodeId x, NodeId h_prev, NodeId c_prev,
                     Param& wx, Param& wh, Param& b);
    NodeId reverse_time(NodeId seq);
    NodeId concat_feature(NodeId a, NodeId b);  // concat along last dim
    NodeId time_concat(NodeId seq);             // (T,B,F) -> (B, T*F)

    const Tensor& value(NodeId id) const { return nodes_[id].val; }
    const Tensor& grad(NodeId id) const { return nodes_[id].grad; }

    // Standard backward from a scalar loss (seed gradient 1).
    void backward(NodeId loss);
    // Backward with an explicit seed gradient on an arbitrary node.
    void backward_from(NodeId node, const Tensor& seed);

    std::size_t node_count() const { return nodes_.size(); }

private:
    enum class Op {
        Leaf, Add, Sub, Mul, AddRowvec, AddColvec, Scale, AddScalar,
        MatMul, MatMulNT, Tanh, Sigmoid, LeakyRelu, Exp, Log, SoftmaxRows,
        Dropout, ConcatCols, SliceCols, Reshape, Transpose, SumAll, MeanAll, RowwiseSum,
        MseLoss, BceLoss, LstmSeq, LstmCell, ReverseTime, ConcatFeature,
        TimeConcat,
    };

    struct Node {
        Op op;
        std::array<NodeId, 3> in{-1, -1, -1};
        std::vector<NodeId> many;
        Tensor val;
        Tensor grad;
        Tensor local0, local1;                  // op-specific caches
        double k0 = 0.0;
        std::vector<std::size_t> meta;
        Param* p = nullptr;
        std::array<Param*, 3> lp{nullptr, nullptr, nullptr};
    };

    NodeId push(Node n);
    void check_finite(const Node& n, const char* what) const;
    void backprop(Node& n);
    static void lstm_step_forward(const double* x, std::size_t batch, std::size_t in_dim,
                                  std::size_t hidden, const Param& wx, const Param& wh,
                                  const Param& b, const double* h_prev, const double* c_prev,
                                  double* gates, double* c_out, double* h_out);
    void lstm_step_backward(std::size_t batch, std::size_t in_dim, std::size_t hidden,
                            Param& wx, Param& wh, Param& b, const double* x,
                            const double* h_prev, const double* c_prev, const double* gates,
                            const double* c_cur, const double* dh, double* dc,
                            double* dx, double* dh_prev);

    std::vector<Node> nodes_;
};

}  // namespace portrl
