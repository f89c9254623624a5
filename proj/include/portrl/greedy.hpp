#pragma once

#include <vector>

#include "portrl/nn.hpp"

namespace portrl {

// One-step greedy expert problem: maximize u.w - c*sum_{i>=1}|w_i - w_prev_i|
// over the probability simplex. Entry 0 is cash; cash moves cost nothing.
struct GreedyProblem {
    std::vector<double> u;       // price relatives, u[0] == 1
    std::vector<double> w_prev;  // previous weights, on the simplex
    double cost_rate = 0.0;
};

struct ExpertAction {
    std::vector<double> w_star;
    double objective_value = 0.0;
};

// Exact LP solution via a dense two-phase primal simplex with Bland's rule.
// Ties among optima break first by minimal risky-asset turnover, then by the
// lexicographically smallest weight vector.
ExpertAction solve_greedy(const GreedyProblem& problem);

// Generic small dense LP: maximize c.x subject to A x = b, x >= 0.
struct LpSolution {
    bool feasible = false;
    bool bounded = false;
    std::vector<double> x;
    double value = 0.0;
};
LpSolution solve_lp_max(const std::vector<std::vector<double>>& a, const std::vector<double>& b,
                        const std::vector<double>& c);

// Bernoulli log-loss between actor actions and expert actions, averaged over
// batch rows and action entries; returns the analytic gradient w.r.t. the
// actor actions. Entries are clamped to [1e-7, 1-1e-7].
struct CloneLoss {
    double value = 0.0;
    Tensor grad;
};
CloneLoss clone_loss(const Tensor& actor_actions, const Tensor& expert_actions);

}  // namespace portrl
