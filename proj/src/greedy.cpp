#include "portrl/greedy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace portrl {

namespace {

constexpr double kTol = 1e-9;

// Dense tableau minimizer with Bland's anti-cycling rule. The tableau holds
// constraint rows plus a reduced-cost row at the bottom; rhs in the last
// column. Returns false on unboundedness.
bool simplex_iterate(std::vector<std::vector<double>>& t, std::vector<int>& basis,
                     std::size_t num_cols, const std::vector<bool>& allowed) {
    const std::size_t m = basis.size();
    const std::size_t rhs = num_cols;
    for (;;) {
        // Bland: entering variable is the smallest index with negative
        // reduced cost.
        std::size_t enter = num_cols;
        for (std::size_t j = 0; j < num_cols; ++j) {
            if (allowed[j] && t[m][j] < -kTol) {
                enter = j;
                break;
            }
        }
        if (enter == num_cols) return true;  // optimal
        // Ratio test; ties break on the smallest basis index (Bland).
        std::size_t leave = m;
        double best_ratio = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            if (basis[i] < 0) continue;  // deleted redundant row
            if (t[i][enter] > kTol) {
                const double ratio = t[i][rhs] / t[i][enter];
                if (leave == m || ratio < best_ratio - kTol ||
                    (ratio < best_ratio + kTol && basis[i] < basis[leave])) {
                    leave = i;
                    best_ratio = ratio;
                }
            }
        }
        if (leave == m) return false;  // unbounded
        // pivot
        const double piv = t[leave][enter];
        for (std::size_t j = 0; j <= rhs; ++j) t[leave][j] /= piv;
        for (std::size_t i = 0; i <= m; ++i) {
            if (i == leave) continue;
            const double f = t[i][enter];
            if (f == 0.0) continue;
            for (std::size_t j = 0; j <= rhs; ++j) t[i][j] -= f * t[leave][j];
        }
        basis[leave] = static_cast<int>(enter);
    }
}

}  // namespace

LpSolution solve_lp_max(const std::vector<std::vector<double>>& a, const std::vector<double>& b,
                        const std::vector<double>& c) {
    const std::size_t m = a.size();
    const std::size_t n = c.size();
    LpSolution sol;
    if (m == 0 || b.size() != m) throw std::invalid_argument("solve_lp_max: bad system dimensions");
    for (const auto& row : a)
        if (row.size() != n) throw std::invalid_argument("solve_lp_max: ragged constraint matrix");

    const std::size_t total = n + m;  // real + artificial columns
    std::vector<std::vector<double>> t(m + 1, std::vector<double>(total + 1, 0.0));
    std::vector<int> basis(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double sign = b[i] < 0.0 ? -1.0 : 1.0;
        for (std::size_t j = 0; j < n; ++j) t[i][j] = sign * a[i][j];
        t[i][n + i] = 1.0;
        t[i][total] = sign * b[i];
        basis[i] = static_cast<int>(n + i);
    }
    // Phase 1: minimize the artificial sum. Reduced costs come from
    // subtracting each constraint row (whose basic artificial has cost 1).
    for (std::size_t j = 0; j <= total; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += t[i][j];
        t[m][j] = -s;
    }
    for (std::size_t i = 0; i < m; ++i) t[m][n + i] = 0.0;
    std::vector<bool> allow_all(total, true);
    if (!simplex_iterate(t, basis, total, allow_all)) return sol;  // cannot happen: phase 1 is bounded
    if (-t[m][total] > 1e-7) return sol;                           // infeasible

    // Drive artificials out of the basis; an all-zero row is redundant.
    for (std::size_t i = 0; i < m; ++i) {
        if (basis[i] < static_cast<int>(n)) continue;
        std::size_t piv_col = n;
        for (std::size_t j = 0; j < n; ++j) {
            if (std::abs(t[i][j]) > 1e-7) {
                piv_col = j;
                break;
            }
        }
        if (piv_col == n) {
            basis[i] = -1;  // redundant constraint
            continue;
        }
        const double piv = t[i][piv_col];
        for (std::size_t j = 0; j <= total; ++j) t[i][j] /= piv;
        for (std::size_t k = 0; k <= m; ++k) {
            if (k == i) continue;
            const double f = t[k][piv_col];
            if (f == 0.0) continue;
            for (std::size_t j = 0; j <= total; ++j) t[k][j] -= f * t[i][j];
        }
        basis[i] = static_cast<int>(piv_col);
    }

    // Phase 2: minimize -c over the real columns only.
    std::vector<bool> allowed(total, false);
    for (std::size_t j = 0; j < n; ++j) allowed[j] = true;
    for (std::size_t j = 0; j <= total; ++j) t[m][j] = 0.0;
    for (std::size_t j = 0; j < n; ++j) t[m][j] = -c[j];
    for (std::size_t i = 0; i < m; ++i) {
        if (basis[i] < 0 || basis[i] >= static_cast<int>(n)) continue;
        const double cost = -c[basis[i]];
        if (cost == 0.0) continue;
        for (std::size_t j = 0; j <= total; ++j) t[m][j] -= cost * t[i][j];
    }
    if (!simplex_iterate(t, basis, total, allowed)) {
        sol.feasible = true;
        return sol;  // unbounded
    }
    sol.feasible = true;
    sol.bounded = true;
    sol.x.assign(n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        if (basis[i] >= 0 && basis[i] < static_cast<int>(n)) sol.x[basis[i]] = t[i][total];
    }
    sol.value = 0.0;
    for (std::size_t j = 0; j < n; ++j) sol.value += c[j] * sol.x[j];
    return sol;
}

ExpertAction solve_greedy(const GreedyProblem& problem) {
    const std::size_t n = problem.u.size();
    if (n < 2 || problem.w_prev.size() != n)
        throw std::invalid_argument("solve_greedy: need cash plus at least one risky asset");
    if (problem.cost_rate < 0.0) throw std::invalid_argument("solve_greedy: negative cost rate");
    double wsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (problem.u[i] <= 0.0) throw std::invalid_argument("solve_greedy: non-positive price relative");
        if (problem.w_prev[i] < -1e-9) throw std::invalid_argument("solve_greedy: negative previous weight");
        wsum += problem.w_prev[i];
    }
    if (std::abs(wsum - 1.0) > 1e-6) throw std::invalid_argument("solve_greedy: previous weights off the simplex");

    const std::size_t m = n - 1;
    // Variables: w_0..w_m, then b_1..b_m (buys), then s_1..s_m (sells),
    // with |w_i - w_prev_i| = b_i + s_i at any optimum.
    const std::size_t nv = n + 2 * m;
    auto wcol = [&](std::size_t i) { return i; };
    auto bcol = [&](std::size_t i) { return n + (i - 1); };
    auto scol = [&](std::size_t i) { return n + m + (i - 1); };

    std::vector<std::vector<double>> a;
    std::vector<double> rhs;
    {
        std::vector<double> row(nv, 0.0);
        for (std::size_t i = 0; i < n; ++i) row[wcol(i)] = 1.0;
        a.push_back(row);
        rhs.push_back(1.0);
    }
    for (std::size_t i = 1; i <= m; ++i) {
        std::vector<double> row(nv, 0.0);
        row[wcol(i)] = 1.0;
        row[bcol(i)] = -1.0;
        row[scol(i)] = 1.0;
        a.push_back(row);
        rhs.push_back(problem.w_prev[i]);
    }

    std::vector<double> objective(nv, 0.0);
    for (std::size_t i = 0; i < n; ++i) objective[wcol(i)] = problem.u[i];
    for (std::size_t i = 1; i <= m; ++i) {
        objective[bcol(i)] = -problem.cost_rate;
        objective[scol(i)] = -problem.cost_rate;
    }

    LpSolution best = solve_lp_max(a, rhs, objective);
    if (!best.feasible || !best.bounded) throw std::runtime_error("solve_greedy: LP solve failed");

    // Tie-break 1: among optima, minimize risky turnover. The optimum value
    // is pinned with an equality row.
    auto pin = [&](const std::vector<double>& row, double value) {
        a.push_back(row);
        rhs.push_back(value);
    };
    pin(objective, best.value);
    std::vector<double> turnover(nv, 0.0);
    for (std::size_t i = 1; i <= m; ++i) {
        turnover[bcol(i)] = -1.0;
        turnover[scol(i)] = -1.0;
    }
    LpSolution min_turn = solve_lp_max(a, rhs, turnover);
    if (!min_turn.feasible || !min_turn.bounded) throw std::runtime_error("solve_greedy: turnover solve failed");

    // Tie-break 2: lexicographically smallest w.
    pin(turnover, min_turn.value);
    LpSolution final_sol = min_turn;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> lex(nv, 0.0);
        lex[wcol(i)] = -1.0;
        final_sol = solve_lp_max(a, rhs, lex);
        if (!final_sol.feasible || !final_sol.bounded)
            throw std::runtime_error("solve_greedy: lexicographic solve failed");
        if (i + 1 < n) pin(lex, final_sol.value);
    }

    ExpertAction action;
    action.w_star.assign(n, 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        action.w_star[i] = std::clamp(final_sol.x[wcol(i)], 0.0, 1.0);
        sum += action.w_star[i];
    }
    for (double& w : action.w_star) w /= sum;  // scrub 1e-12 scale residue
    double cost = 0.0;
    for (std::size_t i = 1; i <= m; ++i) cost += std::abs(action.w_star[i] - problem.w_prev[i]);
    double growth = 0.0;
    for (std::size_t i = 0; i < n; ++i) growth += problem.u[i] * action.w_star[i];
    action.objective_value = growth - problem.cost_rate * cost;
    return action;
}

CloneLoss clone_loss(const Tensor& actor_actions, const Tensor& expert_actions) {
    if (!actor_actions.same_shape(expert_actions))
        throw std::invalid_argument("clone_loss: shape mismatch");
    const LossResult base = loss_binary_log(actor_actions, expert_actions);
    return CloneLoss{base.value, base.grad};
}

}  // namespace portrl
