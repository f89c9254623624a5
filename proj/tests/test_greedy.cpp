#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "portrl/greedy.hpp"
#include "portrl/rng.hpp"
#include "test_helpers.hpp"

using namespace portrl;
using portrl::testing::central_diff;
using portrl::testing::rel_err;

namespace {

double greedy_objective(const GreedyProblem& p, const std::vector<double>& w) {
    double growth = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) growth += p.u[i] * w[i];
    double cost = 0.0;
    for (std::size_t i = 1; i < w.size(); ++i) cost += std::abs(w[i] - p.w_prev[i]);
    return growth - p.cost_rate * cost;
}

// Brute-force grid maximum over the m=2 simplex at the given step.
double grid_max(const GreedyProblem& p, double step) {
    double best = -1e300;
    const int n = static_cast<int>(std::round(1.0 / step));
    for (int i = 0; i <= n; ++i) {
        for (int j = 0; j + i <= n; ++j) {
            const double w1 = i * step, w2 = j * step;
            best = std::max(best, greedy_objective(p, {1.0 - w1 - w2, w1, w2}));
        }
    }
    return best;
}

std::vector<double> random_simplex(Rng& rng, std::size_t n) {
    std::vector<double> w(n);
    double s = 0.0;
    for (double& e : w) {
        e = -std::log(1.0 - rng.uniform());
        s += e;
    }
    for (double& e : w) e /= s;
    return w;
}

}  // namespace

TEST_CASE("no-cost argmax: all weight on the best asset") {
    GreedyProblem p{{1.0, 1.2, 0.9}, {1.0, 0.0, 0.0}, 0.0};
    const auto a = solve_greedy(p);
    CHECK(a.w_star[0] == doctest::Approx(0.0));
    CHECK(a.w_star[1] == doctest::Approx(1.0));
    CHECK(a.w_star[2] == doctest::Approx(0.0));
    CHECK(a.objective_value == doctest::Approx(1.2));
}

TEST_CASE("flat relatives with positive cost: stay put") {
    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) {
        GreedyProblem p;
        p.u = {1.0, 1.0, 1.0, 1.0};
        p.w_prev = random_simplex(rng, 4);
        p.cost_rate = 0.002;
        const auto a = solve_greedy(p);
        for (std::size_t i = 0; i < 4; ++i) CHECK(a.w_star[i] == doctest::Approx(p.w_prev[i]).epsilon(1e-9));
        CHECK(a.objective_value == doctest::Approx(1.0));
    }
}

TEST_CASE("grid brute-force oracle on random m=2 instances") {
    Rng rng(2025);
    for (int rep = 0; rep < 60; ++rep) {
        GreedyProblem p;
        p.u = {1.0, std::exp(rng.normal(0.0, 0.03)), std::exp(rng.normal(0.0, 0.03))};
        p.w_prev = random_simplex(rng, 3);
        p.cost_rate = 0.02;
        const auto a = solve_greedy(p);
        const double gmax = grid_max(p, 0.001);
        CHECK(a.objective_value >= gmax - 1e-9);
        CHECK(a.objective_value <= gmax + 2e-3);
    }
}

TEST_CASE("upper-bound property: solver objective dominates 1e4 random feasible points") {
    Rng rng(31);
    GreedyProblem p;
    p.u = {1.0, 1.01, 0.98, 1.03};
    p.w_prev = {0.25, 0.25, 0.25, 0.25};
    p.cost_rate = 0.002;
    const auto a = solve_greedy(p);
    for (int rep = 0; rep < 10000; ++rep) {
        const auto w = random_simplex(rng, 4);
        CHECK(greedy_objective(p, w) <= a.objective_value + 1e-9);
    }
}

TEST_CASE("shift property: u + kappa*1 shifts the objective, argmax unchanged") {
    Rng rng(47);
    for (int rep = 0; rep < 25; ++rep) {
        GreedyProblem p;
        p.u = {1.0, std::exp(rng.normal(0.0, 0.05)), std::exp(rng.normal(0.0, 0.05))};
        p.w_prev = random_simplex(rng, 3);
        p.cost_rate = 0.01;
        const auto base = solve_greedy(p);
        const double kappa = 0.37;
        GreedyProblem shifted = p;
        for (double& u : shifted.u) u += kappa;
        // shifted.u[0] != 1 would fail validation; bypass cash normalization
        // by checking the LP property directly on the objective values
        GreedyProblem shifted_ok = shifted;
        const auto moved = [&]() {
            // u[0] must stay 1 per the type invariant; emulate the shift by
            // solving with the shifted vector normalized back afterwards.
            GreedyProblem q = p;
            q.u = shifted_ok.u;
            q.u[0] = p.u[0] + kappa;  // keep the uniform shift on every entry
            // solve_greedy validates u > 0 only; a shifted cash entry is fine
            return solve_greedy(q);
        }();
        CHECK(moved.objective_value == doctest::Approx(base.objective_value + kappa).epsilon(1e-9));
        for (std::size_t i = 0; i < 3; ++i)
            CHECK(moved.w_star[i] == doctest::Approx(base.w_star[i]).epsilon(1e-7));
    }
}

TEST_CASE("tie-breaking: zero-cost optimum face resolves to min turnover then lexicographic") {
    // assets 1 and 2 tie; holding asset 2 already is the zero-turnover optimum
    GreedyProblem stay{{1.0, 1.1, 1.1}, {0.0, 0.0, 1.0}, 0.0};
    const auto a = solve_greedy(stay);
    CHECK(a.w_star[2] == doctest::Approx(1.0));

    // from all-cash every optimum has turnover 1; lexicographic minimization
    // of (w0, w1, w2) puts everything on the last tied asset
    GreedyProblem lex{{1.0, 1.1, 1.1}, {1.0, 0.0, 0.0}, 0.0};
    const auto b = solve_greedy(lex);
    CHECK(b.w_star[0] == doctest::Approx(0.0));
    CHECK(b.w_star[1] == doctest::Approx(0.0));
    CHECK(b.w_star[2] == doctest::Approx(1.0));
}

TEST_CASE("vertex structure: at most m+1 nonzeros among (w, implied buys, implied sells)") {
    Rng rng(88);
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t m = 2 + rng.uniform_int(3);
        GreedyProblem p;
        p.u.assign(m + 1, 1.0);
        for (std::size_t i = 1; i <= m; ++i) p.u[i] = std::exp(rng.normal(0.0, 0.02));
        p.w_prev = random_simplex(rng, m + 1);
        p.cost_rate = 0.002;
        const auto a = solve_greedy(p);
        std::size_t nonzeros = 0;
        for (std::size_t i = 0; i <= m; ++i)
            if (a.w_star[i] > 1e-7) ++nonzeros;
        for (std::size_t i = 1; i <= m; ++i) {
            const double diff = a.w_star[i] - p.w_prev[i];
            if (diff > 1e-7) ++nonzeros;       // buy
            else if (diff < -1e-7) ++nonzeros; // sell
        }
        CHECK(nonzeros <= m + 1);
    }
}

TEST_CASE("solve_greedy rejects invalid problems") {
    CHECK_THROWS(solve_greedy(GreedyProblem{{1.0, -0.5}, {0.5, 0.5}, 0.0}));
    CHECK_THROWS(solve_greedy(GreedyProblem{{1.0, 1.1}, {0.7, 0.7}, 0.0}));
    CHECK_THROWS(solve_greedy(GreedyProblem{{1.0, 1.1}, {0.5, 0.5}, -0.1}));
}

TEST_CASE("determinism: repeated solves give identical expert actions") {
    GreedyProblem p{{1.0, 1.05, 1.05, 0.97}, {0.1, 0.3, 0.4, 0.2}, 0.002};
    const auto a = solve_greedy(p);
    const auto b = solve_greedy(p);
    CHECK(a.w_star == b.w_star);
    CHECK(a.objective_value == b.objective_value);
}

TEST_CASE("clone loss: symmetric case gives ln 2") {
    const Tensor half = Tensor::full({3, 2}, 0.5);
    CHECK(clone_loss(half, half).value == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("clone loss: exact match sits at the clamp-floor minimum") {
    Tensor expert({2, 3}, {1, 0, 0, 0.5, 0.5, 0});
    const double at_target = clone_loss(expert, expert).value;
    Rng rng(6);
    for (int rep = 0; rep < 50; ++rep) {
        Tensor perturbed = expert;
        for (double& e : perturbed.v) e = std::clamp(e + 0.05 * rng.normal(), 0.0, 1.0);
        CHECK(clone_loss(perturbed, expert).value >= at_target);
    }
}

TEST_CASE("clone loss gradient matches central finite differences to 1e-6") {
    Rng rng(9);
    for (int rep = 0; rep < 30; ++rep) {
        Tensor actor({4, 3});
        Tensor expert({4, 3});
        for (double& e : actor.v) e = rng.uniform(0.1, 0.9);
        for (double& e : expert.v) e = rng.uniform(0.0, 1.0);
        const auto cl = clone_loss(actor, expert);
        for (std::size_t i = 0; i < actor.size(); ++i) {
            const double fd = central_diff(actor.v, i, [&]() { return clone_loss(actor, expert).value; }, 1e-6);
            REQUIRE(rel_err(cl.grad.v[i], fd) < 1e-6);
        }
    }
}

TEST_CASE("clone loss is permutation-equivariant across batch rows") {
    Rng rng(12);
    Tensor actor({3, 4});
    Tensor expert({3, 4});
    for (double& e : actor.v) e = rng.uniform(0.1, 0.9);
    for (double& e : expert.v) e = rng.uniform(0.0, 1.0);
    const auto base = clone_loss(actor, expert);

    // swap rows 0 and 2 of both
    auto swap_rows = [](Tensor& t, std::size_t a, std::size_t b) {
        for (std::size_t j = 0; j < t.shape[1]; ++j) std::swap(t.at(a, j), t.at(b, j));
    };
    swap_rows(actor, 0, 2);
    swap_rows(expert, 0, 2);
    const auto swapped = clone_loss(actor, expert);
    CHECK(swapped.value == doctest::Approx(base.value).epsilon(1e-15));
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(swapped.grad.at(0, j) == base.grad.at(2, j));
        CHECK(swapped.grad.at(2, j) == base.grad.at(0, j));
        CHECK(swapped.grad.at(1, j) == base.grad.at(1, j));
    }
}
