#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "portrl/checkpoint.hpp"
#include "portrl/graph.hpp"
#include "portrl/nn.hpp"
#include "portrl/rng.hpp"
#include "test_helpers.hpp"

using namespace portrl;
using portrl::testing::central_diff;
using portrl::testing::rel_err;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& e : t.v) e = scale * rng.normal();
    return t;
}

}  // namespace

TEST_CASE("dense layer with zero weights and bias produces zero output") {
    ParamSet ps;
    Param& w = ps.add("w", Tensor({3, 2}));
    Param& b = ps.add("b", Tensor({1, 2}));
    DenseLayer layer{&w, &b};
    Graph g;
    NodeId x = g.constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    NodeId y = dense_forward(g, x, layer);
    for (double e : g.value(y).v) CHECK(e == 0.0);
}

TEST_CASE("softmax of zeros is uniform and rows sum to one") {
    Graph g;
    NodeId x = g.constant(Tensor({1, 2}, {0.0, 0.0}));
    NodeId y = g.softmax_rows(x);
    CHECK(g.value(y).v[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(g.value(y).v[1] == doctest::Approx(0.5).epsilon(1e-15));

    Rng rng(7);
    Graph g2;
    NodeId r = g2.softmax_rows(g2.constant(random_tensor(rng, {5, 9}, 3.0)));
    const Tensor& t = g2.value(r);
    for (std::size_t i = 0; i < 5; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 9; ++j) {
            CHECK(t.at(i, j) > 0.0);
            s += t.at(i, j);
        }
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("lstm cell with zero parameters and zero state outputs zero") {
    ParamSet ps;
    Rng rng(1);
    LstmLayer l = make_lstm(ps, "cell", 3, 4, rng);
    for (auto& p : ps)
        for (double& e : p.value.v) e = 0.0;
    Graph g;
    NodeId x = g.constant(Tensor({2, 3}, {1, -1, 2, 0.5, 0.25, -2}));
    NodeId h0 = g.constant(Tensor({2, 4}));
    NodeId c0 = g.constant(Tensor({2, 4}));
    NodeId h1 = g.lstm_cell(x, h0, c0, *l.wx, *l.wh, *l.b);
    for (double e : g.value(h1).v) CHECK(e == 0.0);
}

TEST_CASE("linear case: loss = sum(W x) gives outer-structure gradient") {
    ParamSet ps;
    Param& w = ps.add("w", Tensor({2, 2}, {1, 2, 3, 4}));
    Graph g;
    NodeId x = g.constant(Tensor({2, 1}, {5, 7}));  // column vector
    NodeId y = g.matmul(g.param(w), x);
    NodeId loss = g.sum_all(y);
    g.backward(loss);
    // d(sum(Wx))/dW_{ij} = x_j, repeated per row
    CHECK(w.grad.v == std::vector<double>({5, 7, 5, 7}));
}

TEST_CASE("gradient accumulation: two backward calls double the gradient") {
    ParamSet ps;
    Param& w = ps.add("w", Tensor({2, 2}, {1, 2, 3, 4}));
    auto run = [&]() {
        Graph g;
        NodeId x = g.constant(Tensor({2, 1}, {5, 7}));
        g.backward(g.sum_all(g.matmul(g.param(w), x)));
    };
    run();
    const std::vector<double> once = w.grad.v;
    run();
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(w.grad.v[i] == doctest::Approx(2.0 * once[i]));
}

TEST_CASE("finite-difference oracle: dense + activations + losses, 100 seeds") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        ParamSet ps;
        Rng init(seed + 1000);
        DenseLayer d1 = make_dense(ps, "d1", 3, 4, init);
        DenseLayer d2 = make_dense(ps, "d2", 4, 2, init);
        const Tensor x = random_tensor(rng, {2, 3});
        const Tensor target_mse = random_tensor(rng, {2, 2});
        Tensor target_bce({2, 2});
        for (double& e : target_bce.v) e = rng.uniform();

        const std::vector<std::function<NodeId(Graph&)>> builders = {
            [&](Graph& g) {
                NodeId h = g.tanh_(dense_forward(g, g.constant(x), d1));
                NodeId o = g.leaky_relu(dense_forward(g, h, d2));
                return g.mse_loss(o, g.constant(target_mse));
            },
            [&](Graph& g) {
                NodeId h = g.sigmoid_(dense_forward(g, g.constant(x), d1));
                NodeId o = g.sigmoid_(dense_forward(g, h, d2));
                return g.bce_loss(o, g.constant(target_bce));
            },
            [&](Graph& g) {
                NodeId h = g.tanh_(dense_forward(g, g.constant(x), d1));
                NodeId o = g.softmax_rows(dense_forward(g, h, d2));
                return g.mse_loss(o, g.constant(target_mse));
            },
        };
        for (const auto& build : builders) {
            Graph g;
            NodeId loss = build(g);
            g.backward(loss);
            for (auto& p : ps) {
                for (std::size_t i = 0; i < p.value.size(); ++i) {
                    const double fd = central_diff(p.value.v, i, [&]() {
                        Graph g2;
                        return g2.value(build(g2)).v[0];
                    });
                    REQUIRE(rel_err(p.grad.v[i], fd) < 1e-4);
                }
                p.zero_grad();
            }
        }
    }
}

TEST_CASE("finite-difference oracle: lstm cell and bidirectional lstm, 100 seeds") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed * 3 + 1);
        ParamSet ps;
        Rng init(seed + 55);
        LstmLayer cell = make_lstm(ps, "cell", 2, 3, init);
        LstmLayer fw = make_lstm(ps, "fw", 2, 3, init);
        LstmLayer bw = make_lstm(ps, "bw", 2, 3, init);
        const Tensor x = random_tensor(rng, {2, 2});
        const Tensor h0 = random_tensor(rng, {2, 3}, 0.5);
        const Tensor c0 = random_tensor(rng, {2, 3}, 0.5);
        const Tensor seq = random_tensor(rng, {4, 2, 2});

        const std::vector<std::function<NodeId(Graph&)>> builders = {
            [&](Graph& g) {
                NodeId h1 = g.lstm_cell(g.constant(x), g.constant(h0), g.constant(c0),
                                        *cell.wx, *cell.wh, *cell.b);
                return g.mean_all(g.mul(h1, h1));
            },
            [&](Graph& g) {
                NodeId out = bilstm_forward(g, g.constant(seq), fw, bw);
                NodeId flat = g.time_concat(out);
                return g.mean_all(g.mul(flat, flat));
            },
        };
        for (const auto& build : builders) {
            Graph g;
            g.backward(build(g));
            for (auto& p : ps) {
                for (std::size_t i = 0; i < p.value.size(); ++i) {
                    const double fd = central_diff(p.value.v, i, [&]() {
                        Graph g2;
                        return g2.value(build(g2)).v[0];
                    });
                    REQUIRE(rel_err(p.grad.v[i], fd) < 1e-4);
                }
                p.zero_grad();
            }
        }
    }
}

TEST_CASE("finite-difference oracle: gradient w.r.t. inputs through lstm sequence") {
    Rng rng(99);
    ParamSet ps;
    LstmLayer l = make_lstm(ps, "l", 2, 3, rng);
    Tensor seq = random_tensor(rng, {3, 2, 2});
    auto build = [&](Graph& g) {
        NodeId out = g.lstm_sequence(g.constant(seq), *l.wx, *l.wh, *l.b);
        return g.mean_all(g.mul(out, out));
    };
    Graph g;
    NodeId in = g.constant(seq);
    NodeId out = g.lstm_sequence(in, *l.wx, *l.wh, *l.b);
    g.backward(g.mean_all(g.mul(out, out)));
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const double fd = central_diff(seq.v, i, [&]() {
            Graph g2;
            return g2.value(build(g2)).v[0];
        });
        REQUIRE(rel_err(g.grad(in).v[i], fd) < 1e-4);
    }
}

TEST_CASE("dropout is identity in eval mode and with keep=1") {
    Rng rng(5);
    const Tensor x = random_tensor(rng, {4, 6});
    Graph g;
    NodeId a = g.constant(x);
    NodeId eval_out = g.dropout(a, 0.5, rng, false);
    NodeId keep1_out = g.dropout(a, 1.0, rng, true);
    CHECK(g.value(eval_out).v == x.v);
    CHECK(g.value(keep1_out).v == x.v);
}

TEST_CASE("dropout train mode scales surviving entries by 1/keep") {
    Rng rng(11);
    Graph g;
    NodeId a = g.constant(Tensor::full({100, 10}, 1.0));
    NodeId out = g.dropout(a, 0.8, rng, true);
    std::size_t kept = 0;
    for (double e : g.value(out).v) {
        CHECK((e == 0.0 || e == doctest::Approx(1.25)));
        if (e != 0.0) ++kept;
    }
    CHECK(kept > 700);
    CHECK(kept < 900);
}

TEST_CASE("optimizers: zero gradient leaves parameters unchanged") {
    for (OptKind kind : {OptKind::Sgd, OptKind::Adam, OptKind::RmsProp}) {
        ParamSet ps;
        Param& p = ps.add("p", Tensor({2, 2}, {1, 2, 3, 4}));
        p.zero_grad();
        Optimizer opt(kind, 0.1);
        opt.step(ps);
        CHECK(p.value.v == std::vector<double>({1, 2, 3, 4}));
    }
}

TEST_CASE("sgd step: lr=0.1, theta=1, g=2 -> 0.8") {
    ParamSet ps;
    Param& p = ps.add("p", Tensor({1}, {1.0}));
    p.grad.v[0] = 2.0;
    Optimizer opt(OptKind::Sgd, 0.1);
    opt.step(ps);
    CHECK(p.value.v[0] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("adam single step matches hand evaluation of the recurrences") {
    // m = 0.1*g = 0.1; v = 0.001*g^2 = 0.001; mhat = 1; vhat = 1
    // theta = -lr * 1/(sqrt(1)+1e-8) ~= -0.001
    ParamSet ps;
    Param& p = ps.add("p", Tensor({1}, {0.0}));
    p.grad.v[0] = 1.0;
    Optimizer opt(OptKind::Adam, 0.001);
    opt.step(ps);
    CHECK(p.value.v[0] == doctest::Approx(-0.001 * (1.0 / (1.0 + 1e-8))).epsilon(1e-12));
}

TEST_CASE("rmsprop single step matches hand evaluation") {
    // acc = 0.1*g^2 = 0.4; theta -= lr*g/(sqrt(acc)+eps)
    ParamSet ps;
    Param& p = ps.add("p", Tensor({1}, {1.0}));
    p.grad.v[0] = 2.0;
    Optimizer opt(OptKind::RmsProp, 0.01);
    opt.step(ps);
    const double expect = 1.0 - 0.01 * 2.0 / (std::sqrt(0.4) + 1e-8);
    CHECK(p.value.v[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("global-norm clip rescales large gradients") {
    ParamSet ps;
    Param& p = ps.add("p", Tensor({2}, {0.0, 0.0}));
    p.grad.v = {30.0, 40.0};  // norm 50 -> scaled to 5
    Optimizer opt(OptKind::Sgd, 1.0);
    opt.step(ps);
    CHECK(p.value.v[0] == doctest::Approx(-3.0));
    CHECK(p.value.v[1] == doctest::Approx(-4.0));
}

TEST_CASE("losses: prediction equals target gives zero mse") {
    Rng rng(3);
    const Tensor t = random_tensor(rng, {3, 3});
    CHECK(loss_mse(t, t).value == 0.0);
}

TEST_CASE("losses: p = t = 0.5 gives log-loss ln 2") {
    const Tensor p = Tensor::full({2, 3}, 0.5);
    CHECK(loss_binary_log(p, p).value == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("losses: analytic gradients match finite differences on random batches") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed + 7);
        Tensor pred({3, 2});
        Tensor target({3, 2});
        for (double& e : pred.v) e = rng.uniform(0.05, 0.95);
        for (double& e : target.v) e = rng.uniform();
        for (bool bce : {false, true}) {
            const LossResult lr_val = bce ? loss_binary_log(pred, target) : loss_mse(pred, target);
            for (std::size_t i = 0; i < pred.size(); ++i) {
                const double fd = central_diff(pred.v, i, [&]() {
                    return (bce ? loss_binary_log(pred, target) : loss_mse(pred, target)).value;
                });
                REQUIRE(rel_err(lr_val.grad.v[i], fd) < 1e-4);
            }
        }
    }
}

TEST_CASE("forward determinism: identical seeds give identical outputs") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        ParamSet ps;
        DenseLayer d = make_dense(ps, "d", 4, 3, rng);
        Rng drop_rng(seed + 1);
        Graph g;
        NodeId x = g.constant(random_tensor(rng, {2, 4}));
        NodeId y = g.dropout(g.tanh_(dense_forward(g, x, d)), 0.7, drop_rng, true);
        return g.value(y).v;
    };
    CHECK(run(42) == run(42));
}

TEST_CASE("shape mismatch raises") {
    Graph g;
    NodeId a = g.constant(Tensor({2, 2}));
    NodeId b = g.constant(Tensor({2, 3}));
    CHECK_THROWS_AS((void)g.add(a, b), std::invalid_argument);
    CHECK_THROWS_AS((void)g.mse_loss(a, b), std::invalid_argument);
}

TEST_CASE("non-finite values raise") {
    Graph g;
    NodeId a = g.constant(Tensor({1, 1}, {-1.0}));
    CHECK_THROWS_AS((void)g.log_(a), std::runtime_error);
}

TEST_CASE("backward on non-scalar loss raises") {
    Graph g;
    NodeId a = g.constant(Tensor({2, 2}, {1, 2, 3, 4}));
    CHECK_THROWS_AS(g.backward(a), std::invalid_argument);
}

TEST_CASE("parameter checkpoint round-trips exactly at double precision") {
    Rng rng(123);
    ParamSet ps;
    make_dense(ps, "d", 7, 5, rng);
    make_lstm(ps, "l", 3, 4, rng);
    // awkward values: denormals-ish, long fractions
    ps.find("d.b")->value.v[0] = 0.1 + 0.2;
    ps.find("d.b")->value.v[1] = 1e-300;
    const nlohmann::json j = params_to_json(ps);
    const std::string text = j.dump();

    Rng rng2(123);
    ParamSet ps2;
    make_dense(ps2, "d", 7, 5, rng2);
    make_lstm(ps2, "l", 3, 4, rng2);
    for (auto& p : ps2)
        for (double& e : p.value.v) e = 0.0;
    params_from_json(ps2, nlohmann::json::parse(text));
    for (std::size_t i = 0; i < ps.size(); ++i) CHECK(ps.at(i).value.v == ps2.at(i).value.v);
}

TEST_CASE("soft update and perturbation behave as stated") {
    Rng rng(9);
    ParamSet online, target;
    online.add("p", Tensor({2}, {1.0, 2.0}));
    target.add("p", Tensor({2}, {0.0, 0.0}));
    soft_update(online, target, 1.0);
    CHECK(target.at(0).value.v == std::vector<double>({1.0, 2.0}));
    soft_update(online, target, 0.0);
    CHECK(target.at(0).value.v == std::vector<double>({1.0, 2.0}));

    // moment oracle: mean squared perturbation ~= sigma^2
    ParamSet big;
    big.add("p", Tensor({1000}));
    const double sigma = 0.3;
    perturb_params(big, sigma, rng);
    double sq = 0.0;
    for (double e : big.at(0).value.v) sq += e * e;
    sq /= 1000.0;
    CHECK(sq == doctest::Approx(sigma * sigma).epsilon(0.10));
}
