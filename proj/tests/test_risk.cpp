#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "portrl/risk.hpp"
#include "portrl/rng.hpp"
#include "test_helpers.hpp"

using namespace portrl;
using portrl::testing::rel_err;

TEST_CASE("sharpe: alternating +x/-x has zero mean, constant series is degenerate") {
    ReturnSeries s{{0.01, -0.01, 0.01, -0.01}, 252};
    CHECK(sharpe(s) == doctest::Approx(0.0));
    ReturnSeries flat{{0.01, 0.01, 0.01}, 252};
    CHECK_THROWS_AS(sharpe(flat), std::domain_error);
}

TEST_CASE("sharpe: sampling oracle, 1000 iid N(0.001, 0.01) draws near SR 0.1") {
    Rng rng(4242);
    ReturnSeries s;
    for (int i = 0; i < 1000; ++i) s.r.push_back(rng.normal(0.001, 0.01));
    // standard error of the SR estimate ~ sqrt((1 + SR^2/2)/n)
    const double se = std::sqrt((1.0 + 0.005) / 1000.0);
    CHECK(std::abs(sharpe(s) - 0.1) < 3.0 * se);
}

TEST_CASE("sortino: all-positive errors; hand arithmetic for (0.02, -0.01)") {
    ReturnSeries pos{{0.01, 0.02}, 252};
    CHECK_THROWS_AS(sortino(pos), std::domain_error);
    ReturnSeries s{{0.02, -0.01}, 252};
    // mean 0.005, dd = sqrt(0.0001/2) ~= 0.007071 -> ratio ~= 0.7071
    CHECK(sortino(s) == doctest::Approx(0.005 / std::sqrt(0.0001 / 2.0)).epsilon(1e-12));
    CHECK(sortino(s) == doctest::Approx(0.70710678).epsilon(1e-6));
}

TEST_CASE("sortino >= sharpe on mixed-sign series with nonnegative mean") {
    Rng rng(99);
    int tested = 0;
    while (tested < 1000) {
        ReturnSeries s;
        for (int i = 0; i < 30; ++i) s.r.push_back(rng.normal(0.003, 0.01));
        double mu = 0.0;
        bool has_down = false, has_up = false;
        for (double r : s.r) {
            mu += r;
            has_down |= r < 0;
            has_up |= r > 0;
        }
        if (mu < 0.0 || !has_down || !has_up) continue;
        ++tested;
        CHECK(sortino(s) >= sharpe(s) - 1e-12);
    }
}

TEST_CASE("var_cvar: uniform grid ECDF hand evaluation") {
    // returns -5%..+4%, alpha = 0.9: the 0.1-quantile (lower interpolation)
    // is the lowest element, so VaR = CVaR = 5%
    ReturnSeries s;
    for (int i = -5; i <= 4; ++i) s.r.push_back(i / 100.0);
    const auto vc = var_cvar(s, 0.9);
    CHECK(vc.var == doctest::Approx(0.05).epsilon(1e-15));
    CHECK(vc.cvar == doctest::Approx(0.05).epsilon(1e-15));
}

TEST_CASE("var_cvar: point mass gives VaR = CVaR = -mu") {
    ReturnSeries s;
    for (int i = 0; i < 25; ++i) s.r.push_back(0.004);
    const auto vc = var_cvar(s, 0.95);
    CHECK(vc.var == doctest::Approx(-0.004));
    CHECK(vc.cvar == doctest::Approx(-0.004));
}

TEST_CASE("var_cvar: CVaR >= VaR always; short series errors") {
    Rng rng(5);
    for (int rep = 0; rep < 200; ++rep) {
        ReturnSeries s;
        const int n = 20 + static_cast<int>(rng.uniform_int(100));
        for (int i = 0; i < n; ++i) s.r.push_back(rng.normal(0.0, 0.02));
        const auto vc = var_cvar(s, 0.95);
        CHECK(vc.cvar >= vc.var - 1e-15);
    }
    ReturnSeries tiny{{0.01, -0.01}, 252};
    CHECK_THROWS(var_cvar(tiny, 0.95));
}

TEST_CASE("mdd: monotone curve, hand sweep, scale invariance") {
    CHECK(max_drawdown({1, 2, 3, 4, 5}) == 0.0);
    CHECK(max_drawdown({100, 80, 120, 60}) == doctest::Approx(0.5).epsilon(1e-15));
    Rng rng(8);
    std::vector<double> curve;
    double v = 100.0;
    for (int i = 0; i < 300; ++i) {
        v *= std::exp(0.02 * rng.normal());
        curve.push_back(v);
    }
    const double base = max_drawdown(curve);
    std::vector<double> scaled = curve;
    for (double& e : scaled) e *= 7.25;
    CHECK(max_drawdown(scaled) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("annualize: zeros, compounding closed form, vol linearity") {
    ReturnSeries zeros{{0, 0, 0}, 252};
    const auto a0 = annualize(zeros);
    CHECK(a0.ann_return == 0.0);
    CHECK(a0.ann_volatility == 0.0);

    ReturnSeries c{std::vector<double>(10, std::log(1.0001)), 252};
    const auto ac = annualize(c);
    CHECK(ac.ann_return == doctest::Approx(std::pow(1.0001, 252) - 1.0).epsilon(1e-12));

    Rng rng(3);
    ReturnSeries r;
    for (int i = 0; i < 100; ++i) r.r.push_back(rng.normal(0.0, 0.01));
    ReturnSeries r2 = r;
    for (double& e : r2.r) e *= 2.0;
    CHECK(annualize(r2).ann_volatility == doctest::Approx(2.0 * annualize(r).ann_volatility).epsilon(1e-12));
}

TEST_CASE("dsr: cold start from nu = omega = 0 gives d1 = 0") {
    DsrState s;
    CHECK(dsr_update(s, 0.05) == 0.0);
}

TEST_CASE("dsr: direct formula arithmetic for a hand-set state") {
    DsrState s;
    s.nu = 0.01;
    s.omega = 0.0002;
    const double r = 0.02;
    const double dnu = r - 0.01;
    const double domega = r * r - 0.0002;
    const double expect = (0.0002 * dnu - 0.5 * 0.01 * domega) /
                          (std::pow(0.0002 - 0.01 * 0.01, 1.5) + 1e-8);
    CHECK(dsr_update(s, r) == doctest::Approx(expect).epsilon(1e-14));
    // EMA updates applied afterwards
    CHECK(s.nu == doctest::Approx(0.01 + s.eta * dnu).epsilon(1e-14));
    CHECK(s.omega == doctest::Approx(0.0002 + s.eta * domega).epsilon(1e-14));
}

TEST_CASE("dsr stream matches finite difference in eta of the one-step moving-average Sharpe") {
    // d_t is the derivative at 0 of epsilon -> SR(nu + eps*dnu, omega + eps*domega)
    Rng rng(2718);
    DsrState s;
    int checked = 0;
    for (int t = 0; t < 400; ++t) {
        const double r = rng.normal(0.01, 0.1);
        const double nu = s.nu, omega = s.omega;
        const double d = dsr_update(s, r);
        if (t < 20 || omega - nu * nu < 1e-4) continue;
        const double e = 1e-6;
        auto sr_after = [&](double eps) {
            const double nu2 = nu + eps * (r - nu);
            const double om2 = omega + eps * (r * r - omega);
            return nu2 / std::sqrt(om2 - nu2 * nu2);
        };
        const double fd = (sr_after(e) - sr_after(-e)) / (2.0 * e);
        REQUIRE(rel_err(d, fd, 1e-6) < 1e-3);
        ++checked;
    }
    CHECK(checked > 300);
}

TEST_CASE("dsr: constant positive returns drive d_t to zero") {
    DsrState s;
    double last = 1.0;
    for (int t = 0; t < 4000; ++t) last = dsr_update(s, 0.01);
    CHECK(std::abs(last) < 1e-6);
}

TEST_CASE("d3r: cold start with positive return is large, positive, finite") {
    D3rState s;
    const double d = d3r_update(s, 0.02);
    CHECK(std::isfinite(d));
    CHECK(d == doctest::Approx(0.02 / 1e-8));
}

TEST_CASE("d3r: negative-branch hand evaluation") {
    D3rState s;
    s.nu = 0.01;
    s.dd2 = 0.02 * 0.02;
    const double r = -0.03;
    const double dd = 0.02;
    const double expect = (dd * dd * (r - 0.5 * 0.01) - 0.5 * 0.01 * r * r) / (dd * dd * dd + 1e-8);
    CHECK(d3r_update(s, r) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(s.nu == doctest::Approx(0.01 + 0.01 * (r - 0.01)).epsilon(1e-14));
    CHECK(s.dd2 == doctest::Approx(0.0004 + 0.01 * (r * r - 0.0004)).epsilon(1e-14));
}

TEST_CASE("d3r: narrow-band positive stream keeps every d_t nonnegative") {
    Rng rng(55);
    D3rState s;
    for (int t = 0; t < 2000; ++t) {
        const double r = rng.uniform(0.01, 0.02);
        CHECK(d3r_update(s, r) >= 0.0);
    }
}

TEST_CASE("dsr/d3r: replay from a checkpointed state is bitwise identical") {
    Rng rng(606);
    std::vector<double> stream;
    for (int i = 0; i < 200; ++i) stream.push_back(rng.normal(0.001, 0.05));

    DsrState full;
    std::vector<double> out_full;
    for (double r : stream) out_full.push_back(dsr_update(full, r));

    DsrState part;
    std::vector<double> out_part;
    for (int i = 0; i < 100; ++i) out_part.push_back(dsr_update(part, stream[i]));
    DsrState resumed = part;  // checkpoint copy
    for (int i = 100; i < 200; ++i) out_part.push_back(dsr_update(resumed, stream[i]));
    CHECK(out_full == out_part);

    D3rState d_full;
    std::vector<double> d3_full;
    for (double r : stream) d3_full.push_back(d3r_update(d_full, r));
    D3rState d_part;
    std::vector<double> d3_part;
    for (int i = 0; i < 70; ++i) d3_part.push_back(d3r_update(d_part, stream[i]));
    D3rState d_resumed = d_part;
    for (int i = 70; i < 200; ++i) d3_part.push_back(d3r_update(d_resumed, stream[i]));
    CHECK(d3_full == d3_part);
}

TEST_CASE("cross_correlation: shift oracle, autocorrelation peak, white-noise bound") {
    Rng rng(13);
    std::vector<double> x;
    for (int i = 0; i < 500; ++i) x.push_back(rng.normal());
    // y(t) = x(t-2), so R_xy(l) = sum x(t) y(t-l) peaks at l = -2
    std::vector<double> y(x.size(), 0.0);
    for (std::size_t t = 2; t < x.size(); ++t) y[t] = x[t - 2];
    CHECK(cross_correlation(x, y, 5).trend_lag == -2);

    CHECK(cross_correlation(x, x, 5).trend_lag == 0);

    std::vector<double> w1, w2;
    Rng r1(21), r2(22);
    for (int i = 0; i < 10000; ++i) {
        w1.push_back(r1.normal());
        w2.push_back(r2.normal());
    }
    const auto cc = cross_correlation(w1, w2, 10);
    for (double c : cc.correlation) CHECK(std::abs(c) < 0.05);
}

TEST_CASE("metrics report: flat equity serializes with nulls and zero mdd") {
    const std::vector<double> equity(30, 500000.0);
    ReturnSeries rs{std::vector<double>(29, 0.0), 252};
    const auto rep = compute_metrics(equity, rs);
    CHECK(rep.final_account_value == 500000.0);
    CHECK(rep.mdd == 0.0);
    CHECK(!rep.sharpe.has_value());
    const auto j = metrics_to_json(rep);
    CHECK(j["sharpe"].is_null());
    CHECK(j["final_account_value"] == 500000.0);
    // exact key set
    const std::vector<std::string> keys = {"ann_return", "ann_volatility", "cvar_95",
                                           "final_account_value", "mdd", "sharpe",
                                           "sortino", "var_95"};
    std::size_t found = 0;
    for (const auto& k : keys) found += j.contains(k) ? 1 : 0;
    CHECK(found == keys.size());
    CHECK(j.size() == keys.size());
}
