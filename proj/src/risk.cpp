#include "portrl/risk.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace portrl {

namespace {

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double pop_variance(const std::vector<double>& v, double mean) {
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    return s / static_cast<double>(v.size());
}

}  // namespace

double sharpe(const ReturnSeries& series) {
    if (series.r.size() < 2) throw std::invalid_argument("sharpe: need at least 2 returns");
    const double mu = mean_of(series.r);
    const double var = pop_variance(series.r, mu);
    if (var < 1e-18) throw std::domain_error("sharpe: degenerate (zero-variance) return series");
    return mu / std::sqrt(var);
}

double sortino(const ReturnSeries& series, double target) {
    if (series.r.empty()) throw std::invalid_argument("sortino: empty series");
    double down = 0.0;
    bool any_down = false;
    for (double x : series.r) {
        const double d = std::min(x - target, 0.0);
        if (d < 0.0) any_down = true;
        down += d * d;
    }
    if (!any_down) throw std::domain_error("sortino: no returns below target");
    const double dd = std::sqrt(down / static_cast<double>(series.r.size()));
    return (mean_of(series.r) - target) / dd;
}

VarCvar var_cvar(const ReturnSeries& series, double alpha) {
    if (alpha <= 0.0 || alpha >= 1.0) throw std::invalid_argument("var_cvar: alpha out of (0,1)");
    const double q = 1.0 - alpha;
    const std::size_t min_len = static_cast<std::size_t>(std::ceil(1.0 / q - 1e-9));
    if (series.r.size() < min_len) throw std::invalid_argument("var_cvar: series too short for the requested tail");
    std::vector<double> sorted = series.r;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t idx = static_cast<std::size_t>(q * static_cast<double>(sorted.size() - 1));
    const double quantile = sorted[idx];
    double tail_sum = 0.0;
    std::size_t tail_count = 0;
    for (double x : sorted) {
        if (x <= quantile) {
            tail_sum += x;
            ++tail_count;
        }
    }
    return VarCvar{-quantile, -tail_sum / static_cast<double>(tail_count)};
}

double max_drawdown(const std::vector<double>& equity_curve) {
    if (equity_curve.empty()) throw std::invalid_argument("max_drawdown: empty curve");
    double peak = equity_curve.front();
    double mdd = 0.0;
    for (double v : equity_curve) {
        if (v <= 0.0) throw std::invalid_argument("max_drawdown: non-positive equity value");
        peak = std::max(peak, v);
        mdd = std::max(mdd, (peak - v) / peak);
    }
    return mdd;
}

Annualized annualize(const ReturnSeries& series) {
    if (series.r.size() < 2) throw std::invalid_argument("annualize: need at least 2 returns");
    const double mu = mean_of(series.r);
    const double sd = std::sqrt(pop_variance(series.r, mu));
    return Annualized{std::exp(mu * series.periods_per_year) - 1.0,
                      sd * std::sqrt(series.periods_per_year)};
}

double dsr_update(DsrState& s, double r_t) {
    const double dnu = r_t - s.nu;
    const double domega = r_t * r_t - s.omega;
    const double variance = s.omega - s.nu * s.nu;
    const double denom = std::pow(std::max(variance, 0.0), 1.5) + DsrState::kEps;
    const double d = (s.omega * dnu - 0.5 * s.nu * domega) / denom;
    s.nu += s.eta * dnu;
    s.omega += s.eta * domega;
    return d;
}

double d3r_update(D3rState& s, double r_t) {
    const double dd = std::sqrt(std::max(s.dd2, 0.0));
    double d;
    if (r_t > 0.0) {
        d = (r_t - 0.5 * s.nu) / (dd + D3rState::kEps);
    } else {
        d = (s.dd2 * (r_t - 0.5 * s.nu) - 0.5 * s.nu * r_t * r_t) / (dd * dd * dd + D3rState::kEps);
    }
    const double down = std::min(r_t, 0.0);
    s.nu += s.eta * (r_t - s.nu);
    s.dd2 += s.eta * (down * down - s.dd2);
    return d;
}

CrossCorrelation cross_correlation(const std::vector<double>& x, const std::vector<double>& y,
                                   int max_lag) {
    const std::size_t n = std::min(x.size(), y.size());
    if (n <= static_cast<std::size_t>(max_lag)) throw std::invalid_argument("cross_correlation: series too short");
    const double mx = mean_of(x);
    const double my = mean_of(y);
    double sx = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) sx += (x[i] - mx) * (x[i] - mx);
    for (std::size_t i = 0; i < y.size(); ++i) sy += (y[i] - my) * (y[i] - my);
    sx = std::sqrt(sx / static_cast<double>(x.size()));
    sy = std::sqrt(sy / static_cast<double>(y.size()));
    if (sx == 0.0 || sy == 0.0) throw std::domain_error("cross_correlation: constant series");

    CrossCorrelation out;
    for (int lag = -max_lag; lag <= max_lag; ++lag) {
        double s = 0.0;
        std::size_t count = 0;
        for (std::size_t t = 0; t < n; ++t) {
            const std::int64_t j = static_cast<std::int64_t>(t) - lag;  // y(t - lag)
            if (j < 0 || j >= static_cast<std::int64_t>(y.size())) continue;
            s += (x[t] - mx) * (y[static_cast<std::size_t>(j)] - my);
            ++count;
        }
        out.lags.push_back(lag);
        out.correlation.push_back(s / (static_cast<double>(count) * sx * sy));
    }
    int best = 0;
    for (std::size_t i = 1; i < out.lags.size(); ++i) {
        const bool better = out.correlation[i] > out.correlation[best] ||
                            (out.correlation[i] == out.correlation[best] &&
                             std::abs(out.lags[i]) < std::abs(out.lags[best]));
        if (better) best = static_cast<int>(i);
    }
    out.trend_lag = out.lags[best];
    return out;
}

MetricsReport compute_metrics(const std::vector<double>& equity_curve, const ReturnSeries& returns,
                              double alpha) {
    MetricsReport rep;
    if (equity_curve.empty()) throw std::invalid_argument("compute_metrics: empty equity curve");
    rep.final_account_value = equity_curve.back();
    rep.mdd = max_drawdown(equity_curve);
    if (returns.r.size() >= 2) {
        const Annualized ann = annualize(returns);
        rep.ann_return = ann.ann_return;
        rep.ann_volatility = ann.ann_volatility;
    }
    try {
        rep.sharpe = sharpe(returns);
    } catch (const std::exception&) {
    }
    try {
        rep.sortino = sortino(returns);
    } catch (const std::exception&) {
    }
    try {
        const VarCvar vc = var_cvar(returns, alpha);
        rep.var_95 = vc.var;
        rep.cvar_95 = vc.cvar;
    } catch (const std::exception&) {
    }
    return rep;
}

nlohmann::json metrics_to_json(const MetricsReport& rep) {
    nlohmann::json j;
    j["final_account_value"] = rep.final_account_value;
    j["ann_return"] = rep.ann_return;
    j["ann_volatility"] = rep.ann_volatility;
    j["sharpe"] = rep.sharpe ? nlohmann::json(*rep.sharpe) : nlohmann::json(nullptr);
    j["sortino"] = rep.sortino ? nlohmann::json(*rep.sortino) : nlohmann::json(nullptr);
    j["var_95"] = rep.var_95 ? nlohmann::json(*rep.var_95) : nlohmann::json(nullptr);
    j["cvar_95"] = rep.cvar_95 ? nlohmann::json(*rep.cvar_95) : nlohmann::json(nullptr);
    j["mdd"] = rep.mdd;
    return j;
}

}  // namespace portrl
