#pragma once

#include <optional>
#include <vector>

#include <json.hpp>

namespace portrl {

// Per-period logarithmic returns with the annualization constant. 252
// periods per year by default (daily bars).
struct ReturnSeries {
    std::vector<double> r;
    double periods_per_year = 252.0;
};

// Sample mean over population standard deviation. Throws on a degenerate
// (near-zero variance) series instead of returning +-inf.
double sharpe(const ReturnSeries& series);

// Mean over downside deviation sqrt(mean(min(r - target, 0)^2)). Throws when
// no return falls below the target.
double sortino(const ReturnSeries& series, double target = 0.0);

struct VarCvar {
    double var;   // positive loss magnitude
    double cvar;  // positive loss magnitude, >= var
};
// Empirical (1-alpha)-quantile with lower interpolation; CVaR is the mean of
// returns at or below that quantile. Requires length >= ceil(1/(1-alpha)).
VarCvar var_cvar(const ReturnSeries& series, double alpha = 0.95);

// Maximum peak-to-trough relative decline, in [0, 1].
double max_drawdown(const std::vector<double>& equity_curve);

struct Annualized {
    double ann_return;
    double ann_volatility;
};
Annualized annualize(const ReturnSeries& series);

// Differential Sharpe ratio state: exponential moving first/second moments.
struct DsrState {
    double nu = 0.0;
    double omega = 0.0;
    double eta = 0.01;
    static constexpr double kEps = 1e-8;
};
// Returns d_t and advances the moment estimates.
double dsr_update(DsrState& state, double r_t);

// Differential downside deviation ratio state.
struct D3rState {
    double nu = 0.0;
    double dd2 = 0.0;  // squared downside deviation EMA
    double eta = 0.01;
    static constexpr double kEps = 1e-8;
};
double d3r_update(D3rState& state, double r_t);

struct CrossCorrelation {
    std::vector<int> lags;           // -max_lag..max_lag
    std::vector<double> correlation; // normalized, overlap-averaged
    int trend_lag = 0;               // argmax, ties to smallest |lag|
};
CrossCorrelation cross_correlation(const std::vector<double>& x, const std::vector<double>& y,
                                   int max_lag);

// Table-style performance summary. Degenerate statistics (flat equity, too
// few observations for the tail) are left unset and serialize as null.
struct MetricsReport {
    double final_account_value = 0.0;
    double ann_return = 0.0;
    double ann_volatility = 0.0;
    std::optional<double> sharpe;
    std::optional<double> sortino;
    std::optional<double> var_95;
    std::optional<double> cvar_95;
    double mdd = 0.0;
};

MetricsReport compute_metrics(const std::vector<double>& equity_curve, const ReturnSeries& returns,
                              double alpha = 0.95);
nlohmann::json metrics_to_json(const MetricsReport& report);

}  // namespace portrl
