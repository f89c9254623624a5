#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "portrl/market_data.hpp"
#include "portrl/risk.hpp"

namespace portrl {

struct ExecutionConfig {
    enum class Mode { Idealized, Realistic };
    double fee_rate = 0.002;       // 20 bps
    double slippage_rate = 0.005;  // 50 bps, adverse on both sides
    Mode mode = Mode::Idealized;
    std::size_t decision_period = 1;
    std::size_t execution_period = 1;  // bars between decision and execution
    double initial_cash = 500000.0;
    double periods_per_year = 252.0;
};

// Portfolio ledger. Idealized mode tracks value and weights directly (the
// weight-space arithmetic of the reward definition); realistic mode tracks
// integer share counts plus cash.
struct AccountState {
    bool realistic = false;
    double value = 0.0;
    std::vector<double> weights;        // held weights (idealized)
    double cash = 0.0;
    std::vector<std::int64_t> shares;   // per asset, index 0 (cash) unused

    double mark_to_market(const std::vector<double>& prices) const;
};

struct Fill {
    std::size_t bar = 0;
    std::size_t asset = 0;
    std::int64_t quantity = 0;  // signed
    double price = 0.0;
    double fee = 0.0;
    bool scaled_down = false;   // order shrunk to the affordable quantity
};

struct Order {
    std::size_t asset = 0;
    std::int64_t quantity = 0;
};

// w' = (u (.) w) / (u . w)
std::vector<double> drift_weights(const std::vector<double>& w_prev, const std::vector<double>& u);

// 1 - c * sum_{i>=1} |w'_i - w_i|; cash is excluded from the cost sum.
double cost_factor(const std::vector<double>& w_drifted, const std::vector<double>& w_target, double c);

// One idealized accounting step: grow by u.w_held, pay the shrink factor for
// rebalancing to w_target, return r = ln(cbar * u.w_held).
double step_idealized(AccountState& account, const std::vector<double>& u,
                      const std::vector<double>& w_target, double fee_rate);

// Integer share targets: floor(w_i * value / p_i); residual stays in cash.
std::vector<Order> rebalance_orders(const AccountState& account, const std::vector<double>& w_target,
                                    const std::vector<double>& prices);

// Executes at the given open prices with adverse slippage; sells run before
// buys. Orders that exceed available cash are scaled down, never dropped
// silently. Returns the fills.
std::vector<Fill> execute(AccountState& account, const std::vector<Order>& orders,
                          const std::vector<double>& open_prices, const ExecutionConfig& config,
                          std::size_t bar);

struct DecisionContext {
    std::size_t t = 0;  // bar index in the underlying aligned dataset
    const AlignedDataset* data = nullptr;
    PriceTensor tensor;
    std::vector<double> weights;      // current (pre-decision) weights
    std::vector<double> prediction;   // next-step pct-change forecast, may be empty
    double index_ratio = 1.0;         // market index close ratio
};
using Policy = std::function<std::vector<double>(const DecisionContext&)>;

// Online forecaster hook: consumes the realized pct-change vector of each
// bar in order and returns the forecast for the next bar.
class PredictionSource {
public:
    virtual ~PredictionSource() = default;
    virtual std::vector<double> step(const std::vector<double>& observed) = 0;
};

struct BacktestResult {
    std::vector<double> equity;                 // initial value first
    std::vector<double> rewards;                // per-bar log returns
    std::vector<std::vector<double>> weight_history;  // target weights per bar
    std::vector<Fill> fills;
    MetricsReport metrics;
};

struct BacktestOptions {
    ExecutionConfig exec;
    std::size_t k2 = 10;
    PredictionSource* prediction = nullptr;
};

BacktestResult run_backtest(const Policy& policy, const EpisodeSlice& slice,
                            const BacktestOptions& options);

// Constantly rebalanced portfolio: equal weights across all assets including
// cash, restored every decision period.
BacktestResult run_crp(const EpisodeSlice& slice, const BacktestOptions& options);

}  // namespace portrl
