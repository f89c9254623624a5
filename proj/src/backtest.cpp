#include "portrl/backtest.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace portrl {

namespace {

void validate_simplex(std::vector<double>& w) {
    double sum = 0.0;
    for (double& e : w) {
        if (e < -1e-6) throw std::invalid_argument("policy emitted a negative weight beyond tolerance");
        if (e < 0.0) e = 0.0;
        sum += e;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw std::invalid_argument("policy weights do not sum to 1 within tolerance");
    for (double& e : w) e /= sum;
}

}  // namespace

double AccountState::mark_to_market(const std::vector<double>& prices) const {
    double v = cash;
    for (std::size_t a = 1; a < shares.size(); ++a) v += static_cast<double>(shares[a]) * prices[a];
    return v;
}

std::vector<double> drift_weights(const std::vector<double>& w_prev, const std::vector<double>& u) {
    if (w_prev.size() != u.size()) throw std::invalid_argument("drift_weights: length mismatch");
    double dot = 1.0;
    for (std::size_t i = 0; i < u.size(); ++i) dot += w_prev[i] * (u[i] - 1.0);
    std::vector<double> w(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) w[i] = u[i] * w_prev[i] / dot;
    return w;
}

double cost_factor(const std::vector<double>& w_drifted, const std::vector<double>& w_target, double c) {
    if (w_drifted.size() != w_target.size()) throw std::invalid_argument("cost_factor: length mismatch");
    double turnover = 0.0;
    for (std::size_t i = 1; i < w_drifted.size(); ++i) turnover += std::abs(w_drifted[i] - w_target[i]);
    return 1.0 - c * turnover;
}

namespace {

// 1 + sum w_i (u_i - 1): algebraically u.w for simplex weights, and exactly
// 1 when u is all ones regardless of rounding in the weights.
double growth_factor(const std::vector<double>& w, const std::vector<double>& u) {
    double g = 1.0;
    for (std::size_t i = 0; i < u.size(); ++i) g += w[i] * (u[i] - 1.0);
    return g;
}

}  // namespace

double step_idealized(AccountState& account, const std::vector<double>& u,
                      const std::vector<double>& w_target, double fee_rate) {
    if (account.realistic) throw std::invalid_argument("step_idealized: account is in realistic mode");
    const double growth = growth_factor(account.weights, u);
    const std::vector<double> drifted = drift_weights(account.weights, u);
    const double cbar = cost_factor(drifted, w_target, fee_rate);
    account.value *= growth * cbar;
    account.weights = w_target;
    return std::log(cbar * growth);
}

std::vector<Order> rebalance_orders(const AccountState& account, const std::vector<double>& w_target,
                                    const std::vector<double>& prices) {
    if (!account.realistic) throw std::invalid_argument("rebalance_orders: account is in idealized mode");
    const double value = account.mark_to_market(prices);
    std::vector<Order> orders;
    for (std::size_t a = 1; a < w_target.size(); ++a) {
        if (prices[a] <= 0.0) throw std::invalid_argument("rebalance_orders: non-positive price");
        const auto target = static_cast<std::int64_t>(std::floor(w_target[a] * value / prices[a]));
        const std::int64_t delta = target - account.shares[a];
        if (delta != 0) orders.push_back(Order{a, delta});
    }
    return orders;
}

std::vector<Fill> execute(AccountState& account, const std::vector<Order>& orders,
                          const std::vector<double>& open_prices, const ExecutionConfig& config,
                          std::size_t bar) {
    std::vector<Fill> fills;
    auto run_side = [&](bool sells) {
        for (const Order& order : orders) {
            if (sells != (order.quantity < 0)) continue;
            const double open = open_prices[order.asset];
            if (order.quantity < 0) {
                const double price = open * (1.0 - config.slippage_rate);
                std::int64_t qty = -order.quantity;
                qty = std::min(qty, account.shares[order.asset]);  // no shorting
                if (qty == 0) continue;
                const double notional = static_cast<double>(qty) * price;
                const double fee = config.fee_rate * notional;
                account.cash += notional - fee;
                account.shares[order.asset] -= qty;
                fills.push_back(Fill{bar, order.asset, -qty, price, fee, qty != -order.quantity});
            } else {
                const double price = open * (1.0 + config.slippage_rate);
                std::int64_t qty = order.quantity;
                const double unit_cost = price * (1.0 + config.fee_rate);
                if (static_cast<double>(qty) * unit_cost > account.cash) {
                    qty = static_cast<std::int64_t>(std::floor(account.cash / unit_cost));
                }
                if (qty <= 0) {
                    if (order.quantity > 0)
                        fills.push_back(Fill{bar, order.asset, 0, price, 0.0, true});
                    continue;
                }
                const double notional = static_cast<double>(qty) * price;
                const double fee = config.fee_rate * notional;
                account.cash -= notional + fee;
                account.shares[order.asset] += qty;
                fills.push_back(Fill{bar, order.asset, qty, price, fee, qty != order.quantity});
            }
        }
    };
    run_side(true);   // sells raise cash first
    run_side(false);
    return fills;
}

namespace {

BacktestResult run_loop(const Policy& policy, const EpisodeSlice& slice, const BacktestOptions& options) {
    const AlignedDataset& data = *slice.data;
    const ExecutionConfig& cfg = options.exec;
    if (slice.start + 1 < options.k2) throw std::invalid_argument("run_backtest: slice start lacks tensor history");
    if (slice.start + slice.length >= data.size() + 1)
        throw std::invalid_argument("run_backtest: slice runs past the dataset");
    const std::size_t n_assets = data.num_assets();
    const bool realistic = cfg.mode == ExecutionConfig::Mode::Realistic;

    AccountState account;
    account.realistic = realistic;
    account.value = cfg.initial_cash;
    account.weights.assign(n_assets, 0.0);
    account.weights[0] = 1.0;
    account.cash = cfg.initial_cash;
    account.shares.assign(n_assets, 0);

    BacktestResult result;
    result.equity.push_back(cfg.initial_cash);

    struct Pending {
        std::size_t due = 0;
        std::vector<Order> orders;
    };
    std::vector<Pending> pending;

    std::vector<double> current_target = account.weights;
    const std::size_t end = slice.start + slice.length;
    for (std::size_t t = slice.start; t < end; ++t) {
        std::vector<double> prediction;
        if (options.prediction) prediction = options.prediction->step(data.pct_change_vector(t));

        const bool decide = (t - slice.start) % cfg.decision_period == 0;
        if (decide) {
            DecisionContext ctx;
            ctx.t = t;
            ctx.data = &data;
            ctx.tensor = build_price_tensor(data, t, options.k2);
            if (realistic) {
                std::vector<double> prices(n_assets, 1.0);
                for (std::size_t a = 1; a < n_assets; ++a) prices[a] = data.close[a][t];
                const double value = account.mark_to_market(prices);
                ctx.weights.assign(n_assets, 0.0);
                for (std::size_t a = 1; a < n_assets; ++a)
                    ctx.weights[a] = static_cast<double>(account.shares[a]) * prices[a] / value;
                ctx.weights[0] = account.cash / value;
            } else {
                ctx.weights = account.weights;
            }
            ctx.prediction = std::move(prediction);
            ctx.index_ratio = t > 0 ? data.index_close[t] / data.index_close[t - 1] : 1.0;
            std::vector<double> target = policy(ctx);
            if (target.size() != n_assets) throw std::invalid_argument("policy returned wrong weight count");
            validate_simplex(target);
            current_target = target;
            if (realistic) {
                std::vector<double> decision_prices(n_assets, 1.0);
                for (std::size_t a = 1; a < n_assets; ++a) decision_prices[a] = data.close[a][t];
                Pending p;
                p.due = t + cfg.execution_period;
                p.orders = rebalance_orders(account, target, decision_prices);
                if (!p.orders.empty()) pending.push_back(std::move(p));
            }
        }
        result.weight_history.push_back(current_target);

        // advance to bar t+1
        const std::vector<double> u = data.relative_vector(t + 1);
        if (realistic) {
            const double prev_value = account.mark_to_market(
                [&] {
                    std::vector<double> p(n_assets, 1.0);
                    for (std::size_t a = 1; a < n_assets; ++a) p[a] = data.close[a][t];
                    return p;
                }());
            // execute due orders at the next bar's open
            for (auto it = pending.begin(); it != pending.end();) {
                if (it->due == t + 1) {
                    std::vector<double> open_prices(n_assets, 1.0);
                    for (std::size_t a = 1; a < n_assets; ++a) open_prices[a] = data.open[a][t + 1];
                    auto fills = execute(account, it->orders, open_prices, cfg, t + 1);
                    result.fills.insert(result.fills.end(), fills.begin(), fills.end());
                    it = pending.erase(it);
                } else {
                    ++it;
                }
            }
            std::vector<double> close_prices(n_assets, 1.0);
            for (std::size_t a = 1; a < n_assets; ++a) close_prices[a] = data.close[a][t + 1];
            account.value = account.mark_to_market(close_prices);
            result.rewards.push_back(std::log(account.value / prev_value));
        } else {
            // Rebalance at the decision bar, then ride the move with the new
            // weights; non-decision bars drift without trading.
            double cbar = 1.0;
            if (decide) {
                cbar = cost_factor(account.weights, current_target, cfg.fee_rate);
                account.weights = current_target;
            }
            const double growth = growth_factor(account.weights, u);
            account.value *= cbar * growth;
            account.weights = drift_weights(account.weights, u);
            result.rewards.push_back(std::log(cbar * growth));
        }
        result.equity.push_back(account.value);
    }

    ReturnSeries rs{result.rewards, cfg.periods_per_year};
    result.metrics = compute_metrics(result.equity, rs);
    return result;
}

}  // namespace

BacktestResult run_backtest(const Policy& policy, const EpisodeSlice& slice,
                            const BacktestOptions& options) {
    return run_loop(policy, slice, options);
}

BacktestResult run_crp(const EpisodeSlice& slice, const BacktestOptions& options) {
    if (slice.length < 1) throw std::invalid_argument("run_crp: need at least one step");
    const std::size_t n = slice.data->num_assets();
    const std::vector<double> uniform(n, 1.0 / static_cast<double>(n));
    return run_loop([&uniform](const DecisionContext&) { return uniform; }, slice, options);
}

}  // namespace portrl
