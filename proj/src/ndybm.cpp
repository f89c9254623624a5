#include "portrl/ndybm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "portrl/checkpoint.hpp"

namespace portrl {

namespace {

// Largest-eigenvalue magnitude estimate via normalized power iteration.
double spectral_radius_estimate(const Tensor& w, std::size_t m, Rng& rng) {
    std::vector<double> v(m);
    for (double& e : v) e = rng.normal();
    double growth = 1.0;
    std::vector<double> next(m);
    for (int it = 0; it < 200; ++it) {
        double norm = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) s += w.v[i * m + j] * v[j];
            next[i] = s;
            norm += s * s;
        }
        norm = std::sqrt(norm);
        if (norm == 0.0) return 0.0;
        for (std::size_t i = 0; i < m; ++i) v[i] = next[i] / norm;
        if (it >= 150) growth = 0.98 * growth + 0.02 * norm;  // settle on the tail
        if (it == 150) growth = norm;
    }
    return growth;
}

// Solves the small symmetric system in place (Gaussian elimination with
// partial pivoting); used for the polynomial fits.
std::vector<double> solve_dense(std::vector<std::vector<double>> a, std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        std::swap(a[col], a[piv]);
        std::swap(b[col], b[piv]);
        if (std::abs(a[col][col]) < 1e-14) throw std::runtime_error("singular polynomial fit system");
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a[r][col] / a[col][col];
            for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
            b[r] -= f * b[col];
        }
    }
    for (std::size_t i = 0; i < n; ++i) b[i] /= a[i][i];
    return b;
}

// Least-squares polynomial fit of the window values; returns the fitted
// values at the requested offsets. Offsets are relative to the window start.
std::vector<double> polyfit_eval(const std::vector<double>& window_vals, std::size_t order,
                                 const std::vector<double>& eval_offsets) {
    const std::size_t w = window_vals.size();
    const std::size_t p = order + 1;
    std::vector<std::vector<double>> ata(p, std::vector<double>(p, 0.0));
    std::vector<double> atb(p, 0.0);
    for (std::size_t i = 0; i < w; ++i) {
        double powj = 1.0;
        std::vector<double> row(p);
        for (std::size_t j = 0; j < p; ++j) {
            row[j] = powj;
            powj *= static_cast<double>(i);
        }
        for (std::size_t j = 0; j < p; ++j) {
            atb[j] += row[j] * window_vals[i];
            for (std::size_t k = 0; k < p; ++k) ata[j][k] += row[j] * row[k];
        }
    }
    const std::vector<double> coef = solve_dense(std::move(ata), std::move(atb));
    std::vector<double> out;
    out.reserve(eval_offsets.size());
    for (double x : eval_offsets) {
        double acc = 0.0, powj = 1.0;
        for (std::size_t j = 0; j < p; ++j) {
            acc += coef[j] * powj;
            powj *= x;
        }
        out.push_back(acc);
    }
    return out;
}

}  // namespace

std::vector<double> savgol_center_coefficients(std::size_t window, std::size_t order) {
    if (window % 2 == 0 || window <= order) throw std::invalid_argument("savgol: window must be odd and > order");
    const std::size_t half = window / 2;
    std::vector<double> coefs(window);
    // fitted value at the center is linear in the inputs; extract each weight
    // by fitting a unit impulse
    for (std::size_t i = 0; i < window; ++i) {
        std::vector<double> impulse(window, 0.0);
        impulse[i] = 1.0;
        coefs[i] = polyfit_eval(impulse, order, {static_cast<double>(half)})[0];
    }
    return coefs;
}

std::vector<std::vector<double>> smooth_inputs(const std::vector<std::vector<double>>& series,
                                               double noise_sd, std::size_t window, std::size_t order,
                                               Rng& rng) {
    if (window % 2 == 0 || window <= order) throw std::invalid_argument("smooth_inputs: window must be odd and > order");
    if (series.size() < window) throw std::invalid_argument("smooth_inputs: series shorter than window");
    const std::size_t t_len = series.size();
    const std::size_t dims = series[0].size();
    std::vector<std::vector<double>> noisy = series;
    if (noise_sd > 0.0) {
        for (auto& step : noisy)
            for (double& e : step) e += noise_sd * rng.normal();
    }
    const std::vector<double> center = savgol_center_coefficients(window, order);
    const std::size_t half = window / 2;
    std::vector<std::vector<double>> out(t_len, std::vector<double>(dims, 0.0));
    std::vector<double> col(t_len);
    for (std::size_t d = 0; d < dims; ++d) {
        for (std::size_t t = 0; t < t_len; ++t) col[t] = noisy[t][d];
        for (std::size_t t = half; t + half < t_len; ++t) {
            double acc = 0.0;
            for (std::size_t j = 0; j < window; ++j) acc += center[j] * col[t - half + j];
            out[t][d] = acc;
        }
        // terminal windows: polynomial fit evaluated at the edge offsets
        std::vector<double> head(col.begin(), col.begin() + window);
        std::vector<double> offsets;
        for (std::size_t i = 0; i < half; ++i) offsets.push_back(static_cast<double>(i));
        const auto head_fit = polyfit_eval(head, order, offsets);
        for (std::size_t i = 0; i < half; ++i) out[i][d] = head_fit[i];
        std::vector<double> tail(col.end() - window, col.end());
        offsets.clear();
        for (std::size_t i = 0; i < half; ++i) offsets.push_back(static_cast<double>(window - half + i));
        const auto tail_fit = polyfit_eval(tail, order, offsets);
        for (std::size_t i = 0; i < half; ++i) out[t_len - half + i][d] = tail_fit[i];
    }
    return out;
}

Ndybm::Ndybm(const NdybmConfig& config, Rng& rng)
    : config_(config), n_(3 * config.num_assets),
      optimizer_(OptKind::RmsProp, config.learning_rate, /*clip_norm=*/0.0) {
    if (config.num_assets == 0) throw std::invalid_argument("ndybm: need at least one asset");
    if (config.delay < 2) throw std::invalid_argument("ndybm: delay must be >= 2");
    if (config.decay.empty()) throw std::invalid_argument("ndybm: need at least one decay rate");
    const std::size_t m_rnn = config.rnn_units;

    params.add("b", Tensor({n_}));
    for (std::size_t d = 1; d < config.delay; ++d)
        params.add("f" + std::to_string(d), Tensor({n_, n_}));
    for (std::size_t k = 0; k < config.decay.size(); ++k)
        params.add("g" + std::to_string(k + 1), Tensor({n_, n_}));
    params.add("a", Tensor({m_rnn, n_}));
    Tensor ls({n_});
    for (double& e : ls.v) e = std::log(config.sigma2_init);
    params.add("log_sigma2", std::move(ls));

    w_rnn = Tensor({m_rnn, m_rnn});
    for (double& e : w_rnn.v) e = rng.normal();
    const double radius = spectral_radius_estimate(w_rnn, m_rnn, rng);
    if (radius > 0.0) {
        const double scale = config.spectral_radius / radius;
        for (double& e : w_rnn.v) e *= scale;
    }
    w_in = Tensor({m_rnn, n_});
    for (double& e : w_in.v) e = rng.normal(0.0, 0.1);
    psi.assign(m_rnn, 0.0);
    fifo.assign(config.delay - 1, std::vector<double>(n_, 0.0));
    traces.assign(config.decay.size(), std::vector<double>(n_, 0.0));
}

std::vector<double> Ndybm::mu() const {
    const Param& b = *params.find("b");
    std::vector<double> out(b.value.v.begin(), b.value.v.end());
    for (std::size_t d = 1; d < config_.delay; ++d) {
        const Tensor& f = params.find("f" + std::to_string(d))->value;
        const std::vector<double>& x = fifo[d - 1];
        for (std::size_t j = 0; j < n_; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < n_; ++i) s += f.v[j * n_ + i] * x[i];
            out[j] += s;
        }
    }
    for (std::size_t k = 0; k < traces.size(); ++k) {
        const Tensor& g = params.find("g" + std::to_string(k + 1))->value;
        for (std::size_t j = 0; j < n_; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < n_; ++i) s += g.v[j * n_ + i] * traces[k][i];
            out[j] += s;
        }
    }
    return out;
}

std::vector<double> Ndybm::sigma2() const {
    const Tensor& ls = params.find("log_sigma2")->value;
    std::vector<double> out(n_);
    for (std::size_t j = 0; j < n_; ++j) out[j] = std::exp(ls.v[j]);
    return out;
}

PredictionTriplet Ndybm::reshape_prediction(const std::vector<double>& flat) const {
    const std::size_t m = config_.num_assets;
    PredictionTriplet out;
    out.close.assign(flat.begin(), flat.begin() + m);
    out.high.assign(flat.begin() + m, flat.begin() + 2 * m);
    out.low.assign(flat.begin() + 2 * m, flat.begin() + 3 * m);
    return out;
}

Ndybm::Gradients Ndybm::compute_gradients(const std::vector<double>& x_t) const {
    if (x_t.size() != n_) throw std::invalid_argument("ndybm: observation length mismatch");
    const std::vector<double> mean = mu();
    const std::vector<double> var = sigma2();
    Gradients g;
    g.b = Tensor({n_});
    g.log_sigma2 = Tensor({n_});
    std::vector<double> resid(n_);
    for (std::size_t j = 0; j < n_; ++j) {
        resid[j] = (x_t[j] - mean[j]) / var[j];
        g.b.v[j] = resid[j];
        // d logp / d log(sigma^2) = ((x-mu)^2 - sigma^2) / (2 sigma^2)
        const double sq = (x_t[j] - mean[j]) * (x_t[j] - mean[j]);
        g.log_sigma2.v[j] = (sq - var[j]) / (2.0 * var[j]);
    }
    for (std::size_t d = 1; d < config_.delay; ++d) {
        Tensor gf({n_, n_});
        const std::vector<double>& x = fifo[d - 1];
        for (std::size_t j = 0; j < n_; ++j)
            for (std::size_t i = 0; i < n_; ++i) gf.v[j * n_ + i] = resid[j] * x[i];
        g.f.push_back(std::move(gf));
    }
    for (std::size_t k = 0; k < traces.size(); ++k) {
        Tensor gg({n_, n_});
        for (std::size_t j = 0; j < n_; ++j)
            for (std::size_t i = 0; i < n_; ++i) gg.v[j * n_ + i] = resid[j] * traces[k][i];
        g.g.push_back(std::move(gg));
    }
    const std::size_t m_rnn = config_.rnn_units;
    g.a = Tensor({m_rnn, n_});
    for (std::size_t l = 0; l < m_rnn; ++l)
        for (std::size_t j = 0; j < n_; ++j) g.a.v[l * n_ + j] = psi[l] * resid[j];
    return g;
}

void Ndybm::update_parameters(const std::vector<double>& x_t) {
    const Gradients g = compute_gradients(x_t);
    const bool finite = all_finite(g.b) && all_finite(g.log_sigma2) && all_finite(g.a) &&
                        std::all_of(g.f.begin(), g.f.end(), [](const Tensor& t) { return all_finite(t); }) &&
                        std::all_of(g.g.begin(), g.g.end(), [](const Tensor& t) { return all_finite(t); });
    if (!finite) throw std::runtime_error("ndybm: non-finite gradient, step aborted");
    // ascent: the optimizer minimizes, so feed negated gradients
    auto load = [&](const std::string& name, const Tensor& grad) {
        Param* p = params.find(name);
        for (std::size_t i = 0; i < grad.size(); ++i) p->grad.v[i] = -grad.v[i];
    };
    load("b", g.b);
    load("log_sigma2", g.log_sigma2);
    load("a", g.a);
    for (std::size_t d = 1; d < config_.delay; ++d) load("f" + std::to_string(d), g.f[d - 1]);
    for (std::size_t k = 0; k < traces.size(); ++k) load("g" + std::to_string(k + 1), g.g[k]);
    optimizer_.step(params);
    params.zero_grad();
    // variance floor
    Tensor& ls = params.find("log_sigma2")->value;
    const double floor_log = std::log(config_.sigma2_floor);
    for (double& e : ls.v) e = std::max(e, floor_log);
}

void Ndybm::update_traces(const std::vector<double>& injected) {
    for (std::size_t k = 0; k < traces.size(); ++k) {
        const double lambda = config_.decay[k];
        for (std::size_t j = 0; j < n_; ++j) traces[k][j] = lambda * traces[k][j] + injected[j];
    }
}

void Ndybm::advance_history(const std::vector<double>& x_t) {
    // the vector leaving the FIFO (x[t-d+1]) feeds the traces
    update_traces(fifo.back());
    fifo.pop_back();
    fifo.push_front(x_t);
}

void Ndybm::update_rnn_bias(const std::vector<double>& x_t) {
    const std::size_t m_rnn = config_.rnn_units;
    std::vector<double> next(m_rnn);
    for (std::size_t l = 0; l < m_rnn; ++l) {
        double s = 0.0;
        for (std::size_t j = 0; j < m_rnn; ++j) s += w_rnn.v[l * m_rnn + j] * psi[j];
        for (std::size_t j = 0; j < n_; ++j) s += w_in.v[l * n_ + j] * x_t[j];
        next[l] = std::tanh(s);
    }
    psi = std::move(next);
    Tensor& b = params.find("b")->value;
    const Tensor& a = params.find("a")->value;
    for (std::size_t j = 0; j < n_; ++j) {
        double s = 0.0;
        for (std::size_t l = 0; l < m_rnn; ++l) s += a.v[l * n_ + j] * psi[l];
        b.v[j] += s;
    }
}

void Ndybm::reset_stream() {
    for (auto& x : fifo) std::fill(x.begin(), x.end(), 0.0);
    for (auto& tr : traces) std::fill(tr.begin(), tr.end(), 0.0);
    std::fill(psi.begin(), psi.end(), 0.0);
}

PredictionTriplet Ndybm::step(const std::vector<double>& x_t) {
    const PredictionTriplet prediction = reshape_prediction(mu());
    update_parameters(x_t);
    advance_history(x_t);
    update_rnn_bias(x_t);
    return prediction;
}

nlohmann::json Ndybm::to_json() const {
    nlohmann::json j;
    j["params"] = params_to_json(params);
    j["w_rnn"] = w_rnn.v;
    j["w_in"] = w_in.v;
    j["psi"] = psi;
    j["fifo"] = std::vector<std::vector<double>>(fifo.begin(), fifo.end());
    j["traces"] = traces;
    std::vector<Param*> ordered;
    for (auto& p : const_cast<ParamSet&>(params)) ordered.push_back(&p);
    j["rms"] = optimizer_.export_slots(ordered);
    j["rms_steps"] = optimizer_.step_count();
    return j;
}

void Ndybm::from_json(const nlohmann::json& j) {
    params_from_json(params, j.at("params"));
    w_rnn.v = j.at("w_rnn").get<std::vector<double>>();
    w_in.v = j.at("w_in").get<std::vector<double>>();
    psi = j.at("psi").get<std::vector<double>>();
    const auto fifo_vecs = j.at("fifo").get<std::vector<std::vector<double>>>();
    fifo.assign(fifo_vecs.begin(), fifo_vecs.end());
    traces = j.at("traces").get<std::vector<std::vector<double>>>();
    std::vector<Param*> ordered;
    for (auto& p : params) ordered.push_back(&p);
    optimizer_.import_slots(ordered, j.at("rms").get<std::vector<std::vector<double>>>(),
                            j.at("rms_steps").get<std::int64_t>());
}

}  // namespace portrl
