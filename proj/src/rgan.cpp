#include "portrl/rgan.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "portrl/checkpoint.hpp"

namespace portrl {

double RbfKernel::operator()(const std::vector<double>& x, const std::vector<double>& y) const {
    double sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) sq += (x[i] - y[i]) * (x[i] - y[i]);
    return std::exp(-sq / (2.0 * sigma * sigma));
}

double median_bandwidth(const std::vector<std::vector<double>>& samples_a,
                        const std::vector<std::vector<double>>& samples_b) {
    std::vector<const std::vector<double>*> pool;
    for (const auto& s : samples_a) pool.push_back(&s);
    for (const auto& s : samples_b) pool.push_back(&s);
    if (pool.size() < 2) throw std::invalid_argument("median_bandwidth: need at least 2 pooled points");
    std::vector<double> dists;
    dists.reserve(pool.size() * (pool.size() - 1) / 2);
    for (std::size_t i = 0; i < pool.size(); ++i) {
        for (std::size_t j = i + 1; j < pool.size(); ++j) {
            double sq = 0.0;
            for (std::size_t k = 0; k < pool[i]->size(); ++k) {
                const double d = (*pool[i])[k] - (*pool[j])[k];
                sq += d * d;
            }
            dists.push_back(std::sqrt(sq));
        }
    }
    std::sort(dists.begin(), dists.end());
    const std::size_t n = dists.size();
    const double median = n % 2 == 1 ? dists[n / 2] : 0.5 * (dists[n / 2 - 1] + dists[n / 2]);
    return median > 0.0 ? median : 1.0;
}

double mmd2_biased(const std::vector<std::vector<double>>& x,
                   const std::vector<std::vector<double>>& y, const RbfKernel& kernel) {
    if (x.empty() || y.empty()) throw std::invalid_argument("mmd2_biased: empty sample set");
    const double m = static_cast<double>(x.size());
    const double n = static_cast<double>(y.size());
    double xx = 0.0, yy = 0.0, xy = 0.0;
    for (const auto& a : x)
        for (const auto& b : x) xx += kernel(a, b);
    for (const auto& a : y)
        for (const auto& b : y) yy += kernel(a, b);
    for (const auto& a : x)
        for (const auto& b : y) xy += kernel(a, b);
    return xx / (m * m) - 2.0 * xy / (m * n) + yy / (n * n);
}

double mmd2_unbiased(const std::vector<std::vector<double>>& x,
                     const std::vector<std::vector<double>>& y, const RbfKernel& kernel) {
    if (x.size() < 2 || y.size() < 2) throw std::invalid_argument("mmd2_unbiased: need at least 2 samples per set");
    const double m = static_cast<double>(x.size());
    const double n = static_cast<double>(y.size());
    double xx = 0.0, yy = 0.0, xy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = 0; j < x.size(); ++j)
            if (i != j) xx += kernel(x[i], x[j]);
    for (std::size_t i = 0; i < y.size(); ++i)
        for (std::size_t j = 0; j < y.size(); ++j)
            if (i != j) yy += kernel(y[i], y[j]);
    for (const auto& a : x)
        for (const auto& b : y) xy += kernel(a, b);
    return xx / (m * (m - 1.0)) - 2.0 * xy / (m * n) + yy / (n * (n - 1.0));
}

GanPair::GanPair(int asset, const GanConfig& cfg, Rng& rng) : asset_id(asset), config(cfg) {
    gen_lstm = make_lstm(gen_params, "gen.lstm", cfg.noise_dim, cfg.hidden, rng);
    gen_out = make_dense(gen_params, "gen.out", cfg.hidden, 1, rng);
    disc_lstm = make_lstm(disc_params, "disc.lstm", 1, cfg.hidden, rng);
    disc_out = make_dense(disc_params, "disc.out", cfg.hidden, 1, rng);
}

void GanPair::rebind() {
    gen_lstm.wx = gen_params.find("gen.lstm.wx");
    gen_lstm.wh = gen_params.find("gen.lstm.wh");
    gen_lstm.b = gen_params.find("gen.lstm.b");
    gen_lstm.in = config.noise_dim;
    gen_lstm.hidden = config.hidden;
    gen_out.w = gen_params.find("gen.out.w");
    gen_out.b = gen_params.find("gen.out.b");
    disc_lstm.wx = disc_params.find("disc.lstm.wx");
    disc_lstm.wh = disc_params.find("disc.lstm.wh");
    disc_lstm.b = disc_params.find("disc.lstm.b");
    disc_lstm.in = 1;
    disc_lstm.hidden = config.hidden;
    disc_out.w = disc_params.find("disc.out.w");
    disc_out.b = disc_params.find("disc.out.b");
}

GanPair::GanPair(const GanPair& other)
    : asset_id(other.asset_id), config(other.config), gen_params(other.gen_params),
      disc_params(other.disc_params), trained(other.trained) {
    rebind();
}

GanPair& GanPair::operator=(const GanPair& other) {
    if (this != &other) {
        asset_id = other.asset_id;
        config = other.config;
        gen_params = other.gen_params;
        disc_params = other.disc_params;
        trained = other.trained;
        rebind();
    }
    return *this;
}

GanPair::GanPair(GanPair&& other) noexcept
    : asset_id(other.asset_id), config(other.config), gen_params(std::move(other.gen_params)),
      disc_params(std::move(other.disc_params)), trained(other.trained) {
    rebind();
}

GanPair& GanPair::operator=(GanPair&& other) noexcept {
    if (this != &other) {
        asset_id = other.asset_id;
        config = other.config;
        gen_params = std::move(other.gen_params);
        disc_params = std::move(other.disc_params);
        trained = other.trained;
        rebind();
    }
    return *this;
}

NodeId GanPair::generator_forward(Graph& g, NodeId noise) const {
    NodeId h = g.lstm_sequence(noise, *gen_lstm.wx, *gen_lstm.wh, *gen_lstm.b);
    NodeId out = seq_dense_forward(g, h, gen_out);  // (k1, B, 1)
    return g.time_concat(out);                      // (B, k1)
}

NodeId GanPair::discriminator_forward(Graph& g, NodeId series) const {
    const Tensor& s = g.value(series);
    const std::size_t b = s.shape[0], t = s.shape[1];
    NodeId seq_in = g.reshape(g.transpose(series), {t, b, 1});
    NodeId h = g.lstm_sequence(seq_in, *disc_lstm.wx, *disc_lstm.wh, *disc_lstm.b);
    NodeId flat = g.time_concat(h);  // (B, k1*hidden)
    NodeId last = g.slice_cols(flat, (t - 1) * disc_lstm.hidden, t * disc_lstm.hidden);
    return g.sigmoid_(dense_forward(g, last, disc_out));
}

Tensor GanPair::sample_noise(std::size_t batch, Rng& rng) const {
    Tensor z({config.k1, batch, config.noise_dim});
    for (double& e : z.v) e = rng.normal();
    return z;
}

Tensor GanPair::generate(std::size_t batch, Rng& rng) const {
    Graph g;
    NodeId out = generator_forward(g, g.constant(sample_noise(batch, rng)));
    return g.value(out);
}

nlohmann::json GanPair::to_json() const {
    nlohmann::json j;
    j["asset_id"] = asset_id;
    j["k1"] = config.k1;
    j["noise_dim"] = config.noise_dim;
    j["hidden"] = config.hidden;
    j["zeta"] = config.zeta;
    j["downsample_factor"] = config.downsample_factor;
    j["trained"] = trained;
    j["generator"] = params_to_json(gen_params);
    j["discriminator"] = params_to_json(disc_params);
    return j;
}

void GanPair::from_json(const nlohmann::json& j) {
    params_from_json(gen_params, j.at("generator"));
    params_from_json(disc_params, j.at("discriminator"));
    trained = j.value("trained", true);
}

NodeId mmd2_unbiased_node(Graph& g, NodeId x, NodeId y, double sigma) {
    const std::size_t m = g.value(x).shape[0];
    const std::size_t n = g.value(y).shape[0];
    if (m < 2 || n < 2) throw std::invalid_argument("mmd2_unbiased_node: need at least 2 samples per set");
    const double inv = -1.0 / (2.0 * sigma * sigma);
    auto sq_dists = [&](NodeId a, NodeId b) {
        NodeId ra = g.rowwise_sum(g.mul(a, a));                       // (M,1)
        NodeId rb = g.rowwise_sum(g.mul(b, b));                       // (N,1)
        NodeId cross = g.scale(g.matmul_nt(a, b), -2.0);              // (M,N)
        return g.add_rowvec(g.add_colvec(cross, ra), g.reshape(rb, {1, g.value(b).shape[0]}));
    };
    auto offdiag_mask = [&](std::size_t k) {
        Tensor mask({k, k});
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) mask.v[i * k + j] = i == j ? 0.0 : 1.0;
        return g.constant(std::move(mask));
    };
    NodeId kxx = g.exp_(g.scale(sq_dists(x, x), inv));
    NodeId kyy = g.exp_(g.scale(sq_dists(y, y), inv));
    NodeId kxy = g.exp_(g.scale(sq_dists(x, y), inv));
    NodeId xx = g.sum_all(g.mul(kxx, offdiag_mask(m)));
    NodeId yy = g.sum_all(g.mul(kyy, offdiag_mask(n)));
    NodeId xy = g.sum_all(kxy);
    const double dm = static_cast<double>(m), dn = static_cast<double>(n);
    NodeId within = g.add(g.scale(xx, 1.0 / (dm * (dm - 1.0))), g.scale(yy, 1.0 / (dn * (dn - 1.0))));
    return g.sub(within, g.scale(xy, 2.0 / (dm * dn)));
}

namespace {

NodeId disc_loss_node(Graph& g, const GanPair& pair, NodeId real, NodeId fake) {
    const std::size_t b = g.value(real).shape[0];
    NodeId p_real = pair.discriminator_forward(g, real);
    NodeId p_fake = pair.discriminator_forward(g, fake);
    NodeId ones = g.constant(Tensor::full({b, 1}, 1.0));
    NodeId zeros = g.constant(Tensor({b, 1}));
    return g.add(g.bce_loss(p_real, ones), g.bce_loss(p_fake, zeros));
}

NodeId gen_loss_node(Graph& g, const GanPair& pair, NodeId real, NodeId fake, double sigma) {
    const std::size_t b = g.value(fake).shape[0];
    NodeId p_fake = pair.discriminator_forward(g, fake);
    NodeId zeros = g.constant(Tensor({b, 1}));
    // (1/b) sum log(1 - D(G(z))) = -bce(p_fake, 0)
    NodeId adv = g.scale(g.bce_loss(p_fake, zeros), -1.0);
    if (pair.config.zeta == 0.0) return adv;
    NodeId mmd = mmd2_unbiased_node(g, real, fake, sigma);
    return g.add(adv, g.scale(mmd, pair.config.zeta));
}

}  // namespace

GanStepLosses gan_losses(const GanPair& pair, const Tensor& real_batch, const Tensor& noise_batch,
                         double sigma) {
    if (real_batch.shape[0] < 2) throw std::invalid_argument("gan_losses: batch must have at least 2 samples");
    GanStepLosses out;
    {
        Graph g;
        NodeId real = g.constant(real_batch);
        NodeId fake = pair.generator_forward(g, g.constant(noise_batch));
        out.disc_loss = g.value(disc_loss_node(g, pair, real, fake)).v[0];
        out.gen_loss = g.value(gen_loss_node(g, pair, real, fake, sigma)).v[0];
    }
    return out;
}

double disc_loss_backward(GanPair& pair, const Tensor& real_batch, const Tensor& noise_batch) {
    Graph g;
    NodeId real = g.constant(real_batch);
    // generator output re-enters as a constant: no generator gradients needed
    Tensor fake_values;
    {
        Graph gg;
        fake_values = gg.value(pair.generator_forward(gg, gg.constant(noise_batch)));
    }
    NodeId fake = g.constant(std::move(fake_values));
    NodeId loss = disc_loss_node(g, pair, real, fake);
    g.backward(loss);
    return g.value(loss).v[0];
}

double gen_loss_backward(GanPair& pair, const Tensor& real_batch, const Tensor& noise_batch,
                         double sigma) {
    Graph g;
    NodeId real = g.constant(real_batch);
    NodeId fake = pair.generator_forward(g, g.constant(noise_batch));
    NodeId loss = gen_loss_node(g, pair, real, fake, sigma);
    g.backward(loss);
    // the discriminator is fixed during the generator step
    pair.disc_params.zero_grad();
    return g.value(loss).v[0];
}

GanPair train_rgan(int asset_id, const std::vector<double>& pct_series, const GanConfig& config,
                   Rng& rng) {
    if (pct_series.size() < config.k1 + 1)
        throw std::invalid_argument("train_rgan: series too short to cut two windows");
    GanPair pair(asset_id, config, rng);
    const std::size_t num_windows = pct_series.size() - config.k1 + 1;

    Optimizer disc_opt(OptKind::Adam, config.learning_rate);
    Optimizer gen_opt(OptKind::Adam, config.learning_rate);

    Tensor real({config.batch, config.k1});
    for (std::size_t step = 0; step < config.train_steps; ++step) {
        for (std::size_t i = 0; i < config.batch; ++i) {
            const std::size_t w = rng.uniform_int(num_windows);
            for (std::size_t j = 0; j < config.k1; ++j) real.at(i, j) = pct_series[w + j];
        }
        const Tensor noise = pair.sample_noise(config.batch, rng);
        disc_loss_backward(pair, real, noise);
        disc_opt.step(pair.disc_params);
        pair.disc_params.zero_grad();
        pair.gen_params.zero_grad();

        const Tensor noise2 = pair.sample_noise(config.batch, rng);
        // median-heuristic bandwidth over the pooled joint batch
        Tensor fake;
        {
            Graph g;
            fake = g.value(pair.generator_forward(g, g.constant(noise2)));
        }
        std::vector<std::vector<double>> real_rows, fake_rows;
        for (std::size_t i = 0; i < config.batch; ++i) {
            real_rows.emplace_back(real.v.begin() + i * config.k1, real.v.begin() + (i + 1) * config.k1);
            fake_rows.emplace_back(fake.v.begin() + i * config.k1, fake.v.begin() + (i + 1) * config.k1);
        }
        const double sigma = median_bandwidth(real_rows, fake_rows);
        gen_loss_backward(pair, real, noise2, sigma);
        gen_opt.step(pair.gen_params);
        pair.gen_params.zero_grad();
        pair.disc_params.zero_grad();
    }
    pair.trained = true;
    return pair;
}

std::vector<HlcChange> downsample_to_hlc(const std::vector<double>& fine_changes, std::size_t factor) {
    if (factor < 1) throw std::invalid_argument("downsample_to_hlc: factor must be >= 1");
    if (fine_changes.size() % factor != 0)
        throw std::invalid_argument("downsample_to_hlc: length not divisible by factor");
    std::vector<HlcChange> out;
    out.reserve(fine_changes.size() / factor);
    for (std::size_t g = 0; g < fine_changes.size(); g += factor) {
        double cum = 1.0;
        double hi = 1.0, lo = 1.0;  // the opening level participates
        for (std::size_t i = 0; i < factor; ++i) {
            const double f = 1.0 + fine_changes[g + i];
            if (f <= 0.0) throw std::invalid_argument("downsample_to_hlc: change at or below -100%");
            cum *= f;
            hi = std::max(hi, cum);
            lo = std::min(lo, cum);
        }
        out.push_back(HlcChange{cum - 1.0, hi - 1.0, lo - 1.0});
    }
    return out;
}

KsResult ks_two_sample(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("ks_two_sample: empty sample");
    std::vector<double> sa = a, sb = b;
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    const double na = static_cast<double>(sa.size()), nb = static_cast<double>(sb.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < sa.size() && j < sb.size()) {
        const double x = std::min(sa[i], sb[j]);
        while (i < sa.size() && sa[i] <= x) ++i;
        while (j < sb.size() && sb[j] <= x) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
    }
    KsResult r;
    r.d = d;
    const double ne = na * nb / (na + nb);
    const double lambda = std::sqrt(ne) * d;
    // asymptotic Kolmogorov distribution Q(lambda), truncated at k = 100;
    // below ~0.02 the truncated alternating series has not converged and the
    // true value is 1 to machine precision
    if (lambda < 0.02) {
        r.p = 1.0;
    } else {
        double q = 0.0;
        for (int k = 1; k <= 100; ++k) {
            const double term = 2.0 * std::exp(-2.0 * k * k * lambda * lambda);
            q += (k % 2 == 1) ? term : -term;
        }
        r.p = std::clamp(q, 0.0, 1.0);
    }
    return r;
}

double ks_validate(const std::vector<std::vector<double>>& generated,
                   const std::vector<std::vector<double>>& holdout) {
    if (generated.empty() || holdout.empty()) throw std::invalid_argument("ks_validate: empty inputs");
    double sum = 0.0;
    for (const auto& gen : generated) {
        double pmax = 0.0;
        for (const auto& real : holdout) pmax = std::max(pmax, ks_two_sample(gen, real).p);
        sum += pmax;
    }
    return sum / static_cast<double>(generated.size());
}

SyntheticEpisode augment_episode(const std::vector<GanPair>& pairs, std::size_t horizon, Rng& rng) {
    SyntheticEpisode out;
    out.per_asset.resize(pairs.size());
    if (horizon == 0) return out;
    for (std::size_t idx = 0; idx < pairs.size(); ++idx) {
        const GanPair& pair = pairs[idx];
        if (!pair.trained) throw std::invalid_argument("augment_episode: untrained generator for asset " +
                                                       std::to_string(pair.asset_id));
        const std::size_t factor = pair.config.downsample_factor;
        const std::size_t fine_needed = horizon * factor;
        const std::size_t windows = (fine_needed + pair.config.k1 - 1) / pair.config.k1;
        const Tensor batch = pair.generate(windows, rng);  // (windows, k1)
        std::vector<double> fine;
        fine.reserve(fine_needed);
        for (std::size_t w = 0; w < windows && fine.size() < fine_needed; ++w)
            for (std::size_t j = 0; j < pair.config.k1 && fine.size() < fine_needed; ++j) {
                // clamp pathological early-training outputs away from -100%
                fine.push_back(std::max(batch.at(w, j), -0.5));
            }
        out.per_asset[idx] = downsample_to_hlc(fine, factor);
    }
    return out;
}

}  // namespace portrl
