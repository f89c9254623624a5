#include "portrl/agent.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "portrl/checkpoint.hpp"

namespace portrl {

namespace {

double growth_factor(const std::vector<double>& w, const std::vector<double>& u) {
    double g = 1.0;
    for (std::size_t i = 0; i < u.size(); ++i) g += w[i] * (u[i] - 1.0);
    return g;
}

void emit(const TrainObserver& observer, const char* event) {
    if (observer) observer(event);
}

}  // namespace

AugmentedState make_state(const AlignedDataset& data, std::size_t t, std::size_t k2,
                          std::vector<double> weights, std::vector<double> prediction) {
    const PriceTensor tensor = build_price_tensor(data, t, k2);
    const std::size_t n = tensor.assets();
    AugmentedState s;
    s.fe_input = Tensor({k2, 3 * n});
    const Tensor* mats[3] = {&tensor.close_mat, &tensor.high_mat, &tensor.low_mat};
    for (std::size_t j = 0; j < k2; ++j)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t a = 0; a < n; ++a) s.fe_input.at(j, c * n + a) = mats[c]->at(a, j);
    s.weights = std::move(weights);
    s.prediction = std::move(prediction);
    s.index_ratio = t > 0 ? data.index_close[t] / data.index_close[t - 1] : 1.0;
    return s;
}

PolicyNet::PolicyNet(const AgentConfig& cfg, bool is_critic, std::uint64_t seed)
    : critic(is_critic), dropout_keep_(cfg.dropout_keep) {
    Rng rng(seed);
    const std::size_t f = cfg.feature_dim();
    fe_f1_ = make_lstm(params, "fe1.fwd", f, cfg.fe_hidden1, rng);
    fe_b1_ = make_lstm(params, "fe1.bwd", f, cfg.fe_hidden1, rng);
    fe_f2_ = make_lstm(params, "fe2.fwd", 2 * cfg.fe_hidden1, cfg.fe_hidden2, rng);
    fe_b2_ = make_lstm(params, "fe2.bwd", 2 * cfg.fe_hidden1, cfg.fe_hidden2, rng);
    std::size_t in_dim = cfg.k2 * 2 * cfg.fe_hidden2 + cfg.action_dim() + cfg.prediction_dim() + 1;
    if (is_critic) in_dim += cfg.action_dim();
    for (std::size_t i = 0; i < cfg.fa_sizes.size(); ++i) {
        fa_.push_back(make_dense(params, "fa" + std::to_string(i), in_dim, cfg.fa_sizes[i], rng));
        in_dim = cfg.fa_sizes[i];
    }
    head_ = make_dense(params, "head", in_dim, is_critic ? 1 : cfg.action_dim(), rng);
}

NodeId PolicyNet::forward(Graph& g, NodeId seq, NodeId extras, Rng& dropout_rng, bool train) const {
    NodeId fe1 = bilstm_forward(g, seq, fe_f1_, fe_b1_);
    NodeId fe2 = bilstm_forward(g, fe1, fe_f2_, fe_b2_);
    NodeId x = g.concat_cols({g.time_concat(fe2), extras});
    for (std::size_t i = 0; i < fa_.size(); ++i) {
        x = g.leaky_relu(dense_forward(g, x, fa_[i]));
        if (i + 1 < fa_.size()) x = g.dropout(x, dropout_keep_, dropout_rng, train);
    }
    NodeId out = dense_forward(g, x, head_);
    return critic ? out : g.softmax_rows(out);
}

void ReplayBuffer::push(ReplayItem item) {
    item.priority = max_priority_;
    items_.push_back(std::move(item));
    while (items_.size() > capacity_) items_.pop_front();
}

ReplayBuffer::Sample ReplayBuffer::sample(std::size_t n, double alpha, double beta, Rng& rng) const {
    if (items_.empty()) throw std::invalid_argument("replay sample: empty buffer");
    std::vector<double> prefix(items_.size());
    double total = 0.0;
    for (std::size_t i = 0; i < items_.size(); ++i) {
        total += std::pow(items_[i].priority, alpha);
        prefix[i] = total;
    }
    Sample s;
    s.indices.reserve(n);
    s.is_weights.reserve(n);
    const double size = static_cast<double>(items_.size());
    double max_w = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const double r = rng.uniform() * total;
        const std::size_t idx = static_cast<std::size_t>(
            std::lower_bound(prefix.begin(), prefix.end(), r) - prefix.begin());
        const std::size_t i = std::min(idx, items_.size() - 1);
        s.indices.push_back(i);
        const double p = std::pow(items_[i].priority, alpha) / total;
        const double w = std::pow(1.0 / (size * p), beta);
        s.is_weights.push_back(w);
        max_w = std::max(max_w, w);
    }
    for (double& w : s.is_weights) w /= max_w;
    return s;
}

double noise_distance(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("noise_distance: shape mismatch");
    double sq = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sq += (a.v[i] - b.v[i]) * (a.v[i] - b.v[i]);
    return std::sqrt(sq / static_cast<double>(a.size()));
}

Agent::Agent(const AgentConfig& cfg, std::uint64_t seed)
    : actor(cfg, false, derive_seed(seed, "actor")),
      actor_perturbed(cfg, false, derive_seed(seed, "actor")),
      actor_adaptive(cfg, false, derive_seed(seed, "actor")),
      actor_target(cfg, false, derive_seed(seed, "actor")),
      critic(cfg, true, derive_seed(seed, "critic")),
      critic_target(cfg, true, derive_seed(seed, "critic")),
      cfg_(cfg),
      actor_opt_(OptKind::Sgd, cfg.lr_critic * cfg.actor_lr_ratio),
      critic_opt_(OptKind::Adam, cfg.lr_critic),
      dropout_rng_(derive_seed(seed, "dropout")),
      noise_rng_(derive_seed(seed, "param-noise")) {
    noise_.sigma = cfg.noise_sigma0;
    noise_.alpha = cfg.noise_alpha;
    noise_.delta = cfg.noise_delta;
    actor_perturbed.params.copy_values_from(actor.params);
    actor_adaptive.params.copy_values_from(actor.params);
    actor_target.params.copy_values_from(actor.params);
    critic_target.params.copy_values_from(critic.params);
}

Tensor Agent::actions_batch(const PolicyNet& net, const std::vector<const AugmentedState*>& states,
                            bool train) {
    Graph g;
    const std::size_t n = states.size();
    const std::size_t k2 = cfg_.k2, f = cfg_.feature_dim();
    Tensor seq({k2, n, f});
    Tensor extras({n, cfg_.action_dim() + cfg_.prediction_dim() + 1});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k2; ++j)
            for (std::size_t c = 0; c < f; ++c) seq.v[(j * n + i) * f + c] = states[i]->fe_input.at(j, c);
        std::size_t off = 0;
        for (double w : states[i]->weights) extras.at(i, off++) = w;
        for (double p : states[i]->prediction) extras.at(i, off++) = p;
        extras.at(i, off) = states[i]->index_ratio;
    }
    NodeId out = net.forward(g, g.constant(std::move(seq)), g.constant(std::move(extras)),
                             dropout_rng_, train);
    return g.value(out);
}

Tensor Agent::q_batch(const PolicyNet& net, const std::vector<const AugmentedState*>& states,
                      const Tensor& actions, bool train) {
    Graph g;
    const std::size_t n = states.size();
    const std::size_t k2 = cfg_.k2, f = cfg_.feature_dim();
    Tensor seq({k2, n, f});
    Tensor extras({n, cfg_.action_dim() + cfg_.prediction_dim() + 1 + cfg_.action_dim()});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k2; ++j)
            for (std::size_t c = 0; c < f; ++c) seq.v[(j * n + i) * f + c] = states[i]->fe_input.at(j, c);
        std::size_t off = 0;
        for (double w : states[i]->weights) extras.at(i, off++) = w;
        for (double p : states[i]->prediction) extras.at(i, off++) = p;
        extras.at(i, off++) = states[i]->index_ratio;
        for (std::size_t a = 0; a < cfg_.action_dim(); ++a) extras.at(i, off++) = actions.at(i, a);
    }
    NodeId out = net.forward(g, g.constant(std::move(seq)), g.constant(std::move(extras)),
                             dropout_rng_, train);
    return g.value(out);
}

std::vector<double> Agent::act(const AugmentedState& state) {
    const Tensor a = actions_batch(actor, {&state}, false);
    return a.v;
}

std::vector<double> Agent::act_perturbed(const AugmentedState& state) {
    const Tensor a = actions_batch(actor_perturbed, {&state}, false);
    return a.v;
}

void Agent::refresh_perturbed_actor() {
    actor_perturbed.params.copy_values_from(actor.params);
    perturb_params(actor_perturbed.params, noise_.sigma, noise_rng_);
}

Agent::CriticUpdateResult Agent::critic_update(const std::vector<const AugmentedState*>& states,
                                               const Tensor& actions,
                                               const std::vector<double>& targets,
                                               const std::vector<double>& is_weights) {
    Graph g;
    const std::size_t n = states.size();
    const std::size_t k2 = cfg_.k2, f = cfg_.feature_dim();
    Tensor seq({k2, n, f});
    Tensor extras({n, cfg_.action_dim() + cfg_.prediction_dim() + 1 + cfg_.action_dim()});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k2; ++j)
            for (std::size_t c = 0; c < f; ++c) seq.v[(j * n + i) * f + c] = states[i]->fe_input.at(j, c);
        std::size_t off = 0;
        for (double w : states[i]->weights) extras.at(i, off++) = w;
        for (double p : states[i]->prediction) extras.at(i, off++) = p;
        extras.at(i, off++) = states[i]->index_ratio;
        for (std::size_t a = 0; a < cfg_.action_dim(); ++a) extras.at(i, off++) = actions.at(i, a);
    }
    NodeId q = critic.forward(g, g.constant(std::move(seq)), g.constant(std::move(extras)),
                              dropout_rng_, true);
    Tensor y({n, 1}, std::vector<double>(targets));
    Tensor w({n, 1}, std::vector<double>(is_weights));
    NodeId diff = g.sub(q, g.constant(std::move(y)));
    NodeId loss = g.mean_all(g.mul(g.mul(diff, diff), g.constant(std::move(w))));
    g.backward(loss);
    CriticUpdateResult out;
    out.loss = g.value(loss).v[0];
    out.td_abs.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.td_abs[i] = std::abs(g.value(diff).v[i]);
    critic_opt_.step(critic.params);
    critic.params.zero_grad();
    return out;
}

double Agent::actor_update(const std::vector<const AugmentedState*>& states) {
    Graph g;
    const std::size_t n = states.size();
    const std::size_t k2 = cfg_.k2, f = cfg_.feature_dim();
    Tensor seq({k2, n, f});
    Tensor extras({n, cfg_.action_dim() + cfg_.prediction_dim() + 1});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k2; ++j)
            for (std::size_t c = 0; c < f; ++c) seq.v[(j * n + i) * f + c] = states[i]->fe_input.at(j, c);
        std::size_t off = 0;
        for (double w : states[i]->weights) extras.at(i, off++) = w;
        for (double p : states[i]->prediction) extras.at(i, off++) = p;
        extras.at(i, off) = states[i]->index_ratio;
    }
    NodeId seq_node = g.constant(seq);
    NodeId extras_node = g.constant(extras);
    NodeId a = actor.forward(g, seq_node, extras_node, dropout_rng_, true);
    NodeId critic_extras = g.concat_cols({extras_node, a});
    NodeId q = critic.forward(g, seq_node, critic_extras, dropout_rng_, false);
    NodeId loss = g.scale(g.mean_all(q), -1.0);
    g.backward(loss);
    critic.params.zero_grad();  // the critic is fixed during the actor step
    actor_opt_.step(actor.params);
    actor.params.zero_grad();
    return -g.value(loss).v[0];
}

double Agent::bcm_update(const std::vector<const AugmentedState*>& states, const Tensor& experts) {
    Graph g;
    const std::size_t n = states.size();
    const std::size_t k2 = cfg_.k2, f = cfg_.feature_dim();
    Tensor seq({k2, n, f});
    Tensor extras({n, cfg_.action_dim() + cfg_.prediction_dim() + 1});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k2; ++j)
            for (std::size_t c = 0; c < f; ++c) seq.v[(j * n + i) * f + c] = states[i]->fe_input.at(j, c);
        std::size_t off = 0;
        for (double w : states[i]->weights) extras.at(i, off++) = w;
        for (double p : states[i]->prediction) extras.at(i, off++) = p;
        extras.at(i, off) = states[i]->index_ratio;
    }
    NodeId a = actor.forward(g, g.constant(std::move(seq)), g.constant(std::move(extras)),
                             dropout_rng_, true);
    const CloneLoss cl = clone_loss(g.value(a), experts);
    Tensor seed = cl.grad;
    for (double& e : seed.v) e *= cfg_.lambda_bcm;
    g.backward_from(a, seed);
    actor_opt_.step(actor.params);
    actor.params.zero_grad();
    return cl.value;
}

void Agent::soft_update_targets() {
    soft_update(actor.params, actor_target.params, cfg_.tau);
    soft_update(critic.params, critic_target.params, cfg_.tau);
}

double Agent::adapt_noise(const std::vector<const AugmentedState*>& states) {
    actor_adaptive.params.copy_values_from(actor.params);
    perturb_params(actor_adaptive.params, noise_.sigma, noise_rng_);
    const Tensor base = actions_batch(actor, states, false);
    const Tensor perturbed = actions_batch(actor_adaptive, states, false);
    const double d = noise_distance(base, perturbed);
    noise_.adapt(d);
    return d;
}

nlohmann::json Agent::checkpoint() const {
    nlohmann::json j;
    j["actor"] = params_to_json(actor.params);
    j["actor_perturbed"] = params_to_json(actor_perturbed.params);
    j["actor_adaptive"] = params_to_json(actor_adaptive.params);
    j["actor_target"] = params_to_json(actor_target.params);
    j["critic"] = params_to_json(critic.params);
    j["critic_target"] = params_to_json(critic_target.params);
    j["noise_sigma"] = noise_.sigma;
    return j;
}

void Agent::restore(const nlohmann::json& j) {
    params_from_json(actor.params, j.at("actor"));
    params_from_json(actor_perturbed.params, j.at("actor_perturbed"));
    params_from_json(actor_adaptive.params, j.at("actor_adaptive"));
    params_from_json(actor_target.params, j.at("actor_target"));
    params_from_json(critic.params, j.at("critic"));
    params_from_json(critic_target.params, j.at("critic_target"));
    noise_.sigma = j.at("noise_sigma").get<double>();
}

AlignedDataset build_episode_dataset(const EpisodeSlice& slice, std::size_t k2,
                                     const SyntheticEpisode* synthetic) {
    const AlignedDataset& data = *slice.data;
    if (slice.start + 1 < k2) throw std::invalid_argument("build_episode_dataset: not enough history");
    const std::size_t begin = slice.start - (k2 - 1);
    const std::size_t end = slice.start + slice.length + 1;
    AlignedDataset real = data.slice(begin, end);
    if (!synthetic || synthetic->horizon() == 0) return real;

    const std::size_t h = synthetic->horizon();
    const std::size_t n_assets = real.num_assets();
    if (synthetic->per_asset.size() != n_assets - 1)
        throw std::invalid_argument("build_episode_dataset: synthetic asset count mismatch");

    AlignedDataset out;
    const std::int64_t dt = real.timestamps.size() > 1
                                ? real.timestamps[1] - real.timestamps[0]
                                : 86400;
    out.timestamps.resize(h);
    for (std::size_t j = 0; j < h; ++j)
        out.timestamps[j] = real.timestamps.front() - static_cast<std::int64_t>(h - j) * dt;
    out.timestamps.insert(out.timestamps.end(), real.timestamps.begin(), real.timestamps.end());

    out.open.assign(n_assets, {});
    out.high.assign(n_assets, {});
    out.low.assign(n_assets, {});
    out.close.assign(n_assets, {});

    // cash row
    out.open[0].assign(h, 1.0);
    out.high[0].assign(h, 1.0);
    out.low[0].assign(h, 1.0);
    out.close[0].assign(h, 1.0);

    for (std::size_t a = 1; a < n_assets; ++a) {
        const auto& bars = synthetic->per_asset[a - 1];
        // forward levels from 1, then rescale so the last synthetic close
        // equals the close preceding the real window (seamless price flow)
        std::vector<double> level(h);
        double cum = 1.0;
        for (std::size_t j = 0; j < h; ++j) {
            cum *= 1.0 + bars[j].close;
            level[j] = cum;
        }
        const double anchor = begin >= 1 ? data.close[a][begin - 1] : data.close[a][begin];
        const double scale = anchor / level[h - 1];
        double prev = scale;  // level before the first synthetic bar
        for (std::size_t j = 0; j < h; ++j) {
            const double close = level[j] * scale;
            out.open[a].push_back(prev);
            out.close[a].push_back(close);
            out.high[a].push_back(prev * (1.0 + bars[j].high));
            out.low[a].push_back(prev * (1.0 + bars[j].low));
            prev = close;
        }
    }
    // synthetic index: cross-asset mean close relative, flowing into the real
    // index level
    std::vector<double> index_rel(h, 0.0);
    for (std::size_t j = 0; j < h; ++j) {
        double s = 0.0;
        for (std::size_t a = 1; a < n_assets; ++a) s += 1.0 + synthetic->per_asset[a - 1][j].close;
        index_rel[j] = s / static_cast<double>(n_assets - 1);
    }
    std::vector<double> index_level(h);
    double cum = 1.0;
    for (std::size_t j = 0; j < h; ++j) {
        cum *= index_rel[j];
        index_level[j] = cum;
    }
    const double index_anchor = begin >= 1 ? data.index_close[begin - 1] : data.index_close[begin];
    const double iscale = index_anchor / index_level[h - 1];
    out.index_close.resize(h);
    for (std::size_t j = 0; j < h; ++j) out.index_close[j] = index_level[j] * iscale;

    for (std::size_t a = 0; a < n_assets; ++a) {
        out.open[a].insert(out.open[a].end(), real.open[a].begin(), real.open[a].end());
        out.high[a].insert(out.high[a].end(), real.high[a].begin(), real.high[a].end());
        out.low[a].insert(out.low[a].end(), real.low[a].begin(), real.low[a].end());
        out.close[a].insert(out.close[a].end(), real.close[a].begin(), real.close[a].end());
    }
    out.index_close.insert(out.index_close.end(), real.index_close.begin(), real.index_close.end());
    return out;
}

std::vector<TrainLogRow> Agent::train_ddpg(const AlignedDataset& data, TrainModules& modules,
                                           std::uint64_t seed, const TrainObserver& observer) {
    return train_loop(data, modules, RiskKind::None, seed, observer);
}

std::vector<TrainLogRow> Agent::train_rdpg(const AlignedDataset& data, TrainModules& modules,
                                           RiskKind risk, std::uint64_t seed,
                                           const TrainObserver& observer) {
    if (risk == RiskKind::None) throw std::invalid_argument("train_rdpg: pick dsr or d3r");
    return train_loop(data, modules, risk, seed, observer);
}

std::vector<TrainLogRow> Agent::train_loop(const AlignedDataset& data, TrainModules& modules,
                                           RiskKind risk, std::uint64_t seed,
                                           const TrainObserver& observer) {
    Rng rng_episode(derive_seed(seed, "episodes"));
    Rng rng_replay(derive_seed(seed, "replay"));
    Rng rng_dam(derive_seed(seed, "dam"));
    Rng rng_smooth(derive_seed(seed, "ipm-noise"));

    const bool off_policy_per = risk == RiskKind::None;
    replay_ = ReplayBuffer(cfg_.replay_capacity);
    trajectories_.clear();
    std::vector<TrainLogRow> log;

    const std::size_t horizon = modules.gans ? modules.dam_horizon : 0;
    const double total_steps = static_cast<double>(cfg_.episodes * (cfg_.episode_length + horizon));
    std::size_t global_step = 0;

    refresh_perturbed_actor();

    const std::size_t zeros_len = cfg_.prediction_dim();
    for (std::size_t episode = 1; episode <= cfg_.episodes; ++episode) {
        const EpisodeSlice slice = sample_episode(data, cfg_.episode_length, cfg_.k2, rng_episode);
        std::optional<SyntheticEpisode> synthetic;
        if (modules.gans) synthetic = augment_episode(*modules.gans, horizon, rng_dam);
        const AlignedDataset ep = build_episode_dataset(slice, cfg_.k2, synthetic ? &*synthetic : nullptr);
        const std::size_t n = ep.size();

        // realized change vectors; xs[i] is the change at bar i+1
        std::vector<std::vector<double>> xs;
        xs.reserve(n - 1);
        for (std::size_t i = 1; i < n; ++i) xs.push_back(ep.pct_change_vector(i));
        if (modules.ipm && modules.ipm_input_smoothing && xs.size() >= modules.savgol_window)
            xs = smooth_inputs(xs, modules.ipm_noise_sd, modules.savgol_window, modules.savgol_order,
                               rng_smooth);
        if (modules.ipm) {
            modules.ipm->reset_stream();
            for (std::size_t j = 0; j + 1 < cfg_.k2; ++j) modules.ipm->step(xs[j]);
        }

        std::vector<double> held(cfg_.action_dim(), 0.0);
        held[0] = 1.0;
        std::vector<double> prev_action = held;
        DsrState dsr;
        dsr.eta = cfg_.risk_eta;
        D3rState d3r;
        d3r.eta = cfg_.risk_eta;
        Trajectory trajectory;

        AugmentedState state = make_state(
            ep, cfg_.k2 - 1, cfg_.k2, prev_action,
            modules.ipm ? modules.ipm->mu() : std::vector<double>(zeros_len, 0.0));

        for (std::size_t t = cfg_.k2 - 1; t + 1 < n; ++t) {
            emit(observer, "ipm_predict");
            emit(observer, "act");
            const std::vector<double> action = act_perturbed(state);

            emit(observer, "execute");
            const std::vector<double> u = ep.relative_vector(t + 1);
            const double cbar = cost_factor(held, action, cfg_.fee_rate);
            const double growth = growth_factor(action, u);
            const double reward = std::log(cbar * growth);
            held = drift_weights(action, u);

            emit(observer, "ipm_next_predict");
            if (modules.ipm) modules.ipm->step(xs[t]);
            AugmentedState next_state = make_state(
                ep, t + 1, cfg_.k2, action,
                modules.ipm ? modules.ipm->mu() : std::vector<double>(zeros_len, 0.0));

            emit(observer, "greedy_solve");
            std::vector<double> expert;
            if (modules.bcm)
                expert = solve_greedy(GreedyProblem{u, prev_action, cfg_.fee_rate}).w_star;

            double stored_reward = reward * cfg_.reward_scale;
            if (risk == RiskKind::Dsr) stored_reward = dsr_update(dsr, reward);
            if (risk == RiskKind::D3r) stored_reward = d3r_update(d3r, reward);

            emit(observer, "store");
            ReplayItem item{state, action, stored_reward, next_state, expert, u, prev_action,
                            cfg_.fee_rate, 1.0};
            if (off_policy_per) {
                replay_.push(std::move(item));

                emit(observer, "per_sample");
                const double beta = std::min(
                    1.0, cfg_.per_beta0 + (1.0 - cfg_.per_beta0) *
                                              (static_cast<double>(global_step) / total_steps));
                const auto sample = replay_.sample(cfg_.batch_size, cfg_.per_alpha, beta, rng_replay);
                std::vector<const AugmentedState*> batch_states, batch_next;
                Tensor batch_actions({sample.indices.size(), cfg_.action_dim()});
                std::vector<double> rewards;
                for (std::size_t k = 0; k < sample.indices.size(); ++k) {
                    const ReplayItem& it = replay_.at(sample.indices[k]);
                    batch_states.push_back(&it.state);
                    batch_next.push_back(&it.next_state);
                    for (std::size_t a = 0; a < cfg_.action_dim(); ++a)
                        batch_actions.at(k, a) = it.action[a];
                    rewards.push_back(it.reward);
                }
                const Tensor next_actions = actions_batch(actor_target, batch_next, false);
                const Tensor next_q = q_batch(critic_target, batch_next, next_actions, false);
                std::vector<double> targets(rewards.size());
                for (std::size_t k = 0; k < rewards.size(); ++k)
                    targets[k] = rewards[k] + cfg_.gamma * next_q.v[k];

                emit(observer, "critic_update");
                const auto cres = critic_update(batch_states, batch_actions, targets, sample.is_weights);
                for (std::size_t k = 0; k < sample.indices.size(); ++k)
                    replay_.set_priority(sample.indices[k], cres.td_abs[k] + cfg_.per_eps);

                emit(observer, "lr_sync");
                actor_opt_.set_lr(critic_opt_.lr() * cfg_.actor_lr_ratio);

                emit(observer, "actor_update");
                const double actor_obj = actor_update(batch_states);
                double bcm_loss = 0.0;
                if (modules.bcm) {
                    Tensor experts({sample.indices.size(), cfg_.action_dim()});
                    bool all_have_expert = true;
                    for (std::size_t k = 0; k < sample.indices.size(); ++k) {
                        const ReplayItem& it = replay_.at(sample.indices[k]);
                        if (it.expert.size() != cfg_.action_dim()) {
                            all_have_expert = false;
                            break;
                        }
                        for (std::size_t a = 0; a < cfg_.action_dim(); ++a)
                            experts.at(k, a) = it.expert[a];
                    }
                    if (all_have_expert) bcm_loss = bcm_update(batch_states, experts);
                }

                emit(observer, "target_update");
                soft_update_targets();

                emit(observer, "sigma_adapt");
                adapt_noise(batch_states);

                log.push_back(TrainLogRow{episode, global_step, reward, cres.loss, actor_obj,
                                          bcm_loss, noise_.sigma, replay_.size()});
            } else {
                trajectory.steps.push_back(std::move(item));
                log.push_back(TrainLogRow{episode, global_step, reward, 0.0, 0.0, 0.0,
                                          noise_.sigma, trajectories_.size()});
            }

            state = std::move(next_state);
            prev_action = action;
            ++global_step;
        }

        if (!off_policy_per) {
            trajectories_.push_back(std::move(trajectory));
            while (trajectories_.size() > cfg_.trajectory_capacity) trajectories_.pop_front();

            emit(observer, "trajectory_sample");
            const std::size_t k_count = std::min<std::size_t>(cfg_.trajectory_batch, trajectories_.size());
            std::vector<const AugmentedState*> batch_states, batch_next;
            std::vector<double> rewards;
            std::vector<const ReplayItem*> flat;
            for (std::size_t k = 0; k < k_count; ++k) {
                const Trajectory& tr = trajectories_[rng_replay.uniform_int(trajectories_.size())];
                for (const ReplayItem& it : tr.steps) flat.push_back(&it);
            }
            Tensor batch_actions({flat.size(), cfg_.action_dim()});
            for (std::size_t k = 0; k < flat.size(); ++k) {
                batch_states.push_back(&flat[k]->state);
                batch_next.push_back(&flat[k]->next_state);
                for (std::size_t a = 0; a < cfg_.action_dim(); ++a)
                    batch_actions.at(k, a) = flat[k]->action[a];
                rewards.push_back(flat[k]->reward);
            }
            const Tensor next_actions = actions_batch(actor_target, batch_next, false);
            const Tensor next_q = q_batch(critic_target, batch_next, next_actions, false);
            std::vector<double> targets(rewards.size());
            for (std::size_t k = 0; k < rewards.size(); ++k)
                targets[k] = rewards[k] + cfg_.gamma * next_q.v[k];
            const std::vector<double> unit_weights(flat.size(), 1.0);

            emit(observer, "critic_update");
            const auto cres = critic_update(batch_states, batch_actions, targets, unit_weights);
            emit(observer, "lr_sync");
            actor_opt_.set_lr(critic_opt_.lr() * cfg_.actor_lr_ratio);
            emit(observer, "actor_update");
            const double actor_obj = actor_update(batch_states);
            double bcm_loss = 0.0;
            if (modules.bcm) {
                Tensor experts({flat.size(), cfg_.action_dim()});
                bool all_have = true;
                for (std::size_t k = 0; k < flat.size(); ++k) {
                    if (flat[k]->expert.size() != cfg_.action_dim()) {
                        all_have = false;
                        break;
                    }
                    for (std::size_t a = 0; a < cfg_.action_dim(); ++a)
                        experts.at(k, a) = flat[k]->expert[a];
                }
                if (all_have) bcm_loss = bcm_update(batch_states, experts);
            }
            emit(observer, "target_update");
            soft_update_targets();
            emit(observer, "sigma_adapt");
            adapt_noise(batch_states);
            if (!log.empty()) {
                log.back().critic_loss = cres.loss;
                log.back().actor_objective = actor_obj;
                log.back().bcm_loss = bcm_loss;
            }
        }

        emit(observer, "perturbed_refresh");
        refresh_perturbed_actor();
    }
    return log;
}

void write_train_log_csv(const std::vector<TrainLogRow>& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "episode,step,reward,critic_loss,actor_objective,bcm_loss,sigma,buffer_size\n";
    for (const auto& row : log) {
        out << row.episode << ',' << row.step << ',' << format_double(row.reward) << ','
            << format_double(row.critic_loss) << ',' << format_double(row.actor_objective) << ','
            << format_double(row.bcm_loss) << ',' << format_double(row.sigma) << ','
            << row.buffer_size << "\n";
    }
}

}  // namespace portrl
