#pragma once

#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "portrl/backtest.hpp"
#include "portrl/greedy.hpp"
#include "portrl/market_data.hpp"
#include "portrl/ndybm.hpp"
#include "portrl/nn.hpp"
#include "portrl/rgan.hpp"
#include "portrl/risk.hpp"

namespace portrl {

struct AgentConfig {
    std::size_t num_assets = 7;  // m risky assets (plus cash)
    std::size_t k2 = 10;
    std::size_t fe_hidden1 = 20;
    std::size_t fe_hidden2 = 8;
    std::vector<std::size_t> fa_sizes = {256, 128, 64, 32};
    double dropout_keep = 0.5;
    double gamma = 0.99;
    double tau = 0.001;
    double lr_critic = 1e-3;
    double actor_lr_ratio = 0.01;  // actor lr = critic lr * ratio
    double lambda_bcm = 0.1;
    double reward_scale = 1e3;
    double fee_rate = 0.002;
    std::size_t batch_size = 32;
    std::size_t replay_capacity = 1000;
    double per_alpha = 0.6;
    double per_beta0 = 0.4;
    double per_eps = 1e-6;
    double noise_sigma0 = 0.01;
    double noise_alpha = 1.01;
    double noise_delta = 0.05;
    std::size_t episode_length = 650;
    std::size_t episodes = 200;
    std::size_t trajectory_capacity = 100;  // rdpg
    std::size_t trajectory_batch = 4;       // K
    double risk_eta = 0.01;                 // DSR/D3R adaptation rate

    std::size_t feature_dim() const { return 3 * (num_assets + 1); }
    std::size_t action_dim() const { return num_assets + 1; }
    std::size_t prediction_dim() const { return 3 * num_assets; }
};

// State fed to the networks: normalized price window (as the FE input
// sequence), previous weights, prediction triplet, market index ratio.
struct AugmentedState {
    Tensor fe_input;                 // (k2, 3(m+1))
    std::vector<double> weights;     // m+1
    std::vector<double> prediction;  // 3m (zeros when the IPM is off)
    double index_ratio = 1.0;
};

AugmentedState make_state(const AlignedDataset& data, std::size_t t, std::size_t k2,
                          std::vector<double> weights, std::vector<double> prediction);

// Actor or critic network: bidirectional LSTM feature extraction over the
// price window, dense feature analysis with leaky-relu and dropout, and a
// softmax (actor) or scalar (critic) head. The critic takes the action
// concatenated at the first dense layer input.
class PolicyNet {
public:
    PolicyNet(const AgentConfig& cfg, bool critic, std::uint64_t seed);
    PolicyNet(const PolicyNet&) = delete;
    PolicyNet& operator=(const PolicyNet&) = delete;

    // states as batch tensors: seq (k2, N, F), extras (N, extra_dim)
    NodeId forward(Graph& g, NodeId seq, NodeId extras, Rng& dropout_rng, bool train) const;

    ParamSet params;
    bool critic = false;

private:
    LstmLayer fe_f1_, fe_b1_, fe_f2_, fe_b2_;
    std::vector<DenseLayer> fa_;
    DenseLayer head_;
    double dropout_keep_ = 0.5;
};

struct ReplayItem {
    AugmentedState state;
    std::vector<double> action;
    double reward = 0.0;  // scaled
    AugmentedState next_state;
    std::vector<double> expert;  // one-step greedy action (empty when BCM off)
    std::vector<double> u;       // realized relatives of the step
    std::vector<double> w_prev;  // weights entering the step
    double cost_rate = 0.0;
    double priority = 1.0;
};

class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {}
    void push(ReplayItem item);  // enters at max priority, FIFO eviction
    std::size_t size() const { return items_.size(); }
    const ReplayItem& at(std::size_t i) const { return items_[i]; }
    void set_priority(std::size_t i, double p) {
        items_[i].priority = p;
        max_priority_ = std::max(max_priority_, p);
    }
    void clear() {
        items_.clear();
        max_priority_ = 1.0;
    }

    struct Sample {
        std::vector<std::size_t> indices;
        std::vector<double> is_weights;  // normalized by the batch max
    };
    // P(i) proportional to priority^alpha; importance weights
    // (size * P(i))^-beta, sampled with replacement.
    Sample sample(std::size_t n, double alpha, double beta, Rng& rng) const;

private:
    std::size_t capacity_;
    std::deque<ReplayItem> items_;
    double max_priority_ = 1.0;
};

struct ParamNoise {
    double sigma = 0.01;
    double alpha = 1.01;
    double delta = 0.05;

    void adapt(double distance) { sigma = distance <= delta ? sigma * alpha : sigma / alpha; }
};

// Root mean squared action difference over batch entries and action
// dimensions.
double noise_distance(const Tensor& actions_a, const Tensor& actions_b);

struct Trajectory {
    std::vector<ReplayItem> steps;  // time-contiguous, reward holds d_t
};

struct TrainLogRow {
    std::size_t episode = 0;
    std::size_t step = 0;
    double reward = 0.0;       // unscaled environment reward
    double critic_loss = 0.0;
    double actor_objective = 0.0;  // mean Q under the current actor
    double bcm_loss = 0.0;
    double sigma = 0.0;
    std::size_t buffer_size = 0;
};

struct TrainModules {
    Ndybm* ipm = nullptr;
    std::vector<GanPair>* gans = nullptr;  // one per risky asset when DAM is on
    bool bcm = false;
    std::size_t dam_horizon = 42;          // synthetic bars prepended per episode
    bool ipm_input_smoothing = true;
    double ipm_noise_sd = 0.01;
    std::size_t savgol_window = 5;
    std::size_t savgol_order = 3;
};

enum class RiskKind { None, Dsr, D3r };

// Step-phase observer used by the order-fidelity tests.
using TrainObserver = std::function<void(const std::string& event)>;

class Agent {
public:
    Agent(const AgentConfig& cfg, std::uint64_t seed);
    Agent(const Agent&) = delete;
    Agent& operator=(const Agent&) = delete;

    // softmax policy output for one state (eval mode, actual actor)
    std::vector<double> act(const AugmentedState& state);
    // perturbed-actor action used while exploring
    std::vector<double> act_perturbed(const AugmentedState& state);

    void refresh_perturbed_actor();  // theta~ <- theta + N(0, sigma)

    const AgentConfig& config() const { return cfg_; }
    double actor_lr() const { return actor_opt_.lr(); }
    double critic_lr() const { return critic_opt_.lr(); }
    double noise_sigma() const { return noise_.sigma; }

    nlohmann::json checkpoint() const;
    void restore(const nlohmann::json& j);

    PolicyNet actor, actor_perturbed, actor_adaptive, actor_target;
    PolicyNet critic, critic_target;

    // Off-policy training loop (one-step transitions, prioritized replay).
    std::vector<TrainLogRow> train_ddpg(const AlignedDataset& data, TrainModules& modules,
                                        std::uint64_t seed, const TrainObserver& observer = nullptr);
    // Trajectory-buffer variant with DSR/D3R rewards.
    std::vector<TrainLogRow> train_rdpg(const AlignedDataset& data, TrainModules& modules,
                                        RiskKind risk, std::uint64_t seed,
                                        const TrainObserver& observer = nullptr);

    // Batched network passes (shared by training and the tests).
    Tensor actions_batch(const PolicyNet& net, const std::vector<const AugmentedState*>& states,
                         bool train);
    Tensor q_batch(const PolicyNet& net, const std::vector<const AugmentedState*>& states,
                   const Tensor& actions, bool train);

    struct CriticUpdateResult {
        double loss = 0.0;
        std::vector<double> td_abs;
    };
    CriticUpdateResult critic_update(const std::vector<const AugmentedState*>& states,
                                     const Tensor& actions, const std::vector<double>& targets,
                                     const std::vector<double>& is_weights);
    double actor_update(const std::vector<const AugmentedState*>& states);
    double bcm_update(const std::vector<const AugmentedState*>& states, const Tensor& experts);
    void soft_update_targets();
    double adapt_noise(const std::vector<const AugmentedState*>& states);

    const ReplayBuffer& replay() const { return replay_; }
    const std::deque<Trajectory>& trajectories() const { return trajectories_; }

private:
    AgentConfig cfg_;
    Optimizer actor_opt_;
    Optimizer critic_opt_;
    ParamNoise noise_;
    Rng dropout_rng_;
    Rng noise_rng_;
    ReplayBuffer replay_{1};
    std::deque<Trajectory> trajectories_;

    std::vector<TrainLogRow> train_loop(const AlignedDataset& data, TrainModules& modules,
                                        RiskKind risk, std::uint64_t seed,
                                        const TrainObserver& observer);
};

// Episode dataset assembly: the real window (k2 history + length decisions +
// one lookahead bar), optionally preceded by synthetic bars whose price
// levels flow seamlessly into the real region.
AlignedDataset build_episode_dataset(const EpisodeSlice& slice, std::size_t k2,
                                     const SyntheticEpisode* synthetic);

void write_train_log_csv(const std::vector<TrainLogRow>& log, const std::string& path);

}  // namespace portrl
