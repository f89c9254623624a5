#include "portrl/config.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "portrl/market_data.hpp"

namespace portrl {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

class IniView {
public:
    explicit IniView(const std::string& text) {
        std::istringstream in(text);
        std::string line, section;
        while (std::getline(in, line)) {
            const auto comment = line.find_first_of("#;");
            if (comment != std::string::npos) line = line.substr(0, comment);
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[' && line.back() == ']') {
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw std::invalid_argument("config: expected key = value, got '" + line + "'");
            values_[section + "." + trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string str(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }
    double num(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        double out = 0.0;
        const auto res = std::from_chars(it->second.data(), it->second.data() + it->second.size(), out);
        if (res.ec != std::errc() || res.ptr != it->second.data() + it->second.size())
            throw std::invalid_argument("config: bad number for " + key + ": '" + it->second + "'");
        return out;
    }
    std::size_t count(const std::string& key, std::size_t fallback) const {
        const double v = num(key, static_cast<double>(fallback));
        if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v)))
            throw std::invalid_argument("config: expected a nonnegative integer for " + key);
        return static_cast<std::size_t>(v);
    }
    bool flag(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1" || it->second == "on") return true;
        if (it->second == "false" || it->second == "0" || it->second == "off") return false;
        throw std::invalid_argument("config: bad boolean for " + key + ": '" + it->second + "'");
    }
    std::vector<std::string> list(const std::string& key) const {
        std::vector<std::string> out;
        auto it = values_.find(key);
        if (it == values_.end()) return out;
        std::istringstream in(it->second);
        std::string field;
        while (std::getline(in, field, ',')) {
            field = trim(field);
            if (!field.empty()) out.push_back(field);
        }
        return out;
    }
    std::vector<double> num_list(const std::string& key, std::vector<double> fallback) const {
        if (!has(key)) return fallback;
        std::vector<double> out;
        for (const auto& field : list(key)) {
            double v = 0.0;
            const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
            if (res.ec != std::errc()) throw std::invalid_argument("config: bad number in list " + key);
            out.push_back(v);
        }
        return out;
    }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace

RunConfig config_from_ini_text(const std::string& text) {
    const IniView ini(text);
    RunConfig c;
    c.csv_path = ini.str("data.csv", "");
    c.assets = ini.list("data.assets");
    c.index_symbol = ini.str("data.index", "");
    c.train_begin = ini.str("data.train_begin", "");
    c.train_end = ini.str("data.train_end", "");
    c.test_begin = ini.str("data.test_begin", "");
    c.test_end = ini.str("data.test_end", "");
    c.aggregate_factor = ini.count("data.aggregate", 1);

    c.use_ipm = ini.flag("modules.ipm", false);
    c.use_dam = ini.flag("modules.dam", false);
    c.use_bcm = ini.flag("modules.bcm", false);
    c.variant = ini.str("modules.variant", "ddpg");

    AgentConfig& a = c.agent;
    a.num_assets = c.assets.size();
    a.k2 = ini.count("agent.k2", a.k2);
    a.fe_hidden1 = ini.count("agent.fe_hidden1", a.fe_hidden1);
    a.fe_hidden2 = ini.count("agent.fe_hidden2", a.fe_hidden2);
    {
        const auto sizes = ini.num_list("agent.fa_sizes", {});
        if (!sizes.empty()) {
            a.fa_sizes.clear();
            for (double s : sizes) a.fa_sizes.push_back(static_cast<std::size_t>(s));
        }
    }
    a.dropout_keep = ini.num("agent.dropout_keep", a.dropout_keep);
    a.gamma = ini.num("agent.gamma", a.gamma);
    a.tau = ini.num("agent.tau", a.tau);
    a.lr_critic = ini.num("agent.lr_critic", a.lr_critic);
    a.actor_lr_ratio = ini.num("agent.actor_lr_ratio", a.actor_lr_ratio);
    a.lambda_bcm = ini.num("agent.lambda_bcm", a.lambda_bcm);
    a.reward_scale = ini.num("agent.reward_scale", a.reward_scale);
    a.batch_size = ini.count("agent.batch_size", a.batch_size);
    a.replay_capacity = ini.count("agent.replay_capacity", a.replay_capacity);
    a.per_alpha = ini.num("agent.per_alpha", a.per_alpha);
    a.per_beta0 = ini.num("agent.per_beta0", a.per_beta0);
    a.per_eps = ini.num("agent.per_eps", a.per_eps);
    a.noise_sigma0 = ini.num("agent.noise_sigma0", a.noise_sigma0);
    a.noise_alpha = ini.num("agent.noise_alpha", a.noise_alpha);
    a.noise_delta = ini.num("agent.noise_delta", a.noise_delta);
    a.episode_length = ini.count("agent.episode_length", a.episode_length);
    a.episodes = ini.count("agent.episodes", a.episodes);
    a.trajectory_capacity = ini.count("agent.trajectory_capacity", a.trajectory_capacity);
    a.trajectory_batch = ini.count("agent.trajectory_batch", a.trajectory_batch);
    a.risk_eta = ini.num("agent.risk_eta", a.risk_eta);

    NdybmConfig& n = c.ipm;
    n.num_assets = c.assets.size();
    n.delay = ini.count("ipm.delay", n.delay);
    n.decay = ini.num_list("ipm.decay", n.decay);
    n.rnn_units = ini.count("ipm.rnn_units", n.rnn_units);
    n.learning_rate = ini.num("ipm.learning_rate", n.learning_rate);
    n.spectral_radius = ini.num("ipm.spectral_radius", n.spectral_radius);
    n.sigma2_floor = ini.num("ipm.sigma2_floor", n.sigma2_floor);
    n.sigma2_init = ini.num("ipm.sigma2_init", n.sigma2_init);
    c.ipm_input_smoothing = ini.flag("ipm.input_smoothing", c.ipm_input_smoothing);
    c.ipm_noise_sd = ini.num("ipm.noise_sd", c.ipm_noise_sd);
    c.savgol_window = ini.count("ipm.savgol_window", c.savgol_window);
    c.savgol_order = ini.count("ipm.savgol_order", c.savgol_order);

    GanConfig& g = c.gan;
    g.k1 = ini.count("dam.k1", g.k1);
    g.noise_dim = ini.count("dam.noise_dim", g.noise_dim);
    g.hidden = ini.count("dam.hidden", g.hidden);
    g.batch = ini.count("dam.batch", g.batch);
    g.zeta = ini.num("dam.zeta", g.zeta);
    g.learning_rate = ini.num("dam.learning_rate", g.learning_rate);
    g.train_steps = ini.count("dam.train_steps", g.train_steps);
    g.downsample_factor = ini.count("dam.downsample_factor", g.downsample_factor);
    c.dam_horizon = ini.count("dam.horizon", c.dam_horizon);

    ExecutionConfig& e = c.exec;
    e.fee_rate = ini.num("exec.fee_rate", e.fee_rate);
    e.slippage_rate = ini.num("exec.slippage_rate", e.slippage_rate);
    e.decision_period = ini.count("exec.decision_period", e.decision_period);
    e.execution_period = ini.count("exec.execution_period", e.execution_period);
    e.initial_cash = ini.num("exec.initial_cash", e.initial_cash);
    e.periods_per_year = ini.num("exec.periods_per_year", e.periods_per_year);
    c.agent.fee_rate = e.fee_rate;

    c.metrics_alpha = ini.num("metrics.alpha", c.metrics_alpha);
    c.seed = static_cast<std::uint64_t>(ini.num("run.seed", 1.0));
    c.output_dir = ini.str("run.output_dir", "out");
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return config_from_ini_text(ss.str());
}

void validate_config(const RunConfig& c) {
    if (c.csv_path.empty()) throw std::invalid_argument("config: data.csv is required");
    if (c.assets.empty()) throw std::invalid_argument("config: need at least one risky asset in data.assets");
    if (c.variant != "ddpg" && c.variant != "rdpg-dsr" && c.variant != "rdpg-d3r")
        throw std::invalid_argument("config: modules.variant must be ddpg, rdpg-dsr, or rdpg-d3r");
    const std::int64_t tb = parse_timestamp(c.train_begin);
    const std::int64_t te = parse_timestamp(c.train_end);
    const std::int64_t sb = parse_timestamp(c.test_begin);
    const std::int64_t se = parse_timestamp(c.test_end);
    if (tb >= te) throw std::invalid_argument("config: train range is empty or inverted");
    if (sb >= se) throw std::invalid_argument("config: test range is empty or inverted");
    if (te >= sb) throw std::invalid_argument("config: train range must precede the test range");
    if (c.agent.gamma <= 0.0 || c.agent.gamma > 1.0)
        throw std::invalid_argument("config: agent.gamma must lie in (0, 1]");
    if (c.exec.fee_rate < 0.0 || c.exec.slippage_rate < 0.0)
        throw std::invalid_argument("config: execution rates must be nonnegative");
}

nlohmann::json config_echo(const RunConfig& c) {
    nlohmann::json j;
    j["data"]["csv"] = c.csv_path;
    j["data"]["assets"] = c.assets;
    j["data"]["index"] = c.index_symbol;
    j["data"]["train_begin"] = c.train_begin;
    j["data"]["train_end"] = c.train_end;
    j["data"]["test_begin"] = c.test_begin;
    j["data"]["test_end"] = c.test_end;
    j["data"]["aggregate"] = c.aggregate_factor;
    j["modules"]["ipm"] = c.use_ipm;
    j["modules"]["dam"] = c.use_dam;
    j["modules"]["bcm"] = c.use_bcm;
    j["modules"]["variant"] = c.variant;
    j["agent"]["k2"] = c.agent.k2;
    j["agent"]["fe_hidden1"] = c.agent.fe_hidden1;
    j["agent"]["fe_hidden2"] = c.agent.fe_hidden2;
    j["agent"]["fa_sizes"] = c.agent.fa_sizes;
    j["agent"]["dropout_keep"] = c.agent.dropout_keep;
    j["agent"]["gamma"] = c.agent.gamma;
    j["agent"]["tau"] = c.agent.tau;
    j["agent"]["lr_critic"] = c.agent.lr_critic;
    j["agent"]["actor_lr_ratio"] = c.agent.actor_lr_ratio;
    j["agent"]["lambda_bcm"] = c.agent.lambda_bcm;
    j["agent"]["reward_scale"] = c.agent.reward_scale;
    j["agent"]["batch_size"] = c.agent.batch_size;
    j["agent"]["replay_capacity"] = c.agent.replay_capacity;
    j["agent"]["per_alpha"] = c.agent.per_alpha;
    j["agent"]["per_beta0"] = c.agent.per_beta0;
    j["agent"]["per_eps"] = c.agent.per_eps;
    j["agent"]["noise_sigma0"] = c.agent.noise_sigma0;
    j["agent"]["noise_alpha"] = c.agent.noise_alpha;
    j["agent"]["noise_delta"] = c.agent.noise_delta;
    j["agent"]["episode_length"] = c.agent.episode_length;
    j["agent"]["episodes"] = c.agent.episodes;
    j["agent"]["trajectory_capacity"] = c.agent.trajectory_capacity;
    j["agent"]["trajectory_batch"] = c.agent.trajectory_batch;
    j["agent"]["risk_eta"] = c.agent.risk_eta;
    j["ipm"]["delay"] = c.ipm.delay;
    j["ipm"]["decay"] = c.ipm.decay;
    j["ipm"]["rnn_units"] = c.ipm.rnn_units;
    j["ipm"]["learning_rate"] = c.ipm.learning_rate;
    j["ipm"]["spectral_radius"] = c.ipm.spectral_radius;
    j["ipm"]["sigma2_floor"] = c.ipm.sigma2_floor;
    j["ipm"]["sigma2_init"] = c.ipm.sigma2_init;
    j["ipm"]["input_smoothing"] = c.ipm_input_smoothing;
    j["ipm"]["noise_sd"] = c.ipm_noise_sd;
    j["ipm"]["savgol_window"] = c.savgol_window;
    j["ipm"]["savgol_order"] = c.savgol_order;
    j["dam"]["k1"] = c.gan.k1;
    j["dam"]["noise_dim"] = c.gan.noise_dim;
    j["dam"]["hidden"] = c.gan.hidden;
    j["dam"]["batch"] = c.gan.batch;
    j["dam"]["zeta"] = c.gan.zeta;
    j["dam"]["learning_rate"] = c.gan.learning_rate;
    j["dam"]["train_steps"] = c.gan.train_steps;
    j["dam"]["downsample_factor"] = c.gan.downsample_factor;
    j["dam"]["horizon"] = c.dam_horizon;
    j["exec"]["fee_rate"] = c.exec.fee_rate;
    j["exec"]["slippage_rate"] = c.exec.slippage_rate;
    j["exec"]["decision_period"] = c.exec.decision_period;
    j["exec"]["execution_period"] = c.exec.execution_period;
    j["exec"]["initial_cash"] = c.exec.initial_cash;
    j["exec"]["periods_per_year"] = c.exec.periods_per_year;
    j["metrics"]["alpha"] = c.metrics_alpha;
    j["run"]["seed"] = c.seed;
    j["run"]["output_dir"] = c.output_dir;
    return j;
}

}  // namespace portrl
