#include "portrl/orchestrator.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "portrl/checkpoint.hpp"

namespace fs = std::filesystem;

namespace portrl {

namespace {

struct PreparedData {
    AlignedDataset full;
    std::size_t train_begin = 0, train_end = 0;  // [begin, end) bar indices
    std::size_t test_begin = 0, test_end = 0;
};

std::size_t lower_index(const std::vector<std::int64_t>& stamps, std::int64_t t) {
    return static_cast<std::size_t>(std::lower_bound(stamps.begin(), stamps.end(), t) - stamps.begin());
}

std::size_t upper_index(const std::vector<std::int64_t>& stamps, std::int64_t t) {
    return static_cast<std::size_t>(std::upper_bound(stamps.begin(), stamps.end(), t) - stamps.begin());
}

PreparedData prepare_data(const RunConfig& c) {
    auto ingest = ingest_csv(c.csv_path);
    if (c.aggregate_factor > 1) {
        for (auto& [symbol, series] : ingest.series) series = aggregate(series, c.aggregate_factor);
    }
    PreparedData out;
    out.full = align_series(ingest.series, c.assets, c.index_symbol);
    const auto& stamps = out.full.timestamps;
    out.train_begin = lower_index(stamps, parse_timestamp(c.train_begin));
    out.train_end = upper_index(stamps, parse_timestamp(c.train_end));
    out.test_begin = lower_index(stamps, parse_timestamp(c.test_begin));
    out.test_end = upper_index(stamps, parse_timestamp(c.test_end));
    if (out.train_end <= out.train_begin) throw std::invalid_argument("run: no bars in the training range");
    if (out.test_end <= out.test_begin) throw std::invalid_argument("run: no bars in the test range");
    if (out.test_begin < c.agent.k2) throw std::invalid_argument("run: test range lacks tensor history");
    return out;
}

Tensor fe_matrix(const PriceTensor& tensor) {
    const std::size_t n = tensor.assets(), k2 = tensor.window();
    Tensor fe({k2, 3 * n});
    const Tensor* mats[3] = {&tensor.close_mat, &tensor.high_mat, &tensor.low_mat};
    for (std::size_t j = 0; j < k2; ++j)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t a = 0; a < n; ++a) fe.at(j, c * n + a) = mats[c]->at(a, j);
    return fe;
}

// Frozen-actor policy adapter; tracks its own previous action so the state
// matches the training convention (weights = previous action).
class FrozenPolicy {
public:
    FrozenPolicy(Agent& agent) : agent_(agent) {
        prev_action_.assign(agent.config().action_dim(), 0.0);
        prev_action_[0] = 1.0;
    }
    std::vector<double> operator()(const DecisionContext& ctx) {
        AugmentedState s;
        s.fe_input = fe_matrix(ctx.tensor);
        s.weights = prev_action_;
        s.prediction = ctx.prediction.empty()
                           ? std::vector<double>(agent_.config().prediction_dim(), 0.0)
                           : ctx.prediction;
        s.index_ratio = ctx.index_ratio;
        prev_action_ = agent_.act(s);
        return prev_action_;
    }

private:
    Agent& agent_;
    std::vector<double> prev_action_;
};

// Deep copy of the IPM (parameters, stream state, optimizer moments) via its
// serialized form; plain copying would cross-link optimizer slots.
Ndybm snapshot_ipm(const Ndybm& ipm) {
    Rng scratch(0);
    Ndybm copy(ipm.config(), scratch);
    copy.from_json(ipm.to_json());
    return copy;
}

void write_equity_csv(const BacktestResult& result, const AlignedDataset& data,
                      const EpisodeSlice& slice, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "step,timestamp,equity\n";
    for (std::size_t i = 0; i < result.equity.size(); ++i) {
        const std::size_t bar = slice.start + (i == 0 ? 0 : i - 1);
        out << i << ',' << format_timestamp(data.timestamps[bar]) << ','
            << format_double(result.equity[i]) << "\n";
    }
}

void write_weights_csv(const BacktestResult& result, const AlignedDataset& data,
                       const EpisodeSlice& slice, const std::vector<std::string>& assets,
                       const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "timestamp,CASH";
    for (const auto& a : assets) out << ',' << a;
    out << "\n";
    for (std::size_t i = 0; i < result.weight_history.size(); ++i) {
        out << format_timestamp(data.timestamps[slice.start + i]);
        for (double w : result.weight_history[i]) out << ',' << format_double(w);
        out << "\n";
    }
}

void write_fills_csv(const BacktestResult& result, const AlignedDataset& data,
                     const std::vector<std::string>& assets, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "timestamp,asset,quantity,price,fee,scaled_down\n";
    for (const auto& fill : result.fills) {
        out << format_timestamp(data.timestamps[fill.bar]) << ','
            << (fill.asset == 0 ? "CASH" : assets[fill.asset - 1]) << ',' << fill.quantity << ','
            << format_double(fill.price) << ',' << format_double(fill.fee) << ','
            << (fill.scaled_down ? 1 : 0) << "\n";
    }
}

struct EvalOutput {
    nlohmann::json metrics;
    std::vector<std::string> files;
};

EvalOutput evaluate_impl(const RunConfig& c, Agent& agent, const Ndybm* ipm,
                         const PreparedData& data, const std::string& dir) {
    const std::size_t n = data.full.size();
    const std::size_t start = data.test_begin;
    std::size_t length = data.test_end - data.test_begin;
    if (start + length >= n) length = n - 1 - start;  // the last bar cannot execute
    if (length == 0) throw std::invalid_argument("evaluate: test range too short");
    const EpisodeSlice slice{&data.full, start, length};

    const std::size_t warmup = std::min<std::size_t>(50, start);

    EvalOutput out;
    struct RunDef {
        const char* name;
        bool crp;
        ExecutionConfig::Mode mode;
    };
    const RunDef defs[] = {
        {"agent_idealized", false, ExecutionConfig::Mode::Idealized},
        {"agent_realistic", false, ExecutionConfig::Mode::Realistic},
        {"crp_idealized", true, ExecutionConfig::Mode::Idealized},
        {"crp_realistic", true, ExecutionConfig::Mode::Realistic},
    };
    for (const auto& def : defs) {
        BacktestOptions opt;
        opt.exec = c.exec;
        opt.exec.mode = def.mode;
        opt.exec.periods_per_year = c.exec.periods_per_year;
        opt.k2 = c.agent.k2;

        std::optional<Ndybm> ipm_copy;
        std::optional<NdybmPredictionSource> source;
        if (!def.crp && ipm) {
            ipm_copy.emplace(snapshot_ipm(*ipm));
            ipm_copy->reset_stream();
            for (std::size_t t = start - warmup; t < start; ++t) {
                if (t == 0) continue;
                ipm_copy->step(data.full.pct_change_vector(t));
            }
            source.emplace(*ipm_copy);
            opt.prediction = &*source;
        }

        BacktestResult result;
        if (def.crp) {
            result = run_crp(slice, opt);
        } else {
            FrozenPolicy policy(agent);
            result = run_backtest([&policy](const DecisionContext& ctx) { return policy(ctx); },
                                  slice, opt);
        }
        out.metrics[def.name] = metrics_to_json(result.metrics);

        const std::string equity_path = dir + "/equity_" + def.name + ".csv";
        write_equity_csv(result, data.full, slice, equity_path);
        out.files.push_back(equity_path);
        const std::string weights_path = dir + "/weights_" + def.name + ".csv";
        write_weights_csv(result, data.full, slice, c.assets, weights_path);
        out.files.push_back(weights_path);
        if (def.mode == ExecutionConfig::Mode::Realistic) {
            const std::string fills_path = dir + "/fills_" + def.name + ".csv";
            write_fills_csv(result, data.full, c.assets, fills_path);
            out.files.push_back(fills_path);
        }
    }
    return out;
}

}  // namespace

RunArtifacts run(const RunConfig& config_in) {
    RunConfig c = config_in;
    c.agent.num_assets = c.assets.size();
    c.ipm.num_assets = c.assets.size();
    c.agent.fee_rate = c.exec.fee_rate;
    validate_config(c);
    fs::create_directories(c.output_dir);
    const std::string dir = c.output_dir;

    const PreparedData data = prepare_data(c);
    const AlignedDataset train_data = data.full.slice(data.train_begin, data.train_end);

    RunArtifacts artifacts;

    std::vector<GanPair> gans;
    if (c.use_dam) {
        for (std::size_t a = 1; a <= c.assets.size(); ++a) {
            AssetSeries series;
            series.asset_id = static_cast<int>(a);
            for (std::size_t t = 0; t < train_data.size(); ++t)
                series.bars.push_back({train_data.timestamps[t], train_data.open[a][t],
                                       train_data.high[a][t], train_data.low[a][t],
                                       train_data.close[a][t]});
            const std::vector<double> changes = pct_change(series);
            Rng rng(derive_seed(c.seed, "dam-asset-" + std::to_string(a)));
            gans.push_back(train_rgan(static_cast<int>(a), changes, c.gan, rng));
        }
        nlohmann::json gan_json = nlohmann::json::array();
        for (const auto& pair : gans) gan_json.push_back(pair.to_json());
        artifacts.gan_checkpoint_path = dir + "/gan_checkpoint.json";
        save_json(gan_json, artifacts.gan_checkpoint_path);
    }

    std::optional<Ndybm> ipm;
    if (c.use_ipm) {
        Rng rng(derive_seed(c.seed, "ipm-init"));
        ipm.emplace(c.ipm, rng);
    }

    Agent agent(c.agent, derive_seed(c.seed, "agent-init"));
    TrainModules modules;
    modules.ipm = ipm ? &*ipm : nullptr;
    modules.gans = c.use_dam ? &gans : nullptr;
    modules.bcm = c.use_bcm;
    modules.dam_horizon = c.dam_horizon;
    modules.ipm_input_smoothing = c.ipm_input_smoothing;
    modules.ipm_noise_sd = c.ipm_noise_sd;
    modules.savgol_window = c.savgol_window;
    modules.savgol_order = c.savgol_order;

    std::vector<TrainLogRow> log;
    const std::uint64_t train_seed = derive_seed(c.seed, "train");
    if (c.variant == "ddpg") {
        log = agent.train_ddpg(train_data, modules, train_seed);
    } else if (c.variant == "rdpg-dsr") {
        log = agent.train_rdpg(train_data, modules, RiskKind::Dsr, train_seed);
    } else {
        log = agent.train_rdpg(train_data, modules, RiskKind::D3r, train_seed);
    }
    artifacts.train_log_path = dir + "/train_log.csv";
    write_train_log_csv(log, artifacts.train_log_path);

    nlohmann::json ckpt;
    ckpt["agent"] = agent.checkpoint();
    if (ipm) ckpt["ipm"] = ipm->to_json();
    artifacts.checkpoint_path = dir + "/checkpoint.json";
    save_json(ckpt, artifacts.checkpoint_path);

    const EvalOutput eval = evaluate_impl(c, agent, ipm ? &*ipm : nullptr, data, dir);

    nlohmann::json report;
    report["config"] = config_echo(c);
    report["seed"] = c.seed;
    report["modules_enabled"] = {{"ipm", c.use_ipm}, {"dam", c.use_dam}, {"bcm", c.use_bcm}};
    report["variant"] = c.variant;
    report["checkpoint"] = artifacts.checkpoint_path;
    if (!artifacts.gan_checkpoint_path.empty()) report["gan_checkpoint"] = artifacts.gan_checkpoint_path;
    report["train_log"] = artifacts.train_log_path;
    report["files"] = eval.files;
    report["metrics"] = eval.metrics;
    artifacts.report_path = dir + "/report.json";
    artifacts.report = report;
    save_json(report, artifacts.report_path);
    return artifacts;
}

nlohmann::json evaluate_checkpoint(const RunConfig& config_in, const std::string& checkpoint_path,
                                   const std::string& output_dir) {
    RunConfig c = config_in;
    c.agent.num_assets = c.assets.size();
    c.ipm.num_assets = c.assets.size();
    c.agent.fee_rate = c.exec.fee_rate;
    validate_config(c);
    fs::create_directories(output_dir);
    const PreparedData data = prepare_data(c);

    const nlohmann::json ckpt = load_json(checkpoint_path);
    Agent agent(c.agent, derive_seed(c.seed, "agent-init"));
    agent.restore(ckpt.at("agent"));
    std::optional<Ndybm> ipm;
    if (c.use_ipm) {
        if (!ckpt.contains("ipm"))
            throw std::invalid_argument("checkpoint lacks the IPM state required by the config");
        Rng rng(derive_seed(c.seed, "ipm-init"));
        ipm.emplace(c.ipm, rng);
        ipm->from_json(ckpt.at("ipm"));
    }

    const EvalOutput eval = evaluate_impl(c, agent, ipm ? &*ipm : nullptr, data, output_dir);
    nlohmann::json report;
    report["config"] = config_echo(c);
    report["seed"] = c.seed;
    report["checkpoint"] = checkpoint_path;
    report["files"] = eval.files;
    report["metrics"] = eval.metrics;
    save_json(report, output_dir + "/report.json");
    return report;
}

std::size_t ingest_to_cache(const RunConfig& config, const std::string& out_path,
                            std::string* error_report) {
    auto ingest = ingest_csv(config.csv_path);
    if (config.aggregate_factor > 1) {
        for (auto& [symbol, series] : ingest.series) series = aggregate(series, config.aggregate_factor);
    }
    const AlignedDataset aligned = align_series(ingest.series, config.assets, config.index_symbol);
    write_aligned_csv(aligned, config.assets, config.index_symbol, out_path);
    if (error_report) {
        std::ostringstream ss;
        for (const auto& err : ingest.errors) ss << "line " << err.line << ": " << err.message << "\n";
        *error_report = ss.str();
    }
    return ingest.errors.size();
}

void predict_to_csv(const RunConfig& config_in, const std::string& out_path) {
    RunConfig c = config_in;
    c.ipm.num_assets = c.assets.size();
    auto ingest = ingest_csv(c.csv_path);
    if (c.aggregate_factor > 1) {
        for (auto& [symbol, series] : ingest.series) series = aggregate(series, c.aggregate_factor);
    }
    const AlignedDataset data = align_series(ingest.series, c.assets, c.index_symbol);
    Rng rng(derive_seed(c.seed, "ipm-init"));
    Ndybm model(c.ipm, rng);
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot open for writing: " + out_path);
    out << "timestamp,asset,pred_close,pred_high,pred_low\n";
    const std::size_t m = c.assets.size();
    for (std::size_t t = 1; t < data.size(); ++t) {
        // the forecast for bar t, made before observing it
        const std::vector<double> mu = model.mu();
        for (std::size_t a = 0; a < m; ++a) {
            out << format_timestamp(data.timestamps[t]) << ',' << c.assets[a] << ','
                << format_double(mu[a]) << ',' << format_double(mu[m + a]) << ','
                << format_double(mu[2 * m + a]) << "\n";
        }
        model.step(data.pct_change_vector(t));
    }
}

nlohmann::json report_from_equity_csv(const std::string& equity_csv, double periods_per_year,
                                      double alpha) {
    std::ifstream in(equity_csv);
    if (!in) throw std::runtime_error("cannot open equity CSV: " + equity_csv);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty equity CSV");
    std::vector<double> equity;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto last_comma = line.rfind(',');
        if (last_comma == std::string::npos) throw std::runtime_error("bad equity CSV row: " + line);
        const std::string field = line.substr(last_comma + 1);
        double v = 0.0;
        const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
        if (res.ec != std::errc()) throw std::runtime_error("bad equity value: " + field);
        equity.push_back(v);
    }
    if (equity.size() < 2) throw std::runtime_error("equity CSV needs at least two rows");
    ReturnSeries rs;
    rs.periods_per_year = periods_per_year;
    for (std::size_t i = 1; i < equity.size(); ++i) rs.r.push_back(std::log(equity[i] / equity[i - 1]));
    return metrics_to_json(compute_metrics(equity, rs, alpha));
}

}  // namespace portrl
