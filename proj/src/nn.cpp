#include "portrl/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace portrl {

Tensor init_uniform_fanin(Rng& rng, std::size_t fan_in, std::size_t rows, std::size_t cols) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t({rows, cols});
    for (double& e : t.v) e = rng.uniform(-bound, bound);
    return t;
}

DenseLayer make_dense(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    DenseLayer l;
    l.w = &ps.add(name + ".w", init_uniform_fanin(rng, in, in, out));
    l.b = &ps.add(name + ".b", Tensor({1, out}));
    return l;
}

LstmLayer make_lstm(ParamSet& ps, const std::string& name, std::size_t in, std::size_t hidden, Rng& rng) {
    LstmLayer l;
    l.in = in;
    l.hidden = hidden;
    l.wx = &ps.add(name + ".wx", init_uniform_fanin(rng, in, in, 4 * hidden));
    l.wh = &ps.add(name + ".wh", init_uniform_fanin(rng, hidden, hidden, 4 * hidden));
    Tensor bias({1, 4 * hidden});
    for (std::size_t j = hidden; j < 2 * hidden; ++j) bias.v[j] = 1.0;  // forget gate
    l.b = &ps.add(name + ".b", std::move(bias));
    return l;
}

NodeId dense_forward(Graph& g, NodeId x, const DenseLayer& layer) {
    return g.add_rowvec(g.matmul(x, g.param(*layer.w)), g.param(*layer.b));
}

NodeId seq_dense_forward(Graph& g, NodeId seq, const DenseLayer& layer) {
    const Tensor& ts = g.value(seq);
    const std::size_t t = ts.shape[0], b = ts.shape[1], f = ts.shape[2];
    NodeId flat = g.reshape(seq, {t * b, f});
    NodeId out = dense_forward(g, flat, layer);
    return g.reshape(out, {t, b, g.value(out).shape[1]});
}

NodeId bilstm_forward(Graph& g, NodeId seq, const LstmLayer& fwd, const LstmLayer& bwd) {
    NodeId h_fwd = g.lstm_sequence(seq, *fwd.wx, *fwd.wh, *fwd.b);
    NodeId h_bwd = g.reverse_time(g.lstm_sequence(g.reverse_time(seq), *bwd.wx, *bwd.wh, *bwd.b));
    return g.concat_feature(h_fwd, h_bwd);
}

MlpStack make_mlp(ParamSet& ps, const std::string& name, const std::vector<LayerSpec>& specs, Rng& rng) {
    MlpStack stack;
    stack.specs = specs;
    std::size_t idx = 0;
    for (const auto& spec : specs) {
        if (spec.kind == LayerSpec::Kind::Dense) {
            stack.dense.push_back(make_dense(ps, name + ".d" + std::to_string(idx++), spec.in, spec.out, rng));
        } else if (spec.kind == LayerSpec::Kind::LstmCell || spec.kind == LayerSpec::Kind::BidirectionalLstm) {
            throw std::invalid_argument("make_mlp: recurrent layers are not valid in a dense stack");
        }
    }
    return stack;
}

NodeId mlp_forward(Graph& g, NodeId x, const MlpStack& stack, Rng& rng, bool train) {
    NodeId cur = x;
    std::size_t di = 0;
    for (const auto& spec : stack.specs) {
        switch (spec.kind) {
            case LayerSpec::Kind::Dense:
                cur = dense_forward(g, cur, stack.dense[di++]);
                break;
            case LayerSpec::Kind::Act:
                switch (spec.act) {
                    case Activation::Tanh: cur = g.tanh_(cur); break;
                    case Activation::Sigmoid: cur = g.sigmoid_(cur); break;
                    case Activation::LeakyRelu: cur = g.leaky_relu(cur); break;
                    case Activation::Softmax: cur = g.softmax_rows(cur); break;
                }
                break;
            case LayerSpec::Kind::Dropout:
                cur = g.dropout(cur, spec.keep, rng, train);
                break;
            default:
                throw std::invalid_argument("mlp_forward: unsupported layer kind");
        }
    }
    return cur;
}

void Optimizer::step(ParamSet& params) {
    std::vector<Param*> all;
    all.reserve(params.size());
    for (auto& p : params) all.push_back(&p);
    step(all);
}

void Optimizer::step(const std::vector<Param*>& params) {
    // global-norm clip over the whole parameter collection
    double scale = 1.0;
    if (clip_norm_ > 0.0) {
        double sq = 0.0;
        for (Param* p : params)
            for (double gv : p->grad.v) sq += gv * gv;
        const double norm = std::sqrt(sq);
        if (norm > clip_norm_) scale = clip_norm_ / norm;
    }
    ++step_count_;
    for (Param* p : params) {
        if (p->grad.shape != p->value.shape) throw std::invalid_argument("optimizer: gradient shape mismatch for " + p->name);
        switch (kind_) {
            case OptKind::Sgd:
                for (std::size_t i = 0; i < p->value.size(); ++i)
                    p->value.v[i] -= lr_ * scale * p->grad.v[i];
                break;
            case OptKind::Adam: {
                Slot& s = slots_[p];
                if (s.m.size() != p->value.size()) {
                    s.m = Tensor(p->value.shape);
                    s.v = Tensor(p->value.shape);
                }
                const double t = static_cast<double>(step_count_);
                const double bc1 = 1.0 - std::pow(kAdamBeta1, t);
                const double bc2 = 1.0 - std::pow(kAdamBeta2, t);
                for (std::size_t i = 0; i < p->value.size(); ++i) {
                    const double gv = scale * p->grad.v[i];
                    s.m.v[i] = kAdamBeta1 * s.m.v[i] + (1.0 - kAdamBeta1) * gv;
                    s.v.v[i] = kAdamBeta2 * s.v.v[i] + (1.0 - kAdamBeta2) * gv * gv;
                    const double mhat = s.m.v[i] / bc1;
                    const double vhat = s.v.v[i] / bc2;
                    p->value.v[i] -= lr_ * mhat / (std::sqrt(vhat) + kAdamEps);
                }
                break;
            }
            case OptKind::RmsProp: {
                Slot& s = slots_[p];
                if (s.v.size() != p->value.size()) s.v = Tensor(p->value.shape);
                for (std::size_t i = 0; i < p->value.size(); ++i) {
                    const double gv = scale * p->grad.v[i];
                    s.v.v[i] = kRmsDecay * s.v.v[i] + (1.0 - kRmsDecay) * gv * gv;
                    p->value.v[i] -= lr_ * gv / (std::sqrt(s.v.v[i]) + kRmsEps);
                }
                break;
            }
        }
    }
}

std::vector<std::vector<double>> Optimizer::export_slots(const std::vector<Param*>& params) const {
    std::vector<std::vector<double>> out;
    for (Param* p : params) {
        auto it = slots_.find(p);
        if (it == slots_.end()) {
            out.emplace_back(p->value.size(), 0.0);
            out.emplace_back(p->value.size(), 0.0);
        } else {
            out.push_back(it->second.m.size() ? it->second.m.v : std::vector<double>(p->value.size(), 0.0));
            out.push_back(it->second.v.size() ? it->second.v.v : std::vector<double>(p->value.size(), 0.0));
        }
    }
    return out;
}

void Optimizer::import_slots(const std::vector<Param*>& params,
                             const std::vector<std::vector<double>>& slots, std::int64_t steps) {
    if (slots.size() != 2 * params.size()) throw std::invalid_argument("import_slots: slot count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        Slot& s = slots_[params[i]];
        s.m = Tensor(params[i]->value.shape, slots[2 * i]);
        s.v = Tensor(params[i]->value.shape, slots[2 * i + 1]);
    }
    step_count_ = steps;
}

LossResult loss_mse(const Tensor& prediction, const Tensor& target) {
    if (!prediction.same_shape(target)) throw std::invalid_argument("loss_mse: shape mismatch");
    LossResult r;
    r.grad = Tensor(prediction.shape);
    const double n = static_cast<double>(prediction.size());
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        const double d = prediction.v[i] - target.v[i];
        r.value += d * d;
        r.grad.v[i] = 2.0 * d / n;
    }
    r.value /= n;
    return r;
}

LossResult loss_binary_log(const Tensor& prediction, const Tensor& target) {
    if (!prediction.same_shape(target)) throw std::invalid_argument("loss_binary_log: shape mismatch");
    LossResult r;
    r.grad = Tensor(prediction.shape);
    const double n = static_cast<double>(prediction.size());
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        const double p = std::clamp(prediction.v[i], 1e-7, 1.0 - 1e-7);
        const double t = target.v[i];
        r.value -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
        if (prediction.v[i] > 1e-7 && prediction.v[i] < 1.0 - 1e-7)
            r.grad.v[i] = (p - t) / (p * (1.0 - p) * n);
    }
    r.value /= n;
    return r;
}

void perturb_params(ParamSet& params, double sigma, Rng& rng) {
    for (auto& p : params)
        for (double& e : p.value.v) e += sigma * rng.normal();
}

void soft_update(const ParamSet& online, ParamSet& target, double tau) {
    if (online.size() != target.size()) throw std::invalid_argument("soft_update: parameter count mismatch");
    for (std::size_t i = 0; i < online.size(); ++i) {
        const Param& src = online.at(i);
        Param& dst = target.at(i);
        if (src.value.shape != dst.value.shape) throw std::invalid_argument("soft_update: shape mismatch");
        for (std::size_t j = 0; j < src.value.size(); ++j)
            dst.value.v[j] = tau * src.value.v[j] + (1.0 - tau) * dst.value.v[j];
    }
}

}  // namespace portrl
