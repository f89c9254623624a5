#include "portrl/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace portrl {

namespace {
constexpr double kBceClampLo = 1e-7;
constexpr double kBceClampHi = 1.0 - 1e-7;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

Param& ParamSet::add(std::string name, Tensor init) {
    params_.emplace_back(std::move(name), std::move(init));
    return params_.back();
}

Param* ParamSet::find(const std::string& name) {
    for (auto& p : params_) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

const Param* ParamSet::find(const std::string& name) const {
    for (const auto& p : params_) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

void ParamSet::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

void ParamSet::copy_values_from(const ParamSet& other) {
    if (other.size() != size()) throw std::invalid_argument("copy_values_from: parameter count mismatch");
    for (std::size_t i = 0; i < size(); ++i) {
        if (params_[i].value.shape != other.at(i).value.shape)
            throw std::invalid_argument("copy_values_from: shape mismatch at " + params_[i].name);
        params_[i].value.v = other.at(i).value.v;
    }
}

NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

void Graph::check_finite(const Node& n, const char* what) const {
    if (!all_finite(n.val)) throw std::runtime_error(std::string("non-finite value produced by ") + what);
}

NodeId Graph::constant(Tensor t) {
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(t);
    if (!all_finite(n.val)) throw std::runtime_error("non-finite constant");
    return push(std::move(n));
}

NodeId Graph::param(Param& p) {
    Node n;
    n.op = Op::Leaf;
    n.val = p.value;
    n.p = &p;
    if (!all_finite(n.val)) throw std::runtime_error("non-finite parameter " + p.name);
    return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
    const Tensor& ta = nodes_[a].val;
    const Tensor& tb = nodes_[b].val;
    if (!ta.same_shape(tb)) throw std::invalid_argument("add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    Node n;
    n.op = Op::Add;
    n.in = {a, b, -1};
    n.val = ta;
    for (std::size_t i = 0; i < n.val.size(); ++i) n.val.v[i] += tb.v[i];
    check_finite(n, "add");
    return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
    const Tensor& ta = nodes_[a].val;
    const Tensor& tb = nodes_[b].val;
    if (!ta.same_shape(tb)) throw std::invalid_argument("sub: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    Node n;
    n.op = Op::Sub;
    n.in = {a, b, -1};
    n.val = ta;
    for (std::size_t i = 0; i < n.val.size(); ++i) n.val.v[i] -= tb.v[i];
    check_finite(n, "sub");
    return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
    const Tensor& ta = nodes_[a].val;
    const Tensor& tb = nodes_[b].val;
    if (!ta.same_shape(tb)) throw std::invalid_argument("mul: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    Node n;
    n.op = Op::Mul;
    n.in = {a, b, -1};
    n.val = ta;
    for (std::size_t i = 0; i < n.val.size(); ++i) n.val.v[i] *= tb.v[i];
    check_finite(n, "mul");
    return push(std::move(n));
}

NodeId Graph::add_rowvec(NodeId m, NodeId row) {
    const Tensor& tm = nodes_[m].val;
    const Tensor& tr = nodes_[row].val;
    if (tm.rank() != 2 || tr.size() != tm.shape[1])
        throw std::invalid_argument("add_rowvec: shape mismatch " + tm.shape_str() + " vs " + tr.shape_str());
    Node n;
    n.op = Op::AddRowvec;
    n.in = {m, row, -1};
    n.val = tm;
    const std::size_t r = tm.shape[0], c = tm.shape[1];
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) n.val.v[i * c + j] += tr.v[j];
    check_finite(n, "add_rowvec");
    return push(std::move(n));
}

NodeId Graph::add_colvec(NodeId m, NodeId col) {
    const Tensor& tm = nodes_[m].val;
    const Tensor& tc = nodes_[col].val;
    if (tm.rank() != 2 || tc.size() != tm.shape[0])
        throw std::invalid_argument("add_colvec: shape mismatch " + tm.shape_str() + " vs " + tc.shape_str());
    Node n;
    n.op = Op::AddColvec;
    n.in = {m, col, -1};
    n.val = tm;
    const std::size_t r = tm.shape[0], c = tm.shape[1];
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) n.val.v[i * c + j] += tc.v[i];
    check_finite(n, "add_colvec");
    return push(std::move(n));
}

NodeId Graph::scale(NodeId x, double k) {
    Node n;
    n.op = Op::Scale;
    n.in = {x, -1, -1};
    n.k0 = k;
    n.val = nodes_[x].val;
    for (double& e : n.val.v) e *= k;
    check_finite(n, "scale");
    return push(std::move(n));
}

NodeId Graph::add_scalar(NodeId x, double k) {
    Node n;
    n.op = Op::AddScalar;
    n.in = {x, -1, -1};
    n.k0 = k;
    n.val = nodes_[x].val;
    for (double& e : n.val.v) e += k;
    check_finite(n, "add_scalar");
    return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    Node n;
    n.op = Op::MatMul;
    n.in = {a, b, -1};
    portrl::matmul(nodes_[a].val, nodes_[b].val, n.val);
    check_finite(n, "matmul");
    return push(std::move(n));
}

NodeId Graph::matmul_nt(NodeId a, NodeId b) {
    Node n;
    n.op = Op::MatMulNT;
    n.in = {a, b, -1};
    portrl::matmul_nt(nodes_[a].val, nodes_[b].val, n.val);
    check_finite(n, "matmul_nt");
    return push(std::move(n));
}

NodeId Graph::tanh_(NodeId x) {
    Node n;
    n.op = Op::Tanh;
    n.in = {x, -1, -1};
    n.val = nodes_[x].val;
    for (double& e : n.val.v) e = std::tanh(e);
    check_finite(n, "tanh");
    return push(std::move(n));
}

NodeId Graph::sigmoid_(NodeId x) {
    Node n;
    n.op = Op::Sigmoid;
    n.in = {x, -1, -1};
    n.val = nodes_[x].val;
    for (double& e : n.val.v) e = sigmoid(e);
    check_finite(n, "sigmoid");
    return push(std::move(n));
}

NodeId Graph::leaky_relu(NodeId x, double slope) {
    Node n;
    n.op = Op::LeakyRelu;
    n.in = {x, -1, -1};
    n.k0 = slope;
    n.val = nodes_[x].val;
    for (double& e : n.val.v) e = e > 0.0 ? e : slope * e;
    check_finite(n, "leaky_relu");
    return push(std::move(n));
}

NodeId Graph::exp_(NodeId x) {
    Node n;
    n.op = Op::Exp;
    n.in = {x, -1, -1};
    n.val = nodes_[x].val;
    for (double& e : n.val.v) e = std::exp(e);
    check_finite(n, "exp");
    return push(std::move(n));
}

NodeId Graph::log_(NodeId x) {
    Node n;
    n.op = Op::Log;
    n.in = {x, -1, -1};
    n.val = nodes_[x].val;
    for (double& e : n.val.v) e = std::log(e);
    check_finite(n, "log");
    return push(std::move(n));
}

NodeId Graph::softmax_rows(NodeId x) {
    const Tensor& tx = nodes_[x].val;
    if (tx.rank() != 2) throw std::invalid_argument("softmax_rows: expected rank-2 input");
    Node n;
    n.op = Op::SoftmaxRows;
    n.in = {x, -1, -1};
    n.val = tx;
    const std::size_t r = tx.shape[0], c = tx.shape[1];
    for (std::size_t i = 0; i < r; ++i) {
        double* row = n.val.v.data() + i * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (std::size_t j = 0; j < c; ++j) row[j] /= sum;
    }
    check_finite(n, "softmax");
    return push(std::move(n));
}

NodeId Graph::dropout(NodeId x, double keep, Rng& rng, bool train) {
    if (keep <= 0.0 || keep > 1.0) throw std::invalid_argument("dropout: keep probability out of (0,1]");
    Node n;
    n.op = Op::Dropout;
    n.in = {x, -1, -1};
    n.val = nodes_[x].val;
    n.local0 = Tensor(n.val.shape);
    if (!train || keep == 1.0) {
        std::fill(n.local0.v.begin(), n.local0.v.end(), 1.0);
    } else {
        const double inv = 1.0 / keep;
        for (std::size_t i = 0; i < n.val.size(); ++i) {
            const double m = rng.uniform() < keep ? inv : 0.0;
            n.local0.v[i] = m;
            n.val.v[i] *= m;
        }
    }
    check_finite(n, "dropout");
    return push(std::move(n));
}

NodeId Graph::concat_cols(const std::vector<NodeId>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: empty input list");
    const std::size_t r = nodes_[xs[0]].val.shape[0];
    std::size_t total = 0;
    for (NodeId id : xs) {
        const Tensor& t = nodes_[id].val;
        if (t.rank() != 2 || t.shape[0] != r) throw std::invalid_argument("concat_cols: incompatible shapes");
        total += t.shape[1];
    }
    Node n;
    n.op = Op::ConcatCols;
    n.many = xs;
    n.val = Tensor({r, total});
    std::size_t off = 0;
    for (NodeId id : xs) {
        const Tensor& t = nodes_[id].val;
        const std::size_t c = t.shape[1];
        for (std::size_t i = 0; i < r; ++i)
            std::memcpy(n.val.v.data() + i * total + off, t.v.data() + i * c, c * sizeof(double));
        off += c;
    }
    return push(std::move(n));
}

NodeId Graph::slice_cols(NodeId x, std::size_t begin, std::size_t end) {
    const Tensor& tx = nodes_[x].val;
    if (tx.rank() != 2 || end > tx.shape[1] || begin >= end)
        throw std::invalid_argument("slice_cols: bad range");
    Node n;
    n.op = Op::SliceCols;
    n.in = {x, -1, -1};
    n.meta = {begin, end};
    const std::size_t r = tx.shape[0], c = tx.shape[1], w = end - begin;
    n.val = Tensor({r, w});
    for (std::size_t i = 0; i < r; ++i)
        std::memcpy(n.val.v.data() + i * w, tx.v.data() + i * c + begin, w * sizeof(double));
    return push(std::move(n));
}

NodeId Graph::reshape(NodeId x, std::vector<std::size_t> shape) {
    const Tensor& tx = nodes_[x].val;
    if (Tensor::count(shape) != tx.size()) throw std::invalid_argument("reshape: element count mismatch");
    Node n;
    n.op = Op::Reshape;
    n.in = {x, -1, -1};
    n.val = Tensor(std::move(shape), tx.v);
    return push(std::move(n));
}

NodeId Graph::transpose(NodeId x) {
    const Tensor& tx = nodes_[x].val;
    if (tx.rank() != 2) throw std::invalid_argument("transpose: expected rank-2 input");
    Node n;
    n.op = Op::Transpose;
    n.in = {x, -1, -1};
    const std::size_t r = tx.shape[0], c = tx.shape[1];
    n.val = Tensor({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) n.val.v[j * r + i] = tx.v[i * c + j];
    return push(std::move(n));
}

NodeId Graph::sum_all(NodeId x) {
    Node n;
    n.op = Op::SumAll;
    n.in = {x, -1, -1};
    double s = 0.0;
    for (double e : nodes_[x].val.v) s += e;
    n.val = Tensor::scalar(s);
    check_finite(n, "sum_all");
    return push(std::move(n));
}

NodeId Graph::mean_all(NodeId x) {
    Node n;
    n.op = Op::MeanAll;
    n.in = {x, -1, -1};
    const std::size_t cnt = nodes_[x].val.size();
    double s = 0.0;
    for (double e : nodes_[x].val.v) s += e;
    n.val = Tensor::scalar(s / static_cast<double>(cnt));
    check_finite(n, "mean_all");
    return push(std::move(n));
}

NodeId Graph::rowwise_sum(NodeId x) {
    const Tensor& tx = nodes_[x].val;
    if (tx.rank() != 2) throw std::invalid_argument("rowwise_sum: expected rank-2 input");
    Node n;
    n.op = Op::RowwiseSum;
    n.in = {x, -1, -1};
    const std::size_t r = tx.shape[0], c = tx.shape[1];
    n.val = Tensor({r, 1});
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += tx.v[i * c + j];
        n.val.v[i] = s;
    }
    check_finite(n, "rowwise_sum");
    return push(std::move(n));
}

NodeId Graph::mse_loss(NodeId pred, NodeId target) {
    const Tensor& tp = nodes_[pred].val;
    const Tensor& tt = nodes_[target].val;
    if (!tp.same_shape(tt)) throw std::invalid_argument("mse_loss: shape mismatch");
    Node n;
    n.op = Op::MseLoss;
    n.in = {pred, target, -1};
    double s = 0.0;
    for (std::size_t i = 0; i < tp.size(); ++i) {
        const double d = tp.v[i] - tt.v[i];
        s += d * d;
    }
    n.val = Tensor::scalar(s / static_cast<double>(tp.size()));
    check_finite(n, "mse_loss");
    return push(std::move(n));
}

NodeId Graph::bce_loss(NodeId pred, NodeId target) {
    const Tensor& tp = nodes_[pred].val;
    const Tensor& tt = nodes_[target].val;
    if (!tp.same_shape(tt)) throw std::invalid_argument("bce_loss: shape mismatch");
    Node n;
    n.op = Op::BceLoss;
    n.in = {pred, target, -1};
    n.local0 = tp;  // clamped predictions
    double s = 0.0;
    for (std::size_t i = 0; i < tp.size(); ++i) {
        const double p = std::clamp(tp.v[i], kBceClampLo, kBceClampHi);
        n.local0.v[i] = p;
        s += tt.v[i] * std::log(p) + (1.0 - tt.v[i]) * std::log(1.0 - p);
    }
    n.val = Tensor::scalar(-s / static_cast<double>(tp.size()));
    check_finite(n, "bce_loss");
    return push(std::move(n));
}

NodeId Graph::reverse_time(NodeId seq) {
    const Tensor& ts = nodes_[seq].val;
    if (ts.rank() != 3) throw std::invalid_argument("reverse_time: expected rank-3 input");
    Node n;
    n.op = Op::ReverseTime;
    n.in = {seq, -1, -1};
    n.val = Tensor(ts.shape);
    const std::size_t t = ts.shape[0], step = ts.shape[1] * ts.shape[2];
    for (std::size_t i = 0; i < t; ++i)
        std::memcpy(n.val.v.data() + i * step, ts.v.data() + (t - 1 - i) * step, step * sizeof(double));
    return push(std::move(n));
}

NodeId Graph::concat_feature(NodeId a, NodeId b) {
    const Tensor& ta = nodes_[a].val;
    const Tensor& tb = nodes_[b].val;
    if (ta.rank() != 3 || tb.rank() != 3 || ta.shape[0] != tb.shape[0] || ta.shape[1] != tb.shape[1])
        throw std::invalid_argument("concat_feature: incompatible shapes");
    Node n;
    n.op = Op::ConcatFeature;
    n.in = {a, b, -1};
    const std::size_t t = ta.shape[0], bs = ta.shape[1], fa = ta.shape[2], fb = tb.shape[2];
    n.val = Tensor({t, bs, fa + fb});
    for (std::size_t i = 0; i < t * bs; ++i) {
        std::memcpy(n.val.v.data() + i * (fa + fb), ta.v.data() + i * fa, fa * sizeof(double));
        std::memcpy(n.val.v.data() + i * (fa + fb) + fa, tb.v.data() + i * fb, fb * sizeof(double));
    }
    return push(std::move(n));
}

NodeId Graph::time_concat(NodeId seq) {
    const Tensor& ts = nodes_[seq].val;
    if (ts.rank() != 3) throw std::invalid_argument("time_concat: expected rank-3 input");
    Node n;
    n.op = Op::TimeConcat;
    n.in = {seq, -1, -1};
    const std::size_t t = ts.shape[0], bs = ts.shape[1], f = ts.shape[2];
    n.val = Tensor({bs, t * f});
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < bs; ++j)
            std::memcpy(n.val.v.data() + j * (t * f) + i * f,
                        ts.v.data() + (i * bs + j) * f, f * sizeof(double));
    return push(std::move(n));
}

void Graph::lstm_step_forward(const double* x, std::size_t batch, std::size_t in_dim,
                              std::size_t hidden, const Param& wx, const Param& wh,
                              const Param& b, const double* h_prev, const double* c_prev,
                              double* gates, double* c_out, double* h_out) {
    const std::size_t g4 = 4 * hidden;
    // gates = x*Wx + h_prev*Wh + b
    for (std::size_t i = 0; i < batch; ++i) {
        double* grow = gates + i * g4;
        std::memcpy(grow, b.value.v.data(), g4 * sizeof(double));
        const double* xrow = x + i * in_dim;
        for (std::size_t k = 0; k < in_dim; ++k) {
            const double xv = xrow[k];
            const double* wrow = wx.value.v.data() + k * g4;
            for (std::size_t j = 0; j < g4; ++j) grow[j] += xv * wrow[j];
        }
        const double* hrow = h_prev + i * hidden;
        for (std::size_t k = 0; k < hidden; ++k) {
            const double hv = hrow[k];
            const double* wrow = wh.value.v.data() + k * g4;
            for (std::size_t j = 0; j < g4; ++j) grow[j] += hv * wrow[j];
        }
    }
    // activations and state update; gate order (i, f, g, o)
    for (std::size_t i = 0; i < batch; ++i) {
        double* grow = gates + i * g4;
        for (std::size_t j = 0; j < hidden; ++j) {
            const double gi = sigmoid(grow[j]);
            const double gf = sigmoid(grow[hidden + j]);
            const double gg = std::tanh(grow[2 * hidden + j]);
            const double go = sigmoid(grow[3 * hidden + j]);
            grow[j] = gi;
            grow[hidden + j] = gf;
            grow[2 * hidden + j] = gg;
            grow[3 * hidden + j] = go;
            const double c = gf * c_prev[i * hidden + j] + gi * gg;
            c_out[i * hidden + j] = c;
            h_out[i * hidden + j] = go * std::tanh(c);
        }
    }
}

void Graph::lstm_step_backward(std::size_t batch, std::size_t in_dim, std::size_t hidden,
                               Param& wx, Param& wh, Param& b, const double* x,
                               const double* h_prev, const double* c_prev, const double* gates,
                               const double* c_cur, const double* dh, double* dc,
                               double* dx, double* dh_prev) {
    const std::size_t g4 = 4 * hidden;
    std::vector<double> dgates(batch * g4);
    for (std::size_t i = 0; i < batch; ++i) {
        const double* grow = gates + i * g4;
        double* dgrow = dgates.data() + i * g4;
        for (std::size_t j = 0; j < hidden; ++j) {
            const std::size_t idx = i * hidden + j;
            const double gi = grow[j], gf = grow[hidden + j], gg = grow[2 * hidden + j], go = grow[3 * hidden + j];
            const double tc = std::tanh(c_cur[idx]);
            const double dhv = dh[idx];
            double dcv = dc[idx] + dhv * go * (1.0 - tc * tc);
            const double dov = dhv * tc;
            const double div = dcv * gg;
            const double dfv = dcv * c_prev[idx];
            const double dgv = dcv * gi;
            dgrow[j] = div * gi * (1.0 - gi);
            dgrow[hidden + j] = dfv * gf * (1.0 - gf);
            dgrow[2 * hidden + j] = dgv * (1.0 - gg * gg);
            dgrow[3 * hidden + j] = dov * go * (1.0 - go);
            dc[idx] = dcv * gf;  // carried to the previous step
        }
    }
    // db += colsum(dgates); dWx += x^T dgates; dWh += h_prev^T dgates
    for (std::size_t i = 0; i < batch; ++i) {
        const double* dgrow = dgates.data() + i * g4;
        for (std::size_t j = 0; j < g4; ++j) b.grad.v[j] += dgrow[j];
        const double* xrow = x + i * in_dim;
        for (std::size_t k = 0; k < in_dim; ++k) {
            const double xv = xrow[k];
            double* wrow = wx.grad.v.data() + k * g4;
            for (std::size_t j = 0; j < g4; ++j) wrow[j] += xv * dgrow[j];
        }
        const double* hrow = h_prev + i * hidden;
        for (std::size_t k = 0; k < hidden; ++k) {
            const double hv = hrow[k];
            double* wrow = wh.grad.v.data() + k * g4;
            for (std::size_t j = 0; j < g4; ++j) wrow[j] += hv * dgrow[j];
        }
    }
    // dx += dgates * Wx^T; dh_prev += dgates * Wh^T
    for (std::size_t i = 0; i < batch; ++i) {
        const double* dgrow = dgates.data() + i * g4;
        double* dxrow = dx + i * in_dim;
        for (std::size_t k = 0; k < in_dim; ++k) {
            const double* wrow = wx.value.v.data() + k * g4;
            double acc = 0.0;
            for (std::size_t j = 0; j < g4; ++j) acc += dgrow[j] * wrow[j];
            dxrow[k] += acc;
        }
        double* dhrow = dh_prev + i * hidden;
        for (std::size_t k = 0; k < hidden; ++k) {
            const double* wrow = wh.value.v.data() + k * g4;
            double acc = 0.0;
            for (std::size_t j = 0; j < g4; ++j) acc += dgrow[j] * wrow[j];
            dhrow[k] += acc;
        }
    }
}

NodeId Graph::lstm_sequence(NodeId seq, Param& wx, Param& wh, Param& b) {
    const Tensor& ts = nodes_[seq].val;
    if (ts.rank() != 3) throw std::invalid_argument("lstm_sequence: expected (time, batch, feature) input");
    const std::size_t t = ts.shape[0], batch = ts.shape[1], in_dim = ts.shape[2];
    const std::size_t hidden = wh.value.shape[0];
    if (wx.value.shape[0] != in_dim || wx.value.shape[1] != 4 * hidden ||
        wh.value.shape[1] != 4 * hidden || b.value.size() != 4 * hidden)
        throw std::invalid_argument("lstm_sequence: parameter shapes inconsistent");
    Node n;
    n.op = Op::LstmSeq;
    n.in = {seq, -1, -1};
    n.lp = {&wx, &wh, &b};
    n.val = Tensor({t, batch, hidden});
    n.local0 = Tensor({t, batch, 4 * hidden});  // activated gates
    n.local1 = Tensor({t, batch, hidden});      // cell states
    std::vector<double> h0(batch * hidden, 0.0), c0(batch * hidden, 0.0);
    const double* h_prev = h0.data();
    const double* c_prev = c0.data();
    for (std::size_t step = 0; step < t; ++step) {
        lstm_step_forward(ts.v.data() + step * batch * in_dim, batch, in_dim, hidden, wx, wh, b,
                          h_prev, c_prev,
                          n.local0.v.data() + step * batch * 4 * hidden,
                          n.local1.v.data() + step * batch * hidden,
                          n.val.v.data() + step * batch * hidden);
        h_prev = n.val.v.data() + step * batch * hidden;
        c_prev = n.local1.v.data() + step * batch * hidden;
    }
    check_finite(n, "lstm_sequence");
    return push(std::move(n));
}

NodeId Graph::lstm_cell(NodeId x, NodeId h_prev, NodeId c_prev, Param& wx, Param& wh, Param& b) {
    const Tensor& tx = nodes_[x].val;
    const Tensor& th = nodes_[h_prev].val;
    const Tensor& tc = nodes_[c_prev].val;
    if (tx.rank() != 2 || th.rank() != 2 || tc.rank() != 2)
        throw std::invalid_argument("lstm_cell: expected rank-2 inputs");
    const std::size_t batch = tx.shape[0], in_dim = tx.shape[1], hidden = wh.value.shape[0];
    if (th.shape[0] != batch || th.shape[1] != hidden || !tc.same_shape(th))
        throw std::invalid_argument("lstm_cell: state shapes inconsistent");
    if (wx.value.shape[0] != in_dim || wx.value.shape[1] != 4 * hidden)
        throw std::invalid_argument("lstm_cell: parameter shapes inconsistent");
    Node n;
    n.op = Op::LstmCell;
    n.in = {x, h_prev, c_prev};
    n.lp = {&wx, &wh, &b};
    n.val = Tensor({batch, hidden});
    n.local0 = Tensor({batch, 4 * hidden});
    n.local1 = Tensor({batch, hidden});
    lstm_step_forward(tx.v.data(), batch, in_dim, hidden, wx, wh, b, th.v.data(), tc.v.data(),
                      n.local0.v.data(), n.local1.v.data(), n.val.v.data());
    check_finite(n, "lstm_cell");
    return push(std::move(n));
}

void Graph::backward(NodeId loss) {
    if (nodes_[loss].val.size() != 1) throw std::invalid_argument("backward: loss node is not scalar");
    backward_from(loss, Tensor::scalar(1.0));
}

void Graph::backward_from(NodeId node, const Tensor& seed) {
    if (!nodes_[node].val.same_shape(seed)) throw std::invalid_argument("backward_from: seed shape mismatch");
    for (auto& n : nodes_) n.grad = Tensor(n.val.shape);
    nodes_[node].grad = seed;
    for (NodeId id = node; id >= 0; --id) backprop(nodes_[id]);
}

void Graph::backprop(Node& n) {
    const Tensor& g = n.grad;
    auto& N = nodes_;
    switch (n.op) {
        case Op::Leaf:
            if (n.p) {
                for (std::size_t i = 0; i < g.size(); ++i) n.p->grad.v[i] += g.v[i];
            }
            break;
        case Op::Add:
            for (std::size_t i = 0; i < g.size(); ++i) N[n.in[0]].grad.v[i] += g.v[i];
            for (std::size_t i = 0; i < g.size(); ++i) N[n.in[1]].grad.v[i] += g.v[i];
            break;
        case Op::Sub:
            for (std::size_t i = 0; i < g.size(); ++i) N[n.in[0]].grad.v[i] += g.v[i];
            for (std::size_t i = 0; i < g.size(); ++i) N[n.in[1]].grad.v[i] -= g.v[i];
            break;
        case Op::Mul:
            for (std::size_t i = 0; i < g.size(); ++i) {
                N[n.in[0]].grad.v[i] += g.v[i] * N[n.in[1]].val.v[i];
                N[n.in[1]].grad.v[i] += g.v[i] * N[n.in[0]].val.v[i];
            }
            break;
        case Op::AddRowvec: {
            const std::size_t r = g.shape[0], c = g.shape[1];
            for (std::size_t i = 0; i < g.size(); ++i) N[n.in[0]].grad.v[i] += g.v[i];
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) N[n.in[1]].grad.v[j] += g.v[i * c + j];
            break;
        }
        case Op::AddColvec: {
            const std::size_t r = g.shape[0], c = g.shape[1];
            for (std::size_t i = 0; i < g.size(); ++i) N[n.in[0]].grad.v[i] += g.v[i];
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) N[n.in[1]].grad.v[i] += g.v[i * c + j];
            break;
        }
        case Op::Scale:
            for (std::size_t i = 0; i < g.size(); ++i) N[n.in[0]].grad.v[i] += n.k0 * g.v[i];
            break;
        case Op::AddScalar:
            for (std::size_t i = 0; i < g.size(); ++i) N[n.in[0]].grad.v[i] += g.v[i];
            break;
        case Op::MatMul: {
            Tensor da, db;
            portrl::matmul_nt(g, N[n.in[1]].val, da);
            portrl::matmul_tn(N[n.in[0]].val, g, db);
            for (std::size_t i = 0; i < da.size(); ++i) N[n.in[0]].grad.v[i] += da.v[i];
            for (std::size_t i = 0; i < db.size(); ++i) N[n.in[1]].grad.v[i] += db.v[i];
            break;
        }
        case Op::MatMulNT: {
            Tensor da, db;
            portrl::matmul(g, N[n.in[1]].val, da);
            portrl::matmul_tn(g, N[n.in[0]].val, db);
            for (std::size_t i = 0; i < da.size(); ++i) N[n.in[0]].grad.v[i] += da.v[i];
            for (std::size_t i = 0; i < db.size(); ++i) N[n.in[1]].grad.v[i] += db.v[i];
            break;
        }
        case Op::Tanh:
            for (std::size_t i = 0; i < g.size(); ++i)
                N[n.in[0]].grad.v[i] += g.v[i] * (1.0 - n.val.v[i] * n.val.v[i]);
            break;
        case Op::Sigmoid:
            for (std::size_t i = 0; i < g.size(); ++i)
                N[n.in[0]].grad.v[i] += g.v[i] * n.val.v[i] * (1.0 - n.val.v[i]);
            break;
        case Op::LeakyRelu:
            for (std::size_t i = 0; i < g.size(); ++i)
                N[n.in[0]].grad.v[i] += g.v[i] * (N[n.in[0]].val.v[i] > 0.0 ? 1.0 : n.k0);
            break;
        case Op::Exp:
            for (std::size_t i = 0; i < g.size(); ++i) N[n.in[0]].grad.v[i] += g.v[i] * n.val.v[i];
            break;
        case Op::Log:
            for (std::size_t i = 0; i < g.size(); ++i) N[n.in[0]].grad.v[i] += g.v[i] / N[n.in[0]].val.v[i];
            break;
        case Op::SoftmaxRows: {
            const std::size_t r = g.shape[0], c = g.shape[1];
            for (std::size_t i = 0; i < r; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += g.v[i * c + j] * n.val.v[i * c + j];
                for (std::size_t j = 0; j < c; ++j)
                    N[n.in[0]].grad.v[i * c + j] += n.val.v[i * c + j] * (g.v[i * c + j] - dot);
            }
            break;
        }
        case Op::Dropout:
            for (std::size_t i = 0; i < g.size(); ++i) N[n.in[0]].grad.v[i] += g.v[i] * n.local0.v[i];
            break;
        case Op::ConcatCols: {
            const std::size_t r = g.shape[0], total = g.shape[1];
            std::size_t off = 0;
            for (NodeId id : n.many) {
                Tensor& dst = N[id].grad;
                const std::size_t c = N[id].val.shape[1];
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) dst.v[i * c + j] += g.v[i * total + off + j];
                off += c;
            }
            break;
        }
        case Op::SliceCols: {
            const std::size_t begin = n.meta[0];
            const std::size_t r = g.shape[0], w = g.shape[1], c = N[n.in[0]].val.shape[1];
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < w; ++j) N[n.in[0]].grad.v[i * c + begin + j] += g.v[i * w + j];
            break;
        }
        case Op::Reshape:
            for (std::size_t i = 0; i < g.size(); ++i) N[n.in[0]].grad.v[i] += g.v[i];
            break;
        case Op::Transpose: {
            const std::size_t r = N[n.in[0]].val.shape[0], c = N[n.in[0]].val.shape[1];
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) N[n.in[0]].grad.v[i * c + j] += g.v[j * r + i];
            break;
        }
        case Op::SumAll:
            for (std::size_t i = 0; i < N[n.in[0]].grad.size(); ++i) N[n.in[0]].grad.v[i] += g.v[0];
            break;
        case Op::MeanAll: {
            const double k = g.v[0] / static_cast<double>(N[n.in[0]].val.size());
            for (std::size_t i = 0; i < N[n.in[0]].grad.size(); ++i) N[n.in[0]].grad.v[i] += k;
            break;
        }
        case Op::RowwiseSum: {
            const std::size_t r = N[n.in[0]].val.shape[0], c = N[n.in[0]].val.shape[1];
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) N[n.in[0]].grad.v[i * c + j] += g.v[i];
            break;
        }
        case Op::MseLoss: {
            const Tensor& p = N[n.in[0]].val;
            const Tensor& t = N[n.in[1]].val;
            const double k = 2.0 * g.v[0] / static_cast<double>(p.size());
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double d = k * (p.v[i] - t.v[i]);
                N[n.in[0]].grad.v[i] += d;
                N[n.in[1]].grad.v[i] -= d;
            }
            break;
        }
        case Op::BceLoss: {
            const Tensor& praw = N[n.in[0]].val;
            const Tensor& pc = n.local0;
            const Tensor& t = N[n.in[1]].val;
            const double k = g.v[0] / static_cast<double>(pc.size());
            for (std::size_t i = 0; i < pc.size(); ++i) {
                // zero gradient where the clamp is active
                if (praw.v[i] > kBceClampLo && praw.v[i] < kBceClampHi)
                    N[n.in[0]].grad.v[i] += k * (pc.v[i] - t.v[i]) / (pc.v[i] * (1.0 - pc.v[i]));
                N[n.in[1]].grad.v[i] += k * std::log((1.0 - pc.v[i]) / pc.v[i]);
            }
            break;
        }
        case Op::LstmSeq: {
            const Tensor& ts = N[n.in[0]].val;
            const std::size_t t = ts.shape[0], batch = ts.shape[1], in_dim = ts.shape[2];
            const std::size_t hidden = n.val.shape[2];
            std::vector<double> dc(batch * hidden, 0.0), dh(batch * hidden, 0.0);
            std::vector<double> zeros(batch * hidden, 0.0);
            for (std::size_t step = t; step-- > 0;) {
                for (std::size_t i = 0; i < batch * hidden; ++i)
                    dh[i] += g.v[step * batch * hidden + i];
                const double* h_prev = step == 0 ? zeros.data() : n.val.v.data() + (step - 1) * batch * hidden;
                const double* c_prev = step == 0 ? zeros.data() : n.local1.v.data() + (step - 1) * batch * hidden;
                std::vector<double> dh_prev(batch * hidden, 0.0);
                lstm_step_backward(batch, in_dim, hidden, *n.lp[0], *n.lp[1], *n.lp[2],
                                   ts.v.data() + step * batch * in_dim, h_prev, c_prev,
                                   n.local0.v.data() + step * batch * 4 * hidden,
                                   n.local1.v.data() + step * batch * hidden,
                                   dh.data(), dc.data(),
                                   N[n.in[0]].grad.v.data() + step * batch * in_dim, dh_prev.data());
                dh = std::move(dh_prev);
            }
            break;
        }
        case Op::LstmCell: {
            const Tensor& tx = N[n.in[0]].val;
            const std::size_t batch = tx.shape[0], in_dim = tx.shape[1], hidden = n.val.shape[1];
            std::vector<double> dc(batch * hidden, 0.0);
            lstm_step_backward(batch, in_dim, hidden, *n.lp[0], *n.lp[1], *n.lp[2],
                               tx.v.data(), N[n.in[1]].val.v.data(), N[n.in[2]].val.v.data(),
                               n.local0.v.data(), n.local1.v.data(), g.v.data(), dc.data(),
                               N[n.in[0]].grad.v.data(), N[n.in[1]].grad.v.data());
            // dc now holds the gradient w.r.t. the previous cell state
            for (std::size_t i = 0; i < batch * hidden; ++i) N[n.in[2]].grad.v[i] += dc[i];
            break;
        }
        case Op::ReverseTime: {
            const std::size_t t = g.shape[0], step = g.shape[1] * g.shape[2];
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = 0; j < step; ++j)
                    N[n.in[0]].grad.v[(t - 1 - i) * step + j] += g.v[i * step + j];
            break;
        }
        case Op::ConcatFeature: {
            const std::size_t t = g.shape[0], bs = g.shape[1];
            const std::size_t fa = N[n.in[0]].val.shape[2], fb = N[n.in[1]].val.shape[2];
            for (std::size_t i = 0; i < t * bs; ++i) {
                for (std::size_t j = 0; j < fa; ++j)
                    N[n.in[0]].grad.v[i * fa + j] += g.v[i * (fa + fb) + j];
                for (std::size_t j = 0; j < fb; ++j)
                    N[n.in[1]].grad.v[i * fb + j] += g.v[i * (fa + fb) + fa + j];
            }
            break;
        }
        case Op::TimeConcat: {
            const Tensor& ts = N[n.in[0]].val;
            const std::size_t t = ts.shape[0], bs = ts.shape[1], f = ts.shape[2];
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = 0; j < bs; ++j)
                    for (std::size_t k = 0; k < f; ++k)
                        N[n.in[0]].grad.v[(i * bs + j) * f + k] += g.v[j * (t * f) + i * f + k];
            break;
        }
    }
}

}  // namespace portrl
