#include "portrl/market_data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace portrl {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    y = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp < 10 ? mp + 3 : mp - 9;
    y += m <= 2;
}

bool parse_double(const std::string& s, double& out) {
    const char* first = s.data();
    const char* last = s.data() + s.size();
    auto res = std::from_chars(first, last, out);
    return res.ec == std::errc() && res.ptr == last;
}

}  // namespace

std::int64_t parse_timestamp(const std::string& text) {
    // YYYY-MM-DD[{T| }HH:MM:SS][Z]
    std::string s = text;
    if (!s.empty() && s.back() == 'Z') s.pop_back();
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
    char sep = 0;
    int n = 0;
    const int got = std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d:%2d%n", &y, &mo, &d, &sep, &h, &mi, &sec, &n);
    if (got == 3) {
        if (s.size() != 10) throw std::invalid_argument("unparsable timestamp: " + text);
    } else if (got == 7) {
        if ((sep != 'T' && sep != ' ') || static_cast<std::size_t>(n) != s.size())
            throw std::invalid_argument("unparsable timestamp: " + text);
    } else {
        throw std::invalid_argument("unparsable timestamp: " + text);
    }
    if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || sec > 60)
        throw std::invalid_argument("unparsable timestamp: " + text);
    return days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) * 86400 +
           h * 3600 + mi * 60 + sec;
}

std::string format_timestamp(std::int64_t t) {
    std::int64_t days = t / 86400;
    std::int64_t rem = t % 86400;
    if (rem < 0) {
        rem += 86400;
        --days;
    }
    std::int64_t y;
    unsigned m, d;
    civil_from_days(days, y, m, d);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04lld-%02u-%02uT%02lld:%02lld:%02lldZ",
                  static_cast<long long>(y), m, d,
                  static_cast<long long>(rem / 3600), static_cast<long long>((rem / 60) % 60),
                  static_cast<long long>(rem % 60));
    return buf;
}

std::string format_double(double x) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

IngestResult ingest_csv(const std::string& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open CSV file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty CSV file: " + path);
    const auto header = split_csv_line(line);
    auto col = [&](const std::string& name) {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw std::runtime_error("missing column '" + name + "' in " + path);
    };
    const std::size_t c_ts = col(schema.timestamp), c_asset = col(schema.asset);
    const std::size_t c_o = col(schema.open), c_h = col(schema.high);
    const std::size_t c_l = col(schema.low), c_c = col(schema.close);

    IngestResult result;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto fields = split_csv_line(line);
        if (fields.size() <= std::max({c_ts, c_asset, c_o, c_h, c_l, c_c})) {
            result.errors.push_back({line_no, "too few fields"});
            continue;
        }
        OhlcBar bar;
        try {
            bar.timestamp = parse_timestamp(fields[c_ts]);
        } catch (const std::exception& e) {
            result.errors.push_back({line_no, e.what()});
            continue;
        }
        bool ok = parse_double(fields[c_o], bar.open) && parse_double(fields[c_h], bar.high) &&
                  parse_double(fields[c_l], bar.low) && parse_double(fields[c_c], bar.close);
        if (!ok) {
            result.errors.push_back({line_no, "unparsable price"});
            continue;
        }
        if (bar.open <= 0 || bar.high <= 0 || bar.low <= 0 || bar.close <= 0) {
            result.errors.push_back({line_no, "non-positive price"});
            continue;
        }
        if (!bar.valid()) {
            result.errors.push_back({line_no, "bar violates low <= {open,close} <= high"});
            continue;
        }
        result.series[fields[c_asset]].bars.push_back(bar);
    }
    for (auto& [symbol, series] : result.series) {
        std::stable_sort(series.bars.begin(), series.bars.end(),
                         [](const OhlcBar& a, const OhlcBar& b) { return a.timestamp < b.timestamp; });
        std::vector<OhlcBar> dedup;
        dedup.reserve(series.bars.size());
        for (const auto& bar : series.bars) {
            if (!dedup.empty() && dedup.back().timestamp == bar.timestamp) {
                result.errors.push_back({0, "duplicate timestamp " + format_timestamp(bar.timestamp) +
                                                " for asset " + symbol});
                continue;
            }
            dedup.push_back(bar);
        }
        series.bars = std::move(dedup);
    }
    return result;
}

AssetSeries aggregate(const AssetSeries& series, std::size_t factor) {
    if (series.bars.empty()) throw std::invalid_argument("aggregate: empty input series");
    if (factor < 1) throw std::invalid_argument("aggregate: factor must be >= 1");
    if (series.bars.size() < factor) throw std::invalid_argument("aggregate: series shorter than factor");
    AssetSeries out;
    out.asset_id = series.asset_id;
    const std::size_t groups = series.bars.size() / factor;
    out.bars.reserve(groups);
    for (std::size_t gidx = 0; gidx < groups; ++gidx) {
        const std::size_t begin = gidx * factor;
        OhlcBar bar = series.bars[begin];
        for (std::size_t i = begin + 1; i < begin + factor; ++i) {
            bar.high = std::max(bar.high, series.bars[i].high);
            bar.low = std::min(bar.low, series.bars[i].low);
        }
        bar.close = series.bars[begin + factor - 1].close;
        out.bars.push_back(bar);
    }
    return out;
}

std::vector<double> price_relative(const std::vector<double>& p_t, const std::vector<double>& p_prev) {
    if (p_t.size() != p_prev.size()) throw std::invalid_argument("price_relative: length mismatch");
    std::vector<double> u(p_t.size());
    for (std::size_t i = 0; i < p_t.size(); ++i) {
        if (p_prev[i] <= 0 || p_t[i] <= 0) throw std::invalid_argument("price_relative: non-positive price");
        u[i] = p_t[i] / p_prev[i];
    }
    if (!u.empty()) u[0] = 1.0;
    return u;
}

std::vector<double> pct_change(const AssetSeries& series) {
    if (series.bars.size() < 2) throw std::invalid_argument("pct_change: need at least 2 bars");
    std::vector<double> h(series.bars.size() - 1);
    for (std::size_t t = 1; t < series.bars.size(); ++t)
        h[t - 1] = (series.bars[t].close - series.bars[t - 1].close) / series.bars[t - 1].close;
    return h;
}

std::vector<double> AlignedDataset::pct_change_vector(std::size_t t) const {
    const std::size_t m = num_risky();
    std::vector<double> x(3 * m);
    for (std::size_t a = 1; a <= m; ++a) {
        const double prev = close[a][t - 1];
        x[a - 1] = (close[a][t] - prev) / prev;
        x[m + a - 1] = (high[a][t] - prev) / prev;
        x[2 * m + a - 1] = (low[a][t] - prev) / prev;
    }
    return x;
}

std::vector<double> AlignedDataset::relative_vector(std::size_t t) const {
    const std::size_t n = num_assets();
    std::vector<double> u(n, 1.0);
    for (std::size_t a = 1; a < n; ++a) u[a] = close[a][t] / close[a][t - 1];
    return u;
}

AlignedDataset AlignedDataset::slice(std::size_t begin, std::size_t end) const {
    if (begin >= end || end > size()) throw std::invalid_argument("slice: bad range");
    AlignedDataset out;
    out.timestamps.assign(timestamps.begin() + begin, timestamps.begin() + end);
    const std::size_t n = num_assets();
    out.open.resize(n);
    out.high.resize(n);
    out.low.resize(n);
    out.close.resize(n);
    for (std::size_t a = 0; a < n; ++a) {
        out.open[a].assign(open[a].begin() + begin, open[a].begin() + end);
        out.high[a].assign(high[a].begin() + begin, high[a].begin() + end);
        out.low[a].assign(low[a].begin() + begin, low[a].begin() + end);
        out.close[a].assign(close[a].begin() + begin, close[a].begin() + end);
    }
    out.index_close.assign(index_close.begin() + begin, index_close.begin() + end);
    return out;
}

AlignedDataset align_series(const std::map<std::string, AssetSeries>& by_symbol,
                            const std::vector<std::string>& risky_symbols,
                            const std::string& index_symbol) {
    std::vector<const AssetSeries*> sources;
    for (const auto& sym : risky_symbols) {
        auto it = by_symbol.find(sym);
        if (it == by_symbol.end()) throw std::invalid_argument("align_series: no data for asset " + sym);
        if (it->second.bars.empty()) throw std::invalid_argument("align_series: empty series for " + sym);
        sources.push_back(&it->second);
    }
    const AssetSeries* index_series = nullptr;
    if (!index_symbol.empty()) {
        auto it = by_symbol.find(index_symbol);
        if (it == by_symbol.end()) throw std::invalid_argument("align_series: no data for index " + index_symbol);
        index_series = &it->second;
        sources.push_back(index_series);
    }

    // Common range: latest first timestamp to earliest last, so forward
    // filling never needs data before an asset's own history.
    std::int64_t begin = sources[0]->bars.front().timestamp;
    std::int64_t end = sources[0]->bars.back().timestamp;
    for (const auto* s : sources) {
        begin = std::max(begin, s->bars.front().timestamp);
        end = std::min(end, s->bars.back().timestamp);
    }
    if (begin > end) throw std::invalid_argument("align_series: asset histories do not overlap");

    std::set<std::int64_t> stamp_set;
    for (const auto* s : sources)
        for (const auto& bar : s->bars)
            if (bar.timestamp >= begin && bar.timestamp <= end) stamp_set.insert(bar.timestamp);
    const std::vector<std::int64_t> stamps(stamp_set.begin(), stamp_set.end());
    const std::size_t n = stamps.size();
    const std::size_t m = risky_symbols.size();

    AlignedDataset out;
    out.timestamps = stamps;
    out.open.assign(m + 1, std::vector<double>(n, 1.0));
    out.high.assign(m + 1, std::vector<double>(n, 1.0));
    out.low.assign(m + 1, std::vector<double>(n, 1.0));
    out.close.assign(m + 1, std::vector<double>(n, 1.0));
    out.index_close.assign(n, 1.0);

    auto fill = [&](const AssetSeries& src, std::size_t asset_idx, bool index_only) {
        std::size_t si = 0;
        double last_close = 0.0;
        // position si at the first bar inside the range
        while (si < src.bars.size() && src.bars[si].timestamp < begin) ++si;
        for (std::size_t t = 0; t < n; ++t) {
            if (si < src.bars.size() && src.bars[si].timestamp == stamps[t]) {
                const OhlcBar& bar = src.bars[si];
                if (index_only) {
                    out.index_close[t] = bar.close;
                } else {
                    out.open[asset_idx][t] = bar.open;
                    out.high[asset_idx][t] = bar.high;
                    out.low[asset_idx][t] = bar.low;
                    out.close[asset_idx][t] = bar.close;
                }
                last_close = bar.close;
                ++si;
            } else {
                // missing bar: forward-fill the last close
                if (index_only) {
                    out.index_close[t] = last_close;
                } else {
                    out.open[asset_idx][t] = last_close;
                    out.high[asset_idx][t] = last_close;
                    out.low[asset_idx][t] = last_close;
                    out.close[asset_idx][t] = last_close;
                }
            }
        }
    };
    for (std::size_t a = 0; a < m; ++a) fill(*sources[a], a + 1, false);
    if (index_series) fill(*index_series, 0, true);
    return out;
}

void write_aligned_csv(const AlignedDataset& data, const std::vector<std::string>& risky_symbols,
                       const std::string& index_symbol, const std::string& path) {
    if (risky_symbols.size() != data.num_risky())
        throw std::invalid_argument("write_aligned_csv: symbol count mismatch");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "timestamp,asset,open,high,low,close\n";
    for (std::size_t t = 0; t < data.size(); ++t) {
        const std::string ts = format_timestamp(data.timestamps[t]);
        out << ts << ",CASH,1,1,1,1\n";
        for (std::size_t a = 1; a < data.num_assets(); ++a) {
            out << ts << ',' << risky_symbols[a - 1] << ',' << format_double(data.open[a][t]) << ','
                << format_double(data.high[a][t]) << ',' << format_double(data.low[a][t]) << ','
                << format_double(data.close[a][t]) << "\n";
        }
        if (!index_symbol.empty()) {
            const double c = data.index_close[t];
            out << ts << ',' << index_symbol << ',' << format_double(c) << ',' << format_double(c)
                << ',' << format_double(c) << ',' << format_double(c) << "\n";
        }
    }
}

PriceTensor build_price_tensor(const AlignedDataset& data, std::size_t t, std::size_t k2) {
    if (k2 < 1) throw std::invalid_argument("build_price_tensor: k2 must be >= 1");
    if (t + 1 < k2 || t >= data.size())
        throw std::invalid_argument("build_price_tensor: window exceeds available history");
    const std::size_t n = data.num_assets();
    PriceTensor out;
    out.close_mat = Tensor({n, k2});
    out.high_mat = Tensor({n, k2});
    out.low_mat = Tensor({n, k2});
    for (std::size_t a = 0; a < n; ++a) {
        const double denom = data.close[a][t];
        for (std::size_t j = 0; j < k2; ++j) {
            const std::size_t src = t - k2 + 1 + j;
            if (j + 1 == k2) {
                out.close_mat.at(a, j) = 1.0;
            } else {
                out.close_mat.at(a, j) = data.close[a][src] / denom;
            }
            out.high_mat.at(a, j) = data.high[a][src] / denom;
            out.low_mat.at(a, j) = data.low[a][src] / denom;
        }
    }
    return out;
}

EpisodeSlice sample_episode(const AlignedDataset& data, std::size_t length, std::size_t k2, Rng& rng) {
    if (length < 1) throw std::invalid_argument("sample_episode: length must be >= 1");
    if (data.size() < length + k2) throw std::invalid_argument("sample_episode: dataset too short");
    const std::size_t lo = k2 - 1;
    const std::size_t hi = data.size() - 1 - length;  // inclusive
    const std::size_t start = lo + rng.uniform_int(hi - lo + 1);
    return EpisodeSlice{&data, start, length};
}

}  // namespace portrl
