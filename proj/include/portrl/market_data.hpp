#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "portrl/rng.hpp"
#include "portrl/tensor.hpp"

namespace portrl {

// One OHLC bar. Timestamps are UTC epoch seconds; asset 0 is cash and is
// synthesized internally (constant price 1), never read from file.
struct OhlcBar {
    std::int64_t timestamp = 0;
    double open = 0, high = 0, low = 0, close = 0;

    bool valid() const {
        return open > 0 && high > 0 && low > 0 && close > 0 &&
               low <= open && open <= high && low <= close && close <= high;
    }
};

struct AssetSeries {
    int asset_id = 0;
    std::vector<OhlcBar> bars;  // strictly increasing timestamps
};

struct CsvSchema {
    std::string timestamp = "timestamp";
    std::string asset = "asset";
    std::string open = "open";
    std::string high = "high";
    std::string low = "low";
    std::string close = "close";
};

struct RowError {
    std::size_t line = 0;  // 1-based, header = 1
    std::string message;
};

struct IngestResult {
    std::map<std::string, AssetSeries> series;  // keyed by asset symbol
    std::vector<RowError> errors;
};

// Parses `timestamp,asset,open,high,low,close` CSV. Rows violating bar
// invariants are skipped and recorded in the error list; a missing column
// throws. Series come out sorted by timestamp.
IngestResult ingest_csv(const std::string& path, const CsvSchema& schema = {});

// ISO-8601 UTC parsing: YYYY-MM-DD with optional [T ]HH:MM:SS and trailing Z.
std::int64_t parse_timestamp(const std::string& text);
std::string format_timestamp(std::int64_t epoch_seconds);

// Shortest round-trip decimal formatting (locale independent).
std::string format_double(double x);

// Groups `factor` consecutive bars: open of first, max high, min low, close
// of last. A trailing partial group is dropped.
AssetSeries aggregate(const AssetSeries& series, std::size_t factor);

// u = p_t / p_prev elementwise; entry 0 is cash and is forced to 1.
std::vector<double> price_relative(const std::vector<double>& p_t, const std::vector<double>& p_prev);

// h_t = (p_t - p_{t-1}) / p_{t-1} over the close prices of one series.
std::vector<double> pct_change(const AssetSeries& series);

// All tradable assets (0 = cash) on a common timeline plus the market index
// feature series. Column t of asset a lives at close[a][t] etc.
struct AlignedDataset {
    std::vector<std::int64_t> timestamps;
    std::vector<std::vector<double>> open, high, low, close;  // [m+1][n]
    std::vector<double> index_close;                           // [n], constant 1 if absent

    std::size_t num_assets() const { return close.size(); }    // m+1
    std::size_t num_risky() const { return close.size() - 1; }
    std::size_t size() const { return timestamps.size(); }

    // Percentage-change vector (close, high, low per risky asset; length 3m)
    // at bar t, relative to bar t-1 closes.
    std::vector<double> pct_change_vector(std::size_t t) const;
    // Price relative vector u_t of length m+1 (cash entry 1).
    std::vector<double> relative_vector(std::size_t t) const;

    AlignedDataset slice(std::size_t begin, std::size_t end) const;  // [begin, end)
};

// Aligns per-symbol series on the common timestamp range. An asset missing
// a timestamp present in others forward-fills its last close. The index
// symbol may be empty, in which case the index series is constant 1.
AlignedDataset align_series(const std::map<std::string, AssetSeries>& by_symbol,
                            const std::vector<std::string>& risky_symbols,
                            const std::string& index_symbol);

void write_aligned_csv(const AlignedDataset& data, const std::vector<std::string>& risky_symbols,
                       const std::string& index_symbol, const std::string& path);

// Normalized close/high/low windows, shape (m+1, k2) each. The last close
// column is all ones; the cash row is all ones.
struct PriceTensor {
    Tensor close_mat, high_mat, low_mat;

    std::size_t assets() const { return close_mat.shape[0]; }
    std::size_t window() const { return close_mat.shape[1]; }
};

PriceTensor build_price_tensor(const AlignedDataset& data, std::size_t t, std::size_t k2);

// A contiguous run of decision indices over an aligned dataset. Decision
// index t requires k2 bars of history (t >= k2-1) and one lookahead bar for
// execution, so start + length <= data->size() - 1.
struct EpisodeSlice {
    const AlignedDataset* data = nullptr;
    std::size_t start = 0;
    std::size_t length = 0;
};

EpisodeSlice sample_episode(const AlignedDataset& data, std::size_t length, std::size_t k2, Rng& rng);

}  // namespace portrl
