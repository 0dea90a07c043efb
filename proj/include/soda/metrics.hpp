#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "soda/common.hpp"
#include "soda/dataset.hpp"

namespace soda {

// Position-wise scoring against the true input. Partial credit is counted
// over the true length; a length mismatch (length-sweep campaigns) scores
// the overlapping prefix positionwise and is flagged on the raw row.
double exact_match(const TokenSequence& x_star, const TokenSequence& x);
double partial_match(const TokenSequence& x_star, const TokenSequence& x);
// Empty mask means the metric is undefined for the record, not zero.
std::optional<double> pii_match(const TokenSequence& x_star, const TokenSequence& x,
                                const std::vector<long>& mask);

// 95% Wilson score interval, z = 1.959964, as a pair of rates in [0, 1].
std::pair<double, double> wilson_interval(long successes, long trials);

// One inversion outcome. Everything here is deterministic under the campaign
// seed; wall time deliberately lives in a separate timing sidecar so raw
// results files are byte-identical across reruns and scheduling orders.
struct RawRow {
    long record_id = 0;
    long n = 0;
    long k = 0;
    long m = 0;
    std::string algorithm;
    long iterations = 0;
    long forwards = 0;
    bool success = false;
    bool exact = false;
    double partial = 0;
    std::optional<double> pii;
    double final_loss = 0;
    TokenSequence x_star;
    bool length_mismatch = false;
};

void write_raw_jsonl(const std::vector<RawRow>& rows, const std::string& path);
std::vector<RawRow> read_raw_jsonl(const std::string& path);

void write_timing_jsonl(const std::vector<RawRow>& rows, const std::vector<double>& wall_ms,
                        const std::string& path);
// Returns per-row wall times aligned with the raw rows by line index.
std::vector<double> read_timing_jsonl(const std::string& path);

struct CellStats {
    long trials = 0;
    long exact_hits = 0;
    long successes = 0;
    long false_discoveries = 0;  // success=true but not exact
    double exact_rate = 0;
    double wilson_lo = 0;
    double wilson_hi = 0;
    double partial_mean = 0;
    double partial_se = 0;
    long pii_records = 0;
    std::optional<double> pii_rate;
    double false_discovery_rate = 0;
    long forwards_total = 0;
};

struct MetricsReport {
    CellStats overall;
    std::map<long, CellStats> per_length;
    std::map<std::pair<long, long>, CellStats> per_cell;  // keyed by (k, m)
    // Fraction of records whose reconstruction matches at each position;
    // reported, not asserted.
    std::vector<std::pair<long, double>> per_position;
    std::vector<long> per_position_trials;
    double wall_ms_total = 0;
};

MetricsReport aggregate(const std::vector<RawRow>& rows, const std::vector<double>* wall_ms,
                        const std::vector<DatasetRecord>* truth);

void write_report_csv(const std::vector<RawRow>& rows, const std::vector<double>* wall_ms,
                      const std::string& path);
void write_report_json(const MetricsReport& rep, const std::string& path);
void write_report_markdown(const MetricsReport& rep, const std::string& path);

}  // namespace soda
