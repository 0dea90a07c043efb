#pragma once

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "soda/dataset.hpp"
#include "soda/metrics.hpp"
#include "soda/optimize.hpp"

namespace soda {

// A whole campaign in one JSON document; every CLI flag maps onto one of
// these fields. k_values uses k_all (-1) for full logit access and 0 for
// text-only targets.
struct ExperimentConfig {
    std::string model_path;
    std::string dataset_path;
    std::string targets_path;  // optional: precomputed targets (single-cell campaigns)
    std::string algorithm = "soda";
    std::string precision = "f32";
    std::uint64_t seed = 1;
    int parallelism = 1;
    std::vector<long> lengths;        // empty = every length in the dataset
    long max_records_per_length = 0;  // 0 = unlimited
    double fluency_weight = 0.0;
    double output_softmax_tau = 1.0;
    std::vector<long> k_values{k_all};
    std::vector<long> m_values{1};
    SodaParams soda;
    SodaParams embed;
    GcgParams gcg;
    bool length_sweep = false;
    long sweep_n_max = 5;
    long forward_budget = 0;  // 0 = let each algorithm spend its own t_max
    std::string out_raw = "raw_results.jsonl";
    std::string out_timing;  // empty = out_raw + ".timing.jsonl"
    std::string out_report_prefix = "report";
    std::vector<std::string> report_formats{"csv", "json", "md"};
};

ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);

struct CampaignResult {
    std::vector<RawRow> rows;
    std::vector<double> wall_ms;
    MetricsReport report;
};

// Runs every (record × cell) job, scores against the dataset truth, and
// (optionally) writes raw results, the timing sidecar and the reports.
// Raw rows are ordered by (record, cell) regardless of scheduling, so serial
// and parallel runs of one seed produce byte-identical raw files.
CampaignResult run_experiment(const ExperimentConfig& cfg, bool write_outputs = true,
                              const std::function<void(std::size_t, std::size_t)>& progress = {});

}  // namespace soda
