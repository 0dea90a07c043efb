// soda: command-line front end for the inversion laboratory.
//
// Subcommands:
//   gen-model     write a randomly initialized checkpoint
//   gen-data      write a random token dataset (JSONL)
//   make-targets  decode targets for every dataset record (JSONL)
//   invert        invert a single record with a verbose trace
//   run           run a benchmark campaign from a JSON config
//   report        re-aggregate raw results into reports

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "soda/checkpoint.hpp"
#include "soda/dataset.hpp"
#include "soda/experiment.hpp"
#include "soda/metrics.hpp"
#include "soda/objective.hpp"
#include "soda/optimize.hpp"

using namespace soda;

namespace {

long parse_k(const std::string& s) {
    if (s == "ALL" || s == "all") return k_all;
    return std::stol(s);
}

void write_trace(const std::vector<TracePoint>& trace, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot open trace output '" + path + "'");
    for (const TracePoint& p : trace) {
        nlohmann::ordered_json j;
        j["t"] = p.t;
        j["loss"] = p.loss;
        j["candidate_loss"] = p.candidate_loss;
        if (p.exact_so_far >= 0)
            j["exact_so_far"] = p.exact_so_far != 0;
        else
            j["exact_so_far"] = nullptr;
        f << j.dump() << "\n";
    }
}

int cmd_gen_model(const std::string& out, ModelConfig cfg, std::uint64_t seed,
                  const std::string& precision) {
    cfg.validate();
    if (precision == "f64") {
        ModelWeights<double> w = init_random<double>(cfg, seed);
        save_checkpoint(cfg, w, out);
    } else if (precision == "f32") {
        ModelWeights<float> w = init_random<float>(cfg, seed);
        save_checkpoint(cfg, w, out);
    } else {
        throw ConfigError("precision must be f32 or f64");
    }
    std::cout << "wrote " << out << " (vocab " << cfg.vocab_size << ", " << cfg.n_layers
              << " layers, d_model " << cfg.d_model << ", " << precision << ")\n";
    return 0;
}

template <typename R>
int invert_typed(const std::string& model_path, const std::string& dataset_path,
                 const std::string& targets_path, long record_id, long m, long k,
                 const std::string& algorithm, ExperimentConfig& ec, double fluency_weight,
                 const std::string& trace_path, std::uint64_t seed) {
    auto [cfg, w] = load_checkpoint<R>(model_path);

    TokenSequence truth;
    std::optional<TargetOutput> target;
    if (!dataset_path.empty()) {
        for (const DatasetRecord& rec : read_dataset_jsonl(dataset_path))
            if (rec.id == record_id) {
                truth = rec.tokens;
                break;
            }
        if (truth.empty())
            throw ConfigError("record " + std::to_string(record_id) + " not found in dataset");
    }
    if (!targets_path.empty()) {
        std::ifstream f(targets_path);
        if (!f) throw ConfigError("cannot open targets '" + targets_path + "'");
        std::string line;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            nlohmann::json j = nlohmann::json::parse(line);
            if (j.at("id").get<long>() == record_id) {
                target = target_from_json(j);
                break;
            }
        }
        if (!target)
            throw ConfigError("record " + std::to_string(record_id) + " not found in targets");
    } else {
        if (truth.empty()) throw ConfigError("invert needs --targets or --dataset");
        target = make_target(cfg, w, truth, m, k);
    }

    ObjectiveSpec spec;
    spec.mode = target->has_logits() ? LossMode::logit : LossMode::text;
    spec.fluency_weight = fluency_weight;

    std::vector<TracePoint> trace;
    InvertOptions opt;
    opt.trace = &trace;
    opt.trace_every = 1;
    if (!truth.empty()) opt.truth = &truth;

    InversionResult res;
    if (algorithm == "soda") {
        SodaParams p = ec.soda;
        p.seed = seed;
        res = soda_invert(cfg, w, *target, spec, p, opt);
    } else if (algorithm == "embed") {
        SodaParams p = ec.embed;
        p.seed = seed;
        res = embedding_invert(cfg, w, *target, spec, p, opt);
    } else if (algorithm == "gcg") {
        GcgParams p = ec.gcg;
        p.seed = seed;
        res = gcg_invert(cfg, w, *target, spec, p, opt);
    } else {
        throw ConfigError("unknown algorithm '" + algorithm + "'");
    }

    if (!trace_path.empty()) write_trace(trace, trace_path);

    nlohmann::ordered_json out;
    out["record_id"] = record_id;
    out["algorithm"] = algorithm;
    out["x_star"] = res.x_star;
    out["success"] = res.success;
    out["iterations"] = res.iterations;
    out["forwards"] = res.forwards;
    out["final_loss"] = res.final_loss;
    if (!truth.empty()) {
        out["truth"] = truth;
        out["exact"] = exact_match(res.x_star, truth) == 1.0;
        out["partial"] = partial_match(res.x_star, truth);
    }
    std::cout << out.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Exact input reconstruction laboratory for small language models"};
    app.require_subcommand(1);

    // gen-model
    auto* gm = app.add_subcommand("gen-model", "Write a randomly initialized checkpoint");
    std::string gm_out = "model.ckpt";
    ModelConfig gm_cfg;
    std::uint64_t gm_seed = 1;
    std::string gm_precision = "f32";
    std::string gm_act = "gelu";
    bool gm_tied = false;
    gm->add_option("-o,--out", gm_out, "Checkpoint path");
    gm->add_option("--vocab", gm_cfg.vocab_size, "Vocabulary size")->required();
    gm->add_option("--layers", gm_cfg.n_layers, "Transformer blocks")->required();
    gm->add_option("--d-model", gm_cfg.d_model, "Model width")->required();
    gm->add_option("--heads", gm_cfg.n_heads, "Attention heads")->required();
    gm->add_option("--d-ff", gm_cfg.d_ff, "Feed-forward width")->required();
    gm->add_option("--max-seq", gm_cfg.max_seq_len, "Maximum sequence length")->required();
    gm->add_option("--activation", gm_act, "gelu or silu");
    gm->add_option("--layernorm-eps", gm_cfg.layernorm_eps, "Layer norm epsilon");
    gm->add_flag("--tied", gm_tied, "Tie the output head to the token embeddings");
    gm->add_option("--seed", gm_seed, "Init seed");
    gm->add_option("--precision", gm_precision, "f32 or f64");

    // gen-data
    auto* gd = app.add_subcommand("gen-data", "Write a random token dataset");
    std::string gd_out = "dataset.jsonl";
    long gd_vocab = 0, gd_lo = 1, gd_hi = 5, gd_per = 10;
    std::uint64_t gd_seed = 1;
    gd->add_option("-o,--out", gd_out, "Dataset path");
    gd->add_option("--vocab", gd_vocab, "Vocabulary size")->required();
    gd->add_option("--len-lo", gd_lo, "Shortest sequence length");
    gd->add_option("--len-hi", gd_hi, "Longest sequence length");
    gd->add_option("--per-length", gd_per, "Records per length");
    gd->add_option("--seed", gd_seed, "Sampling seed");

    // make-targets
    auto* mt = app.add_subcommand("make-targets", "Decode targets for every dataset record");
    std::string mt_model, mt_data, mt_out = "targets.jsonl", mt_k = "ALL";
    long mt_m = 1;
    mt->add_option("--model", mt_model, "Checkpoint path")->required();
    mt->add_option("--dataset", mt_data, "Dataset path")->required();
    mt->add_option("-o,--out", mt_out, "Targets path");
    mt->add_option("--m", mt_m, "Output tokens to decode");
    mt->add_option("--k", mt_k, "Known logit coordinates per position (0..vocab or ALL)");

    // invert
    auto* iv = app.add_subcommand("invert", "Invert a single record with a verbose trace");
    std::string iv_model, iv_data, iv_targets, iv_algo = "soda", iv_trace, iv_k = "ALL";
    std::string iv_precision = "f32";
    long iv_id = 0, iv_m = 1;
    double iv_fluency = 0.0;
    std::uint64_t iv_seed = 1;
    ExperimentConfig iv_ec;
    iv->add_option("--model", iv_model, "Checkpoint path")->required();
    iv->add_option("--dataset", iv_data, "Dataset path (enables exact/partial scoring)");
    iv->add_option("--targets", iv_targets, "Precomputed targets path");
    iv->add_option("--id", iv_id, "Record id")->required();
    iv->add_option("--algorithm", iv_algo, "soda, embed or gcg");
    iv->add_option("--m", iv_m, "Output tokens (when decoding the target here)");
    iv->add_option("--k", iv_k, "Known logit coordinates (when decoding the target here)");
    iv->add_option("--fluency-weight", iv_fluency, "Weight of the fluency term");
    iv->add_option("--trace", iv_trace, "Trace JSONL path");
    iv->add_option("--seed", iv_seed, "Optimizer seed");
    iv->add_option("--precision", iv_precision, "f32 or f64");
    iv->add_option("--t-max", iv_ec.soda.t_max, "Iteration cap (soda/embed)");
    iv->add_option("--gamma", iv_ec.soda.gamma, "Learning rate (soda/embed)");
    iv->add_option("--tau", iv_ec.soda.tau, "Relaxation temperature");
    iv->add_option("--lambda", iv_ec.soda.lambda, "Score decay factor");
    iv->add_option("--gcg-t-max", iv_ec.gcg.t_max, "Iteration cap (gcg)");
    iv->add_option("--gcg-c-max", iv_ec.gcg.c_max, "Candidates per iteration (gcg)");
    iv->add_option("--gcg-k-sub", iv_ec.gcg.k_sub, "Substitutions per position (gcg)");

    // run
    auto* rn = app.add_subcommand("run", "Run a benchmark campaign from a JSON config");
    std::string rn_config;
    std::string rn_algo, rn_precision, rn_raw, rn_timing, rn_prefix;
    std::optional<std::uint64_t> rn_seed;
    std::optional<int> rn_par;
    std::optional<long> rn_budget;
    bool rn_quiet = false;
    rn->add_option("-c,--config", rn_config, "Campaign config JSON")->required();
    rn->add_option("--algorithm", rn_algo, "Override: soda, embed or gcg");
    rn->add_option("--precision", rn_precision, "Override: f32 or f64");
    rn->add_option("--seed", rn_seed, "Override: campaign seed");
    rn->add_option("--parallelism", rn_par, "Override: worker threads");
    rn->add_option("--forward-budget", rn_budget, "Override: forward-pass cap per job");
    rn->add_option("--out-raw", rn_raw, "Override: raw results path");
    rn->add_option("--out-timing", rn_timing, "Override: timing sidecar path");
    rn->add_option("--report-prefix", rn_prefix, "Override: report path prefix");
    rn->add_flag("-q,--quiet", rn_quiet, "Suppress progress output");

    // report
    auto* rp = app.add_subcommand("report", "Re-aggregate raw results into reports");
    std::string rp_raw, rp_timing, rp_data, rp_prefix = "report";
    std::vector<std::string> rp_formats{"csv", "json", "md"};
    rp->add_option("--raw", rp_raw, "Raw results JSONL")->required();
    rp->add_option("--timing", rp_timing, "Timing sidecar JSONL");
    rp->add_option("--dataset", rp_data, "Dataset path (enables per-position aggregates)");
    rp->add_option("--prefix", rp_prefix, "Report path prefix");
    rp->add_option("--formats", rp_formats, "Any of csv, json, md");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gm->parsed()) {
            gm_cfg.activation = act_from_name(gm_act);
            gm_cfg.tie_output = gm_tied;
            return cmd_gen_model(gm_out, gm_cfg, gm_seed, gm_precision);
        }

        if (gd->parsed()) {
            auto records = gen_random_dataset(gd_vocab, gd_lo, gd_hi, gd_per, gd_seed);
            write_dataset_jsonl(records, gd_out);
            std::cout << "wrote " << records.size() << " records to " << gd_out << "\n";
            return 0;
        }

        if (mt->parsed()) {
            long k = parse_k(mt_k);
            auto [cfg, w] = load_checkpoint<float>(mt_model);
            auto records = read_dataset_jsonl(mt_data);
            std::ofstream f(mt_out);
            if (!f) throw ConfigError("cannot open '" + mt_out + "'");
            Scratch<float> s;
            for (const DatasetRecord& rec : records) {
                TargetOutput t = make_target(cfg, w, rec.tokens, mt_m, k, s);
                nlohmann::ordered_json j;
                j["id"] = rec.id;
                nlohmann::ordered_json body = target_to_json(t);
                for (auto& [key, val] : body.items()) j[key] = val;
                f << j.dump() << "\n";
            }
            std::cout << "wrote " << records.size() << " targets to " << mt_out << "\n";
            return 0;
        }

        if (iv->parsed()) {
            iv_ec.embed.t_max = iv_ec.soda.t_max;
            iv_ec.embed.gamma = iv_ec.soda.gamma;
            if (iv_precision == "f64")
                return invert_typed<double>(iv_model, iv_data, iv_targets, iv_id, iv_m,
                                            parse_k(iv_k), iv_algo, iv_ec, iv_fluency, iv_trace,
                                            iv_seed);
            return invert_typed<float>(iv_model, iv_data, iv_targets, iv_id, iv_m, parse_k(iv_k),
                                       iv_algo, iv_ec, iv_fluency, iv_trace, iv_seed);
        }

        if (rn->parsed()) {
            ExperimentConfig ec = load_experiment_config(rn_config);
            if (!rn_algo.empty()) ec.algorithm = rn_algo;
            if (!rn_precision.empty()) ec.precision = rn_precision;
            if (rn_seed) ec.seed = *rn_seed;
            if (rn_par) ec.parallelism = *rn_par;
            if (rn_budget) ec.forward_budget = *rn_budget;
            if (!rn_raw.empty()) ec.out_raw = rn_raw;
            if (!rn_timing.empty()) ec.out_timing = rn_timing;
            if (!rn_prefix.empty()) ec.out_report_prefix = rn_prefix;

            auto progress = [&](std::size_t done, std::size_t total) {
                if (rn_quiet) return;
                std::fprintf(stderr, "\r[%zu/%zu]", done, total);
                if (done == total) std::fprintf(stderr, "\n");
            };
            CampaignResult res = run_experiment(ec, true, progress);
            const CellStats& o = res.report.overall;
            std::cout << "campaign done: " << o.trials << " jobs, exact " << o.exact_hits << "/"
                      << o.trials << ", raw -> " << ec.out_raw << ", reports -> "
                      << ec.out_report_prefix << ".{";
            for (std::size_t i = 0; i < ec.report_formats.size(); ++i)
                std::cout << (i ? "," : "") << ec.report_formats[i];
            std::cout << "}\n";
            return 0;
        }

        if (rp->parsed()) {
            std::vector<RawRow> rows = read_raw_jsonl(rp_raw);
            std::vector<double> wall;
            std::vector<DatasetRecord> data;
            const std::vector<double>* wall_p = nullptr;
            const std::vector<DatasetRecord>* data_p = nullptr;
            if (!rp_timing.empty()) {
                wall = read_timing_jsonl(rp_timing);
                if (wall.size() != rows.size())
                    throw ParseError("timing sidecar has " + std::to_string(wall.size()) +
                                     " rows, raw results have " + std::to_string(rows.size()));
                wall_p = &wall;
            }
            if (!rp_data.empty()) {
                data = read_dataset_jsonl(rp_data);
                data_p = &data;
            }
            MetricsReport rep = aggregate(rows, wall_p, data_p);
            for (const std::string& fmt : rp_formats) {
                if (fmt == "csv")
                    write_report_csv(rows, wall_p, rp_prefix + ".csv");
                else if (fmt == "json")
                    write_report_json(rep, rp_prefix + ".json");
                else if (fmt == "md")
                    write_report_markdown(rep, rp_prefix + ".md");
                else
                    throw ConfigError("unknown report format '" + fmt + "'");
            }
            std::cout << "wrote " << rp_prefix << " reports from " << rows.size() << " rows\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
