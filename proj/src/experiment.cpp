#include "soda/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include "soda/checkpoint.hpp"

namespace soda {

namespace {

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T def) {
    if (!j.contains(key)) return def;
    return j.at(key).get<T>();
}

SodaParams soda_params_from_json(const nlohmann::json& j, SodaParams p) {
    p.t_max = get_or<long>(j, "t_max", p.t_max);
    p.gamma = get_or<double>(j, "gamma", p.gamma);
    p.beta1 = get_or<double>(j, "beta1", p.beta1);
    p.beta2 = get_or<double>(j, "beta2", p.beta2);
    p.tau = get_or<double>(j, "tau", p.tau);
    p.lambda = get_or<double>(j, "lambda", p.lambda);
    p.t1 = get_or<long>(j, "t1", p.t1);
    p.t2 = get_or<long>(j, "t2", p.t2);
    p.eps_adam = get_or<double>(j, "eps_adam", p.eps_adam);
    p.eps_term = get_or<double>(j, "eps_term", p.eps_term);
    p.reinit_std = get_or<double>(j, "reinit_std", p.reinit_std);
    p.use_decay = get_or<bool>(j, "use_decay", p.use_decay);
    p.use_resets = get_or<bool>(j, "use_resets", p.use_resets);
    p.bias_correction = get_or<bool>(j, "bias_correction", p.bias_correction);
    return p;
}

GcgParams gcg_params_from_json(const nlohmann::json& j, GcgParams p) {
    p.t_max = get_or<long>(j, "t_max", p.t_max);
    p.c_max = get_or<long>(j, "c_max", p.c_max);
    p.k_sub = get_or<long>(j, "k_sub", p.k_sub);
    p.eps_term = get_or<double>(j, "eps_term", p.eps_term);
    p.batched = get_or<bool>(j, "batched", p.batched);
    return p;
}

// k entries may be the string "ALL" (full logit rows) instead of a count.
long k_from_json(const nlohmann::json& v) {
    if (v.is_string()) {
        std::string s = v.get<std::string>();
        if (s == "ALL" || s == "all") return k_all;
        throw ConfigError("campaign config: k must be a number or \"ALL\", got '" + s + "'");
    }
    return v.get<long>();
}

}  // namespace

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    try {
        c.model_path = j.at("model").get<std::string>();
        c.dataset_path = j.at("dataset").get<std::string>();
        c.targets_path = get_or<std::string>(j, "targets", "");
        c.algorithm = get_or<std::string>(j, "algorithm", c.algorithm);
        c.precision = get_or<std::string>(j, "precision", c.precision);
        c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
        c.parallelism = get_or<int>(j, "parallelism", c.parallelism);
        c.lengths = get_or<std::vector<long>>(j, "lengths", {});
        c.max_records_per_length = get_or<long>(j, "max_records_per_length", 0);
        if (j.contains("objective")) {
            const auto& o = j["objective"];
            c.fluency_weight = get_or<double>(o, "fluency_weight", c.fluency_weight);
            c.output_softmax_tau = get_or<double>(o, "output_softmax_tau", c.output_softmax_tau);
            c.k_values = {o.contains("k") ? k_from_json(o["k"]) : k_all};
            c.m_values = {get_or<long>(o, "m", 1)};
        }
        if (j.contains("grid")) {
            const auto& g = j["grid"];
            if (g.contains("k")) {
                c.k_values.clear();
                for (const auto& v : g["k"]) c.k_values.push_back(k_from_json(v));
            }
            if (g.contains("m")) c.m_values = g["m"].get<std::vector<long>>();
        }
        if (j.contains("soda")) c.soda = soda_params_from_json(j["soda"], c.soda);
        if (j.contains("embed")) c.embed = soda_params_from_json(j["embed"], c.embed);
        if (j.contains("gcg")) c.gcg = gcg_params_from_json(j["gcg"], c.gcg);
        if (j.contains("length_sweep")) {
            const auto& s = j["length_sweep"];
            c.length_sweep = get_or<bool>(s, "enabled", false);
            c.sweep_n_max = get_or<long>(s, "n_max", c.sweep_n_max);
        }
        c.forward_budget = get_or<long>(j, "forward_budget", 0);
        c.out_raw = get_or<std::string>(j, "out_raw", c.out_raw);
        c.out_timing = get_or<std::string>(j, "out_timing", "");
        c.out_report_prefix = get_or<std::string>(j, "out_report_prefix", c.out_report_prefix);
        c.report_formats = get_or<std::vector<std::string>>(j, "report_formats", c.report_formats);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("campaign config: ") + e.what());
    }
    if (c.algorithm != "soda" && c.algorithm != "embed" && c.algorithm != "gcg")
        throw ConfigError("campaign config: unknown algorithm '" + c.algorithm + "'");
    if (c.precision != "f32" && c.precision != "f64")
        throw ConfigError("campaign config: precision must be f32 or f64");
    if (c.k_values.empty() || c.m_values.empty())
        throw ConfigError("campaign config: empty k/m grid");
    if (c.parallelism < 1) throw ConfigError("campaign config: parallelism must be positive");
    return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open campaign config '" + path + "'");
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return experiment_config_from_json(j);
}

namespace {

struct Cell {
    long k = 0;  // canonical: vocab for full access, 0 for text-only
    long m = 1;
};

template <typename R>
InversionResult dispatch_algorithm(const ExperimentConfig& ec, const ModelConfig& cfg,
                                   const ModelWeights<R>& w, const TargetOutput& target,
                                   const ObjectiveSpec& spec, std::uint64_t seed,
                                   const InvertOptions& opt) {
    if (ec.algorithm == "soda") {
        SodaParams p = ec.soda;
        p.seed = seed;
        return soda_invert(cfg, w, target, spec, p, opt);
    }
    if (ec.algorithm == "embed") {
        SodaParams p = ec.embed;
        p.seed = seed;
        return embedding_invert(cfg, w, target, spec, p, opt);
    }
    GcgParams p = ec.gcg;
    p.seed = seed;
    return gcg_invert(cfg, w, target, spec, p, opt);
}

template <typename R>
CampaignResult run_typed(const ExperimentConfig& ec,
                         const std::function<void(std::size_t, std::size_t)>& progress) {
    auto [cfg, weights] = load_checkpoint<R>(ec.model_path, true);

    std::vector<DatasetRecord> data = read_dataset_jsonl(ec.dataset_path);
    for (const auto& rec : data)
        for (int t : rec.tokens)
            if (t < 0 || t >= cfg.vocab_size)
                throw ConfigError("dataset token " + std::to_string(t) + " in record " +
                                  std::to_string(rec.id) + " is outside the model vocabulary (" +
                                  std::to_string(cfg.vocab_size) + ")");

    std::vector<const DatasetRecord*> selected;
    {
        std::map<long, long> taken;
        for (const auto& rec : data) {
            long n = static_cast<long>(rec.tokens.size());
            if (!ec.lengths.empty() &&
                std::find(ec.lengths.begin(), ec.lengths.end(), n) == ec.lengths.end())
                continue;
            if (ec.max_records_per_length > 0 && taken[n] >= ec.max_records_per_length) continue;
            ++taken[n];
            selected.push_back(&rec);
        }
    }

    // Cells come either from the grid or, with precomputed targets, from the
    // target records themselves.
    std::map<long, TargetOutput> file_targets;
    std::vector<Cell> cells;
    if (!ec.targets_path.empty()) {
        std::ifstream f(ec.targets_path);
        if (!f) throw ConfigError("cannot open targets '" + ec.targets_path + "'");
        std::string line;
        long lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            if (line.empty()) continue;
            try {
                nlohmann::json j = nlohmann::json::parse(line);
                long id = j.at("id").get<long>();
                file_targets[id] = target_from_json(j);
            } catch (const nlohmann::json::exception& e) {
                throw ParseError(ec.targets_path + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
        cells.push_back({});  // placeholder; k/m read per record
        for (const auto* rec : selected)
            if (!file_targets.count(rec->id))
                throw ConfigError("no target for record " + std::to_string(rec->id));
    } else {
        for (long k : ec.k_values)
            for (long m : ec.m_values) {
                if (m < 1) throw ConfigError("output token count must be positive");
                cells.push_back({k == k_all ? cfg.vocab_size : k, m});
            }
    }

    long m_max = 1;
    for (const Cell& c : cells) m_max = std::max(m_max, c.m);
    if (!file_targets.empty())
        for (const auto& [id, t] : file_targets)
            m_max = std::max(m_max, static_cast<long>(t.y.size()));
    for (const auto* rec : selected) {
        long n = static_cast<long>(rec->tokens.size());
        if (file_targets.empty() && n + m_max > cfg.max_seq_len)
            throw ConfigError("record " + std::to_string(rec->id) + " plus " +
                              std::to_string(m_max) + " outputs exceeds max_seq_len");
    }
    if (ec.length_sweep && ec.sweep_n_max + m_max - 1 > cfg.max_seq_len)
        throw ConfigError("length sweep up to n=" + std::to_string(ec.sweep_n_max) +
                          " exceeds max_seq_len");

    struct Job {
        const DatasetRecord* rec;
        std::size_t cell;
    };
    std::vector<Job> jobs;
    for (const auto* rec : selected)
        for (std::size_t c = 0; c < cells.size(); ++c) jobs.push_back({rec, c});

    CampaignResult out;
    out.rows.resize(jobs.size());
    out.wall_ms.resize(jobs.size());

    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> done{0};
    std::mutex err_mu;
    std::exception_ptr first_error;

    auto worker = [&]() {
        Scratch<R> scratch;
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) break;
            try {
                const Job& job = jobs[i];
                const DatasetRecord& rec = *job.rec;
                auto t0 = std::chrono::steady_clock::now();

                TargetOutput target;
                long k_label, m_label;
                if (!file_targets.empty()) {
                    target = file_targets.at(rec.id);
                    k_label = target.k;
                    m_label = static_cast<long>(target.y.size());
                } else {
                    const Cell& cell = cells[job.cell];
                    target = make_target(cfg, weights, rec.tokens, cell.m, cell.k, scratch);
                    k_label = cell.k;
                    m_label = cell.m;
                }

                ObjectiveSpec spec;
                spec.mode = target.has_logits() ? LossMode::logit : LossMode::text;
                spec.fluency_weight = ec.fluency_weight;
                spec.output_softmax_tau = ec.output_softmax_tau;

                std::uint64_t jseed = RandomStream::derive(
                    RandomStream::derive(ec.seed, "record", static_cast<std::uint64_t>(rec.id)),
                    "cell", job.cell);
                InvertOptions opt;
                opt.forward_budget = ec.forward_budget;

                InversionResult res;
                if (ec.length_sweep) {
                    long iters = 0, fwds = 0;
                    for (long n_try = 1; n_try <= ec.sweep_n_max; ++n_try) {
                        TargetOutput t = target;
                        t.n_input = n_try;
                        res = dispatch_algorithm(ec, cfg, weights, t, spec,
                                                 RandomStream::derive(jseed, "sweep", n_try), opt);
                        iters += res.iterations;
                        fwds += res.forwards;
                        if (res.success) break;
                    }
                    res.iterations = iters;
                    res.forwards = fwds;
                } else {
                    res = dispatch_algorithm(ec, cfg, weights, target, spec, jseed, opt);
                }

                RawRow row;
                row.record_id = rec.id;
                row.n = static_cast<long>(rec.tokens.size());
                row.k = k_label;
                row.m = m_label;
                row.algorithm = ec.algorithm;
                row.iterations = res.iterations;
                row.forwards = res.forwards;
                row.success = res.success;
                row.exact = exact_match(res.x_star, rec.tokens) == 1.0;
                row.partial = partial_match(res.x_star, rec.tokens);
                if (rec.has_pii) row.pii = pii_match(res.x_star, rec.tokens, rec.pii_mask);
                row.final_loss = res.final_loss;
                row.x_star = res.x_star;
                row.length_mismatch = res.x_star.size() != rec.tokens.size();
                out.rows[i] = std::move(row);

                auto t1 = std::chrono::steady_clock::now();
                out.wall_ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
            std::size_t d = done.fetch_add(1) + 1;
            if (progress) progress(d, jobs.size());
        }
    };

    if (ec.parallelism <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < ec.parallelism; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    out.report = aggregate(out.rows, &out.wall_ms, &data);
    return out;
}

}  // namespace

CampaignResult run_experiment(const ExperimentConfig& ec, bool write_outputs,
                              const std::function<void(std::size_t, std::size_t)>& progress) {
    CampaignResult out = ec.precision == "f64" ? run_typed<double>(ec, progress)
                                               : run_typed<float>(ec, progress);
    if (write_outputs) {
        write_raw_jsonl(out.rows, ec.out_raw);
        std::string timing = ec.out_timing.empty() ? ec.out_raw + ".timing.jsonl" : ec.out_timing;
        write_timing_jsonl(out.rows, out.wall_ms, timing);
        for (const std::string& fmt : ec.report_formats) {
            if (fmt == "csv")
                write_report_csv(out.rows, &out.wall_ms, ec.out_report_prefix + ".csv");
            else if (fmt == "json")
                write_report_json(out.report, ec.out_report_prefix + ".json");
            else if (fmt == "md")
                write_report_markdown(out.report, ec.out_report_prefix + ".md");
            else
                throw ConfigError("unknown report format '" + fmt + "'");
        }
    }
    return out;
}

}  // namespace soda
