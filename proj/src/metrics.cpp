#include "soda/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace soda {

double exact_match(const TokenSequence& x_star, const TokenSequence& x) {
    return x_star == x ? 1.0 : 0.0;
}

double partial_match(const TokenSequence& x_star, const TokenSequence& x) {
    if (x.empty()) throw ContractError("partial_match: empty reference");
    std::size_t overlap = std::min(x_star.size(), x.size());
    long hits = 0;
    for (std::size_t i = 0; i < overlap; ++i)
        if (x_star[i] == x[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(x.size());
}

std::optional<double> pii_match(const TokenSequence& x_star, const TokenSequence& x,
                                const std::vector<long>& mask) {
    if (mask.empty()) return std::nullopt;
    long hits = 0;
    for (long p : mask) {
        if (p < 0 || p >= static_cast<long>(x.size()))
            throw ContractError("pii_match: mask position out of range");
        if (p < static_cast<long>(x_star.size()) && x_star[p] == x[p]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(mask.size());
}

std::pair<double, double> wilson_interval(long successes, long trials) {
    if (trials <= 0) throw ContractError("wilson_interval: no trials");
    if (successes < 0 || successes > trials)
        throw ContractError("wilson_interval: successes outside [0, trials]");
    const double z = 1.959964;
    double n = static_cast<double>(trials);
    double p = static_cast<double>(successes) / n;
    double z2 = z * z;
    double denom = 1.0 + z2 / n;
    double center = (p + z2 / (2.0 * n)) / denom;
    double half = (z / denom) * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n));
    return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

void write_raw_jsonl(const std::vector<RawRow>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ParseError("cannot open '" + path + "' for writing");
    for (const auto& r : rows) {
        nlohmann::ordered_json j;
        j["record_id"] = r.record_id;
        j["n"] = r.n;
        j["k"] = r.k;
        j["m"] = r.m;
        j["algorithm"] = r.algorithm;
        j["iterations"] = r.iterations;
        j["forwards"] = r.forwards;
        j["success"] = r.success;
        j["exact"] = r.exact;
        j["partial"] = r.partial;
        if (r.pii)
            j["pii"] = *r.pii;
        else
            j["pii"] = nullptr;
        j["final_loss"] = r.final_loss;
        j["x_star"] = r.x_star;
        j["length_mismatch"] = r.length_mismatch;
        f << j.dump() << '\n';
    }
    if (!f) throw ParseError("short write to '" + path + "'");
}

std::vector<RawRow> read_raw_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open '" + path + "'");
    std::vector<RawRow> out;
    std::string line;
    long lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            RawRow r;
            r.record_id = j.at("record_id").get<long>();
            r.n = j.at("n").get<long>();
            r.k = j.at("k").get<long>();
            r.m = j.at("m").get<long>();
            r.algorithm = j.at("algorithm").get<std::string>();
            r.iterations = j.at("iterations").get<long>();
            r.forwards = j.at("forwards").get<long>();
            r.success = j.at("success").get<bool>();
            r.exact = j.at("exact").get<bool>();
            r.partial = j.at("partial").get<double>();
            if (!j.at("pii").is_null()) r.pii = j["pii"].get<double>();
            r.final_loss = j.at("final_loss").get<double>();
            r.x_star = j.at("x_star").get<TokenSequence>();
            r.length_mismatch = j.at("length_mismatch").get<bool>();
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void write_timing_jsonl(const std::vector<RawRow>& rows, const std::vector<double>& wall_ms,
                        const std::string& path) {
    if (rows.size() != wall_ms.size())
        throw ContractError("timing entries disagree with raw row count");
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ParseError("cannot open '" + path + "' for writing");
    for (std::size_t i = 0; i < rows.size(); ++i) {
        nlohmann::ordered_json j;
        j["row"] = i;
        j["record_id"] = rows[i].record_id;
        j["wall_ms"] = wall_ms[i];
        f << j.dump() << '\n';
    }
}

std::vector<double> read_timing_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open '" + path + "'");
    std::vector<double> out;
    std::string line;
    long lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            std::size_t row = j.at("row").get<std::size_t>();
            if (row >= out.size()) out.resize(row + 1, 0.0);
            out[row] = j.at("wall_ms").get<double>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

namespace {

struct Accum {
    long trials = 0;
    long exact_hits = 0;
    long successes = 0;
    long false_discoveries = 0;
    long forwards = 0;
    std::vector<double> partials;
    double pii_sum = 0;
    long pii_n = 0;

    void add(const RawRow& r) {
        ++trials;
        if (r.exact) ++exact_hits;
        if (r.success) {
            ++successes;
            if (!r.exact) ++false_discoveries;
        }
        forwards += r.forwards;
        partials.push_back(r.partial);
        if (r.pii) {
            pii_sum += *r.pii;
            ++pii_n;
        }
    }

    CellStats finalize() const {
        CellStats c;
        c.trials = trials;
        c.exact_hits = exact_hits;
        c.successes = successes;
        c.false_discoveries = false_discoveries;
        c.forwards_total = forwards;
        if (trials > 0) {
            c.exact_rate = static_cast<double>(exact_hits) / trials;
            auto [lo, hi] = wilson_interval(exact_hits, trials);
            c.wilson_lo = lo;
            c.wilson_hi = hi;
            double mean = 0;
            for (double p : partials) mean += p;
            mean /= trials;
            c.partial_mean = mean;
            if (trials > 1) {
                double ss = 0;
                for (double p : partials) ss += (p - mean) * (p - mean);
                c.partial_se = std::sqrt(ss / (trials - 1)) / std::sqrt(double(trials));
            }
        }
        c.pii_records = pii_n;
        if (pii_n > 0) c.pii_rate = pii_sum / pii_n;
        if (successes > 0)
            c.false_discovery_rate = static_cast<double>(false_discoveries) / successes;
        return c;
    }
};

}  // namespace

MetricsReport aggregate(const std::vector<RawRow>& rows, const std::vector<double>* wall_ms,
                        const std::vector<DatasetRecord>* truth) {
    MetricsReport rep;
    Accum overall;
    std::map<long, Accum> by_len;
    std::map<std::pair<long, long>, Accum> by_cell;
    for (const auto& r : rows) {
        overall.add(r);
        by_len[r.n].add(r);
        by_cell[{r.k, r.m}].add(r);
    }
    rep.overall = overall.finalize();
    for (auto& [n, a] : by_len) rep.per_length[n] = a.finalize();
    for (auto& [km, a] : by_cell) rep.per_cell[km] = a.finalize();
    if (wall_ms)
        for (double w : *wall_ms) rep.wall_ms_total += w;
    if (truth) {
        std::map<long, const DatasetRecord*> by_id;
        for (const auto& rec : *truth) by_id[rec.id] = &rec;
        std::vector<long> hits, trials;
        for (const auto& r : rows) {
            auto it = by_id.find(r.record_id);
            if (it == by_id.end()) continue;
            const TokenSequence& x = it->second->tokens;
            for (std::size_t p = 0; p < x.size(); ++p) {
                if (p >= trials.size()) {
                    trials.resize(p + 1, 0);
                    hits.resize(p + 1, 0);
                }
                ++trials[p];
                if (p < r.x_star.size() && r.x_star[p] == x[p]) ++hits[p];
            }
        }
        for (std::size_t p = 0; p < trials.size(); ++p) {
            rep.per_position.emplace_back(static_cast<long>(p),
                                          trials[p] ? double(hits[p]) / trials[p] : 0.0);
            rep.per_position_trials.push_back(trials[p]);
        }
    }
    return rep;
}

void write_report_csv(const std::vector<RawRow>& rows, const std::vector<double>* wall_ms,
                      const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ParseError("cannot open '" + path + "' for writing");
    f << "record_id,n,k,m,algorithm,iterations,forwards,success,exact,partial,pii,final_loss,"
         "wall_ms\n";
    f << std::setprecision(10);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const RawRow& r = rows[i];
        f << r.record_id << ',' << r.n << ',' << r.k << ',' << r.m << ',' << r.algorithm << ','
          << r.iterations << ',' << r.forwards << ',' << int(r.success) << ',' << int(r.exact)
          << ',' << r.partial << ',';
        if (r.pii) f << *r.pii;
        f << ',' << r.final_loss << ',';
        if (wall_ms && i < wall_ms->size()) f << (*wall_ms)[i];
        f << '\n';
    }
}

namespace {

nlohmann::ordered_json cell_to_json(const CellStats& c) {
    nlohmann::ordered_json j;
    j["trials"] = c.trials;
    j["exact_hits"] = c.exact_hits;
    j["exact_rate"] = c.exact_rate;
    j["wilson_lo"] = c.wilson_lo;
    j["wilson_hi"] = c.wilson_hi;
    j["partial_mean"] = c.partial_mean;
    j["partial_se"] = c.partial_se;
    if (c.pii_rate)
        j["pii_rate"] = *c.pii_rate;
    else
        j["pii_rate"] = nullptr;
    j["pii_records"] = c.pii_records;
    j["successes"] = c.successes;
    j["false_discoveries"] = c.false_discoveries;
    j["false_discovery_rate"] = c.false_discovery_rate;
    j["forwards_total"] = c.forwards_total;
    return j;
}

std::string pct_pm(const CellStats& c) {
    std::ostringstream os;
    double half = (c.wilson_hi - c.wilson_lo) * 50.0;
    os << std::fixed << std::setprecision(1) << c.exact_rate * 100.0 << " ± " << half;
    return os.str();
}

}  // namespace

void write_report_json(const MetricsReport& rep, const std::string& path) {
    nlohmann::ordered_json j;
    j["overall"] = cell_to_json(rep.overall);
    nlohmann::ordered_json lens = nlohmann::ordered_json::object();
    for (const auto& [n, c] : rep.per_length) lens[std::to_string(n)] = cell_to_json(c);
    j["per_length"] = std::move(lens);
    nlohmann::ordered_json cells = nlohmann::ordered_json::array();
    for (const auto& [km, c] : rep.per_cell) {
        nlohmann::ordered_json e;
        e["k"] = km.first;
        e["m"] = km.second;
        e["stats"] = cell_to_json(c);
        cells.push_back(std::move(e));
    }
    j["per_cell"] = std::move(cells);
    nlohmann::ordered_json pos = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < rep.per_position.size(); ++i) {
        nlohmann::ordered_json e;
        e["position"] = rep.per_position[i].first;
        e["match_rate"] = rep.per_position[i].second;
        e["records"] = rep.per_position_trials[i];
        pos.push_back(std::move(e));
    }
    j["per_position"] = std::move(pos);
    j["wall_ms_total"] = rep.wall_ms_total;
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ParseError("cannot open '" + path + "' for writing");
    f << j.dump(2) << '\n';
}

void write_report_markdown(const MetricsReport& rep, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ParseError("cannot open '" + path + "' for writing");
    f << "# Inversion campaign report\n\n";
    f << "- records: " << rep.overall.trials << "\n";
    f << "- exact match: " << pct_pm(rep.overall) << " %\n";
    f << std::fixed << std::setprecision(2);
    f << "- partial match: " << rep.overall.partial_mean * 100.0 << " ± "
      << rep.overall.partial_se * 100.0 << " %\n";
    if (rep.overall.pii_rate)
        f << "- pii match: " << *rep.overall.pii_rate * 100.0 << " % over "
          << rep.overall.pii_records << " masked records\n";
    f << "- successes: " << rep.overall.successes
      << ", false discoveries: " << rep.overall.false_discoveries << " (rate "
      << rep.overall.false_discovery_rate << ")\n";
    f << "- forward passes: " << rep.overall.forwards_total << "\n";
    if (rep.wall_ms_total > 0) f << "- wall time: " << rep.wall_ms_total / 1000.0 << " s\n";

    if (!rep.per_length.empty()) {
        f << "\n## Exact match by input length\n\n";
        f << "| n | exact % | partial % | records |\n|---|---|---|---|\n";
        for (const auto& [n, c] : rep.per_length)
            f << "| " << n << " | " << pct_pm(c) << " | " << c.partial_mean * 100.0 << " | "
              << c.trials << " |\n";
    }

    if (rep.per_cell.size() > 1) {
        std::vector<long> ks, ms;
        for (const auto& [km, c] : rep.per_cell) {
            if (std::find(ks.begin(), ks.end(), km.first) == ks.end()) ks.push_back(km.first);
            if (std::find(ms.begin(), ms.end(), km.second) == ms.end()) ms.push_back(km.second);
        }
        f << "\n## Exact match grid (logits per token × output tokens)\n\n| k \\ m |";
        for (long m : ms) f << " " << m << " |";
        f << "\n|---|";
        for (std::size_t i = 0; i < ms.size(); ++i) f << "---|";
        f << "\n";
        for (long k : ks) {
            f << "| " << k << " |";
            for (long m : ms) {
                auto it = rep.per_cell.find({k, m});
                f << " " << (it != rep.per_cell.end() ? pct_pm(it->second) : std::string("-"))
                  << " |";
            }
            f << "\n";
        }
    }

    if (!rep.per_position.empty()) {
        f << "\n## Match rate by input position\n\n| position | match % | records |\n|---|---|---|\n";
        for (std::size_t i = 0; i < rep.per_position.size(); ++i)
            f << "| " << rep.per_position[i].first + 1 << " | "
              << rep.per_position[i].second * 100.0 << " | " << rep.per_position_trials[i]
              << " |\n";
    }
}

}  // namespace soda
