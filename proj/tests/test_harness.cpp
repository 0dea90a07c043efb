#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "soda/checkpoint.hpp"
#include "soda/experiment.hpp"
#include "soda/metrics.hpp"
#include "soda/model.hpp"

using namespace soda;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& stem) {
        path = "/tmp/soda_harness_" + stem + "_" + std::to_string(::getpid());
    }
    ~TempFile() { std::remove(path.c_str()); }
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("wilson interval") {
    auto [lo, hi] = wilson_interval(50, 100);
    CHECK(lo == doctest::Approx(0.40383).epsilon(1e-4));
    CHECK(hi == doctest::Approx(0.59617).epsilon(1e-4));

    auto [lo0, hi0] = wilson_interval(0, 20);
    CHECK(lo0 == 0.0);
    CHECK(hi0 > 0.0);
    auto [lo1, hi1] = wilson_interval(20, 20);
    CHECK(lo1 < 1.0);
    CHECK(hi1 == 1.0);

    // More trials at the same rate tighten the interval.
    auto [la, ha] = wilson_interval(5, 10);
    auto [lb, hb] = wilson_interval(500, 1000);
    CHECK(hb - lb < ha - la);

    CHECK_THROWS_AS(wilson_interval(0, 0), ContractError);
    CHECK_THROWS_AS(wilson_interval(5, 4), ContractError);
}

TEST_CASE("positionwise scoring") {
    TokenSequence x = {1, 2, 3, 4};
    CHECK(exact_match(x, x) == 1.0);
    CHECK(partial_match(x, x) == 1.0);

    TokenSequence off = {1, 2, 3, 9};
    CHECK(exact_match(off, x) == 0.0);
    CHECK(partial_match(off, x) == 0.75);

    // Mismatched lengths: never exact, prefix overlap scored over the true length.
    TokenSequence shorter = {1, 2};
    CHECK(exact_match(shorter, x) == 0.0);
    CHECK(partial_match(shorter, x) == 0.5);
    TokenSequence longer = {1, 2, 3, 4, 7};
    CHECK(exact_match(longer, x) == 0.0);
    CHECK(partial_match(longer, x) == 1.0);

    CHECK_THROWS_AS(partial_match(off, TokenSequence{}), ContractError);

    TokenSequence star = {1, 9, 3, 9};
    auto hit = pii_match(star, x, {0, 2});
    REQUIRE(hit.has_value());
    CHECK(*hit == 1.0);
    auto half = pii_match(star, x, {2, 3});
    REQUIRE(half.has_value());
    CHECK(*half == 0.5);
    CHECK(!pii_match(star, x, {}).has_value());
    CHECK_THROWS_AS(pii_match(star, x, {9}), ContractError);
}

TEST_CASE("random dataset generation is seeded and well-formed") {
    auto a = gen_random_dataset(32, 2, 4, 3, 77);
    auto b = gen_random_dataset(32, 2, 4, 3, 77);
    auto c = gen_random_dataset(32, 2, 4, 3, 78);
    REQUIRE(a.size() == 9);
    bool any_diff = false;
    std::map<long, long> by_len;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].id == static_cast<long>(i));
        CHECK(a[i].tokens == b[i].tokens);
        if (a[i].tokens != c[i].tokens) any_diff = true;
        by_len[static_cast<long>(a[i].tokens.size())]++;
        for (int t : a[i].tokens) {
            CHECK(t >= 0);
            CHECK(t < 32);
        }
        for (long p : a[i].pii_mask) {
            CHECK(p >= 0);
            CHECK(p < static_cast<long>(a[i].tokens.size()));
        }
        CHECK(a[i].has_pii == !a[i].pii_mask.empty());
    }
    CHECK(any_diff);
    CHECK(by_len == std::map<long, long>{{2, 3}, {3, 3}, {4, 3}});

    TempFile f("dataset.jsonl");
    write_dataset_jsonl(a, f.path);
    auto back = read_dataset_jsonl(f.path);
    REQUIRE(back.size() == a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(back[i].id == a[i].id);
        CHECK(back[i].tokens == a[i].tokens);
        CHECK(back[i].pii_mask == a[i].pii_mask);
        CHECK(back[i].has_pii == a[i].has_pii);
    }
}

TEST_CASE("raw rows and timing sidecar round-trip") {
    std::vector<RawRow> rows(2);
    rows[0].record_id = 3;
    rows[0].n = 2;
    rows[0].k = k_all;
    rows[0].m = 1;
    rows[0].algorithm = "soda";
    rows[0].iterations = 41;
    rows[0].forwards = 123;
    rows[0].success = true;
    rows[0].exact = true;
    rows[0].partial = 1.0;
    rows[0].pii = 0.5;
    rows[0].final_loss = 0.0;
    rows[0].x_star = {4, 9};
    rows[1].record_id = 4;
    rows[1].n = 3;
    rows[1].k = 0;
    rows[1].m = 2;
    rows[1].algorithm = "gcg";
    rows[1].partial = 1.0 / 3.0;
    rows[1].final_loss = 0.125;
    rows[1].x_star = {1, 2, 3};
    rows[1].length_mismatch = true;

    TempFile raw("raw.jsonl");
    write_raw_jsonl(rows, raw.path);
    auto back = read_raw_jsonl(raw.path);
    REQUIRE(back.size() == 2);
    for (int i = 0; i < 2; ++i) {
        CHECK(back[i].record_id == rows[i].record_id);
        CHECK(back[i].n == rows[i].n);
        CHECK(back[i].k == rows[i].k);
        CHECK(back[i].m == rows[i].m);
        CHECK(back[i].algorithm == rows[i].algorithm);
        CHECK(back[i].iterations == rows[i].iterations);
        CHECK(back[i].forwards == rows[i].forwards);
        CHECK(back[i].success == rows[i].success);
        CHECK(back[i].exact == rows[i].exact);
        CHECK(back[i].partial == rows[i].partial);
        CHECK(back[i].pii == rows[i].pii);
        CHECK(back[i].final_loss == rows[i].final_loss);
        CHECK(back[i].x_star == rows[i].x_star);
        CHECK(back[i].length_mismatch == rows[i].length_mismatch);
    }

    TempFile timing("timing.jsonl");
    std::vector<double> wall = {12.625, 3.0078125};
    write_timing_jsonl(rows, wall, timing.path);
    CHECK(read_timing_jsonl(timing.path) == wall);
    CHECK_THROWS_AS(write_timing_jsonl(rows, {1.0}, timing.path), ContractError);
}

TEST_CASE("aggregation matches a hand recomputation") {
    std::vector<RawRow> rows;
    auto add = [&](long id, long n, long k, long m, bool succ, bool exact, double partial) {
        RawRow r;
        r.record_id = id;
        r.n = n;
        r.k = k;
        r.m = m;
        r.algorithm = "soda";
        r.success = succ;
        r.exact = exact;
        r.partial = partial;
        r.forwards = 10;
        rows.push_back(r);
    };
    add(0, 2, k_all, 1, true, true, 1.0);
    add(1, 2, k_all, 1, false, false, 0.5);
    add(0, 2, 4, 1, true, false, 0.5);  // a false discovery
    add(1, 2, 4, 1, false, false, 0.0);
    add(2, 3, k_all, 1, true, true, 1.0);

    std::vector<double> wall = {1.0, 2.0, 3.0, 4.0, 5.0};
    MetricsReport rep = aggregate(rows, &wall, nullptr);

    CHECK(rep.overall.trials == 5);
    CHECK(rep.overall.exact_hits == 2);
    CHECK(rep.overall.successes == 3);
    CHECK(rep.overall.false_discoveries == 1);
    CHECK(rep.overall.exact_rate == doctest::Approx(0.4));
    CHECK(rep.overall.false_discovery_rate == doctest::Approx(1.0 / 3.0));
    CHECK(rep.overall.partial_mean == doctest::Approx(0.6));
    CHECK(rep.overall.forwards_total == 50);
    auto [lo, hi] = wilson_interval(2, 5);
    CHECK(rep.overall.wilson_lo == doctest::Approx(lo));
    CHECK(rep.overall.wilson_hi == doctest::Approx(hi));
    CHECK(rep.wall_ms_total == doctest::Approx(15.0));

    // n=2: partial mean 0.5, sample se sqrt(var/n) with n-1 in the variance.
    const CellStats& len2 = rep.per_length.at(2);
    CHECK(len2.trials == 4);
    CHECK(len2.partial_mean == doctest::Approx(0.5));
    double var = (0.5 * 0.5 + 0.5 * 0.5) / 3.0;  // deviations 0.5, 0, 0, -0.5
    CHECK(len2.partial_se == doctest::Approx(std::sqrt(var) / 2.0));

    const CellStats& cell = rep.per_cell.at({4, 1});
    CHECK(cell.trials == 2);
    CHECK(cell.exact_hits == 0);
    CHECK(cell.false_discoveries == 1);
    CHECK(cell.false_discovery_rate == doctest::Approx(1.0));
    CHECK(rep.per_cell.at({k_all, 1}).trials == 3);

    // pii aggregates only over rows that define it.
    rows[0].pii = 1.0;
    rows[1].pii = 0.0;
    MetricsReport rep2 = aggregate(rows, nullptr, nullptr);
    CHECK(rep2.overall.pii_records == 2);
    REQUIRE(rep2.overall.pii_rate.has_value());
    CHECK(*rep2.overall.pii_rate == doctest::Approx(0.5));
    CHECK(!rep2.per_length.at(3).pii_rate.has_value());
}

TEST_CASE("per-position table uses the dataset truth") {
    std::vector<DatasetRecord> truth(2);
    truth[0].id = 10;
    truth[0].tokens = {1, 2, 3};
    truth[1].id = 11;
    truth[1].tokens = {4, 5, 6};
    std::vector<RawRow> rows(2);
    rows[0].record_id = 10;
    rows[0].n = 3;
    rows[0].x_star = {1, 9, 3};
    rows[1].record_id = 11;
    rows[1].n = 3;
    rows[1].x_star = {4, 5, 9};
    MetricsReport rep = aggregate(rows, nullptr, &truth);
    REQUIRE(rep.per_position.size() == 3);
    CHECK(rep.per_position[0].second == doctest::Approx(1.0));
    CHECK(rep.per_position[1].second == doctest::Approx(0.5));
    CHECK(rep.per_position[2].second == doctest::Approx(0.5));
    CHECK(rep.per_position_trials == std::vector<long>{2, 2, 2});
}

TEST_CASE("empty results give a header-only csv") {
    TempFile f("empty.csv");
    write_report_csv({}, nullptr, f.path);
    std::string text = slurp(f.path);
    CHECK(std::count(text.begin(), text.end(), '\n') == 1);
    CHECK(text.find("record_id") != std::string::npos);
}

TEST_CASE("campaign config parsing and validation") {
    nlohmann::json j = {
        {"model", "m.ckpt"},
        {"dataset", "d.jsonl"},
        {"algorithm", "gcg"},
        {"precision", "f64"},
        {"seed", 9},
        {"parallelism", 3},
        {"lengths", {2, 3}},
        {"max_records_per_length", 5},
        {"objective", {{"fluency_weight", 0.009}, {"output_softmax_tau", 1.0}}},
        {"grid", {{"k", {1, 4, "ALL"}}, {"m", {1, 2}}}},
        {"soda", {{"t_max", 50}, {"gamma", 0.1}}},
        {"gcg", {{"t_max", 10}, {"c_max", 20}, {"k_sub", 8}}},
        {"length_sweep", {{"enabled", true}, {"n_max", 4}}},
        {"out_raw", "x.jsonl"},
        {"report_formats", {"csv"}},
    };
    ExperimentConfig c = experiment_config_from_json(j);
    CHECK(c.model_path == "m.ckpt");
    CHECK(c.algorithm == "gcg");
    CHECK(c.precision == "f64");
    CHECK(c.seed == 9);
    CHECK(c.parallelism == 3);
    CHECK(c.lengths == std::vector<long>{2, 3});
    CHECK(c.max_records_per_length == 5);
    CHECK(c.fluency_weight == doctest::Approx(0.009));
    CHECK(c.k_values == std::vector<long>{1, 4, k_all});
    CHECK(c.m_values == std::vector<long>{1, 2});
    CHECK(c.soda.t_max == 50);
    CHECK(c.soda.gamma == doctest::Approx(0.1));
    CHECK(c.soda.t1 == 50);  // untouched defaults survive partial overrides
    CHECK(c.gcg.k_sub == 8);
    CHECK(c.length_sweep);
    CHECK(c.sweep_n_max == 4);
    CHECK(c.out_raw == "x.jsonl");
    CHECK(c.report_formats == std::vector<std::string>{"csv"});

    nlohmann::json bad = j;
    bad["algorithm"] = "annealing";
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
    bad = j;
    bad["precision"] = "f16";
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
    bad = j;
    bad["parallelism"] = 0;
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
    bad = j;
    bad["grid"]["k"] = nlohmann::json::array();
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
    bad = j;
    bad["grid"]["k"] = {400};  // larger than any vocabulary in use
    ExperimentConfig big = experiment_config_from_json(bad);
    CHECK(big.k_values == std::vector<long>{400});  // range-checked at run time
}

TEST_CASE("a small campaign runs end to end, reproducibly") {
    ModelConfig mc;
    mc.vocab_size = 16;
    mc.n_layers = 1;
    mc.d_model = 8;
    mc.n_heads = 2;
    mc.d_ff = 16;
    mc.max_seq_len = 8;
    auto w = init_random<float>(mc, 5);
    TempFile model("model.ckpt");
    save_checkpoint(mc, w, model.path);
    auto data = gen_random_dataset(16, 2, 3, 2, 11);
    TempFile dataset("data.jsonl");
    write_dataset_jsonl(data, dataset.path);

    TempFile raw1("raw1.jsonl"), raw2("raw2.jsonl");
    TempFile t1("t1.jsonl"), t2("t2.jsonl");
    ExperimentConfig cfg;
    cfg.model_path = model.path;
    cfg.dataset_path = dataset.path;
    cfg.seed = 21;
    cfg.k_values = {k_all, 2};
    cfg.m_values = {1};
    cfg.soda.t_max = 30;
    cfg.out_raw = raw1.path;
    cfg.out_timing = t1.path;
    cfg.report_formats = {};

    CampaignResult r1 = run_experiment(cfg);
    REQUIRE(r1.rows.size() == data.size() * 2);
    CHECK(r1.report.overall.trials == static_cast<long>(r1.rows.size()));
    // Rows come back (record, cell)-ordered with truth-scored fields filled.
    for (std::size_t i = 0; i < r1.rows.size(); ++i) {
        CHECK(r1.rows[i].record_id == static_cast<long>(i / 2));
        CHECK(r1.rows[i].algorithm == "soda");
        CHECK(r1.rows[i].x_star.size() == static_cast<std::size_t>(r1.rows[i].n));
    }

    cfg.parallelism = 2;
    cfg.out_raw = raw2.path;
    cfg.out_timing = t2.path;
    CampaignResult r2 = run_experiment(cfg);
    CHECK(slurp(raw1.path) == slurp(raw2.path));
    CHECK(read_timing_jsonl(t1.path).size() == r1.rows.size());
}
