#include "soda/dataset.hpp"

#include <fstream>

#include <json.hpp>

#include "soda/rng.hpp"

namespace soda {

std::vector<DatasetRecord> gen_random_dataset(long vocab_size, long len_lo, long len_hi,
                                              long per_length, std::uint64_t seed) {
    if (vocab_size < 1) throw ParamError("gen_random_dataset: empty vocabulary");
    if (len_lo < 1 || len_hi < len_lo) throw ParamError("gen_random_dataset: bad length range");
    if (per_length < 1) throw ParamError("gen_random_dataset: per_length must be positive");
    std::vector<DatasetRecord> out;
    out.reserve((len_hi - len_lo + 1) * per_length);
    long id = 0;
    for (long n = len_lo; n <= len_hi; ++n) {
        for (long r = 0; r < per_length; ++r) {
            DatasetRecord rec;
            rec.id = id;
            RandomStream rs = RandomStream::from(seed, "data-rec", static_cast<std::uint64_t>(id));
            rec.tokens.resize(n);
            for (long i = 0; i < n; ++i)
                rec.tokens[i] = static_cast<int>(rs.below(static_cast<std::uint64_t>(vocab_size)));
            out.push_back(std::move(rec));
            ++id;
        }
    }
    return out;
}

void write_dataset_jsonl(const std::vector<DatasetRecord>& records, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ParseError("cannot open '" + path + "' for writing");
    for (const auto& rec : records) {
        nlohmann::ordered_json j;
        j["id"] = rec.id;
        j["tokens"] = rec.tokens;
        if (rec.has_pii) j["pii_mask"] = rec.pii_mask;
        f << j.dump() << '\n';
    }
    if (!f) throw ParseError("short write to '" + path + "'");
}

std::vector<DatasetRecord> read_dataset_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open '" + path + "'");
    std::vector<DatasetRecord> out;
    std::string line;
    long lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
            DatasetRecord rec;
            rec.id = j.at("id").get<long>();
            rec.tokens = j.at("tokens").get<TokenSequence>();
            if (j.contains("pii_mask")) {
                rec.pii_mask = j["pii_mask"].get<std::vector<long>>();
                rec.has_pii = true;
            }
            out.push_back(std::move(rec));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        if (out.back().tokens.empty())
            throw ParseError(path + ":" + std::to_string(lineno) + ": empty token sequence");
        for (long p : out.back().pii_mask)
            if (p < 0 || p >= static_cast<long>(out.back().tokens.size()))
                throw ParseError(path + ":" + std::to_string(lineno) +
                                 ": pii position out of range");
    }
    return out;
}

}  // namespace soda
