#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "soda/common.hpp"

namespace soda {

struct DatasetRecord {
    long id = 0;
    TokenSequence tokens;
    std::vector<long> pii_mask;
    bool has_pii = false;
};

// Uniform i.i.d. token ids, one sub-stream per record so any single record
// can be regenerated in isolation.
std::vector<DatasetRecord> gen_random_dataset(long vocab_size, long len_lo, long len_hi,
                                              long per_length, std::uint64_t seed);

void write_dataset_jsonl(const std::vector<DatasetRecord>& records, const std::string& path);
std::vector<DatasetRecord> read_dataset_jsonl(const std::string& path);

}  // namespace soda
