#include "soda/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written by memcpy and assumes a little-endian host");

namespace soda {

namespace {

constexpr char kMagic[8] = {'S', 'O', 'D', 'A', 'M', 'D', 'L', '1'};
constexpr std::uint64_t kAlign = 64;

std::uint64_t align_up(std::uint64_t x) { return (x + kAlign - 1) / kAlign * kAlign; }

struct TensorDesc {
    std::string name;
    std::string dtype;
    std::vector<long> shape;
    std::uint64_t byte_offset = 0;
    std::uint64_t byte_len = 0;
};

}  // namespace

nlohmann::ordered_json config_to_json(const ModelConfig& cfg) {
    nlohmann::ordered_json j;
    j["vocab_size"] = cfg.vocab_size;
    j["n_layers"] = cfg.n_layers;
    j["d_model"] = cfg.d_model;
    j["n_heads"] = cfg.n_heads;
    j["d_ff"] = cfg.d_ff;
    j["max_seq_len"] = cfg.max_seq_len;
    j["activation"] = act_name(cfg.activation);
    j["layernorm_eps"] = cfg.layernorm_eps;
    j["tie_output"] = cfg.tie_output;
    return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    try {
        cfg.vocab_size = j.at("vocab_size").get<long>();
        cfg.n_layers = j.at("n_layers").get<long>();
        cfg.d_model = j.at("d_model").get<long>();
        cfg.n_heads = j.at("n_heads").get<long>();
        cfg.d_ff = j.at("d_ff").get<long>();
        cfg.max_seq_len = j.at("max_seq_len").get<long>();
        cfg.activation = act_from_name(j.at("activation").get<std::string>());
        cfg.layernorm_eps = j.at("layernorm_eps").get<double>();
        cfg.tie_output = j.at("tie_output").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

template <typename R>
void save_checkpoint(const ModelConfig& cfg, ModelWeights<R>& w, const std::string& path) {
    nlohmann::ordered_json header;
    header["config"] = config_to_json(cfg);
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    std::uint64_t offset = 0;
    std::vector<const Tensor<R>*> order;
    for_each_tensor(cfg, w, [&](const std::string& name, Tensor<R>& t) {
        offset = align_up(offset);
        nlohmann::ordered_json d;
        d["name"] = name;
        d["dtype"] = dtype_name(dtype_of<R>());
        d["shape"] = t.shape;
        d["byte_offset"] = offset;
        d["byte_len"] = static_cast<std::uint64_t>(t.numel() * sizeof(R));
        tensors.push_back(std::move(d));
        order.push_back(&t);
        offset += t.numel() * sizeof(R);
    });
    header["tensors"] = std::move(tensors);
    std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ParseError("cannot open '" + path + "' for writing");
    f.write(kMagic, 8);
    std::uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), hs.size());
    std::uint64_t pos = 0;
    static const char zeros[kAlign] = {};
    for (const Tensor<R>* t : order) {
        std::uint64_t aligned = align_up(pos);
        if (aligned > pos) f.write(zeros, aligned - pos);
        pos = aligned;
        f.write(reinterpret_cast<const char*>(t->data.data()), t->numel() * sizeof(R));
        pos += t->numel() * sizeof(R);
    }
    if (!f) throw ParseError("short write to '" + path + "'");
}

namespace {

struct Header {
    ModelConfig cfg;
    Dtype dtype = Dtype::f32;
    std::vector<TensorDesc> descs;
    std::uint64_t payload_len = 0;
};

Header read_and_validate_header(std::ifstream& f, const std::string& path) {
    char magic[8];
    if (!f.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw ParseError("'" + path + "' is not a model checkpoint (bad magic)");
    std::uint64_t hlen = 0;
    if (!f.read(reinterpret_cast<char*>(&hlen), 8))
        throw ParseError("'" + path + "': truncated header length");
    if (hlen == 0 || hlen > (1u << 26))
        throw ParseError("'" + path + "': implausible header length");
    std::string hs(hlen, '\0');
    if (!f.read(hs.data(), hlen)) throw ParseError("'" + path + "': truncated header");

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("'" + path + "': header is not valid JSON: " + e.what());
    }

    Header h;
    if (!j.contains("config")) throw ParseError("'" + path + "': header lacks a model config");
    h.cfg = config_from_json(j["config"]);
    if (!j.contains("tensors") || !j["tensors"].is_array())
        throw ParseError("'" + path + "': header lacks a tensor table");
    bool first = true;
    for (const auto& d : j["tensors"]) {
        TensorDesc td;
        try {
            td.name = d.at("name").get<std::string>();
            td.dtype = d.at("dtype").get<std::string>();
            td.shape = d.at("shape").get<std::vector<long>>();
            td.byte_offset = d.at("byte_offset").get<std::uint64_t>();
            td.byte_len = d.at("byte_len").get<std::uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("'" + path + "': bad tensor descriptor: " + e.what());
        }
        Dtype dt = dtype_from_name(td.dtype);
        if (first) {
            h.dtype = dt;
            first = false;
        } else if (dt != h.dtype) {
            throw ParseError("'" + path + "': mixed tensor dtypes are not supported");
        }
        std::uint64_t expect = Tensor<float>::numel_of(td.shape) * dtype_size(dt);
        if (expect != td.byte_len)
            throw ParseError("'" + path + "': tensor '" + td.name + "' declares " +
                             std::to_string(td.byte_len) + " bytes but its shape needs " +
                             std::to_string(expect));
        if (td.byte_offset % kAlign != 0)
            throw ParseError("'" + path + "': tensor '" + td.name + "' offset not 64-byte aligned");
        h.payload_len = std::max(h.payload_len, td.byte_offset + td.byte_len);
        h.descs.push_back(std::move(td));
    }
    if (h.descs.empty()) throw ParseError("'" + path + "': empty tensor table");
    return h;
}

template <typename S, typename R>
void load_payload(std::ifstream& f, const std::string& path, const Header& h,
                  const ModelConfig& cfg, ModelWeights<R>& w) {
    std::vector<char> payload(h.payload_len);
    if (!f.read(payload.data(), h.payload_len))
        throw ParseError("'" + path + "': truncated payload");
    std::size_t next = 0;
    for_each_tensor(cfg, w, [&](const std::string& name, Tensor<R>& t) {
        if (next >= h.descs.size())
            throw ParseError("'" + path + "': tensor table ends before '" + name + "'");
        const TensorDesc& d = h.descs[next++];
        if (d.name != name)
            throw ParseError("'" + path + "': expected tensor '" + name + "', found '" + d.name +
                             "'");
        if (d.shape != t.shape)
            throw ParseError("'" + path + "': tensor '" + name + "' has shape " +
                             shape_str(d.shape) + ", config implies " + shape_str(t.shape));
        const S* src = reinterpret_cast<const S*>(payload.data() + d.byte_offset);
        if constexpr (std::is_same_v<S, R>) {
            std::memcpy(t.data.data(), src, d.byte_len);
        } else {
            for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] = static_cast<R>(src[i]);
        }
    });
    if (next != h.descs.size())
        throw ParseError("'" + path + "': tensor table has " +
                         std::to_string(h.descs.size() - next) + " unexpected extra entries");
}

}  // namespace

Dtype peek_checkpoint_dtype(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open '" + path + "'");
    return read_and_validate_header(f, path).dtype;
}

template <typename R>
std::pair<ModelConfig, ModelWeights<R>> load_checkpoint(const std::string& path, bool allow_cast) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open '" + path + "'");
    Header h = read_and_validate_header(f, path);
    if (h.dtype != dtype_of<R>() && !allow_cast)
        throw ParseError("'" + path + "' stores " + dtype_name(h.dtype) + " tensors, wanted " +
                         dtype_name(dtype_of<R>()));
    ModelWeights<R> w = allocate_weights<R>(h.cfg);
    if (h.dtype == Dtype::f32)
        load_payload<float>(f, path, h, h.cfg, w);
    else
        load_payload<double>(f, path, h, h.cfg, w);
    validate_weights(h.cfg, w);
    return {h.cfg, std::move(w)};
}

template void save_checkpoint<float>(const ModelConfig&, ModelWeights<float>&,
                                     const std::string&);
template void save_checkpoint<double>(const ModelConfig&, ModelWeights<double>&,
                                      const std::string&);
template std::pair<ModelConfig, ModelWeights<float>> load_checkpoint<float>(const std::string&,
                                                                            bool);
template std::pair<ModelConfig, ModelWeights<double>> load_checkpoint<double>(const std::string&,
                                                                              bool);

}  // namespace soda
