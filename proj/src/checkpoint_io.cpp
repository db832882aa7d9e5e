#include "islice/checkpoint_io.hpp"

#include "json.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace islice {

using json = nlohmann::json;

namespace {

constexpr char kMagic[8] = {'I', 'S', 'L', 'I', 'C', 'E', '0', '1'};

json config_to_json(const ModelConfig& c) {
    return json{{"layers", c.layers},       {"hidden", c.hidden},
                {"heads", c.heads},         {"kv_groups", c.kv_groups},
                {"head_dim", c.head_dim},   {"inter", c.inter},
                {"vocab", c.vocab},         {"rope_theta", c.rope_theta},
                {"rope_enabled", c.rope_enabled}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.layers = j.at("layers");
    c.hidden = j.at("hidden");
    c.heads = j.at("heads");
    c.kv_groups = j.at("kv_groups");
    c.head_dim = j.at("head_dim");
    c.inter = j.at("inter");
    c.vocab = j.at("vocab");
    c.rope_theta = j.at("rope_theta");
    c.rope_enabled = j.at("rope_enabled");
    return c;
}

json layout_to_json(const std::vector<HeadLayout>& layouts) {
    json arr = json::array();
    for (const auto& l : layouts) {
        json masks = json::array();
        for (const auto& m : l.rope_pair_mask) masks.push_back(std::vector<int>(m.begin(), m.end()));
        arr.push_back(json{{"retained_heads", l.retained_heads},
                           {"per_head_dim", l.per_head_dim},
                           {"rope_pair_mask", masks},
                           {"ffn_dim", l.ffn_dim}});
    }
    return arr;
}

std::vector<HeadLayout> layout_from_json(const json& arr) {
    std::vector<HeadLayout> out;
    for (const auto& j : arr) {
        HeadLayout l;
        l.retained_heads = j.at("retained_heads").get<std::vector<int>>();
        l.per_head_dim = j.at("per_head_dim");
        for (const auto& m : j.at("rope_pair_mask")) {
            std::vector<int> raw = m.get<std::vector<int>>();
            l.rope_pair_mask.emplace_back(raw.begin(), raw.end());
        }
        l.ffn_dim = j.at("ffn_dim");
        out.push_back(std::move(l));
    }
    return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    json header;
    header["config"] = config_to_json(ckpt.config);
    header["layout"] = layout_to_json(ckpt.layout);

    std::vector<float> payload;
    uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        const uint64_t len = static_cast<uint64_t>(t.size()) * sizeof(float);
        header[name] = json{{"dtype", "f32"},
                            {"shape", {t.rows(), t.cols()}},
                            {"offset", offset},
                            {"length", len}};
        for (Eigen::Index i = 0; i < t.rows(); ++i)
            for (Eigen::Index j = 0; j < t.cols(); ++j)
                payload.push_back(static_cast<float>(t(i, j)));
        offset += len;
    }

    const std::string hs = header.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for write: " + path);
    f.write(kMagic, 8);
    const uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    f.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!f) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw IoError("bad magic, not an ISLICE01 container: " + path);
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    if (!f) throw IoError("truncated header length: " + path);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw IoError("truncated header: " + path);

    json header = json::parse(hs, nullptr, /*allow_exceptions=*/false);
    if (header.is_discarded()) throw IoError("malformed JSON header: " + path);

    Checkpoint ckpt;
    ckpt.config = config_from_json(header.at("config"));
    ckpt.layout = layout_from_json(header.at("layout"));

    std::vector<char> payload((std::istreambuf_iterator<char>(f)),
                              std::istreambuf_iterator<char>());
    for (auto& [key, meta] : header.items()) {
        if (key == "config" || key == "layout") continue;
        if (meta.at("dtype") != "f32") throw IoError("unsupported dtype for " + key);
        const long rows = meta.at("shape")[0];
        const long cols = meta.at("shape")[1];
        const uint64_t off = meta.at("offset");
        const uint64_t len = meta.at("length");
        if (off + len > payload.size())
            throw IoError("truncated payload for tensor " + key);
        if (len != static_cast<uint64_t>(rows) * cols * sizeof(float))
            throw IoError("length does not match shape for tensor " + key);
        Mat t(rows, cols);
        const float* src = reinterpret_cast<const float*>(payload.data() + off);
        for (long i = 0; i < rows; ++i)
            for (long j = 0; j < cols; ++j) t(i, j) = static_cast<double>(src[i * cols + j]);
        ckpt.tensors.emplace(key, std::move(t));
    }
    ckpt.validate();
    return ckpt;
}

}  // namespace islice
