#include "bidiseq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "bidiseq/error.hpp"

namespace bidiseq::model {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using nlohmann::ordered_json;

constexpr char kMagic[8] = {'B', 'I', 'D', 'I', 'S', 'E', 'Q', '1'};

std::string hex64(std::uint64_t v) {
    std::ostringstream out;
    out << std::hex;
    out.width(16);
    out.fill('0');
    out << v;
    return out.str();
}

ordered_json config_json(const ModelConfig& c) {
    ordered_json j;
    j["preset"] = std::string(preset_name(c.preset));
    j["embed_dim"] = c.embed_dim;
    j["ffn_dim"] = c.ffn_dim;
    j["n_layers"] = c.n_layers;
    j["n_heads"] = c.n_heads;
    j["learning_rate"] = c.learning_rate;
    j["dropout"] = c.dropout;
    j["max_len"] = c.max_len;
    return j;
}

ModelConfig config_from_json(const ordered_json& j) {
    ModelConfig c;
    c.preset = parse_preset(j.at("preset").get<std::string>());
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.dropout = j.at("dropout").get<double>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.validate();
    return c;
}

Vocabulary vocab_from_json(const ordered_json& j) {
    Vocabulary v(j.at("indexed_unks").get<std::size_t>());
    const auto tokens = j.at("tokens").get<std::vector<std::string>>();
    const auto counts = j.at("counts").get<std::vector<std::uint64_t>>();
    if (tokens.size() != counts.size()) throw Error("checkpoint vocabulary: token and count lists differ in length");
    if (tokens.size() < v.size()) throw Error("checkpoint vocabulary is missing reserved tokens");
    for (std::size_t k = 0; k < v.size(); ++k) {
        if (tokens[k] != v.tokens()[k]) throw Error("checkpoint vocabulary: unexpected reserved token '" + tokens[k] + "'");
    }
    for (std::size_t k = v.size(); k < tokens.size(); ++k) {
        if (v.find(tokens[k])) throw Error("checkpoint vocabulary: duplicate token '" + tokens[k] + "'");
        v.add(tokens[k]);
    }
    for (std::size_t k = 0; k < tokens.size(); ++k) v.set_count(static_cast<TokenId>(k), counts[k]);
    if (hex64(v.hash()) != j.at("hash").get<std::string>()) throw Error("checkpoint vocabulary hash is inconsistent");
    return v;
}

struct Entry {
    std::string group;
    std::string name;
    const Matrix<float>* value;
};

}  // namespace

Transformer<float> Checkpoint::model() const { return Transformer<float>(config, vocab.size(), tensors); }

Checkpoint make_checkpoint(const Transformer<float>& model, const Vocabulary& vocab) {
    if (model.vocab_size() != vocab.size()) throw Error("model and vocabulary sizes differ");
    Checkpoint c;
    c.config = model.config();
    c.vocab = vocab;
    c.tensors = model.tensors();
    return c;
}

std::string serialize_checkpoint(const Checkpoint& c) {
    std::vector<Entry> entries;
    for (const auto& t : c.tensors) entries.push_back({"param", t.name, &t.value});
    if (c.optimizer) {
        if (c.optimizer->first_moment.size() != c.tensors.size() ||
            c.optimizer->second_moment.size() != c.tensors.size()) {
            throw Error("optimizer state does not match the tensor list");
        }
        for (std::size_t k = 0; k < c.tensors.size(); ++k) {
            entries.push_back({"adam_m", c.tensors[k].name, &c.optimizer->first_moment[k]});
        }
        for (std::size_t k = 0; k < c.tensors.size(); ++k) {
            entries.push_back({"adam_v", c.tensors[k].name, &c.optimizer->second_moment[k]});
        }
    }

    ordered_json header;
    header["version"] = kCheckpointVersion;
    header["config"] = config_json(c.config);
    ordered_json vocab;
    vocab["indexed_unks"] = c.vocab.indexed_unk_count();
    vocab["tokens"] = c.vocab.tokens();
    std::vector<std::uint64_t> counts;
    for (std::size_t k = 0; k < c.vocab.size(); ++k) counts.push_back(c.vocab.count(static_cast<TokenId>(k)));
    vocab["counts"] = counts;
    vocab["hash"] = hex64(c.vocab.hash());
    header["vocab"] = vocab;
    header["seed"] = c.seed;
    header["step"] = c.step;
    header["optimizer"] = c.optimizer ? ordered_json{{"step", c.optimizer->step}} : ordered_json(nullptr);
    ordered_json meta = ordered_json::object();
    for (const auto& [k, v] : c.metadata) meta[k] = v;
    header["metadata"] = meta;

    ordered_json manifest = ordered_json::array();
    std::size_t offset = 0;
    for (const auto& e : entries) {
        if (e.value->size() != e.value->rows * e.value->cols) throw Error("tensor " + e.name + " has a bad shape");
        manifest.push_back({{"group", e.group},
                            {"name", e.name},
                            {"shape", {e.value->rows, e.value->cols}},
                            {"offset", offset}});
        offset += e.value->size() * sizeof(float);
    }
    header["tensors"] = manifest;
    header["data_bytes"] = offset;

    const std::string text = header.dump();
    if (text.size() > UINT32_MAX) throw Error("checkpoint header too large");
    const auto len = static_cast<std::uint32_t>(text.size());
    std::string out;
    out.reserve(sizeof(kMagic) + 4 + text.size() + offset);
    out.append(kMagic, sizeof(kMagic));
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((len >> (8 * b)) & 0xff));
    out += text;
    for (const auto& e : entries) {
        out.append(reinterpret_cast<const char*>(e.value->data.data()), e.value->size() * sizeof(float));
    }
    return out;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(checkpoint);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write checkpoint " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint parse_checkpoint(const std::string& bytes, const Vocabulary* expected_vocab) {
    if (bytes.size() < sizeof(kMagic) + 4 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw Error("not a bidiseq checkpoint (bad magic)");
    }
    std::uint32_t len = 0;
    for (int b = 0; b < 4; ++b) {
        len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[sizeof(kMagic) + b])) << (8 * b);
    }
    const std::size_t data_begin = sizeof(kMagic) + 4 + static_cast<std::size_t>(len);
    if (data_begin > bytes.size()) throw Error("checkpoint header is truncated");

    ordered_json header;
    try {
        header = ordered_json::parse(bytes.begin() + sizeof(kMagic) + 4, bytes.begin() + static_cast<std::ptrdiff_t>(data_begin));
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("checkpoint header is not valid JSON: ") + e.what());
    }

    try {
        const auto version = header.at("version").get<std::uint32_t>();
        if (version != kCheckpointVersion) {
            throw Error("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
        }
        Checkpoint c;
        c.config = config_from_json(header.at("config"));
        c.vocab = vocab_from_json(header.at("vocab"));
        if (expected_vocab && expected_vocab->hash() != c.vocab.hash()) {
            throw Error("checkpoint vocabulary hash " + hex64(c.vocab.hash()) + " does not match the expected " +
                        hex64(expected_vocab->hash()));
        }
        c.seed = header.at("seed").get<std::uint64_t>();
        c.step = header.at("step").get<std::uint64_t>();
        for (const auto& [k, v] : header.at("metadata").items()) c.metadata[k] = v.get<std::string>();

        const std::size_t available = bytes.size() - data_begin;
        std::map<std::string, std::vector<NamedTensor<float>>> groups;
        for (const auto& e : header.at("tensors")) {
            const auto shape = e.at("shape").get<std::vector<std::size_t>>();
            if (shape.size() != 2) throw Error("tensor shapes must be two-dimensional");
            const auto offset = e.at("offset").get<std::size_t>();
            const std::size_t count = shape[0] * shape[1];
            if (offset > available || count * sizeof(float) > available - offset) {
                throw Error("unexpected end of tensor data");
            }
            Matrix<float> m(shape[0], shape[1]);
            std::memcpy(m.data.data(), bytes.data() + data_begin + offset, count * sizeof(float));
            groups[e.at("group").get<std::string>()].push_back({e.at("name").get<std::string>(), std::move(m)});
        }
        if (header.contains("data_bytes") && header.at("data_bytes").get<std::size_t>() != available) {
            throw Error(available < header.at("data_bytes").get<std::size_t>() ? "unexpected end of tensor data"
                                                                               : "trailing bytes after tensor data");
        }
        c.tensors = std::move(groups["param"]);
        // Validates names and shapes against the layout the config implies.
        (void)Transformer<float>(c.config, c.vocab.size(), c.tensors);

        if (!header.at("optimizer").is_null()) {
            OptimizerState s;
            s.step = header.at("optimizer").at("step").get<std::uint64_t>();
            auto& m = groups["adam_m"];
            auto& v = groups["adam_v"];
            if (m.size() != c.tensors.size() || v.size() != c.tensors.size()) {
                throw Error("optimizer state does not match the tensor list");
            }
            for (std::size_t k = 0; k < c.tensors.size(); ++k) {
                if (m[k].name != c.tensors[k].name || v[k].name != c.tensors[k].name ||
                    !m[k].value.same_shape(c.tensors[k].value) || !v[k].value.same_shape(c.tensors[k].value)) {
                    throw Error("optimizer tensor shape mismatch for " + c.tensors[k].name);
                }
                s.first_moment.push_back(std::move(m[k].value));
                s.second_moment.push_back(std::move(v[k].value));
            }
            c.optimizer = std::move(s);
        }
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed checkpoint header: ") + e.what());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const Vocabulary* expected_vocab) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return parse_checkpoint(buf.str(), expected_vocab);
    } catch (const Error& e) {
        throw Error(path.string() + ": " + e.what());
    }
}

}  // namespace bidiseq::model
