#pragma once

#include <cstring>
#include <fstream>
#include <memory>
#include <string>

#include "json.hpp"
#include "vsm/model.hpp"

namespace vsm {

// Checkpoint layout: the magic "MVIS1", a little-endian u64 manifest length,
// the manifest JSON (configs plus name/shape/precision/offset per tensor),
// then raw little-endian scalar data.

inline constexpr char kCheckpointMagic[5] = {'M', 'V', 'I', 'S', '1'};

namespace detail {

template <typename T>
const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else return "f64";
}

template <typename T>
void write_tensor(std::ofstream& out, const Tensor<T>& t) {
    out.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(T)));
}

template <typename T>
void read_tensor(std::ifstream& in, Tensor<T>& t, uint64_t offset, uint64_t data_start) {
    in.seekg(std::streamoff(data_start + offset));
    in.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.size() * sizeof(T)));
    if (!in) throw IoError("checkpoint: truncated tensor data");
}

}  // namespace detail

template <typename T>
void save_checkpoint(const Model<T>& m, const std::string& path) {
    nlohmann::json manifest;
    manifest["schema"] = "mvis1";
    manifest["model"] = m.cfg;
    manifest["adapter"] = m.adapter;
    manifest["seed"] = m.seed;

    uint64_t offset = 0;
    nlohmann::json tensors = nlohmann::json::array();
    for (size_t i = 0; i < m.params.count(); ++i) {
        const auto& p = m.params.at(i);
        nlohmann::json e;
        e["name"] = m.params.name(i);
        e["shape"] = p.value.shape();
        e["dtype"] = detail::dtype_name<T>();
        e["offset"] = offset;
        e["trainable"] = p.trainable;
        tensors.push_back(e);
        offset += p.value.size() * sizeof(T);
    }
    nlohmann::json vis = nlohmann::json::array();
    for (const auto* t : {&m.vision.proj, &m.vision.bias}) {
        nlohmann::json e;
        e["shape"] = t->shape();
        e["dtype"] = "f32";
        e["offset"] = offset;
        vis.push_back(e);
        offset += t->size() * sizeof(float);
    }
    manifest["tensors"] = tensors;
    manifest["vision"] = vis;

    const std::string mjson = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot open " + path);
    out.write(kCheckpointMagic, 5);
    const uint64_t mlen = mjson.size();
    out.write(reinterpret_cast<const char*>(&mlen), 8);
    out.write(mjson.data(), std::streamsize(mjson.size()));
    for (size_t i = 0; i < m.params.count(); ++i) detail::write_tensor(out, m.params.at(i).value);
    detail::write_tensor(out, m.vision.proj);
    detail::write_tensor(out, m.vision.bias);
    if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

template <typename T>
std::unique_ptr<Model<T>> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path);
    char magic[5];
    in.read(magic, 5);
    if (!in || std::memcmp(magic, kCheckpointMagic, 5) != 0)
        throw IoError("load_checkpoint: " + path + " is not a MVIS1 checkpoint");
    uint64_t mlen = 0;
    in.read(reinterpret_cast<char*>(&mlen), 8);
    std::string mjson(mlen, '\0');
    in.read(mjson.data(), std::streamsize(mlen));
    if (!in) throw IoError("load_checkpoint: truncated manifest");
    const uint64_t data_start = 5 + 8 + mlen;

    nlohmann::json manifest = nlohmann::json::parse(mjson);
    ModelConfig cfg = manifest.at("model").get<ModelConfig>();
    AdapterConfig adapter = manifest.at("adapter").get<AdapterConfig>();
    const uint64_t seed = manifest.value("seed", 0ull);

    auto model = std::make_unique<Model<T>>(cfg, adapter, seed);
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != model->params.count())
        throw IoError("load_checkpoint: manifest lists " + std::to_string(tensors.size()) +
                      " tensors, config implies " + std::to_string(model->params.count()));
    for (const auto& e : tensors) {
        const std::string name = e.at("name");
        const Shape shape = e.at("shape").get<Shape>();
        if (std::string(e.at("dtype")) != detail::dtype_name<T>())
            throw IoError("load_checkpoint: dtype mismatch for " + name);
        auto& p = model->params[name];
        if (p.value.shape() != shape)
            throw IoError("load_checkpoint: tensor " + name + " has shape " + shape_str(shape) +
                          ", config implies " + shape_str(p.value.shape()));
        detail::read_tensor(in, p.value, e.at("offset").get<uint64_t>(), data_start);
    }
    const auto& vis = manifest.at("vision");
    detail::read_tensor(in, model->vision.proj, vis.at(0).at("offset").get<uint64_t>(), data_start);
    detail::read_tensor(in, model->vision.bias, vis.at(1).at("offset").get<uint64_t>(), data_start);
    return model;
}

}  // namespace vsm
