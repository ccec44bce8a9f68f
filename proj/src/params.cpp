#include "cellattn/params.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace cellattn {

Tensor ParamStore::add_param(const std::string& name, Tensor t) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    order_.push_back(name);
    index_[name] = {t, true};
    return t;
}

Tensor ParamStore::add_buffer(const std::string& name, Tensor t) {
    if (index_.count(name)) throw ConfigError("duplicate buffer name: " + name);
    order_.push_back(name);
    index_[name] = {t, false};
    return t;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second.tensor;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second.tensor;
}

bool ParamStore::is_param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second.param;
}

std::vector<Tensor> ParamStore::trainable() const {
    std::vector<Tensor> out;
    for (const auto& name : order_) {
        const Slot& s = index_.at(name);
        if (s.param) out.push_back(s.tensor);
    }
    return out;
}

int64_t ParamStore::trainable_count() const {
    int64_t n = 0;
    for (const auto& name : order_) {
        const Slot& s = index_.at(name);
        if (s.param) n += s.tensor.numel();
    }
    return n;
}

void ParamStore::save(const std::string& path) const {
    std::ostringstream blobs(std::ios::binary);
    nlohmann::json index;
    for (const auto& name : order_) {
        const Slot& s = index_.at(name);
        index[name] = {{"offset", static_cast<uint64_t>(blobs.tellp())}, {"param", s.param}};
        write_tnsr(blobs, s.tensor);
    }
    const std::string index_str = index.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open checkpoint for write: " + path);
    os.write("CKPT", 4);
    const uint64_t len = index_str.size();
    unsigned char lb[8];
    for (int i = 0; i < 8; ++i) lb[i] = static_cast<unsigned char>(len >> (8 * i));
    os.write(reinterpret_cast<const char*>(lb), 8);
    os.write(index_str.data(), static_cast<std::streamsize>(index_str.size()));
    const std::string blob_str = blobs.str();
    os.write(blob_str.data(), static_cast<std::streamsize>(blob_str.size()));
    if (!os) throw IoError("checkpoint write failed: " + path);
}

ParamStore ParamStore::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "CKPT") throw IoError("not a checkpoint file: " + path);
    unsigned char lb[8];
    is.read(reinterpret_cast<char*>(lb), 8);
    uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<uint64_t>(lb[i]) << (8 * i);
    std::string index_str(len, '\0');
    is.read(index_str.data(), static_cast<std::streamsize>(len));
    if (!is) throw IoError("truncated checkpoint index: " + path);
    nlohmann::json index;
    try {
        index = nlohmann::json::parse(index_str);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad checkpoint index in " + path + ": " + e.what());
    }
    const std::streampos blob_base = is.tellg();

    // offsets define the order; entries sorted by offset reproduce the
    // original insertion order
    std::vector<std::pair<uint64_t, std::string>> by_offset;
    for (auto it = index.begin(); it != index.end(); ++it)
        by_offset.emplace_back(it.value().at("offset").get<uint64_t>(), it.key());
    std::sort(by_offset.begin(), by_offset.end());

    ParamStore ps;
    for (const auto& [offset, name] : by_offset) {
        is.seekg(blob_base + static_cast<std::streamoff>(offset));
        Tensor t = read_tnsr(is);
        if (index.at(name).at("param").get<bool>()) {
            t.impl()->requires_grad = true;
            ps.add_param(name, t);
        } else {
            ps.add_buffer(name, t);
        }
    }
    return ps;
}

}  // namespace cellattn
