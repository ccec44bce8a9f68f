#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "cellattn/tensor.hpp"

namespace cellattn {

// Named model state: trainable parameters plus non-trainable buffers
// (batchnorm running statistics). Insertion order is kept so training and
// serialization are deterministic.
class ParamStore {
public:
    Tensor add_param(const std::string& name, Tensor t);
    Tensor add_buffer(const std::string& name, Tensor t);

    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) > 0; }

    std::vector<Tensor> trainable() const;
    const std::vector<std::string>& names() const { return order_; }
    bool is_param(const std::string& name) const;

    int64_t trainable_count() const;  // total scalar parameter count

    // Checkpoint: "CKPT" magic, u64 JSON index length, index JSON
    // ({name: {offset, param}} with offsets relative to the blob section),
    // then the concatenated TNSR records.
    void save(const std::string& path) const;
    static ParamStore load(const std::string& path);

private:
    struct Slot {
        Tensor tensor;
        bool param = false;
    };
    std::vector<std::string> order_;
    std::unordered_map<std::string, Slot> index_;
};

}  // namespace cellattn
