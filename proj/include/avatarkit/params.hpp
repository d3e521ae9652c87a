#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "avatarkit/hash.hpp"
#include "avatarkit/tensor.hpp"

namespace avk {

// Ordered collection of named tensors. Order is insertion order and is part
// of the serialized layout, so construction must be deterministic.
template <typename T>
class ParamDict {
public:
    Tensor<T>& create(const std::string& name, Shape shape) {
        if (map_.count(name)) throw ValueError("duplicate parameter " + name);
        order_.push_back(name);
        return map_.emplace(name, Tensor<T>(std::move(shape))).first->second;
    }

    void put(const std::string& name, Tensor<T> t) {
        if (!map_.count(name)) order_.push_back(name);
        map_[name] = std::move(t);
    }

    Tensor<T>& at(const std::string& name) {
        auto it = map_.find(name);
        if (it == map_.end()) throw ValueError("unknown parameter " + name);
        return it->second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = map_.find(name);
        if (it == map_.end()) throw ValueError("unknown parameter " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return map_.count(name) != 0; }
    const std::vector<std::string>& names() const { return order_; }
    size_t size() const { return order_.size(); }

    int64_t total_elements() const {
        int64_t n = 0;
        for (const auto& name : order_) n += map_.at(name).numel();
        return n;
    }

    template <typename To>
    ParamDict<To> cast_to() const {
        ParamDict<To> out;
        for (const auto& name : order_) out.put(name, cast<To>(map_.at(name)));
        return out;
    }

    // order-sensitive fingerprint of all values; used by frozen-weight checks
    uint64_t fingerprint() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& name : order_) {
            h = fnv1a_bytes(name.data(), name.size(), h);
            const auto& t = map_.at(name);
            h = fnv1a_bytes(t.data(), sizeof(T) * static_cast<size_t>(t.numel()), h);
        }
        return h;
    }

    // fingerprint restricted to names with the given prefix
    uint64_t fingerprint_prefix(const std::string& prefix) const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& name : order_) {
            if (name.rfind(prefix, 0) != 0) continue;
            h = fnv1a_bytes(name.data(), name.size(), h);
            const auto& t = map_.at(name);
            h = fnv1a_bytes(t.data(), sizeof(T) * static_cast<size_t>(t.numel()), h);
        }
        return h;
    }

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor<T>> map_;
};

}  // namespace avk
