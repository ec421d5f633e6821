#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "refonce/rng.hpp"
#include "refonce/tensor.hpp"

namespace refonce {

/// Ordered, named collection of trainable leaves.
template <typename T>
class ParamStore {
   public:
    using Entry = std::pair<std::string, TensorT<T>>;

    TensorT<T> add(const std::string& name, TensorT<T> value) {
        if (index_.count(name)) throw Error("duplicate parameter name '" + name + "'");
        value.set_requires_grad(true);
        index_[name] = entries_.size();
        entries_.emplace_back(name, value);
        return value;
    }

    TensorT<T> zeros(const std::string& name, Shape shape) { return add(name, TensorT<T>::zeros(std::move(shape))); }

    TensorT<T> ones(const std::string& name, Shape shape) { return add(name, TensorT<T>::full(std::move(shape), T(1))); }

    /// Zero-mean normal init with standard deviation sqrt(gain / fan_in).
    TensorT<T> normal(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng, double gain = 2.0) {
        const double std = std::sqrt(gain / static_cast<double>(fan_in));
        std::vector<T> data(shape_numel(shape));
        for (auto& v : data) v = static_cast<T>(rng.normal() * std);
        return add(name, TensorT<T>::from(std::move(shape), std::move(data)));
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    TensorT<T> get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
        return entries_[it->second].second;
    }

    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : entries_) n += t.numel();
        return n;
    }

    std::size_t scalar_count_with_prefix(const std::string& prefix) const {
        std::size_t n = 0;
        for (const auto& [name, t] : entries_)
            if (name.rfind(prefix, 0) == 0) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [_, t] : entries_) t.zero_grad();
    }

   private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace refonce
