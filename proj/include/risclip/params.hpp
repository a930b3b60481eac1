#pragma once

#include <map>
#include <set>
#include <string>

#include "risclip/autodiff.hpp"
#include "risclip/errors.hpp"
#include "risclip/tensor.hpp"

namespace risclip {

// Flat registry of named float32 parameters. Buffers (batch-norm running
// statistics) ride along but are never handed to the optimizer.
struct ParamStore {
    std::map<std::string, Tensor<float>> tensors;
    std::set<std::string> buffers;

    void add(const std::string& name, Tensor<float> t, bool buffer = false) {
        if (tensors.count(name)) throw std::logic_error("duplicate parameter: " + name);
        tensors.emplace(name, std::move(t));
        if (buffer) buffers.insert(name);
    }
    bool has(const std::string& name) const { return tensors.count(name) != 0; }
    Tensor<float>& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::logic_error("missing parameter: " + name);
        return it->second;
    }
    const Tensor<float>& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::logic_error("missing parameter: " + name);
        return it->second;
    }
};

// One forward pass's view of the store: every parameter as an autodiff leaf,
// with requires_grad set only on the trainable subset.
template <typename T>
struct VarMap {
    std::map<std::string, Var<T>> vars;

    const Var<T>& at(const std::string& name) const {
        auto it = vars.find(name);
        if (it == vars.end()) throw std::logic_error("unbound parameter: " + name);
        return it->second;
    }
};

template <typename T>
VarMap<T> bind_params(const ParamStore& store, const std::set<std::string>& trainable = {}) {
    VarMap<T> out;
    for (const auto& [name, tensor] : store.tensors)
        out.vars.emplace(name, make_leaf<T>(tensor.template cast<T>(), trainable.count(name) != 0));
    return out;
}

}  // namespace risclip
