#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "tcae/tensor.hpp"

namespace tcae {

// A named trainable tensor with its gradient and optimizer state. Gradients
// accumulate in the underlying leaf node across backward() calls until
// zero_grad().
template <class T>
struct ParamT {
    std::string name;
    TensorT<T> tensor;
    std::vector<T> m, v;  // Adam moments, allocated on first step

    ParamT(std::string n, TensorT<T> t) : name(std::move(n)), tensor(std::move(t)) {}

    std::int64_t size() const { return tensor.size(); }
    std::vector<T>& values() { return tensor.mutable_values(); }
    const std::vector<T>& values() const { return tensor.values(); }
    const std::vector<T>& grad() const { return tensor.grad(); }
    void zero_grad() { tensor.zero_grad(); }
};

template <class T>
using ParamPtr = std::shared_ptr<ParamT<T>>;

// Owns the parameters of one model; names must be unique (the checkpoint
// format and EMA pairing key on them).
template <class T>
class ParamRegistry {
public:
    explicit ParamRegistry(bool trainable = true) : trainable_(trainable) {}

    ParamPtr<T> add(const std::string& name, TensorT<T> init) {
        TCAE_CHECK(!by_name_.count(name), "duplicate parameter name '", name, "'");
        auto t = TensorT<T>::leaf(init.shape(), init.values(), trainable_);
        auto p = std::make_shared<ParamT<T>>(name, std::move(t));
        by_name_[name] = p;
        params_.push_back(p);
        return p;
    }

    const std::vector<ParamPtr<T>>& all() const { return params_; }

    ParamPtr<T> find(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : it->second;
    }

    bool trainable() const { return trainable_; }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

    std::int64_t total_size() const {
        std::int64_t n = 0;
        for (auto& p : params_) n += p->size();
        return n;
    }

    // Order-independent content hash (sorted by name) of the f32 payloads.
    std::uint64_t content_hash() const {
        std::vector<const ParamT<T>*> sorted;
        for (auto& p : params_) sorted.push_back(p.get());
        std::sort(sorted.begin(), sorted.end(),
                  [](const ParamT<T>* a, const ParamT<T>* b) { return a->name < b->name; });
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (auto* p : sorted) {
            h = fnv1a64(p->name.data(), p->name.size(), h);
            for (T x : p->values()) {
                float f = float(x);
                h = fnv1a64(&f, sizeof(f), h);
            }
        }
        return h;
    }

private:
    bool trainable_;
    std::vector<ParamPtr<T>> params_;
    std::unordered_map<std::string, ParamPtr<T>> by_name_;
};

// Common initializers.
template <class T>
TensorT<T> trunc_normal_init(Shape shape, RngStream rng, double stddev = 0.02) {
    std::vector<T> d(std::size_t(numel(shape)));
    for (auto& x : d) {
        double v;
        do {
            v = rng.normal() * stddev;
        } while (std::abs(v) > 2.0 * stddev);
        x = T(v);
    }
    return TensorT<T>::leaf(std::move(shape), std::move(d));
}

template <class T>
TensorT<T> zeros_init(Shape shape) {
    return TensorT<T>::zeros(std::move(shape));
}

}  // namespace tcae
