#pragma once

// The replacement-learning core: frozen-set scheduling, two-scalar parameter
// composition, and the extra backward routing that turns the gradient of a
// frozen layer's composed parameters into
//   - gradients for the coupling scalars (g_a, g_b), and
//   - accumulated parameter gradients for the two neighbouring layers.
//
// The chain rule through theta_i = a*theta_{i-1} + b*theta_{i+1} gives the
// neighbour contributions a single factor of a (resp. b); the scalar
// gradients are full contractions of the composed-parameter gradient with
// the neighbour's parameter block. Both facts are pinned down by the
// finite-difference suite.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "replearn/layers.hpp"
#include "replearn/tensor.hpp"

namespace replearn {

// Multiples of k in [1, L], excluding the final layer. Throws for k < 2:
// adjacent frozen layers would make the composition self-referential.
std::vector<std::size_t> frozen_set(std::size_t layer_count, std::size_t interval);

template <typename T>
struct CouplingT {
    T a;
    T b;
};

template <typename T>
struct FreezePlanT {
    std::size_t layer_count = 0;
    std::size_t interval = 0; // 0 means no freezing (end-to-end)
    std::vector<std::size_t> frozen; // ascending, 1-based layer indices
    std::map<std::size_t, CouplingT<T>> couplings;
    std::vector<std::string> warnings; // candidates dropped at construction

    bool is_frozen(std::size_t layer) const {
        for (auto i : frozen)
            if (i == layer) return true;
        return false;
    }
};

// Elementwise a*prev + b*next over a pair of parameter sequences.
template <typename T>
std::vector<TensorT<T>> compose_params(T a, T b, const std::vector<TensorT<T>>& prev,
                                       const std::vector<TensorT<T>>& next) {
    if (prev.size() != next.size())
        throw ShapeError("compose: neighbour parameter lists differ in length (" +
                         std::to_string(prev.size()) + " vs " + std::to_string(next.size()) +
                         ")");
    std::vector<TensorT<T>> out;
    out.reserve(prev.size());
    for (std::size_t i = 0; i < prev.size(); ++i)
        out.push_back(axpy(a, prev[i], scale(b, next[i])));
    return out;
}

// Per-step gradient record. Layer keys are 1-based. Frozen layers never get
// an entry for their composed (freezable) parameters; any non-freezable
// parameters they own are recorded like everyone else's.
template <typename T>
struct GradTapeT {
    std::vector<TensorT<T>> activation_grads; // activation_grads[i] = dL/dh_i, index 0 unused
    std::map<std::size_t, std::vector<TensorT<T>>> param_grads; // slot-aligned, empty = no grad
    std::map<std::size_t, CouplingT<T>> scalar_grads; // per frozen layer: (g_a, g_b)
    std::uint64_t grad_writes = 0; // gradient elements recorded for trainable quantities
    std::uint64_t network_stamp = 0;
};

// Forward-pass record handed to backward_pass; consumed once.
template <typename T>
struct StepTraceT {
    std::vector<LayerIOT<T>> ios; // ios[i-1] belongs to layer i
    std::map<std::size_t, std::vector<TensorT<T>>> composed; // materialised frozen params
    bool consumed = false;
};

template <typename T>
class NetworkT {
public:
    using LayerPtr = std::shared_ptr<const LayerT<T>>;

    NetworkT() = default;

    explicit NetworkT(std::vector<LayerPtr> layers) : layers_(std::move(layers)) {
        params_.resize(layers_.size());
        for (std::size_t i = 0; i < layers_.size(); ++i)
            params_[i].resize(layers_[i]->param_specs().size());
        plan_.layer_count = layers_.size();
    }

    std::size_t depth() const { return layers_.size(); }
    const LayerT<T>& layer(std::size_t i) const { return *layers_.at(i - 1); }
    const FreezePlanT<T>& plan() const { return plan_; }
    FreezePlanT<T>& plan() { return plan_; }

    const std::vector<TensorT<T>>& params(std::size_t i) const { return params_.at(i - 1); }
    std::vector<TensorT<T>>& params(std::size_t i) { return params_.at(i - 1); }

    CouplingT<T>& coupling(std::size_t i) { return plan_.couplings.at(i); }
    const CouplingT<T>& coupling(std::size_t i) const { return plan_.couplings.at(i); }

    void init_params(std::uint64_t seed) {
        Rng rng(seed);
        for (std::size_t i = 0; i < layers_.size(); ++i)
            layers_[i]->init_params(params_[i], rng);
    }

    // Installs the freeze plan: selects multiples of `interval`, prunes
    // candidates whose neighbourhood cannot support composition, drops the
    // frozen layers' freezable parameter storage, and initialises one
    // (a, b) pair per remaining frozen layer.
    void apply_freeze_plan(std::size_t interval, T a_init, T b_init) {
        FreezePlanT<T> plan;
        plan.layer_count = layers_.size();
        plan.interval = interval;
        for (std::size_t i : frozen_set(layers_.size(), interval)) {
            std::string why;
            if (!composable(i, why)) {
                plan.warnings.push_back("layer " + std::to_string(i) + " (" +
                                        layers_[i - 1]->kind() + ") left unfrozen: " + why);
                continue;
            }
            plan.frozen.push_back(i);
            plan.couplings[i] = CouplingT<T>{a_init, b_init};
        }
        plan_ = std::move(plan);
        for (std::size_t i : plan_.frozen)
            for (std::size_t s : layers_[i - 1]->freezable_slots())
                params_[i - 1][s] = TensorT<T>(); // composed per forward pass
    }

    void clear_freeze_plan() {
        // Restores nothing: call before init_params or on a freshly built net.
        plan_ = FreezePlanT<T>{};
        plan_.layer_count = layers_.size();
    }

    // Parameters layer i runs with this step: owned tensors, with freezable
    // slots of frozen layers filled from the composition.
    std::vector<TensorT<T>> effective_params(std::size_t i) const {
        if (!plan_.is_frozen(i)) return params_[i - 1];
        const auto& c = plan_.couplings.at(i);
        auto slots = layers_[i - 1]->freezable_slots();
        std::vector<TensorT<T>> prev = freezable_params(i - 1);
        std::vector<TensorT<T>> next = freezable_params(i + 1);
        std::vector<TensorT<T>> composed;
        try {
            composed = compose_params(c.a, c.b, prev, next);
        } catch (const ShapeError& e) {
            throw ShapeError("layer " + std::to_string(i) + ": " + e.what());
        }
        std::vector<TensorT<T>> full = params_[i - 1];
        for (std::size_t s = 0; s < slots.size(); ++s) full[slots[s]] = std::move(composed[s]);
        return full;
    }

    StepTraceT<T> forward_pass(const TensorT<T>& batch) const {
        StepTraceT<T> trace;
        trace.ios.reserve(layers_.size());
        TensorT<T> h = batch;
        for (std::size_t i = 1; i <= layers_.size(); ++i) {
            std::vector<TensorT<T>> p = effective_params(i);
            if (plan_.is_frozen(i)) {
                std::vector<TensorT<T>> composed;
                for (std::size_t s : layers_[i - 1]->freezable_slots()) composed.push_back(p[s]);
                trace.composed[i] = std::move(composed);
            }
            LayerIOT<T> io;
            try {
                io = layers_[i - 1]->forward(h, p);
            } catch (const ShapeError& e) {
                throw ShapeError("layer " + std::to_string(i) + ": " + e.what());
            }
            h = io.output;
            trace.ios.push_back(std::move(io));
        }
        return trace;
    }

    const TensorT<T>& output_of(const StepTraceT<T>& trace) const {
        return trace.ios.back().output;
    }

    // Reverse sweep. For layer i with incoming activation gradient delta_i:
    //   - non-frozen: record dL/dtheta_i from the layer's backward rule;
    //   - frozen: take ghat = gradient w.r.t. the composed parameters, then
    //       g_a[i]  = sum_slots dot(ghat, theta_{i-1})
    //       g_b[i]  = sum_slots dot(ghat, theta_{i+1})
    //       dL/dtheta_{i-1} += a_i * ghat,  dL/dtheta_{i+1} += b_i * ghat
    //     while the activation gradient flows through the composed layer by
    //     the ordinary backward rule.
    GradTapeT<T> backward_pass(StepTraceT<T>& trace, const TensorT<T>& loss_grad) const {
        if (trace.consumed)
            throw std::runtime_error("backward_pass: step trace already consumed");
        if (trace.ios.size() != layers_.size())
            throw std::runtime_error("backward_pass: trace does not match this network");
        trace.consumed = true;

        GradTapeT<T> tape;
        tape.network_stamp = stamp();
        tape.activation_grads.assign(layers_.size() + 1, TensorT<T>());

        TensorT<T> delta = loss_grad;
        for (std::size_t i = layers_.size(); i >= 1; --i) {
            tape.activation_grads[i] = delta;
            const LayerT<T>& layer = *layers_[i - 1];
            auto specs = layer.param_specs();
            std::vector<TensorT<T>> p =
                plan_.is_frozen(i) ? composed_full_params(i, trace) : params_[i - 1];
            LayerGradsT<T> grads;
            try {
                grads = layer.backward(trace.ios[i - 1], p, delta);
            } catch (const ShapeError& e) {
                throw ShapeError("layer " + std::to_string(i) + ": " + e.what());
            }

            if (!specs.empty()) {
                if (plan_.is_frozen(i)) {
                    route_frozen_grads(i, grads, tape);
                } else {
                    record_param_grads(i, grads.param_grads, tape);
                }
            }
            delta = std::move(grads.input_grad);
            if (i == 1) break;
        }
        tape.activation_grads[0] = std::move(delta);
        return tape;
    }

    // Cheap identity check so a tape cannot be applied to a different net.
    std::uint64_t stamp() const {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](std::uint64_t v) {
            h ^= v;
            h *= 1099511628211ull;
        };
        mix(layers_.size());
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            mix(i);
            for (const auto& t : params_[i]) mix(t.size());
        }
        for (auto f : plan_.frozen) mix(f);
        return h;
    }

    // Every trainable quantity: owned parameter elements plus one (a, b)
    // pair per frozen layer. This is the live count the closed-form
    // parameter arithmetic is checked against.
    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& lp : params_)
            for (const auto& t : lp) n += t.size();
        n += 2 * plan_.frozen.size();
        return n;
    }

private:
    bool composable(std::size_t i, std::string& why) const {
        const auto mine = layers_[i - 1]->freezable_shapes();
        if (mine.empty()) {
            why = "no freezable parameters";
            return false;
        }
        if (i < 2 || i + 1 > layers_.size()) {
            why = "no neighbour on both sides";
            return false;
        }
        for (std::size_t n : {i - 1, i + 1}) {
            const auto theirs = layers_[n - 1]->freezable_shapes();
            if (theirs != mine) {
                why = "freezable parameter shapes differ from layer " + std::to_string(n);
                return false;
            }
        }
        return true;
    }

    std::vector<TensorT<T>> freezable_params(std::size_t i) const {
        std::vector<TensorT<T>> out;
        for (std::size_t s : layers_[i - 1]->freezable_slots()) out.push_back(params_[i - 1][s]);
        return out;
    }

    std::vector<TensorT<T>> composed_full_params(std::size_t i, const StepTraceT<T>& trace) const {
        auto it = trace.composed.find(i);
        if (it == trace.composed.end())
            throw std::runtime_error("backward_pass: no composed parameters cached for layer " +
                                     std::to_string(i));
        std::vector<TensorT<T>> full = params_[i - 1];
        auto slots = layers_[i - 1]->freezable_slots();
        for (std::size_t s = 0; s < slots.size(); ++s) full[slots[s]] = it->second[s];
        return full;
    }

    void record_param_grads(std::size_t i, std::vector<TensorT<T>>& grads,
                            GradTapeT<T>& tape) const {
        auto& dst = tape.param_grads[i];
        if (dst.empty()) {
            dst = std::move(grads);
            for (const auto& t : dst) tape.grad_writes += t.size();
        } else {
            for (std::size_t s = 0; s < dst.size(); ++s) {
                if (grads[s].empty()) continue;
                if (dst[s].empty()) {
                    tape.grad_writes += grads[s].size();
                    dst[s] = std::move(grads[s]);
                } else {
                    dst[s] = add(dst[s], grads[s]);
                }
            }
        }
    }

    void route_frozen_grads(std::size_t i, LayerGradsT<T>& grads, GradTapeT<T>& tape) const {
        const auto& c = plan_.couplings.at(i);
        auto slots = layers_[i - 1]->freezable_slots();
        auto prev_slots = layers_[i - 2]->freezable_slots();
        auto next_slots = layers_[i]->freezable_slots();

        T g_a = T(0), g_b = T(0);
        for (std::size_t s = 0; s < slots.size(); ++s) {
            const TensorT<T>& ghat = grads.param_grads[slots[s]];
            g_a += dot(ghat, params_[i - 2][prev_slots[s]]);
            g_b += dot(ghat, params_[i][next_slots[s]]);
            accumulate_neighbor(i - 1, prev_slots[s], scale(c.a, ghat), tape);
            accumulate_neighbor(i + 1, next_slots[s], scale(c.b, ghat), tape);
        }
        tape.scalar_grads[i] = CouplingT<T>{g_a, g_b};
        tape.grad_writes += 2;

        // Non-freezable parameters of a frozen layer stay trainable.
        auto specs = layers_[i - 1]->param_specs();
        bool any_owned = false;
        for (std::size_t s = 0; s < specs.size(); ++s)
            if (!specs[s].freezable) any_owned = true;
        if (any_owned) {
            std::vector<TensorT<T>> owned(specs.size());
            for (std::size_t s = 0; s < specs.size(); ++s)
                if (!specs[s].freezable) owned[s] = std::move(grads.param_grads[s]);
            record_param_grads(i, owned, tape);
        }
    }

    void accumulate_neighbor(std::size_t layer, std::size_t slot, TensorT<T> contribution,
                             GradTapeT<T>& tape) const {
        auto& dst = tape.param_grads[layer];
        if (dst.empty()) dst.resize(layers_[layer - 1]->param_specs().size());
        if (dst[slot].empty()) {
            // The neighbour's own backward gradient may not have been
            // recorded yet (predecessors are visited later in the sweep);
            // the accumulation is order-free because everything adds.
            tape.grad_writes += contribution.size();
            dst[slot] = std::move(contribution);
        } else {
            dst[slot] = add(dst[slot], contribution);
        }
    }

    std::vector<LayerPtr> layers_;
    std::vector<std::vector<TensorT<T>>> params_;
    FreezePlanT<T> plan_;
};

using Network = NetworkT<double>;
using NetworkF = NetworkT<float>;

} // namespace replearn
