#pragma once

// Finite-difference oracle. It touches the network only through
// forward_pass and the loss, so any disagreement with the tape isolates a
// bug in a backward rule or in the frozen-gradient routing, never in the
// oracle itself. Perturbed values are saved and restored exactly, leaving
// the network byte-identical afterwards.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "replearn/replacement.hpp"

namespace replearn {

struct Quantity {
    enum class Kind { tensor_element, coupling_a, coupling_b };
    Kind kind = Kind::tensor_element;
    std::size_t layer = 0; // 1-based
    std::size_t slot = 0;
    std::size_t element = 0;

    std::string id(const std::string& param_name = "") const {
        std::string s = "L" + std::to_string(layer) + ".";
        switch (kind) {
            case Kind::coupling_a: return s + "a";
            case Kind::coupling_b: return s + "b";
            default: break;
        }
        s += param_name.empty() ? "p" + std::to_string(slot) : param_name;
        return s + "[" + std::to_string(element) + "]";
    }
};

struct CheckRecord {
    std::string quantity;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct CheckReport {
    std::vector<CheckRecord> records; // sorted by descending relative error
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    std::size_t checked = 0;
    bool pass = false;
};

inline double relative_error(double analytic, double numeric) {
    double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

// Every trainable quantity of the network: elements of owned parameter
// tensors plus the coupling scalars of each frozen layer.
template <typename T>
std::vector<Quantity> trainable_quantities(const NetworkT<T>& net) {
    std::vector<Quantity> out;
    for (std::size_t i = 1; i <= net.depth(); ++i) {
        const auto& params = net.params(i);
        for (std::size_t s = 0; s < params.size(); ++s) {
            if (params[s].empty()) continue; // frozen freezable slot
            for (std::size_t e = 0; e < params[s].size(); ++e)
                out.push_back({Quantity::Kind::tensor_element, i, s, e});
        }
    }
    for (std::size_t i : net.plan().frozen) {
        out.push_back({Quantity::Kind::coupling_a, i, 0, 0});
        out.push_back({Quantity::Kind::coupling_b, i, 0, 0});
    }
    return out;
}

template <typename T>
T loss_of(const NetworkT<T>& net, const TensorT<T>& batch, const std::vector<int>& labels) {
    auto trace = net.forward_pass(batch);
    return loss_softmax_xent(net.output_of(trace), labels).first;
}

// Central difference (L(q+eps) - L(q-eps)) / (2 eps) with full forward
// passes; the perturbed value is restored exactly.
template <typename T>
double finite_diff_loss(NetworkT<T>& net, const TensorT<T>& batch,
                        const std::vector<int>& labels, const Quantity& q, double eps) {
    if (eps <= 0.0) throw std::invalid_argument("finite_diff_loss: eps must be positive");
    T* value = nullptr;
    if (q.kind == Quantity::Kind::coupling_a) {
        value = &net.coupling(q.layer).a;
    } else if (q.kind == Quantity::Kind::coupling_b) {
        value = &net.coupling(q.layer).b;
    } else {
        auto& params = net.params(q.layer);
        if (q.slot >= params.size() || params[q.slot].empty())
            throw std::invalid_argument("finite_diff_loss: layer " + std::to_string(q.layer) +
                                        " slot " + std::to_string(q.slot) +
                                        " holds no trainable tensor (frozen by composition)");
        value = &params[q.slot][q.element];
    }
    const T saved = *value;
    *value = saved + T(eps);
    double up = double(loss_of(net, batch, labels));
    *value = saved - T(eps);
    double down = double(loss_of(net, batch, labels));
    *value = saved;
    return (up - down) / (2.0 * eps);
}

template <typename T>
double analytic_gradient(const GradTapeT<T>& tape, const Quantity& q) {
    if (q.kind == Quantity::Kind::coupling_a) return double(tape.scalar_grads.at(q.layer).a);
    if (q.kind == Quantity::Kind::coupling_b) return double(tape.scalar_grads.at(q.layer).b);
    auto it = tape.param_grads.find(q.layer);
    if (it == tape.param_grads.end() || it->second[q.slot].empty()) return 0.0;
    return double(it->second[q.slot][q.element]);
}

struct CheckSettings {
    double eps = 1e-5;
    double tolerance = 1e-4;
    std::size_t exhaustive_limit = 10000; // subsample above this many quantities
    std::size_t sample_size = 512;
    std::uint64_t sample_seed = 17;
    std::size_t report_worst = 12;
};

// Compares every (or a seeded sample of) trainable quantity's analytic
// gradient against the central difference.
template <typename T>
CheckReport check_network(NetworkT<T>& net, const TensorT<T>& batch,
                          const std::vector<int>& labels, const CheckSettings& settings = {}) {
    auto trace = net.forward_pass(batch);
    auto [loss, loss_grad] = loss_softmax_xent(net.output_of(trace), labels);
    (void)loss;
    GradTapeT<T> tape = net.backward_pass(trace, loss_grad);

    std::vector<Quantity> quantities = trainable_quantities(net);
    if (quantities.size() > settings.exhaustive_limit) {
        Rng rng(settings.sample_seed);
        rng.shuffle(quantities);
        std::size_t keep = std::max(settings.sample_size, std::size_t(512));
        quantities.resize(std::min(quantities.size(), keep));
    }

    CheckReport report;
    report.tolerance = settings.tolerance;
    report.checked = quantities.size();
    std::vector<CheckRecord> all;
    all.reserve(quantities.size());
    for (const auto& q : quantities) {
        CheckRecord rec;
        std::string name;
        if (q.kind == Quantity::Kind::tensor_element)
            name = net.layer(q.layer).param_specs()[q.slot].name;
        rec.quantity = q.id(name);
        rec.analytic = analytic_gradient(tape, q);
        rec.numeric = finite_diff_loss(net, batch, labels, q, settings.eps);
        rec.rel_err = relative_error(rec.analytic, rec.numeric);
        report.max_rel_err = std::max(report.max_rel_err, rec.rel_err);
        all.push_back(std::move(rec));
    }
    std::sort(all.begin(), all.end(),
              [](const CheckRecord& x, const CheckRecord& y) { return x.rel_err > y.rel_err; });
    if (all.size() > settings.report_worst) all.resize(settings.report_worst);
    report.records = std::move(all);
    report.pass = report.max_rel_err < settings.tolerance;
    return report;
}

// FNV-1a over all owned parameter bytes and coupling scalars; used to prove
// oracle runs leave the network untouched.
template <typename T>
std::uint64_t param_bytes_hash(const NetworkT<T>& net) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix_bytes = [&h](const void* p, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (std::size_t i = 1; i <= net.depth(); ++i)
        for (const auto& t : net.params(i))
            if (!t.empty()) mix_bytes(t.data(), t.size() * sizeof(T));
    for (std::size_t i : net.plan().frozen) {
        const auto& c = net.coupling(i);
        mix_bytes(&c.a, sizeof(T));
        mix_bytes(&c.b, sizeof(T));
    }
    return h;
}

std::string format_check_report(const CheckReport& report);

} // namespace replearn
