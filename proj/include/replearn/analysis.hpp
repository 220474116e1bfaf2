#pragma once

// Closed-form parameter and complexity accounting for the replacement
// scheme, plus the two measurement tools used to study trained networks:
// linear-CKA similarity matrices and per-layer linear probes.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "replearn/data.hpp"
#include "replearn/replacement.hpp"

namespace replearn {

// Exact fraction arithmetic for the complexity formulas.
struct Rational {
    long long num = 0;
    long long den = 1;

    Rational() = default;
    Rational(long long n, long long d = 1) : num(n), den(d) { reduce(); }

    void reduce() {
        if (den < 0) {
            num = -num;
            den = -den;
        }
        long long g = std::gcd(num < 0 ? -num : num, den);
        if (g > 1) {
            num /= g;
            den /= g;
        }
    }

    bool is_integer() const { return den == 1; }
    double value() const { return double(num) / double(den); }

    Rational operator+(const Rational& o) const {
        return Rational(num * o.den + o.num * den, den * o.den);
    }
    Rational operator-(const Rational& o) const {
        return Rational(num * o.den - o.num * den, den * o.den);
    }
    Rational operator*(const Rational& o) const { return Rational(num * o.num, den * o.den); }
    bool operator==(const Rational& o) const { return num == o.num && den == o.den; }

    std::string str() const {
        if (is_integer()) return std::to_string(num);
        return std::to_string(num) + "/" + std::to_string(den);
    }
};

struct LayerCount {
    std::size_t index = 0;
    std::string kind;
    std::size_t params = 0;    // all parameters of the layer
    std::size_t freezable = 0; // the subset replaced when frozen
    bool frozen = false;
};

struct ParamReport {
    std::vector<LayerCount> per_layer;
    std::uint64_t total = 0;            // P: end-to-end trainable count
    std::uint64_t trainable = 0;        // P': count under the active freeze plan
    std::uint64_t trainable_plus2_total = 0; // literal "+2 in total" variant
    std::uint64_t reduction = 0;        // P - P'
    std::size_t frozen_count = 0;
    std::size_t p_min = 0; // over layers that have parameters
    std::size_t p_max = 0;
};

// P = sum of all layers' parameter counts; P' subtracts each frozen layer's
// freezable block and adds one (a, b) pair per frozen layer.
template <typename T>
ParamReport param_counts(const NetworkT<T>& net) {
    ParamReport r;
    r.p_min = std::numeric_limits<std::size_t>::max();
    std::uint64_t frozen_freezable = 0;
    for (std::size_t i = 1; i <= net.depth(); ++i) {
        const LayerT<T>& layer = net.layer(i);
        LayerCount lc;
        lc.index = i;
        lc.kind = layer.kind();
        lc.params = layer.param_count();
        lc.freezable = layer.freezable_count();
        lc.frozen = net.plan().is_frozen(i);
        if (lc.frozen) frozen_freezable += lc.freezable;
        r.total += lc.params;
        if (lc.params > 0) {
            r.p_min = std::min(r.p_min, lc.params);
            r.p_max = std::max(r.p_max, lc.params);
        }
        r.per_layer.push_back(std::move(lc));
    }
    if (r.p_min == std::numeric_limits<std::size_t>::max()) r.p_min = 0;
    r.frozen_count = net.plan().frozen.size();
    r.trainable = r.total - frozen_freezable + 2 * r.frozen_count;
    r.trainable_plus2_total =
        r.total - frozen_freezable + (r.frozen_count > 0 ? 2 : 0);
    r.reduction = r.total - r.trainable;
    return r;
}

struct ReductionBounds {
    // Exact form: |F| * P_min - 2|F| .. |F| * P_max - 2|F|
    long long exact_lower = 0;
    long long exact_upper = 0;
    std::size_t frozen_count = 0;
    // The asymptotic form (L/k) * P - 2 with real division.
    double asymptotic_lower = 0.0;
    double asymptotic_upper = 0.0;
};

ReductionBounds reduction_bounds(std::size_t layer_count, std::size_t interval,
                                 std::size_t p_min, std::size_t p_max);

struct ComplexityReport {
    Rational total_units;     // 3L - 2(L-1)/k, in forward-pass units
    Rational reduction_units; // 2(L-1)/k
    Rational bound_k1;        // reduction at k = 1: 2L - 2
    Rational bound_k_l1;      // reduction at k = L-1: 2
};

// k = 1 is allowed here: these are the analytical bounds, not a runnable
// freeze plan.
ComplexityReport complexity_estimate(std::size_t layer_count, std::size_t interval);

// Linear CKA between two activation matrices [n x p], [n x q] (rows are
// samples). Returns NaN when either matrix has zero variance.
template <typename T>
double linear_cka(const TensorT<T>& x, const TensorT<T>& y) {
    if (x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0))
        throw ShapeError("cka: need [n x p] and [n x q] with matching n, got " +
                         shape_str(x.shape()) + " and " + shape_str(y.shape()));
    const std::size_t n = x.dim(0);

    auto centered = [n](const TensorT<T>& m) {
        TensorT<T> out = m;
        const std::size_t cols = m.dim(1);
        for (std::size_t c = 0; c < cols; ++c) {
            double mean = 0.0;
            for (std::size_t r = 0; r < n; ++r) mean += double(m.at(r, c));
            mean /= double(n);
            for (std::size_t r = 0; r < n; ++r) out.at(r, c) = T(double(m.at(r, c)) - mean);
        }
        return out;
    };

    TensorT<T> xc = centered(x);
    TensorT<T> yc = centered(y);
    TensorT<T> xty = matmul(transpose(xc), yc); // [p x q]
    TensorT<T> xtx = matmul(transpose(xc), xc);
    TensorT<T> yty = matmul(transpose(yc), yc);

    auto fro2 = [](const TensorT<T>& m) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m.size(); ++i) acc += double(m[i]) * double(m[i]);
        return acc;
    };
    double cross = fro2(xty);
    double nx = std::sqrt(fro2(xtx));
    double ny = std::sqrt(fro2(yty));
    if (nx == 0.0 || ny == 0.0) return std::numeric_limits<double>::quiet_NaN();
    double v = cross / (nx * ny);
    if (v < 0.0 && v > -1e-12) v = 0.0;
    if (v > 1.0 && v < 1.0 + 1e-12) v = 1.0;
    return v;
}

struct SimilarityMatrix {
    std::size_t layers = 0;
    std::vector<double> values; // row-major, NaN where undefined

    double at(std::size_t i, std::size_t j) const { return values[i * layers + j]; }
};

// Linear CKA between every pair of layer activations (flattened per sample)
// on one probe batch pushed through the network as configured.
template <typename T>
SimilarityMatrix cka_matrix(const NetworkT<T>& net, const TensorT<T>& probe_batch) {
    if (probe_batch.dim(0) < 8)
        throw std::invalid_argument("cka_matrix: probe batch must have at least 8 samples");
    auto trace = net.forward_pass(probe_batch);
    std::vector<TensorT<T>> acts;
    const std::size_t n = probe_batch.dim(0);
    for (std::size_t i = 0; i < net.depth(); ++i) {
        const TensorT<T>& h = trace.ios[i].output;
        acts.push_back(h.reshaped(Shape{n, h.size() / n}));
        if (!acts.back().all_finite())
            throw std::runtime_error("cka_matrix: non-finite activations at layer " +
                                     std::to_string(i + 1));
    }
    SimilarityMatrix m;
    m.layers = acts.size();
    m.values.assign(m.layers * m.layers, 0.0);
    for (std::size_t i = 0; i < m.layers; ++i)
        for (std::size_t j = i; j < m.layers; ++j) {
            double v = linear_cka(acts[i], acts[j]);
            m.values[i * m.layers + j] = v;
            m.values[j * m.layers + i] = v;
        }
    return m;
}

struct ProbeConfig {
    int epochs = 40;
    std::size_t batch_size = 32;
    double lr = 0.1;
    std::uint64_t seed = 1;
};

// Trains a softmax linear classifier on the frozen activations at the given
// layer (1-based; 0 probes the raw input) and returns its test accuracy.
template <typename T>
double linear_probe(const NetworkT<T>& net, const DatasetT<T>& train_data,
                    const DatasetT<T>& test_data, std::size_t layer_index,
                    const ProbeConfig& cfg = {}) {
    if (layer_index > net.depth())
        throw std::invalid_argument("linear_probe: layer index out of range");

    auto activations_at = [&](const DatasetT<T>& ds) {
        std::vector<std::size_t> idx(ds.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        auto [inputs, labels] = ds.batch(idx);
        TensorT<T> h = inputs;
        if (layer_index > 0) {
            auto trace = net.forward_pass(inputs);
            h = trace.ios[layer_index - 1].output;
        }
        return std::pair<TensorT<T>, std::vector<int>>(
            h.reshaped(Shape{ds.size(), h.size() / ds.size()}), labels);
    };

    auto [train_x, train_y] = activations_at(train_data);
    auto [test_x, test_y] = activations_at(test_data);
    const std::size_t features = train_x.dim(1);
    const std::size_t classes = std::size_t(train_data.class_count);

    TensorT<T> w(Shape{classes, features});
    TensorT<T> b(Shape{classes});
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(train_data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t stop = std::min(start + cfg.batch_size, order.size());
            std::size_t rows = stop - start;
            TensorT<T> x(Shape{rows, features});
            std::vector<int> y(rows);
            for (std::size_t r = 0; r < rows; ++r) {
                std::size_t src = order[start + r];
                for (std::size_t c = 0; c < features; ++c) x.at(r, c) = train_x.at(src, c);
                y[r] = train_y[src];
            }
            TensorT<T> logits = matmul(x, transpose(w));
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < classes; ++c) logits.at(r, c) += b[c];
            auto [loss, dlogits] = loss_softmax_xent(logits, y);
            (void)loss;
            TensorT<T> dw = matmul(transpose(dlogits), x);
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= T(cfg.lr) * dw[i];
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < classes; ++c)
                    b[c] -= T(cfg.lr) * dlogits.at(r, c);
        }
    }

    std::size_t correct = 0;
    for (std::size_t r = 0; r < test_x.dim(0); ++r) {
        std::size_t arg = 0;
        T best = T(0);
        for (std::size_t c = 0; c < classes; ++c) {
            T v = b[c];
            for (std::size_t f = 0; f < features; ++f) v += w.at(c, f) * test_x.at(r, f);
            if (c == 0 || v > best) {
                best = v;
                arg = c;
            }
        }
        if (int(arg) == test_y[r]) ++correct;
    }
    return double(correct) / double(test_x.dim(0));
}

std::string format_param_report(const ParamReport& report, const ReductionBounds& bounds,
                                const ComplexityReport& complexity);

} // namespace replearn
