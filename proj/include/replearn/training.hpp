#pragma once

// Optimizers (SGD with momentum, AdamW), the cosine-annealing schedule and
// the training loop for both end-to-end and replacement modes. Everything is
// deterministic given the seed: batch order comes from a seeded shuffle and
// all arithmetic runs in a fixed order.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "replearn/data.hpp"
#include "replearn/metrics.hpp"
#include "replearn/replacement.hpp"

namespace replearn {

enum class OptimizerKind { sgd_momentum, adamw };
enum class ScalarUpdateRule { same_as_tensors, plain_sgd };
enum class ScheduleKind { constant, cosine };

struct Schedule {
    ScheduleKind kind = ScheduleKind::cosine;
    double initial_lr = 0.01;
    int total_epochs = 1;

    double at(int epoch) const {
        if (kind == ScheduleKind::constant) return initial_lr;
        return initial_lr * (1.0 + std::cos(M_PI * double(epoch) / double(total_epochs))) / 2.0;
    }
};

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adamw;
    double momentum = 0.9;   // SGD
    double beta1 = 0.9;      // AdamW
    double beta2 = 0.999;    // AdamW
    double eps = 1e-8;       // AdamW
    double weight_decay = 1e-4;
    double scalar_lr_mult = 1.0;
    ScalarUpdateRule scalar_rule = ScalarUpdateRule::same_as_tensors;
};

// Moment buffers exist exactly for the quantities that received gradients;
// weight decay applies to parameter tensors only, never to the coupling
// scalars (decaying those would pull composed layers toward the zero map).
template <typename T>
struct OptimizerStateT {
    OptimizerConfig config;
    std::uint64_t step = 0;
    std::map<std::size_t, std::vector<TensorT<T>>> m1; // first moment / velocity
    std::map<std::size_t, std::vector<TensorT<T>>> m2; // second moment (AdamW)
    std::map<std::size_t, CouplingT<T>> scalar_m1;
    std::map<std::size_t, CouplingT<T>> scalar_m2;
};

namespace detail {

template <typename T>
void adamw_tensor(TensorT<T>& value, const TensorT<T>& grad, TensorT<T>& m, TensorT<T>& v,
                  const OptimizerConfig& c, double lr, std::uint64_t step, bool decay) {
    const T b1 = T(c.beta1), b2 = T(c.beta2);
    const T bc1 = T(1) - std::pow(b1, T(step));
    const T bc2 = T(1) - std::pow(b2, T(step));
    for (std::size_t i = 0; i < value.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
        v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
        T mhat = m[i] / bc1;
        T vhat = v[i] / bc2;
        T upd = T(lr) * mhat / (std::sqrt(vhat) + T(c.eps));
        if (decay) upd += T(lr) * T(c.weight_decay) * value[i];
        value[i] -= upd;
    }
}

template <typename T>
void sgd_tensor(TensorT<T>& value, const TensorT<T>& grad, TensorT<T>& vel,
                const OptimizerConfig& c, double lr, bool decay) {
    const T mu = T(c.momentum);
    for (std::size_t i = 0; i < value.size(); ++i) {
        T g = grad[i];
        if (decay) g += T(c.weight_decay) * value[i];
        vel[i] = mu * vel[i] + g;
        value[i] -= T(lr) * vel[i];
    }
}

template <typename T>
void adamw_scalar(T& value, T grad, T& m, T& v, const OptimizerConfig& c, double lr,
                  std::uint64_t step) {
    const T b1 = T(c.beta1), b2 = T(c.beta2);
    m = b1 * m + (T(1) - b1) * grad;
    v = b2 * v + (T(1) - b2) * grad * grad;
    T mhat = m / (T(1) - std::pow(b1, T(step)));
    T vhat = v / (T(1) - std::pow(b2, T(step)));
    value -= T(lr) * mhat / (std::sqrt(vhat) + T(c.eps));
}

} // namespace detail

// One optimizer step: updates every owned parameter tensor that has a
// gradient on the tape plus every coupling scalar pair.
template <typename T>
void apply_gradients(OptimizerStateT<T>& opt, NetworkT<T>& net, const GradTapeT<T>& tape,
                     double lr) {
    if (tape.network_stamp != net.stamp())
        throw std::runtime_error("apply_gradients: tape was produced for a different network");
    opt.step += 1;
    const OptimizerConfig& c = opt.config;

    for (const auto& [layer, grads] : tape.param_grads) {
        auto& values = net.params(layer);
        auto& m1 = opt.m1[layer];
        auto& m2 = opt.m2[layer];
        if (m1.empty()) m1.resize(values.size());
        if (m2.empty()) m2.resize(values.size());
        for (std::size_t s = 0; s < grads.size(); ++s) {
            if (grads[s].empty()) continue;
            if (m1[s].empty()) m1[s] = TensorT<T>(values[s].shape());
            if (c.kind == OptimizerKind::adamw) {
                if (m2[s].empty()) m2[s] = TensorT<T>(values[s].shape());
                detail::adamw_tensor(values[s], grads[s], m1[s], m2[s], c, lr, opt.step, true);
            } else {
                detail::sgd_tensor(values[s], grads[s], m1[s], c, lr, true);
            }
        }
    }

    const double slr = lr * c.scalar_lr_mult;
    for (const auto& [layer, g] : tape.scalar_grads) {
        auto& coupling = net.coupling(layer);
        if (c.scalar_rule == ScalarUpdateRule::plain_sgd) {
            coupling.a -= T(slr) * g.a;
            coupling.b -= T(slr) * g.b;
        } else if (c.kind == OptimizerKind::adamw) {
            auto& m = opt.scalar_m1[layer];
            auto& v = opt.scalar_m2[layer];
            detail::adamw_scalar(coupling.a, g.a, m.a, v.a, c, slr, opt.step);
            detail::adamw_scalar(coupling.b, g.b, m.b, v.b, c, slr, opt.step);
        } else {
            auto& m = opt.scalar_m1[layer];
            m.a = T(c.momentum) * m.a + g.a;
            m.b = T(c.momentum) * m.b + g.b;
            coupling.a -= T(slr) * m.a;
            coupling.b -= T(slr) * m.b;
        }
    }
}

struct TrainConfig {
    int epochs = 50;
    std::size_t batch_size = 64;
    std::uint64_t seed = 1;
    OptimizerConfig optimizer;
    Schedule schedule;
    double divergence_limit = 1e6;
};

template <typename T>
double evaluate_accuracy(const NetworkT<T>& net, const DatasetT<T>& data,
                         std::size_t batch_size) {
    if (data.size() == 0) return 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        std::size_t stop = std::min(start + batch_size, data.size());
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < stop; ++i) idx.push_back(i);
        auto [inputs, labels] = data.batch(idx);
        auto trace = net.forward_pass(inputs);
        const TensorT<T>& logits = net.output_of(trace);
        for (std::size_t b = 0; b < labels.size(); ++b) {
            std::size_t arg = 0;
            for (std::size_t c = 1; c < logits.dim(1); ++c)
                if (logits.at(b, c) > logits.at(b, arg)) arg = c;
            if (int(arg) == labels[b]) ++correct;
        }
    }
    return double(correct) / double(data.size());
}

// Full training loop. The network must already carry its freeze plan (an
// empty plan is the end-to-end baseline). Halts if the loss goes non-finite
// or beyond the divergence limit and marks the record accordingly.
template <typename T>
RunRecord train(NetworkT<T>& net, const DatasetT<T>& train_data, const DatasetT<T>& test_data,
                const TrainConfig& cfg) {
    if (train_data.size() == 0) throw std::invalid_argument("train: empty training set");

    OptimizerStateT<T> opt;
    opt.config = cfg.optimizer;

    RunRecord record;
    record.frozen_count = net.plan().frozen.size();
    record.trainable_params = net.trainable_count();

    std::vector<std::size_t> order(train_data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        double lr = cfg.schedule.at(epoch);
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t batches = 0, correct = 0;
        std::uint64_t writes = 0;
        bool diverged = false;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t stop = std::min(start + cfg.batch_size, order.size());
            std::vector<std::size_t> idx(order.begin() + start, order.begin() + stop);
            auto [inputs, labels] = train_data.batch(idx);

            auto trace = net.forward_pass(inputs);
            const TensorT<T>& logits = net.output_of(trace);
            auto [loss, loss_grad] = loss_softmax_xent(logits, labels);
            if (!std::isfinite(double(loss)) || double(loss) > cfg.divergence_limit) {
                diverged = true;
                break;
            }
            for (std::size_t b = 0; b < labels.size(); ++b) {
                std::size_t arg = 0;
                for (std::size_t c = 1; c < logits.dim(1); ++c)
                    if (logits.at(b, c) > logits.at(b, arg)) arg = c;
                if (int(arg) == labels[b]) ++correct;
            }

            auto tape = net.backward_pass(trace, loss_grad);
            writes = tape.grad_writes;
            apply_gradients(opt, net, tape, lr);
            loss_sum += double(loss);
            ++batches;
        }

        double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        EpochRow row;
        row.epoch = epoch;
        row.train_loss = batches ? loss_sum / double(batches) : 0.0;
        row.train_acc = double(correct) / double(train_data.size());
        row.test_acc = evaluate_accuracy(net, test_data, cfg.batch_size);
        row.lr = lr;
        row.epoch_seconds = seconds;
        row.grad_writes = writes;
        record.rows.push_back(row);
        record.best_test_acc = std::max(record.best_test_acc, row.test_acc);

        if (diverged) {
            record.diverged = true;
            record.diverged_epoch = epoch;
            break;
        }
    }
    return record;
}

} // namespace replearn
