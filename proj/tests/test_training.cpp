#include <doctest.h>

#include <cmath>
#include <memory>

#include "replearn/analysis.hpp"
#include "replearn/training.hpp"

using namespace replearn;

namespace {

Network scalar_net(double value) {
    std::vector<Network::LayerPtr> layers{std::make_shared<DenseT<double>>(1, 1, false, false)};
    Network net(std::move(layers));
    net.params(1) = {Tensor(Shape{1, 1}, {value})};
    return net;
}

GradTapeT<double> tape_for(const Network& net, double grad) {
    GradTapeT<double> tape;
    tape.network_stamp = net.stamp();
    tape.param_grads[1] = {Tensor(Shape{1, 1}, {grad})};
    return tape;
}

Network uniform_dense(std::size_t depth, std::size_t width, std::uint64_t seed) {
    std::vector<Network::LayerPtr> layers;
    for (std::size_t i = 0; i < depth; ++i)
        layers.push_back(std::make_shared<DenseT<double>>(width, width, false, false));
    Network net(std::move(layers));
    net.init_params(seed);
    return net;
}

} // namespace

TEST_CASE("plain sgd single step") {
    Network net = scalar_net(1.0);
    OptimizerStateT<double> opt;
    opt.config.kind = OptimizerKind::sgd_momentum;
    opt.config.momentum = 0.0;
    opt.config.weight_decay = 0.0;
    apply_gradients(opt, net, tape_for(net, 0.5), 0.1);
    CHECK(net.params(1)[0][0] == doctest::Approx(0.95).epsilon(1e-15));
    CHECK(opt.step == 1);
}

TEST_CASE("zero gradients leave parameters fixed") {
    Network net = scalar_net(2.5);
    OptimizerStateT<double> opt;
    opt.config.kind = OptimizerKind::sgd_momentum;
    opt.config.weight_decay = 0.0;
    apply_gradients(opt, net, tape_for(net, 0.0), 0.1);
    CHECK(net.params(1)[0][0] == 2.5);
    CHECK(opt.step == 1);
}

TEST_CASE("adamw matches an independent reference for three constant steps") {
    const double lr = 0.01, wd = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    Network net = scalar_net(1.0);
    OptimizerStateT<double> opt;
    opt.config.kind = OptimizerKind::adamw;
    opt.config.weight_decay = wd;

    // 20-line reference, kept deliberately separate from the implementation
    double ref = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 3; ++t) {
        const double g = 1.0;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        double mhat = m / (1 - std::pow(b1, t));
        double vhat = v / (1 - std::pow(b2, t));
        ref -= lr * mhat / (std::sqrt(vhat) + eps) + lr * wd * ref;
    }

    for (int t = 0; t < 3; ++t) apply_gradients(opt, net, tape_for(net, 1.0), lr);
    CHECK(net.params(1)[0][0] == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("tape from a different network is rejected") {
    Network a = scalar_net(1.0);
    Network b = uniform_dense(2, 2, 1);
    OptimizerStateT<double> opt;
    auto tape = tape_for(a, 1.0);
    CHECK_THROWS_AS(apply_gradients(opt, b, tape, 0.1), std::runtime_error);
}

TEST_CASE("weight decay skips the coupling scalars") {
    Network net = uniform_dense(3, 3, 5);
    net.apply_freeze_plan(2, 0.5, 0.5);
    REQUIRE(net.plan().frozen == std::vector<std::size_t>{2});

    // zero gradients: AdamW still decays tensors, but must not touch a/b
    GradTapeT<double> tape;
    tape.network_stamp = net.stamp();
    tape.param_grads[1] = {Tensor::zeros(Shape{3, 3})};
    tape.param_grads[3] = {Tensor::zeros(Shape{3, 3})};
    tape.scalar_grads[2] = {0.0, 0.0};

    double w_before = net.params(1)[0][0];
    OptimizerStateT<double> opt;
    opt.config.kind = OptimizerKind::adamw;
    opt.config.weight_decay = 0.1;
    apply_gradients(opt, net, tape, 0.1);
    CHECK(net.params(1)[0][0] == doctest::Approx(w_before * (1.0 - 0.1 * 0.1)).epsilon(1e-12));
    CHECK(net.coupling(2).a == 0.5);
    CHECK(net.coupling(2).b == 0.5);
}

TEST_CASE("plain-sgd scalar rule bypasses the moment machinery") {
    Network net = uniform_dense(3, 3, 6);
    net.apply_freeze_plan(2, 0.5, 0.5);
    GradTapeT<double> tape;
    tape.network_stamp = net.stamp();
    tape.scalar_grads[2] = {1.0, -2.0};

    OptimizerStateT<double> opt;
    opt.config.kind = OptimizerKind::adamw;
    opt.config.scalar_rule = ScalarUpdateRule::plain_sgd;
    opt.config.scalar_lr_mult = 2.0;
    apply_gradients(opt, net, tape, 0.1);
    CHECK(net.coupling(2).a == doctest::Approx(0.5 - 0.2 * 1.0).epsilon(1e-15));
    CHECK(net.coupling(2).b == doctest::Approx(0.5 + 0.2 * 2.0).epsilon(1e-15));
    CHECK(opt.scalar_m1.empty());
}

TEST_CASE("cosine schedule endpoints and shape") {
    Schedule s{ScheduleKind::cosine, 0.02, 10};
    CHECK(s.at(0) == doctest::Approx(0.02).epsilon(1e-12));
    CHECK(s.at(10) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(s.at(5) == doctest::Approx(0.01).epsilon(1e-12));
    for (int e = 0; e < 10; ++e) CHECK(s.at(e) > s.at(e + 1));

    Schedule c{ScheduleKind::constant, 0.02, 10};
    CHECK(c.at(0) == 0.02);
    CHECK(c.at(10) == 0.02);
}

TEST_CASE("separable blobs reach full training accuracy end to end") {
    auto train_data = make_blobs<double>(120, 2, 0.02, 7, "train");
    auto test_data = make_blobs<double>(60, 2, 0.02, 8, "test");
    std::vector<Network::LayerPtr> layers{
        std::make_shared<DenseT<double>>(2, 16, true),
        std::make_shared<DenseT<double>>(16, 16, true),
        std::make_shared<DenseT<double>>(16, 2),
    };
    Network net(std::move(layers));
    net.init_params(9);

    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 16;
    cfg.seed = 9;
    cfg.schedule = {ScheduleKind::cosine, 0.01, 20};
    RunRecord rec = train(net, train_data, test_data, cfg);
    CHECK(rec.rows.back().train_acc == 1.0);
    CHECK_FALSE(rec.diverged);
}

TEST_CASE("identical seeds give bitwise-identical records") {
    auto run_once = [] {
        auto train_data = make_spirals<double>(80, 2, 0.03, 11, "train");
        auto test_data = make_spirals<double>(40, 2, 0.03, 12, "test");
        Network net = [] {
            std::vector<Network::LayerPtr> layers{
                std::make_shared<DenseT<double>>(2, 8, true),
                std::make_shared<DenseT<double>>(8, 8, true),
                std::make_shared<DenseT<double>>(8, 2),
            };
            Network n(std::move(layers));
            n.init_params(13);
            return n;
        }();
        TrainConfig cfg;
        cfg.epochs = 5;
        cfg.batch_size = 16;
        cfg.seed = 13;
        return train(net, train_data, test_data, cfg);
    };
    RunRecord a = run_once();
    RunRecord b = run_once();
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        CHECK(a.rows[i].train_loss == b.rows[i].train_loss);
        CHECK(a.rows[i].train_acc == b.rows[i].train_acc);
        CHECK(a.rows[i].test_acc == b.rows[i].test_acc);
        CHECK(a.rows[i].grad_writes == b.rows[i].grad_writes);
    }
}

TEST_CASE("divergence halts the run and marks the record") {
    auto train_data = make_blobs<double>(64, 2, 0.05, 21, "train");
    Network net = [] {
        std::vector<Network::LayerPtr> layers{
            std::make_shared<DenseT<double>>(2, 8, true),
            std::make_shared<DenseT<double>>(8, 2),
        };
        Network n(std::move(layers));
        n.init_params(22);
        return n;
    }();
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 8;
    cfg.seed = 23;
    cfg.optimizer.kind = OptimizerKind::sgd_momentum;
    cfg.schedule = {ScheduleKind::constant, 1e6, 30}; // absurd step size
    RunRecord rec = train(net, train_data, train_data, cfg);
    CHECK(rec.diverged);
    CHECK(rec.diverged_epoch >= 0);
    CHECK(rec.rows.size() == std::size_t(rec.diverged_epoch) + 1);
}

TEST_CASE("coupling scalars move during replacement training, frozen slots stay empty") {
    auto train_data = make_spirals<double>(100, 3, 0.05, 31, "train");
    std::vector<Network::LayerPtr> layers{
        std::make_shared<DenseT<double>>(2, 12, true),
        std::make_shared<DenseT<double>>(12, 12, true),
        std::make_shared<DenseT<double>>(12, 12, true),
        std::make_shared<DenseT<double>>(12, 12, true),
        std::make_shared<DenseT<double>>(12, 3),
    };
    Network net(std::move(layers));
    net.init_params(32);
    net.apply_freeze_plan(3, 0.5, 0.5); // frozen = {3}
    REQUIRE(net.plan().frozen == std::vector<std::size_t>{3});

    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 20;
    cfg.seed = 33;
    RunRecord rec = train(net, train_data, train_data, cfg);
    (void)rec;
    CHECK(std::abs(net.coupling(3).a - 0.5) > 1e-6);
    CHECK(std::abs(net.coupling(3).b - 0.5) > 1e-6);
    for (std::size_t s : net.layer(3).freezable_slots()) CHECK(net.params(3)[s].empty());
}

TEST_CASE("gradient writes per step shrink by the frozen block minus two") {
    auto train_data = make_blobs<double>(40, 2, 0.05, 41, "train");
    auto build = [] {
        std::vector<Network::LayerPtr> layers;
        layers.push_back(std::make_shared<DenseT<double>>(2, 10, true));
        for (int i = 0; i < 8; ++i)
            layers.push_back(std::make_shared<DenseT<double>>(10, 10, true));
        layers.push_back(std::make_shared<DenseT<double>>(10, 2)); // L = 10
        Network n(std::move(layers));
        n.init_params(42);
        return n;
    };

    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 40;
    cfg.seed = 43;

    Network e2e = build();
    RunRecord rec_e2e = train(e2e, train_data, train_data, cfg);

    Network repl = build();
    repl.apply_freeze_plan(4, 0.5, 0.5);
    REQUIRE(repl.plan().frozen == std::vector<std::size_t>{4, 8});
    RunRecord rec_repl = train(repl, train_data, train_data, cfg);

    std::uint64_t frozen_params = 2 * (10 * 10 + 10);
    CHECK(rec_e2e.rows[0].grad_writes ==
          rec_repl.rows[0].grad_writes + frozen_params - 2 * 2);
    CHECK(rec_repl.trainable_params == rec_e2e.trainable_params - frozen_params + 4);
    CHECK(rec_repl.trainable_params == param_counts(repl).trainable);
}
