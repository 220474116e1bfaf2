#include <doctest.h>

#include <cmath>
#include <memory>

#include "replearn/replacement.hpp"

using namespace replearn;

namespace {

Network dense_stack(const std::vector<std::pair<std::size_t, std::size_t>>& dims, bool bias,
                    std::uint64_t seed) {
    std::vector<Network::LayerPtr> layers;
    for (auto [in, out] : dims)
        layers.push_back(std::make_shared<DenseT<double>>(in, out, false, bias));
    Network net(std::move(layers));
    net.init_params(seed);
    return net;
}

Network uniform_dense(std::size_t depth, std::size_t width, std::uint64_t seed) {
    std::vector<std::pair<std::size_t, std::size_t>> dims(depth, {width, width});
    return dense_stack(dims, false, seed);
}

Tensor random_batch(Shape shape, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1, 1);
    return t;
}

} // namespace

TEST_CASE("frozen_set enumerates multiples of k without the final layer") {
    CHECK(frozen_set(12, 4) == std::vector<std::size_t>{4, 8});
    CHECK(frozen_set(3, 4).empty());
    CHECK(frozen_set(7, 2) == std::vector<std::size_t>{2, 4, 6});
    CHECK(frozen_set(8, 4) == std::vector<std::size_t>{4}); // 8 is the final layer
    CHECK_THROWS_AS(frozen_set(10, 1), std::invalid_argument);
    CHECK_THROWS_AS(frozen_set(10, 0), std::invalid_argument);
}

TEST_CASE("compose_params hand cases") {
    std::vector<Tensor> prev{Tensor(Shape{1}, {2})};
    std::vector<Tensor> next{Tensor(Shape{1}, {4})};

    auto same = compose_params(1.0, 0.0, prev, next);
    CHECK(same[0].bitwise_equal(prev[0]));

    auto mid = compose_params(0.5, 0.5, prev, next);
    CHECK(mid[0][0] == 3.0);

    std::vector<Tensor> p2{Tensor(Shape{2}, {10, 0})};
    std::vector<Tensor> n2{Tensor(Shape{2}, {0, 10})};
    auto mixed = compose_params(0.3, 0.2, p2, n2);
    CHECK(mixed[0][0] == 3.0);
    CHECK(mixed[0][1] == 2.0);

    CHECK_THROWS_AS(compose_params(1.0, 1.0, prev, p2), ShapeError);
    std::vector<Tensor> two{Tensor(Shape{1}, {1}), Tensor(Shape{1}, {2})};
    CHECK_THROWS_AS(compose_params(1.0, 1.0, prev, two), ShapeError);
}

TEST_CASE("composition is homogeneous in the scalars") {
    Rng rng(31);
    std::vector<Tensor> prev{random_batch(Shape{3, 3}, 1), random_batch(Shape{3}, 2)};
    std::vector<Tensor> next{random_batch(Shape{3, 3}, 3), random_batch(Shape{3}, 4)};
    double a = rng.uniform(), b = rng.uniform(), c = rng.uniform(0.1, 3.0);
    auto scaled = compose_params(c * a, c * b, prev, next);
    auto base = compose_params(a, b, prev, next);
    for (std::size_t s = 0; s < base.size(); ++s)
        for (std::size_t i = 0; i < base[s].size(); ++i)
            CHECK(scaled[s][i] == doctest::Approx(c * base[s][i]).epsilon(1e-15));
}

TEST_CASE("a=1,b=0 composition degenerates to copying the predecessor") {
    Network net = uniform_dense(3, 4, 9);
    net.apply_freeze_plan(2, 1.0, 0.0); // frozen = {2}
    REQUIRE(net.plan().frozen == std::vector<std::size_t>{2});

    Network copycat = uniform_dense(3, 4, 9);
    copycat.params(2) = copycat.params(1);

    Tensor batch = random_batch(Shape{5, 4}, 77);
    auto a = net.forward_pass(batch);
    auto b = copycat.forward_pass(batch);
    CHECK(net.output_of(a).bitwise_equal(copycat.output_of(b)));
}

TEST_CASE("empty frozen set is bitwise identical to the plain pass") {
    Network a = uniform_dense(5, 6, 21);
    Network b = uniform_dense(5, 6, 21);
    b.apply_freeze_plan(7, 0.5, 0.5); // no multiples of 7 below 5 layers
    REQUIRE(b.plan().frozen.empty());

    Tensor batch = random_batch(Shape{4, 6}, 5);
    auto ta = a.forward_pass(batch);
    auto tb = b.forward_pass(batch);
    CHECK(a.output_of(ta).bitwise_equal(b.output_of(tb)));

    Tensor loss_grad = random_batch(Shape{4, 6}, 6);
    auto tape_a = a.backward_pass(ta, loss_grad);
    auto tape_b = b.backward_pass(tb, loss_grad);
    REQUIRE(tape_a.param_grads.size() == tape_b.param_grads.size());
    for (const auto& [layer, grads] : tape_a.param_grads)
        for (std::size_t s = 0; s < grads.size(); ++s)
            CHECK(grads[s].bitwise_equal(tape_b.param_grads.at(layer)[s]));
    CHECK(tape_b.scalar_grads.empty());
    CHECK(tape_a.grad_writes == tape_b.grad_writes);
}

// Scalar chain h = t3*(t2*(t1*x)) with layer 2 frozen and a=b=0.5,
// x=1, t1=2, t3=3, loss = h. Differentiating
// L(t1,t3,a,b) = (a*t1 + b*t3)*t1*t3*x by hand gives
//   dL/da = 12, dL/db = 18, dL/dt1 = 10.5, dL/dt3 = 8.
TEST_CASE("frozen scalar chain reproduces the hand-derived gradients") {
    std::vector<Network::LayerPtr> layers;
    for (int i = 0; i < 3; ++i)
        layers.push_back(std::make_shared<DenseT<double>>(1, 1, false, false));
    Network net(std::move(layers));
    net.params(1) = {Tensor(Shape{1, 1}, {2.0})};
    net.params(2) = {Tensor(Shape{1, 1}, {0.0})}; // replaced by the plan
    net.params(3) = {Tensor(Shape{1, 1}, {3.0})};
    net.apply_freeze_plan(2, 0.5, 0.5);
    REQUIRE(net.plan().frozen == std::vector<std::size_t>{2});

    Tensor x(Shape{1, 1}, {1.0});
    auto trace = net.forward_pass(x);
    CHECK(net.output_of(trace)[0] == 15.0); // composed t2 = 2.5

    auto tape = net.backward_pass(trace, Tensor(Shape{1, 1}, {1.0}));
    CHECK(tape.scalar_grads.at(2).a == doctest::Approx(12.0).epsilon(1e-12));
    CHECK(tape.scalar_grads.at(2).b == doctest::Approx(18.0).epsilon(1e-12));
    CHECK(tape.param_grads.at(1)[0][0] == doctest::Approx(10.5).epsilon(1e-12));
    CHECK(tape.param_grads.at(3)[0][0] == doctest::Approx(8.0).epsilon(1e-12));
    CHECK(tape.param_grads.count(2) == 0);
    CHECK(tape.grad_writes == 4); // two neighbour scalars + (a, b)
}

// Straight-line reimplementation of the composed forward pass, written
// directly against the layer math rather than Network.
TEST_CASE("forward_pass matches an independent straight-line oracle") {
    const std::size_t depth = 5, width = 4;
    Network net = uniform_dense(depth, width, 7);
    net.apply_freeze_plan(4, 0.25, 0.75); // frozen = {4}
    REQUIRE(net.plan().frozen == std::vector<std::size_t>{4});

    Tensor batch = random_batch(Shape{3, width}, 123);

    // oracle: h_0 = x; composed w4 = a*w3 + b*w5; h_i = h_{i-1} * w_i^T
    Tensor h = batch;
    for (std::size_t i = 1; i <= depth; ++i) {
        Tensor w = net.params(i).at(0);
        if (i == 4) {
            const Tensor& w3 = net.params(3)[0];
            const Tensor& w5 = net.params(5)[0];
            w = Tensor(w3.shape());
            for (std::size_t e = 0; e < w.size(); ++e) w[e] = 0.25 * w3[e] + 0.75 * w5[e];
        }
        Tensor next(Shape{h.dim(0), width});
        for (std::size_t r = 0; r < h.dim(0); ++r)
            for (std::size_t o = 0; o < width; ++o) {
                double acc = 0.0;
                for (std::size_t c = 0; c < width; ++c) acc += h.at(r, c) * w.at(o, c);
                next.at(r, o) = acc;
            }
        h = next;
    }

    auto trace = net.forward_pass(batch);
    const Tensor& got = net.output_of(trace);
    for (std::size_t i = 0; i < h.size(); ++i)
        CHECK(got[i] == doctest::Approx(h[i]).epsilon(1e-12));
}

TEST_CASE("gradient routing exclusivity") {
    Network net = uniform_dense(7, 3, 55);
    net.apply_freeze_plan(2, 0.5, 0.5);
    REQUIRE(net.plan().frozen == std::vector<std::size_t>{2, 4, 6});

    Tensor batch = random_batch(Shape{2, 3}, 8);
    auto trace = net.forward_pass(batch);
    auto tape = net.backward_pass(trace, random_batch(Shape{2, 3}, 9));

    for (std::size_t i : net.plan().frozen) {
        CHECK(tape.param_grads.count(i) == 0);
        CHECK(tape.scalar_grads.count(i) == 1);
    }
    CHECK(tape.scalar_grads.size() == net.plan().frozen.size());
}

// The successor of a frozen layer receives its own backward gradient plus
// b * ghat; both terms are recomputed independently here.
TEST_CASE("neighbour accumulation adds exactly the routed term") {
    const std::size_t width = 3;
    Network net = uniform_dense(5, width, 99);
    const double a0 = 0.4, b0 = 0.7;
    net.apply_freeze_plan(4, a0, b0); // frozen = {4}

    Tensor batch = random_batch(Shape{2, width}, 10);
    auto trace = net.forward_pass(batch);
    Tensor loss_grad = random_batch(Shape{2, width}, 11);

    // own-term oracle: run each layer's backward by hand from the cached ios
    std::vector<Tensor> deltas(net.depth() + 1);
    Tensor delta = loss_grad;
    std::vector<std::vector<Tensor>> own(net.depth() + 1);
    std::vector<std::vector<Tensor>> ghat(net.depth() + 1);
    for (std::size_t i = net.depth(); i >= 1; --i) {
        std::vector<Tensor> params =
            net.plan().is_frozen(i)
                ? compose_params(a0, b0, {net.params(3)[0]}, {net.params(5)[0]})
                : net.params(i);
        auto grads = net.layer(i).backward(trace.ios[i - 1], params, delta);
        if (net.plan().is_frozen(i))
            ghat[i] = grads.param_grads;
        else
            own[i] = grads.param_grads;
        delta = grads.input_grad;
        if (i == 1) break;
    }

    auto trace2 = net.forward_pass(batch);
    auto tape = net.backward_pass(trace2, loss_grad);

    const Tensor& got3 = tape.param_grads.at(3)[0];
    const Tensor& got5 = tape.param_grads.at(5)[0];
    for (std::size_t e = 0; e < got3.size(); ++e) {
        CHECK(got3[e] == doctest::Approx(own[3][0][e] + a0 * ghat[4][0][e]).epsilon(1e-12));
        CHECK(got5[e] == doctest::Approx(own[5][0][e] + b0 * ghat[4][0][e]).epsilon(1e-12));
    }
}

TEST_CASE("plan construction prunes incompatible candidates with a warning") {
    SUBCASE("width transition at the candidate's successor") {
        // 4-wide body, narrow final layer: candidate 4 of L=5, k=4 composes
        // from layers 3 and 5, but layer 5 has a different weight shape.
        Network net =
            dense_stack({{4, 4}, {4, 4}, {4, 4}, {4, 4}, {4, 2}}, false, 3);
        net.apply_freeze_plan(4, 0.5, 0.5);
        CHECK(net.plan().frozen.empty());
        REQUIRE(net.plan().warnings.size() == 1);
        CHECK(net.plan().warnings[0].find("layer 4") != std::string::npos);
    }
    SUBCASE("parameter-free candidate") {
        std::vector<Network::LayerPtr> layers{
            std::make_shared<DenseT<double>>(4, 4),
            std::make_shared<ReluT<double>>(),
            std::make_shared<DenseT<double>>(4, 4),
        };
        Network net(std::move(layers));
        net.init_params(1);
        net.apply_freeze_plan(2, 0.5, 0.5);
        CHECK(net.plan().frozen.empty());
        CHECK(net.plan().warnings.size() == 1);
    }
    SUBCASE("interior candidates survive, edges are pruned") {
        Network net = dense_stack({{2, 4}, {4, 4}, {4, 4}, {4, 4}, {4, 4}, {4, 4}, {4, 4},
                                   {4, 4}, {4, 3}},
                                  false, 5);
        net.apply_freeze_plan(2, 0.5, 0.5);
        // candidates {2,4,6,8}: 2 composes from layer 1 (wrong shape), 8
        // from layer 9 (wrong shape)
        CHECK(net.plan().frozen == std::vector<std::size_t>{4, 6});
        CHECK(net.plan().warnings.size() == 2);
    }
}

TEST_CASE("frozen layers own no freezable tensors") {
    Network net = uniform_dense(5, 3, 13);
    net.apply_freeze_plan(4, 0.5, 0.5);
    REQUIRE(net.plan().frozen == std::vector<std::size_t>{4});
    CHECK(net.params(4)[0].empty());
    CHECK_FALSE(net.params(3)[0].empty());
    CHECK(net.trainable_count() == 4 * 9 + 2);
}

TEST_CASE("a step trace can only be consumed once") {
    Network net = uniform_dense(3, 3, 17);
    Tensor batch = random_batch(Shape{2, 3}, 14);
    auto trace = net.forward_pass(batch);
    Tensor g = random_batch(Shape{2, 3}, 15);
    net.backward_pass(trace, g);
    CHECK_THROWS_AS(net.backward_pass(trace, g), std::runtime_error);
}

TEST_CASE("transformer blocks freeze attention only, the MLP keeps training") {
    std::vector<Network::LayerPtr> layers;
    layers.push_back(std::make_shared<DenseT<double>>(4, 4)); // token embed
    for (int i = 0; i < 3; ++i) layers.push_back(std::make_shared<TransformerBlockT<double>>(4));
    layers.push_back(std::make_shared<TokenMeanPoolT<double>>());
    layers.push_back(std::make_shared<DenseT<double>>(4, 2));
    Network net(std::move(layers));
    net.init_params(29);
    net.apply_freeze_plan(3, 0.5, 0.5); // candidate {3} = middle block
    REQUIRE(net.plan().frozen == std::vector<std::size_t>{3});

    auto specs = net.layer(3).param_specs();
    for (std::size_t s = 0; s < specs.size(); ++s)
        CHECK(net.params(3)[s].empty() == specs[s].freezable);

    Tensor batch = random_batch(Shape{2, 3, 4}, 30);
    auto trace = net.forward_pass(batch);
    auto [loss, lg] = loss_softmax_xent(net.output_of(trace), {0, 1});
    (void)loss;
    auto tape = net.backward_pass(trace, lg);

    // the frozen block reports gradients only for its non-freezable params
    const auto& grads = tape.param_grads.at(3);
    for (std::size_t s = 0; s < specs.size(); ++s)
        CHECK(grads[s].empty() == specs[s].freezable);
    CHECK(tape.scalar_grads.count(3) == 1);
}
