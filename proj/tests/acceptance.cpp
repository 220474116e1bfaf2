// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// fail. Networks are small enough that the finite-difference sweeps stay
// exhaustive, and all training runs are seeded end to end.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "replearn/analysis.hpp"
#include "replearn/config.hpp"
#include "replearn/gradcheck.hpp"
#include "replearn/metrics.hpp"
#include "replearn/training.hpp"

using namespace replearn;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
    std::printf("%s  %-24s %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ------------------------------------------------------------------ zoo --

struct ZooEntry {
    std::string name;
    std::function<Network(std::uint64_t)> build;
    Shape batch_shape;
    int classes;
};

Network dense_net(std::size_t depth, std::size_t width, std::size_t in, int classes, bool relu,
                  bool bias, std::uint64_t seed) {
    std::vector<Network::LayerPtr> layers;
    layers.push_back(std::make_shared<DenseT<double>>(in, width, relu, bias));
    for (std::size_t i = 2; i < depth; ++i)
        layers.push_back(std::make_shared<DenseT<double>>(width, width, relu, bias));
    layers.push_back(std::make_shared<DenseT<double>>(width, classes, false, bias));
    Network net(std::move(layers));
    net.init_params(seed);
    return net;
}

std::vector<ZooEntry> make_zoo() {
    std::vector<ZooEntry> zoo;
    zoo.push_back({"dense-6x5", [](std::uint64_t s) { return dense_net(6, 5, 5, 3, false, true, s); },
                   Shape{3, 5}, 3});
    zoo.push_back({"dense-9x5-relu",
                   [](std::uint64_t s) { return dense_net(9, 5, 5, 3, true, true, s); },
                   Shape{3, 5}, 3});
    zoo.push_back({"dense-7x4-nobias",
                   [](std::uint64_t s) { return dense_net(7, 4, 4, 4, true, false, s); },
                   Shape{3, 4}, 4});
    zoo.push_back({"conv-residual-6",
                   [](std::uint64_t s) {
                       std::vector<Network::LayerPtr> layers;
                       layers.push_back(std::make_shared<Conv2dT<double>>(1, 3, true));
                       layers.push_back(std::make_shared<Conv2dT<double>>(3, 3, true));
                       for (int i = 0; i < 6; ++i)
                           layers.push_back(std::make_shared<ResidualConvBlockT<double>>(3));
                       layers.push_back(std::make_shared<GlobalAvgPoolT<double>>());
                       layers.push_back(std::make_shared<DenseT<double>>(3, 3));
                       Network net(std::move(layers));
                       net.init_params(s);
                       return net;
                   },
                   Shape{2, 1, 5, 5}, 3});
    zoo.push_back({"vit-blocks-6",
                   [](std::uint64_t s) {
                       std::vector<Network::LayerPtr> layers;
                       layers.push_back(std::make_shared<DenseT<double>>(3, 4));
                       for (int i = 0; i < 6; ++i)
                           layers.push_back(std::make_shared<TransformerBlockT<double>>(4));
                       layers.push_back(std::make_shared<TokenMeanPoolT<double>>());
                       layers.push_back(std::make_shared<DenseT<double>>(4, 3));
                       Network net(std::move(layers));
                       net.init_params(s);
                       return net;
                   },
                   Shape{2, 3, 3}, 3});
    // Bare attention cascades are numerically hostile to central differences
    // (softmax backward annihilates row-constant gradient components, so the
    // true q/k gradients can sit below the FD noise floor). The frozen
    // bare-attention path is pinned by a unit test on a well-conditioned
    // seed; the zoo carries the attention mechanism inside transformer
    // blocks at two different widths.
    zoo.push_back({"vit-blocks-4-d6",
                   [](std::uint64_t s) {
                       std::vector<Network::LayerPtr> layers;
                       layers.push_back(std::make_shared<DenseT<double>>(3, 6));
                       for (int i = 0; i < 4; ++i)
                           layers.push_back(std::make_shared<TransformerBlockT<double>>(6));
                       layers.push_back(std::make_shared<TokenMeanPoolT<double>>());
                       layers.push_back(std::make_shared<DenseT<double>>(6, 3));
                       Network net(std::move(layers));
                       net.init_params(s);
                       return net;
                   },
                   Shape{2, 3, 3}, 3});
    return zoo;
}

std::pair<Tensor, std::vector<int>> zoo_batch(const ZooEntry& entry, std::uint64_t seed) {
    Rng rng(seed);
    Tensor batch(entry.batch_shape);
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = rng.uniform(-1, 1);
    std::vector<int> labels(entry.batch_shape[0]);
    for (auto& y : labels) y = int(rng.index(std::size_t(entry.classes)));
    return {std::move(batch), std::move(labels)};
}

// ------------------------------------------------------- criterion bodies --

void criterion_gradient_oracle() {
    auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    std::string worst_at;
    std::size_t runs = 0, frozen_seen = 0;
    bool pass = true;
    for (const auto& entry : make_zoo()) {
        for (std::size_t k : {std::size_t(0), std::size_t(2), std::size_t(4)}) {
            Network net = entry.build(1000 + k);
            if (k > 0) {
                net.apply_freeze_plan(k, 0.5, 0.5);
                frozen_seen += net.plan().frozen.size();
            }
            auto [batch, labels] = zoo_batch(entry, 2000 + k);
            CheckSettings settings; // eps 1e-5, tolerance 1e-4, exhaustive <= 1e4
            CheckReport rep = check_network(net, batch, labels, settings);
            ++runs;
            if (rep.max_rel_err > worst) {
                worst = rep.max_rel_err;
                worst_at = entry.name + (k ? "/k=" + std::to_string(k) : "/e2e");
            }
            if (!rep.pass) pass = false;
        }
    }
    char detail[200];
    std::snprintf(detail, sizeof(detail),
                  "%zu runs, %zu frozen layers exercised, max rel err %.3e (%s), %.1fs",
                  runs, frozen_seen, worst, worst_at.c_str(), seconds_since(t0));
    report("gradient-oracle-zoo", pass && frozen_seen >= 8 && seconds_since(t0) < 60.0, detail);
}

void criterion_degeneracy() {
    auto t0 = std::chrono::steady_clock::now();
    Network e2e = dense_net(5, 6, 6, 3, true, true, 7);
    Network repl = dense_net(5, 6, 6, 3, true, true, 7);
    repl.apply_freeze_plan(7, 0.5, 0.5); // no multiple of 7 in [1,5): empty set
    bool pass = repl.plan().frozen.empty();

    Rng rng(8);
    Tensor batch(Shape{4, 6});
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = rng.uniform(-1, 1);
    std::vector<int> labels{0, 1, 2, 0};

    auto ta = e2e.forward_pass(batch);
    auto tb = repl.forward_pass(batch);
    pass = pass && e2e.output_of(ta).bitwise_equal(repl.output_of(tb));

    auto [la, ga] = loss_softmax_xent(e2e.output_of(ta), labels);
    auto [lb, gb] = loss_softmax_xent(repl.output_of(tb), labels);
    pass = pass && la == lb;
    auto tape_a = e2e.backward_pass(ta, ga);
    auto tape_b = repl.backward_pass(tb, gb);
    for (const auto& [layer, grads] : tape_a.param_grads)
        for (std::size_t s = 0; s < grads.size(); ++s)
            pass = pass && grads[s].bitwise_equal(tape_b.param_grads.at(layer)[s]);

    OptimizerStateT<double> oa, ob;
    oa.config.kind = ob.config.kind = OptimizerKind::adamw;
    apply_gradients(oa, e2e, tape_a, 0.01);
    apply_gradients(ob, repl, tape_b, 0.01);
    pass = pass && param_bytes_hash(e2e) == param_bytes_hash(repl);

    char detail[120];
    std::snprintf(detail, sizeof(detail),
                  "forward, backward and one optimizer step bit-identical, %.1fs",
                  seconds_since(t0));
    report("degeneracy-bitwise", pass && seconds_since(t0) < 5.0, detail);
}

void criterion_frozen_set_law() {
    bool pass = true;
    std::size_t cases = 0;
    for (std::size_t L = 1; L <= 40; ++L) {
        for (std::size_t k = 2; k <= 10; ++k) {
            // independent enumeration straight from the rule
            std::vector<std::size_t> want;
            for (std::size_t i = 1; i <= L; ++i)
                if (i % k == 0 && i != L) want.push_back(i);
            if (frozen_set(L, k) != want) pass = false;
            ++cases;
        }
    }
    pass = pass && frozen_set(12, 4) == std::vector<std::size_t>{4, 8};
    char detail[80];
    std::snprintf(detail, sizeof(detail), "%zu (L,k) cases match the enumerated table", cases);
    report("frozen-set-law", pass, detail);
}

void criterion_parameter_accounting() {
    bool pass = true;
    std::string note;
    for (const auto& entry : make_zoo()) {
        // end-to-end gradient write baseline
        Network e2e = entry.build(3000);
        auto [batch, labels] = zoo_batch(entry, 3500);
        auto trace_e = e2e.forward_pass(batch);
        auto tape_e = e2e.backward_pass(trace_e, loss_softmax_xent(e2e.output_of(trace_e), labels).second);

        for (std::size_t k : {std::size_t(2), std::size_t(4)}) {
            Network net = entry.build(3000);
            net.apply_freeze_plan(k, 0.5, 0.5);
            ParamReport pr = param_counts(net);

            // closed form recomputed independently from the layer specs
            std::uint64_t p = 0, frozen_freezable = 0;
            for (std::size_t i = 1; i <= net.depth(); ++i) {
                p += net.layer(i).param_count();
                if (net.plan().is_frozen(i)) frozen_freezable += net.layer(i).freezable_count();
            }
            std::uint64_t want = p - frozen_freezable + 2 * net.plan().frozen.size();
            if (pr.total != p || pr.trainable != want || net.trainable_count() != want)
                pass = false;

            auto trace = net.forward_pass(batch);
            auto tape =
                net.backward_pass(trace, loss_softmax_xent(net.output_of(trace), labels).second);
            std::uint64_t expected_writes =
                tape_e.grad_writes - (frozen_freezable - 2 * net.plan().frozen.size());
            if (tape.grad_writes != expected_writes) {
                pass = false;
                note = entry.name + "/k=" + std::to_string(k) + " writes " +
                       std::to_string(tape.grad_writes) + " != " +
                       std::to_string(expected_writes);
            }
        }
    }
    report("parameter-accounting", pass,
           pass ? "formula P - sum(frozen P_i) + 2|F| equals live enumeration; grad writes match"
                : note);
}

void criterion_complexity() {
    bool pass = true;
    pass = pass && complexity_estimate(9, 4).total_units == Rational(23);
    pass = pass && complexity_estimate(9, 4).reduction_units == Rational(4);
    for (std::size_t L : {std::size_t(5), std::size_t(9), std::size_t(16), std::size_t(33)}) {
        pass = pass && complexity_estimate(L, 1).reduction_units == Rational(2 * (long long)L - 2);
        pass = pass && complexity_estimate(L, L - 1).reduction_units == Rational(2);
        pass = pass && complexity_estimate(L, 1).bound_k1 == Rational(2 * (long long)L - 2);
        pass = pass && complexity_estimate(L, 2).bound_k_l1 == Rational(2);
    }
    pass = pass && complexity_estimate(10, 4).reduction_units == Rational(9, 2);
    pass = pass && complexity_estimate(10, 4).total_units == Rational(51, 2);
    report("complexity-formulas", pass, "closed forms exact, k=1 and k=L-1 bounds included");
}

struct ParityOutcome {
    RunRecord e2e;
    RunRecord repl;
    std::vector<std::pair<double, double>> couplings; // (a, b) after training
    double chance = 0.0;
    bool ok = false;
    std::string detail;
};

template <typename T>
ParityOutcome parity_run(const std::string& label, const DatasetT<T>& train_data,
                         const DatasetT<T>& test_data, const RunConfig& base_cfg) {
    ParityOutcome out;
    out.chance = 1.0 / double(train_data.class_count);

    RunConfig e2e_cfg = base_cfg;
    e2e_cfg.mode = "e2e";
    NetworkT<T> e2e = prepare_network<T>(e2e_cfg, train_data.sample_shape(),
                                         train_data.class_count);
    out.e2e = train(e2e, train_data, test_data, train_config_from(e2e_cfg));

    RunConfig repl_cfg = base_cfg;
    repl_cfg.mode = "replacement";
    NetworkT<T> repl = prepare_network<T>(repl_cfg, train_data.sample_shape(),
                                          train_data.class_count);
    out.repl = train(repl, train_data, test_data, train_config_from(repl_cfg));

    for (std::size_t i : repl.plan().frozen)
        out.couplings.push_back({double(repl.coupling(i).a), double(repl.coupling(i).b)});

    double acc_e2e = out.e2e.rows.back().test_acc;
    double acc_repl = out.repl.rows.back().test_acc;
    bool parity = acc_repl >= acc_e2e - 0.02;
    bool above_chance = acc_e2e >= 1.5 * out.chance && acc_repl >= 1.5 * out.chance;
    out.ok = parity && above_chance && !out.e2e.diverged && !out.repl.diverged &&
             !out.couplings.empty();
    char buf[200];
    std::snprintf(buf, sizeof(buf), "%s e2e %.3f repl %.3f (chance %.3f, %zu frozen)",
                  label.c_str(), acc_e2e, acc_repl, out.chance, out.couplings.size());
    out.detail = buf;
    return out;
}

ParityOutcome parity_spirals() {
    RunConfig cfg;
    cfg.arch = "mlp-9x64";
    cfg.dataset = "spirals";
    cfg.seed = 7;
    cfg.epochs = 50;
    cfg.batch_size = 64;
    cfg.k = 4;
    cfg.lr = 0.01;
    auto train_data = make_spirals<double>(2000, 3, 0.05, cfg.seed, "train");
    auto test_data = make_spirals<double>(500, 3, 0.05, cfg.seed + 1000003, "test");
    return parity_run<double>("spirals/mlp-9x64", train_data, test_data, cfg);
}

ParityOutcome parity_digits() {
    // Digit-glyph images stand in for MNIST at desk scale; they take the
    // same IDX route through the loader as the real files would.
    fs::path dir = fs::temp_directory_path() / "replearn-acceptance-digits";
    fs::create_directories(dir);
    auto [train_px, train_lab] = render_digit_bytes(1000, 10, 0.35, 21);
    auto [test_px, test_lab] = render_digit_bytes(500, 10, 0.35, 22);
    write_idx_images((dir / "train-images").string(), train_px, 1000, 10, 10);
    write_idx_labels((dir / "train-labels").string(), train_lab);
    write_idx_images((dir / "test-images").string(), test_px, 500, 10, 10);
    write_idx_labels((dir / "test-labels").string(), test_lab);

    auto train_data = load_idx<float>((dir / "train-images").string(),
                                      (dir / "train-labels").string(), "train");
    auto test_data =
        load_idx<float>((dir / "test-images").string(), (dir / "test-labels").string(), "test");

    RunConfig cfg;
    cfg.arch = "convnet-6";
    cfg.dataset = "idx";
    cfg.data_images = "unused";
    cfg.data_labels = "unused";
    cfg.data_test_images = "unused";
    cfg.data_test_labels = "unused";
    cfg.conv_channels = 6;
    cfg.seed = 9;
    cfg.epochs = 50;
    cfg.batch_size = 64;
    cfg.k = 4;
    cfg.lr = 0.003;
    return parity_run<float>("digits-1k/convnet-6", train_data, test_data, cfg);
}

void criterion_parity_and_liveness(const ParityOutcome& spirals, const ParityOutcome& digits,
                                   double elapsed) {
    char detail[360];
    std::snprintf(detail, sizeof(detail), "%s | %s | %.0fs", spirals.detail.c_str(),
                  digits.detail.c_str(), elapsed);
    report("training-parity", spirals.ok && digits.ok, detail);

    bool live = !spirals.couplings.empty() && !digits.couplings.empty();
    double min_move = 1e9;
    for (const auto* outcome : {&spirals, &digits})
        for (auto [a, b] : outcome->couplings) {
            min_move = std::min(min_move, std::abs(a - 0.5));
            min_move = std::min(min_move, std::abs(b - 0.5));
        }
    live = live && min_move > 1e-6;
    std::snprintf(detail, sizeof(detail), "smallest |delta| from 0.5 init: %.3e", min_move);
    report("scalar-liveness", live, detail);
}

void criterion_cka() {
    RunConfig cfg;
    cfg.mode = "replacement";
    cfg.arch = "mlp-9x64";
    cfg.dataset = "spirals";
    cfg.seed = 7;
    cfg.epochs = 12;
    cfg.batch_size = 64;
    cfg.k = 4;
    auto train_data = make_spirals<double>(600, 3, 0.08, 7, "train");
    auto test_data = make_spirals<double>(200, 3, 0.08, 8, "test");
    Network net = prepare_network<double>(cfg, train_data.sample_shape(), train_data.class_count);
    train(net, train_data, test_data, train_config_from(cfg));

    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < 64; ++i) idx.push_back(i);
    auto [probe, labels] = test_data.batch(idx);
    (void)labels;
    SimilarityMatrix m = cka_matrix(net, probe);

    bool pass = m.layers == net.depth();
    for (std::size_t i = 0; i < m.layers && pass; ++i) {
        if (std::abs(m.at(i, i) - 1.0) > 1e-9) pass = false;
        for (std::size_t j = 0; j < m.layers; ++j) {
            if (m.at(i, j) != m.at(j, i)) pass = false;
            if (std::isnan(m.at(i, j))) pass = false;
        }
    }

    // reported, not asserted: where the frozen layer's strongest
    // off-diagonal similarity sits
    std::string note = "no frozen layer";
    if (!net.plan().frozen.empty()) {
        std::size_t f = net.plan().frozen[0] - 1;
        std::size_t best = f == 0 ? 1 : 0;
        for (std::size_t j = 0; j < m.layers; ++j)
            if (j != f && m.at(f, j) > m.at(f, best)) best = j;
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "frozen layer %zu most similar to layer %zu (cka %.3f)%s", f + 1, best + 1,
                      m.at(f, best), (best + 1 == f || best - 1 == f) ? ", a neighbour" : "");
        note = buf;
    }
    report("cka-sanity", pass, "symmetric, unit diagonal; " + note);
}

void criterion_determinism() {
    auto run_csv = [] {
        RunConfig cfg;
        cfg.mode = "replacement";
        cfg.arch = "mlp-5x16";
        cfg.dataset = "spirals";
        cfg.seed = 11;
        cfg.epochs = 6;
        cfg.batch_size = 32;
        cfg.k = 2;
        cfg.data_n = 300;
        cfg.data_test_n = 100;
        auto [train_data, test_data] = load_dataset<double>(cfg);
        Network net =
            prepare_network<double>(cfg, train_data.sample_shape(), train_data.class_count);
        RunRecord rec = train(net, train_data, test_data, train_config_from(cfg));
        return mask_timing_column(metrics_csv(rec));
    };
    std::string a = run_csv();
    std::string b = run_csv();
    bool pass = a == b && !a.empty();
    char detail[120];
    std::snprintf(detail, sizeof(detail),
                  "two runs, %zu bytes of masked CSV compare byte-identical", a.size());
    report("determinism-csv", pass, detail);
}

} // namespace

int main() {
    std::printf("replacement-learning acceptance suite\n");
    criterion_gradient_oracle();
    criterion_degeneracy();
    criterion_frozen_set_law();
    criterion_parameter_accounting();
    criterion_complexity();

    auto t0 = std::chrono::steady_clock::now();
    ParityOutcome spirals = parity_spirals();
    ParityOutcome digits = parity_digits();
    criterion_parity_and_liveness(spirals, digits, seconds_since(t0));

    criterion_cka();
    criterion_determinism();

    std::printf("%s (%d failure%s)\n", failures == 0 ? "ALL CRITERIA PASSED" : "FAILURES PRESENT",
                failures, failures == 1 ? "" : "s");
    return failures == 0 ? 0 : 1;
}
