// Experiment runner. Subcommands: train, compare, gradcheck, analyze,
// probe, cka, gen-data. Exit codes: 0 success, 1 usage/config error,
// 2 runtime failure (including a failed gradient check).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "replearn/analysis.hpp"
#include "replearn/config.hpp"
#include "replearn/gradcheck.hpp"
#include "replearn/metrics.hpp"
#include "replearn/training.hpp"

namespace fs = std::filesystem;
using namespace replearn;

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << text;
}

std::string out_path(const std::string& dir, const std::string& name) {
    fs::create_directories(dir);
    return (fs::path(dir) / name).string();
}

template <typename T>
RunRecord run_training(const RunConfig& cfg) {
    auto [train_data, test_data] = load_dataset<T>(cfg);
    NetworkT<T> net = prepare_network<T>(cfg, train_data.sample_shape(), train_data.class_count);
    for (const auto& w : net.plan().warnings) std::cerr << "note: " << w << "\n";
    RunRecord record = train(net, train_data, test_data, train_config_from(cfg));
    record.total_params = param_counts(net).total;
    return record;
}

RunRecord run_training_any(const RunConfig& cfg) {
    return cfg.dtype == "f32" ? run_training<float>(cfg) : run_training<double>(cfg);
}

std::string summary_text(const RunConfig& cfg, const RunRecord& rec) {
    std::ostringstream os;
    os << "# resolved configuration\n" << serialize_config(cfg) << "\n# results\n";
    os << "epochs_run = " << rec.rows.size() << "\n";
    os << "final_test_acc = "
       << format_float(rec.rows.empty() ? 0.0 : rec.rows.back().test_acc) << "\n";
    os << "best_test_acc = " << format_float(rec.best_test_acc) << "\n";
    os << "total_params = " << rec.total_params << "\n";
    os << "trainable_params = " << rec.trainable_params << "\n";
    os << "frozen_layers = " << rec.frozen_count << "\n";
    os << "diverged = " << (rec.diverged ? "true" : "false") << "\n";
    if (rec.diverged) os << "diverged_epoch = " << rec.diverged_epoch << "\n";
    return os.str();
}

int cmd_train(const std::string& config_path, const std::string& out_override) {
    RunConfig cfg = load_config_file(config_path);
    if (!out_override.empty()) cfg.out_dir = out_override;
    RunRecord rec = run_training_any(cfg);
    write_metrics(rec, out_path(cfg.out_dir, "metrics.csv"));
    write_text(out_path(cfg.out_dir, "summary.txt"), summary_text(cfg, rec));
    std::cout << summary_text(cfg, rec);
    return 0;
}

int cmd_compare(const std::string& e2e_path, const std::string& repl_path,
                const std::string& out_override) {
    RunConfig e2e_cfg = load_config_file(e2e_path);
    RunConfig repl_cfg = load_config_file(repl_path);
    std::string why;
    if (!comparable_pair(e2e_cfg, repl_cfg, why)) throw ConfigError("compare: " + why);
    std::string out = out_override.empty() ? repl_cfg.out_dir : out_override;

    CompareReport rep;
    rep.label_a = "e2e";
    rep.label_b = repl_cfg.mode;
    rep.a = run_training_any(e2e_cfg);
    rep.b = run_training_any(repl_cfg);
    write_metrics(rep.a, out_path(out, "metrics_e2e.csv"));
    write_metrics(rep.b, out_path(out, "metrics_replacement.csv"));
    write_text(out_path(out, "compare.csv"), compare_csv(rep));
    write_text(out_path(out, "compare.txt"), compare_text(rep));
    std::cout << compare_text(rep);
    return 0;
}

// The oracle always runs in 64-bit regardless of the config's training
// dtype; central differences need the headroom.
int cmd_gradcheck(const std::string& config_path, double tolerance, double eps,
                  std::size_t batch) {
    RunConfig cfg = load_config_file(config_path);
    auto [train_data, test_data] = load_dataset<double>(cfg);
    (void)test_data;
    Network net = prepare_network<double>(cfg, train_data.sample_shape(), train_data.class_count);
    for (const auto& w : net.plan().warnings) std::cerr << "note: " << w << "\n";

    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < std::min(batch, train_data.size()); ++i) idx.push_back(i);
    auto [inputs, labels] = train_data.batch(idx);

    CheckSettings settings;
    settings.tolerance = tolerance;
    settings.eps = eps;
    CheckReport report = check_network(net, inputs, labels, settings);
    std::cout << format_check_report(report);
    if (!report.pass) throw std::runtime_error("gradient check failed");
    return 0;
}

int cmd_analyze(const std::string& config_path, const std::string& out_override) {
    RunConfig cfg = load_config_file(config_path);
    if (!out_override.empty()) cfg.out_dir = out_override;
    auto [train_data, test_data] = load_dataset<double>(cfg);
    (void)test_data;
    Network net = prepare_network<double>(cfg, train_data.sample_shape(), train_data.class_count);
    for (const auto& w : net.plan().warnings) std::cerr << "note: " << w << "\n";

    ParamReport pr = param_counts(net);
    std::size_t k = cfg.mode == "replacement" ? cfg.k : 2;
    ReductionBounds rb = pr.p_min > 0
                             ? reduction_bounds(net.depth(), k, pr.p_min, pr.p_max)
                             : ReductionBounds{};
    ComplexityReport cx = complexity_estimate(net.depth(), k);
    std::string text = format_param_report(pr, rb, cx);
    write_text(out_path(cfg.out_dir, "analysis.txt"), text);
    std::cout << text;
    return 0;
}

int cmd_probe(const std::string& config_path, int layer, const std::string& out_override) {
    RunConfig cfg = load_config_file(config_path);
    if (!out_override.empty()) cfg.out_dir = out_override;
    auto [train_data, test_data] = load_dataset<double>(cfg);
    Network net = prepare_network<double>(cfg, train_data.sample_shape(), train_data.class_count);
    train(net, train_data, test_data, train_config_from(cfg));

    ProbeConfig pc;
    pc.seed = cfg.seed;
    std::ostringstream csv;
    csv << "layer,probe_test_acc\n";
    std::size_t lo = layer >= 0 ? std::size_t(layer) : 1;
    std::size_t hi = layer >= 0 ? std::size_t(layer) : net.depth();
    for (std::size_t l = lo; l <= hi; ++l) {
        double acc = linear_probe(net, train_data, test_data, l, pc);
        csv << l << "," << format_float(acc) << "\n";
        std::cout << "layer " << l << ": probe accuracy " << format_float(acc) << "\n";
    }
    write_text(out_path(cfg.out_dir, "probe.csv"), csv.str());
    return 0;
}

int cmd_cka(const std::string& config_path, std::size_t batch, const std::string& out_override) {
    RunConfig cfg = load_config_file(config_path);
    if (!out_override.empty()) cfg.out_dir = out_override;
    auto [train_data, test_data] = load_dataset<double>(cfg);
    Network net = prepare_network<double>(cfg, train_data.sample_shape(), train_data.class_count);
    train(net, train_data, test_data, train_config_from(cfg));

    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < std::min(batch, test_data.size()); ++i) idx.push_back(i);
    auto [inputs, labels] = test_data.batch(idx);
    (void)labels;
    SimilarityMatrix m = cka_matrix(net, inputs);

    std::ostringstream csv;
    for (std::size_t i = 0; i < m.layers; ++i) {
        for (std::size_t j = 0; j < m.layers; ++j) {
            if (j) csv << ",";
            csv << format_float(m.at(i, j));
        }
        csv << "\n";
    }
    write_text(out_path(cfg.out_dir, "cka.csv"), csv.str());
    std::cout << "wrote " << m.layers << "x" << m.layers << " similarity matrix\n";
    return 0;
}

int cmd_gen_data(const std::string& kind, std::size_t n, int classes, double noise,
                 std::uint64_t seed, std::size_t size, std::string format,
                 const std::string& out) {
    SyntheticKind k = synthetic_kind_from(kind);
    if (format.empty()) format = (k == SyntheticKind::digits) ? "idx" : "csv";
    if (format == "idx") {
        if (k != SyntheticKind::digits)
            throw ConfigError("gen-data: idx output is only available for kind=digits");
        auto [pixels, labels] = render_digit_bytes(n, size, noise, seed);
        write_idx_images(out_path(out, "digits-images-idx3-ubyte"), pixels, n, size, size);
        write_idx_labels(out_path(out, "digits-labels-idx1-ubyte"), labels);
        std::cout << "wrote " << n << " " << size << "x" << size << " images to " << out << "\n";
    } else if (format == "csv") {
        auto ds = make_synthetic<double>(k, n, classes, noise, seed, "train", size);
        std::ostringstream csv;
        std::size_t stride = ds.inputs.size() / ds.size();
        for (std::size_t f = 0; f < stride; ++f) csv << "x" << f << ",";
        csv << "label\n";
        for (std::size_t i = 0; i < ds.size(); ++i) {
            for (std::size_t f = 0; f < stride; ++f)
                csv << format_float(ds.inputs[i * stride + f]) << ",";
            csv << ds.labels[i] << "\n";
        }
        write_text(out_path(out, kind + ".csv"), csv.str());
        std::cout << "wrote " << n << " samples to " << out << "/" << kind << ".csv\n";
    } else {
        throw ConfigError("gen-data: unknown format '" + format + "'");
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"replacement-learning training engine"};
    app.require_subcommand(1);

    std::string config_path, out_override;
    std::string e2e_path, repl_path;
    double tolerance = 1e-4, eps = 1e-5;
    std::size_t batch = 8, cka_batch = 64;
    int probe_layer = -1;
    std::string gen_kind = "spirals", gen_format, gen_out = "data";
    std::size_t gen_n = 1000, gen_size = 12;
    int gen_classes = 3;
    double gen_noise = 0.08;
    std::uint64_t gen_seed = 1;

    auto* train_cmd = app.add_subcommand("train", "train one configuration");
    train_cmd->add_option("--config", config_path, "config file")->required();
    train_cmd->add_option("--out", out_override, "override out_dir");

    auto* compare_cmd =
        app.add_subcommand("compare", "train an e2e/replacement pair and tabulate deltas");
    compare_cmd->add_option("--e2e", e2e_path, "end-to-end config")->required();
    compare_cmd->add_option("--repl", repl_path, "replacement config")->required();
    compare_cmd->add_option("--out", out_override, "output directory");

    auto* gradcheck_cmd =
        app.add_subcommand("gradcheck", "finite-difference check of every trainable quantity");
    gradcheck_cmd->add_option("--config", config_path, "config file")->required();
    gradcheck_cmd->add_option("--tolerance", tolerance, "max relative error");
    gradcheck_cmd->add_option("--eps", eps, "central-difference step");
    gradcheck_cmd->add_option("--batch", batch, "probe batch size");

    auto* analyze_cmd = app.add_subcommand("analyze", "parameter and complexity accounting");
    analyze_cmd->add_option("--config", config_path, "config file")->required();
    analyze_cmd->add_option("--out", out_override, "override out_dir");

    auto* probe_cmd = app.add_subcommand("probe", "train, then fit per-layer linear probes");
    probe_cmd->add_option("--config", config_path, "config file")->required();
    probe_cmd->add_option("--layer", probe_layer, "single layer index (default: all)");
    probe_cmd->add_option("--out", out_override, "override out_dir");

    auto* cka_cmd = app.add_subcommand("cka", "train, then write the layer-similarity matrix");
    cka_cmd->add_option("--config", config_path, "config file")->required();
    cka_cmd->add_option("--batch", cka_batch, "probe batch size");
    cka_cmd->add_option("--out", out_override, "override out_dir");

    auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic dataset to disk");
    gen_cmd->add_option("--kind", gen_kind, "blobs | spirals | digits");
    gen_cmd->add_option("--n", gen_n, "sample count");
    gen_cmd->add_option("--classes", gen_classes, "class count (blobs/spirals)");
    gen_cmd->add_option("--noise", gen_noise, "noise level");
    gen_cmd->add_option("--seed", gen_seed, "generator seed");
    gen_cmd->add_option("--size", gen_size, "image size (digits)");
    gen_cmd->add_option("--format", gen_format, "csv | idx (default by kind)");
    gen_cmd->add_option("--out", gen_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(config_path, out_override);
        if (compare_cmd->parsed()) return cmd_compare(e2e_path, repl_path, out_override);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(config_path, tolerance, eps, batch);
        if (analyze_cmd->parsed()) return cmd_analyze(config_path, out_override);
        if (probe_cmd->parsed()) return cmd_probe(config_path, probe_layer, out_override);
        if (cka_cmd->parsed()) return cmd_cka(config_path, cka_batch, out_override);
        if (gen_cmd->parsed())
            return cmd_gen_data(gen_kind, gen_n, gen_classes, gen_noise, gen_seed, gen_size,
                                gen_format, gen_out);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
