#pragma once

// Experiment configuration: a line-oriented `key = value` format with `#`
// comments. Every field is validated before any compute; unknown keys are
// rejected with their line number. Architectures are either named presets
// ("mlp-9x64", "convnet-6", "tiny-vit-4") or an explicit item list.

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "replearn/data.hpp"
#include "replearn/replacement.hpp"
#include "replearn/training.hpp"

namespace replearn {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    std::string mode;    // "e2e" | "replacement"
    std::string arch;    // preset name or item list
    std::string dataset; // "blobs" | "spirals" | "digits" | "idx" | "cifar10"

    std::size_t k = 4;
    std::uint64_t seed = 1;
    int epochs = 50;
    std::size_t batch_size = 64;

    std::string optimizer = "adamw"; // "adamw" | "sgd"
    double lr = 0.01;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-4;
    std::string schedule = "cosine"; // "cosine" | "constant"
    double scalar_lr_mult = 1.0;
    std::string scalar_optimizer = "same"; // "same" | "sgd"
    double a_init = 0.5;
    double b_init = 0.5;
    std::string dtype = "f64"; // "f64" | "f32"

    std::string out_dir = "runs";

    // synthetic data
    std::size_t data_n = 1000;
    std::size_t data_test_n = 500;
    int data_classes = 3;
    double data_noise = 0.08;
    std::size_t data_image_size = 12;

    // file data
    std::string data_images, data_labels, data_test_images, data_test_labels;
    std::string data_files, data_test_files; // space-separated CIFAR batches
    std::size_t train_limit = 0;
    std::size_t test_limit = 0;
    bool balanced_subset = false;

    // architecture knobs used by presets
    std::size_t conv_channels = 8;
    std::size_t vit_dim = 32;
    std::size_t vit_patch = 4;

    bool operator==(const RunConfig&) const = default;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config_file(const std::string& path);
std::string serialize_config(const RunConfig& cfg);

// Everything but mode and k must match for a side-by-side comparison.
bool comparable_pair(const RunConfig& e2e, const RunConfig& repl, std::string& why);

// Preset or item list -> concrete item list ("dense:64:relu" etc.).
std::vector<std::string> expand_arch(const RunConfig& cfg, int classes);

TrainConfig train_config_from(const RunConfig& cfg);

namespace detail {
struct ArchItem {
    std::string name;
    std::vector<std::string> args;
};
ArchItem parse_arch_item(const std::string& token);
} // namespace detail

// Builds the layer stack, inferring every input width from the running
// shape. The final layer must produce `classes` outputs.
template <typename T>
NetworkT<T> build_network(const RunConfig& cfg, const Shape& sample_shape, int classes) {
    std::vector<std::string> items = expand_arch(cfg, classes);
    Shape shape = sample_shape;
    shape.insert(shape.begin(), 1); // placeholder batch dim

    std::vector<typename NetworkT<T>::LayerPtr> layers;
    for (const auto& token : items) {
        detail::ArchItem item = detail::parse_arch_item(token);
        std::shared_ptr<const LayerT<T>> layer;
        auto num = [&](std::size_t i) -> std::size_t {
            if (i >= item.args.size())
                throw ConfigError("arch item '" + token + "': missing numeric argument");
            unsigned long v = 0;
            try {
                std::size_t used = 0;
                v = std::stoul(item.args[i], &used);
                if (used != item.args[i].size()) throw std::invalid_argument(item.args[i]);
            } catch (const std::exception&) {
                throw ConfigError("arch item '" + token + "': bad numeric argument '" +
                                  item.args[i] + "'");
            }
            if (v == 0) throw ConfigError("arch item '" + token + "': zero-sized argument");
            return v;
        };
        auto flag = [&](const char* f) {
            for (std::size_t i = 1; i < item.args.size(); ++i)
                if (item.args[i] == f) return true;
            return false;
        };
        try {
            if (item.name == "dense") {
                layer = std::make_shared<DenseT<T>>(detail::trailing_features(shape), num(0),
                                                    flag("relu"), !flag("nobias"));
            } else if (item.name == "relu") {
                layer = std::make_shared<ReluT<T>>();
            } else if (item.name == "layernorm") {
                layer = std::make_shared<LayerNormT<T>>(shape.back());
            } else if (item.name == "conv") {
                if (shape.size() != 4)
                    throw ConfigError("arch item 'conv' needs [CxHxW] input, have " +
                                      shape_str(shape));
                layer = std::make_shared<Conv2dT<T>>(shape[1], num(0), flag("relu"));
            } else if (item.name == "resblock") {
                if (shape.size() != 4)
                    throw ConfigError("arch item 'resblock' needs [CxHxW] input, have " +
                                      shape_str(shape));
                layer = std::make_shared<ResidualConvBlockT<T>>(shape[1]);
            } else if (item.name == "attn") {
                if (shape.size() != 3)
                    throw ConfigError("arch item 'attn' needs token input, have " +
                                      shape_str(shape));
                layer = std::make_shared<SingleHeadAttentionT<T>>(shape[2]);
            } else if (item.name == "vitblock") {
                if (shape.size() != 3)
                    throw ConfigError("arch item 'vitblock' needs token input, have " +
                                      shape_str(shape));
                layer = std::make_shared<TransformerBlockT<T>>(shape[2]);
            } else if (item.name == "patchify") {
                layer = std::make_shared<PatchifyT<T>>(num(0));
            } else if (item.name == "gap") {
                layer = std::make_shared<GlobalAvgPoolT<T>>();
            } else if (item.name == "tokenpool") {
                layer = std::make_shared<TokenMeanPoolT<T>>();
            } else {
                throw ConfigError("unknown arch item '" + item.name + "'");
            }
            shape = layer->output_shape(shape);
        } catch (const ShapeError& e) {
            throw ConfigError("arch item '" + token + "': " + e.what());
        }
        layers.push_back(std::move(layer));
    }
    if (shape.size() != 2 || shape[1] != std::size_t(classes))
        throw ConfigError("arch must end with [batch x " + std::to_string(classes) +
                          "] logits, produces " + shape_str(shape));
    return NetworkT<T>(std::move(layers));
}

// Build + init + freeze according to the config.
template <typename T>
NetworkT<T> prepare_network(const RunConfig& cfg, const Shape& sample_shape, int classes) {
    NetworkT<T> net = build_network<T>(cfg, sample_shape, classes);
    net.init_params(cfg.seed);
    if (cfg.mode == "replacement")
        net.apply_freeze_plan(cfg.k, T(cfg.a_init), T(cfg.b_init));
    return net;
}

template <typename T>
std::pair<DatasetT<T>, DatasetT<T>> load_dataset(const RunConfig& cfg) {
    DatasetT<T> train, test;
    if (cfg.dataset == "idx") {
        train = load_idx<T>(cfg.data_images, cfg.data_labels, "train");
        test = load_idx<T>(cfg.data_test_images, cfg.data_test_labels, "test");
    } else if (cfg.dataset == "cifar10") {
        auto split_paths = [](const std::string& s) {
            std::vector<std::string> out;
            std::string cur;
            for (char c : s + " ") {
                if (c == ' ') {
                    if (!cur.empty()) out.push_back(cur);
                    cur.clear();
                } else {
                    cur += c;
                }
            }
            return out;
        };
        train = load_cifar10<T>(split_paths(cfg.data_files), "train");
        test = load_cifar10<T>(split_paths(cfg.data_test_files), "test");
    } else {
        SyntheticKind kind = synthetic_kind_from(cfg.dataset);
        int classes = kind == SyntheticKind::digits ? 10 : cfg.data_classes;
        train = make_synthetic<T>(kind, cfg.data_n, classes, cfg.data_noise, cfg.seed, "train",
                                  cfg.data_image_size);
        test = make_synthetic<T>(kind, cfg.data_test_n, classes, cfg.data_noise,
                                 cfg.seed + 1000003, "test", cfg.data_image_size);
    }
    if (cfg.train_limit > 0)
        train = cfg.balanced_subset ? train.balanced_head(cfg.train_limit, cfg.seed)
                                    : train.head(cfg.train_limit);
    if (cfg.test_limit > 0)
        test = cfg.balanced_subset ? test.balanced_head(cfg.test_limit, cfg.seed + 1)
                                   : test.head(cfg.test_limit);
    return {std::move(train), std::move(test)};
}

} // namespace replearn
