#include "replearn/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace replearn {
namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void fail(int line, const std::string& msg) {
    throw ConfigError("line " + std::to_string(line) + ": " + msg);
}

double parse_double(int line, const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        fail(line, "malformed number '" + v + "' for " + key);
    }
}

long long parse_int(int line, const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        long long i = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        fail(line, "malformed integer '" + v + "' for " + key);
    }
}

bool parse_bool(int line, const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    fail(line, "malformed boolean '" + v + "' for " + key + " (use true/false)");
}

void check_choice(int line, const std::string& key, const std::string& v,
                  std::initializer_list<const char*> allowed) {
    for (const char* a : allowed)
        if (v == a) return;
    std::string opts;
    for (const char* a : allowed) opts += std::string(opts.empty() ? "" : ", ") + a;
    fail(line, key + " must be one of {" + opts + "}, got '" + v + "'");
}

} // namespace

RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    bool saw_mode = false, saw_arch = false, saw_dataset = false;
    int mode_line = 0, k_line = 0;

    std::istringstream in(text);
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        std::string s = raw;
        if (auto hash = s.find('#'); hash != std::string::npos) s = s.substr(0, hash);
        s = trim(s);
        if (s.empty()) continue;
        auto eq = s.find('=');
        if (eq == std::string::npos) fail(line, "expected 'key = value', got '" + s + "'");
        std::string key = trim(s.substr(0, eq));
        std::string value = trim(s.substr(eq + 1));
        if (key.empty()) fail(line, "missing key before '='");
        if (value.empty()) fail(line, "missing value for '" + key + "'");

        if (key == "mode") {
            check_choice(line, key, value, {"e2e", "replacement"});
            cfg.mode = value;
            saw_mode = true;
            mode_line = line;
        } else if (key == "arch") {
            cfg.arch = value;
            saw_arch = true;
        } else if (key == "dataset") {
            check_choice(line, key, value, {"blobs", "spirals", "digits", "idx", "cifar10"});
            cfg.dataset = value;
            saw_dataset = true;
        } else if (key == "k") {
            long long v = parse_int(line, key, value);
            if (v < 1) fail(line, "k must be >= 1");
            cfg.k = std::size_t(v);
            k_line = line;
        } else if (key == "seed") {
            cfg.seed = std::uint64_t(parse_int(line, key, value));
        } else if (key == "epochs") {
            long long v = parse_int(line, key, value);
            if (v < 1) fail(line, "epochs must be >= 1");
            cfg.epochs = int(v);
        } else if (key == "batch_size") {
            long long v = parse_int(line, key, value);
            if (v < 1) fail(line, "batch_size must be >= 1");
            cfg.batch_size = std::size_t(v);
        } else if (key == "optimizer") {
            check_choice(line, key, value, {"adamw", "sgd"});
            cfg.optimizer = value;
        } else if (key == "lr") {
            double v = parse_double(line, key, value);
            if (v <= 0) fail(line, "lr must be positive");
            cfg.lr = v;
        } else if (key == "momentum") {
            cfg.momentum = parse_double(line, key, value);
        } else if (key == "beta1") {
            cfg.beta1 = parse_double(line, key, value);
        } else if (key == "beta2") {
            cfg.beta2 = parse_double(line, key, value);
        } else if (key == "weight_decay") {
            double v = parse_double(line, key, value);
            if (v < 0) fail(line, "weight_decay must be >= 0");
            cfg.weight_decay = v;
        } else if (key == "schedule") {
            check_choice(line, key, value, {"cosine", "constant"});
            cfg.schedule = value;
        } else if (key == "scalar_lr_mult") {
            double v = parse_double(line, key, value);
            if (v <= 0) fail(line, "scalar_lr_mult must be positive");
            cfg.scalar_lr_mult = v;
        } else if (key == "scalar_optimizer") {
            check_choice(line, key, value, {"same", "sgd"});
            cfg.scalar_optimizer = value;
        } else if (key == "a_init") {
            cfg.a_init = parse_double(line, key, value);
        } else if (key == "b_init") {
            cfg.b_init = parse_double(line, key, value);
        } else if (key == "dtype") {
            check_choice(line, key, value, {"f64", "f32"});
            cfg.dtype = value;
        } else if (key == "out_dir") {
            cfg.out_dir = value;
        } else if (key == "data_n") {
            long long v = parse_int(line, key, value);
            if (v < 1) fail(line, "data_n must be >= 1");
            cfg.data_n = std::size_t(v);
        } else if (key == "data_test_n") {
            long long v = parse_int(line, key, value);
            if (v < 1) fail(line, "data_test_n must be >= 1");
            cfg.data_test_n = std::size_t(v);
        } else if (key == "data_classes") {
            long long v = parse_int(line, key, value);
            if (v < 2) fail(line, "data_classes must be >= 2");
            cfg.data_classes = int(v);
        } else if (key == "data_noise") {
            double v = parse_double(line, key, value);
            if (v < 0) fail(line, "data_noise must be >= 0");
            cfg.data_noise = v;
        } else if (key == "data_image_size") {
            long long v = parse_int(line, key, value);
            if (v < 7) fail(line, "data_image_size must be >= 7");
            cfg.data_image_size = std::size_t(v);
        } else if (key == "data_images") {
            cfg.data_images = value;
        } else if (key == "data_labels") {
            cfg.data_labels = value;
        } else if (key == "data_test_images") {
            cfg.data_test_images = value;
        } else if (key == "data_test_labels") {
            cfg.data_test_labels = value;
        } else if (key == "data_files") {
            cfg.data_files = value;
        } else if (key == "data_test_files") {
            cfg.data_test_files = value;
        } else if (key == "train_limit") {
            cfg.train_limit = std::size_t(parse_int(line, key, value));
        } else if (key == "test_limit") {
            cfg.test_limit = std::size_t(parse_int(line, key, value));
        } else if (key == "balanced_subset") {
            cfg.balanced_subset = parse_bool(line, key, value);
        } else if (key == "conv_channels") {
            long long v = parse_int(line, key, value);
            if (v < 1) fail(line, "conv_channels must be >= 1");
            cfg.conv_channels = std::size_t(v);
        } else if (key == "vit_dim") {
            long long v = parse_int(line, key, value);
            if (v < 1) fail(line, "vit_dim must be >= 1");
            cfg.vit_dim = std::size_t(v);
        } else if (key == "vit_patch") {
            long long v = parse_int(line, key, value);
            if (v < 1) fail(line, "vit_patch must be >= 1");
            cfg.vit_patch = std::size_t(v);
        } else {
            fail(line, "unknown key '" + key + "'");
        }
    }

    if (!saw_mode) throw ConfigError("missing required key 'mode'");
    if (!saw_arch) throw ConfigError("missing required key 'arch'");
    if (!saw_dataset) throw ConfigError("missing required key 'dataset'");
    if (cfg.mode == "replacement" && cfg.k < 2) {
        int line_no = k_line ? k_line : mode_line;
        throw ConfigError("line " + std::to_string(line_no) +
                          ": k must be >= 2 in replacement mode; with k = 1 adjacent layers "
                          "would both be frozen and each would need the other's parameters "
                          "to compose its own");
    }
    if (cfg.dataset == "idx") {
        for (const auto* p :
             {&cfg.data_images, &cfg.data_labels, &cfg.data_test_images, &cfg.data_test_labels})
            if (p->empty())
                throw ConfigError(
                    "dataset=idx requires data_images, data_labels, data_test_images, "
                    "data_test_labels");
    }
    if (cfg.dataset == "cifar10" && (cfg.data_files.empty() || cfg.data_test_files.empty()))
        throw ConfigError("dataset=cifar10 requires data_files and data_test_files");
    return cfg;
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& c) {
    std::ostringstream os;
    char buf[64];
    auto num = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    os << "mode = " << c.mode << "\n";
    os << "arch = " << c.arch << "\n";
    os << "dataset = " << c.dataset << "\n";
    os << "k = " << c.k << "\n";
    os << "seed = " << c.seed << "\n";
    os << "epochs = " << c.epochs << "\n";
    os << "batch_size = " << c.batch_size << "\n";
    os << "optimizer = " << c.optimizer << "\n";
    os << "lr = " << num(c.lr) << "\n";
    os << "momentum = " << num(c.momentum) << "\n";
    os << "beta1 = " << num(c.beta1) << "\n";
    os << "beta2 = " << num(c.beta2) << "\n";
    os << "weight_decay = " << num(c.weight_decay) << "\n";
    os << "schedule = " << c.schedule << "\n";
    os << "scalar_lr_mult = " << num(c.scalar_lr_mult) << "\n";
    os << "scalar_optimizer = " << c.scalar_optimizer << "\n";
    os << "a_init = " << num(c.a_init) << "\n";
    os << "b_init = " << num(c.b_init) << "\n";
    os << "dtype = " << c.dtype << "\n";
    os << "out_dir = " << c.out_dir << "\n";
    os << "data_n = " << c.data_n << "\n";
    os << "data_test_n = " << c.data_test_n << "\n";
    os << "data_classes = " << c.data_classes << "\n";
    os << "data_noise = " << num(c.data_noise) << "\n";
    os << "data_image_size = " << c.data_image_size << "\n";
    if (!c.data_images.empty()) os << "data_images = " << c.data_images << "\n";
    if (!c.data_labels.empty()) os << "data_labels = " << c.data_labels << "\n";
    if (!c.data_test_images.empty()) os << "data_test_images = " << c.data_test_images << "\n";
    if (!c.data_test_labels.empty()) os << "data_test_labels = " << c.data_test_labels << "\n";
    if (!c.data_files.empty()) os << "data_files = " << c.data_files << "\n";
    if (!c.data_test_files.empty()) os << "data_test_files = " << c.data_test_files << "\n";
    os << "train_limit = " << c.train_limit << "\n";
    os << "test_limit = " << c.test_limit << "\n";
    os << "balanced_subset = " << (c.balanced_subset ? "true" : "false") << "\n";
    os << "conv_channels = " << c.conv_channels << "\n";
    os << "vit_dim = " << c.vit_dim << "\n";
    os << "vit_patch = " << c.vit_patch << "\n";
    return os.str();
}

bool comparable_pair(const RunConfig& e2e, const RunConfig& repl, std::string& why) {
    if (e2e.mode != "e2e") {
        why = "first config must be e2e";
        return false;
    }
    // The second config is normally replacement mode; a second e2e config is
    // the degenerate self-comparison and must come out with zero deltas.
    RunConfig a = e2e, b = repl;
    a.mode = b.mode = "";
    a.k = b.k = 0;
    a.out_dir = b.out_dir = "";
    if (!(a == b)) {
        why = "configs differ beyond mode/k/out_dir";
        return false;
    }
    return true;
}

std::vector<std::string> expand_arch(const RunConfig& cfg, int classes) {
    const std::string& a = cfg.arch;
    std::vector<std::string> items;
    auto starts_with = [&a](const char* p) { return a.rfind(p, 0) == 0; };

    if (starts_with("mlp-")) {
        std::size_t n = 0, w = 0;
        if (std::sscanf(a.c_str(), "mlp-%zux%zu", &n, &w) != 2 || n < 2 || w < 1)
            throw ConfigError("bad preset '" + a + "', expected mlp-<layers>x<width>");
        for (std::size_t i = 0; i + 1 < n; ++i)
            items.push_back("dense:" + std::to_string(w) + ":relu");
        items.push_back("dense:" + std::to_string(classes));
    } else if (starts_with("convnet-")) {
        std::size_t n = 0;
        if (std::sscanf(a.c_str(), "convnet-%zu", &n) != 1 || n < 1)
            throw ConfigError("bad preset '" + a + "', expected convnet-<blocks>");
        items.push_back("conv:" + std::to_string(cfg.conv_channels) + ":relu");
        for (std::size_t i = 0; i < n; ++i) items.push_back("resblock");
        items.push_back("gap");
        items.push_back("dense:" + std::to_string(classes));
    } else if (starts_with("tiny-vit-")) {
        std::size_t n = 0;
        if (std::sscanf(a.c_str(), "tiny-vit-%zu", &n) != 1 || n < 1)
            throw ConfigError("bad preset '" + a + "', expected tiny-vit-<blocks>");
        items.push_back("patchify:" + std::to_string(cfg.vit_patch));
        items.push_back("dense:" + std::to_string(cfg.vit_dim));
        for (std::size_t i = 0; i < n; ++i) items.push_back("vitblock");
        items.push_back("tokenpool");
        items.push_back("dense:" + std::to_string(classes));
    } else {
        std::string cur;
        for (char ch : a + " ") {
            if (ch == ' ' || ch == ',') {
                if (!cur.empty()) items.push_back(cur);
                cur.clear();
            } else {
                cur += ch;
            }
        }
        if (items.empty()) throw ConfigError("arch is empty");
    }
    return items;
}

TrainConfig train_config_from(const RunConfig& cfg) {
    TrainConfig t;
    t.epochs = cfg.epochs;
    t.batch_size = cfg.batch_size;
    t.seed = cfg.seed;
    t.optimizer.kind =
        cfg.optimizer == "adamw" ? OptimizerKind::adamw : OptimizerKind::sgd_momentum;
    t.optimizer.momentum = cfg.momentum;
    t.optimizer.beta1 = cfg.beta1;
    t.optimizer.beta2 = cfg.beta2;
    t.optimizer.weight_decay = cfg.weight_decay;
    t.optimizer.scalar_lr_mult = cfg.scalar_lr_mult;
    t.optimizer.scalar_rule = cfg.scalar_optimizer == "sgd" ? ScalarUpdateRule::plain_sgd
                                                            : ScalarUpdateRule::same_as_tensors;
    t.schedule.kind = cfg.schedule == "cosine" ? ScheduleKind::cosine : ScheduleKind::constant;
    t.schedule.initial_lr = cfg.lr;
    t.schedule.total_epochs = cfg.epochs;
    return t;
}

namespace detail {
ArchItem parse_arch_item(const std::string& token) {
    ArchItem item;
    std::string cur;
    bool first = true;
    for (char ch : token + ":") {
        if (ch == ':') {
            if (first) {
                item.name = cur;
                first = false;
            } else if (!cur.empty()) {
                item.args.push_back(cur);
            }
            cur.clear();
        } else {
            cur += ch;
        }
    }
    if (item.name.empty()) throw ConfigError("empty arch item");
    return item;
}
} // namespace detail

} // namespace replearn
