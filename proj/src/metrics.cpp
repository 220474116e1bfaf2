#include "replearn/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace replearn {

std::string format_float(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
}

std::string metrics_csv(const RunRecord& record) {
    std::ostringstream os;
    os << "epoch,train_loss,train_acc,test_acc,lr,epoch_seconds,grad_writes\n";
    for (const auto& r : record.rows) {
        os << r.epoch << "," << format_float(r.train_loss) << "," << format_float(r.train_acc)
           << "," << format_float(r.test_acc) << "," << format_float(r.lr) << ","
           << format_float(r.epoch_seconds) << "," << r.grad_writes << "\n";
    }
    return os.str();
}

void write_metrics(const RunRecord& record, const std::string& path) {
    std::ofstream f(path, std::ios::binary); // LF endings everywhere
    if (!f) throw std::runtime_error("cannot write metrics to " + path);
    f << metrics_csv(record);
    if (!f) throw std::runtime_error("write failed for " + path);
}

std::string mask_timing_column(const std::string& csv_text) {
    std::istringstream in(csv_text);
    std::ostringstream out;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (header) {
            out << line << "\n";
            header = false;
            continue;
        }
        // field 5 (0-based) is epoch_seconds
        std::string rebuilt;
        int field = 0;
        for (char c : line) {
            if (c == ',') {
                ++field;
                rebuilt += c;
            } else if (field != 5) {
                rebuilt += c;
            } else if (rebuilt.empty() || rebuilt.back() != '-') {
                rebuilt += '-';
            }
        }
        out << rebuilt << "\n";
    }
    return out.str();
}

namespace {

double final_test_acc(const RunRecord& r) {
    return r.rows.empty() ? 0.0 : r.rows.back().test_acc;
}

double mean_epoch_seconds(const RunRecord& r) {
    if (r.rows.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& row : r.rows) acc += row.epoch_seconds;
    return acc / double(r.rows.size());
}

std::uint64_t writes_per_step(const RunRecord& r) {
    return r.rows.empty() ? 0 : r.rows.back().grad_writes;
}

std::string delta_str(double base, double other, bool more_is_better) {
    double d = other - base;
    if (d == 0.0) return "(=)";
    bool up = d > 0.0;
    const char* arrow = up ? "↑" : "↓";
    bool good = up == more_is_better;
    std::ostringstream os;
    os << "(" << arrow << " " << format_float(up ? d : -d) << (good ? "" : " worse") << ")";
    return os.str();
}

} // namespace

std::string compare_text(const CompareReport& rep) {
    std::ostringstream os;
    char buf[200];
    os << "metric                         " << rep.label_a << "            " << rep.label_b
       << "\n";
    std::snprintf(buf, sizeof(buf), "%-30s %-15s %-15s %s\n", "final test accuracy",
                  format_float(final_test_acc(rep.a)).c_str(),
                  format_float(final_test_acc(rep.b)).c_str(),
                  delta_str(final_test_acc(rep.a), final_test_acc(rep.b), true).c_str());
    os << buf;
    std::snprintf(buf, sizeof(buf), "%-30s %-15s %-15s %s\n", "best test accuracy",
                  format_float(rep.a.best_test_acc).c_str(),
                  format_float(rep.b.best_test_acc).c_str(),
                  delta_str(rep.a.best_test_acc, rep.b.best_test_acc, true).c_str());
    os << buf;
    std::snprintf(buf, sizeof(buf), "%-30s %-15llu %-15llu %s\n", "trainable parameters",
                  (unsigned long long)rep.a.trainable_params,
                  (unsigned long long)rep.b.trainable_params,
                  delta_str(double(rep.a.trainable_params), double(rep.b.trainable_params), false)
                      .c_str());
    os << buf;
    std::snprintf(buf, sizeof(buf), "%-30s %-15llu %-15llu %s\n", "grad writes per step",
                  (unsigned long long)writes_per_step(rep.a),
                  (unsigned long long)writes_per_step(rep.b),
                  delta_str(double(writes_per_step(rep.a)), double(writes_per_step(rep.b)), false)
                      .c_str());
    os << buf;
    std::snprintf(buf, sizeof(buf), "%-30s %-15s %-15s %s\n", "mean epoch seconds",
                  format_float(mean_epoch_seconds(rep.a)).c_str(),
                  format_float(mean_epoch_seconds(rep.b)).c_str(),
                  delta_str(mean_epoch_seconds(rep.a), mean_epoch_seconds(rep.b), false).c_str());
    os << buf;
    std::snprintf(buf, sizeof(buf), "%-30s %-15zu %-15zu\n", "frozen layers",
                  rep.a.frozen_count, rep.b.frozen_count);
    os << buf;
    if (rep.a.diverged || rep.b.diverged)
        os << "warning: at least one run diverged and stopped early\n";
    return os.str();
}

std::string compare_csv(const CompareReport& rep) {
    std::ostringstream os;
    os << "metric," << rep.label_a << "," << rep.label_b << ",delta\n";
    auto row = [&os](const std::string& name, double a, double b) {
        os << name << "," << format_float(a) << "," << format_float(b) << ","
           << format_float(b - a) << "\n";
    };
    row("final_test_acc", final_test_acc(rep.a), final_test_acc(rep.b));
    row("best_test_acc", rep.a.best_test_acc, rep.b.best_test_acc);
    row("trainable_params", double(rep.a.trainable_params), double(rep.b.trainable_params));
    row("grad_writes_per_step", double(writes_per_step(rep.a)), double(writes_per_step(rep.b)));
    row("mean_epoch_seconds", mean_epoch_seconds(rep.a), mean_epoch_seconds(rep.b));
    row("frozen_layers", double(rep.a.frozen_count), double(rep.b.frozen_count));
    return os.str();
}

} // namespace replearn
