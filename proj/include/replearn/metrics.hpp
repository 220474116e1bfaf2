#pragma once

// Run records and their CSV/text persistence. Floats are printed with nine
// significant digits so identical runs diff cleanly; the wall-time column is
// the only one expected to vary between reruns.

#include <cstdint>
#include <string>
#include <vector>

namespace replearn {

struct EpochRow {
    int epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double test_acc = 0.0;
    double lr = 0.0;
    double epoch_seconds = 0.0;
    std::uint64_t grad_writes = 0; // gradient elements written per step
};

struct RunRecord {
    std::vector<EpochRow> rows;
    double best_test_acc = 0.0;
    std::uint64_t total_params = 0;     // end-to-end trainable count
    std::uint64_t trainable_params = 0; // actual trainable count this mode
    std::size_t frozen_count = 0;
    bool diverged = false;
    int diverged_epoch = -1;
};

std::string format_float(double v); // %.9g

// header: epoch,train_loss,train_acc,test_acc,lr,epoch_seconds,grad_writes
std::string metrics_csv(const RunRecord& record);
void write_metrics(const RunRecord& record, const std::string& path);

// Replaces the epoch_seconds field of every row with "-" so two runs of the
// same experiment can be compared byte for byte.
std::string mask_timing_column(const std::string& csv_text);

struct CompareReport {
    std::string label_a; // baseline column (end-to-end)
    std::string label_b; // replacement column
    RunRecord a;
    RunRecord b;
};

std::string compare_text(const CompareReport& report);
std::string compare_csv(const CompareReport& report);

} // namespace replearn
