#include "replearn/analysis.hpp"

#include <cstdio>
#include <sstream>

namespace replearn {

ReductionBounds reduction_bounds(std::size_t layer_count, std::size_t interval,
                                 std::size_t p_min, std::size_t p_max) {
    if (layer_count < 1) throw std::invalid_argument("reduction_bounds: need at least one layer");
    if (p_min == 0 || p_min > p_max)
        throw std::invalid_argument("reduction_bounds: need 0 < P_min <= P_max");
    ReductionBounds b;
    b.frozen_count = frozen_set(layer_count, interval).size();
    b.exact_lower = (long long)(b.frozen_count) * ((long long)(p_min)-2);
    b.exact_upper = (long long)(b.frozen_count) * ((long long)(p_max)-2);
    double ratio = double(layer_count) / double(interval);
    b.asymptotic_lower = ratio * double(p_min) - 2.0;
    b.asymptotic_upper = ratio * double(p_max) - 2.0;
    return b;
}

ComplexityReport complexity_estimate(std::size_t layer_count, std::size_t interval) {
    if (layer_count < 2) throw std::invalid_argument("complexity_estimate: need L >= 2");
    if (interval < 1) throw std::invalid_argument("complexity_estimate: need k >= 1");
    const long long L = (long long)layer_count;
    const long long k = (long long)interval;
    ComplexityReport r;
    r.reduction_units = Rational(2 * (L - 1), k);
    r.total_units = Rational(3 * L) - r.reduction_units;
    r.bound_k1 = Rational(2 * L - 2);
    r.bound_k_l1 = Rational(2);
    return r;
}

std::string format_param_report(const ParamReport& report, const ReductionBounds& bounds,
                                const ComplexityReport& complexity) {
    std::ostringstream os;
    char buf[160];
    os << "layer  kind            params  freezable  frozen\n";
    for (const auto& lc : report.per_layer) {
        std::snprintf(buf, sizeof(buf), "%5zu  %-14s %7zu  %9zu  %s\n", lc.index,
                      lc.kind.c_str(), lc.params, lc.freezable, lc.frozen ? "yes" : "");
        os << buf;
    }
    os << "\n";
    std::snprintf(buf, sizeof(buf), "total parameters (end-to-end)      P  = %llu\n",
                  (unsigned long long)report.total);
    os << buf;
    std::snprintf(buf, sizeof(buf), "trainable under freeze plan        P' = %llu\n",
                  (unsigned long long)report.trainable);
    os << buf;
    std::snprintf(buf, sizeof(buf), "  (with a single +2 in total:       %llu)\n",
                  (unsigned long long)report.trainable_plus2_total);
    os << buf;
    std::snprintf(buf, sizeof(buf), "reduction                          %llu\n",
                  (unsigned long long)report.reduction);
    os << buf;
    std::snprintf(buf, sizeof(buf), "frozen layers                      %zu\n",
                  report.frozen_count);
    os << buf;
    std::snprintf(buf, sizeof(buf), "per-layer bounds                   P_min=%zu P_max=%zu\n",
                  report.p_min, report.p_max);
    os << buf;
    std::snprintf(buf, sizeof(buf),
                  "reduction bounds (exact)           [%lld, %lld] over %zu frozen layers\n",
                  bounds.exact_lower, bounds.exact_upper, bounds.frozen_count);
    os << buf;
    std::snprintf(buf, sizeof(buf), "reduction bounds (L/k form)        [%.6g, %.6g]\n",
                  bounds.asymptotic_lower, bounds.asymptotic_upper);
    os << buf;
    os << "\n";
    os << "complexity, forward-pass units:\n";
    os << "  total          " << complexity.total_units.str() << "\n";
    os << "  reduction      " << complexity.reduction_units.str() << "\n";
    os << "  bound at k=1   " << complexity.bound_k1.str() << "\n";
    os << "  bound at k=L-1 " << complexity.bound_k_l1.str() << "\n";
    return os.str();
}

} // namespace replearn
