#include "replearn/gradcheck.hpp"

#include <cstdio>
#include <sstream>

namespace replearn {

std::string format_check_report(const CheckReport& report) {
    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "checked %zu trainable quantities, tolerance %.3g\n",
                  report.checked, report.tolerance);
    os << buf;
    os << "worst quantities by relative error:\n";
    std::snprintf(buf, sizeof(buf), "  %-24s %16s %16s %12s\n", "quantity", "analytic",
                  "numeric", "rel err");
    os << buf;
    for (const auto& r : report.records) {
        std::snprintf(buf, sizeof(buf), "  %-24s %16.8e %16.8e %12.3e\n", r.quantity.c_str(),
                      r.analytic, r.numeric, r.rel_err);
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "max relative error %.3e -> %s\n", report.max_rel_err,
                  report.pass ? "PASS" : "FAIL");
    os << buf;
    return os.str();
}

} // namespace replearn
