#pragma once

#include <cstdio>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "dualpath/lora.hpp"
#include "dualpath/metrics.hpp"

namespace dualpath {

struct ReportRow {
    std::string model;
    AggregateResult metrics;
    std::size_t guard_overhead = 0;
};

namespace detail {
inline std::string med_range(double median, double range) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.2f (%.2f)", median, range);
    return buf;
}
}  // namespace detail

// Paper-style column order: AUPRC, Precision, Recall, F1, Guard Overhead;
// median with the max-min range in parentheses.
inline std::string render_report_text(const std::vector<ReportRow>& rows) {
    std::ostringstream os;
    std::size_t model_width = 5;
    for (const ReportRow& r : rows) model_width = std::max(model_width, r.model.size());
    os << std::left << std::setw(static_cast<int>(model_width + 2)) << "Model" << std::setw(14) << "AUPRC"
       << std::setw(14) << "Precision" << std::setw(14) << "Recall" << std::setw(14) << "F1"
       << "Guard Overhead\n";
    for (const ReportRow& r : rows) {
        os << std::left << std::setw(static_cast<int>(model_width + 2)) << r.model << std::setw(14)
           << detail::med_range(r.metrics.median.auprc, r.metrics.range.auprc) << std::setw(14)
           << detail::med_range(r.metrics.median.precision, r.metrics.range.precision) << std::setw(14)
           << detail::med_range(r.metrics.median.recall, r.metrics.range.recall) << std::setw(14)
           << detail::med_range(r.metrics.median.f1, r.metrics.range.f1) << format_sci3(r.guard_overhead) << "\n";
    }
    return os.str();
}

inline std::string render_report_csv(const std::vector<ReportRow>& rows) {
    std::ostringstream os;
    os << "model,auprc_median,auprc_range,precision_median,precision_range,recall_median,recall_range,"
          "f1_median,f1_range,guard_overhead\n";
    auto g = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.6g", v);
        return std::string(buf);
    };
    for (const ReportRow& r : rows) {
        os << r.model << "," << g(r.metrics.median.auprc) << "," << g(r.metrics.range.auprc) << ","
           << g(r.metrics.median.precision) << "," << g(r.metrics.range.precision) << ","
           << g(r.metrics.median.recall) << "," << g(r.metrics.range.recall) << "," << g(r.metrics.median.f1) << ","
           << g(r.metrics.range.f1) << "," << r.guard_overhead << "\n";
    }
    return os.str();
}

}  // namespace dualpath
