#pragma once

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cmml/tensor.hpp"

namespace cmml {

// Mann-Whitney rank-statistic AUC with midranks for ties.
// Returns -1 when either class is empty (caller decides how to handle).
inline double binary_auc_rank(const std::vector<double>& scores, const std::vector<char>& is_pos) {
    size_t n = scores.size();
    long long np = 0;
    for (char p : is_pos) np += p ? 1 : 0;
    long long nn = static_cast<long long>(n) - np;
    if (np == 0 || nn == 0) return -1.0;
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[static_cast<size_t>(a)] < scores[static_cast<size_t>(b)];
    });
    std::vector<double> rank(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[static_cast<size_t>(order[j + 1])] ==
                                scores[static_cast<size_t>(order[i])])
            ++j;
        double mid = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (size_t k = i; k <= j; ++k) rank[static_cast<size_t>(order[k])] = mid;
        i = j + 1;
    }
    double rsum = 0.0;
    for (size_t k = 0; k < n; ++k)
        if (is_pos[k]) rsum += rank[k];
    double u = rsum - static_cast<double>(np) * (static_cast<double>(np) + 1.0) / 2.0;
    return u / (static_cast<double>(np) * static_cast<double>(nn));
}

struct MacroAuc {
    double auc = 0.0;
    std::vector<int> skipped_classes;  // absent from the evaluation set
};

// Macro one-vs-rest AUC over class probability columns. Classes without both
// positives and negatives are omitted from the mean.
inline MacroAuc macro_ovr_auc(const Tensor& probs, const std::vector<int>& labels) {
    CMML_CHECK(probs.ndim() == 2 && probs.dim(0) == static_cast<int>(labels.size()),
               "macro_ovr_auc: probs must be [N, C]");
    int N = probs.dim(0), C = probs.dim(1);
    MacroAuc out;
    double sum = 0.0;
    int used = 0;
    for (int c = 0; c < C; ++c) {
        std::vector<double> s(static_cast<size_t>(N));
        std::vector<char> pos(static_cast<size_t>(N));
        for (int i = 0; i < N; ++i) {
            s[static_cast<size_t>(i)] = probs.at2(i, c);
            pos[static_cast<size_t>(i)] = labels[static_cast<size_t>(i)] == c ? 1 : 0;
        }
        double a = binary_auc_rank(s, pos);
        if (a < 0.0) {
            out.skipped_classes.push_back(c);
            continue;
        }
        sum += a;
        ++used;
    }
    out.auc = used > 0 ? sum / used : 0.0;
    return out;
}

inline double accuracy(const Tensor& probs, const std::vector<int>& labels) {
    int N = probs.dim(0), C = probs.dim(1);
    int correct = 0;
    for (int i = 0; i < N; ++i) {
        int best = 0;
        for (int c = 1; c < C; ++c)
            if (probs.at2(i, c) > probs.at2(i, best)) best = c;
        if (best == labels[static_cast<size_t>(i)]) ++correct;
    }
    return N > 0 ? static_cast<double>(correct) / N : 0.0;
}

struct PatternMetrics {
    std::string pattern;
    double acc = 0.0;
    double auc = 0.0;
};

struct MetricReport {
    std::vector<PatternMetrics> rows;  // one per availability pattern
    double avg_acc = 0.0;
    double avg_auc = 0.0;
    std::vector<std::string> notes;  // e.g. skipped one-vs-rest classes

    void finalize() {
        avg_acc = 0.0;
        avg_auc = 0.0;
        for (const PatternMetrics& r : rows) {
            avg_acc += r.acc;
            avg_auc += r.auc;
        }
        if (!rows.empty()) {
            avg_acc /= static_cast<double>(rows.size());
            avg_auc /= static_cast<double>(rows.size());
        }
    }
};

inline std::string metrics_csv_string(const MetricReport& report) {
    std::ostringstream os;
    os.precision(17);
    os << "pattern,acc,auc\n";
    for (const PatternMetrics& r : report.rows)
        os << r.pattern << "," << r.acc << "," << r.auc << "\n";
    os << "AVG," << report.avg_acc << "," << report.avg_auc << "\n";
    return os.str();
}

inline void write_metrics_csv(const MetricReport& report, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write metrics csv: " + path);
    f << metrics_csv_string(report);
}

}  // namespace cmml
