#include "drivepred/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace drivepred::evaluation {

std::int64_t ConfusionMatrix::total() const {
    std::int64_t n = 0;
    for (const auto& row : counts) {
        for (auto c : row) n += c;
    }
    return n;
}

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels) {
    if (preds.size() != labels.size() || preds.empty()) {
        throw std::invalid_argument("confusion: length mismatch or empty");
    }
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= kNumClasses || preds[i] < 0 ||
            preds[i] >= kNumClasses) {
            throw std::invalid_argument("confusion: class index out of range");
        }
        cm.counts[static_cast<std::size_t>(labels[i])]
                 [static_cast<std::size_t>(preds[i])] += 1;
    }
    return cm;
}

std::array<ClassMetrics, 3> class_metrics(const ConfusionMatrix& cm) {
    const double total = static_cast<double>(cm.total());
    std::array<ClassMetrics, 3> out;
    for (std::size_t k = 0; k < 3; ++k) {
        std::int64_t tp = cm.counts[k][k];
        std::int64_t fp = 0, fn = 0;
        for (std::size_t j = 0; j < 3; ++j) {
            if (j == k) continue;
            fp += cm.counts[j][k];
            fn += cm.counts[k][j];
        }
        const std::int64_t tn = cm.total() - tp - fp - fn;
        ClassMetrics& m = out[k];
        m.accuracy = static_cast<double>(tp + tn) / total;
        if (tp + fp > 0) {
            m.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        } else {
            m.precision_undefined = true;
        }
        if (tp + fn > 0) {
            m.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
        } else {
            m.recall_undefined = true;
        }
        if (m.precision + m.recall > 0.0) {
            m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
        } else {
            m.f1_undefined = true;
        }
    }
    return out;
}

double macro_f1(const std::array<ClassMetrics, 3>& m) {
    return (m[0].f1 + m[1].f1 + m[2].f1) / 3.0;
}

double micro_accuracy(const ConfusionMatrix& cm) {
    std::int64_t diag = 0;
    for (std::size_t k = 0; k < 3; ++k) diag += cm.counts[k][k];
    return static_cast<double>(diag) / static_cast<double>(cm.total());
}

RocCurve roc_auc(std::span<const std::array<double, 3>> scores,
                 std::span<const int> labels, int positive_class) {
    if (scores.size() != labels.size() || scores.empty()) {
        throw std::invalid_argument("roc_auc: length mismatch or empty");
    }
    std::int64_t n_pos = 0, n_neg = 0;
    std::vector<std::pair<double, bool>> pts;
    pts.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool is_pos = labels[i] == positive_class;
        pts.emplace_back(scores[i][static_cast<std::size_t>(positive_class)], is_pos);
        (is_pos ? n_pos : n_neg) += 1;
    }
    if (n_pos == 0 || n_neg == 0) {
        throw std::invalid_argument("roc_auc: need both classes present");
    }
    std::sort(pts.begin(), pts.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });

    RocCurve curve;
    const double inf = std::numeric_limits<double>::infinity();
    curve.thresholds.push_back(inf);
    curve.tpr.push_back(0.0);
    curve.fpr.push_back(0.0);
    std::int64_t tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < pts.size()) {
        const double s = pts[i].first;
        while (i < pts.size() && pts[i].first == s) {
            (pts[i].second ? tp : fp) += 1;
            ++i;
        }
        curve.thresholds.push_back(s);
        curve.tpr.push_back(static_cast<double>(tp) / static_cast<double>(n_pos));
        curve.fpr.push_back(static_cast<double>(fp) / static_cast<double>(n_neg));
    }
    curve.thresholds.push_back(-inf);
    curve.tpr.push_back(1.0);
    curve.fpr.push_back(1.0);

    double auc = 0.0;
    for (std::size_t k = 0; k + 1 < curve.fpr.size(); ++k) {
        auc += (curve.fpr[k + 1] - curve.fpr[k]) *
               (curve.tpr[k + 1] + curve.tpr[k]) / 2.0;
    }
    curve.auc = auc;
    return curve;
}

std::array<double, 4> BucketReport::fractions() const {
    std::array<double, 4> out{};
    if (total == 0) return out;
    for (std::size_t i = 0; i < 4; ++i) {
        out[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
    }
    return out;
}

BucketReport fitting_error_buckets(std::span<const double> errors) {
    BucketReport rep;
    for (double e : errors) {
        if (!(e >= 0.0)) {
            throw std::invalid_argument("fitting_error_buckets: negative error");
        }
        std::size_t b = 3;
        if (e < 0.1) {
            b = 0;
        } else if (e < 0.3) {
            b = 1;
        } else if (e < 0.5) {
            b = 2;
        }
        rep.counts[b] += 1;
        rep.total += 1;
    }
    return rep;
}

nlohmann::json metrics_report(const ConfusionMatrix& cm,
                              const std::array<ClassMetrics, 3>& metrics,
                              const std::array<double, 3>& auc) {
    nlohmann::json j;
    j["confusion"] = cm.counts;
    j["n_samples"] = cm.total();
    j["micro_accuracy"] = micro_accuracy(cm);
    j["macro_f1"] = macro_f1(metrics);
    for (std::size_t k = 0; k < 3; ++k) {
        nlohmann::json c;
        c["accuracy"] = metrics[k].accuracy;
        c["precision"] = metrics[k].precision;
        c["recall"] = metrics[k].recall;
        c["f1"] = metrics[k].f1;
        c["auc"] = auc[k];
        c["precision_undefined"] = metrics[k].precision_undefined;
        c["recall_undefined"] = metrics[k].recall_undefined;
        c["f1_undefined"] = metrics[k].f1_undefined;
        j["per_class"][kClassNames[k]] = c;
    }
    return j;
}

std::string metrics_table(const ConfusionMatrix& cm,
                          const std::array<ClassMetrics, 3>& metrics,
                          const std::array<double, 3>& auc) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "confusion (rows = true, cols = predicted)\n";
    os << std::setw(8) << "" << std::setw(8) << "LCL" << std::setw(8) << "LCR"
       << std::setw(8) << "LK" << "\n";
    for (std::size_t k = 0; k < 3; ++k) {
        os << std::setw(8) << kClassNames[k];
        for (std::size_t j = 0; j < 3; ++j) os << std::setw(8) << cm.counts[k][j];
        os << "\n";
    }
    os << "\n"
       << std::setw(8) << "class" << std::setw(10) << "accuracy" << std::setw(10)
       << "precision" << std::setw(10) << "recall" << std::setw(10) << "f1"
       << std::setw(10) << "auc" << "\n";
    for (std::size_t k = 0; k < 3; ++k) {
        os << std::setw(8) << kClassNames[k] << std::setw(10)
           << metrics[k].accuracy << std::setw(10) << metrics[k].precision
           << std::setw(10) << metrics[k].recall << std::setw(10) << metrics[k].f1
           << std::setw(10) << auc[k] << "\n";
    }
    os << "\nmicro accuracy " << micro_accuracy(cm) << "  macro F1 "
       << macro_f1(metrics) << "\n";
    return os.str();
}

}  // namespace drivepred::evaluation
