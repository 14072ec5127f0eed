#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace drivepred::evaluation {

// Class indices used throughout: 0 = LCL, 1 = LCR, 2 = LK.
inline constexpr int kNumClasses = 3;
inline constexpr std::array<const char*, 3> kClassNames = {"LCL", "LCR", "LK"};

struct ConfusionMatrix {
    // counts[true_class][predicted_class]
    std::array<std::array<std::int64_t, 3>, 3> counts{};
    std::int64_t total() const;
};

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels);

// One-vs-rest metrics for a single class. A division by zero yields the value
// 0 together with the corresponding flag, never an exception.
struct ClassMetrics {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool precision_undefined = false;
    bool recall_undefined = false;
    bool f1_undefined = false;
};

std::array<ClassMetrics, 3> class_metrics(const ConfusionMatrix& cm);
double macro_f1(const std::array<ClassMetrics, 3>& m);
double micro_accuracy(const ConfusionMatrix& cm);

struct RocCurve {
    std::vector<double> thresholds;  // descending; +inf / -inf sentinels included
    std::vector<double> tpr;
    std::vector<double> fpr;
    double auc = 0.0;
};

// One-vs-rest sweep over the distinct scores of `positive_class`; tied scores
// share a threshold step. AUC by the trapezoid rule. Throws when labels
// contain only positives or only negatives.
RocCurve roc_auc(std::span<const std::array<double, 3>> scores,
                 std::span<const int> labels, int positive_class);

// Fitting-error histogram: E < 0.1, 0.1 <= E < 0.3, 0.3 <= E < 0.5, 0.5 <= E.
struct BucketReport {
    std::array<std::int64_t, 4> counts{};
    std::int64_t total = 0;
    std::array<double, 4> fractions() const;
};

BucketReport fitting_error_buckets(std::span<const double> errors);

nlohmann::json metrics_report(const ConfusionMatrix& cm,
                              const std::array<ClassMetrics, 3>& metrics,
                              const std::array<double, 3>& auc);
std::string metrics_table(const ConfusionMatrix& cm,
                          const std::array<ClassMetrics, 3>& metrics,
                          const std::array<double, 3>& auc);

}  // namespace drivepred::evaluation
