// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mmnas {

// Positive class is label 1 (the screening-positive subject).
struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::int64_t total() const { return tp + fp + fn + tn; }
};

// All values in percent. A ratio with zero denominator is reported as 0 and
// its name recorded in `undefined`.
struct MetricValues {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
  double specificity = 0.0;
  std::vector<std::string> undefined;
};

struct RunMetrics {
  ConfusionCounts counts;
  MetricValues values;
};

struct AggregateMetrics {
  std::vector<RunMetrics> runs;
  MetricValues mean;
  MetricValues stddev;  // population (divide by n)
};

ConfusionCounts count_confusion(const std::vector<int>& predictions, const std::vector<int>& labels);
MetricValues metrics_from_counts(const ConfusionCounts& c);
RunMetrics evaluate_predictions(const std::vector<int>& predictions, const std::vector<int>& labels);
AggregateMetrics aggregate_runs(const std::vector<RunMetrics>& runs);

std::string metrics_to_json(const AggregateMetrics& agg);
std::string metrics_to_csv(const AggregateMetrics& agg);

}  // namespace mmnas
