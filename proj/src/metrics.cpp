// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#include "mmnas/metrics.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace mmnas {

ConfusionCounts count_confusion(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("prediction and label counts differ");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i], p = predictions[i];
    if (y != 0 && y != 1) throw std::invalid_argument("labels must be binary");
    if (p != 0 && p != 1) throw std::invalid_argument("predictions must be binary");
    if (y == 1 && p == 1) ++c.tp;
    else if (y == 0 && p == 1) ++c.fp;
    else if (y == 1 && p == 0) ++c.fn;
    else ++c.tn;
  }
  return c;
}

MetricValues metrics_from_counts(const ConfusionCounts& c) {
  MetricValues m;
  auto ratio = [&m](std::int64_t num, std::int64_t den, const char* name) {
    if (den == 0) {
      m.undefined.push_back(name);
      return 0.0;
    }
    return 100.0 * static_cast<double>(num) / static_cast<double>(den);
  };
  m.precision = ratio(c.tp, c.tp + c.fp, "precision");
  m.recall = ratio(c.tp, c.tp + c.fn, "recall");
  m.accuracy = ratio(c.tp + c.tn, c.total(), "accuracy");
  m.specificity = ratio(c.tn, c.tn + c.fp, "specificity");
  const double pr = m.precision + m.recall;
  if (pr == 0.0) {
    m.undefined.push_back("f1");
    m.f1 = 0.0;
  } else {
    m.f1 = 2.0 * m.precision * m.recall / pr;
  }
  return m;
}

RunMetrics evaluate_predictions(const std::vector<int>& predictions, const std::vector<int>& labels) {
  RunMetrics r;
  r.counts = count_confusion(predictions, labels);
  r.values = metrics_from_counts(r.counts);
  return r;
}

AggregateMetrics aggregate_runs(const std::vector<RunMetrics>& runs) {
  if (runs.empty()) throw std::invalid_argument("no runs to aggregate");
  AggregateMetrics agg;
  agg.runs = runs;
  const double n = static_cast<double>(runs.size());

  auto collect = [&](auto getter) {
    double mean = 0.0;
    for (const auto& r : runs) mean += getter(r.values);
    mean /= n;
    double var = 0.0;
    for (const auto& r : runs) {
      const double d = getter(r.values) - mean;
      var += d * d;
    }
    return std::pair<double, double>(mean, std::sqrt(var / n));
  };

  auto [pm, ps] = collect([](const MetricValues& v) { return v.precision; });
  auto [rm, rs] = collect([](const MetricValues& v) { return v.recall; });
  auto [fm, fs] = collect([](const MetricValues& v) { return v.f1; });
  auto [am, as] = collect([](const MetricValues& v) { return v.accuracy; });
  auto [sm, ss] = collect([](const MetricValues& v) { return v.specificity; });
  agg.mean.precision = pm;
  agg.mean.recall = rm;
  agg.mean.f1 = fm;
  agg.mean.accuracy = am;
  agg.mean.specificity = sm;
  agg.stddev.precision = ps;
  agg.stddev.recall = rs;
  agg.stddev.f1 = fs;
  agg.stddev.accuracy = as;
  agg.stddev.specificity = ss;
  return agg;
}

namespace {

nlohmann::json values_to_json(const MetricValues& v) {
  nlohmann::json j;
  j["precision"] = v.precision;
  j["recall"] = v.recall;
  j["f1"] = v.f1;
  j["accuracy"] = v.accuracy;
  j["specificity"] = v.specificity;
  if (!v.undefined.empty()) j["undefined"] = v.undefined;
  return j;
}

}  // namespace

std::string metrics_to_json(const AggregateMetrics& agg) {
  nlohmann::json j;
  j["precision"] = {{"mean", agg.mean.precision}, {"std", agg.stddev.precision}};
  j["recall"] = {{"mean", agg.mean.recall}, {"std", agg.stddev.recall}};
  j["f1"] = {{"mean", agg.mean.f1}, {"std", agg.stddev.f1}};
  j["accuracy"] = {{"mean", agg.mean.accuracy}, {"std", agg.stddev.accuracy}};
  j["specificity"] = {{"mean", agg.mean.specificity}, {"std", agg.stddev.specificity}};
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : agg.runs) {
    nlohmann::json jr = values_to_json(r.values);
    jr["confusion"] = {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"fn", r.counts.fn}, {"tn", r.counts.tn}};
    runs.push_back(jr);
  }
  j["runs"] = runs;
  return j.dump(2) + "\n";
}

std::string metrics_to_csv(const AggregateMetrics& agg) {
  std::ostringstream os;
  os << "run,precision,recall,f1,accuracy,specificity,tp,fp,fn,tn\n";
  for (std::size_t i = 0; i < agg.runs.size(); ++i) {
    const auto& r = agg.runs[i];
    os << i << ',' << r.values.precision << ',' << r.values.recall << ',' << r.values.f1 << ','
       << r.values.accuracy << ',' << r.values.specificity << ',' << r.counts.tp << ',' << r.counts.fp
       << ',' << r.counts.fn << ',' << r.counts.tn << '\n';
  }
  os << "mean," << agg.mean.precision << ',' << agg.mean.recall << ',' << agg.mean.f1 << ','
     << agg.mean.accuracy << ',' << agg.mean.specificity << ",,,,\n";
  os << "std," << agg.stddev.precision << ',' << agg.stddev.recall << ',' << agg.stddev.f1 << ','
     << agg.stddev.accuracy << ',' << agg.stddev.specificity << ",,,,\n";
  return os.str();
}

}  // namespace mmnas
