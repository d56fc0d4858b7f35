#pragma once

#include "ferlite/data.hpp"
#include "ferlite/fusion.hpp"
#include "ferlite/layers.hpp"

#include <string>
#include <vector>

namespace ferlite {

// Confusion-matrix metrics. Rows are true classes, columns predictions.
// Averaging is macro (unweighted over classes); undefined per-class values
// fall back to 0 so aggregates stay total.
struct MetricsReport {
  long num_classes = 0;
  long n_samples = 0;
  std::vector<long> confusion;  // K*K row-major
  double accuracy = 0;
  std::vector<double> precision, recall, f1;
  double macro_precision = 0, macro_recall = 0, macro_f1 = 0;

  static MetricsReport from_predictions(const std::vector<long>& labels,
                                        const std::vector<long>& preds, long num_classes);

  long at(long truth, long pred) const { return confusion[truth * num_classes + pred]; }
  // Figure-style row-normalized matrix; rows with no samples stay zero.
  std::vector<double> row_normalized() const;

  bool operator==(const MetricsReport&) const = default;
};

std::string metrics_to_json(const MetricsReport& r);
MetricsReport metrics_from_json(const std::string& json_text);
std::string confusion_to_csv(const MetricsReport& r);

struct LatencyStats {
  long warmup_runs = 0;
  long measured_runs = 0;
  long batch_size = 1;
  double mean_ms = 0, std_ms = 0, min_ms = 0, max_ms = 0;
  std::vector<double> per_run_ms;
  std::string host;
  long threads = 1;
};

std::string latency_to_json(const LatencyStats& s);

// Argmax predictions over a sample set, eval mode, batched.
std::vector<long> predict(Module<float>& model, const DatasetIndex& index,
                          const std::vector<long>& sample_indices, const NormStats& norm,
                          long batch_size = 32);

MetricsReport evaluate(Module<float>& model, const DatasetIndex& index,
                       const std::vector<long>& sample_indices, long num_classes,
                       const NormStats& norm, long batch_size = 32);

// Wall-clock per-forward timing in eval mode with no tape. Warmup runs are
// excluded from the statistics.
LatencyStats profile_latency(Module<float>& model, const Shape& input_shape, long warmup,
                             long runs);

// Writes report.json (+ confusion.csv) and latency.json when given.
void emit_report(const MetricsReport& report, const LatencyStats* latency, long param_count,
                 const std::string& out_dir);

}  // namespace ferlite
