#pragma once

#include <string>
#include <vector>

#include "bil/trainer.hpp"

namespace bil {

/// One emitted record: per (stage, epoch), with the stage's post-training
/// test metrics repeated on each of its rows.
struct MetricsRow {
  int stage = 0;
  int epoch = 0;
  double elbo = 0.0;
  double data_term = 0.0;
  double kl_term = 0.0;
  double test_accuracy = 0.0;
  double test_nll = 0.0;
};

enum class MetricsFormat { Csv, Json };

std::vector<MetricsRow> flatten_metrics(const std::vector<StageMetrics>& metrics);

/// CSV: header stage,epoch,elbo,data_term,kl_term,test_accuracy,test_nll.
/// JSON: array of objects with the same fields. Floats are written with 9
/// significant digits in both formats; files are written atomically.
void write_metrics(const std::vector<StageMetrics>& metrics, const std::string& path,
                   MetricsFormat format);
void write_metrics_rows(const std::vector<MetricsRow>& rows, const std::string& path,
                        MetricsFormat format);

std::vector<MetricsRow> read_metrics_csv(const std::string& path);
std::vector<MetricsRow> read_metrics_json(const std::string& path);

/// Writes arbitrary JSON text atomically (resolved-config sidecars).
void write_text_atomic(const std::string& path, const std::string& text);

}  // namespace bil
