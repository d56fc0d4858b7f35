#pragma once

#include "ferlite/checkpoint.hpp"
#include "ferlite/data.hpp"
#include "ferlite/fusion.hpp"
#include "ferlite/metrics.hpp"
#include "ferlite/optim.hpp"

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace ferlite {

struct TrainConfig {
  std::string dataset_root;
  long num_classes = 0;  // 0 = take the dataset's class count
  long batch_size = 128;
  double learning_rate = 1e-3;
  long epochs = 90;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::uint64_t seed = 42;

  std::string split = "holdout";  // "holdout" | "kfold"
  double train_fraction = 0.8;
  long folds = 10;
  long fold_index = 0;  // held-out fold for a single run
  bool subject_disjoint = false;
  double grid_val_fraction = 0.1;  // validation carve-out for grid search on hold-out

  bool freeze_backbones = false;
  std::string init_from;  // optional checkpoint with pretrained weights
  bool partial_load = false;
  std::string resume_from;  // optional checkpoint to continue training from

  AugmentPolicy augment;
  NormStats norm;
  bool cache_images = true;

  long threads = 0;  // 0 = machine default
  std::string out_dir;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (learning_rate <= 0) throw ConfigError("train: learning_rate must be > 0");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (split != "holdout" && split != "kfold")
      throw ConfigError("train: split must be 'holdout' or 'kfold'");
  }
};

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

struct EpochStats {
  long epoch = 0;
  double train_loss = 0;
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();
};

struct TrainRun {
  std::vector<EpochStats> history;
  double best_val_accuracy = std::numeric_limits<double>::quiet_NaN();
  long best_epoch = -1;
  std::string best_checkpoint_path, last_checkpoint_path, history_csv_path;
  std::shared_ptr<FusedModel<float>> model;
  long num_classes = 0;
};

// Loads the dataset and split named by the config, then trains.
TrainRun train(const TrainConfig& cfg);

// Trains on explicit index sets (cross-validation and grid search reuse).
TrainRun train_on(const TrainConfig& cfg, const DatasetIndex& index,
                  const std::vector<long>& train_idx, const std::vector<long>& val_idx);

std::string history_to_csv(const std::vector<EpochStats>& history);

// --- grid search -------------------------------------------------------------

struct GridSpec {
  // enumeration order: axes in listed order, last axis fastest
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;

  bool empty() const { return axes.empty(); }
  long cardinality() const {
    long n = 1;
    for (const auto& [k, vs] : axes) n *= static_cast<long>(vs.size());
    return n;
  }
};

TrainConfig apply_grid_assignment(TrainConfig cfg,
                                  const std::map<std::string, std::string>& assignment);

struct GridPointResult {
  long index = 0;
  std::map<std::string, std::string> assignment;
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();
  bool failed = false;
  std::string error;
};

struct GridSearchResult {
  std::vector<GridPointResult> points;
  long best_index = -1;  // ties: first in enumeration order
  TrainConfig best_config;
};

// `run_point` maps a fully resolved config to its validation accuracy; the
// default trains for real. Failures are recorded and the search continues.
GridSearchResult grid_search(
    const TrainConfig& base, const GridSpec& spec,
    const std::function<double(const TrainConfig&)>& run_point = {}, long jobs = 1);

std::string grid_results_to_csv(const GridSpec& spec, const GridSearchResult& res);

// --- cross-validation ---------------------------------------------------------

struct CrossValResult {
  std::vector<MetricsReport> fold_reports;
  std::vector<double> fold_accuracies;
  double mean_accuracy = 0;
  double std_accuracy = 0;
};

// k independent train+evaluate cycles; the held-out fold is both validation
// and test for its cycle. Artifacts land under cfg.out_dir/fold<k>.
CrossValResult run_cross_validation(const TrainConfig& cfg, long k);

}  // namespace ferlite
