#include "ferlite/train.hpp"

#include "ferlite/parallel.hpp"
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;

namespace ferlite {

namespace {

constexpr std::uint64_t kShuffleTag = 0x53485546;
constexpr std::uint64_t kAugmentTag = 0x41554731;
constexpr std::uint64_t kDropoutTag = 0x44524F50;

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << content;
}

std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace

std::string train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["dataset_root"] = c.dataset_root;
  j["num_classes"] = c.num_classes;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["epochs"] = c.epochs;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["seed"] = c.seed;
  j["split"] = c.split;
  j["train_fraction"] = c.train_fraction;
  j["folds"] = c.folds;
  j["fold_index"] = c.fold_index;
  j["subject_disjoint"] = c.subject_disjoint;
  j["grid_val_fraction"] = c.grid_val_fraction;
  j["freeze_backbones"] = c.freeze_backbones;
  j["init_from"] = c.init_from;
  j["partial_load"] = c.partial_load;
  j["resume_from"] = c.resume_from;
  j["augment"] = {{"enabled", c.augment.enabled},
                  {"horizontal_flip", c.augment.horizontal_flip},
                  {"rotation", c.augment.rotation},
                  {"color_jitter", c.augment.color_jitter},
                  {"affine", c.augment.affine},
                  {"gaussian_blur", c.augment.gaussian_blur},
                  {"max_rotation_deg", c.augment.max_rotation_deg},
                  {"jitter", c.augment.jitter},
                  {"max_translate", c.augment.max_translate},
                  {"scale_lo", c.augment.scale_lo},
                  {"scale_hi", c.augment.scale_hi},
                  {"blur_sigma_lo", c.augment.blur_sigma_lo},
                  {"blur_sigma_hi", c.augment.blur_sigma_hi}};
  j["norm_mean"] = c.norm.mean;
  j["norm_std"] = c.norm.stddev;
  j["cache_images"] = c.cache_images;
  j["threads"] = c.threads;
  j["out_dir"] = c.out_dir;
  return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  TrainConfig c;
  c.dataset_root = j.value("dataset_root", c.dataset_root);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.seed = j.value("seed", c.seed);
  c.split = j.value("split", c.split);
  c.train_fraction = j.value("train_fraction", c.train_fraction);
  c.folds = j.value("folds", c.folds);
  c.fold_index = j.value("fold_index", c.fold_index);
  c.subject_disjoint = j.value("subject_disjoint", c.subject_disjoint);
  c.grid_val_fraction = j.value("grid_val_fraction", c.grid_val_fraction);
  c.freeze_backbones = j.value("freeze_backbones", c.freeze_backbones);
  c.init_from = j.value("init_from", c.init_from);
  c.partial_load = j.value("partial_load", c.partial_load);
  c.resume_from = j.value("resume_from", c.resume_from);
  if (j.contains("augment")) {
    const auto& a = j["augment"];
    c.augment.enabled = a.value("enabled", c.augment.enabled);
    c.augment.horizontal_flip = a.value("horizontal_flip", c.augment.horizontal_flip);
    c.augment.rotation = a.value("rotation", c.augment.rotation);
    c.augment.color_jitter = a.value("color_jitter", c.augment.color_jitter);
    c.augment.affine = a.value("affine", c.augment.affine);
    c.augment.gaussian_blur = a.value("gaussian_blur", c.augment.gaussian_blur);
    c.augment.max_rotation_deg = a.value("max_rotation_deg", c.augment.max_rotation_deg);
    c.augment.jitter = a.value("jitter", c.augment.jitter);
    c.augment.max_translate = a.value("max_translate", c.augment.max_translate);
    c.augment.scale_lo = a.value("scale_lo", c.augment.scale_lo);
    c.augment.scale_hi = a.value("scale_hi", c.augment.scale_hi);
    c.augment.blur_sigma_lo = a.value("blur_sigma_lo", c.augment.blur_sigma_lo);
    c.augment.blur_sigma_hi = a.value("blur_sigma_hi", c.augment.blur_sigma_hi);
  }
  if (j.contains("norm_mean")) c.norm.mean = j["norm_mean"].get<std::vector<float>>();
  if (j.contains("norm_std")) c.norm.stddev = j["norm_std"].get<std::vector<float>>();
  c.cache_images = j.value("cache_images", c.cache_images);
  c.threads = j.value("threads", c.threads);
  c.out_dir = j.value("out_dir", c.out_dir);
  return c;
}

std::string history_to_csv(const std::vector<EpochStats>& history) {
  std::string out = "epoch,train_loss,val_accuracy\n";
  for (const auto& e : history)
    out += std::to_string(e.epoch) + "," + fmt_double(e.train_loss) + "," +
           fmt_double(e.val_accuracy) + "\n";
  return out;
}

namespace {

class ImageCache {
 public:
  ImageCache(const DatasetIndex& index, bool keep) : index_(index), keep_(keep) {
    if (keep_) cache_.resize(index.samples.size());
  }

  Tensor<float> get(long i) {
    if (keep_ && cache_[static_cast<std::size_t>(i)].defined())
      return cache_[static_cast<std::size_t>(i)];
    Tensor<float> img = load_sample_image(index_.samples[static_cast<std::size_t>(i)]);
    if (keep_) cache_[static_cast<std::size_t>(i)] = img;
    return img;
  }

 private:
  const DatasetIndex& index_;
  bool keep_;
  std::vector<Tensor<float>> cache_;
};

double eval_accuracy(FusedModel<float>& model, const DatasetIndex& index,
                     const std::vector<long>& idx, long num_classes, const NormStats& norm,
                     long batch) {
  if (idx.empty()) return std::numeric_limits<double>::quiet_NaN();
  return evaluate(model, index, idx, num_classes, norm, batch).accuracy;
}

}  // namespace

TrainRun train_on(const TrainConfig& cfg, const DatasetIndex& index,
                  const std::vector<long>& train_idx, const std::vector<long>& val_idx) {
  cfg.validate();
  if (train_idx.empty()) throw ConfigError("train: empty train split");
  if (cfg.threads > 0) set_num_threads(cfg.threads);

  const long num_classes = cfg.num_classes > 0 ? cfg.num_classes : index.num_classes();
  for (long i : train_idx)
    if (index.samples[static_cast<std::size_t>(i)].label >= num_classes)
      throw ConfigError("train: sample label exceeds num_classes");

  FusedModelConfig mc;
  mc.num_classes = num_classes;
  auto model = std::make_shared<FusedModel<float>>(mc, cfg.seed);

  long start_epoch = 0;
  std::optional<Checkpoint> resume;
  if (!cfg.resume_from.empty()) {
    resume = load_checkpoint(cfg.resume_from);
    resume->apply_to(*model, /*partial=*/false);
    start_epoch = resume->epoch;
  } else if (!cfg.init_from.empty()) {
    Checkpoint init = load_checkpoint(cfg.init_from);
    init.apply_to(*model, cfg.partial_load);
  }
  if (cfg.freeze_backbones) model->freeze_backbones();

  Adam<float> adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
  for (const auto& p : named_params(*model))
    if (p.trainable()) adam.attach(p.name, p.tensor);
  if (resume && resume->optimizer) resume->apply_optimizer(adam);

  ImageCache cache(index, cfg.cache_images);
  const bool has_out = !cfg.out_dir.empty();
  if (has_out) fs::create_directories(cfg.out_dir);
  const std::string cfg_json = train_config_to_json(cfg);

  TrainRun run;
  run.model = model;
  run.num_classes = num_classes;
  if (resume) run.history.clear();

  auto flush_history = [&]() {
    if (!has_out) return;
    run.history_csv_path = (fs::path(cfg.out_dir) / "history.csv").string();
    write_file(run.history_csv_path, history_to_csv(run.history));
  };

  auto save_model = [&](const char* name, long epoch, double val_acc) {
    if (!has_out) return std::string{};
    const std::string path = (fs::path(cfg.out_dir) / name).string();
    save_checkpoint(Checkpoint::from_model(*model, cfg_json, epoch, cfg.seed, val_acc, &adam),
                    path);
    return path;
  };

  const long n_train = static_cast<long>(train_idx.size());
  for (long epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<long> order = train_idx;
    Rng shuffle_rng = Rng::derive(cfg.seed, {kShuffleTag, static_cast<std::uint64_t>(epoch)});
    shuffle_rng.shuffle(order);

    double loss_sum = 0;
    long step = 0;
    for (long b = 0; b < n_train; b += cfg.batch_size, ++step) {
      const long bn = std::min(cfg.batch_size, n_train - b);
      Tensor<float> batch = Tensor<float>::zeros({bn, 3, 224, 224});
      std::vector<long> labels(static_cast<std::size_t>(bn));
      for (long i = 0; i < bn; ++i) {
        const long si = order[static_cast<std::size_t>(b + i)];
        Tensor<float> img = cache.get(si);
        if (cfg.augment.enabled) {
          Rng aug_rng = Rng::derive(cfg.seed, {kAugmentTag, static_cast<std::uint64_t>(si),
                                               static_cast<std::uint64_t>(epoch)});
          img = augment(img, cfg.augment, aug_rng);
        }
        img = normalize(img, cfg.norm);
        std::copy(img.value().data(), img.value().data() + img.size(),
                  batch.value().data() + i * img.size());
        labels[static_cast<std::size_t>(i)] =
            index.samples[static_cast<std::size_t>(si)].label;
      }
      Rng drop_rng = Rng::derive(cfg.seed, {kDropoutTag, static_cast<std::uint64_t>(epoch),
                                            static_cast<std::uint64_t>(step)});
      Ctx<float> ctx{Mode::Train, &drop_rng};
      Tensor<float> logits = model->forward(batch, ctx);
      Tensor<float> loss = ops::softmax_cross_entropy(logits, labels);
      const double loss_v = loss.item();
      if (!std::isfinite(loss_v)) {
        flush_history();
        throw StateError("train: loss diverged (non-finite) at epoch " +
                         std::to_string(epoch) + " step " + std::to_string(step));
      }
      loss_sum += loss_v * bn;
      adam.zero_grad();
      loss.backward();
      adam.step();
    }

    EpochStats es;
    es.epoch = epoch;
    es.train_loss = loss_sum / n_train;
    es.val_accuracy =
        eval_accuracy(*model, index, val_idx, num_classes, cfg.norm, cfg.batch_size);
    run.history.push_back(es);

    if (!std::isnan(es.val_accuracy) &&
        (std::isnan(run.best_val_accuracy) || es.val_accuracy > run.best_val_accuracy)) {
      run.best_val_accuracy = es.val_accuracy;
      run.best_epoch = epoch;
      run.best_checkpoint_path = save_model("best.ckpt", epoch + 1, es.val_accuracy);
    }
    flush_history();
  }

  const double last_val = run.history.empty()
                              ? std::numeric_limits<double>::quiet_NaN()
                              : run.history.back().val_accuracy;
  run.last_checkpoint_path = save_model("last.ckpt", cfg.epochs, last_val);
  if (run.best_epoch < 0) {
    // no validation set: the last state is the best state
    run.best_epoch = cfg.epochs - 1;
    run.best_checkpoint_path = run.last_checkpoint_path;
  }
  return run;
}

TrainRun train(const TrainConfig& cfg) {
  cfg.validate();
  DatasetIndex index = load_dataset(cfg.dataset_root);
  if (!index.bad_files.empty())
    throw DataError("train: dataset has unreadable images, first: " + index.bad_files[0]);
  std::vector<long> train_idx, val_idx;
  if (cfg.split == "holdout") {
    SplitPlan plan = make_holdout_split(index.labels(), cfg.train_fraction, cfg.seed);
    train_idx = plan.indices_of_fold(0);
    val_idx = plan.indices_of_fold(1);
  } else {
    SplitPlan plan =
        cfg.subject_disjoint
            ? make_subject_disjoint_kfold(index.labels(),
                                          [&] {
                                            std::vector<std::string> subj;
                                            for (const auto& s : index.samples)
                                              subj.push_back(s.subject_id);
                                            return subj;
                                          }(),
                                          cfg.folds, cfg.seed)
            : make_kfold_split(index.labels(), cfg.folds, cfg.seed);
    if (cfg.fold_index < 0 || cfg.fold_index >= cfg.folds)
      throw ConfigError("train: fold_index outside [0,k)");
    train_idx = plan.indices_not_in_fold(cfg.fold_index);
    val_idx = plan.indices_of_fold(cfg.fold_index);
  }
  return train_on(cfg, index, train_idx, val_idx);
}

// --- grid search -------------------------------------------------------------

TrainConfig apply_grid_assignment(TrainConfig cfg,
                                  const std::map<std::string, std::string>& assignment) {
  for (const auto& [key, value] : assignment) {
    if (key == "learning_rate") cfg.learning_rate = std::stod(value);
    else if (key == "batch_size") cfg.batch_size = std::stol(value);
    else if (key == "epochs") cfg.epochs = std::stol(value);
    else if (key == "freeze_backbones") cfg.freeze_backbones = (value == "true" || value == "1");
    else if (key == "seed") cfg.seed = std::stoull(value);
    else throw ConfigError("grid search: unknown hyperparameter '" + key + "'");
  }
  return cfg;
}

GridSearchResult grid_search(const TrainConfig& base, const GridSpec& spec,
                             const std::function<double(const TrainConfig&)>& run_point,
                             long jobs) {
  if (spec.empty()) throw ConfigError("grid search: empty grid");
  auto runner = run_point;
  if (!runner)
    runner = [](const TrainConfig& cfg) {
      TrainRun r = train(cfg);
      return std::isnan(r.best_val_accuracy) ? r.history.back().val_accuracy
                                             : r.best_val_accuracy;
    };

  const long total = spec.cardinality();
  GridSearchResult res;
  res.points.resize(static_cast<std::size_t>(total));
  for (long i = 0; i < total; ++i) {
    std::map<std::string, std::string> assignment;
    long rem = i;
    for (long a = static_cast<long>(spec.axes.size()) - 1; a >= 0; --a) {
      const auto& [key, values] = spec.axes[static_cast<std::size_t>(a)];
      assignment[key] = values[static_cast<std::size_t>(rem % values.size())];
      rem /= static_cast<long>(values.size());
    }
    res.points[static_cast<std::size_t>(i)].index = i;
    res.points[static_cast<std::size_t>(i)].assignment = std::move(assignment);
  }

  auto run_one = [&](long i) {
    auto& pt = res.points[static_cast<std::size_t>(i)];
    try {
      TrainConfig cfg = apply_grid_assignment(base, pt.assignment);
      if (!cfg.out_dir.empty())
        cfg.out_dir = (fs::path(cfg.out_dir) / ("point" + std::to_string(i))).string();
      pt.val_accuracy = runner(cfg);
    } catch (const std::exception& e) {
      pt.failed = true;
      pt.error = e.what();
    }
  };

  if (jobs <= 1) {
    for (long i = 0; i < total; ++i) run_one(i);
  } else {
    std::atomic<long> next{0};
    std::vector<std::thread> workers;
    for (long w = 0; w < std::min(jobs, total); ++w)
      workers.emplace_back([&]() {
        for (long i = next.fetch_add(1); i < total; i = next.fetch_add(1)) run_one(i);
      });
    for (auto& t : workers) t.join();
  }

  for (long i = 0; i < total; ++i) {
    const auto& pt = res.points[static_cast<std::size_t>(i)];
    if (pt.failed || std::isnan(pt.val_accuracy)) continue;
    if (res.best_index < 0 ||
        pt.val_accuracy > res.points[static_cast<std::size_t>(res.best_index)].val_accuracy)
      res.best_index = i;
  }
  if (res.best_index < 0) throw StateError("grid search: every point failed");
  res.best_config =
      apply_grid_assignment(base, res.points[static_cast<std::size_t>(res.best_index)].assignment);
  return res;
}

std::string grid_results_to_csv(const GridSpec& spec, const GridSearchResult& res) {
  std::string out = "index";
  for (const auto& [key, _] : spec.axes) out += "," + key;
  out += ",val_accuracy,status\n";
  for (const auto& pt : res.points) {
    out += std::to_string(pt.index);
    for (const auto& [key, _] : spec.axes) out += "," + pt.assignment.at(key);
    out += "," + fmt_double(pt.val_accuracy);
    out += pt.failed ? ",failed" : (pt.index == res.best_index ? ",best" : ",ok");
    out += "\n";
  }
  return out;
}

// --- cross-validation ----------------------------------------------------------

CrossValResult run_cross_validation(const TrainConfig& cfg, long k) {
  cfg.validate();
  DatasetIndex index = load_dataset(cfg.dataset_root);
  if (!index.bad_files.empty())
    throw DataError("crossval: dataset has unreadable images, first: " + index.bad_files[0]);
  SplitPlan plan =
      cfg.subject_disjoint
          ? make_subject_disjoint_kfold(index.labels(),
                                        [&] {
                                          std::vector<std::string> subj;
                                          for (const auto& s : index.samples)
                                            subj.push_back(s.subject_id);
                                          return subj;
                                        }(),
                                        k, cfg.seed)
          : make_kfold_split(index.labels(), k, cfg.seed);
  const long num_classes = cfg.num_classes > 0 ? cfg.num_classes : index.num_classes();

  CrossValResult res;
  const bool has_out = !cfg.out_dir.empty();
  for (long f = 0; f < k; ++f) {
    TrainConfig fold_cfg = cfg;
    if (has_out) fold_cfg.out_dir = (fs::path(cfg.out_dir) / ("fold" + std::to_string(f))).string();
    const auto train_idx = plan.indices_not_in_fold(f);
    const auto test_idx = plan.indices_of_fold(f);
    TrainRun run = train_on(fold_cfg, index, train_idx, test_idx);
    MetricsReport report =
        evaluate(*run.model, index, test_idx, num_classes, cfg.norm, cfg.batch_size);
    if (has_out)
      emit_report(report, nullptr, count_params(*run.model), fold_cfg.out_dir);
    res.fold_reports.push_back(report);
    res.fold_accuracies.push_back(report.accuracy);
  }
  double sum = 0;
  for (double a : res.fold_accuracies) sum += a;
  res.mean_accuracy = sum / static_cast<double>(k);
  double sq = 0;
  for (double a : res.fold_accuracies)
    sq += (a - res.mean_accuracy) * (a - res.mean_accuracy);
  res.std_accuracy = std::sqrt(sq / static_cast<double>(k));
  return res;
}

}  // namespace ferlite
