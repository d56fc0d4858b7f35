// ferlite command line: fixture generation, training, cross-validation,
// grid search, evaluation, latency profiling and report rendering.

#include "CLI11.hpp"
#include "json.hpp"

#include "ferlite/checkpoint.hpp"
#include "ferlite/data.hpp"
#include "ferlite/metrics.hpp"
#include "ferlite/train.hpp"
#include "ferlite/version.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <unistd.h>

namespace fs = std::filesystem;
using namespace ferlite;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitBadConfig = 2;

std::string now_stamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() %
      1000;
  char buf[32];
  std::tm tm_buf{};
  localtime_r(&t, &tm_buf);
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm_buf);
  char out[48];
  std::snprintf(out, sizeof(out), "%s%03d", buf, static_cast<int>(ms));
  return out;
}

std::string iso_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[40];
  std::tm tm_buf{};
  localtime_r(&t, &tm_buf);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm_buf);
  return buf;
}

std::string run_root() {
  if (const char* env = std::getenv("FERLITE_RUN_ROOT")) return env;
  return "runs";
}

// runs/<timestamp>-<command>/ unless --out pinned an exact directory
std::string make_run_dir(const std::string& command, const std::string& out_override) {
  if (!out_override.empty()) {
    fs::create_directories(out_override);
    return out_override;
  }
  fs::path base = fs::path(run_root()) / (now_stamp() + "-" + command);
  fs::path dir = base;
  for (int i = 1; fs::exists(dir); ++i) dir = base.string() + "-" + std::to_string(i);
  fs::create_directories(dir);
  return dir.string();
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << content;
}

struct ManifestScope {
  nlohmann::json j;
  std::string dir;

  ManifestScope(const std::string& command, int argc, char** argv, const std::string& out_dir,
                const std::string& config_json, std::uint64_t seed) {
    dir = out_dir;
    j["schema_version"] = 1;
    j["command"] = command;
    std::vector<std::string> args(argv, argv + argc);
    j["argv"] = args;
    j["config"] = nlohmann::json::parse(config_json, nullptr, false);
    j["seed"] = seed;
    j["code_version"] = kVersion;
    j["out_dir"] = out_dir;
    j["started_at"] = iso_now();
    char host[256] = {0};
    gethostname(host, sizeof(host) - 1);
    j["host"] = host;
    flush();
  }
  void finish() {
    j["finished_at"] = iso_now();
    flush();
  }
  void flush() const { write_text(fs::path(dir) / "manifest.json", j.dump(2) + "\n"); }
};

// TOML-style resolved config, re-readable through --config
std::string config_to_toml(const TrainConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "data = \"" << c.dataset_root << "\"\n";
  os << "classes = " << c.num_classes << "\n";
  os << "batch = " << c.batch_size << "\n";
  os << "lr = " << c.learning_rate << "\n";
  os << "epochs = " << c.epochs << "\n";
  os << "seed = " << c.seed << "\n";
  os << "split = \"" << c.split << "\"\n";
  os << "train-fraction = " << c.train_fraction << "\n";
  os << "folds = " << c.folds << "\n";
  os << "fold-index = " << c.fold_index << "\n";
  os << "subject-disjoint = " << (c.subject_disjoint ? "true" : "false") << "\n";
  os << "freeze-backbones = " << (c.freeze_backbones ? "true" : "false") << "\n";
  if (!c.init_from.empty()) os << "init-from = \"" << c.init_from << "\"\n";
  if (c.partial_load) os << "partial = true\n";
  if (!c.resume_from.empty()) os << "resume-from = \"" << c.resume_from << "\"\n";
  os << "threads = " << c.threads << "\n";
  os << "augment = " << (c.augment.enabled ? "true" : "false") << "\n";
  return os.str();
}

// One bound key of the TOML-style config file. Flags always win: a file
// value only lands when the matching option was absent on the command line.
struct ConfigKey {
  std::string key;
  std::string option;  // "--name" to probe cmd->count()
  std::function<void(const std::string&)> set;
};

struct TrainCli {
  CLI::App* cmd = nullptr;
  TrainConfig cfg;
  std::string out_override;
  std::string config_file;
  std::vector<ConfigKey> keys;
};

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config: expected a boolean, got '" + v + "'");
}

void apply_config_file(TrainCli& tc) {
  if (tc.config_file.empty()) return;
  std::ifstream f(tc.config_file);
  if (!f) throw ConfigError("config file not found: " + tc.config_file);
  std::string line;
  long lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty() || line.front() == '[') continue;  // sections are cosmetic
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not key = value");
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    bool known = false;
    for (auto& k : tc.keys) {
      if (k.key != key) continue;
      known = true;
      if (tc.cmd->count(k.option) == 0) k.set(value);
      break;
    }
    if (!known)
      throw ConfigError("config: unknown key '" + key + "' at line " + std::to_string(lineno));
  }
}

void add_train_options(CLI::App* cmd, TrainCli& tc) {
  TrainConfig& cfg = tc.cfg;
  tc.cmd = cmd;
  cmd->add_option("--config", tc.config_file,
                  "TOML-style key/value config file; flags win over file values");
  cmd->add_option("--data", cfg.dataset_root, "dataset root (one folder per class)");
  cmd->add_option("--classes", cfg.num_classes, "class count (0 = from dataset)");
  cmd->add_option("--batch", cfg.batch_size, "batch size");
  cmd->add_option("--lr", cfg.learning_rate, "learning rate");
  cmd->add_option("--epochs", cfg.epochs, "training epochs");
  cmd->add_option("--seed", cfg.seed, "seed for init/shuffle/augment/dropout");
  cmd->add_option("--split", cfg.split, "holdout | kfold")
      ->check(CLI::IsMember({"holdout", "kfold"}));
  cmd->add_option("--train-fraction", cfg.train_fraction, "hold-out train share");
  cmd->add_option("--folds", cfg.folds, "fold count for kfold split");
  cmd->add_option("--fold-index", cfg.fold_index, "held-out fold for a single run");
  cmd->add_flag("--subject-disjoint", cfg.subject_disjoint,
                "folds separate subjects instead of samples");
  cmd->add_flag("--freeze-backbones", cfg.freeze_backbones,
                "train only the classifier head");
  cmd->add_option("--init-from", cfg.init_from, "checkpoint with pretrained weights");
  cmd->add_flag("--partial", cfg.partial_load, "load the name intersection of --init-from");
  cmd->add_option("--resume-from", cfg.resume_from, "checkpoint to continue training from");
  cmd->add_option("--threads", cfg.threads, "intra-op worker count (0 = machine default)");
  cmd->add_flag("--augment,!--no-augment", cfg.augment.enabled, "training augmentation");
  cmd->add_option("--out", tc.out_override, "exact output directory (default runs/<ts>-<cmd>)");
  cmd->add_flag("--skip-bad", "skip unreadable images instead of aborting");

  tc.keys = {
      {"data", "--data", [&cfg](const std::string& v) { cfg.dataset_root = v; }},
      {"classes", "--classes", [&cfg](const std::string& v) { cfg.num_classes = std::stol(v); }},
      {"batch", "--batch", [&cfg](const std::string& v) { cfg.batch_size = std::stol(v); }},
      {"lr", "--lr", [&cfg](const std::string& v) { cfg.learning_rate = std::stod(v); }},
      {"epochs", "--epochs", [&cfg](const std::string& v) { cfg.epochs = std::stol(v); }},
      {"seed", "--seed", [&cfg](const std::string& v) { cfg.seed = std::stoull(v); }},
      {"split", "--split", [&cfg](const std::string& v) { cfg.split = v; }},
      {"train-fraction", "--train-fraction",
       [&cfg](const std::string& v) { cfg.train_fraction = std::stod(v); }},
      {"folds", "--folds", [&cfg](const std::string& v) { cfg.folds = std::stol(v); }},
      {"fold-index", "--fold-index",
       [&cfg](const std::string& v) { cfg.fold_index = std::stol(v); }},
      {"subject-disjoint", "--subject-disjoint",
       [&cfg](const std::string& v) { cfg.subject_disjoint = parse_bool(v); }},
      {"freeze-backbones", "--freeze-backbones",
       [&cfg](const std::string& v) { cfg.freeze_backbones = parse_bool(v); }},
      {"init-from", "--init-from", [&cfg](const std::string& v) { cfg.init_from = v; }},
      {"partial", "--partial", [&cfg](const std::string& v) { cfg.partial_load = parse_bool(v); }},
      {"resume-from", "--resume-from", [&cfg](const std::string& v) { cfg.resume_from = v; }},
      {"threads", "--threads", [&cfg](const std::string& v) { cfg.threads = std::stol(v); }},
      {"augment", "--augment", [&cfg](const std::string& v) { cfg.augment.enabled = parse_bool(v); }},
  };
}

DatasetIndex load_dataset_checked(const std::string& root, bool skip_bad,
                                  const std::string& out_dir) {
  if (root.empty()) throw ConfigError("no dataset root given (use --data)");
  if (!fs::is_directory(root)) throw ConfigError("dataset root does not exist: " + root);
  DatasetIndex idx = load_dataset(root, /*validate=*/true);
  for (const auto& w : idx.warnings) std::cerr << "warning: " << w << "\n";
  if (!idx.bad_files.empty()) {
    if (!out_dir.empty()) {
      std::string report;
      for (const auto& f : idx.bad_files) report += f + "\n";
      write_text(fs::path(out_dir) / "bad_files.txt", report);
    }
    if (!skip_bad) {
      throw DataError("dataset has " + std::to_string(idx.bad_files.size()) +
                      " unreadable image(s), first: " + idx.bad_files[0] +
                      " (use --skip-bad to continue without them)");
    }
    std::cerr << "warning: skipping " << idx.bad_files.size() << " unreadable image(s)\n";
  }
  return idx;
}

SplitPlan plan_from_config(const TrainConfig& cfg, const DatasetIndex& idx) {
  if (cfg.split == "holdout")
    return make_holdout_split(idx.labels(), cfg.train_fraction, cfg.seed);
  std::vector<std::string> subjects;
  for (const auto& s : idx.samples) subjects.push_back(s.subject_id);
  return cfg.subject_disjoint
             ? make_subject_disjoint_kfold(idx.labels(), subjects, cfg.folds, cfg.seed)
             : make_kfold_split(idx.labels(), cfg.folds, cfg.seed);
}

int cmd_fixture(const std::string& out, long classes, long per_class, std::uint64_t seed) {
  generate_fixture(out, classes, per_class, seed);
  nlohmann::json j{{"schema_version", 1},
                   {"command", "fixture"},
                   {"classes", classes},
                   {"per_class", per_class},
                   {"seed", seed},
                   {"code_version", kVersion},
                   {"created_at", iso_now()}};
  write_text(fs::path(out) / "fixture_manifest.json", j.dump(2) + "\n");
  std::cout << "fixture: " << classes * per_class << " images in " << out << "\n";
  return kExitOk;
}

int cmd_train(TrainConfig cfg, bool skip_bad, const std::string& out_override, int argc,
              char** argv) {
  cfg.validate();
  cfg.out_dir = make_run_dir("train", out_override);
  ManifestScope manifest("train", argc, argv, cfg.out_dir, train_config_to_json(cfg), cfg.seed);
  write_text(fs::path(cfg.out_dir) / "config.resolved.toml", config_to_toml(cfg));

  DatasetIndex idx = load_dataset_checked(cfg.dataset_root, skip_bad, cfg.out_dir);
  SplitPlan plan = plan_from_config(cfg, idx);
  write_text(fs::path(cfg.out_dir) / "split.json", split_to_json(plan, idx) + "\n");

  std::vector<long> train_idx, val_idx;
  if (cfg.split == "holdout") {
    train_idx = plan.indices_of_fold(0);
    val_idx = plan.indices_of_fold(1);
  } else {
    if (cfg.fold_index < 0 || cfg.fold_index >= cfg.folds)
      throw ConfigError("--fold-index outside [0, folds)");
    train_idx = plan.indices_not_in_fold(cfg.fold_index);
    val_idx = plan.indices_of_fold(cfg.fold_index);
  }
  TrainRun run = train_on(cfg, idx, train_idx, val_idx);

  std::cout << "trained " << cfg.epochs << " epoch(s) on " << train_idx.size()
            << " samples; history: " << run.history_csv_path << "\n";
  if (!std::isnan(run.best_val_accuracy))
    std::cout << "best val accuracy " << run.best_val_accuracy << " at epoch "
              << run.best_epoch << " (" << run.best_checkpoint_path << ")\n";
  std::cout << "last checkpoint: " << run.last_checkpoint_path << "\n";
  manifest.finish();
  return kExitOk;
}

int cmd_crossval(TrainConfig cfg, long k, bool skip_bad, const std::string& out_override,
                 int argc, char** argv) {
  cfg.validate();
  cfg.out_dir = make_run_dir("crossval", out_override);
  ManifestScope manifest("crossval", argc, argv, cfg.out_dir, train_config_to_json(cfg),
                         cfg.seed);
  DatasetIndex idx = load_dataset_checked(cfg.dataset_root, skip_bad, cfg.out_dir);
  TrainConfig run_cfg = cfg;
  run_cfg.split = "kfold";
  run_cfg.folds = k;
  SplitPlan plan = plan_from_config(run_cfg, idx);
  write_text(fs::path(cfg.out_dir) / "split.json", split_to_json(plan, idx) + "\n");

  CrossValResult res = run_cross_validation(run_cfg, k);
  nlohmann::json agg{{"schema_version", 1},
                     {"k", k},
                     {"fold_accuracies", res.fold_accuracies},
                     {"mean_accuracy", res.mean_accuracy},
                     {"std_accuracy", res.std_accuracy}};
  write_text(fs::path(cfg.out_dir) / "aggregate.json", agg.dump(2) + "\n");
  for (long f = 0; f < k; ++f)
    std::cout << "fold " << f << ": accuracy " << res.fold_accuracies[std::size_t(f)] << "\n";
  std::cout << "mean accuracy " << res.mean_accuracy << " (std " << res.std_accuracy << ")\n";
  manifest.finish();
  return kExitOk;
}

int cmd_gridsearch(TrainConfig cfg, const std::vector<std::string>& grid_args, long jobs,
                   bool skip_bad, const std::string& out_override, int argc, char** argv) {
  cfg.validate();
  cfg.out_dir = make_run_dir("gridsearch", out_override);
  ManifestScope manifest("gridsearch", argc, argv, cfg.out_dir, train_config_to_json(cfg),
                         cfg.seed);
  GridSpec spec;
  for (const auto& arg : grid_args) {
    const auto eq = arg.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--grid wants key=v1,v2,... got '" + arg + "'");
    std::vector<std::string> values;
    std::string v = arg.substr(eq + 1);
    for (std::size_t pos = 0; pos != std::string::npos;) {
      const auto comma = v.find(',', pos);
      values.push_back(v.substr(pos, comma == std::string::npos ? comma : comma - pos));
      pos = comma == std::string::npos ? comma : comma + 1;
    }
    spec.axes.push_back({arg.substr(0, eq), values});
  }
  // validation carve-out per config: hold-out gets a further slice of train,
  // k-fold uses the held-out fold (train() already behaves this way)
  DatasetIndex idx = load_dataset_checked(cfg.dataset_root, skip_bad, cfg.out_dir);
  auto run_point = [&idx, &cfg](const TrainConfig& point_cfg) {
    std::vector<long> train_idx, val_idx;
    if (point_cfg.split == "holdout") {
      SplitPlan outer =
          make_holdout_split(idx.labels(), point_cfg.train_fraction, point_cfg.seed);
      std::vector<long> pool = outer.indices_of_fold(0);
      // carve grid_val_fraction of the training pool for validation
      std::vector<long> pool_labels;
      for (long i : pool) pool_labels.push_back(idx.samples[std::size_t(i)].label);
      SplitPlan inner = make_holdout_split(pool_labels, 1.0 - point_cfg.grid_val_fraction,
                                           point_cfg.seed + 1);
      for (long j : inner.indices_of_fold(0)) train_idx.push_back(pool[std::size_t(j)]);
      for (long j : inner.indices_of_fold(1)) val_idx.push_back(pool[std::size_t(j)]);
    } else {
      SplitPlan plan = make_kfold_split(idx.labels(), point_cfg.folds, point_cfg.seed);
      train_idx = plan.indices_not_in_fold(point_cfg.fold_index);
      val_idx = plan.indices_of_fold(point_cfg.fold_index);
    }
    TrainRun run = train_on(point_cfg, idx, train_idx, val_idx);
    return std::isnan(run.best_val_accuracy) ? run.history.back().val_accuracy
                                             : run.best_val_accuracy;
  };
  GridSearchResult res = grid_search(cfg, spec, run_point, jobs);
  write_text(fs::path(cfg.out_dir) / "grid_results.csv", grid_results_to_csv(spec, res));
  write_text(fs::path(cfg.out_dir) / "best_config.json",
             train_config_to_json(res.best_config) + "\n");
  std::cout << grid_results_to_csv(spec, res);
  std::cout << "best point: " << res.best_index << "\n";
  manifest.finish();
  return kExitOk;
}

std::shared_ptr<FusedModel<float>> model_from_checkpoint(const Checkpoint& ck,
                                                         TrainConfig* cfg_out) {
  TrainConfig cfg;
  if (!ck.config_json.empty()) cfg = train_config_from_json(ck.config_json);
  FusedModelConfig mc;
  mc.num_classes = cfg.num_classes > 0 ? cfg.num_classes : 6;
  // class count is recoverable from the classifier output tensor if needed
  for (const auto& t : ck.tensors)
    if (t.name == "classifier.fc3.bias") mc.num_classes = t.shape[0];
  auto model = std::make_shared<FusedModel<float>>(mc, cfg.seed);
  ck.apply_to(*model);
  if (cfg_out) {
    cfg.num_classes = mc.num_classes;
    *cfg_out = cfg;
  }
  return model;
}

int cmd_eval(const std::string& checkpoint, std::string data_root, const std::string& which,
             bool skip_bad, const std::string& out_override, int argc, char** argv) {
  Checkpoint ck = load_checkpoint(checkpoint);
  TrainConfig cfg;
  auto model = model_from_checkpoint(ck, &cfg);
  if (!data_root.empty()) cfg.dataset_root = data_root;
  const std::string out_dir = make_run_dir("eval", out_override);
  ManifestScope manifest("eval", argc, argv, out_dir, train_config_to_json(cfg), cfg.seed);

  DatasetIndex idx = load_dataset_checked(cfg.dataset_root, skip_bad, out_dir);
  SplitPlan plan = plan_from_config(cfg, idx);
  std::vector<long> indices;
  if (which == "all") {
    for (long i = 0; i < long(idx.samples.size()); ++i) indices.push_back(i);
  } else if (cfg.split == "holdout") {
    indices = plan.indices_of_fold(which == "train" ? 0 : 1);
  } else {
    indices = (which == "train") ? plan.indices_not_in_fold(cfg.fold_index)
                                 : plan.indices_of_fold(cfg.fold_index);
  }
  const long num_classes = model->config().num_classes;
  MetricsReport report = evaluate(*model, idx, indices, num_classes, cfg.norm, cfg.batch_size);
  emit_report(report, nullptr, count_params(*model), out_dir);
  std::cout << "evaluated " << report.n_samples << " samples; accuracy " << report.accuracy
            << ", macro F1 " << report.macro_f1 << "\n";
  if ((which == "val" || which == "test") && !std::isnan(ck.val_accuracy)) {
    std::cout << "stored accuracy at save time: " << ck.val_accuracy
              << (report.accuracy == ck.val_accuracy ? " (reproduced exactly)"
                                                     : " (differs!)")
              << "\n";
  }
  std::cout << "report: " << (fs::path(out_dir) / "report.json").string() << "\n";
  manifest.finish();
  return kExitOk;
}

int cmd_profile(const std::string& checkpoint, const std::string& component, long warmup,
                long runs, long batch, long threads, const std::string& out_override,
                int argc, char** argv) {
  if (threads > 0) set_num_threads(threads);
  std::shared_ptr<FusedModel<float>> model;
  TrainConfig cfg;
  if (!checkpoint.empty()) {
    Checkpoint ck = load_checkpoint(checkpoint);
    model = model_from_checkpoint(ck, &cfg);
  } else {
    std::cerr << "note: profiling a randomly initialized model (no --checkpoint)\n";
    FusedModelConfig mc;
    model = std::make_shared<FusedModel<float>>(mc, 1);
  }
  const std::string out_dir = make_run_dir("profile", out_override);
  ManifestScope manifest("profile", argc, argv, out_dir, train_config_to_json(cfg), cfg.seed);

  const Shape input{batch, 3, 224, 224};
  auto profile_one = [&](const std::string& name, Module<float>& m) {
    LatencyStats s = profile_latency(m, input, warmup, runs);
    write_text(fs::path(out_dir) / ("latency_" + name + ".json"), latency_to_json(s) + "\n");
    std::cout << name << ": mean " << s.mean_ms << " ms/image (min " << s.min_ms << ", max "
              << s.max_ms << ", std " << s.std_ms << ", " << runs << " runs, batch " << batch
              << ", " << s.threads << " thread(s))\n";
    return s;
  };

  if (component == "fused") {
    LatencyStats s = profile_one("fused", *model);
    write_text(fs::path(out_dir) / "latency.json", latency_to_json(s) + "\n");
  } else if (component == "shufflenet") {
    LatencyStats s = profile_one("shufflenet", model->shufflenet());
    write_text(fs::path(out_dir) / "latency.json", latency_to_json(s) + "\n");
  } else if (component == "efficientvit") {
    LatencyStats s = profile_one("efficientvit", model->efficientvit());
    write_text(fs::path(out_dir) / "latency.json", latency_to_json(s) + "\n");
  } else {  // all: component comparison, reported not asserted
    LatencyStats sh = profile_one("shufflenet", model->shufflenet());
    LatencyStats ev = profile_one("efficientvit", model->efficientvit());
    LatencyStats fu = profile_one("fused", *model);
    write_text(fs::path(out_dir) / "latency.json", latency_to_json(fu) + "\n");
    nlohmann::json cmp{{"schema_version", 1},
                       {"shufflenet_mean_ms", sh.mean_ms},
                       {"efficientvit_mean_ms", ev.mean_ms},
                       {"fused_mean_ms", fu.mean_ms},
                       {"component_sum_ms", sh.mean_ms + ev.mean_ms},
                       {"fused_not_less_than_components",
                        fu.mean_ms >= std::max(sh.mean_ms, ev.mean_ms)}};
    write_text(fs::path(out_dir) / "comparison.json", cmp.dump(2) + "\n");
    std::cout << "comparison: " << (fs::path(out_dir) / "comparison.json").string() << "\n";
  }
  manifest.finish();
  return kExitOk;
}

int cmd_report(const std::string& in_path, const std::string& confusion_csv) {
  std::ifstream f(in_path);
  if (!f) throw IoError("cannot open " + in_path);
  std::string text{std::istreambuf_iterator<char>(f), {}};
  MetricsReport r = metrics_from_json(text);
  std::printf("samples: %ld   classes: %ld\n", r.n_samples, r.num_classes);
  std::printf("accuracy: %.4f\n", r.accuracy);
  std::printf("macro  P/R/F1: %.4f / %.4f / %.4f\n", r.macro_precision, r.macro_recall,
              r.macro_f1);
  for (long c = 0; c < r.num_classes; ++c)
    std::printf("class %-2ld P/R/F1: %.4f / %.4f / %.4f\n", c, r.precision[std::size_t(c)],
                r.recall[std::size_t(c)], r.f1[std::size_t(c)]);
  std::printf("confusion (rows = true, row-normalized %%):\n");
  auto rn = r.row_normalized();
  for (long t = 0; t < r.num_classes; ++t) {
    for (long p = 0; p < r.num_classes; ++p)
      std::printf("%6.1f", 100.0 * rn[std::size_t(t * r.num_classes + p)]);
    std::printf("\n");
  }
  if (!confusion_csv.empty()) write_text(confusion_csv, confusion_to_csv(r));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ferlite: a lightweight dual-backbone facial-expression recognition engine"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  // fixture
  auto* fixture = app.add_subcommand("fixture", "generate a synthetic class-separable dataset");
  std::string fx_out = "fixture";
  long fx_classes = 6, fx_per_class = 10;
  std::uint64_t fx_seed = 42;
  fixture->add_option("--out", fx_out, "dataset root to create");
  fixture->add_option("--classes", fx_classes)->check(CLI::Range(2L, 64L));
  fixture->add_option("--per-class", fx_per_class)->check(CLI::PositiveNumber);
  fixture->add_option("--seed", fx_seed);

  // train
  TrainCli train_cli;
  auto* train_cmd = app.add_subcommand("train", "train the fused model");
  add_train_options(train_cmd, train_cli);

  // crossval
  TrainCli cv_cli;
  long cv_k = 10;
  auto* cv_cmd = app.add_subcommand("crossval", "k-fold cross-validation");
  add_train_options(cv_cmd, cv_cli);
  cv_cmd->add_option("--k", cv_k, "fold count")->check(CLI::Range(2L, 100L));

  // gridsearch
  TrainCli gs_cli;
  std::vector<std::string> gs_grid;
  long gs_jobs = 1;
  auto* gs_cmd = app.add_subcommand("gridsearch", "exhaustive hyperparameter grid search");
  add_train_options(gs_cmd, gs_cli);
  gs_cmd->add_option("--grid", gs_grid, "axis as key=v1,v2,... (repeatable)")->required();
  gs_cmd->add_option("--jobs", gs_jobs, "parallel grid workers");

  // eval
  std::string ev_ckpt, ev_data, ev_split = "test", ev_out;
  bool ev_skip_bad = false;
  auto* ev_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  ev_cmd->add_option("--checkpoint", ev_ckpt)->required();
  ev_cmd->add_option("--data", ev_data, "dataset root (default: from the checkpoint)");
  ev_cmd->add_option("--split", ev_split)->check(CLI::IsMember({"train", "val", "test", "all"}));
  ev_cmd->add_flag("--skip-bad", ev_skip_bad);
  ev_cmd->add_option("--out", ev_out);

  // profile
  std::string pf_ckpt, pf_component = "all", pf_out;
  long pf_warmup = 10, pf_runs = 100, pf_batch = 1, pf_threads = 0;
  auto* pf_cmd = app.add_subcommand("profile", "latency profiling");
  pf_cmd->add_option("--checkpoint", pf_ckpt);
  pf_cmd->add_option("--component", pf_component)
      ->check(CLI::IsMember({"fused", "shufflenet", "efficientvit", "all"}));
  pf_cmd->add_option("--warmup", pf_warmup)->check(CLI::NonNegativeNumber);
  pf_cmd->add_option("--runs", pf_runs)->check(CLI::PositiveNumber);
  pf_cmd->add_option("--batch", pf_batch)->check(CLI::PositiveNumber);
  pf_cmd->add_option("--threads", pf_threads);
  pf_cmd->add_option("--out", pf_out);

  // report
  std::string rp_in, rp_csv;
  auto* rp_cmd = app.add_subcommand("report", "render a report.json");
  rp_cmd->add_option("--in", rp_in)->required();
  rp_cmd->add_option("--confusion-csv", rp_csv, "also write the raw confusion matrix");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*fixture) return cmd_fixture(fx_out, fx_classes, fx_per_class, fx_seed);
    if (*train_cmd) {
      apply_config_file(train_cli);
      return cmd_train(train_cli.cfg, train_cmd->count("--skip-bad") > 0,
                       train_cli.out_override, argc, argv);
    }
    if (*cv_cmd) {
      apply_config_file(cv_cli);
      return cmd_crossval(cv_cli.cfg, cv_k, cv_cmd->count("--skip-bad") > 0,
                          cv_cli.out_override, argc, argv);
    }
    if (*gs_cmd) {
      apply_config_file(gs_cli);
      return cmd_gridsearch(gs_cli.cfg, gs_grid, gs_jobs, gs_cmd->count("--skip-bad") > 0,
                            gs_cli.out_override, argc, argv);
    }
    if (*ev_cmd)
      return cmd_eval(ev_ckpt, ev_data, ev_split, ev_skip_bad, ev_out, argc, argv);
    if (*pf_cmd)
      return cmd_profile(pf_ckpt, pf_component, pf_warmup, pf_runs, pf_batch, pf_threads,
                         pf_out, argc, argv);
    if (*rp_cmd) return cmd_report(rp_in, rp_csv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitBadConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
