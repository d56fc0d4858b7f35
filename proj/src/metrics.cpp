#include "ferlite/metrics.hpp"

#include "json.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>

namespace ferlite {

MetricsReport MetricsReport::from_predictions(const std::vector<long>& labels,
                                              const std::vector<long>& preds,
                                              long num_classes) {
  if (labels.size() != preds.size())
    throw DimError("metrics: labels/predictions size mismatch");
  if (labels.empty()) throw ConfigError("metrics: empty sample set");
  MetricsReport r;
  r.num_classes = num_classes;
  r.n_samples = static_cast<long>(labels.size());
  r.confusion.assign(static_cast<std::size_t>(num_classes * num_classes), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes || preds[i] < 0 || preds[i] >= num_classes)
      throw DataError("metrics: class index outside [0," + std::to_string(num_classes) + ")");
    ++r.confusion[static_cast<std::size_t>(labels[i] * num_classes + preds[i])];
  }
  long diag = 0;
  for (long c = 0; c < num_classes; ++c) diag += r.at(c, c);
  r.accuracy = static_cast<double>(diag) / static_cast<double>(r.n_samples);
  for (long c = 0; c < num_classes; ++c) {
    long col = 0, row = 0;
    for (long k = 0; k < num_classes; ++k) {
      col += r.at(k, c);
      row += r.at(c, k);
    }
    const double p = col ? static_cast<double>(r.at(c, c)) / col : 0.0;
    const double rec = row ? static_cast<double>(r.at(c, c)) / row : 0.0;
    const double f = (p + rec > 0) ? 2.0 * p * rec / (p + rec) : 0.0;
    r.precision.push_back(p);
    r.recall.push_back(rec);
    r.f1.push_back(f);
    r.macro_precision += p / num_classes;
    r.macro_recall += rec / num_classes;
    r.macro_f1 += f / num_classes;
  }
  return r;
}

std::vector<double> MetricsReport::row_normalized() const {
  std::vector<double> out(confusion.size(), 0.0);
  for (long t = 0; t < num_classes; ++t) {
    long row = 0;
    for (long p = 0; p < num_classes; ++p) row += at(t, p);
    if (!row) continue;
    for (long p = 0; p < num_classes; ++p)
      out[static_cast<std::size_t>(t * num_classes + p)] =
          static_cast<double>(at(t, p)) / row;
  }
  return out;
}

std::string metrics_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["averaging"] = "macro";
  j["num_classes"] = r.num_classes;
  j["n_samples"] = r.n_samples;
  j["accuracy"] = r.accuracy;
  std::vector<std::vector<long>> rows;
  for (long t = 0; t < r.num_classes; ++t) {
    std::vector<long> row;
    for (long p = 0; p < r.num_classes; ++p) row.push_back(r.at(t, p));
    rows.push_back(row);
  }
  j["confusion"] = rows;
  j["per_class"] = {{"precision", r.precision}, {"recall", r.recall}, {"f1", r.f1}};
  j["macro"] = {{"precision", r.macro_precision},
                {"recall", r.macro_recall},
                {"f1", r.macro_f1}};
  auto rn = r.row_normalized();
  std::vector<std::vector<double>> rn_rows;
  for (long t = 0; t < r.num_classes; ++t)
    rn_rows.emplace_back(rn.begin() + t * r.num_classes, rn.begin() + (t + 1) * r.num_classes);
  j["confusion_row_normalized"] = rn_rows;
  return j.dump(2);
}

MetricsReport metrics_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  MetricsReport r;
  r.num_classes = j.at("num_classes").get<long>();
  r.n_samples = j.at("n_samples").get<long>();
  r.accuracy = j.at("accuracy").get<double>();
  for (const auto& row : j.at("confusion"))
    for (const auto& v : row) r.confusion.push_back(v.get<long>());
  r.precision = j.at("per_class").at("precision").get<std::vector<double>>();
  r.recall = j.at("per_class").at("recall").get<std::vector<double>>();
  r.f1 = j.at("per_class").at("f1").get<std::vector<double>>();
  r.macro_precision = j.at("macro").at("precision").get<double>();
  r.macro_recall = j.at("macro").at("recall").get<double>();
  r.macro_f1 = j.at("macro").at("f1").get<double>();
  return r;
}

std::string confusion_to_csv(const MetricsReport& r) {
  std::string out;
  for (long t = 0; t < r.num_classes; ++t) {
    for (long p = 0; p < r.num_classes; ++p) {
      out += std::to_string(r.at(t, p));
      out += (p + 1 == r.num_classes) ? '\n' : ',';
    }
  }
  return out;
}

std::string latency_to_json(const LatencyStats& s) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["warmup_runs"] = s.warmup_runs;
  j["measured_runs"] = s.measured_runs;
  j["batch_size"] = s.batch_size;
  j["mean_ms"] = s.mean_ms;
  j["std_ms"] = s.std_ms;
  j["min_ms"] = s.min_ms;
  j["max_ms"] = s.max_ms;
  j["per_run_ms"] = s.per_run_ms;
  j["host"] = s.host;
  j["threads"] = s.threads;
  return j.dump(2);
}

std::vector<long> predict(Module<float>& model, const DatasetIndex& index,
                          const std::vector<long>& sample_indices, const NormStats& norm,
                          long batch_size) {
  if (sample_indices.empty()) throw ConfigError("predict: empty sample set");
  NoGradGuard ng;
  Ctx<float> ctx{Mode::Eval, nullptr};
  std::vector<long> preds;
  preds.reserve(sample_indices.size());
  const long n = static_cast<long>(sample_indices.size());
  for (long b = 0; b < n; b += batch_size) {
    const long bn = std::min(batch_size, n - b);
    Tensor<float> batch = Tensor<float>::zeros({bn, 3, 224, 224});
    for (long i = 0; i < bn; ++i) {
      const Sample& s = index.samples[static_cast<std::size_t>(sample_indices[b + i])];
      Tensor<float> img = normalize(load_sample_image(s), norm);
      std::copy(img.value().data(), img.value().data() + img.size(),
                batch.value().data() + i * img.size());
    }
    Tensor<float> logits = model.forward(batch, ctx);
    const long K = logits.dim(1);
    for (long i = 0; i < bn; ++i) {
      long arg = 0;
      float best = logits.value()[i * K];
      for (long k = 1; k < K; ++k)
        if (logits.value()[i * K + k] > best) {
          best = logits.value()[i * K + k];
          arg = k;
        }
      preds.push_back(arg);
    }
  }
  return preds;
}

MetricsReport evaluate(Module<float>& model, const DatasetIndex& index,
                       const std::vector<long>& sample_indices, long num_classes,
                       const NormStats& norm, long batch_size) {
  std::vector<long> preds = predict(model, index, sample_indices, norm, batch_size);
  std::vector<long> labels;
  for (long i : sample_indices)
    labels.push_back(index.samples[static_cast<std::size_t>(i)].label);
  return MetricsReport::from_predictions(labels, preds, num_classes);
}

LatencyStats profile_latency(Module<float>& model, const Shape& input_shape, long warmup,
                             long runs) {
  if (runs < 1) throw ConfigError("profile: need at least one measured run");
  if (warmup < 0) throw ConfigError("profile: warmup must be >= 0");
  LatencyStats s;
  s.warmup_runs = warmup;
  s.measured_runs = runs;
  s.batch_size = input_shape.empty() ? 1 : input_shape[0];
  char host[256] = {0};
  gethostname(host, sizeof(host) - 1);
  s.host = host;
  s.threads = num_threads();

  NoGradGuard ng;
  Ctx<float> ctx{Mode::Eval, nullptr};
  Tensor<float> input = Tensor<float>::zeros(input_shape);
  Rng rng(1234);
  for (long i = 0; i < input.size(); ++i) input.value()[i] = float(rng.normal(0.0, 1.0));

  for (long i = 0; i < warmup; ++i) model.forward(input, ctx);
  s.per_run_ms.reserve(static_cast<std::size_t>(runs));
  for (long i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    model.forward(input, ctx);
    const auto t1 = std::chrono::steady_clock::now();
    s.per_run_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count() /
                           static_cast<double>(s.batch_size));
  }
  double sum = 0;
  s.min_ms = s.per_run_ms[0];
  s.max_ms = s.per_run_ms[0];
  for (double v : s.per_run_ms) {
    sum += v;
    s.min_ms = std::min(s.min_ms, v);
    s.max_ms = std::max(s.max_ms, v);
  }
  s.mean_ms = sum / runs;
  double sq_dev = 0;
  for (double v : s.per_run_ms) sq_dev += (v - s.mean_ms) * (v - s.mean_ms);
  s.std_ms = std::sqrt(sq_dev / runs);
  return s;
}

void emit_report(const MetricsReport& report, const LatencyStats* latency, long param_count,
                 const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  {
    nlohmann::json j = nlohmann::json::parse(metrics_to_json(report));
    j["param_count"] = param_count;
    std::ofstream f(fs::path(out_dir) / "report.json");
    if (!f) throw IoError("cannot write report.json under " + out_dir);
    f << j.dump(2) << "\n";
  }
  {
    std::ofstream f(fs::path(out_dir) / "confusion.csv");
    if (!f) throw IoError("cannot write confusion.csv under " + out_dir);
    f << confusion_to_csv(report);
  }
  if (latency) {
    std::ofstream f(fs::path(out_dir) / "latency.json");
    if (!f) throw IoError("cannot write latency.json under " + out_dir);
    f << latency_to_json(*latency) << "\n";
  }
}

}  // namespace ferlite
