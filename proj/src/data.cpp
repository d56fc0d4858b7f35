#include "ferlite/data.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

namespace fs = std::filesystem;

namespace ferlite {

namespace {

bool has_image_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e == ".png" || e == ".jpg" || e == ".jpeg";
}

std::string subject_from_filename(const fs::path& p) {
  const std::string stem = p.stem().string();
  const auto us = stem.find('_');
  return us == std::string::npos ? std::string{} : stem.substr(0, us);
}

}  // namespace

DatasetIndex load_dataset(const std::string& root, bool validate) {
  DatasetIndex idx;
  if (!fs::is_directory(root)) throw DataError("dataset root is not a directory: " + root);
  std::vector<std::string> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw DataError("dataset root has no class directories: " + root);
  idx.class_names = class_dirs;
  for (long label = 0; label < static_cast<long>(class_dirs.size()); ++label) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(fs::path(root) / class_dirs[label]))
      if (e.is_regular_file() && has_image_ext(e.path())) files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty())
      idx.warnings.push_back("class directory has no images: " + class_dirs[label]);
    for (const auto& f : files) {
      if (validate) {
        try {
          load_image(f);
        } catch (const DataError&) {
          idx.bad_files.push_back(f);
          continue;
        }
      }
      idx.samples.push_back({f, label, subject_from_filename(fs::path(f))});
    }
  }
  return idx;
}

Tensor<float> load_sample_image(const Sample& s, long size) {
  Image img = load_image(s.path);
  if (img.height != size || img.width != size) img = resize_bilinear(img, size, size);
  return image_to_tensor(img);
}

Tensor<float> normalize(const Tensor<float>& x, const NormStats& stats) {
  if (stats.mean.size() != 3 || stats.stddev.size() != 3)
    throw ConfigError("normalize: want 3 channel means and stddevs");
  const bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3) throw DimError("normalize: want (3,H,W) or (N,3,H,W)");
  const long C = batched ? x.dim(1) : x.dim(0);
  if (C != 3) throw DimError("normalize: want 3 channels");
  const long N = batched ? x.dim(0) : 1;
  const long HW = batched ? x.dim(2) * x.dim(3) : x.dim(1) * x.dim(2);
  Tensor<float> out = Tensor<float>::zeros(x.shape());
  for (long n = 0; n < N; ++n)
    for (long c = 0; c < 3; ++c) {
      MapConstVec<float> src(x.value().data() + (n * 3 + c) * HW, HW);
      MapVec<float> dst(out.value().data() + (n * 3 + c) * HW, HW);
      dst.array() = (src.array() - stats.mean[static_cast<std::size_t>(c)]) /
                    stats.stddev[static_cast<std::size_t>(c)];
    }
  return out;
}

Tensor<float> preprocess(const std::string& path, const NormStats& stats, long size) {
  Image img = load_image(path);
  img = resize_bilinear(img, size, size);
  return normalize(image_to_tensor(img), stats);
}

// --- splits -----------------------------------------------------------------

namespace {

// Round-robin dealing with a cursor carried across classes: per class AND
// globally the fold sizes differ by at most one.
SplitPlan deal_stratified(const std::vector<long>& labels, long k, std::uint64_t seed) {
  const long n = static_cast<long>(labels.size());
  long num_classes = 0;
  for (long l : labels) num_classes = std::max(num_classes, l + 1);
  SplitPlan plan;
  plan.kind = SplitPlan::Kind::KFold;
  plan.k = k;
  plan.seed = seed;
  plan.fold_of.assign(static_cast<std::size_t>(n), -1);
  long cursor = 0;
  for (long c = 0; c < num_classes; ++c) {
    std::vector<long> members;
    for (long i = 0; i < n; ++i)
      if (labels[i] == c) members.push_back(i);
    Rng rng = Rng::derive(seed, {0x53504C49u, static_cast<std::uint64_t>(c)});
    rng.shuffle(members);
    for (long idx : members) {
      plan.fold_of[static_cast<std::size_t>(idx)] = cursor % k;
      ++cursor;
    }
  }
  return plan;
}

}  // namespace

SplitPlan make_kfold_split(const std::vector<long>& labels, long k, std::uint64_t seed) {
  const long n = static_cast<long>(labels.size());
  if (k < 2) throw ConfigError("k-fold split needs k >= 2");
  if (k > n)
    throw ConfigError("k-fold split: k=" + std::to_string(k) + " exceeds n=" +
                      std::to_string(n));
  return deal_stratified(labels, k, seed);
}

SplitPlan make_holdout_split(const std::vector<long>& labels, double train_fraction,
                             std::uint64_t seed) {
  const long n = static_cast<long>(labels.size());
  if (n < 1) throw ConfigError("hold-out split on an empty dataset");
  if (train_fraction <= 0.0 || train_fraction > 1.0)
    throw ConfigError("hold-out split: train fraction must lie in (0,1]");
  const long train_n = static_cast<long>(std::floor(train_fraction * n + 0.5));
  long num_classes = 0;
  for (long l : labels) num_classes = std::max(num_classes, l + 1);

  SplitPlan plan;
  plan.kind = SplitPlan::Kind::HoldOut;
  plan.train_fraction = train_fraction;
  plan.seed = seed;
  plan.fold_of.assign(labels.size(), 1);

  // per class: floor of the proportional share; distribute the remainder by
  // largest fractional part (ties by class id) so the global count is exact
  std::vector<std::vector<long>> members(static_cast<std::size_t>(num_classes));
  for (long i = 0; i < n; ++i) members[static_cast<std::size_t>(labels[i])].push_back(i);
  std::vector<long> take(static_cast<std::size_t>(num_classes));
  std::vector<std::pair<double, long>> frac;
  long assigned = 0;
  for (long c = 0; c < num_classes; ++c) {
    const double share =
        train_fraction * static_cast<double>(members[static_cast<std::size_t>(c)].size());
    take[static_cast<std::size_t>(c)] = static_cast<long>(std::floor(share));
    assigned += take[static_cast<std::size_t>(c)];
    frac.push_back({share - std::floor(share), c});
  }
  std::sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (long r = 0; r < train_n - assigned; ++r) {
    const long c = frac[static_cast<std::size_t>(r % num_classes)].second;
    ++take[static_cast<std::size_t>(c)];
  }
  for (long c = 0; c < num_classes; ++c) {
    auto& m = members[static_cast<std::size_t>(c)];
    Rng rng = Rng::derive(seed, {0x484F4C44u, static_cast<std::uint64_t>(c)});
    rng.shuffle(m);
    const long t = std::min<long>(take[static_cast<std::size_t>(c)],
                                  static_cast<long>(m.size()));
    for (long i = 0; i < t; ++i) plan.fold_of[static_cast<std::size_t>(m[i])] = 0;
  }
  return plan;
}

SplitPlan make_subject_disjoint_kfold(const std::vector<long>& labels,
                                      const std::vector<std::string>& subjects, long k,
                                      std::uint64_t seed) {
  if (labels.size() != subjects.size())
    throw ConfigError("subject-disjoint split: labels/subjects size mismatch");
  std::vector<std::string> ids;
  for (const auto& s : subjects)
    if (std::find(ids.begin(), ids.end(), s) == ids.end()) ids.push_back(s);
  if (static_cast<long>(ids.size()) < k)
    throw ConfigError("subject-disjoint split: fewer subjects than folds");
  std::sort(ids.begin(), ids.end());
  Rng rng = Rng::derive(seed, {0x53554244u});
  rng.shuffle(ids);

  // greedy: next subject goes to the currently smallest fold
  std::vector<long> fold_sizes(static_cast<std::size_t>(k), 0);
  std::vector<long> subject_fold(ids.size());
  std::vector<long> subject_count(ids.size(), 0);
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const auto it = std::find(ids.begin(), ids.end(), subjects[i]);
    ++subject_count[static_cast<std::size_t>(it - ids.begin())];
  }
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return subject_count[a] > subject_count[b]; });
  for (std::size_t oi : order) {
    const long f = static_cast<long>(std::min_element(fold_sizes.begin(), fold_sizes.end()) -
                                     fold_sizes.begin());
    subject_fold[oi] = f;
    fold_sizes[static_cast<std::size_t>(f)] += subject_count[oi];
  }
  SplitPlan plan;
  plan.kind = SplitPlan::Kind::KFold;
  plan.k = k;
  plan.seed = seed;
  plan.fold_of.resize(labels.size());
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const auto it = std::find(ids.begin(), ids.end(), subjects[i]);
    plan.fold_of[i] = subject_fold[static_cast<std::size_t>(it - ids.begin())];
  }
  return plan;
}

std::string split_to_json(const SplitPlan& plan, const DatasetIndex& index) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["kind"] = plan.kind == SplitPlan::Kind::KFold ? "kfold" : "holdout";
  if (plan.kind == SplitPlan::Kind::KFold) j["k"] = plan.k;
  else j["train_fraction"] = plan.train_fraction;
  j["seed"] = plan.seed;
  nlohmann::json folds = nlohmann::json::object();
  for (std::size_t i = 0; i < plan.fold_of.size(); ++i)
    folds[index.samples[i].path] = plan.fold_of[i];
  j["folds"] = folds;
  return j.dump(2);
}

// --- augmentation -----------------------------------------------------------

namespace {

float sample_clamped(const Tensor<float>& img, long c, long h, long w, long H, long W) {
  h = std::clamp(h, 0L, H - 1);
  w = std::clamp(w, 0L, W - 1);
  return img.value()[(c * H + h) * W + w];
}

// Inverse-mapped affine warp with bilinear sampling and edge clamping.
// Maps output pixel (y,x) through the inverse transform around the center.
Tensor<float> warp_affine(const Tensor<float>& img, double m00, double m01, double m10,
                          double m11, double tx, double ty) {
  const long H = img.dim(1), W = img.dim(2);
  const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
  Tensor<float> out = Tensor<float>::zeros(img.shape());
  for (long y = 0; y < H; ++y) {
    for (long x = 0; x < W; ++x) {
      const double dy = y - cy - ty, dx = x - cx - tx;
      const double sy = m00 * dy + m01 * dx + cy;
      const double sx = m10 * dy + m11 * dx + cx;
      const long y0 = static_cast<long>(std::floor(sy));
      const long x0 = static_cast<long>(std::floor(sx));
      const float wy = static_cast<float>(sy - y0), wx = static_cast<float>(sx - x0);
      for (long c = 0; c < 3; ++c) {
        const float top = sample_clamped(img, c, y0, x0, H, W) * (1 - wx) +
                          sample_clamped(img, c, y0, x0 + 1, H, W) * wx;
        const float bot = sample_clamped(img, c, y0 + 1, x0, H, W) * (1 - wx) +
                          sample_clamped(img, c, y0 + 1, x0 + 1, H, W) * wx;
        out.value()[(c * H + y) * W + x] = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

}  // namespace

Tensor<float> augment(const Tensor<float>& image, const AugmentPolicy& policy, Rng& rng) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimError("augment: want (3,H,W)");
  const long H = image.dim(1), W = image.dim(2);
  Tensor<float> img = Tensor<float>::zeros(image.shape());
  img.value() = image.value();
  if (!policy.enabled) return img;

  if (policy.horizontal_flip && rng.bernoulli(0.5)) {
    Tensor<float> flipped = Tensor<float>::zeros(img.shape());
    for (long c = 0; c < 3; ++c)
      for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x)
          flipped.value()[(c * H + y) * W + x] = img.value()[(c * H + y) * W + (W - 1 - x)];
    img = flipped;
  }

  if (policy.rotation) {
    const double deg = rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg);
    if (deg != 0.0) {
      const double a = deg * 3.14159265358979323846 / 180.0;
      // inverse rotation matrix in (y,x) coordinates
      img = warp_affine(img, std::cos(a), -std::sin(a), std::sin(a), std::cos(a), 0.0, 0.0);
    }
  }

  if (policy.color_jitter) {
    const float b = static_cast<float>(1.0 + rng.uniform(-policy.jitter, policy.jitter));
    const float ct = static_cast<float>(1.0 + rng.uniform(-policy.jitter, policy.jitter));
    const float sat = static_cast<float>(1.0 + rng.uniform(-policy.jitter, policy.jitter));
    auto& v = img.value();
    v *= b;
    const long HW = H * W;
    float mean_all = v.mean();
    v = ((v.array() - mean_all) * ct + mean_all).matrix();
    for (long i = 0; i < HW; ++i) {
      const float r = v[0 * HW + i], g = v[1 * HW + i], bl = v[2 * HW + i];
      const float gray = 0.299f * r + 0.587f * g + 0.114f * bl;
      v[0 * HW + i] = gray + (r - gray) * sat;
      v[1 * HW + i] = gray + (g - gray) * sat;
      v[2 * HW + i] = gray + (bl - gray) * sat;
    }
  }

  if (policy.affine) {
    const double ty = rng.uniform(-policy.max_translate, policy.max_translate) * H;
    const double tx = rng.uniform(-policy.max_translate, policy.max_translate) * W;
    const double s = rng.uniform(policy.scale_lo, policy.scale_hi);
    img = warp_affine(img, 1.0 / s, 0.0, 0.0, 1.0 / s, tx, ty);
  }

  if (policy.gaussian_blur) {
    const double sigma = rng.uniform(policy.blur_sigma_lo, policy.blur_sigma_hi);
    const double k0 = 1.0, k1 = std::exp(-1.0 / (2.0 * sigma * sigma));
    const double norm = k0 + 2.0 * k1;
    const float w0 = static_cast<float>(k0 / norm), w1 = static_cast<float>(k1 / norm);
    Tensor<float> tmp = Tensor<float>::zeros(img.shape());
    for (long c = 0; c < 3; ++c)
      for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x)
          tmp.value()[(c * H + y) * W + x] =
              w1 * sample_clamped(img, c, y, x - 1, H, W) + w0 * img.value()[(c * H + y) * W + x] +
              w1 * sample_clamped(img, c, y, x + 1, H, W);
    for (long c = 0; c < 3; ++c)
      for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x)
          img.value()[(c * H + y) * W + x] =
              w1 * sample_clamped(tmp, c, y - 1, x, H, W) + w0 * tmp.value()[(c * H + y) * W + x] +
              w1 * sample_clamped(tmp, c, y + 1, x, H, W);
  }

  for (long i = 0; i < img.size(); ++i)
    img.value()[i] = std::clamp(img.value()[i], 0.0f, 1.0f);
  return img;
}

// --- synthetic fixture -------------------------------------------------------

namespace {

const char* kSixEmotions[6] = {"anger", "disgust", "fear", "happiness", "sadness", "surprise"};
const char* kSevenEmotions[7] = {"afraid", "angry",  "disgust", "happy",
                                 "neutral", "sad", "surprise"};

std::string fixture_class_name(long classes, long c) {
  if (classes == 6) return kSixEmotions[c];
  if (classes == 7) return kSevenEmotions[c];
  char buf[32];
  std::snprintf(buf, sizeof(buf), "class%02ld", c);
  return buf;
}

// Distinct geometry and tint per class, mild per-image variation.
Image fixture_image(long c, Rng& rng) {
  const long S = 224;
  Image img;
  img.height = S;
  img.width = S;
  img.data.assign(static_cast<std::size_t>(3 * S * S), 0.0f);
  const long kind = c % 8;
  const double phase = rng.uniform(0.0, 20.0);
  const double period = 18.0 + rng.uniform(0.0, 8.0);
  const double cx = S / 2.0 + rng.uniform(-8.0, 8.0);
  const double cy = S / 2.0 + rng.uniform(-8.0, 8.0);
  const double radius = S * (0.22 + rng.uniform(0.0, 0.08));
  // per-class tint, fixed across images of the class
  Rng tint_rng = Rng::derive(0x54494E54u, {static_cast<std::uint64_t>(c)});
  const float tint[3] = {static_cast<float>(0.35 + 0.6 * tint_rng.uniform()),
                         static_cast<float>(0.35 + 0.6 * tint_rng.uniform()),
                         static_cast<float>(0.35 + 0.6 * tint_rng.uniform())};
  for (long y = 0; y < S; ++y) {
    for (long x = 0; x < S; ++x) {
      double v = 0.0;
      switch (kind) {
        case 0: v = std::fmod(y + phase, period) < period / 2 ? 1.0 : 0.15; break;
        case 1: v = std::fmod(x + phase, period) < period / 2 ? 1.0 : 0.15; break;
        case 2:
          v = ((long)((y + phase) / period) + (long)((x + phase) / period)) % 2 ? 1.0 : 0.15;
          break;
        case 3: {
          const double d = std::hypot(y - cy, x - cx);
          v = d < radius ? 1.0 : 0.15;
          break;
        }
        case 4: v = (y + x + phase) / (2.0 * S); break;
        case 5: {
          const double d = std::max(std::abs(y - cy), std::abs(x - cx));
          v = (d > radius * 0.6 && d < radius) ? 1.0 : 0.15;
          break;
        }
        case 6: v = std::fmod(y - x + 3.0 * S + phase, period) < period / 2 ? 1.0 : 0.15; break;
        default: {
          const double d = std::hypot(y - cy, x - cx);
          v = std::clamp(1.0 - d / (0.7 * S), 0.0, 1.0);
          break;
        }
      }
      const float noise = static_cast<float>(rng.uniform(-0.03, 0.03));
      for (long ch = 0; ch < 3; ++ch)
        img.at(ch, y, x) = std::clamp(static_cast<float>(v) * tint[ch] + noise, 0.0f, 1.0f);
    }
  }
  return img;
}

}  // namespace

void generate_fixture(const std::string& root, long classes, long per_class,
                      std::uint64_t seed) {
  if (classes < 2) throw ConfigError("fixture: need at least two classes");
  if (per_class < 1) throw ConfigError("fixture: need at least one image per class");
  for (long c = 0; c < classes; ++c) {
    const fs::path dir = fs::path(root) / fixture_class_name(classes, c);
    fs::create_directories(dir);
    for (long i = 0; i < per_class; ++i) {
      Rng rng = Rng::derive(seed, {0x46495855u, static_cast<std::uint64_t>(c),
                                   static_cast<std::uint64_t>(i)});
      Image img = fixture_image(c, rng);
      char name[32];
      std::snprintf(name, sizeof(name), "s%02ld_img%03ld.png", i % 12, i);
      save_png((dir / name).string(), img);
    }
  }
}

}  // namespace ferlite
