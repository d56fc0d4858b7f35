#pragma once

#include "ferlite/image.hpp"
#include "ferlite/rng.hpp"
#include "ferlite/tensor.hpp"

#include <optional>
#include <string>
#include <vector>

namespace ferlite {

// One labeled face crop. Pixels are loaded lazily; `load_sample_image`
// returns the (3,224,224) tensor in [0,1].
struct Sample {
  std::string path;
  long label = 0;
  std::string subject_id;  // filename prefix before the first '_', if any
};

struct DatasetIndex {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;  // sorted
  std::vector<std::string> warnings;
  std::vector<std::string> bad_files;

  long num_classes() const { return static_cast<long>(class_names.size()); }
  std::vector<long> labels() const {
    std::vector<long> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.label);
    return out;
  }
};

// Layout: root/<class_name>/*.{png,jpg}. Ordering is lexicographic by path;
// the class table is sorted. With validate=true every file is decoded once
// up front and failures land in bad_files (the caller decides whether that
// aborts the run).
DatasetIndex load_dataset(const std::string& root, bool validate = true);

Tensor<float> load_sample_image(const Sample& s, long size = 224);

// --- normalization ---------------------------------------------------------

struct NormStats {
  std::vector<float> mean{0.485f, 0.456f, 0.406f};
  std::vector<float> stddev{0.229f, 0.224f, 0.225f};
};

// (3,H,W) or (N,3,H,W), in place on a copy: (x - mean_c) / std_c.
Tensor<float> normalize(const Tensor<float>& x, const NormStats& stats);

// decode -> bilinear resize to size x size -> [0,1] -> normalize
Tensor<float> preprocess(const std::string& path, const NormStats& stats, long size = 224);

// --- splits -----------------------------------------------------------------

struct SplitPlan {
  enum class Kind { KFold, HoldOut };
  Kind kind = Kind::KFold;
  long k = 10;                  // KFold
  double train_fraction = 0.8;  // HoldOut; fold 0 = train, fold 1 = test
  std::uint64_t seed = 0;
  std::vector<long> fold_of;  // sample index -> fold id

  long num_folds() const { return kind == Kind::KFold ? k : 2; }
  std::vector<long> indices_of_fold(long fold) const {
    std::vector<long> out;
    for (long i = 0; i < static_cast<long>(fold_of.size()); ++i)
      if (fold_of[i] == fold) out.push_back(i);
    return out;
  }
  std::vector<long> indices_not_in_fold(long fold) const {
    std::vector<long> out;
    for (long i = 0; i < static_cast<long>(fold_of.size()); ++i)
      if (fold_of[i] != fold) out.push_back(i);
    return out;
  }
};

// Stratified k-fold: per class and globally, fold sizes differ by at most 1.
SplitPlan make_kfold_split(const std::vector<long>& labels, long k, std::uint64_t seed);

// Stratified hold-out: train gets floor(fraction*n + 0.5) samples exactly.
SplitPlan make_holdout_split(const std::vector<long>& labels, double train_fraction,
                             std::uint64_t seed);

// Groups samples of one subject into one fold (sizes as balanced as the
// subject structure allows; the ±1 size law does not apply here).
SplitPlan make_subject_disjoint_kfold(const std::vector<long>& labels,
                                      const std::vector<std::string>& subjects, long k,
                                      std::uint64_t seed);

std::string split_to_json(const SplitPlan& plan, const DatasetIndex& index);

// --- augmentation -----------------------------------------------------------

struct AugmentPolicy {
  bool enabled = true;
  bool horizontal_flip = true;  // p = 0.5
  bool rotation = true;         // uniform in [-max_rotation_deg, +...]
  bool color_jitter = true;     // brightness/contrast/saturation in +-jitter
  bool affine = true;           // translate <= max_translate, scale in scale_range
  bool gaussian_blur = true;    // 3x3 kernel, sigma in blur_sigma
  double max_rotation_deg = 10.0;
  double jitter = 0.2;
  double max_translate = 0.05;
  double scale_lo = 0.95, scale_hi = 1.05;
  double blur_sigma_lo = 0.1, blur_sigma_hi = 1.0;
};

// Label-preserving; output stays (3,H,W) in [0,1]. Draws come only from
// `rng`, so seeding rng by (seed, sample, epoch) makes the result
// independent of worker count and call order.
Tensor<float> augment(const Tensor<float>& image, const AugmentPolicy& policy, Rng& rng);

// --- synthetic fixture -------------------------------------------------------

// Writes a class-separable synthetic dataset (distinct geometric pattern and
// tint per class) under root/<class_name>/*.png. Deterministic: a fixed seed
// produces byte-identical files.
void generate_fixture(const std::string& root, long classes, long per_class,
                      std::uint64_t seed);

}  // namespace ferlite
