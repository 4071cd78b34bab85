// Evaluation: clean accuracy, attack success rate, the per-unit activation
// shift study (backdoor-neuron attribution), and a small power-iteration PCA
// for projecting flagged-unit activations.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "aclip/attack.hpp"
#include "aclip/bounds.hpp"
#include "aclip/image.hpp"
#include "aclip/net.hpp"
#include "aclip/rng.hpp"

namespace aclip {

struct EvalReport {
  double clean_accuracy = 0.0;
  double asr = 0.0;
  std::vector<double> per_class_accuracy;
  std::size_t n_clean = 0;
  std::size_t n_poison = 0;  // stamped samples entering the ASR
  std::string fingerprint;
};

// Fraction of clean test samples classified correctly.
template <typename T>
double accuracy(const Classifier<T>& model, const std::vector<Image>& test,
                const BoundSet<T>* bounds = nullptr) {
  if (test.empty()) throw config_error("accuracy: empty test set");
  require_clean(test, "accuracy");
  std::size_t correct = 0;
  for (const auto& img : test)
    if (predict(model, img, bounds) == img.label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

template <typename T>
std::vector<double> per_class_accuracy(const Classifier<T>& model,
                                       const std::vector<Image>& test,
                                       std::size_t num_classes,
                                       const BoundSet<T>* bounds = nullptr) {
  std::vector<std::size_t> correct(num_classes, 0), total(num_classes, 0);
  for (const auto& img : test) {
    const auto label = static_cast<std::size_t>(img.label);
    if (label >= num_classes)
      throw config_error("per_class_accuracy: label out of range");
    ++total[label];
    if (predict(model, img, bounds) == img.label) ++correct[label];
  }
  std::vector<double> acc(num_classes, 0.0);
  for (std::size_t c = 0; c < num_classes; ++c)
    acc[c] = total[c] ? static_cast<double>(correct[c]) /
                            static_cast<double>(total[c])
                      : 0.0;
  return acc;
}

struct AsrOptions {
  double noise_level = 0.0;  // >0: gaussian-noised trigger, fresh per image
  std::uint64_t noise_seed = 0;
  int only_class = -1;       // restrict eligible samples to one true class
};

// Attack success rate: stamp every clean test sample whose true class is not
// the target, and measure how often the prediction lands on the target.
template <typename T>
double asr(const Classifier<T>& model, const std::vector<Image>& clean_test,
           const TriggerSpec& trigger, int target_label,
           const BoundSet<T>* bounds = nullptr, const AsrOptions& opts = {}) {
  require_clean(clean_test, "asr");
  Rng noise_rng(Rng::derive(opts.noise_seed, 0xA52));
  std::size_t eligible = 0, hits = 0;
  for (const auto& img : clean_test) {
    if (img.label == target_label) continue;
    if (opts.only_class >= 0 && img.label != opts.only_class) continue;
    ++eligible;
    const Image stamped =
        opts.noise_level > 0.0
            ? apply_trigger_noisy(img, trigger, opts.noise_level, noise_rng)
            : apply_trigger(img, trigger);
    if (predict(model, stamped, bounds) == target_label) ++hits;
  }
  if (eligible == 0)
    throw config_error("asr: no eligible samples (all carry the target label)");
  return static_cast<double>(hits) / static_cast<double>(eligible);
}

template <typename T>
EvalReport evaluate(const Classifier<T>& model, const std::vector<Image>& test,
                    std::size_t num_classes, const TriggerSpec* trigger,
                    int target_label, const BoundSet<T>* bounds = nullptr,
                    std::string fingerprint = {}) {
  EvalReport report;
  report.clean_accuracy = accuracy(model, test, bounds);
  report.per_class_accuracy =
      per_class_accuracy(model, test, num_classes, bounds);
  report.n_clean = test.size();
  if (trigger) {
    std::size_t eligible = 0;
    for (const auto& img : test)
      if (img.label != target_label) ++eligible;
    report.n_poison = eligible;
    report.asr = asr(model, test, *trigger, target_label, bounds);
  }
  report.fingerprint = std::move(fingerprint);
  return report;
}

// ---------------------------------------------------------------------------
// Per-unit activation shift study.

struct NeuronShiftRow {
  int layer = 0;
  std::size_t unit = 0;
  double clean_mean = 0.0;
  double clean_std = 0.0;
  double poison_mean = 0.0;
  double score = 0.0;
  bool flagged = false;
};

struct NeuronShiftTable {
  double top_fraction = 0.01;
  std::vector<NeuronShiftRow> rows;  // ordered by (layer, unit)

  std::vector<NeuronShiftRow> flagged_rows() const {
    std::vector<NeuronShiftRow> out;
    for (const auto& row : rows)
      if (row.flagged) out.push_back(row);
    return out;
  }
};

namespace detail {

// Unit value per activation layer: the raw value for dense layers, the
// spatial mean per channel for convolutional feature maps.
template <typename T>
std::map<int, std::vector<double>> unit_values(const Classifier<T>& model,
                                               const Image& img) {
  ActivationTrace<T> trace;
  forward_traced(model, to_tensor<T>(img), trace);
  std::map<int, std::vector<double>> out;
  for (const auto& [layer, act] : trace) {
    if (act.rank() == 3) {
      const std::size_t c = act.shape()[0], plane = act.shape()[1] * act.shape()[2];
      std::vector<double> units(c, 0.0);
      auto av = act.values();
      for (std::size_t ci = 0; ci < c; ++ci) {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i)
          acc += static_cast<double>(av[ci * plane + i]);
        units[ci] = acc / static_cast<double>(plane);
      }
      out.emplace(layer, std::move(units));
    } else {
      std::vector<double> units(act.size());
      auto av = act.values();
      for (std::size_t i = 0; i < units.size(); ++i)
        units[i] = static_cast<double>(av[i]);
      out.emplace(layer, std::move(units));
    }
  }
  return out;
}

}  // namespace detail

// Compares per-unit activation statistics between clean samples and their
// stamped counterparts. Units are scored by
//   (poison_mean - clean_mean) / (clean_std + 1e-8)
// and the top ceil(top_fraction * K) units per layer are flagged.
template <typename T>
NeuronShiftTable neuron_shift(const Classifier<T>& model,
                              const std::vector<Image>& clean_samples,
                              const std::vector<Image>& poisoned_samples,
                              double top_fraction = 0.01) {
  if (clean_samples.empty() || poisoned_samples.empty())
    throw config_error("neuron_shift: empty sample set");
  if (!(top_fraction > 0.0 && top_fraction <= 1.0))
    throw config_error("neuron_shift: top_fraction must lie in (0,1]");
  NoGradGuard no_grad;

  std::map<int, std::vector<double>> clean_sum, clean_sum_sq, poison_sum;
  for (const auto& img : clean_samples) {
    for (auto& [layer, units] : detail::unit_values(model, img)) {
      auto& s = clean_sum[layer];
      auto& q = clean_sum_sq[layer];
      if (s.empty()) {
        s.assign(units.size(), 0.0);
        q.assign(units.size(), 0.0);
      }
      for (std::size_t k = 0; k < units.size(); ++k) {
        s[k] += units[k];
        q[k] += units[k] * units[k];
      }
    }
  }
  for (const auto& img : poisoned_samples) {
    for (auto& [layer, units] : detail::unit_values(model, img)) {
      auto& s = poison_sum[layer];
      if (s.empty()) s.assign(units.size(), 0.0);
      for (std::size_t k = 0; k < units.size(); ++k) s[k] += units[k];
    }
  }

  NeuronShiftTable table;
  table.top_fraction = top_fraction;
  const double inv_clean = 1.0 / static_cast<double>(clean_samples.size());
  const double inv_poison = 1.0 / static_cast<double>(poisoned_samples.size());
  for (const auto& [layer, sums] : clean_sum) {
    const std::size_t k_units = sums.size();
    std::vector<NeuronShiftRow> layer_rows(k_units);
    for (std::size_t k = 0; k < k_units; ++k) {
      NeuronShiftRow row;
      row.layer = layer;
      row.unit = k;
      row.clean_mean = sums[k] * inv_clean;
      const double var = std::max(
          0.0, clean_sum_sq[layer][k] * inv_clean - row.clean_mean * row.clean_mean);
      row.clean_std = std::sqrt(var);
      row.poison_mean = poison_sum[layer][k] * inv_poison;
      row.score = (row.poison_mean - row.clean_mean) / (row.clean_std + 1e-8);
      layer_rows[k] = row;
    }
    const auto flag_count = static_cast<std::size_t>(
        std::ceil(top_fraction * static_cast<double>(k_units)));
    std::vector<std::size_t> by_score(k_units);
    for (std::size_t k = 0; k < k_units; ++k) by_score[k] = k;
    std::sort(by_score.begin(), by_score.end(), [&](std::size_t a, std::size_t b) {
      if (layer_rows[a].score != layer_rows[b].score)
        return layer_rows[a].score > layer_rows[b].score;
      return a < b;
    });
    for (std::size_t i = 0; i < flag_count && i < k_units; ++i)
      layer_rows[by_score[i]].flagged = true;
    for (auto& row : layer_rows) table.rows.push_back(row);
  }
  return table;
}

// ---------------------------------------------------------------------------
// PCA via power iteration with deflation.

struct PcaProjection {
  std::size_t dims = 2;
  std::vector<std::vector<double>> coords;      // n x dims
  std::vector<std::vector<double>> components;  // dims x d, orthonormal rows
  std::vector<double> explained;                // eigenvalues (variances)
  std::vector<double> mean;                     // d
};

// Projects row vectors onto their top principal components. Components are
// extracted by power iteration on the (population) covariance with
// deflation; directions with zero remaining variance are filled with a
// deterministic orthonormal completion and zero explained variance.
inline PcaProjection pca_project(const std::vector<std::vector<double>>& samples,
                                 std::size_t dims = 2, double tol = 1e-8,
                                 std::size_t max_iters = 1000) {
  if (samples.size() < dims + 1)
    throw config_error("pca_project: need at least dims+1 samples");
  const std::size_t n = samples.size(), d = samples.front().size();
  for (const auto& row : samples)
    if (row.size() != d)
      throw config_error("pca_project: inconsistent sample dimensions");
  if (d < dims)
    throw config_error("pca_project: fewer data dimensions than components");

  PcaProjection out;
  out.dims = dims;
  out.mean.assign(d, 0.0);
  for (const auto& row : samples)
    for (std::size_t j = 0; j < d; ++j) out.mean[j] += row[j];
  for (auto& m : out.mean) m /= static_cast<double>(n);

  std::vector<std::vector<double>> centered(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      centered[i][j] = samples[i][j] - out.mean[j];

  std::vector<double> cov(d * d, 0.0);
  for (const auto& row : centered)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = a; b < d; ++b) cov[a * d + b] += row[a] * row[b];
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      cov[a * d + b] /= static_cast<double>(n);
      cov[b * d + a] = cov[a * d + b];
    }

  auto normalize = [](std::vector<double>& v) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (double& x : v) x /= norm;
    return norm;
  };
  auto orthogonalize = [&](std::vector<double>& v) {
    for (const auto& comp : out.components) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += v[j] * comp[j];
      for (std::size_t j = 0; j < d; ++j) v[j] -= dot * comp[j];
    }
  };

  Rng rng(0x9CA0);
  double scale_ref = 0.0;
  for (double c : cov) scale_ref = std::max(scale_ref, std::fabs(c));
  for (std::size_t k = 0; k < dims; ++k) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    orthogonalize(v);
    normalize(v);
    double lambda = 0.0;
    bool degenerate = false;
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
      std::vector<double> w(d, 0.0);
      for (std::size_t a = 0; a < d; ++a) {
        double acc = 0.0;
        for (std::size_t b = 0; b < d; ++b) acc += cov[a * d + b] * v[b];
        w[a] = acc;
      }
      orthogonalize(w);
      const double norm = normalize(w);
      if (norm <= tol * std::max(1.0, scale_ref)) {
        degenerate = true;
        break;
      }
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += w[j] * v[j];
      v = std::move(w);
      if (1.0 - std::fabs(dot) < tol) break;
    }
    if (degenerate) {
      if (k == 0)
        throw numeric_error(
            "pca_project: data is rank-deficient, component 1 has zero "
            "variance");
      // Remaining variance is zero: complete the basis deterministically.
      std::vector<double> filler;
      for (std::size_t axis = 0; axis < d; ++axis) {
        filler.assign(d, 0.0);
        filler[axis] = 1.0;
        orthogonalize(filler);
        if (normalize(filler) > 0.5) break;
      }
      v = filler;
      lambda = 0.0;
    } else {
      std::vector<double> w(d, 0.0);
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) w[a] += cov[a * d + b] * v[b];
      lambda = 0.0;
      for (std::size_t j = 0; j < d; ++j) lambda += v[j] * w[j];
    }
    // Canonical sign: the largest-magnitude entry is positive.
    std::size_t arg = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (std::fabs(v[j]) > std::fabs(v[arg])) arg = j;
    if (v[arg] < 0.0)
      for (double& x : v) x = -x;

    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        cov[a * d + b] -= lambda * v[a] * v[b];
    out.components.push_back(std::move(v));
    out.explained.push_back(std::max(0.0, lambda));
  }

  out.coords.assign(n, std::vector<double>(dims, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < dims; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j)
        acc += centered[i][j] * out.components[k][j];
      out.coords[i][k] = acc;
    }
  return out;
}

}  // namespace aclip
