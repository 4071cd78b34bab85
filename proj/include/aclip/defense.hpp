// Bound construction and tightening. Bounds are initialized from per-unit
// activation statistics over clean defender samples (mean + z * std, or the
// observed maximum) and then tightened by gradient descent on a
// cross-entropy-plus-L1 objective whose trade-off coefficient adapts to a
// validation accuracy budget. A plain fine-tuning comparator lives here too.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "aclip/attack.hpp"
#include "aclip/bounds.hpp"
#include "aclip/image.hpp"
#include "aclip/net.hpp"

namespace aclip {

// Either a z-score multiplier or "use each unit's observed maximum".
struct ZValue {
  bool use_max = false;
  double z = 4.0;

  ZValue(double value) : z(value) {}  // NOLINT: implicit by design
  static ZValue max() {
    ZValue v(0.0);
    v.use_max = true;
    return v;
  }
};

namespace detail {

template <typename T>
struct LayerMoments {
  Shape shape;                 // shape of the resulting bound tensor
  std::vector<double> sum;
  std::vector<double> sum_sq;
  std::vector<double> maximum;
  std::size_t count = 0;       // pooled observations per element
};

// Accumulates per-element (FeatureMap) or per-channel (PerChannel) moments
// of post-activation values over a clean sample set.
template <typename T>
std::map<int, LayerMoments<T>> collect_moments(const Classifier<T>& model,
                                               const std::vector<Image>& samples,
                                               BoundShape bound_shape) {
  if (samples.empty())
    throw config_error("activation statistics need a non-empty sample set");
  NoGradGuard no_grad;
  std::map<int, LayerMoments<T>> moments;
  for (const auto& img : samples) {
    ActivationTrace<T> trace;
    forward_traced(model, to_tensor<T>(img), trace);
    for (const auto& [layer, act] : trace) {
      const bool pooled = bound_shape == BoundShape::PerChannel && act.rank() == 3;
      auto& m = moments[layer];
      if (m.sum.empty()) {
        m.shape = pooled ? Shape{act.shape()[0], 1, 1} : act.shape();
        const std::size_t n = shape_numel(m.shape);
        m.sum.assign(n, 0.0);
        m.sum_sq.assign(n, 0.0);
        m.maximum.assign(n, -std::numeric_limits<double>::infinity());
      }
      const std::size_t plane = pooled ? act.shape()[1] * act.shape()[2] : 1;
      auto av = act.values();
      for (std::size_t i = 0; i < av.size(); ++i) {
        const std::size_t slot = pooled ? i / plane : i;
        const double v = static_cast<double>(av[i]);
        m.sum[slot] += v;
        m.sum_sq[slot] += v * v;
        m.maximum[slot] = std::max(m.maximum[slot], v);
      }
      m.count += pooled ? plane : 1;
    }
  }
  return moments;
}

}  // namespace detail

// Uniform statistical bounds: mean + z * std per unit (population standard
// deviation over the sample set), or each unit's observed maximum.
template <typename T>
BoundSet<T> zscore_bounds(const Classifier<T>& model,
                          const std::vector<Image>& defender_train, ZValue z,
                          BoundShape bound_shape = BoundShape::FeatureMap) {
  require_clean(defender_train, "zscore_bounds");
  auto moments = detail::collect_moments(model, defender_train, bound_shape);
  BoundSet<T> bounds;
  bounds.bound_shape = bound_shape;
  for (auto& [layer, m] : moments) {
    std::vector<T> values(m.sum.size());
    const double inv_n = 1.0 / static_cast<double>(m.count);
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (z.use_max) {
        values[i] = static_cast<T>(m.maximum[i]);
      } else {
        const double mean = m.sum[i] * inv_n;
        const double var = std::max(0.0, m.sum_sq[i] * inv_n - mean * mean);
        values[i] = static_cast<T>(mean + z.z * std::sqrt(var));
      }
    }
    bounds.sigma.emplace(layer,
                         Tensor<T>::from_values(m.shape, std::move(values)));
  }
  return bounds;
}

// The loose starting boundary: mean + 4 * std per unit.
template <typename T>
BoundSet<T> init_bounds(const Classifier<T>& model,
                        const std::vector<Image>& defender_train,
                        BoundShape bound_shape = BoundShape::FeatureMap) {
  return zscore_bounds(model, defender_train, ZValue(4.0), bound_shape);
}

struct TightenConfig {
  double epsilon = 0.02;      // tolerated validation accuracy drop
  double alpha0 = 0.001;      // initial CE / L1 trade-off coefficient
  std::size_t steps = 50;
  double lr = 0.001;
  double val_fraction = 0.2;  // tail of the shuffled defender set
  std::vector<int> layer_subset;  // empty = bound every activation layer
  BoundShape bound_shape = BoundShape::FeatureMap;
  PostMode post_mode = PostMode::Clip;
  std::size_t batch = 0;      // 0 = full batch per step
  std::uint64_t seed = 0;

  void validate() const {
    if (!(epsilon > 0.0 && epsilon < 1.0))
      throw config_error("epsilon must lie in (0,1)");
    if (alpha0 <= 0.0) throw config_error("alpha0 must be positive");
    if (steps < 1) throw config_error("steps must be >= 1");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
      throw config_error("val_fraction must lie in (0,1)");
    if (lr <= 0.0) throw config_error("learning rate must be positive");
  }
};

struct TightenStep {
  std::size_t step = 0;
  double loss = 0.0;      // objective value at the point the gradient was taken
  double ce = 0.0;        // its cross-entropy component
  double sigma_l1 = 0.0;  // L1 mass of the updated bounds
  double alpha = 0.0;     // trade-off coefficient used this step
  double val_acc = 0.0;   // validation accuracy of the updated bounds
  bool accepted = false;  // updated bounds became the best-so-far
};

struct TightenLog {
  double initial_accuracy = 0.0;  // P0, unbounded model on the validation split
  double initial_sigma_l1 = 0.0;
  std::size_t train_count = 0;
  std::size_t val_count = 0;
  std::vector<TightenStep> steps;
};

template <typename T>
struct TightenResult {
  BoundSet<T> bounds;
  TightenLog log;
};

namespace detail {

constexpr double kAlphaMin = 1e-8;
constexpr double kAlphaMax = 1e8;

template <typename T>
double subset_accuracy(const Classifier<T>& model,
                       const std::vector<Image>& images,
                       const std::vector<std::size_t>& indices,
                       const BoundSet<T>* bounds) {
  std::size_t correct = 0;
  for (std::size_t idx : indices)
    if (predict(model, images[idx], bounds) == images[idx].label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

// Temporarily turns parameter gradients off so that backward passes during
// tightening only propagate toward the bound tensors.
template <typename T>
class FreezeParameters {
 public:
  explicit FreezeParameters(Classifier<T>& model) : params_(model.parameters()) {
    for (auto& p : params_) {
      previous_.push_back(p.requires_grad());
      p.set_requires_grad(false);
    }
  }
  ~FreezeParameters() {
    for (std::size_t i = 0; i < params_.size(); ++i)
      params_[i].set_requires_grad(previous_[i]);
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<bool> previous_;
};

}  // namespace detail

// Tightens bounds on a frozen model using clean defender data only.
//
// The defender set is shuffled once by seed; the trailing val_fraction forms
// the validation split. Bounds start at mean + 4 * std over the training
// split and are updated by Adam on
//     L = (1/n_t) sum CE(bounded_model(x_i), y_i) + alpha * |sigma|_1,
// with alpha halved after any step whose validation accuracy drop exceeds
// epsilon and doubled otherwise. The best bounds seen (accuracy within the
// budget, strictly smaller L1 mass) are returned; bounds for
// nonnegative-range activations are clamped at zero after each step.
template <typename T>
TightenResult<T> tighten(Classifier<T>& model,
                         const std::vector<Image>& defender_data,
                         const TightenConfig& cfg) {
  cfg.validate();
  require_clean(defender_data, "tighten");
  const std::size_t n = defender_data.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng split_rng(Rng::derive(cfg.seed, 0x5B117));
  split_rng.shuffle(order.begin(), order.end());
  const auto n_val = static_cast<std::size_t>(
      std::llround(cfg.val_fraction * static_cast<double>(n)));
  if (n_val == 0 || n_val >= n)
    throw config_error("defender split leaves an empty train or validation set");
  std::vector<std::size_t> train_idx(order.begin(), order.end() - n_val);
  std::vector<std::size_t> val_idx(order.end() - n_val, order.end());

  std::vector<Image> train_split;
  train_split.reserve(train_idx.size());
  for (std::size_t idx : train_idx) train_split.push_back(defender_data[idx]);

  // sigma_0 from the training split, restricted to the requested layers.
  BoundSet<T> sigma = init_bounds(model, train_split, cfg.bound_shape);
  if (!cfg.layer_subset.empty()) {
    const int layer_count = model.activation_layer_count();
    for (int key : cfg.layer_subset)
      if (key < 1 || key > layer_count)
        throw config_error("layer subset references activation layer " +
                           std::to_string(key) + "; model has 1.." +
                           std::to_string(layer_count));
    std::map<int, Tensor<T>> kept;
    for (int key : cfg.layer_subset) kept.emplace(key, sigma.sigma.at(key));
    sigma.sigma = std::move(kept);
  }
  sigma.post_mode = PostMode::Clip;  // the optimized objective always clips

  TightenLog log;
  log.train_count = train_idx.size();
  log.val_count = val_idx.size();
  log.initial_accuracy =
      detail::subset_accuracy(model, defender_data, val_idx, nullptr);
  log.initial_sigma_l1 = sigma.l1();

  BoundSet<T> best = sigma.clone();
  double best_l1 = log.initial_sigma_l1;
  const double p0 = log.initial_accuracy;

  std::vector<Tensor<T>> sigma_params;
  std::vector<int> sigma_layers;
  for (auto& [layer, tensor] : sigma.sigma) {
    tensor.set_requires_grad(true);
    sigma_params.push_back(tensor);
    sigma_layers.push_back(layer);
  }

  detail::FreezeParameters<T> freeze(model);
  AdamState<T> adam;
  adam.reset(sigma_params);
  double alpha = cfg.alpha0;

  std::vector<std::size_t> batch_order = train_idx;
  Rng batch_rng(Rng::derive(cfg.seed, 0xBA7C4));
  std::size_t batch_cursor = 0;

  for (std::size_t s = 1; s <= cfg.steps; ++s) {
    std::vector<std::size_t> step_samples;
    if (cfg.batch == 0 || cfg.batch >= train_idx.size()) {
      step_samples = train_idx;
    } else {
      for (std::size_t i = 0; i < cfg.batch; ++i) {
        if (batch_cursor == batch_order.size()) {
          batch_rng.shuffle(batch_order.begin(), batch_order.end());
          batch_cursor = 0;
        }
        step_samples.push_back(batch_order[batch_cursor++]);
      }
    }

    std::vector<Tensor<T>> ce_terms;
    ce_terms.reserve(step_samples.size());
    for (std::size_t idx : step_samples) {
      const Image& img = defender_data[idx];
      ce_terms.push_back(softmax_cross_entropy(
          forward_bounded(model, to_tensor<T>(img), sigma),
          static_cast<std::size_t>(img.label)));
    }
    Tensor<T> ce = scale(sum_of(ce_terms),
                         1.0 / static_cast<double>(ce_terms.size()));
    std::vector<Tensor<T>> l1_terms;
    for (auto& p : sigma_params) l1_terms.push_back(l1_norm(p));
    Tensor<T> loss = sum_of<T>({ce, scale(sum_of(l1_terms), alpha)});

    const double loss_value = static_cast<double>(loss.item());
    const double ce_value = static_cast<double>(ce.item());
    if (!std::isfinite(loss_value))
      throw numeric_error("tightening diverged: non-finite loss");

    for (auto& p : sigma_params) p.zero_grad();
    loss.backward();
    adam_step(sigma_params, adam, cfg.lr);

    for (std::size_t i = 0; i < sigma_params.size(); ++i) {
      if (!activation_nonnegative(model.activation_kind(sigma_layers[i])))
        continue;
      for (auto& v : sigma_params[i].values_mut()) v = std::max(v, T(0));
    }

    const double sigma_l1 = sigma.l1();
    const double val_acc =
        detail::subset_accuracy(model, defender_data, val_idx, &sigma);
    const bool within_budget = val_acc >= p0 - cfg.epsilon;
    const bool accepted = within_budget && sigma_l1 < best_l1;
    if (accepted) {
      best = sigma.clone();
      best_l1 = sigma_l1;
    }
    log.steps.push_back(
        {s, loss_value, ce_value, sigma_l1, alpha, val_acc, accepted});

    alpha = (p0 - val_acc > cfg.epsilon) ? alpha / 2.0 : alpha * 2.0;
    alpha = std::clamp(alpha, detail::kAlphaMin, detail::kAlphaMax);
  }

  best.post_mode = cfg.post_mode;
  for (auto& [layer, tensor] : best.sigma) tensor.set_requires_grad(false);
  return {std::move(best), std::move(log)};
}

// Inference-time wrapper combining a classifier with a bound set.
template <typename T>
struct DefendedClassifier {
  Classifier<T> model;  // shares parameter storage; treat as read-only
  BoundSet<T> bounds;

  int predict_class(const Image& img) const {
    return predict(model, img, &bounds);
  }
  int predict_class(const Tensor<T>& x) const {
    return predict(model, x, &bounds);
  }
};

template <typename T>
DefendedClassifier<T> apply_defense(const Classifier<T>& model,
                                    const BoundSet<T>& bounds) {
  const int layer_count = model.activation_layer_count();
  for (const auto& [key, tensor] : bounds.sigma) {
    if (key < 1 || key > layer_count)
      throw config_error("bound key " + std::to_string(key) +
                         " outside activation layers 1.." +
                         std::to_string(layer_count));
    const Shape act = model.activation_shape(key);
    const bool exact = tensor.shape() == act;
    const bool per_channel = act.size() == 3 && tensor.rank() == 3 &&
                             tensor.shape()[0] == act[0] &&
                             tensor.shape()[1] == 1 && tensor.shape()[2] == 1;
    if (!exact && !per_channel)
      throw config_error("bound shape " + shape_str(tensor.shape()) +
                         " incompatible with activation layer " +
                         std::to_string(key) + " of shape " + shape_str(act));
  }
  return {model, bounds.clone()};
}

template <typename T>
struct FinetuneResult {
  Classifier<T> model;
  TrainLog log;
};

// Plain fine-tuning on the clean defender data; the comparator defense.
template <typename T>
FinetuneResult<T> finetune_baseline(const Classifier<T>& model,
                                    const std::vector<Image>& defender_data,
                                    std::size_t epochs, double lr,
                                    std::uint64_t seed = 0) {
  require_clean(defender_data, "finetune_baseline");
  FinetuneResult<T> result;
  result.model = model.clone();
  TrainOptions opts;
  opts.epochs = epochs;
  opts.lr = lr;
  opts.batch_size = 32;
  opts.seed = seed;
  result.log = train(result.model, defender_data, opts);
  return result;
}

// Indices of the defender-visible subset: a seeded shuffle prefix of the
// Clean-provenance samples, sized as a fraction of the whole training set.
inline std::vector<std::size_t> defender_split(const PoisonedDataset& data,
                                               double fraction,
                                               std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 0.5))
    throw config_error("defender fraction must lie in (0, 0.5]");
  std::vector<std::size_t> clean_idx;
  for (std::size_t i = 0; i < data.images.size(); ++i)
    if (data.images[i].provenance == Provenance::Clean) clean_idx.push_back(i);
  const auto want = static_cast<std::size_t>(std::llround(
      fraction * static_cast<double>(data.images.size())));
  if (want == 0)
    throw config_error("defender fraction selects zero samples");
  if (want > clean_idx.size())
    throw config_error("defender fraction exceeds available clean samples");
  Rng rng(Rng::derive(seed, 0xDEF));
  rng.shuffle(clean_idx.begin(), clean_idx.end());
  clean_idx.resize(want);
  return clean_idx;
}

inline std::vector<Image> gather_images(const PoisonedDataset& data,
                                        const std::vector<std::size_t>& indices) {
  std::vector<Image> out;
  out.reserve(indices.size());
  for (std::size_t idx : indices) out.push_back(data.images[idx]);
  return out;
}

}  // namespace aclip
