// Data poisoning: trigger definitions (patch overwrite and global blending),
// poisoning strategies (all-to-one, label-specific and trigger-specific with
// negative samples), and the activation-suppression training loss used by
// the adaptive attacker.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "aclip/image.hpp"
#include "aclip/net.hpp"
#include "aclip/rng.hpp"

namespace aclip {

struct TriggerSpec {
  enum class Kind { Patch, Blend };

  Kind kind = Kind::Patch;
  // Patch: a small C x ph x pw block overwritten at (anchor_row, anchor_col).
  // Blend: a full-size C x H x W pattern mixed in with ratio blend_beta.
  int channels = 0;
  int pattern_height = 0;
  int pattern_width = 0;
  std::vector<float> pattern;
  int anchor_row = 0;
  int anchor_col = 0;
  double blend_beta = 0.2;

  float pattern_at(int c, int y, int x) const {
    return pattern[(static_cast<std::size_t>(c) * pattern_height + y) *
                       pattern_width + x];
  }

  void validate(int img_channels, int img_height, int img_width) const {
    if (channels != img_channels)
      throw config_error("trigger channel count does not match images");
    if (kind == Kind::Patch) {
      if (anchor_row < 0 || anchor_col < 0 ||
          anchor_row + pattern_height > img_height ||
          anchor_col + pattern_width > img_width)
        throw config_error("patch trigger does not fit inside the image");
    } else {
      if (pattern_height != img_height || pattern_width != img_width)
        throw config_error("blend trigger pattern must match image extents");
      if (!(blend_beta > 0.0 && blend_beta < 1.0))
        throw config_error("blend ratio must lie in (0,1)");
    }
  }
};

// Solid white k x k patch at the bottom-right corner.
inline TriggerSpec default_patch_trigger(int channels, int height, int width,
                                         int k = 3) {
  TriggerSpec t;
  t.kind = TriggerSpec::Kind::Patch;
  t.channels = channels;
  t.pattern_height = k;
  t.pattern_width = k;
  t.pattern.assign(static_cast<std::size_t>(channels) * k * k, 1.0f);
  t.anchor_row = height - k;
  t.anchor_col = width - k;
  t.validate(channels, height, width);
  return t;
}

// Fixed-seed uniform-noise blend pattern.
inline TriggerSpec default_blend_trigger(int channels, int height, int width,
                                         double beta = 0.2,
                                         std::uint64_t seed = 99) {
  TriggerSpec t;
  t.kind = TriggerSpec::Kind::Blend;
  t.channels = channels;
  t.pattern_height = height;
  t.pattern_width = width;
  t.blend_beta = beta;
  Rng rng(Rng::derive(seed, 0xB1ED));
  t.pattern.resize(static_cast<std::size_t>(channels) * height * width);
  for (auto& p : t.pattern) p = static_cast<float>(rng.uniform());
  t.validate(channels, height, width);
  return t;
}

namespace detail {

inline float clamp01(double v) {
  return static_cast<float>(std::clamp(v, 0.0, 1.0));
}

inline void stamp_pattern(Image& img, const TriggerSpec& t,
                          const std::vector<float>& pattern) {
  if (t.kind == TriggerSpec::Kind::Patch) {
    for (int c = 0; c < t.channels; ++c)
      for (int y = 0; y < t.pattern_height; ++y)
        for (int x = 0; x < t.pattern_width; ++x)
          img.at(c, t.anchor_row + y, t.anchor_col + x) = clamp01(
              pattern[(static_cast<std::size_t>(c) * t.pattern_height + y) *
                          t.pattern_width + x]);
  } else {
    const double beta = t.blend_beta;
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
      img.pixels[i] = clamp01((1.0 - beta) * img.pixels[i] + beta * pattern[i]);
  }
}

}  // namespace detail

// Stamps the trigger onto a copy of the image. Patch overwrites the anchored
// window; Blend mixes pixels as (1-beta)*x + beta*pattern. Output pixels are
// clamped to [0,1]. Labels and provenance are left untouched.
inline Image apply_trigger(const Image& img, const TriggerSpec& t) {
  t.validate(img.channels, img.height, img.width);
  Image out = img;
  detail::stamp_pattern(out, t, t.pattern);
  return out;
}

// Same, but with zero-mean gaussian noise (std = noise_level) added to the
// pattern first; the noised pattern is clamped to [0,1] before stamping.
inline Image apply_trigger_noisy(const Image& img, const TriggerSpec& t,
                                 double noise_level, Rng& rng) {
  t.validate(img.channels, img.height, img.width);
  std::vector<float> noised(t.pattern.size());
  for (std::size_t i = 0; i < noised.size(); ++i)
    noised[i] =
        detail::clamp01(t.pattern[i] + noise_level * rng.gaussian());
  Image out = img;
  detail::stamp_pattern(out, t, noised);
  return out;
}

enum class PoisonMode { AllToOne, LabelSpecific, TriggerSpecific };

inline const char* poison_mode_name(PoisonMode m) {
  switch (m) {
    case PoisonMode::AllToOne: return "all-to-one";
    case PoisonMode::LabelSpecific: return "label-specific";
    case PoisonMode::TriggerSpecific: return "trigger-specific";
  }
  return "?";
}

struct PoisonConfig {
  TriggerSpec trigger;
  int target_label = 0;
  double poison_rate = 0.10;
  PoisonMode mode = PoisonMode::AllToOne;
  int victim_label = -1;      // LabelSpecific
  double noise_level = 0.0;   // TriggerSpecific
  double negative_rate = 0.10;
  std::uint64_t seed = 0;

  void validate() const {
    if (poison_rate < 0.0 || poison_rate > 0.5)
      throw config_error("poison_rate must lie in [0, 0.5]");
    if (mode == PoisonMode::LabelSpecific && victim_label == target_label)
      throw config_error("victim class must differ from the target label");
    if (negative_rate < 0.0 || negative_rate > 0.5)
      throw config_error("negative_rate must lie in [0, 0.5]");
  }
};

struct PoisonedDataset {
  std::vector<Image> images;
  PoisonConfig config;
  int num_classes = 0;

  std::vector<Image> by_provenance(Provenance p) const {
    std::vector<Image> out;
    for (const auto& img : images)
      if (img.provenance == p) out.push_back(img);
    return out;
  }
};

// Builds the attacker's training set from clean samples. Selections are a
// seeded shuffle prefix, so the poisoned fraction matches poison_rate to
// within one sample and the untouched remainder is bit-identical to the
// input.
inline PoisonedDataset poison_dataset(const std::vector<Image>& clean,
                                      const PoisonConfig& cfg,
                                      int num_classes) {
  cfg.validate();
  PoisonedDataset out;
  out.images = clean;
  out.config = cfg;
  out.num_classes = num_classes;
  const std::size_t n = clean.size();
  const auto poison_count =
      static_cast<std::size_t>(std::llround(cfg.poison_rate * static_cast<double>(n)));
  const auto negative_count =
      static_cast<std::size_t>(std::llround(cfg.negative_rate * static_cast<double>(n)));
  Rng rng(Rng::derive(cfg.seed, 0xB0B0));

  auto shuffled_indices = [&](auto&& keep) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i)
      if (keep(clean[i])) idx.push_back(i);
    rng.shuffle(idx.begin(), idx.end());
    return idx;
  };

  switch (cfg.mode) {
    case PoisonMode::AllToOne: {
      auto idx = shuffled_indices([](const Image&) { return true; });
      for (std::size_t i = 0; i < poison_count && i < idx.size(); ++i) {
        Image& img = out.images[idx[i]];
        img = apply_trigger(img, cfg.trigger);
        img.label = cfg.target_label;
        img.provenance = Provenance::Poisoned;
      }
      break;
    }
    case PoisonMode::LabelSpecific: {
      auto victims = shuffled_indices(
          [&](const Image& img) { return img.label == cfg.victim_label; });
      if (victims.empty())
        throw config_error("victim class " + std::to_string(cfg.victim_label) +
                           " absent from the dataset");
      const std::size_t take = std::min(poison_count, victims.size());
      for (std::size_t i = 0; i < take; ++i) {
        Image& img = out.images[victims[i]];
        img = apply_trigger(img, cfg.trigger);
        img.label = cfg.target_label;
        img.provenance = Provenance::Poisoned;
      }
      auto others = shuffled_indices(
          [&](const Image& img) { return img.label != cfg.victim_label; });
      for (std::size_t i = 0; i < negative_count && i < others.size(); ++i) {
        Image& img = out.images[others[i]];
        img = apply_trigger(img, cfg.trigger);  // keeps its true label
        img.provenance = Provenance::Negative;
      }
      break;
    }
    case PoisonMode::TriggerSpecific: {
      auto idx = shuffled_indices([](const Image&) { return true; });
      std::size_t cursor = 0;
      for (std::size_t i = 0; i < poison_count && cursor < idx.size();
           ++i, ++cursor) {
        Image& img = out.images[idx[cursor]];
        img = apply_trigger(img, cfg.trigger);
        img.label = cfg.target_label;
        img.provenance = Provenance::Poisoned;
      }
      for (std::size_t i = 0; i < negative_count && cursor < idx.size();
           ++i, ++cursor) {
        Image& img = out.images[idx[cursor]];
        img = apply_trigger_noisy(img, cfg.trigger, cfg.noise_level, rng);
        img.provenance = Provenance::Negative;  // keeps its true label
      }
      break;
    }
  }
  return out;
}

// Activation-suppression loss for the adaptive attacker: cross-entropy on
// the clean batch plus cross-entropy pushing stamped inputs to the target
// label, plus alpha times the summed per-layer mean squared distance between
// clean and stamped activations. The squared distances use the per-layer
// mean (MSE) so the penalty scale is comparable across layer widths.
template <typename T>
struct SuppressionLossParts {
  Tensor<T> total;
  double ce_clean = 0.0;
  double ce_poisoned = 0.0;
  double activation_mse = 0.0;
};

template <typename T>
SuppressionLossParts<T> suppression_loss(const Classifier<T>& model,
                                         const std::vector<Image>& clean_batch,
                                         const std::vector<Image>& poisoned_batch,
                                         double alpha) {
  if (clean_batch.empty() || clean_batch.size() != poisoned_batch.size())
    throw config_error("suppression_loss: batches must pair up one-to-one");
  std::vector<Tensor<T>> ce_clean_terms, ce_poison_terms, mse_terms;
  for (std::size_t i = 0; i < clean_batch.size(); ++i) {
    const Image& clean = clean_batch[i];
    const Image& poisoned = poisoned_batch[i];
    if (clean.pixels.size() != poisoned.pixels.size())
      throw config_error("suppression_loss: paired images differ in shape");
    ActivationTrace<T> clean_trace, poison_trace;
    Tensor<T> clean_logits =
        forward_traced(model, to_tensor<T>(clean), clean_trace);
    Tensor<T> poison_logits =
        forward_traced(model, to_tensor<T>(poisoned), poison_trace);
    ce_clean_terms.push_back(softmax_cross_entropy(
        clean_logits, static_cast<std::size_t>(clean.label)));
    ce_poison_terms.push_back(softmax_cross_entropy(
        poison_logits, static_cast<std::size_t>(poisoned.label)));
    std::vector<Tensor<T>> layer_terms;
    for (const auto& [layer, clean_act] : clean_trace) {
      Tensor<T> diff = sub(clean_act, poison_trace.at(layer));
      layer_terms.push_back(
          scale(sum_squares(diff), 1.0 / static_cast<double>(diff.size())));
    }
    mse_terms.push_back(sum_of(layer_terms));
  }
  const double inv_b = 1.0 / static_cast<double>(clean_batch.size());
  Tensor<T> ce_clean = scale(sum_of(ce_clean_terms), inv_b);
  Tensor<T> ce_poison = scale(sum_of(ce_poison_terms), inv_b);
  Tensor<T> mse = scale(sum_of(mse_terms), inv_b);
  SuppressionLossParts<T> parts;
  parts.ce_clean = static_cast<double>(ce_clean.item());
  parts.ce_poisoned = static_cast<double>(ce_poison.item());
  parts.activation_mse = static_cast<double>(mse.item());
  parts.total = sum_of<T>({ce_clean, ce_poison, scale(mse, alpha)});
  return parts;
}

struct SuppressionTrainLog {
  std::vector<double> epoch_loss;
  double final_train_accuracy = 0.0;
  double final_activation_mse = 0.0;
};

// Adaptive attacker's training loop: every clean sample contributes both its
// normal term and a stamped term labeled with the target class.
template <typename T>
SuppressionTrainLog train_suppression(Classifier<T>& model,
                                      const std::vector<Image>& clean_data,
                                      const TriggerSpec& trigger,
                                      int target_label, double alpha,
                                      const TrainOptions& opts) {
  if (clean_data.empty()) throw config_error("train_suppression: empty dataset");
  auto params = model.parameters();
  AdamState<T> state;
  state.reset(params);
  Rng shuffle_rng(Rng::derive(opts.seed, 0x5487FF));
  std::vector<std::size_t> order(clean_data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  SuppressionTrainLog log;
  const std::size_t batch_size = std::max<std::size_t>(1, opts.batch_size);
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t stop = std::min(order.size(), start + batch_size);
      std::vector<Image> clean_batch, poisoned_batch;
      for (std::size_t i = start; i < stop; ++i) {
        const Image& img = clean_data[order[i]];
        clean_batch.push_back(img);
        Image stamped = apply_trigger(img, trigger);
        stamped.label = target_label;
        poisoned_batch.push_back(std::move(stamped));
      }
      auto parts = suppression_loss(model, clean_batch, poisoned_batch, alpha);
      const double loss_value = static_cast<double>(parts.total.item());
      if (!std::isfinite(loss_value))
        throw numeric_error("training diverged: non-finite loss");
      for (auto& p : params) p.zero_grad();
      parts.total.backward();
      adam_step(params, state, opts.lr);
      epoch_loss += loss_value * static_cast<double>(clean_batch.size());
    }
    log.epoch_loss.push_back(epoch_loss / static_cast<double>(clean_data.size()));
  }

  NoGradGuard no_grad;
  std::size_t correct = 0;
  double mse_total = 0.0;
  for (const auto& img : clean_data) {
    if (predict(model, img) == img.label) ++correct;
    ActivationTrace<T> clean_trace, poison_trace;
    forward_traced(model, to_tensor<T>(img), clean_trace);
    forward_traced(model, to_tensor<T>(apply_trigger(img, trigger)),
                   poison_trace);
    for (const auto& [layer, clean_act] : clean_trace) {
      const auto& poison_act = poison_trace.at(layer);
      double acc = 0.0;
      for (std::size_t i = 0; i < clean_act.size(); ++i) {
        const double d = static_cast<double>(clean_act.values()[i]) -
                         static_cast<double>(poison_act.values()[i]);
        acc += d * d;
      }
      mse_total += acc / static_cast<double>(clean_act.size());
    }
  }
  log.final_train_accuracy =
      static_cast<double>(correct) / static_cast<double>(clean_data.size());
  log.final_activation_mse =
      mse_total / static_cast<double>(clean_data.size());
  return log;
}

}  // namespace aclip
