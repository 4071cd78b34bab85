// Feed-forward classifiers: an ordered layer stack (conv / dense / flatten /
// 2x2 max-pool) with per-layer post-activation capture and optional
// upper-bound insertion after any activation layer. The final layer is
// always a Dense head with one logit per class and no activation.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "aclip/adam.hpp"
#include "aclip/bounds.hpp"
#include "aclip/image.hpp"
#include "aclip/ops.hpp"
#include "aclip/rng.hpp"
#include "aclip/tensor.hpp"

namespace aclip {

struct LayerSpec {
  enum class Kind { Conv, Dense, Flatten, MaxPool2 };

  Kind kind = Kind::Dense;
  std::size_t units = 0;   // Conv: output channels, Dense: output features
  std::size_t kernel = 0;  // Conv only
  int stride = 1;
  int padding = 0;
  Activation act = Activation::None;

  static LayerSpec conv(std::size_t channels, std::size_t kernel, int stride,
                        int padding, Activation act) {
    LayerSpec s;
    s.kind = Kind::Conv;
    s.units = channels;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    s.act = act;
    return s;
  }
  static LayerSpec dense(std::size_t features, Activation act) {
    LayerSpec s;
    s.kind = Kind::Dense;
    s.units = features;
    s.act = act;
    return s;
  }
  static LayerSpec flatten() {
    LayerSpec s;
    s.kind = Kind::Flatten;
    return s;
  }
  static LayerSpec maxpool2() {
    LayerSpec s;
    s.kind = Kind::MaxPool2;
    return s;
  }
};

// Post-activation values per activation layer, keyed by the 1-based
// activation-layer index.
template <typename T>
using ActivationTrace = std::map<int, Tensor<T>>;

template <typename T>
class Classifier {
 public:
  struct Layer {
    LayerSpec spec;
    Tensor<T> weight;  // Conv: [O,C,kh,kw]; Dense: [out,in]
    Tensor<T> bias;    // [out]
    Shape out_shape;
    int act_index = 0;  // 1-based among activation layers, 0 if none
  };

  Classifier() = default;

  Classifier(Shape input_shape, std::size_t num_classes,
             std::vector<LayerSpec> specs, std::uint64_t seed)
      : input_shape_(std::move(input_shape)), num_classes_(num_classes) {
    if (specs.empty()) throw config_error("classifier needs at least one layer");
    const LayerSpec& last = specs.back();
    if (last.kind != LayerSpec::Kind::Dense || last.units != num_classes ||
        last.act != Activation::None)
      throw config_error(
          "final layer must be a Dense head with num_classes outputs and no "
          "activation");
    Rng rng(Rng::derive(seed, 0xC1A55));
    Shape cur = input_shape_;
    int act_count = 0;
    for (const LayerSpec& spec : specs) {
      Layer layer;
      layer.spec = spec;
      switch (spec.kind) {
        case LayerSpec::Kind::Conv: {
          if (cur.size() != 3)
            throw config_error("conv layer needs a [C,H,W] input");
          const std::size_t cin = cur[0];
          const std::size_t fan_in = cin * spec.kernel * spec.kernel;
          layer.weight = he_uniform({spec.units, cin, spec.kernel, spec.kernel},
                                    fan_in, rng);
          layer.bias = Tensor<T>::zeros({spec.units});
          const long ho = (static_cast<long>(cur[1]) + 2L * spec.padding -
                           static_cast<long>(spec.kernel)) / spec.stride + 1;
          const long wo = (static_cast<long>(cur[2]) + 2L * spec.padding -
                           static_cast<long>(spec.kernel)) / spec.stride + 1;
          if (ho < 1 || wo < 1)
            throw config_error("conv layer produces non-positive extents");
          cur = {spec.units, static_cast<std::size_t>(ho),
                 static_cast<std::size_t>(wo)};
          break;
        }
        case LayerSpec::Kind::Dense: {
          if (cur.size() != 1)
            throw config_error("dense layer needs a flattened input");
          layer.weight = he_uniform({spec.units, cur[0]}, cur[0], rng);
          layer.bias = Tensor<T>::zeros({spec.units});
          cur = {spec.units};
          break;
        }
        case LayerSpec::Kind::Flatten: {
          cur = {shape_numel(cur)};
          break;
        }
        case LayerSpec::Kind::MaxPool2: {
          if (cur.size() != 3 || cur[1] < 2 || cur[2] < 2)
            throw config_error("maxpool layer needs a [C,H,W] input, H,W >= 2");
          cur = {cur[0], cur[1] / 2, cur[2] / 2};
          break;
        }
      }
      if (spec.act != Activation::None) layer.act_index = ++act_count;
      layer.out_shape = cur;
      layers_.push_back(std::move(layer));
    }
    if (cur != Shape{num_classes_})
      throw config_error("layer stack does not end in num_classes logits");
  }

  const Shape& input_shape() const { return input_shape_; }
  std::size_t num_classes() const { return num_classes_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers_mut() { return layers_; }

  // Number of activation layers L; bound keys live in 1..L.
  int activation_layer_count() const {
    int n = 0;
    for (const auto& layer : layers_)
      if (layer.act_index > 0) n = layer.act_index;
    return n;
  }

  const Layer& activation_layer(int index) const {
    for (const auto& layer : layers_)
      if (layer.act_index == index) return layer;
    throw index_error("no activation layer with index " + std::to_string(index));
  }

  Shape activation_shape(int index) const {
    return activation_layer(index).out_shape;
  }
  Activation activation_kind(int index) const {
    return activation_layer(index).spec.act;
  }

  // Shared handles onto the trainable tensors, in layer order.
  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> params;
    for (auto& layer : layers_) {
      if (!layer.weight.defined()) continue;
      params.push_back(layer.weight);
      params.push_back(layer.bias);
    }
    return params;
  }

  // Deep copy: fresh parameter storage, same structure.
  Classifier clone() const {
    Classifier copy;
    copy.input_shape_ = input_shape_;
    copy.num_classes_ = num_classes_;
    copy.layers_ = layers_;
    for (auto& layer : copy.layers_) {
      if (!layer.weight.defined()) continue;
      layer.weight = layer.weight.clone_detached();
      layer.bias = layer.bias.clone_detached();
    }
    return copy;
  }

 private:
  static Tensor<T> he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    auto t = Tensor<T>::random_uniform(std::move(shape), rng, -limit, limit);
    t.set_requires_grad(true);
    return t;
  }

  Shape input_shape_;
  std::size_t num_classes_ = 0;
  std::vector<Layer> layers_;
};

// The two desk-scale reference stacks. `hidden` swaps every hidden
// activation; the head stays linear.
inline std::vector<LayerSpec> reference_architecture(const std::string& name,
                                                     std::size_t num_classes,
                                                     Activation hidden) {
  if (name == "mlp-s")
    return {LayerSpec::flatten(), LayerSpec::dense(128, hidden),
            LayerSpec::dense(64, hidden),
            LayerSpec::dense(num_classes, Activation::None)};
  if (name == "cnn-s")
    return {LayerSpec::conv(16, 3, 1, 1, hidden), LayerSpec::maxpool2(),
            LayerSpec::conv(32, 3, 1, 1, hidden), LayerSpec::maxpool2(),
            LayerSpec::flatten(), LayerSpec::dense(128, hidden),
            LayerSpec::dense(num_classes, Activation::None)};
  throw config_error("unknown architecture '" + name + "'");
}

namespace detail {

template <typename T>
Tensor<T> forward_impl(const Classifier<T>& model, const Tensor<T>& x,
                       const BoundSet<T>* bounds, ActivationTrace<T>* trace) {
  if (x.shape() != model.input_shape())
    throw shape_error("forward: input shape " + shape_str(x.shape()) +
                      " does not match model input " +
                      shape_str(model.input_shape()));
  if (bounds) {
    const int layer_count = model.activation_layer_count();
    for (const auto& [key, tensor] : bounds->sigma)
      if (key < 1 || key > layer_count)
        throw config_error("bound key " + std::to_string(key) +
                           " outside activation layers 1.." +
                           std::to_string(layer_count));
  }
  Tensor<T> h = x;
  for (const auto& layer : model.layers()) {
    switch (layer.spec.kind) {
      case LayerSpec::Kind::Conv:
        h = add_channel_bias(
            conv2d(h, layer.weight, layer.spec.stride, layer.spec.padding),
            layer.bias);
        break;
      case LayerSpec::Kind::Dense:
        h = add(reshape(matmul(layer.weight, reshape(h, {h.size(), 1})),
                        {layer.spec.units}),
                layer.bias);
        break;
      case LayerSpec::Kind::Flatten:
        h = flatten(h);
        break;
      case LayerSpec::Kind::MaxPool2:
        h = maxpool2(h);
        break;
    }
    if (layer.spec.act != Activation::None) {
      h = activation(h, layer.spec.act);
      if (trace) trace->emplace(layer.act_index, h);
      if (bounds) {
        auto it = bounds->sigma.find(layer.act_index);
        if (it != bounds->sigma.end())
          h = bounds->post_mode == PostMode::Clip
                  ? clip_upper(h, it->second)
                  : reject_upper(h, it->second);
      }
    }
  }
  return h;
}

}  // namespace detail

template <typename T>
Tensor<T> forward(const Classifier<T>& model, const Tensor<T>& x) {
  return detail::forward_impl(model, x, nullptr, nullptr);
}

template <typename T>
Tensor<T> forward_traced(const Classifier<T>& model, const Tensor<T>& x,
                         ActivationTrace<T>& trace) {
  trace.clear();
  return detail::forward_impl(model, x, nullptr, &trace);
}

template <typename T>
Tensor<T> forward_bounded(const Classifier<T>& model, const Tensor<T>& x,
                          const BoundSet<T>& bounds) {
  return detail::forward_impl(model, x, &bounds, nullptr);
}

// Argmax class with ties broken toward the lowest index.
template <typename T>
int predict(const Classifier<T>& model, const Tensor<T>& x,
            const BoundSet<T>* bounds = nullptr) {
  NoGradGuard no_grad;
  Tensor<T> logits = bounds ? forward_bounded(model, x, *bounds)
                            : forward(model, x);
  auto lv = logits.values();
  std::size_t best = 0;
  for (std::size_t i = 1; i < lv.size(); ++i)
    if (lv[i] > lv[best]) best = i;
  return static_cast<int>(best);
}

template <typename T>
int predict(const Classifier<T>& model, const Image& img,
            const BoundSet<T>* bounds = nullptr) {
  return predict(model, to_tensor<T>(img), bounds);
}

struct TrainOptions {
  std::size_t epochs = 10;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct TrainLog {
  std::vector<double> epoch_loss;
  double final_train_accuracy = 0.0;
};

// Standard supervised cross-entropy training with Adam. Deterministic for a
// fixed seed: shuffling uses the library PRNG and batches are visited in
// shuffle order.
template <typename T>
TrainLog train(Classifier<T>& model, const std::vector<Image>& data,
               const TrainOptions& opts) {
  if (data.empty()) throw config_error("train: empty dataset");
  auto params = model.parameters();
  AdamState<T> state;
  state.reset(params);
  Rng shuffle_rng(Rng::derive(opts.seed, 0x5487FF));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainLog log;
  const std::size_t batch_size = std::max<std::size_t>(1, opts.batch_size);
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t stop = std::min(order.size(), start + batch_size);
      std::vector<Tensor<T>> losses;
      losses.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        const Image& img = data[order[i]];
        losses.push_back(softmax_cross_entropy(
            forward(model, to_tensor<T>(img)),
            static_cast<std::size_t>(img.label)));
      }
      Tensor<T> loss = scale(sum_of(losses), 1.0 / static_cast<double>(losses.size()));
      const double loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value))
        throw numeric_error("training diverged: non-finite loss");
      for (auto& p : params) p.zero_grad();
      loss.backward();
      adam_step(params, state, opts.lr);
      epoch_loss += loss_value * static_cast<double>(losses.size());
    }
    log.epoch_loss.push_back(epoch_loss / static_cast<double>(data.size()));
  }

  std::size_t correct = 0;
  for (const auto& img : data)
    if (predict(model, img) == img.label) ++correct;
  log.final_train_accuracy =
      static_cast<double>(correct) / static_cast<double>(data.size());
  return log;
}

}  // namespace aclip
