// Per-layer, per-unit upper bounds on post-activation values. Keys are
// 1-based activation-layer indices; a layer absent from the map is unbounded.
#pragma once

#include <cmath>
#include <map>

#include "aclip/tensor.hpp"

namespace aclip {

// FeatureMap keeps one bound per activation element (a full feature map for
// convolution layers); PerChannel pools spatially to a [C,1,1] bound.
enum class BoundShape { FeatureMap, PerChannel };

// How bounded values are treated at inference: clipped to the bound, or
// rejected (set to zero).
enum class PostMode { Clip, Reject };

inline const char* bound_shape_name(BoundShape s) {
  return s == BoundShape::FeatureMap ? "featuremap" : "perchannel";
}
inline const char* post_mode_name(PostMode m) {
  return m == PostMode::Clip ? "clip" : "reject";
}

inline BoundShape bound_shape_from_name(const std::string& name) {
  if (name == "featuremap") return BoundShape::FeatureMap;
  if (name == "perchannel") return BoundShape::PerChannel;
  throw config_error("unknown bound shape '" + name + "'");
}
inline PostMode post_mode_from_name(const std::string& name) {
  if (name == "clip") return PostMode::Clip;
  if (name == "reject") return PostMode::Reject;
  throw config_error("unknown post mode '" + name + "'");
}

template <typename T>
struct BoundSet {
  std::map<int, Tensor<T>> sigma;
  BoundShape bound_shape = BoundShape::FeatureMap;
  PostMode post_mode = PostMode::Clip;

  bool empty() const { return sigma.empty(); }

  // Global L1 mass of the bounds (double accumulation, logging/contract use).
  double l1() const {
    double acc = 0.0;
    for (const auto& [layer, tensor] : sigma)
      for (T v : tensor.values()) acc += std::fabs(static_cast<double>(v));
    return acc;
  }

  BoundSet clone() const {
    BoundSet copy;
    copy.bound_shape = bound_shape;
    copy.post_mode = post_mode;
    for (const auto& [layer, tensor] : sigma)
      copy.sigma.emplace(layer, tensor.clone_detached());
    return copy;
  }
};

}  // namespace aclip
