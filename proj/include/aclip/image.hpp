// Labeled image samples. Pixels are C*H*W row-major floats in [0,1];
// provenance records how a sample entered the dataset so that defender-side
// code can refuse anything that is not Clean.
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "aclip/error.hpp"
#include "aclip/tensor.hpp"

namespace aclip {

enum class Provenance { Clean, Poisoned, Negative };

inline const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::Clean: return "clean";
    case Provenance::Poisoned: return "poisoned";
    case Provenance::Negative: return "negative";
  }
  return "?";
}

struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;
  int label = 0;
  Provenance provenance = Provenance::Clean;

  std::size_t pixel_count() const { return pixels.size(); }

  float& at(int c, int y, int x) {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  float at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

inline Image make_image(int channels, int height, int width, int label,
                        Provenance prov = Provenance::Clean) {
  Image img;
  img.channels = channels;
  img.height = height;
  img.width = width;
  img.label = label;
  img.provenance = prov;
  img.pixels.assign(
      static_cast<std::size_t>(channels) * height * width, 0.0f);
  return img;
}

template <typename T>
Tensor<T> to_tensor(const Image& img) {
  std::vector<T> values(img.pixels.size());
  for (std::size_t i = 0; i < values.size(); ++i)
    values[i] = static_cast<T>(img.pixels[i]);
  return Tensor<T>::from_values({static_cast<std::size_t>(img.channels),
                                 static_cast<std::size_t>(img.height),
                                 static_cast<std::size_t>(img.width)},
                                std::move(values));
}

inline void require_clean(const std::vector<Image>& samples,
                          const std::string& who) {
  for (const auto& img : samples)
    if (img.provenance != Provenance::Clean)
      throw config_error(who + " accepts Clean-provenance samples only");
}

}  // namespace aclip
