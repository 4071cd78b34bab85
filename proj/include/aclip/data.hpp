// Dataset sources: a synthetic multi-class shape renderer (desk-scale
// stand-in for natural-image benchmarks) and a big-endian IDX reader for
// MNIST-style files.
#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "aclip/error.hpp"
#include "aclip/image.hpp"
#include "aclip/rng.hpp"

namespace aclip {

namespace detail {

enum class ShapeKind {
  Square,
  Disk,
  Cross,
  Triangle,
  Ring,
  DiagCross,
  HBar,
  VBar
};

inline bool shape_mask(ShapeKind kind, double dx, double dy, double r) {
  const double ax = std::fabs(dx), ay = std::fabs(dy);
  const double bar = std::fmax(1.0, r / 3.0);
  switch (kind) {
    case ShapeKind::Square: return ax <= r && ay <= r;
    case ShapeKind::Disk: return dx * dx + dy * dy <= r * r;
    case ShapeKind::Cross:
      return (ax <= bar && ay <= r) || (ay <= bar && ax <= r);
    case ShapeKind::Triangle:
      return ay <= r && ax <= (dy + r) * 0.6;
    case ShapeKind::Ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= (r * 0.5) * (r * 0.5);
    }
    case ShapeKind::DiagCross:
      return ax <= r && ay <= r && std::fabs(ax - ay) <= bar;
    case ShapeKind::HBar: return ay <= bar && ax <= r;
    case ShapeKind::VBar: return ax <= bar && ay <= r;
  }
  return false;
}

}  // namespace detail

// Renders `n` images of `classes` distinct shape kinds (class = shape kind,
// assigned round-robin) at random position/scale/color over a dim noise
// background. Deterministic for a fixed seed.
inline std::vector<Image> gen_shapes_dataset(std::size_t n, int classes,
                                             int image_size,
                                             std::uint64_t seed,
                                             int channels = 3) {
  if (classes < 2 || classes > 8)
    throw config_error("gen_shapes_dataset: classes must be in 2..8");
  if (image_size < 12)
    throw config_error("gen_shapes_dataset: image_size must be >= 12");
  if (channels < 1) throw config_error("gen_shapes_dataset: channels >= 1");

  Rng rng(Rng::derive(seed, 0xDA7A));
  std::vector<Image> images;
  images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(classes));
    Image img = make_image(channels, image_size, image_size, label);
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform(0.0, 0.35));

    std::vector<double> color(channels);
    for (auto& c : color) c = rng.uniform(0.6, 1.0);
    const double r = rng.uniform(0.17, 0.28) * image_size;
    const double margin = r + 1.0;
    const double cx = rng.uniform(margin, image_size - margin);
    const double cy = rng.uniform(margin, image_size - margin);
    const auto kind = static_cast<detail::ShapeKind>(label);

    for (int y = 0; y < image_size; ++y)
      for (int x = 0; x < image_size; ++x)
        if (detail::shape_mask(kind, x - cx, y - cy, r))
          for (int c = 0; c < channels; ++c)
            img.at(c, y, x) = static_cast<float>(color[c]);
    images.push_back(std::move(img));
  }
  return images;
}

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

inline std::uint32_t read_u32_be(const std::vector<std::uint8_t>& buf,
                                 std::size_t offset, const std::string& path) {
  if (offset + 4 > buf.size())
    throw data_error("'" + path + "' truncated: expected 4 bytes at offset " +
                     std::to_string(offset));
  return (static_cast<std::uint32_t>(buf[offset]) << 24) |
         (static_cast<std::uint32_t>(buf[offset + 1]) << 16) |
         (static_cast<std::uint32_t>(buf[offset + 2]) << 8) |
         static_cast<std::uint32_t>(buf[offset + 3]);
}

inline std::string hex_u32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "0x%08x", v);
  return buf;
}

}  // namespace detail

// Reads an IDX image/label file pair (big-endian, magic 0x00000803 for
// images and 0x00000801 for labels). Pixels are scaled to [0,1] by /255.
inline std::vector<Image> load_idx(const std::string& images_path,
                                   const std::string& labels_path) {
  const auto img_buf = detail::read_file(images_path);
  const auto lbl_buf = detail::read_file(labels_path);

  const std::uint32_t img_magic = detail::read_u32_be(img_buf, 0, images_path);
  if (img_magic != 0x00000803u)
    throw data_error("'" + images_path + "' has magic " +
                     detail::hex_u32(img_magic) + ", expected 0x00000803");
  const std::uint32_t count = detail::read_u32_be(img_buf, 4, images_path);
  const std::uint32_t rows = detail::read_u32_be(img_buf, 8, images_path);
  const std::uint32_t cols = detail::read_u32_be(img_buf, 12, images_path);
  const std::size_t expected =
      16 + static_cast<std::size_t>(count) * rows * cols;
  if (img_buf.size() != expected)
    throw data_error("'" + images_path + "' truncated: header promises " +
                     std::to_string(expected) + " bytes, file has " +
                     std::to_string(img_buf.size()));

  const std::uint32_t lbl_magic = detail::read_u32_be(lbl_buf, 0, labels_path);
  if (lbl_magic != 0x00000801u)
    throw data_error("'" + labels_path + "' has magic " +
                     detail::hex_u32(lbl_magic) + ", expected 0x00000801");
  const std::uint32_t lbl_count = detail::read_u32_be(lbl_buf, 4, labels_path);
  if (lbl_buf.size() != 8 + static_cast<std::size_t>(lbl_count))
    throw data_error("'" + labels_path + "' truncated: header promises " +
                     std::to_string(8 + lbl_count) + " bytes, file has " +
                     std::to_string(lbl_buf.size()));
  if (count != lbl_count)
    throw data_error("image/label count mismatch: " + std::to_string(count) +
                     " images vs " + std::to_string(lbl_count) + " labels");

  std::vector<Image> images;
  images.reserve(count);
  std::size_t offset = 16;
  for (std::uint32_t i = 0; i < count; ++i) {
    Image img = make_image(1, static_cast<int>(rows), static_cast<int>(cols),
                           static_cast<int>(lbl_buf[8 + i]));
    for (auto& p : img.pixels)
      p = static_cast<float>(img_buf[offset++]) / 255.0f;
    images.push_back(std::move(img));
  }
  return images;
}

}  // namespace aclip
