// Checkpoint container: a JSON manifest (format version, kind-specific
// metadata, tensor index with byte offsets) followed by a raw blob of
// little-endian float32 values. Round trips are bit-exact.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "aclip/error.hpp"
#include "aclip/tensor.hpp"

namespace aclip {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'A', 'C', 'L', 'P',
                                             'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

// Writes magic + u64 manifest length + manifest JSON + blob, atomically.
inline void write_checkpoint(const std::string& path, nlohmann::json meta,
                             const std::vector<NamedTensor>& tensors) {
  nlohmann::json index = nlohmann::json::array();
  std::string blob;
  for (const auto& t : tensors) {
    if (shape_numel(t.shape) != t.values.size())
      throw config_error("checkpoint tensor '" + t.name +
                         "' shape does not match value count");
    nlohmann::json entry;
    entry["name"] = t.name;
    entry["shape"] = t.shape;
    entry["offset"] = blob.size();
    entry["length"] = t.values.size() * sizeof(float);
    index.push_back(std::move(entry));
    const std::size_t old = blob.size();
    blob.resize(old + t.values.size() * sizeof(float));
    std::memcpy(blob.data() + old, t.values.data(),
                t.values.size() * sizeof(float));
  }
  meta["format_version"] = kCheckpointVersion;
  meta["tensors"] = std::move(index);
  const std::string manifest = meta.dump();

  std::string body;
  body.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t mlen = manifest.size();
  body.append(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  body.append(manifest);
  body.append(blob);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot write '" + tmp + "'");
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!out.good()) throw data_error("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec)
    throw data_error("cannot rename '" + tmp + "' to '" + path + "': " +
                     ec.message());
}

struct Checkpoint {
  nlohmann::json manifest;
  std::map<std::string, NamedTensor> tensors;

  const NamedTensor& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw data_error("checkpoint is missing tensor '" + name + "'");
    return it->second;
  }
};

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open '" + path + "'");
  std::string body((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (body.size() < sizeof(kCheckpointMagic) + sizeof(std::uint64_t) ||
      std::memcmp(body.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw data_error("'" + path + "' is not a checkpoint file");
  std::uint64_t mlen = 0;
  std::memcpy(&mlen, body.data() + sizeof(kCheckpointMagic), sizeof(mlen));
  const std::size_t header = sizeof(kCheckpointMagic) + sizeof(mlen);
  if (header + mlen > body.size())
    throw data_error("'" + path + "' truncated inside the manifest");

  Checkpoint ck;
  try {
    ck.manifest = nlohmann::json::parse(body.substr(header, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw data_error("'" + path + "' has a malformed manifest: " + e.what());
  }
  if (!ck.manifest.contains("format_version") ||
      ck.manifest["format_version"].get<int>() != kCheckpointVersion)
    throw data_error("'" + path + "' has an unsupported format version");

  const std::size_t blob_offset = header + mlen;
  const std::size_t blob_size = body.size() - blob_offset;
  for (const auto& entry : ck.manifest["tensors"]) {
    NamedTensor t;
    t.name = entry["name"].get<std::string>();
    t.shape = entry["shape"].get<Shape>();
    const auto offset = entry["offset"].get<std::uint64_t>();
    const auto length = entry["length"].get<std::uint64_t>();
    if (offset + length > blob_size)
      throw data_error("'" + path + "' tensor '" + t.name +
                       "' lies outside the blob (corrupt offsets)");
    if (shape_numel(t.shape) * sizeof(float) != length)
      throw data_error("'" + path + "' tensor '" + t.name +
                       "' shape disagrees with its byte length");
    t.values.resize(length / sizeof(float));
    std::memcpy(t.values.data(), body.data() + blob_offset + offset, length);
    ck.tensors.emplace(t.name, std::move(t));
  }
  return ck;
}

}  // namespace aclip
