#include "msl/model/checkpoint.hpp"

#include "msl/core/mgt_io.hpp"

#include <cstdio>
#include <stdexcept>

namespace msl::model {

namespace {

constexpr const char* kMetaPrefix = "meta:";

void put_tensor(std::string& out, const std::string& name, const Shape& shape, const float* data) {
  if (name.size() > 0xffff) throw std::invalid_argument("checkpoint: tensor name too long");
  le::put_u16(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  le::put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (Index d : shape) le::put_u32(out, static_cast<std::uint32_t>(d));
  for (Index i = 0; i < numel(shape); ++i) le::put_f32(out, data[i]);
}

}  // namespace

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t.tensor;
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& checkpoint) {
  std::string out = "MSLC";
  le::put_u32(out, kCheckpointVersion);
  le::put_u32(out, static_cast<std::uint32_t>(checkpoint.metadata.size() + checkpoint.tensors.size()));
  for (const auto& [key, text] : checkpoint.metadata) {
    std::vector<float> bytes;
    for (unsigned char c : text) bytes.push_back(static_cast<float>(c));
    put_tensor(out, kMetaPrefix + key, {static_cast<Index>(bytes.size())}, bytes.data());
  }
  for (const auto& t : checkpoint.tensors) {
    if (t.name.starts_with(kMetaPrefix)) {
      throw std::invalid_argument("checkpoint: tensor name '" + t.name + "' uses the metadata prefix");
    }
    put_tensor(out, t.name, t.tensor.shape(), t.tensor.data());
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  le::Reader r(bytes);
  if (r.take(4) != "MSLC") throw std::runtime_error("not an MSLC checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  Checkpoint c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16();
    std::string name(r.take(len));
    const std::uint32_t ndim = r.u32();
    if (ndim > 16) throw std::runtime_error("checkpoint: implausible rank for '" + name + "'");
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(r.u32());
    Tensor<float>::Storage values(numel(shape));
    for (Index k = 0; k < values.size(); ++k) values[k] = r.f32();
    if (name.starts_with(kMetaPrefix)) {
      std::string text;
      for (Index k = 0; k < values.size(); ++k) text.push_back(static_cast<char>(static_cast<int>(values[k])));
      c.metadata[name.substr(std::string(kMetaPrefix).size())] = std::move(text);
    } else {
      c.tensors.push_back({std::move(name), Tensor<float>(shape, std::move(values))});
    }
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  // Write-then-rename so an interrupted save never leaves a truncated checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  write_file(tmp, encode_checkpoint(checkpoint));
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

Checkpoint make_checkpoint(const MslModel<float>& model) {
  Checkpoint c;
  c.metadata[kConfigKey] = model.config().to_text();
  for (const auto& p : model.parameters()) c.tensors.push_back({p.name, p.tensor.detach()});
  return c;
}

MslModel<float> model_from_checkpoint(const Checkpoint& checkpoint) {
  auto it = checkpoint.metadata.find(kConfigKey);
  if (it == checkpoint.metadata.end()) throw std::runtime_error("checkpoint has no config record");
  MslModel<float> model(ModelConfig::from_text(it->second));
  model.load_values(checkpoint.tensors);
  return model;
}

std::string content_hash(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace msl::model
