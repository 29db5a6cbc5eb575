// SPDX-License-Identifier: Apache-2.0
#include "moelab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "moelab/errors.hpp"

namespace moelab {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename T>
void put(std::vector<char>& out, T value) {
  const auto* p = reinterpret_cast<const char*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<char>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)), sizeof(T));
    return value;
  }

  const char* take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<char> serialize_checkpoint(MoEModel& model) {
  std::vector<char> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string config = Json(model.config()).dump();
  put<std::uint64_t>(out, config.size());
  out.insert(out.end(), config.begin(), config.end());
  const auto params = model.parameters();
  put<std::uint64_t>(out, params.size());
  for (const auto& p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor->rank()));
    for (auto e : p.tensor->shape()) put<std::uint64_t>(out, e);
    const auto* raw = reinterpret_cast<const char*>(p.tensor->data().data());
    out.insert(out.end(), raw, raw + p.tensor->numel() * sizeof(double));
  }
  return out;
}

MoEModel deserialize_checkpoint(const std::vector<char>& bytes) {
  Reader in(bytes);
  if (std::memcmp(in.take(sizeof kCheckpointMagic), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw IoError("not a checkpoint: bad magic");
  }
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto config_len = in.get<std::uint64_t>();
  const char* config_text = in.take(config_len);
  MoEModelConfig config;
  try {
    config = Json::parse(config_text, config_text + config_len).get<MoEModelConfig>();
  } catch (const Json::exception& e) {
    throw IoError(std::string("checkpoint config block is not valid JSON: ") + e.what());
  }
  MoEModel model = MoEModel::uninitialized(config);
  std::map<std::string, Tensor*> slots;
  for (auto& p : model.parameters()) slots.emplace(p.name, p.tensor);

  const auto count = in.get<std::uint64_t>();
  if (count != slots.size()) {
    throw IoError("checkpoint holds " + std::to_string(count) + " tensors, config expects " +
                  std::to_string(slots.size()));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = in.get<std::uint32_t>();
    const std::string name(in.take(name_len), name_len);
    const auto rank = in.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& e : shape) e = in.get<std::uint64_t>();
    auto it = slots.find(name);
    if (it == slots.end()) throw IoError("unexpected tensor '" + name + "' in checkpoint");
    if (it->second->shape() != shape) {
      throw IoError("tensor '" + name + "' has shape " + shape_string(shape) + ", expected " +
                    shape_string(it->second->shape()));
    }
    const char* raw = in.take(shape_numel(shape) * sizeof(double));
    std::memcpy(it->second->data().data(), raw, shape_numel(shape) * sizeof(double));
  }
  if (!in.done()) throw IoError("trailing bytes after checkpoint payload");
  return model;
}

void save_checkpoint(const std::filesystem::path& path, MoEModel& model) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing checkpoint " + path.string());
}

MoEModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace moelab
