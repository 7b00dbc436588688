#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "afdet/common.hpp"
#include "afdet/nn/layers.hpp"
#include "afdet/nn/optim.hpp"
#include "afdet/tensor.hpp"

namespace afdet::nn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian");

inline constexpr char kCheckpointMagic[4] = {'A', 'F', 'D', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else if constexpr (std::is_same_v<T, double>) return "f64";
  else return "i32";
}

struct CheckpointMeta {
  std::int64_t iteration = 0;
  std::string config_hash;
  bool has_ema = false;
  double ema_decay = 0.0;
};

namespace detail {

template <typename T>
void write_block(std::ofstream& os, const TensorT<T>& t) {
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(sizeof(T) * t.numel()));
}

template <typename T>
void read_block(std::ifstream& is, TensorT<T>& t, const std::string& what) {
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(sizeof(T) * t.numel()));
  require(static_cast<bool>(is), "checkpoint: truncated payload at " + what);
}

inline nlohmann::json shape_json(const std::vector<std::int64_t>& shape) {
  return nlohmann::json(shape);
}

}  // namespace detail

// Container layout: magic, u32 version, u64 header length, JSON header,
// then raw little-endian blocks in this order: parameter values (declaration
// order), named buffers, velocities (parallel to parameters), EMA shadows
// (parallel section, present only when has_ema).
template <typename T>
void save_checkpoint(
    const std::string& path, const std::vector<ParamT<T>*>& params,
    const std::vector<std::pair<std::string, TensorT<T>*>>& buffers,
    const EmaStateT<T>* ema, std::int64_t iteration,
    const std::string& config_hash) {
  if (ema)
    require(ema->shadow.size() == params.size(),
            "save_checkpoint: EMA shadow count mismatch");

  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["dtype"] = dtype_name<T>();
  header["iteration"] = iteration;
  header["config_hash"] = config_hash;
  header["has_ema"] = ema != nullptr;
  if (ema) header["ema_decay"] = ema->decay;
  auto& jp = header["params"] = nlohmann::json::array();
  for (const ParamT<T>* p : params)
    jp.push_back({{"name", p->name}, {"shape", detail::shape_json(p->value.shape())}});
  auto& jb = header["buffers"] = nlohmann::json::array();
  for (const auto& [name, tensor] : buffers)
    jb.push_back({{"name", name}, {"shape", detail::shape_json(tensor->shape())}});

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    require(os.good(), "save_checkpoint: cannot open " + tmp);
    const std::string htext = header.dump();
    const std::uint64_t hlen = htext.size();
    os.write(kCheckpointMagic, 4);
    os.write(reinterpret_cast<const char*>(&kCheckpointVersion), 4);
    os.write(reinterpret_cast<const char*>(&hlen), 8);
    os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const ParamT<T>* p : params) detail::write_block(os, p->value);
    for (const auto& [name, tensor] : buffers) detail::write_block(os, *tensor);
    for (const ParamT<T>* p : params) detail::write_block(os, p->velocity);
    if (ema)
      for (const auto& s : ema->shadow) detail::write_block(os, s);
    require(os.good(), "save_checkpoint: write failed for " + tmp);
  }
  require(std::rename(tmp.c_str(), path.c_str()) == 0,
          "save_checkpoint: cannot move " + tmp + " into place");
}

// Loads a checkpoint into a live model. Parameter and buffer names/shapes
// must match the model's declaration order exactly. When the file carries an
// EMA section and `ema` is non-null the shadows are restored as well.
template <typename T>
CheckpointMeta load_checkpoint(
    const std::string& path, const std::vector<ParamT<T>*>& params,
    const std::vector<std::pair<std::string, TensorT<T>*>>& buffers,
    EmaStateT<T>* ema) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "load_checkpoint: cannot open " + path);

  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t hlen = 0;
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(&version), 4);
  is.read(reinterpret_cast<char*>(&hlen), 8);
  require(static_cast<bool>(is) && std::equal(magic, magic + 4, kCheckpointMagic),
          "load_checkpoint: bad magic in " + path);
  require(version == kCheckpointVersion,
          "load_checkpoint: unsupported version " + std::to_string(version));
  std::string htext(hlen, '\0');
  is.read(htext.data(), static_cast<std::streamsize>(hlen));
  require(static_cast<bool>(is), "load_checkpoint: truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(htext);
  } catch (const nlohmann::json::parse_error& e) {
    throw RuntimeFailure(std::string("load_checkpoint: invalid header: ") +
                         e.what());
  }
  require(header.value("dtype", "") == dtype_name<T>(),
          "load_checkpoint: dtype mismatch");

  const auto check_section = [](const nlohmann::json& list, std::size_t n,
                                const std::string& what) {
    require(list.is_array() && list.size() == n,
            "load_checkpoint: " + what + " count mismatch");
  };
  const auto& jp = header.at("params");
  check_section(jp, params.size(), "parameter");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(jp[i].at("name").get<std::string>() == params[i]->name,
            "load_checkpoint: parameter name mismatch at index " +
                std::to_string(i) + " (" + params[i]->name + ")");
    const auto shape = jp[i].at("shape").get<std::vector<std::int64_t>>();
    require(shape == params[i]->value.shape(),
            "load_checkpoint: shape mismatch for " + params[i]->name);
  }
  const auto& jb = header.at("buffers");
  check_section(jb, buffers.size(), "buffer");
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    require(jb[i].at("name").get<std::string>() == buffers[i].first,
            "load_checkpoint: buffer name mismatch for " + buffers[i].first);
    const auto shape = jb[i].at("shape").get<std::vector<std::int64_t>>();
    require(shape == buffers[i].second->shape(),
            "load_checkpoint: shape mismatch for " + buffers[i].first);
  }

  for (ParamT<T>* p : params) detail::read_block(is, p->value, p->name);
  for (auto& [name, tensor] : buffers) detail::read_block(is, *tensor, name);
  for (ParamT<T>* p : params)
    detail::read_block(is, p->velocity, p->name + ".velocity");

  CheckpointMeta meta;
  meta.iteration = header.value("iteration", std::int64_t{0});
  meta.config_hash = header.value("config_hash", "");
  meta.has_ema = header.value("has_ema", false);
  meta.ema_decay = header.value("ema_decay", 0.0);
  if (meta.has_ema && ema) {
    ema->decay = meta.ema_decay;
    ema->shadow.clear();
    ema->shadow.reserve(params.size());
    for (const ParamT<T>* p : params) {
      TensorT<T> s(p->value.shape());
      detail::read_block(is, s, p->name + ".ema");
      ema->shadow.push_back(std::move(s));
    }
  }
  return meta;
}

// Small named-tensor archive reusing the same container (used by the CLI for
// encoded targets and heatmap dumps).
template <typename T>
void save_tensor_archive(
    const std::string& path,
    const std::vector<std::pair<std::string, const TensorT<T>*>>& tensors,
    const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["dtype"] = dtype_name<T>();
  header["extra"] = extra;
  auto& jt = header["tensors"] = nlohmann::json::array();
  for (const auto& [name, tensor] : tensors)
    jt.push_back({{"name", name}, {"shape", detail::shape_json(tensor->shape())}});

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    require(os.good(), "save_tensor_archive: cannot open " + tmp);
    const std::string htext = header.dump();
    const std::uint64_t hlen = htext.size();
    os.write(kCheckpointMagic, 4);
    os.write(reinterpret_cast<const char*>(&kCheckpointVersion), 4);
    os.write(reinterpret_cast<const char*>(&hlen), 8);
    os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const auto& [name, tensor] : tensors) detail::write_block(os, *tensor);
    require(os.good(), "save_tensor_archive: write failed");
  }
  require(std::rename(tmp.c_str(), path.c_str()) == 0,
          "save_tensor_archive: cannot move " + tmp + " into place");
}

template <typename T>
std::vector<std::pair<std::string, TensorT<T>>> load_tensor_archive(
    const std::string& path, nlohmann::json* extra = nullptr) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "load_tensor_archive: cannot open " + path);
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t hlen = 0;
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(&version), 4);
  is.read(reinterpret_cast<char*>(&hlen), 8);
  require(static_cast<bool>(is) && std::equal(magic, magic + 4, kCheckpointMagic),
          "load_tensor_archive: bad magic");
  require(version == kCheckpointVersion, "load_tensor_archive: bad version");
  std::string htext(hlen, '\0');
  is.read(htext.data(), static_cast<std::streamsize>(hlen));
  require(static_cast<bool>(is), "load_tensor_archive: truncated header");
  const auto header = nlohmann::json::parse(htext);
  require(header.value("dtype", "") == dtype_name<T>(),
          "load_tensor_archive: dtype mismatch");
  if (extra) *extra = header.value("extra", nlohmann::json::object());

  std::vector<std::pair<std::string, TensorT<T>>> out;
  for (const auto& jt : header.at("tensors")) {
    const auto name = jt.at("name").get<std::string>();
    const auto shape = jt.at("shape").get<std::vector<std::int64_t>>();
    TensorT<T> t(shape);
    detail::read_block(is, t, name);
    out.emplace_back(name, std::move(t));
  }
  return out;
}

}  // namespace afdet::nn
