#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sarg/errors.hpp"
#include "sarg/optim.hpp"

namespace sarg {

inline constexpr char kCheckpointMagic[8] = {'S', 'A', 'R', 'G', 'C', 'K', 'P', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& buf, double d) {
  uint64_t u;
  std::memcpy(&u, &d, 8);
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  ByteReader(const std::string& data, const std::string& path) : data_(data), path_(path) {}

  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<unsigned char>(data_[pos_ + static_cast<size_t>(i)])) << (8 * i);
    pos_ += 4;
    return v;
  }

  double f64() {
    need(8);
    uint64_t u = 0;
    for (int i = 0; i < 8; ++i)
      u |= static_cast<uint64_t>(static_cast<unsigned char>(data_[pos_ + static_cast<size_t>(i)])) << (8 * i);
    pos_ += 8;
    double d;
    std::memcpy(&d, &u, 8);
    return d;
  }

  std::string bytes(size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(size_t n) {
    if (pos_ + n > data_.size()) throw IoError("truncated checkpoint file: " + path_);
  }
  const std::string& data_;
  std::string path_;
  size_t pos_ = 0;
};

}  // namespace detail

struct CheckpointEntry {
  std::vector<int> shape;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::json header;  // format_version, config, vocab, step
  std::map<std::string, CheckpointEntry> entries;
};

// Layout: 8-byte magic, u32 format version, u32 header length + JSON header,
// u32 entry count, then per entry u32 name length + name, u32 ndim + dims,
// and the payload as little-endian f64. Optimizer moments ride along as
// "adam_m/<name>" and "adam_v/<name>" entries.
inline void save_checkpoint(const std::string& path, nlohmann::json header,
                            const ParamRegistry& params, const Adam* opt = nullptr) {
  header["format_version"] = kCheckpointVersion;
  std::string header_bytes = header.dump();

  std::vector<std::pair<std::string, const std::vector<double>*>> flat;
  std::vector<std::pair<std::string, std::vector<int>>> shapes;
  for (const auto& p : params.all()) {
    flat.emplace_back(p.name, &p.value);
    shapes.emplace_back(p.name, p.shape);
  }
  if (opt) {
    for (const auto& p : params.all()) {
      auto mi = opt->first_moments().find(p.name);
      if (mi != opt->first_moments().end()) {
        flat.emplace_back("adam_m/" + p.name, &mi->second);
        shapes.emplace_back("adam_m/" + p.name, p.shape);
      }
      auto vi = opt->second_moments().find(p.name);
      if (vi != opt->second_moments().end()) {
        flat.emplace_back("adam_v/" + p.name, &vi->second);
        shapes.emplace_back("adam_v/" + p.name, p.shape);
      }
    }
  }

  std::string buf;
  buf.append(kCheckpointMagic, 8);
  detail::put_u32(buf, kCheckpointVersion);
  detail::put_u32(buf, static_cast<uint32_t>(header_bytes.size()));
  buf += header_bytes;
  detail::put_u32(buf, static_cast<uint32_t>(flat.size()));
  for (size_t e = 0; e < flat.size(); ++e) {
    const auto& [name, data] = flat[e];
    const auto& shape = shapes[e].second;
    detail::put_u32(buf, static_cast<uint32_t>(name.size()));
    buf += name;
    detail::put_u32(buf, static_cast<uint32_t>(shape.size()));
    for (int d : shape) detail::put_u32(buf, static_cast<uint32_t>(d));
    for (double v : *data) detail::put_f64(buf, v);
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  detail::ByteReader r(data, path);
  if (r.bytes(8) != std::string(kCheckpointMagic, 8))
    throw IoError("not a checkpoint file (bad magic): " + path);
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
  const uint32_t header_len = r.u32();

  Checkpoint ckp;
  try {
    ckp.header = nlohmann::json::parse(r.bytes(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path + ": " + e.what());
  }
  const uint32_t n_entries = r.u32();
  for (uint32_t e = 0; e < n_entries; ++e) {
    const std::string name = r.bytes(r.u32());
    const uint32_t ndim = r.u32();
    CheckpointEntry entry;
    size_t n = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      entry.shape.push_back(static_cast<int>(r.u32()));
      n *= static_cast<size_t>(entry.shape.back());
    }
    entry.values.resize(n);
    for (size_t i = 0; i < n; ++i) entry.values[i] = r.f64();
    ckp.entries[name] = std::move(entry);
  }
  if (!r.done()) throw IoError("trailing bytes in checkpoint: " + path);
  return ckp;
}

// Copies matching entries into the registry; optimizer entries are skipped.
inline void restore_params(const Checkpoint& ckp, ParamRegistry& params) {
  for (auto& p : params.all()) {
    auto it = ckp.entries.find(p.name);
    if (it == ckp.entries.end()) throw IoError("checkpoint is missing parameter: " + p.name);
    if (it->second.shape != p.shape)
      throw IoError("checkpoint shape mismatch for " + p.name + ": " +
                    ad::shape_str(it->second.shape) + " vs " + ad::shape_str(p.shape));
    p.value = it->second.values;
  }
}

// Returns the training step recorded in the header.
inline long restore_optimizer(const Checkpoint& ckp, Adam& opt) {
  std::unordered_map<std::string, std::vector<double>> m, v;
  for (const auto& [name, entry] : ckp.entries) {
    if (name.rfind("adam_m/", 0) == 0) m[name.substr(7)] = entry.values;
    if (name.rfind("adam_v/", 0) == 0) v[name.substr(7)] = entry.values;
  }
  const long step = ckp.header.value("step", 0L);
  opt.restore(step, std::move(m), std::move(v));
  return step;
}

}  // namespace sarg
