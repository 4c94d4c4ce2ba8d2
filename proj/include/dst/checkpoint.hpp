// Checkpoint container: magic "DSTCKPT1", a length-prefixed UTF-8 JSON
// manifest (name, dtype, shape, byte offset per entry), then raw
// little-endian payloads. fp64 entries round-trip bit-exactly; f32 and u8
// exist for compact export-only dumps.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dst/tensor.hpp"

namespace dst {

constexpr char kCheckpointMagic[8] = {'D', 'S', 'T', 'C', 'K', 'P', 'T', '1'};

enum class Dtype { f64, f32, u8 };

inline const char* dtype_name(Dtype d) {
  switch (d) {
    case Dtype::f64: return "f64";
    case Dtype::f32: return "f32";
    case Dtype::u8: return "u8";
  }
  return "?";
}

inline Dtype dtype_from_name(const std::string& s) {
  if (s == "f64") return Dtype::f64;
  if (s == "f32") return Dtype::f32;
  if (s == "u8") return Dtype::u8;
  throw std::runtime_error("checkpoint: unknown dtype '" + s + "'");
}

inline size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::f64: return 8;
    case Dtype::f32: return 4;
    case Dtype::u8: return 1;
  }
  return 0;
}

class CheckpointWriter {
 public:
  void add(const std::string& name, const Tensor& t, Dtype dtype = Dtype::f64) {
    Entry e;
    e.name = name;
    e.dtype = dtype;
    e.shape = t.shape;
    e.offset = payload_.size();
    if (dtype == Dtype::f64) {
      append_bytes(t.data.data(), t.data.size() * 8);
    } else if (dtype == Dtype::f32) {
      std::vector<float> f(t.data.begin(), t.data.end());
      append_bytes(f.data(), f.size() * 4);
    } else {
      std::vector<uint8_t> b(t.data.size());
      for (size_t i = 0; i < b.size(); ++i) b[i] = static_cast<uint8_t>(t.data[i]);
      append_bytes(b.data(), b.size());
    }
    entries_.push_back(std::move(e));
  }

  void add_text(const std::string& name, const std::string& text) {
    Entry e;
    e.name = name;
    e.dtype = Dtype::u8;
    e.shape = {static_cast<int64_t>(text.empty() ? 1 : text.size())};
    e.is_text = true;
    e.offset = payload_.size();
    if (text.empty())
      payload_.push_back(0);
    else
      append_bytes(text.data(), text.size());
    entries_.push_back(std::move(e));
  }

  void write(const std::string& path) const {
    nlohmann::json manifest = nlohmann::json::array();
    for (const Entry& e : entries_) {
      nlohmann::json j;
      j["name"] = e.name;
      j["dtype"] = e.is_text ? "text" : dtype_name(e.dtype);
      j["shape"] = e.shape;
      j["offset"] = e.offset;
      manifest.push_back(std::move(j));
    }
    std::string mtext = manifest.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    f.write(kCheckpointMagic, 8);
    uint64_t mlen = mtext.size();
    unsigned char lenb[8];
    for (int i = 0; i < 8; ++i) lenb[i] = static_cast<unsigned char>((mlen >> (8 * i)) & 0xff);
    f.write(reinterpret_cast<const char*>(lenb), 8);
    f.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    f.write(reinterpret_cast<const char*>(payload_.data()), static_cast<std::streamsize>(payload_.size()));
    if (!f) throw std::runtime_error("checkpoint: write to " + path + " failed");
  }

 private:
  struct Entry {
    std::string name;
    Dtype dtype = Dtype::f64;
    Shape shape;
    size_t offset = 0;
    bool is_text = false;
  };

  void append_bytes(const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    payload_.insert(payload_.end(), b, b + n);
  }

  std::vector<Entry> entries_;
  std::vector<unsigned char> payload_;  // little-endian host assumed
};

class CheckpointReader {
 public:
  explicit CheckpointReader(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (f.gcount() != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0)
      throw std::runtime_error("checkpoint: bad magic bytes in " + path);
    unsigned char lenb[8];
    f.read(reinterpret_cast<char*>(lenb), 8);
    if (f.gcount() != 8) throw std::runtime_error("checkpoint: truncated manifest length in " + path);
    uint64_t mlen = 0;
    for (int i = 0; i < 8; ++i) mlen |= static_cast<uint64_t>(lenb[i]) << (8 * i);
    std::string mtext(mlen, '\0');
    f.read(mtext.data(), static_cast<std::streamsize>(mlen));
    if (static_cast<uint64_t>(f.gcount()) != mlen)
      throw std::runtime_error("checkpoint: truncated manifest in " + path);
    payload_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    nlohmann::json manifest = nlohmann::json::parse(mtext);
    for (const auto& j : manifest) {
      Entry e;
      e.name = j.at("name").get<std::string>();
      std::string ds = j.at("dtype").get<std::string>();
      e.is_text = ds == "text";
      e.dtype = e.is_text ? Dtype::u8 : dtype_from_name(ds);
      e.shape = j.at("shape").get<Shape>();
      e.offset = j.at("offset").get<size_t>();
      size_t bytes = static_cast<size_t>(shape_numel(e.shape)) * dtype_size(e.dtype);
      if (e.offset + bytes > payload_.size())
        throw std::runtime_error("checkpoint: truncated payload for entry '" + e.name + "' in " + path);
      by_name_[e.name] = entries_.size();
      entries_.push_back(std::move(e));
    }
  }

  bool has(const std::string& name) const { return by_name_.count(name) > 0; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const Entry& e : entries_) out.push_back(e.name);
    return out;
  }

  Tensor tensor(const std::string& name) const {
    const Entry& e = find(name);
    int64_t n = shape_numel(e.shape);
    Tensor t(e.shape);
    const unsigned char* p = payload_.data() + e.offset;
    if (e.dtype == Dtype::f64) {
      std::memcpy(t.data.data(), p, static_cast<size_t>(n) * 8);
    } else if (e.dtype == Dtype::f32) {
      std::vector<float> f(static_cast<size_t>(n));
      std::memcpy(f.data(), p, static_cast<size_t>(n) * 4);
      for (int64_t i = 0; i < n; ++i) t.data[static_cast<size_t>(i)] = f[static_cast<size_t>(i)];
    } else {
      for (int64_t i = 0; i < n; ++i) t.data[static_cast<size_t>(i)] = p[i];
    }
    return t;
  }

  std::string text(const std::string& name) const {
    const Entry& e = find(name);
    if (!e.is_text) throw std::runtime_error("checkpoint: entry '" + name + "' is not text");
    return std::string(reinterpret_cast<const char*>(payload_.data() + e.offset),
                       static_cast<size_t>(shape_numel(e.shape)));
  }

 private:
  struct Entry {
    std::string name;
    Dtype dtype = Dtype::f64;
    Shape shape;
    size_t offset = 0;
    bool is_text = false;
  };

  const Entry& find(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::runtime_error("checkpoint: no entry named '" + name + "'");
    return entries_[it->second];
  }

  std::vector<Entry> entries_;
  std::map<std::string, size_t> by_name_;
  std::vector<unsigned char> payload_;
};

}  // namespace dst
