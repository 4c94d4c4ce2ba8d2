// Desk-scale datasets: synthetic Gaussian blob clusters, and an IDX
// reader for optionally training targets on real digit data.
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dst/checkpoint.hpp"
#include "dst/nets.hpp"
#include "dst/random.hpp"
#include "dst/tensor.hpp"

namespace dst {

struct Dataset {
  DataShape shape;
  Tensor inputs;  // (N, D) or (N, C, H, W), values in [0,1]
  std::vector<int64_t> labels;
  std::vector<int64_t> train_idx, test_idx;
  int64_t class_count = 0;

  int64_t size() const { return static_cast<int64_t>(labels.size()); }

  void validate() const {
    if (static_cast<int64_t>(labels.size()) != inputs.shape[0])
      throw std::runtime_error("dataset: input/label count mismatch");
    for (int64_t l : labels)
      if (l < 0 || l >= class_count) throw std::runtime_error("dataset: label out of range");
    std::vector<char> seen(labels.size(), 0);
    for (int64_t i : train_idx) seen.at(static_cast<size_t>(i)) += 1;
    for (int64_t i : test_idx) seen.at(static_cast<size_t>(i)) += 1;
    for (char c : seen)
      if (c != 1) throw std::runtime_error("dataset: splits must be disjoint and exhaustive");
  }

  Tensor gather_inputs(const std::vector<int64_t>& idx) const {
    int64_t per = inputs.numel() / inputs.shape[0];
    Shape s = inputs.shape;
    s[0] = static_cast<int64_t>(idx.size());
    Tensor out(s);
    for (size_t i = 0; i < idx.size(); ++i)
      for (int64_t j = 0; j < per; ++j)
        out.data[i * static_cast<size_t>(per) + static_cast<size_t>(j)] =
            inputs.data[static_cast<size_t>(idx[i] * per + j)];
    return out;
  }

  std::vector<int64_t> gather_labels(const std::vector<int64_t>& idx) const {
    std::vector<int64_t> out;
    out.reserve(idx.size());
    for (int64_t i : idx) out.push_back(labels.at(static_cast<size_t>(i)));
    return out;
  }
};

// Gaussian clusters with class-separated means inside the unit box. The
// first two dimensions place means on a circle around (0.5, 0.5); extra
// dimensions stay at 0.5. Samples are clamped to [0,1].
inline Dataset gen_blobs(int64_t classes, int64_t dims, int64_t per_class, double spread,
                         uint64_t seed, double train_fraction = 0.8) {
  if (classes < 2 || dims < 2) throw std::invalid_argument("gen_blobs: need classes >= 2 and dims >= 2");
  if (spread <= 0.0) throw std::invalid_argument("gen_blobs: spread must be positive");
  Rng rng(seed);
  Dataset ds;
  ds.shape = {DataKind::vector, dims};
  ds.class_count = classes;
  int64_t n = classes * per_class;
  ds.inputs = Tensor({n, dims});
  ds.labels.resize(static_cast<size_t>(n));

  std::vector<std::vector<double>> means(static_cast<size_t>(classes), std::vector<double>(dims, 0.5));
  for (int64_t k = 0; k < classes; ++k) {
    double angle = 2.0 * M_PI * static_cast<double>(k) / static_cast<double>(classes);
    means[static_cast<size_t>(k)][0] = 0.5 + 0.3 * std::cos(angle);
    means[static_cast<size_t>(k)][1] = 0.5 + 0.3 * std::sin(angle);
  }
  int64_t row = 0;
  for (int64_t k = 0; k < classes; ++k)
    for (int64_t i = 0; i < per_class; ++i, ++row) {
      ds.labels[static_cast<size_t>(row)] = k;
      for (int64_t d = 0; d < dims; ++d) {
        double v = means[static_cast<size_t>(k)][static_cast<size_t>(d)] + rng.normal() * spread;
        ds.inputs.at2(row, d) = std::min(1.0, std::max(0.0, v));
      }
    }
  // deterministic interleaved split, per class
  int64_t train_per = static_cast<int64_t>(std::lround(train_fraction * static_cast<double>(per_class)));
  for (int64_t k = 0; k < classes; ++k)
    for (int64_t i = 0; i < per_class; ++i) {
      int64_t idx = k * per_class + i;
      (i < train_per ? ds.train_idx : ds.test_idx).push_back(idx);
    }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------
// IDX format (big-endian): images magic 0x00000803 with dims (N, rows,
// cols), labels magic 0x00000801 with dims (N), then raw bytes.
// ---------------------------------------------------------------------

namespace detail {

inline uint32_t read_be32(std::istream& f, const std::string& path) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (f.gcount() != 4) throw std::runtime_error("idx: truncated header in " + path);
  return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
         (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

}  // namespace detail

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        double train_fraction = 0.9) {
  std::ifstream imgf(images_path, std::ios::binary);
  if (!imgf) throw std::runtime_error("idx: cannot open " + images_path);
  uint32_t magic = detail::read_be32(imgf, images_path);
  if (magic != 0x00000803u)
    throw std::runtime_error("idx: bad magic in " + images_path + " (expected 0x00000803)");
  int64_t n = detail::read_be32(imgf, images_path);
  int64_t rows = detail::read_be32(imgf, images_path);
  int64_t cols = detail::read_be32(imgf, images_path);

  std::ifstream labf(labels_path, std::ios::binary);
  if (!labf) throw std::runtime_error("idx: cannot open " + labels_path);
  uint32_t lmagic = detail::read_be32(labf, labels_path);
  if (lmagic != 0x00000801u)
    throw std::runtime_error("idx: bad magic in " + labels_path + " (expected 0x00000801)");
  int64_t ln = detail::read_be32(labf, labels_path);
  if (ln != n)
    throw std::runtime_error("idx: image count " + std::to_string(n) + " does not match label count " +
                             std::to_string(ln));

  Dataset ds;
  ds.shape.kind = DataKind::image;
  ds.shape.channels = 1;
  ds.shape.height = rows;
  ds.shape.width = cols;
  ds.inputs = Tensor({n, 1, rows, cols});
  std::vector<unsigned char> buf(static_cast<size_t>(rows * cols));
  for (int64_t i = 0; i < n; ++i) {
    imgf.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (imgf.gcount() != static_cast<std::streamsize>(buf.size()))
      throw std::runtime_error("idx: truncated image payload in " + images_path);
    for (size_t j = 0; j < buf.size(); ++j)
      ds.inputs.data[static_cast<size_t>(i) * buf.size() + j] = static_cast<double>(buf[j]) / 255.0;
  }
  ds.labels.resize(static_cast<size_t>(n));
  int64_t max_label = 0;
  for (int64_t i = 0; i < n; ++i) {
    unsigned char b;
    labf.read(reinterpret_cast<char*>(&b), 1);
    if (labf.gcount() != 1) throw std::runtime_error("idx: truncated label payload in " + labels_path);
    ds.labels[static_cast<size_t>(i)] = b;
    max_label = std::max<int64_t>(max_label, b);
  }
  ds.class_count = max_label + 1;
  int64_t train_n = static_cast<int64_t>(std::lround(train_fraction * static_cast<double>(n)));
  for (int64_t i = 0; i < n; ++i) (i < train_n ? ds.train_idx : ds.test_idx).push_back(i);
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------
// Container round-trip (gen-data writes, other commands read).
// ---------------------------------------------------------------------

inline void save_dataset(const std::string& path, const Dataset& ds) {
  CheckpointWriter w;
  nlohmann::json meta;
  meta["kind"] = ds.shape.kind == DataKind::vector ? "vector" : "image";
  meta["dim"] = ds.shape.dim;
  meta["channels"] = ds.shape.channels;
  meta["height"] = ds.shape.height;
  meta["width"] = ds.shape.width;
  meta["class_count"] = ds.class_count;
  w.add_text("__dataset_meta__", meta.dump());
  w.add("inputs", ds.inputs, Dtype::f64);
  auto as_tensor = [](const std::vector<int64_t>& v) {
    Tensor t({std::max<int64_t>(1, static_cast<int64_t>(v.size()))});
    for (size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<double>(v[i]);
    if (v.empty()) t.data[0] = -1.0;
    return t;
  };
  w.add("labels", as_tensor(ds.labels), Dtype::f64);
  w.add("train_idx", as_tensor(ds.train_idx), Dtype::f64);
  w.add("test_idx", as_tensor(ds.test_idx), Dtype::f64);
  w.write(path);
}

inline Dataset load_dataset(const std::string& path) {
  CheckpointReader r(path);
  nlohmann::json meta = nlohmann::json::parse(r.text("__dataset_meta__"));
  Dataset ds;
  ds.shape.kind = meta.at("kind").get<std::string>() == "vector" ? DataKind::vector : DataKind::image;
  ds.shape.dim = meta.at("dim").get<int64_t>();
  ds.shape.channels = meta.at("channels").get<int64_t>();
  ds.shape.height = meta.at("height").get<int64_t>();
  ds.shape.width = meta.at("width").get<int64_t>();
  ds.class_count = meta.at("class_count").get<int64_t>();
  ds.inputs = r.tensor("inputs");
  auto as_indices = [](const Tensor& t) {
    std::vector<int64_t> v;
    for (double d : t.data) {
      if (d < 0) continue;  // empty-vector sentinel
      v.push_back(static_cast<int64_t>(d));
    }
    return v;
  };
  ds.labels = as_indices(r.tensor("labels"));
  ds.train_idx = as_indices(r.tensor("train_idx"));
  ds.test_idx = as_indices(r.tensor("test_idx"));
  ds.validate();
  return ds;
}

}  // namespace dst
